use nisqa_nn::{Adam, AdamConfig, Graph, Mode, ParamStore, Tensor};

fn bowl_loss(p: &ParamStore<f64>) -> (f64, nisqa_nn::Gradients<f64>) {
    let mut g = Graph::new(p, Mode::Eval, 0);
    let w = g.param("w").unwrap();
    let l = g.weighted_squared_error(w, vec![1.0, -2.0, 0.5], vec![1.0, 3.0, 0.2]).unwrap();
    (g.value(l).data()[0], g.backward(l).unwrap())
}

#[test]
fn quadratic_bowl_loss_decreases_every_step() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new([3], vec![4.0, 4.0, 4.0]).unwrap()).unwrap();
    let mut opt = Adam::new(&p, AdamConfig { lr: 0.1, ..AdamConfig::default() });
    let (mut prev, mut grads) = bowl_loss(&p);
    for _ in 0..10 {
        opt.step(&mut p, &grads).unwrap();
        let (loss, g) = bowl_loss(&p);
        assert!(loss < prev, "{loss} !< {prev}");
        prev = loss;
        grads = g;
    }
    assert_eq!(opt.steps_taken(), 10);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::<f32>::from_fn([4, 8], |i| (i as f32 * 0.1).sin())).unwrap();
    let run = || {
        let mut g = Graph::new(&p, Mode::Train, 7);
        let x = g.input(Tensor::from_fn([5, 8], |i| (i as f32).cos()));
        let w = g.param("w").unwrap();
        let y = g.linear(x, w, None).unwrap();
        let y = g.dropout(y, 0.3).unwrap();
        let s = g.sum(y).unwrap();
        (g.value(s).clone(), g.backward(s).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert_eq!(ga, gb);
}
