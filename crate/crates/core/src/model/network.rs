use nisqa_nn::{Graph, Mode, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Framewise, ModelConfig, Pooling, TimeDependency};
use crate::error::{Error, Result};
use crate::features::{MelSegments, N_MELS, SEG_LEN, SEG_WIDTH};
use crate::scores::{QualityScores, Task};

/// Per-segment feature width produced by the CNN and FFN front ends.
pub const CNN_OUT: usize = 384;
const CNN_CHANNELS: [(usize, usize); 6] = [(1, 16), (16, 16), (16, 32), (32, 32), (32, 64), (64, 64)];
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in ±√(1/fan_in).
    FanIn(usize),
    Ones,
    Zeros,
}

/// Name and shape of one model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    init: Init,
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, dims: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, dims, init });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(format!("{prefix}.weight"), vec![d_out, d_in], Init::FanIn(d_in));
        self.push(format!("{prefix}.bias"), vec![d_out], Init::FanIn(d_in));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gain"), vec![d], Init::Ones);
        self.push(format!("{prefix}.shift"), vec![d], Init::Zeros);
    }

    fn sa(&mut self, prefix: &str, c: &ModelConfig) {
        for i in 0..c.sa_depth {
            for part in ["q", "k", "v", "out"] {
                self.linear(&format!("{prefix}.{i}.{part}"), c.d_tf, c.d_tf);
            }
            self.norm(&format!("{prefix}.{i}.norm1"), c.d_tf);
            self.linear(&format!("{prefix}.{i}.ff1"), c.d_tf, c.d_tf_ff);
            self.linear(&format!("{prefix}.{i}.ff2"), c.d_tf_ff, c.d_tf);
            self.norm(&format!("{prefix}.{i}.norm2"), c.d_tf);
        }
    }

    fn lstm(&mut self, prefix: &str, d_in: usize, hidden: usize) {
        for dir in ["fwd", "bwd"] {
            self.push(format!("{prefix}.{dir}.w_ih"), vec![4 * hidden, d_in], Init::FanIn(d_in));
            self.push(format!("{prefix}.{dir}.w_hh"), vec![4 * hidden, hidden], Init::FanIn(hidden));
            self.push(format!("{prefix}.{dir}.bias"), vec![4 * hidden], Init::FanIn(hidden));
        }
    }
}

/// Every parameter of the configured architecture, in canonical order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs(Vec::new());
    match c.framewise {
        Framewise::Cnn => {
            for (i, &(ci, co)) in CNN_CHANNELS.iter().enumerate() {
                let fan_in = ci * KERNEL * KERNEL;
                s.push(format!("cnn.conv{}.weight", i + 1), vec![co, ci, KERNEL, KERNEL], Init::FanIn(fan_in));
                s.push(format!("cnn.conv{}.bias", i + 1), vec![co], Init::FanIn(fan_in));
            }
        }
        Framewise::Ffn => {
            let mut d_in = SEG_LEN;
            for i in 1..=c.ffn_layers {
                s.linear(&format!("ffn.fc{i}"), d_in, c.ffn_hidden);
                d_in = c.ffn_hidden;
            }
            s.linear("ffn.out", d_in, CNN_OUT);
        }
        Framewise::Skip => {}
    }
    s.linear("td.proj", c.framewise_dim(), c.d_tf);
    let two_h = 2 * c.lstm_hidden;
    match c.td {
        TimeDependency::Skip => {}
        TimeDependency::Sa => s.sa("td.sa", c),
        TimeDependency::Lstm => s.lstm("td.lstm", c.d_tf, c.lstm_hidden),
        TimeDependency::LstmSa => {
            s.lstm("td.lstm", c.d_tf, c.lstm_hidden);
            s.linear("td.adapter", two_h, c.d_tf);
            s.sa("td.sa", c);
        }
        TimeDependency::SaLstm => {
            s.sa("td.sa", c);
            s.linear("td.adapter", c.d_tf, c.d_tf);
            s.lstm("td.lstm", c.d_tf, c.lstm_hidden);
        }
    }
    let d = c.td_dim();
    for task in Task::ALL {
        let key = task.key();
        if c.pooling == Pooling::Attention {
            s.linear(&format!("head.{key}.score1"), d, c.ap_hidden);
            s.linear(&format!("head.{key}.score2"), c.ap_hidden, 1);
        }
        s.linear(&format!("head.{key}.out"), d, 1);
    }
    s.0
}

/// Padded batch of segment sequences, `[B·L, 1, 48, 15]` plus a `B·L` mask.
#[derive(Debug, Clone)]
pub struct SegmentBatch<T> {
    data: Vec<T>,
    batch: usize,
    len: usize,
    mask: Vec<bool>,
}

impl<T: Real> SegmentBatch<T> {
    /// Pads every item to the longest sequence in the batch.
    pub fn new(items: &[&MelSegments]) -> Result<Self> {
        let len = items.iter().map(|s| s.len()).max().unwrap_or(0);
        Self::with_len(items, len)
    }

    /// Pads every item to `len` segments.
    pub fn with_len(items: &[&MelSegments], len: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("segment batch has no items".into()));
        }
        let mut data = vec![T::zero(); items.len() * len * SEG_LEN];
        let mut mask = vec![false; items.len() * len];
        for (b, segs) in items.iter().enumerate() {
            if segs.valid_length() == 0 {
                return Err(Error::Empty(format!("batch item {b} has no valid segments")));
            }
            if segs.len() > len {
                return Err(Error::PadTarget { len: segs.len(), target: len });
            }
            let dst = &mut data[b * len * SEG_LEN..];
            for (d, &v) in dst.iter_mut().zip(segs.data()) {
                *d = T::of(v as f64);
            }
            mask[b * len..][..segs.valid_length()].fill(true);
        }
        Ok(Self { data, batch: items.len(), len, mask })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([self.batch * self.len, 1, N_MELS, SEG_WIDTH], self.data.clone()).expect("batch shape")
    }
}

/// Graph nodes produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, 5]` in [`Task::ALL`] order.
    pub scores: Var,
    /// `[B, L]` attention weights per task (attention pooling only).
    pub attention: Vec<Option<Var>>,
}

/// Stage names and per-segment shapes recorded by [`Model::cnn_trace`].
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Network parameters plus the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
}

fn sinusoid_table<T: Real>(len: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe[pos * d + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let n: usize = spec.dims.iter().product();
            let data: Vec<T> = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                }
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
            };
            params.insert(spec.name, Tensor::new(spec.dims, data)?)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against the architecture.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for spec in &specs {
            let p = params.get(&spec.name).map_err(|_| Error::MissingTensor(spec.name.clone()))?;
            if p.tensor.dims() != spec.dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.dims.clone(),
                    found: p.tensor.dims().to_vec(),
                });
            }
        }
        if params.len() != specs.len() {
            let extra = params.iter().find(|p| !specs.iter().any(|s| s.name == p.name)).map(|p| p.name.clone());
            return Err(Error::UnexpectedTensor(extra.unwrap_or_default()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn graph(&self, mode: Mode, seed: u64) -> Graph<'_, T> {
        Graph::new(&self.params, mode, seed)
    }

    fn lin(&self, g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}.weight"))?;
        let b = g.param(&format!("{prefix}.bias"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    fn conv(&self, g: &mut Graph<'_, T>, x: Var, i: usize, pad_h: usize, pad_w: usize) -> Result<Var> {
        let w = g.param(&format!("cnn.conv{i}.weight"))?;
        let b = g.param(&format!("cnn.conv{i}.bias"))?;
        let y = g.conv2d(x, w, Some(b), pad_h, pad_w)?;
        Ok(g.relu(y)?)
    }

    fn cnn(&self, g: &mut Graph<'_, T>, x: Var, mut trace: Option<&mut ShapeTrace>) -> Result<Var> {
        let mut note = |g: &Graph<'_, T>, stage: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((stage.to_string(), g.dims(v)[1..].to_vec()));
            }
        };
        note(g, "input", x);
        let mut h = x;
        let mut pools = 0;
        for (i, pool) in [(1, None), (2, Some((2, 2))), (3, None), (4, Some((2, 2))), (5, Some((2, 1)))] {
            h = self.conv(g, h, i, 1, 1)?;
            note(g, &format!("conv{i}"), h);
            if let Some((ph, pw)) = pool {
                h = g.maxpool2d(h, ph, pw, ph, pw)?;
                pools += 1;
                note(g, &format!("pool{pools}"), h);
            }
        }
        // Height padding only: width 3 collapses to 1.
        h = self.conv(g, h, 6, 1, 0)?;
        note(g, "conv6", h);
        let n = g.dims(h)[0];
        let flat = g.reshape(h, [n, CNN_OUT])?;
        note(g, "flatten", flat);
        Ok(flat)
    }

    /// `[N, 1, 48, 15]` segments → `[N, D_fw]` features.
    pub fn framewise_forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.framewise_traced(g, x, None)
    }

    fn framewise_traced(&self, g: &mut Graph<'_, T>, x: Var, trace: Option<&mut ShapeTrace>) -> Result<Var> {
        let n = g.dims(x)[0];
        match self.config.framewise {
            Framewise::Cnn => self.cnn(g, x, trace),
            Framewise::Skip => Ok(g.reshape(x, [n, SEG_LEN])?),
            Framewise::Ffn => {
                let mut h = g.reshape(x, [n, SEG_LEN])?;
                for i in 1..=self.config.ffn_layers {
                    h = self.lin(g, h, &format!("ffn.fc{i}"))?;
                    h = g.relu(h)?;
                }
                self.lin(g, h, "ffn.out")
            }
        }
    }

    /// Records the CNN stage shapes (without the batch axis) for one segment.
    pub fn cnn_trace(&self, segment: &[f32]) -> Result<ShapeTrace> {
        if self.config.framewise != Framewise::Cnn {
            return Err(Error::Config("shape trace needs the CNN framewise model".into()));
        }
        let mut g = self.graph(Mode::Eval, 0);
        let data = segment.iter().map(|&v| T::of(v as f64)).collect();
        let x = g.input(Tensor::new([1, 1, N_MELS, SEG_WIDTH], data)?);
        let mut trace = ShapeTrace::new();
        self.framewise_traced(&mut g, x, Some(&mut trace))?;
        Ok(trace)
    }

    fn sa_blocks(&self, g: &mut Graph<'_, T>, mut h: Var, mask: &[bool]) -> Result<Var> {
        let p = self.config.dropout;
        for i in 0..self.config.sa_depth {
            let pre = format!("td.sa.{i}");
            let q = self.lin(g, h, &format!("{pre}.q"))?;
            let k = self.lin(g, h, &format!("{pre}.k"))?;
            let v = self.lin(g, h, &format!("{pre}.v"))?;
            let a = g.attention(q, k, v, mask)?;
            let a = self.lin(g, a, &format!("{pre}.out"))?;
            let a = g.dropout(a, p)?;
            let r = g.add(h, a)?;
            h = self.norm(g, r, &format!("{pre}.norm1"))?;
            let f = self.lin(g, h, &format!("{pre}.ff1"))?;
            let f = g.relu(f)?;
            let f = self.lin(g, f, &format!("{pre}.ff2"))?;
            let f = g.dropout(f, p)?;
            let r = g.add(h, f)?;
            h = self.norm(g, r, &format!("{pre}.norm2"))?;
        }
        Ok(h)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let gain = g.param(&format!("{prefix}.gain"))?;
        let shift = g.param(&format!("{prefix}.shift"))?;
        Ok(g.layer_norm(x, gain, shift)?)
    }

    fn lstm_direction(&self, g: &mut Graph<'_, T>, x: Var, dir: &str, mask: &[bool], reverse: bool) -> Result<Var> {
        let [b, l, _] = *g.dims(x) else { unreachable!("sequence input is [B,L,d]") };
        let hid = self.config.lstm_hidden;
        let w_ih = g.param(&format!("td.lstm.{dir}.w_ih"))?;
        let bias = g.param(&format!("td.lstm.{dir}.bias"))?;
        let w_hh = g.param(&format!("td.lstm.{dir}.w_hh"))?;
        // Input contributions for all steps at once: [B, L, 4H], gate order i, f, g, o.
        let xi = g.linear(x, w_ih, Some(bias))?;
        let mut h = g.input(Tensor::zeros([b, hid]));
        let mut c = g.input(Tensor::zeros([b, hid]));
        let mut outs = vec![h; l];
        let steps: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in steps {
            let rows: Vec<bool> = (0..b).map(|bi| mask[bi * l + t]).collect();
            let xt = g.select_time(xi, t)?;
            let rec = g.linear(h, w_hh, None)?;
            let gates = g.add(xt, rec)?;
            let gate = |g: &mut Graph<'_, T>, k: usize| g.slice_last(gates, k * hid, hid);
            let (i, f, cand, o) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
            let (i, f, cand, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.tanh(cand)?, g.sigmoid(o)?);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            let c_new = g.add(keep, write)?;
            let squashed = g.tanh(c_new)?;
            let h_new = g.mul(o, squashed)?;
            // Padded steps carry the state through unchanged.
            c = g.masked_update(c, c_new, &rows)?;
            h = g.masked_update(h, h_new, &rows)?;
            outs[t] = h;
        }
        Ok(g.stack_time(&outs)?)
    }

    fn bilstm(&self, g: &mut Graph<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let fwd = self.lstm_direction(g, x, "fwd", mask, false)?;
        let bwd = self.lstm_direction(g, x, "bwd", mask, true)?;
        Ok(g.concat_last(fwd, bwd)?)
    }

    /// `[B, L, D_fw]` features → `[B, L, d]` sequence.
    pub fn td_forward(&self, g: &mut Graph<'_, T>, feats: Var, mask: &[bool]) -> Result<Var> {
        let [_, l, _] = *g.dims(feats) else {
            return Err(Error::Config(format!("time-dependency input must be [B,L,D], got {:?}", g.dims(feats))));
        };
        let mut h = self.lin(g, feats, "td.proj")?;
        if self.config.use_positional_encoding {
            h = g.add_const(h, &sinusoid_table::<T>(l, self.config.d_tf))?;
        }
        match self.config.td {
            TimeDependency::Skip => Ok(h),
            TimeDependency::Sa => self.sa_blocks(g, h, mask),
            TimeDependency::Lstm => self.bilstm(g, h, mask),
            TimeDependency::LstmSa => {
                let y = self.bilstm(g, h, mask)?;
                let y = self.lin(g, y, "td.adapter")?;
                self.sa_blocks(g, y, mask)
            }
            TimeDependency::SaLstm => {
                let y = self.sa_blocks(g, h, mask)?;
                let y = self.lin(g, y, "td.adapter")?;
                self.bilstm(g, y, mask)
            }
        }
    }

    /// One task head over `[B, L, d]`: `[B, 1]` scores plus `[B, L]`
    /// attention weights when pooling is attention-based.
    pub fn pool_forward(&self, g: &mut Graph<'_, T>, task: Task, y: Var, mask: &[bool]) -> Result<(Var, Option<Var>)> {
        let key = task.key();
        let (z, weights) = match self.config.pooling {
            Pooling::Attention => {
                let [b, l, _] = *g.dims(y) else { unreachable!("sequence input is [B,L,d]") };
                let s = self.lin(g, y, &format!("head.{key}.score1"))?;
                let s = g.relu(s)?;
                let s = self.lin(g, s, &format!("head.{key}.score2"))?;
                let s = g.reshape(s, [b, l])?;
                let w = g.masked_softmax(s, mask)?;
                (g.weighted_sum(w, y)?, Some(w))
            }
            Pooling::Avg => (g.masked_mean(y, mask)?, None),
            Pooling::Max => (g.masked_max(y, mask)?, None),
        };
        Ok((self.lin(g, z, &format!("head.{key}.out"))?, weights))
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &SegmentBatch<T>) -> Result<ForwardOutput> {
        let x = g.input(batch.to_tensor());
        self.forward_from(g, x, batch.batch, batch.mask())
    }

    /// Forward pass from an existing `[B·L, 1, 48, 15]` node with a `B·L` mask.
    pub fn forward_from(&self, g: &mut Graph<'_, T>, x: Var, batch: usize, mask: &[bool]) -> Result<ForwardOutput> {
        let n = g.dims(x)[0];
        if batch == 0 || !n.is_multiple_of(batch) || mask.len() != n {
            return Err(Error::Config(format!("{n} segments, batch {batch}, mask of {}", mask.len())));
        }
        let l = n / batch;
        let f = self.framewise_forward(g, x)?;
        let d_fw = g.dims(f)[1];
        let f = g.reshape(f, [batch, l, d_fw])?;
        let y = self.td_forward(g, f, mask)?;
        let mut scores: Option<Var> = None;
        let mut attention = Vec::with_capacity(Task::ALL.len());
        for task in Task::ALL {
            let (s, w) = self.pool_forward(g, task, y, mask)?;
            scores = Some(match scores {
                None => s,
                Some(prev) => g.concat_last(prev, s)?,
            });
            attention.push(w);
        }
        Ok(ForwardOutput { scores: scores.expect("five heads"), attention })
    }

    /// Deterministic inference over a batch of sequences.
    pub fn predict_batch(&self, items: &[&MelSegments]) -> Result<Vec<QualityScores>> {
        let batch = SegmentBatch::new(items)?;
        let mut g = self.graph(Mode::Eval, 0);
        let out = self.forward(&mut g, &batch)?;
        let scores = g.value(out.scores).data();
        let n_tasks = Task::ALL.len();
        let l = batch.len;
        Ok(items
            .iter()
            .enumerate()
            .map(|(bi, segs)| {
                let mut q = QualityScores::from_array(std::array::from_fn(|t| scores[bi * n_tasks + t].as_f64()));
                if out.attention.iter().all(Option::is_some) {
                    let valid = segs.valid_length();
                    q.attention_weights = Some(
                        out.attention
                            .iter()
                            .map(|w| {
                                let w = g.value(w.expect("checked")).data();
                                w[bi * l..][..valid].iter().map(|v| v.as_f64()).collect()
                            })
                            .collect(),
                    );
                }
                q
            })
            .collect())
    }

    pub fn predict_segments(&self, segs: &MelSegments) -> Result<QualityScores> {
        Ok(self.predict_batch(&[segs])?.remove(0))
    }
}
