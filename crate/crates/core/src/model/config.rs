use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::Task;

macro_rules! variant_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(
                #[serde(rename = $label $(, alias = $alias)*)]
                $variant,
            )+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Name used in configuration files and result tables.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let s = s.trim();
                $(
                    if s.eq_ignore_ascii_case($label) $(|| s.eq_ignore_ascii_case($alias))* {
                        return Ok($name::$variant);
                    }
                )+
                Err(Error::Config(format!(
                    concat!("unknown ", stringify!($name), " variant `{}` (expected one of {})"),
                    s,
                    [$($label),+].join(", ")
                )))
            }
        }
    };
}

variant_enum! {
    /// Per-segment feature extractor.
    Framewise { Skip => "Skip", Cnn => "CNN", Ffn => "FFN" }
}

variant_enum! {
    /// Sequence model relating segment features across time.
    TimeDependency {
        Skip => "Skip",
        Sa => "SA",
        Lstm => "LSTM",
        LstmSa => "LSTM-SA" | "LSTM_SA",
        SaLstm => "SA-LSTM" | "SA_LSTM",
    }
}

variant_enum! {
    /// Temporal pooling applied by every task head.
    Pooling { Attention => "AP", Avg => "Avg", Max => "Max" }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub framewise: Framewise,
    pub td: TimeDependency,
    pub pooling: Pooling,
    pub d_tf: usize,
    pub d_tf_ff: usize,
    pub sa_depth: usize,
    pub sa_heads: usize,
    pub lstm_hidden: usize,
    pub ap_hidden: usize,
    pub ffn_hidden: usize,
    pub ffn_layers: usize,
    /// Heads in output order; always the five tasks.
    pub tasks: Vec<Task>,
    pub use_positional_encoding: bool,
    /// Dropout rate inside the self-attention blocks, training only.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            framewise: Framewise::Cnn,
            td: TimeDependency::Sa,
            pooling: Pooling::Attention,
            d_tf: 64,
            d_tf_ff: 64,
            sa_depth: 2,
            sa_heads: 1,
            lstm_hidden: 128,
            ap_hidden: 128,
            ffn_hidden: 2048,
            ffn_layers: 4,
            tasks: Task::ALL.to_vec(),
            use_positional_encoding: true,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_variants(framewise: Framewise, td: TimeDependency, pooling: Pooling) -> Self {
        Self { framewise, td, pooling, ..Self::default() }
    }

    /// Variant triple such as `CNN-SA-AP`.
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.framewise, self.td, self.pooling)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_tf", self.d_tf),
            ("d_tf_ff", self.d_tf_ff),
            ("sa_depth", self.sa_depth),
            ("lstm_hidden", self.lstm_hidden),
            ("ap_hidden", self.ap_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("ffn_layers", self.ffn_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.sa_heads != 1 {
            return Err(Error::Config(format!("sa_heads = {}: only single-head attention is implemented", self.sa_heads)));
        }
        if self.tasks != Task::ALL {
            return Err(Error::Config("tasks must be [MOS, NOI, COL, DIS, LOU]; restrict training tasks instead".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the per-segment feature vector.
    pub fn framewise_dim(&self) -> usize {
        match self.framewise {
            Framewise::Skip => crate::features::SEG_LEN,
            Framewise::Cnn | Framewise::Ffn => super::network::CNN_OUT,
        }
    }

    /// Width `d` of the time-dependency output.
    pub fn td_dim(&self) -> usize {
        match self.td {
            TimeDependency::Skip | TimeDependency::Sa | TimeDependency::LstmSa => self.d_tf,
            TimeDependency::Lstm | TimeDependency::SaLstm => 2 * self.lstm_hidden,
        }
    }
}
