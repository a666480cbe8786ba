use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The five predicted quantities: overall quality and four dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "MOS")]
    Mos,
    #[serde(rename = "NOI")]
    Noi,
    #[serde(rename = "COL")]
    Col,
    #[serde(rename = "DIS")]
    Dis,
    #[serde(rename = "LOU")]
    Lou,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Mos, Task::Noi, Task::Col, Task::Dis, Task::Lou];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["MOS", "NOI", "COL", "DIS", "LOU"][self.index()]
    }

    /// Lower-case key used in parameter names and CSV columns.
    pub fn key(self) -> &'static str {
        ["mos", "noi", "col", "dis", "lou"][self.index()]
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected MOS, NOI, COL, DIS or LOU)")))
    }
}

/// Predicted or subjective scores on the 1–5 scale (never clamped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub mos: f64,
    pub noi: f64,
    pub col: f64,
    pub dis: f64,
    pub lou: f64,
    /// Per-task attention weights over the padded sequence, in [`Task::ALL`] order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_weights: Option<Vec<Vec<f64>>>,
}

impl QualityScores {
    pub fn from_array(v: [f64; 5]) -> Self {
        Self { mos: v[0], noi: v[1], col: v[2], dis: v[3], lou: v[4], attention_weights: None }
    }

    pub fn uniform(v: f64) -> Self {
        Self::from_array([v; 5])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.mos, self.noi, self.col, self.dis, self.lou]
    }

    pub fn get(&self, task: Task) -> f64 {
        self.to_array()[task.index()]
    }

    pub fn set(&mut self, task: Task, value: f64) {
        let slot = match task {
            Task::Mos => &mut self.mos,
            Task::Noi => &mut self.noi,
            Task::Col => &mut self.col,
            Task::Dis => &mut self.dis,
            Task::Lou => &mut self.lou,
        };
        *slot = value;
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}
