//! Confusion tables for the real-versus-synthetic rating study.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Items per complete session.
pub const SESSION_ITEMS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Real,
    Synthetic,
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Real => "real",
            Truth::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VttResponse {
    pub session_id: String,
    pub rater_id: String,
    pub test_id: u8,
    pub item_id: String,
    pub truth: Truth,
    pub answer: Truth,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VttRow {
    pub test_id: u8,
    pub rater_id: String,
    pub sessions: usize,
    pub real_as_real: usize,
    pub real_as_synthetic: usize,
    pub synthetic_as_real: usize,
    pub synthetic_as_synthetic: usize,
    pub accuracy: f64,
}

impl VttRow {
    pub fn total(&self) -> usize {
        self.real_as_real + self.real_as_synthetic + self.synthetic_as_real + self.synthetic_as_synthetic
    }

    /// Accuracy in whole percent, rounded half up.
    pub fn accuracy_percent(&self) -> u32 {
        let total = self.total();
        if total == 0 {
            return 0;
        }
        let correct = self.real_as_real + self.synthetic_as_synthetic;
        ((200 * correct + total) / (2 * total)) as u32
    }

    fn add(&mut self, truth: Truth, answer: Truth) {
        match (truth, answer) {
            (Truth::Real, Truth::Real) => self.real_as_real += 1,
            (Truth::Real, Truth::Synthetic) => self.real_as_synthetic += 1,
            (Truth::Synthetic, Truth::Real) => self.synthetic_as_real += 1,
            (Truth::Synthetic, Truth::Synthetic) => self.synthetic_as_synthetic += 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VttTable {
    /// One row per (test, rater), sessions aggregated.
    pub rows: Vec<VttRow>,
    /// Sessions left out for lacking a complete, duplicate-free answer set.
    pub incomplete_sessions: Vec<String>,
}

/// Aggregate complete sessions into per-test, per-rater confusion counts.
pub fn vtt_statistics(responses: &[VttResponse]) -> VttTable {
    let mut sessions: BTreeMap<&str, Vec<&VttResponse>> = BTreeMap::new();
    for r in responses {
        sessions.entry(r.session_id.as_str()).or_default().push(r);
    }
    let mut rows: BTreeMap<(u8, String), VttRow> = BTreeMap::new();
    let mut incomplete = Vec::new();
    for (id, list) in sessions {
        let items: BTreeSet<&str> = list.iter().map(|r| r.item_id.as_str()).collect();
        let first = list[0];
        let coherent = list.iter().all(|r| r.rater_id == first.rater_id && r.test_id == first.test_id);
        if list.len() != SESSION_ITEMS || items.len() != SESSION_ITEMS || !coherent {
            incomplete.push(id.to_string());
            continue;
        }
        let row = rows.entry((first.test_id, first.rater_id.clone())).or_insert_with(|| VttRow {
            test_id: first.test_id,
            rater_id: first.rater_id.clone(),
            ..VttRow::default()
        });
        row.sessions += 1;
        for r in list {
            row.add(r.truth, r.answer);
        }
    }
    let rows = rows
        .into_values()
        .map(|mut r| {
            r.accuracy = (r.real_as_real + r.synthetic_as_synthetic) as f64 / r.total() as f64;
            r
        })
        .collect();
    VttTable {
        rows,
        incomplete_sessions: incomplete,
    }
}
