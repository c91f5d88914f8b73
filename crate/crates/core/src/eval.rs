//! Full-item-set leave-one-out ranking metrics.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{dot, EncoderKind, Matrix, ModelParams};
use crate::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Val,
    Test,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "validation" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            other => Err(Error::Config(format!("unknown phase `{other}` (expected val or test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "hr@5")]
    pub hr5: f64,
    #[serde(rename = "hr@10")]
    pub hr10: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    pub num_users: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned text table with the HR@5 / HR@10 / nDCG@5 / nDCG@10 columns.
    pub fn to_table(&self, label: &str) -> String {
        let width = label.len().max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} | {:>7} {:>7} {:>7} {:>7}",
            "Method", "HR@5", "HR@10", "nDCG@5", "nDCG@10"
        );
        let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(31));
        let _ = writeln!(
            out,
            "{:<width$} | {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            label, self.hr5, self.hr10, self.ndcg5, self.ndcg10
        );
        out
    }

    /// Averages per-user outcomes, summing in user order.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return MetricReport::default();
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
        MetricReport {
            hr5: mean(&|r| hr_at_k(r, 5)),
            hr10: mean(&|r| hr_at_k(r, 10)),
            ndcg5: mean(&|r| ndcg_at_k(r, 5)),
            ndcg10: mean(&|r| ndcg_at_k(r, 10)),
            num_users: n,
        }
    }
}

/// 1-based rank of `target` among non-excluded items. Items scoring strictly
/// higher rank above it, as do equal-scoring items with a smaller index.
pub fn rank_target(
    user: &[f64],
    item_table: &Matrix,
    exclusions: &HashSet<ItemId>,
    target: ItemId,
) -> Result<usize> {
    if target >= item_table.rows() {
        return Err(Error::InvalidItem {
            index: target,
            vocab: item_table.rows(),
        });
    }
    if exclusions.contains(&target) {
        return Err(Error::TargetExcluded(target));
    }
    if user.len() != item_table.cols() {
        return Err(Error::DimensionMismatch {
            expected: item_table.cols(),
            got: user.len(),
        });
    }
    let target_score = dot(user, item_table.row(target));
    let mut rank = 1;
    for i in 0..item_table.rows() {
        if i == target || exclusions.contains(&i) {
            continue;
        }
        let s = dot(user, item_table.row(i));
        if s > target_score || (s == target_score && i < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Per-user ranks for a phase. The user embedding comes from the train prefix
/// (plus the validation item for the test phase); with `exclude_seen` those
/// same items are removed from the candidates, except the target itself.
pub fn user_ranks(
    params: &ModelParams,
    kind: EncoderKind,
    split: &SplitDataset,
    phase: Phase,
    exclude_seen: bool,
    max_len: usize,
) -> Result<Vec<usize>> {
    split
        .users
        .par_iter()
        .enumerate()
        .map(|(u, user)| {
            let mut prefix = user.train.clone();
            let target = match phase {
                Phase::Val => user.val,
                Phase::Test => {
                    prefix.push(user.val);
                    user.test
                }
            };
            let emb = params.encode_user(kind, u, &prefix, max_len)?;
            let exclusions: HashSet<ItemId> = if exclude_seen {
                prefix.iter().copied().filter(|&i| i != target).collect()
            } else {
                HashSet::new()
            };
            rank_target(&emb.0, &params.shared.item_table, &exclusions, target)
        })
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    kind: EncoderKind,
    split: &SplitDataset,
    phase: Phase,
    exclude_seen: bool,
    max_len: usize,
) -> Result<MetricReport> {
    let ranks = user_ranks(params, kind, split, phase, exclude_seen, max_len)?;
    Ok(MetricReport::from_ranks(&ranks))
}
