//! Server-side negative retrieval from cluster centroids.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, Matrix};
use crate::rng::Rng;
use crate::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// `T` uniform draws from the top `R%` of the centroid ranking.
    SemiHard,
    /// The top `T` of the ranking, deterministically.
    GloballyHardest,
    /// `T` uniform draws from the whole pool.
    Random,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi_hard" => Ok(Self::SemiHard),
            "globally_hardest" => Ok(Self::GloballyHardest),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown sampler mode `{other}` (expected semi_hard, globally_hardest or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub hard_ratio_percent: f64,
    pub num_semi_hard: usize,
    pub mode: SamplerMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            hard_ratio_percent: 25.0,
            num_semi_hard: 20,
            mode: SamplerMode::SemiHard,
        }
    }
}

impl SamplerConfig {
    /// `⌈R/100 · pool⌉`
    pub fn hard_subset_size(&self, pool: usize) -> usize {
        ((self.hard_ratio_percent * pool as f64) / 100.0).ceil() as usize
    }

    pub fn validate(&self, pool: usize) -> Result<()> {
        if !(self.hard_ratio_percent > 0.0 && self.hard_ratio_percent <= 100.0) {
            return Err(Error::Config(format!(
                "sampler.hard_ratio_percent must lie in (0, 100], got {}",
                self.hard_ratio_percent
            )));
        }
        let subset = match self.mode {
            SamplerMode::SemiHard => self.hard_subset_size(pool),
            SamplerMode::GloballyHardest | SamplerMode::Random => pool,
        };
        if subset < self.num_semi_hard {
            return Err(Error::SubsetTooSmall {
                subset,
                requested: self.num_semi_hard,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeAssignment {
    pub client: usize,
    pub items: Vec<ItemId>,
}

/// Item indices by descending dot product with `centroid`, ties by ascending index.
pub fn difficulty_rank(centroid: &[f64], item_table: &Matrix) -> Result<Vec<ItemId>> {
    if item_table.rows() == 0 {
        return Err(Error::Empty("item pool".into()));
    }
    if centroid.len() != item_table.cols() {
        return Err(Error::DimensionMismatch {
            expected: item_table.cols(),
            got: centroid.len(),
        });
    }
    let scores: Vec<f64> = (0..item_table.rows())
        .map(|i| dot(centroid, item_table.row(i)))
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("difficulty score"));
    }
    let mut order: Vec<ItemId> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Draws the client's negatives from a ranking according to `cfg.mode`.
pub fn semi_hard_sample(
    client: usize,
    ranked: &[ItemId],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<NegativeAssignment> {
    let t = cfg.num_semi_hard;
    let items = match cfg.mode {
        SamplerMode::SemiHard => {
            let subset = cfg.hard_subset_size(ranked.len()).min(ranked.len());
            if subset < t {
                return Err(Error::SubsetTooSmall {
                    subset,
                    requested: t,
                });
            }
            index::sample(rng, subset, t)
                .into_iter()
                .map(|k| ranked[k])
                .collect()
        }
        SamplerMode::GloballyHardest => {
            if ranked.len() < t {
                return Err(Error::SubsetTooSmall {
                    subset: ranked.len(),
                    requested: t,
                });
            }
            ranked[..t].to_vec()
        }
        SamplerMode::Random => random_sample(ranked.len(), t, rng)?,
    };
    Ok(NegativeAssignment { client, items })
}

/// `t` distinct item ids uniform over `0..pool`.
pub fn random_sample(pool: usize, t: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
    if pool < t {
        return Err(Error::SubsetTooSmall {
            subset: pool,
            requested: t,
        });
    }
    Ok(index::sample(rng, pool, t).into_vec())
}
