//! Planted-cluster interaction data for benchmarks and tests.
//!
//! Each of `num_clusters` clusters owns a random cycle of `cluster_items`
//! distinct items (cycles of different clusters may share items). A user
//! belongs to one cluster, plus `interests - 1` extra clusters drawn at
//! random, and holds a random starting point on each of their cycles. The
//! sequence is a series of sessions, each on one interest, switching with
//! probability `switch_prob` after every item. Within a session the user walks
//! forward: with probability `in_cluster_prob` the next item lies 1 to
//! `max_jump` steps ahead on the session's cycle, otherwise it is uniform over
//! the catalogue. Items never repeat within a sequence.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{server_rng, Stream};
use crate::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub cluster_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub in_cluster_prob: f64,
    pub max_jump: usize,
    pub interests: usize,
    pub switch_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 2000,
            num_items: 1000,
            num_clusters: 8,
            cluster_items: 200,
            min_len: 10,
            max_len: 20,
            in_cluster_prob: 0.9,
            max_jump: 3,
            interests: 1,
            switch_prob: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Planted primary cluster of each user.
    pub user_clusters: Vec<usize>,
    /// Item cycle of each cluster.
    pub cycles: Vec<Vec<ItemId>>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.num_clusters == 0 {
            return fail("num_clusters must be positive");
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return fail("need 3 <= min_len <= max_len");
        }
        if self.max_len > self.num_items {
            return fail("max_len exceeds num_items");
        }
        if self.max_jump == 0 || self.cluster_items < self.max_len * self.max_jump * self.interests.max(1) {
            return fail("cluster_items must be at least max_len * max_jump * interests, with max_jump >= 1");
        }
        if self.cluster_items > self.num_items {
            return fail("cluster_items exceeds num_items");
        }
        if !(0.0..=1.0).contains(&self.in_cluster_prob) || !(0.0..=1.0).contains(&self.switch_prob) {
            return fail("in_cluster_prob and switch_prob must be in [0, 1]");
        }
        if self.interests == 0 || self.interests > self.num_clusters {
            return fail("interests must be in 1..=num_clusters");
        }
        Ok(())
    }
}

/// Training settings for the default planted-cluster data: a three-item
/// pooling window and a fixed budget of 300 rounds at learning rate 1e-2,
/// validated every 25 rounds. Everything else keeps its default.
pub fn benchmark_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.max_len = 3;
    cfg.federation.learning_rate = 1e-2;
    cfg.federation.max_rounds = 300;
    cfg.federation.eval_every = 25;
    cfg
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = server_rng(cfg.seed, Stream::Synthetic);
    let cycles: Vec<Vec<ItemId>> = (0..cfg.num_clusters)
        .map(|_| index::sample(&mut rng, cfg.num_items, cfg.cluster_items).into_vec())
        .collect();

    let mut seqs = Vec::with_capacity(cfg.num_users);
    let mut user_clusters = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let c = u % cfg.num_clusters;
        let mut mine = vec![c];
        while mine.len() < cfg.interests {
            let extra = rng.random_range(0..cfg.num_clusters);
            if !mine.contains(&extra) {
                mine.push(extra);
            }
        }
        let mut pos: Vec<usize> = mine.iter().map(|&m| rng.random_range(0..cycles[m].len())).collect();
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut seen = vec![false; cfg.num_items];
        let mut seq = Vec::with_capacity(len);
        let mut current = 0;
        let first = cycles[mine[0]][pos[0]];
        seq.push(first);
        seen[first] = true;
        while seq.len() < len {
            if mine.len() > 1 && rng.random_bool(cfg.switch_prob) {
                current = (current + rng.random_range(1..mine.len())) % mine.len();
            }
            let cycle = &cycles[mine[current]];
            let p = &mut pos[current];
            let item = if rng.random_bool(cfg.in_cluster_prob) {
                *p = (*p + rng.random_range(1..=cfg.max_jump)) % cycle.len();
                // Skip forward past items already taken.
                while seen[cycle[*p]] {
                    *p = (*p + 1) % cycle.len();
                }
                cycle[*p]
            } else {
                let mut i = rng.random_range(0..cfg.num_items);
                while seen[i] {
                    i = rng.random_range(0..cfg.num_items);
                }
                i
            };
            seen[item] = true;
            seq.push(item);
        }
        seqs.push(seq);
        user_clusters.push(c);
    }
    Ok(SyntheticData {
        dataset: Dataset::from_sequences(seqs, cfg.num_items)?,
        user_clusters,
        cycles,
    })
}
