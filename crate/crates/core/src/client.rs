//! Local training on a simulated client: negative mix-up, the contrastive
//! loss, and its analytic gradients.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::UserSplit;
use crate::error::{Error, Result};
use crate::model::{dot, encode_user, init_user_vector, mean_pool, pooled_window, EncoderKind, Matrix, SharedParams, UserEmbedding};
use crate::negsampling::NegativeAssignment;
use crate::privacy::{protect, PerturbedEmbedding, PrivacyConfig};
use crate::rng::{client_rng, Rng, Stream};
use crate::ItemId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub local_pool_size: usize,
    pub local_negatives_per_positive: usize,
    pub use_inbatch: bool,
    pub use_local: bool,
    pub use_semi_hard: bool,
    pub filter_false_negatives: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            local_pool_size: 100,
            local_negatives_per_positive: 10,
            use_inbatch: true,
            use_local: true,
            use_semi_hard: true,
            filter_false_negatives: true,
        }
    }
}

/// One positive and the ids of its mixed negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Index of the positive within the client's history.
    pub position: usize,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

/// An example with its user embedding resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub position: usize,
    pub positive: ItemId,
    pub user: UserEmbedding,
    pub negatives: Vec<ItemId>,
}

/// A client's gradient contribution as uploaded to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Gradient rows for every item the client's loss touched.
    pub item_grads: BTreeMap<ItemId, Vec<f64>>,
    /// Projection gradient, `None` for the ID encoder.
    pub projection_grad: Option<Matrix>,
    pub loss: f64,
}

impl LocalUpdate {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.item_grads.values().flatten().all(|x| x.is_finite())
            && self.projection_grad.as_ref().is_none_or(Matrix::is_finite)
    }
}

/// Result of one local gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradients {
    pub update: LocalUpdate,
    /// Gradient of the private user vector (ID encoder); never uploaded.
    pub user_vector_grad: Option<Vec<f64>>,
}

/// Other positives of the history as negatives for position `j`, with
/// repeats and copies of the positive itself removed. Empty for the ID encoder.
pub fn build_inbatch_negatives(kind: EncoderKind, history: &[ItemId], j: usize) -> Vec<ItemId> {
    if kind == EncoderKind::Id || j >= history.len() {
        return Vec::new();
    }
    let positive = history[j];
    let mut seen = HashSet::new();
    history
        .iter()
        .copied()
        .filter(|&i| i != positive && seen.insert(i))
        .collect()
}

pub fn sample_local_negatives(pool: &[ItemId], k: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
    if k > pool.len() {
        return Err(Error::PopulationTooSmall {
            population: pool.len(),
            requested: k,
        });
    }
    Ok(index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Concatenates the three negative sources. Semi-hard ids the client has
/// interacted with are dropped when `filter_false_negatives` is set, repeats
/// keep their first occurrence, and the positive never appears.
pub fn mix_negatives(
    inbatch: &[ItemId],
    local: &[ItemId],
    semi_hard: &[ItemId],
    history: &HashSet<ItemId>,
    positive: ItemId,
    filter_false_negatives: bool,
) -> Vec<ItemId> {
    let mut seen = HashSet::new();
    let semi = semi_hard
        .iter()
        .filter(|i| !(filter_false_negatives && history.contains(i)));
    inbatch
        .iter()
        .chain(local)
        .chain(semi)
        .copied()
        .filter(|&i| i != positive && seen.insert(i))
        .collect()
}

fn user_for(
    kind: EncoderKind,
    shared: &SharedParams,
    user_vector: Option<&[f64]>,
    history: &[ItemId],
    position: usize,
    max_len: usize,
) -> Result<UserEmbedding> {
    encode_user(kind, shared, user_vector, &history[..position], max_len)
}

/// Resolves per-positive user embeddings. The sequence encoder sees only the
/// strict prefix before each positive.
pub fn resolve_examples(
    kind: EncoderKind,
    shared: &SharedParams,
    user_vector: Option<&[f64]>,
    history: &[ItemId],
    examples: &[Example],
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    examples
        .iter()
        .map(|ex| {
            Ok(TrainingExample {
                position: ex.position,
                positive: ex.positive,
                user: user_for(kind, shared, user_vector, history, ex.position, max_len)?,
                negatives: ex.negatives.clone(),
            })
        })
        .collect()
}

/// Scores `[positive, negatives...]` for one example.
fn example_scores(shared: &SharedParams, ex: &TrainingExample) -> Result<Vec<f64>> {
    std::iter::once(ex.positive)
        .chain(ex.negatives.iter().copied())
        .map(|i| {
            let item = shared.item(i)?;
            if item.len() != ex.user.0.len() {
                return Err(Error::DimensionMismatch {
                    expected: item.len(),
                    got: ex.user.0.len(),
                });
            }
            let s = dot(&ex.user.0, item);
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonFinite("score"))
            }
        })
        .collect()
}

/// Numerically stable `log Σ exp(s) − s[0]`, plus the softmax weights.
fn softmax_term(scores: &[f64]) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = max + total.ln() - scores[0];
    (loss, exps.into_iter().map(|e| e / total).collect())
}

/// Sum over examples of `−log(exp(u·p) / (exp(u·p) + Σ exp(u·n)))`.
pub fn local_loss(examples: &[TrainingExample], shared: &SharedParams) -> Result<f64> {
    let mut loss = 0.0;
    for ex in examples {
        let scores = example_scores(shared, ex)?;
        loss += softmax_term(&scores).0;
    }
    Ok(loss)
}

/// Loss straight from parameters; the finite-difference oracle perturbs these.
pub fn batch_loss(
    kind: EncoderKind,
    shared: &SharedParams,
    user_vector: Option<&[f64]>,
    history: &[ItemId],
    examples: &[Example],
    max_len: usize,
) -> Result<f64> {
    let resolved = resolve_examples(kind, shared, user_vector, history, examples, max_len)?;
    local_loss(&resolved, shared)
}

fn accumulate(grads: &mut BTreeMap<ItemId, Vec<f64>>, item: ItemId, scale: f64, v: &[f64]) {
    let row = grads.entry(item).or_insert_with(|| vec![0.0; v.len()]);
    for (g, x) in row.iter_mut().zip(v) {
        *g += scale * x;
    }
}

/// Analytic gradients of [`batch_loss`] with respect to every touched item
/// row, the projection (sequence encoder) and the private vector (ID encoder).
pub fn batch_gradients(
    kind: EncoderKind,
    shared: &SharedParams,
    user_vector: Option<&[f64]>,
    history: &[ItemId],
    examples: &[Example],
    max_len: usize,
) -> Result<LocalGradients> {
    let dim = shared.dim();
    let mut item_grads = BTreeMap::new();
    let mut projection_grad = match kind {
        EncoderKind::MeanSeq => Some(Matrix::zeros(dim, dim)),
        EncoderKind::Id => None,
    };
    let mut user_grad = match kind {
        EncoderKind::Id => Some(vec![0.0; dim]),
        EncoderKind::MeanSeq => None,
    };
    let mut loss = 0.0;

    for ex in examples {
        let window = pooled_window(&history[..ex.position], max_len);
        let (user, mean) = match kind {
            EncoderKind::MeanSeq => {
                let mean = mean_pool(shared, window)?;
                (UserEmbedding(shared.projection.mul_vec(&mean)), Some(mean))
            }
            EncoderKind::Id => (
                encode_user(kind, shared, user_vector, &[], max_len)?,
                None,
            ),
        };
        let resolved = TrainingExample {
            position: ex.position,
            positive: ex.positive,
            user,
            negatives: ex.negatives.clone(),
        };
        let scores = example_scores(shared, &resolved)?;
        let (term, weights) = softmax_term(&scores);
        loss += term;

        // dL/ds_0 = w_0 - 1, dL/ds_k = w_k
        let u = &resolved.user.0;
        let mut grad_u = vec![0.0; dim];
        for (k, item) in std::iter::once(ex.positive)
            .chain(ex.negatives.iter().copied())
            .enumerate()
        {
            let coeff = if k == 0 { weights[0] - 1.0 } else { weights[k] };
            accumulate(&mut item_grads, item, coeff, u);
            for (g, e) in grad_u.iter_mut().zip(shared.item(item)?) {
                *g += coeff * e;
            }
        }

        match (kind, mean) {
            (EncoderKind::MeanSeq, Some(mean)) => {
                let proj = projection_grad.as_mut().expect("sequence encoder");
                for (r, &gu) in grad_u.iter().enumerate() {
                    for (p, &m) in proj.row_mut(r).iter_mut().zip(&mean) {
                        *p += gu * m;
                    }
                }
                if !window.is_empty() {
                    let grad_mean = shared.projection.tr_mul_vec(&grad_u);
                    let inv = 1.0 / window.len() as f64;
                    for &i in window {
                        accumulate(&mut item_grads, i, inv, &grad_mean);
                    }
                }
            }
            _ => {
                let ug = user_grad.as_mut().expect("ID encoder");
                for (g, x) in ug.iter_mut().zip(&grad_u) {
                    *g += x;
                }
            }
        }
    }

    let update = LocalUpdate {
        item_grads,
        projection_grad,
        loss,
    };
    if !update.is_finite() {
        return Err(Error::NonFinite("local gradient"));
    }
    Ok(LocalGradients {
        update,
        user_vector_grad: user_grad,
    })
}

/// Everything a simulated device keeps to itself.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Training positives in chronological order.
    pub history: Vec<ItemId>,
    history_set: HashSet<ItemId>,
    /// Simulated locally stored non-interacted items, fixed at setup.
    pub local_pool: Vec<ItemId>,
    pub semi_hard: Option<NegativeAssignment>,
    semi_hard_round: Option<u64>,
    pub user_vector: Option<Vec<f64>>,
    /// Number of embeddings this client has uploaded.
    pub uploads: usize,
    privacy_rng: Rng,
    negatives_rng: Rng,
}

impl ClientState {
    pub fn new(
        id: usize,
        split: &UserSplit,
        num_items: usize,
        cfg: &ClientConfig,
        kind: EncoderKind,
        dim: usize,
        seed: u64,
    ) -> Self {
        let mut full: HashSet<ItemId> = split.train.iter().copied().collect();
        full.insert(split.val);
        full.insert(split.test);
        let local_pool = draw_local_pool(
            &full,
            num_items,
            cfg.local_pool_size,
            &mut client_rng(seed, id, Stream::LocalPool),
        );
        ClientState {
            id,
            history: split.train.clone(),
            history_set: split.train.iter().copied().collect(),
            local_pool,
            semi_hard: None,
            semi_hard_round: None,
            user_vector: (kind == EncoderKind::Id).then(|| init_user_vector(seed, id, dim)),
            uploads: 0,
            privacy_rng: client_rng(seed, id, Stream::Privacy),
            negatives_rng: client_rng(seed, id, Stream::LocalNegatives),
        }
    }

    pub fn history_set(&self) -> &HashSet<ItemId> {
        &self.history_set
    }

    /// Embedding from the whole training history, then clipped and perturbed.
    pub fn protected_embedding(
        &mut self,
        kind: EncoderKind,
        shared: &SharedParams,
        privacy: &PrivacyConfig,
        max_len: usize,
    ) -> Result<PerturbedEmbedding> {
        let u = encode_user(kind, shared, self.user_vector.as_deref(), &self.history, max_len)?;
        self.uploads += 1;
        protect(self.id, &u.0, privacy, &mut self.privacy_rng)
    }

    pub fn receive_negatives(&mut self, assignment: NegativeAssignment, round: u64) {
        self.semi_hard = Some(assignment);
        self.semi_hard_round = Some(round);
    }

    /// Round in which the current semi-hard negatives were delivered.
    pub fn negatives_round(&self) -> Option<u64> {
        self.semi_hard_round
    }

    /// Mixed negatives for every positive; local negatives are redrawn each call.
    pub fn build_examples(&mut self, kind: EncoderKind, cfg: &ClientConfig) -> Result<Vec<Example>> {
        let empty = Vec::new();
        let semi = match (&self.semi_hard, cfg.use_semi_hard) {
            (Some(a), true) => &a.items,
            _ => &empty,
        };
        let mut out = Vec::with_capacity(self.history.len());
        for (j, &positive) in self.history.iter().enumerate() {
            let inbatch = if cfg.use_inbatch {
                build_inbatch_negatives(kind, &self.history, j)
            } else {
                Vec::new()
            };
            let local = if cfg.use_local {
                sample_local_negatives(
                    &self.local_pool,
                    cfg.local_negatives_per_positive.min(self.local_pool.len()),
                    &mut self.negatives_rng,
                )?
            } else {
                Vec::new()
            };
            out.push(Example {
                position: j,
                positive,
                negatives: mix_negatives(
                    &inbatch,
                    &local,
                    semi,
                    &self.history_set,
                    positive,
                    cfg.filter_false_negatives,
                ),
            });
        }
        Ok(out)
    }

    /// One local gradient evaluation against a parameter snapshot.
    pub fn local_gradients(
        &mut self,
        kind: EncoderKind,
        cfg: &ClientConfig,
        shared: &SharedParams,
        max_len: usize,
    ) -> Result<LocalGradients> {
        let examples = self.build_examples(kind, cfg)?;
        batch_gradients(kind, shared, self.user_vector.as_deref(), &self.history, &examples, max_len)
    }

    /// Plain SGD on the private vector.
    pub fn apply_private_step(&mut self, grad: &[f64], learning_rate: f64) {
        if let Some(v) = self.user_vector.as_mut() {
            for (x, g) in v.iter_mut().zip(grad) {
                *x -= learning_rate * g;
            }
        }
    }
}

fn draw_local_pool(
    exclude: &HashSet<ItemId>,
    num_items: usize,
    size: usize,
    rng: &mut Rng,
) -> Vec<ItemId> {
    let available = num_items.saturating_sub(exclude.len());
    let size = size.min(available);
    if available >= 2 * size {
        let mut chosen = HashSet::with_capacity(size);
        let mut pool = Vec::with_capacity(size);
        while pool.len() < size {
            let i = rng.random_range(0..num_items);
            if !exclude.contains(&i) && chosen.insert(i) {
                pool.push(i);
            }
        }
        pool
    } else {
        let candidates: Vec<ItemId> = (0..num_items).filter(|i| !exclude.contains(i)).collect();
        index::sample(rng, candidates.len(), size)
            .into_iter()
            .map(|k| candidates[k])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_shared;

    fn ex(positive: ItemId, position: usize, negatives: Vec<ItemId>) -> Example {
        Example { position, positive, negatives }
    }

    fn table(rows: Vec<Vec<f64>>) -> SharedParams {
        let d = rows[0].len();
        SharedParams {
            item_table: Matrix::from_vec(rows.len(), d, rows.concat()).unwrap(),
            projection: Matrix::identity(d),
        }
    }

    #[test]
    fn inbatch_examples() {
        assert_eq!(build_inbatch_negatives(EncoderKind::MeanSeq, &[10, 11, 12], 1), vec![10, 12]);
        assert!(build_inbatch_negatives(EncoderKind::MeanSeq, &[10], 0).is_empty());
        assert!(build_inbatch_negatives(EncoderKind::Id, &[10, 11, 12], 1).is_empty());
        assert_eq!(
            build_inbatch_negatives(EncoderKind::MeanSeq, &[4, 5, 4, 6, 5], 3),
            vec![4, 5]
        );
        assert_eq!(build_inbatch_negatives(EncoderKind::MeanSeq, &[4, 5, 4], 0), vec![5]);
    }

    #[test]
    fn local_negative_sampling() {
        let pool: Vec<usize> = (100..200).collect();
        let mut rng = client_rng(0, 0, Stream::LocalNegatives);
        let ten = sample_local_negatives(&pool, 10, &mut rng).unwrap();
        assert_eq!(ten.iter().collect::<HashSet<_>>().len(), 10);
        assert!(ten.iter().all(|i| pool.contains(i)));
        let mut all = sample_local_negatives(&pool, 100, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, pool);
        assert!(sample_local_negatives(&pool, 0, &mut rng).unwrap().is_empty());
        assert!(sample_local_negatives(&pool, 101, &mut rng).is_err());
    }

    #[test]
    fn mix_rules() {
        let (a, b, c, d) = (1, 2, 3, 4);
        let hist: HashSet<_> = [a, d].into();
        assert_eq!(mix_negatives(&[a], &[b], &[c], &hist, d, true), vec![a, b, c]);
        assert!(mix_negatives(&[], &[], &[d], &hist, 9, true).is_empty());
        assert_eq!(mix_negatives(&[], &[], &[d], &hist, 9, false), vec![d]);
        assert!(mix_negatives(&[], &[], &[], &hist, d, true).is_empty());
        assert_eq!(mix_negatives(&[b], &[b, c], &[c, 7], &hist, 7, true), vec![b, c]);
    }

    #[test]
    fn loss_closed_forms() {
        let s = table(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let u = UserEmbedding(vec![1.0, 0.0]);
        let t = |negs: Vec<usize>| TrainingExample { position: 0, positive: 0, user: u.clone(), negatives: negs };
        assert_eq!(local_loss(&[t(vec![])], &s).unwrap(), 0.0);
        assert!((local_loss(&[t(vec![1])], &s).unwrap() - 2f64.ln()).abs() < 1e-12);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((local_loss(&[t(vec![2])], &s).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_stable_for_large_scores() {
        let s = table(vec![vec![800.0], vec![799.0]]);
        let t = TrainingExample { position: 0, positive: 0, user: UserEmbedding(vec![1.0]), negatives: vec![1] };
        let l = local_loss(&[t], &s).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_score_errors() {
        let s = table(vec![vec![f64::NAN], vec![1.0]]);
        let t = TrainingExample { position: 0, positive: 0, user: UserEmbedding(vec![1.0]), negatives: vec![1] };
        assert!(matches!(local_loss(&[t], &s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_negatives_give_zero_gradient() {
        let shared = init_shared(2, 6, 3).unwrap();
        let history = vec![0, 1, 2];
        let examples: Vec<Example> = history.iter().enumerate().map(|(j, &p)| ex(p, j, vec![])).collect();
        let g = batch_gradients(EncoderKind::MeanSeq, &shared, None, &history, &examples, 0).unwrap();
        assert_eq!(g.update.loss, 0.0);
        for row in g.update.item_grads.values() {
            assert!(row.iter().all(|&x| x == 0.0));
        }
        assert!(g.update.projection_grad.unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_pair_has_opposite_gradients() {
        let shared = table(vec![vec![0.3, -0.2], vec![0.3, -0.2]]);
        let uv = vec![0.5, 0.7];
        let g = batch_gradients(EncoderKind::Id, &shared, Some(&uv), &[0], &[ex(0, 0, vec![1])], 0).unwrap();
        let gp = &g.update.item_grads[&0];
        let gn = &g.update.item_grads[&1];
        for (a, b) in gp.iter().zip(gn) {
            assert!((a + b).abs() < 1e-15);
            assert!(a.abs() > 0.0);
        }
        // w = 1/2 each, so dL/dp = -u/2
        assert!((gp[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let shared = init_shared(9, 6, 4).unwrap();
        let history = vec![0, 1, 2];
        let examples = vec![ex(0, 0, vec![3, 4]), ex(1, 1, vec![0, 2, 5]), ex(2, 2, vec![0, 1, 3])];
        let g = batch_gradients(EncoderKind::MeanSeq, &shared, None, &history, &examples, 0).unwrap();
        let h = 1e-5;
        for (&item, row) in &g.update.item_grads {
            for c in 0..4 {
                let mut plus = shared.clone();
                plus.item_table.row_mut(item)[c] += h;
                let mut minus = shared.clone();
                minus.item_table.row_mut(item)[c] -= h;
                let fd = (batch_loss(EncoderKind::MeanSeq, &plus, None, &history, &examples, 0).unwrap()
                    - batch_loss(EncoderKind::MeanSeq, &minus, None, &history, &examples, 0).unwrap())
                    / (2.0 * h);
                assert!((fd - row[c]).abs() <= 1e-6 + 1e-4 * fd.abs(), "item {item} coord {c}: {fd} vs {}", row[c]);
            }
        }
    }

    #[test]
    fn client_setup_and_examples() {
        let split = UserSplit { train: vec![0, 1, 2, 1], val: 3, test: 4 };
        let cfg = ClientConfig { local_pool_size: 5, local_negatives_per_positive: 2, ..Default::default() };
        let mut c = ClientState::new(7, &split, 12, &cfg, EncoderKind::MeanSeq, 4, 1);
        assert_eq!(c.local_pool.len(), 5);
        assert!(c.local_pool.iter().all(|i| ![0, 1, 2, 3, 4].contains(i)));
        c.receive_negatives(NegativeAssignment { client: 7, items: vec![2, 11, 10] }, 1);
        let exs = c.build_examples(EncoderKind::MeanSeq, &cfg).unwrap();
        assert_eq!(exs.len(), 4);
        for e in &exs {
            assert!(!e.negatives.contains(&e.positive));
            assert!(e.negatives.contains(&11));
            assert_eq!(e.negatives.iter().collect::<HashSet<_>>().len(), e.negatives.len());
        }
        // Item 2 is a positive, so as a semi-hard arrival it is filtered, only
        // appearing as an in-batch negative for other positions.
        assert!(!exs[2].negatives.contains(&2));
        let id = ClientState::new(7, &split, 12, &cfg, EncoderKind::Id, 4, 1);
        assert!(id.user_vector.is_some());
    }

    #[test]
    fn tiny_vocabulary_pool_is_truncated() {
        let split = UserSplit { train: vec![0, 1], val: 2, test: 3 };
        let cfg = ClientConfig::default();
        let c = ClientState::new(0, &split, 6, &cfg, EncoderKind::MeanSeq, 2, 0);
        let mut pool = c.local_pool.clone();
        pool.sort();
        assert_eq!(pool, vec![4, 5]);
    }
}
