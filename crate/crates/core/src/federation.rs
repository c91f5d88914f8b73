//! Round orchestration: user selection, protected embedding upload,
//! clustering, negative distribution, local training, secure upload,
//! aggregation and the server-side Adam step.
//!
//! A round is a barrier-synchronized pipeline. Client phases run on a rayon
//! pool; server phases are sequential and always walk the selected clients in
//! selection order, so results do not depend on the thread count.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adam::AdamState;
use crate::client::{ClientState, LocalUpdate};
use crate::clustering::{cluster, ClusterAlgorithm, IncrementalWard};
use crate::config::{ClusterPopulation, ExperimentConfig};
use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, Phase};
use crate::model::{init_shared, Matrix, ModelParams, SharedParams};
use crate::negsampling::{difficulty_rank, semi_hard_sample, NegativeAssignment};
use crate::privacy::PerturbedEmbedding;
use crate::rng::{client_rng, server_rng, Rng, Stream};
use crate::ItemId;

/// Everything a client ever sends to the server.
#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    Embedding(&'a PerturbedEmbedding),
    Update(&'a LocalUpdate),
}

impl Payload<'_> {
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::Embedding(_) => "PerturbedEmbedding",
            Payload::Update(_) => "LocalUpdate",
        }
    }
}

/// Sees every payload at the moment it crosses to the server.
pub trait PayloadObserver: Send {
    fn observe(&mut self, payload: Payload<'_>);
}

/// Interception point for secure aggregation. The default passes updates through.
pub trait SecureUpload: Send {
    fn begin_round(&mut self, _round: u64, _participants: &[usize]) {}
    fn upload(&mut self, client: usize, update: LocalUpdate) -> LocalUpdate;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Passthrough;

impl SecureUpload for Passthrough {
    fn upload(&mut self, _client: usize, update: LocalUpdate) -> LocalUpdate {
        update
    }
}

pub fn secure_upload(hook: &mut dyn SecureUpload, client: usize, update: LocalUpdate) -> LocalUpdate {
    hook.upload(client, update)
}

/// `m` distinct client indices, uniform without replacement.
pub fn select_round_users(population: usize, m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if m > population {
        return Err(Error::PopulationTooSmall {
            population,
            requested: m,
        });
    }
    Ok(index::sample(rng, population, m).into_vec())
}

/// Mean of the round's updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedGradient {
    pub item_rows: BTreeMap<ItemId, Vec<f64>>,
    pub projection: Option<Matrix>,
}

/// Dense gradients are averaged over the updates; a sparse item row is summed
/// over the updates that carry it and divided by the total count.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<AggregatedGradient> {
    if updates.is_empty() {
        return Err(Error::Empty("updates to aggregate".into()));
    }
    let m = updates.len() as f64;
    let mut item_rows: BTreeMap<ItemId, Vec<f64>> = BTreeMap::new();
    let mut projection: Option<Matrix> = None;
    for u in updates {
        for (&item, row) in &u.item_grads {
            let acc = item_rows.entry(item).or_insert_with(|| vec![0.0; row.len()]);
            if acc.len() != row.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    got: row.len(),
                });
            }
            acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        if let Some(g) = &u.projection_grad {
            let acc = projection.get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            if acc.as_slice().len() != g.as_slice().len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.as_slice().len(),
                    got: g.as_slice().len(),
                });
            }
            acc.as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .for_each(|(a, x)| *a += x);
        }
    }
    item_rows
        .values_mut()
        .flatten()
        .for_each(|x| *x /= m);
    if let Some(p) = projection.as_mut() {
        p.as_mut_slice().iter_mut().for_each(|x| *x /= m);
    }
    Ok(AggregatedGradient {
        item_rows,
        projection,
    })
}

/// Server-held state. It never contains raw embeddings, histories or pools.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub shared: SharedParams,
    /// Groups: item table, projection.
    pub adam: AdamState,
    /// Latest protected embedding per client.
    pub cache: BTreeMap<usize, PerturbedEmbedding>,
    pub round: u64,
    seed: u64,
    sampler_rngs: HashMap<usize, Rng>,
    /// Pairwise costs over the cache, kept when Ward clusters the whole cache.
    ward: Option<IncrementalWard>,
}

impl ServerState {
    pub fn new(shared: SharedParams, seed: u64) -> Self {
        let sizes = [shared.item_table.as_slice().len(), shared.projection.as_slice().len()];
        ServerState {
            shared,
            adam: AdamState::new(&sizes),
            cache: BTreeMap::new(),
            round: 0,
            seed,
            sampler_rngs: HashMap::new(),
            ward: None,
        }
    }

    /// Stores a client's latest protected embedding.
    pub fn cache_embedding(&mut self, embedding: &PerturbedEmbedding) -> Result<()> {
        if let Some(w) = self.ward.as_mut() {
            w.insert(embedding)?;
        }
        self.cache.insert(embedding.client, embedding.clone());
        Ok(())
    }

    /// Per-client sampling stream; clients sharing a centroid draw independently.
    fn sampler_rng(&mut self, client: usize) -> &mut Rng {
        let seed = self.seed;
        self.sampler_rngs
            .entry(client)
            .or_insert_with(|| client_rng(seed, client, Stream::SemiHard))
    }

    pub fn adam_step(&mut self, grad: &AggregatedGradient, learning_rate: f64) -> Result<()> {
        let mut items = Matrix::zeros(self.shared.num_items(), self.shared.dim());
        for (&i, row) in &grad.item_rows {
            if i >= items.rows() {
                return Err(Error::InvalidItem {
                    index: i,
                    vocab: items.rows(),
                });
            }
            items.row_mut(i).copy_from_slice(row);
        }
        let zero_proj;
        let proj = match &grad.projection {
            Some(p) => p,
            None => {
                zero_proj = Matrix::zeros(self.shared.dim(), self.shared.dim());
                &zero_proj
            }
        };
        let SharedParams {
            item_table,
            projection,
        } = &mut self.shared;
        self.adam.step(
            &mut [item_table.as_mut_slice(), projection.as_mut_slice()],
            &[items.as_slice(), proj.as_slice()],
            learning_rate,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseTiming {
    pub phase: &'static str,
    pub start_ms: f64,
    pub ms: f64,
}

#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: u64,
    pub mean_loss: f64,
    pub selected: usize,
    pub clusters: usize,
    /// Validation metrics when the round was an evaluation round.
    pub eval: Option<MetricReport>,
    pub wall_ms: f64,
    pub phases: Vec<PhaseTiming>,
}

impl RoundMetrics {
    pub fn to_json(&self, timings: bool) -> Value {
        let mut v = json!({
            "round": self.round,
            "mean_loss": self.mean_loss,
            "selected": self.selected,
            "clusters": self.clusters,
        });
        let obj = v.as_object_mut().expect("object");
        if let Some(e) = &self.eval {
            obj.insert("hr@5".into(), json!(e.hr5));
            obj.insert("hr@10".into(), json!(e.hr10));
            obj.insert("ndcg@5".into(), json!(e.ndcg5));
            obj.insert("ndcg@10".into(), json!(e.ndcg10));
        }
        if timings {
            obj.insert("wall_ms".into(), json!(self.wall_ms));
            obj.insert("phases".into(), json!(self.phases));
        }
        v
    }

    pub fn phase(&self, name: &str) -> Option<&PhaseTiming> {
        self.phases.iter().find(|p| p.phase == name)
    }
}

pub const PHASES: [&str; 7] = [
    "select",
    "upload_embeddings",
    "cluster",
    "distribute_negatives",
    "local_training",
    "aggregate_update",
    "publish",
];

struct PhaseClock {
    origin: Instant,
    phases: Vec<PhaseTiming>,
}

impl PhaseClock {
    fn new() -> Self {
        PhaseClock {
            origin: Instant::now(),
            phases: Vec::with_capacity(PHASES.len()),
        }
    }

    fn time<T>(&mut self, phase: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.phases.push(PhaseTiming {
            phase,
            start_ms: (start - self.origin).as_secs_f64() * 1e3,
            ms: start.elapsed().as_secs_f64() * 1e3,
        });
        out
    }
}

/// Stops after `patience` evaluations without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters at the best validation evaluation.
    pub best_params: ModelParams,
    pub best_round: u64,
    pub best_val: Option<MetricReport>,
    pub test: MetricReport,
    pub rounds_run: u64,
    pub converged: bool,
    pub log: Vec<RoundMetrics>,
}

pub struct Simulation {
    config: ExperimentConfig,
    split: Arc<SplitDataset>,
    pub server: ServerState,
    clients: Vec<ClientState>,
    hook: Box<dyn SecureUpload>,
    observer: Option<Box<dyn PayloadObserver>>,
    selection_rng: Rng,
    cluster_rng: Rng,
    pool: Arc<rayon::ThreadPool>,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig, split: Arc<SplitDataset>) -> Result<Self> {
        config.validate_for(split.users.len(), split.num_items)?;
        let seed = config.federation.seed;
        let dim = config.model.dim;
        let shared = init_shared(seed, split.num_items, dim)?;
        let clients = split
            .users
            .iter()
            .enumerate()
            .map(|(id, u)| {
                ClientState::new(id, u, split.num_items, &config.client, config.model.encoder, dim, seed)
            })
            .collect();
        let mut server = ServerState::new(shared, seed);
        if config.cluster.algorithm == ClusterAlgorithm::Ward
            && config.cluster.population == ClusterPopulation::Cache
        {
            server.ward = Some(IncrementalWard::new(split.users.len()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.federation.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Simulation {
            config: config.clone(),
            split,
            server,
            clients,
            hook: Box::new(Passthrough),
            observer: None,
            selection_rng: server_rng(seed, Stream::Selection),
            cluster_rng: server_rng(seed, Stream::Clustering),
            pool: Arc::new(pool),
        })
    }

    pub fn with_upload_hook(mut self, hook: Box<dyn SecureUpload>) -> Self {
        self.hook = hook;
        self
    }

    pub fn with_observer(mut self, observer: Box<dyn PayloadObserver>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round(&self) -> u64 {
        self.server.round
    }

    fn observe(&mut self, payload: Payload<'_>) {
        if let Some(o) = self.observer.as_mut() {
            o.observe(payload);
        }
    }

    /// Shared parameters plus every client's private vector.
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            shared: self.server.shared.clone(),
            user_vectors: self
                .clients
                .iter()
                .filter_map(|c| c.user_vector.clone())
                .collect(),
        }
    }

    pub fn evaluate(&self, phase: Phase) -> Result<MetricReport> {
        let params = self.model_params();
        self.evaluate_params(&params, phase)
    }

    pub fn evaluate_params(&self, params: &ModelParams, phase: Phase) -> Result<MetricReport> {
        let cfg = &self.config;
        let split = &self.split;
        self.pool.install(|| {
            evaluate(
                params,
                cfg.model.encoder,
                split,
                phase,
                cfg.eval.exclude_seen,
                cfg.model.max_len,
            )
        })
    }

    /// Maps `f` over the selected clients in parallel; results come back in selection order.
    fn par_selected<T: Send>(
        &mut self,
        selected: &[usize],
        f: impl Fn(&mut ClientState) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let mut position = vec![None; self.clients.len()];
        for (pos, &c) in selected.iter().enumerate() {
            position[c] = Some(pos);
        }
        let clients = &mut self.clients;
        let mut out: Vec<(usize, Result<T>)> = self.pool.install(|| {
            clients
                .par_iter_mut()
                .enumerate()
                .filter_map(|(i, c)| position[i].map(|pos| (pos, f(c))))
                .collect()
        });
        out.sort_by_key(|(pos, _)| *pos);
        out.into_iter().map(|(_, r)| r).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.server.round + 1;
        let mut clock = PhaseClock::new();
        let m = self.config.federation.users_per_round;
        let kind = self.config.model.encoder;
        let max_len = self.config.model.max_len;
        let use_semi_hard = self.config.client.use_semi_hard;

        let selected = clock.time("select", || {
            select_round_users(self.clients.len(), m, &mut self.selection_rng)
        })?;

        let mut clusters = 0;
        if use_semi_hard {
            let privacy = self.config.privacy;
            let uploads = clock.time("upload_embeddings", || {
                let shared = self.server.shared.clone();
                self.par_selected(&selected, |c| {
                    c.protected_embedding(kind, &shared, &privacy, max_len)
                })
            })?;
            for e in &uploads {
                self.observe(Payload::Embedding(e));
            }

            let model = clock.time("cluster", || {
                for e in &uploads {
                    self.server.cache_embedding(e)?;
                }
                let cfg = self.config.cluster;
                if let Some(w) = &self.server.ward {
                    return w.cluster(cfg.count);
                }
                let population: Vec<PerturbedEmbedding> = match cfg.population {
                    ClusterPopulation::Cache => self.server.cache.values().cloned().collect(),
                    ClusterPopulation::Round => uploads,
                };
                let rng = &mut self.cluster_rng;
                self.pool
                    .install(|| cluster(cfg.algorithm, &population, cfg.count, rng))
            })?;
            clusters = model.num_clusters();

            clock.time("distribute_negatives", || -> Result<()> {
                let sampler = self.config.sampler;
                let mut rankings: HashMap<usize, Vec<ItemId>> = HashMap::new();
                for &c in &selected {
                    let cluster_id = *model.assignments.get(&c).ok_or(Error::UnknownClient(c))?;
                    let ranked = match rankings.entry(cluster_id) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => e.insert(difficulty_rank(
                            &model.centroids[cluster_id],
                            &self.server.shared.item_table,
                        )?),
                    };
                    let assignment: NegativeAssignment =
                        semi_hard_sample(c, ranked, &sampler, self.server.sampler_rng(c))?;
                    self.clients[c].receive_negatives(assignment, round);
                }
                Ok(())
            })?;
        }

        let client_cfg = self.config.client;
        let lr = self.config.federation.learning_rate;
        let updates = clock.time("local_training", || {
            let shared = self.server.shared.clone();
            self.par_selected(&selected, |c| {
                if use_semi_hard && c.negatives_round() != Some(round) {
                    return Err(Error::Config(format!(
                        "client {} would train before receiving round {round} negatives",
                        c.id
                    )));
                }
                let grads = c.local_gradients(kind, &client_cfg, &shared, max_len)?;
                if let Some(g) = &grads.user_vector_grad {
                    c.apply_private_step(g, lr);
                }
                Ok(grads.update)
            })
        })?;

        let mean_loss = updates.iter().map(|u| u.loss).sum::<f64>() / updates.len() as f64;
        clock.time("aggregate_update", || -> Result<()> {
            self.hook.begin_round(round, &selected);
            let mut received = Vec::with_capacity(updates.len());
            for (&c, update) in selected.iter().zip(updates) {
                let update = secure_upload(self.hook.as_mut(), c, update);
                self.observe(Payload::Update(&update));
                received.push(update);
            }
            let grad = aggregate(&received)?;
            self.server.adam_step(&grad, lr)
        })?;

        clock.time("publish", || {
            self.server.round = round;
        });

        Ok(RoundMetrics {
            round,
            mean_loss,
            selected: selected.len(),
            clusters,
            eval: None,
            wall_ms: clock.origin.elapsed().as_secs_f64() * 1e3,
            phases: clock.phases,
        })
    }

    /// Repeats rounds until validation HR@10 stops improving for `patience`
    /// evaluations or `max_rounds` is reached. `sink` sees each round's metrics.
    pub fn train(&mut self, mut sink: impl FnMut(&RoundMetrics)) -> Result<TrainingOutcome> {
        let fed = self.config.federation;
        let mut stopper = EarlyStopping::new(fed.patience);
        let mut best_params = self.model_params();
        let mut best_round = 0;
        let mut best_val: Option<MetricReport> = None;
        let mut log = Vec::new();
        let mut converged = false;

        while self.server.round < fed.max_rounds {
            let mut metrics = self.run_round()?;
            if metrics.round.is_multiple_of(fed.eval_every) {
                let val = self.evaluate(Phase::Val)?;
                metrics.eval = Some(val);
                match stopper.observe(val.hr10) {
                    StopDecision::Improved => {
                        best_params = self.model_params();
                        best_round = metrics.round;
                        best_val = Some(val);
                    }
                    StopDecision::Continue => {}
                    StopDecision::Stop => converged = true,
                }
            }
            sink(&metrics);
            log.push(metrics);
            if converged {
                break;
            }
        }

        if self.server.round > 0 && !self.server.round.is_multiple_of(fed.eval_every) {
            let val = self.evaluate(Phase::Val)?;
            if best_val.is_none_or(|b| val.hr10 > b.hr10) {
                best_params = self.model_params();
                best_round = self.server.round;
                best_val = Some(val);
            }
        }
        let test = self.evaluate_params(&best_params, Phase::Test)?;
        Ok(TrainingOutcome {
            best_params,
            best_round,
            best_val,
            test,
            rounds_run: self.server.round,
            converged,
            log,
        })
    }

    /// Uploads per client, for reporting the per-upload privacy budget.
    pub fn upload_counts(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.uploads).collect()
    }
}

/// Builds a simulation and trains it.
pub fn run_training(
    config: &ExperimentConfig,
    split: Arc<SplitDataset>,
    sink: impl FnMut(&RoundMetrics),
) -> Result<TrainingOutcome> {
    Simulation::new(config, split)?.train(sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn update(rows: &[(ItemId, Vec<f64>)], proj: Option<Vec<f64>>) -> LocalUpdate {
        LocalUpdate {
            item_grads: rows.iter().cloned().collect(),
            projection_grad: proj.map(|p| Matrix::from_vec(1, p.len(), p).unwrap()),
            loss: 0.0,
        }
    }

    #[test]
    fn selection_examples() {
        let mut rng = server_rng(0, Stream::Selection);
        let mut all = select_round_users(5, 5, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        let s = select_round_users(1000, 16, &mut rng).unwrap();
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 16);
        let a = select_round_users(1000, 16, &mut server_rng(4, Stream::Selection)).unwrap();
        let b = select_round_users(1000, 16, &mut server_rng(4, Stream::Selection)).unwrap();
        assert_eq!(a, b);
        assert!(select_round_users(3, 4, &mut rng).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let g = update(&[], Some(vec![0.5, -1.0]));
        let neg = update(&[], Some(vec![-0.5, 1.0]));
        let agg = aggregate(&[g.clone(), neg]).unwrap();
        assert_eq!(agg.projection.unwrap().as_slice(), &[0.0, 0.0]);

        let with_row = update(&[(3, vec![2.0, 4.0])], None);
        let empty = update(&[], None);
        let agg = aggregate(&[with_row, empty.clone(), empty.clone(), empty]).unwrap();
        assert_eq!(agg.item_rows[&3], vec![0.5, 1.0]);

        let single = update(&[(1, vec![0.25])], Some(vec![3.0]));
        let agg = aggregate(std::slice::from_ref(&single)).unwrap();
        assert_eq!(agg.item_rows, single.item_grads);
        assert_eq!(agg.projection, single.projection_grad);

        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn passthrough_is_identity() {
        let u = update(&[(0, vec![1.0, 2.0])], Some(vec![0.1]));
        let mut hook = Passthrough;
        assert_eq!(secure_upload(&mut hook, 0, u.clone()), u);
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(0.5), StopDecision::Improved);
        assert_eq!(s.observe(0.4), StopDecision::Stop);
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(0.1), StopDecision::Improved);
        assert_eq!(s.observe(0.1), StopDecision::Continue);
        assert_eq!(s.observe(0.2), StopDecision::Improved);
        assert_eq!(s.observe(0.0), StopDecision::Continue);
        assert_eq!(s.observe(0.0), StopDecision::Stop);
    }

    #[test]
    fn server_step_with_zero_gradient_is_a_no_op() {
        let shared = init_shared(1, 4, 2).unwrap();
        let mut server = ServerState::new(shared.clone(), 1);
        let grad = AggregatedGradient { item_rows: BTreeMap::new(), projection: None };
        server.adam_step(&grad, 1e-3).unwrap();
        assert_eq!(server.shared, shared);
        assert_eq!(server.adam.step, 1);
    }
}
