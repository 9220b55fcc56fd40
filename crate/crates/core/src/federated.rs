//! Simulated federation: skewed client shards, FedAvg, and round-based
//! training of prompts (and optionally the gate).

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::corpus::Sample;
use crate::error::{MopsError, Result};
use crate::numerics::{derive_seed, Matrix};
use crate::trainer::{evaluate, train_centralized, AdamMoments, TrainMode, TrainSettings, TrainableState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Samples grouped by task, tasks in ascending order.
    pub samples: Vec<Sample>,
    /// `(task, count)` for every task present in the corpus.
    pub task_counts: Vec<(usize, usize)>,
}

impl ClientPartition {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PromptsOnly,
    PromptsAndGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    SampleCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub active_per_round: usize,
    pub local_steps: usize,
    pub total_steps: usize,
    pub skew_factor: f64,
    /// Defaults to prompts only for the baseline and prompts plus gate for
    /// MoP when absent.
    #[serde(default)]
    pub aggregation: Option<Aggregation>,
    #[serde(default)]
    pub weighting: Weighting,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            active_per_round: 10,
            local_steps: 250,
            total_steps: 50_000,
            skew_factor: 15.0,
            aggregation: None,
            weighting: Weighting::Uniform,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.active_per_round == 0 || self.active_per_round > self.n_clients {
            return Err(MopsError::Config(format!(
                "active_per_round must lie in 1..={} (n_clients), got {}",
                self.n_clients, self.active_per_round
            )));
        }
        if self.local_steps == 0 {
            return Err(MopsError::Config("local_steps must be positive".into()));
        }
        let per_round = self.active_per_round * self.local_steps;
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(per_round) {
            return Err(MopsError::Config(format!(
                "total_steps {} is not a positive multiple of active_per_round × local_steps = {per_round}",
                self.total_steps
            )));
        }
        if !(self.skew_factor >= 1.0 && self.skew_factor.is_finite()) {
            return Err(MopsError::Config(format!("skew_factor must be at least 1, got {}", self.skew_factor)));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.total_steps / (self.active_per_round * self.local_steps)
    }

    pub fn aggregation_for(&self, mode: TrainMode) -> Aggregation {
        self.aggregation.unwrap_or(match mode {
            TrainMode::Baseline => Aggregation::PromptsOnly,
            TrainMode::Mop => Aggregation::PromptsAndGate,
        })
    }
}

/// Shard sizes for one task: `n − 1` partitions of `s` and one of
/// `floor(skew·s)`, with the remainder handed out one per small partition
/// first and the rest to the large one. The large share comes last.
pub fn skewed_sizes(total: usize, n: usize, skew: f64) -> Vec<usize> {
    let s = (total as f64 / (n as f64 - 1.0 + skew)).floor() as usize;
    let big = (skew * s as f64).floor() as usize;
    let mut sizes = vec![s; n - 1];
    sizes.push(big);
    let mut rest = total - sizes.iter().sum::<usize>();
    for size in sizes.iter_mut().take(n - 1) {
        if rest == 0 {
            break;
        }
        *size += 1;
        rest -= 1;
    }
    sizes[n - 1] += rest;
    sizes
}

/// Splits every task's samples into `n_clients` shards with one oversized
/// shard per task, then hands each client one shard per task at random.
pub fn partition_skewed(
    train: &[Sample],
    n_clients: usize,
    skew_factor: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    if n_clients == 0 {
        return Err(MopsError::Config("n_clients must be positive".into()));
    }
    if !(skew_factor >= 1.0 && skew_factor.is_finite()) {
        return Err(MopsError::Config(format!("skew_factor must be at least 1, got {skew_factor}")));
    }
    let mut tasks: Vec<usize> = train.iter().map(|s| s.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clients: Vec<ClientPartition> = (0..n_clients)
        .map(|client_id| ClientPartition { client_id, samples: Vec::new(), task_counts: Vec::new() })
        .collect();
    for &task in &tasks {
        let mut pool: Vec<&Sample> = train.iter().filter(|s| s.task == task).collect();
        if pool.len() < n_clients {
            return Err(MopsError::Input(format!(
                "task {task} has {} training samples, fewer than {n_clients} clients",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        let sizes = skewed_sizes(pool.len(), n_clients, skew_factor);
        let mut owners: Vec<usize> = (0..n_clients).collect();
        owners.shuffle(&mut rng);
        let mut start = 0;
        for (size, owner) in sizes.into_iter().zip(owners) {
            let c = &mut clients[owner];
            c.samples.extend(pool[start..start + size].iter().map(|s| (*s).clone()));
            c.task_counts.push((task, size));
            start += size;
        }
    }
    Ok(clients)
}

pub fn save_partitions(partitions: &[ClientPartition], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(partitions)? + "\n")?;
    Ok(())
}

fn weighted_mean(blocks: &[&Matrix], weights: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(blocks[0].rows(), blocks[0].cols());
    for (b, w) in blocks.iter().zip(weights) {
        for (o, v) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *o += w * v;
        }
    }
    out
}

/// Weighted mean of client states in the given order. With
/// `PromptsOnly`, the gate is copied from `server`. Optimiser moments are
/// dropped.
pub fn fedavg(
    server: &TrainableState,
    states: &[TrainableState],
    weights: &[f64],
    aggregation: Aggregation,
) -> Result<TrainableState> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(MopsError::Input(format!("{} states with {} weights", states.len(), weights.len())));
    }
    let shape = |s: &TrainableState| (s.injected.prompts.shape(), s.gating.hidden.shape(), s.gating.output.shape());
    if states.iter().any(|s| shape(s) != shape(server)) {
        return Err(MopsError::Shape("client states differ in structure from the server state".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MopsError::Input(format!("aggregation weights sum to {total}, not 1")));
    }
    let prompts = weighted_mean(&states.iter().map(|s| &s.injected.prompts).collect::<Vec<_>>(), weights);
    let mut out = server.clone();
    out.injected.prompts = prompts;
    if aggregation == Aggregation::PromptsAndGate {
        out.gating.hidden = weighted_mean(&states.iter().map(|s| &s.gating.hidden).collect::<Vec<_>>(), weights);
        out.gating.output = weighted_mean(&states.iter().map(|s| &s.gating.output).collect::<Vec<_>>(), weights);
    }
    out.moments = AdamMoments::default();
    out.step = states.iter().map(|s| s.step).max().unwrap_or(server.step);
    Ok(out)
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub client_ids: Vec<usize>,
    pub ppl_eval: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub rows: Vec<RoundRow>,
}

impl RoundMetrics {
    pub fn final_ppl(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.ppl_eval)
    }

    /// `round,client_ids,ppl_eval` with client ids joined by `;`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "client_ids", "ppl_eval"])?;
        for r in &self.rows {
            let ids = r.client_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
            let ppl = r.ppl_eval.map(|p| p.to_string()).unwrap_or_default();
            w.write_record([r.round.to_string(), ids, ppl])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed for `client`'s local training in `round`.
pub fn client_seed(seed: u64, round: usize, client: usize) -> u64 {
    derive_seed(derive_seed(seed, round as u64), client as u64)
}

/// Rounds of: sample active clients, train each locally from the server
/// state on its own shard, aggregate. Clients run one after another and are
/// reduced in ascending id order.
#[allow(clippy::too_many_arguments)]
pub fn train_federated(
    backbone: &Backbone,
    input_prompts: &Matrix,
    init: TrainableState,
    partitions: &[ClientPartition],
    config: &FederationConfig,
    local: &TrainSettings,
    eval: &[Sample],
    mode: TrainMode,
    seed: u64,
) -> Result<(TrainableState, RoundMetrics)> {
    config.validate()?;
    if partitions.len() != config.n_clients {
        return Err(MopsError::Input(format!("{} partitions for {} clients", partitions.len(), config.n_clients)));
    }
    let aggregation = config.aggregation_for(mode);
    let settings = TrainSettings { steps: config.local_steps, eval_every: 0, ..*local };
    let mut server = init;
    server.moments = AdamMoments::default();
    let mut metrics = RoundMetrics::default();
    for round in 0..config.rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX - round as u64));
        let mut active = sample_indices(&mut rng, config.n_clients, config.active_per_round).into_vec();
        active.sort_unstable();
        let mut states = Vec::with_capacity(active.len());
        for &c in &active {
            let shard = &partitions[c];
            let (state, _) = train_centralized(
                backbone,
                input_prompts,
                server.clone(),
                &shard.samples,
                &[],
                &settings,
                client_seed(seed, round, c),
                mode,
            )?;
            states.push(state);
        }
        let weights = match config.weighting {
            Weighting::Uniform => uniform_weights(active.len()),
            Weighting::SampleCount => {
                let counts: Vec<f64> = active.iter().map(|&c| partitions[c].sample_count() as f64).collect();
                let total: f64 = counts.iter().sum();
                counts.iter().map(|c| c / total).collect()
            }
        };
        server = fedavg(&server, &states, &weights, aggregation)?;
        let ppl_eval = if eval.is_empty() {
            None
        } else {
            Some(evaluate(backbone, input_prompts, &server, eval, mode, local.gate_input)?.loss.ppl)
        };
        metrics.rows.push(RoundRow { round: round + 1, client_ids: active, ppl_eval });
    }
    Ok((server, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use rand::Rng;

    fn train_set(per_task: usize) -> Vec<Sample> {
        let mut cc = CorpusConfig::toy_four();
        cc.samples_per_task = per_task;
        generate_corpus(&cc, 2).unwrap().train_owned()
    }

    #[test]
    fn no_skew_is_near_uniform() {
        let sizes = skewed_sizes(363, 10, 1.0);
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 363);
    }

    #[test]
    fn skew_fifteen_gives_fifteen_times_the_median() {
        let sizes = skewed_sizes(1140, 100, 15.0);
        assert_eq!(sizes.iter().sum::<usize>(), 1140);
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        let median = sorted[50] as f64;
        let largest = *sorted.last().unwrap() as f64;
        assert!((largest / median - 15.0).abs() < 1.0, "{largest} / {median}");
        assert_eq!(sorted.iter().filter(|&&s| s as f64 == largest).count(), 1);
    }

    #[test]
    fn partitions_cover_the_training_set_exactly_once() {
        let train = train_set(120);
        let parts = partition_skewed(&train, 10, 15.0, 4).unwrap();
        let mut seen: Vec<&Sample> = parts.iter().flat_map(|p| &p.samples).collect();
        let mut want: Vec<&Sample> = train.iter().collect();
        let key = |s: &&Sample| (s.task, s.tokens.clone());
        seen.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(seen, want);
        for task in 0..4 {
            let counts: Vec<usize> =
                parts.iter().map(|p| p.task_counts.iter().find(|(t, _)| *t == task).unwrap().1).collect();
            let max = *counts.iter().max().unwrap();
            assert_eq!(counts.iter().filter(|&&c| c == max).count(), 1);
            assert!(max > 5 * counts.iter().min().unwrap());
        }
        assert_eq!(partition_skewed(&train, 10, 15.0, 4).unwrap(), parts);
    }

    #[test]
    fn too_few_samples_names_the_task() {
        let train = train_set(20);
        let err = partition_skewed(&train, 50, 15.0, 1).unwrap_err().to_string();
        assert!(err.contains("task 0"), "{err}");
    }

    fn random_state(config: &ModelConfig, seed: u64) -> TrainableState {
        let mut s = TrainableState::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in s.injected.prompts.as_mut_slice().iter_mut().chain(s.gating.output.as_mut_slice()) {
            *v = rng.random_range(-1.0..1.0);
        }
        s
    }

    #[test]
    fn fedavg_cases() {
        let config = ModelConfig::toy();
        let x = random_state(&config, 1);
        let one = fedavg(&x, std::slice::from_ref(&x), &[1.0], Aggregation::PromptsAndGate).unwrap();
        assert_eq!(one.injected, x.injected);
        assert_eq!(one.gating, x.gating);

        let mut neg = x.clone();
        neg.injected.prompts.scale_in_place(-1.0);
        neg.gating.hidden.scale_in_place(-1.0);
        neg.gating.output.scale_in_place(-1.0);
        let z = fedavg(&x, &[x.clone(), neg], &uniform_weights(2), Aggregation::PromptsAndGate).unwrap();
        assert!(z.injected.prompts.as_slice().iter().all(|v| *v == 0.0));
        assert!(z.gating.output.as_slice().iter().all(|v| *v == 0.0));

        let states: Vec<_> = (0..5).map(|i| random_state(&config, 10 + i)).collect();
        let server = random_state(&config, 99);
        let avg = fedavg(&server, &states, &uniform_weights(5), Aggregation::PromptsOnly).unwrap();
        for i in 0..avg.injected.prompts.as_slice().len() {
            let mut acc = 0.0;
            for s in &states {
                acc += 0.2 * s.injected.prompts.as_slice()[i];
            }
            assert!((avg.injected.prompts.as_slice()[i] - acc).abs() <= 1e-12);
        }
        assert_eq!(avg.gating, server.gating);
        assert_eq!(avg.moments, AdamMoments::default());

        let mut other = config.clone();
        other.experts = 2;
        assert!(fedavg(&server, &[random_state(&other, 3)], &[1.0], Aggregation::PromptsOnly).is_err());
        assert!(fedavg(&server, &states, &[0.5; 5], Aggregation::PromptsOnly).is_err());
    }

    #[test]
    fn config_validation() {
        let c = FederationConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.rounds(), 20);
        let bad = FederationConfig { total_steps: 1000, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = FederationConfig { active_per_round: 101, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_client_federation_matches_centralised_training() {
        let config = ModelConfig::toy();
        let train = train_set(30);
        let b = Backbone::init(&config, 5).unwrap();
        let init = TrainableState::init(&config, 5).unwrap();
        let parts = partition_skewed(&train, 1, 1.0, 5).unwrap();
        let fed = FederationConfig {
            n_clients: 1,
            active_per_round: 1,
            local_steps: 12,
            total_steps: 12,
            skew_factor: 1.0,
            aggregation: None,
            weighting: Weighting::Uniform,
        };
        let local = TrainSettings::default();
        let (state, rounds) =
            train_federated(&b, &b.input_prompts, init.clone(), &parts, &fed, &local, &[], TrainMode::Mop, 8).unwrap();
        let settings = TrainSettings { steps: 12, eval_every: 0, ..local };
        let (central, _) = train_centralized(
            &b,
            &b.input_prompts,
            init,
            &parts[0].samples,
            &[],
            &settings,
            client_seed(8, 0, 0),
            TrainMode::Mop,
        )
        .unwrap();
        assert_eq!(state.injected, central.injected);
        assert_eq!(state.gating, central.gating);
        assert_eq!(rounds.rows.len(), 1);
        assert_eq!(rounds.rows[0].client_ids, vec![0]);
    }

    #[test]
    fn federated_runs_replay_and_log_rounds() {
        let config = ModelConfig::toy();
        let mut cc = CorpusConfig::toy_four();
        cc.samples_per_task = 50;
        let corpus = generate_corpus(&cc, 6).unwrap();
        let b = Backbone::init(&config, 6).unwrap();
        let init = TrainableState::init(&config, 6).unwrap();
        let parts = partition_skewed(&corpus.train_owned(), 6, 3.0, 6).unwrap();
        let fed = FederationConfig {
            n_clients: 6,
            active_per_round: 2,
            local_steps: 3,
            total_steps: 12,
            skew_factor: 3.0,
            aggregation: None,
            weighting: Weighting::Uniform,
        };
        let eval = corpus.test_owned();
        let run = |mode| {
            train_federated(&b, &b.input_prompts, init.clone(), &parts, &fed, &TrainSettings::default(), &eval, mode, 3)
                .unwrap()
        };
        let (a, ma) = run(TrainMode::Mop);
        let (c, mc) = run(TrainMode::Mop);
        assert_eq!(a, c);
        assert_eq!(ma, mc);
        assert_eq!(ma.rows.len(), 2);
        assert!(ma.rows.iter().all(|r| r.client_ids.len() == 2 && r.ppl_eval.is_some()));
        let (base, _) = run(TrainMode::Baseline);
        assert_eq!(base.gating, init.gating);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        ma.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("round,client_ids,ppl_eval\n1,"));
        save_partitions(&parts, &dir.path().join("partitions.json")).unwrap();
    }
}
