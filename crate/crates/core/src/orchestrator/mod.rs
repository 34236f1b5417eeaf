//! The training protocol.
//!
//! Per epoch, for every batch position `m` (all agents share the grid):
//!
//! 1. every agent encodes its batch `m` without updating;
//! 2. agents submit the embeddings; the diffuser waits for all of them;
//! 3. the diffuser averages each group's submissions and broadcasts them;
//! 4. every agent computes its total loss against its group's context and
//!    takes one Adam step.
//!
//! After the last batch the diffuser may regroup agents, then both splits are
//! evaluated under the active partition.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

pub use checkpoint::{
    checkpoint, checkpoint_file, decode_checkpoint, encode_checkpoint, restore, restore_expecting,
    ManifestEntry,
};
pub use config::{ContextSource, RunConfig, CONFIG_KEYS};

use crate::datagen::{sliding_windows, AgentDataset, ContextData, ContextSpec};
use crate::diffuser::{step_broadcast, ClusterEvent, Diffuser, SubContextPartition};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{metrics_csv, similarity_matrix, MetricRecord, SimilarityMatrix, Split};
use crate::model::{AgentModel, WindowBatch};
use crate::numerics::{AdamConfig, Mat, RngStream};
use crate::{AgentId, EMBEDDING_DIM};

// Seed substreams owned by the orchestrator; datagen uses low ids.
const STREAM_DIFFUSER: u64 = 1 << 40;
const STREAM_AGENT_INIT: u64 = 1 << 41;

/// Longest prefix of the test split exported as similarity matrices.
pub const SIMMAT_EXTENT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// Loads or generates the data a config refers to.
pub fn load_context(config: &RunConfig) -> Result<ContextData> {
    match &config.context {
        ContextSource::Generated(kind) => Ok(ContextSpec::new(*kind, config.seed).generate()),
        ContextSource::Files(dir) => ContextData::read_dir(dir),
    }
}

/// Checks every agent's splits have the same length and can be windowed.
fn check_alignment(data: &ContextData, window: usize) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let sets = data.split(split);
        let Some(first) = sets.first() else {
            return Err(Error::config(
                "context",
                format!("no agents in the {split} split"),
            ));
        };
        for ds in sets {
            if ds.len() != first.len() {
                return Err(Error::config(
                    "context",
                    format!(
                        "{split} series are misaligned: agent {} has {} samples, agent {} has {}",
                        first.agent_id,
                        first.len(),
                        ds.agent_id,
                        ds.len()
                    ),
                ));
            }
            if ds.n_features() == 0 {
                return Err(Error::config(
                    "context",
                    format!("agent {} has no features", ds.agent_id),
                ));
            }
        }
        if first.len() < window {
            return Err(Error::config(
                "window",
                format!(
                    "{window} exceeds the {} samples of the {split} split",
                    first.len()
                ),
            ));
        }
    }
    if data.agents() != data.test.iter().map(|d| d.agent_id).collect::<Vec<_>>() {
        return Err(Error::config(
            "context",
            "train and test splits list different agents",
        ));
    }
    Ok(())
}

/// Chronological batches; a lone trailing window is folded into the
/// previous batch so every batch can form a contrastive pair.
fn batches_for(ds: &AgentDataset, window: usize, batch: usize) -> Result<Vec<WindowBatch>> {
    let mut batches = sliding_windows(ds, window, batch)?;
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("checked");
        let prev = batches.last_mut().expect("checked");
        prev.windows.extend(last.windows);
        prev.indices.extend(last.indices);
    }
    Ok(batches)
}

struct Worker {
    model: AgentModel,
    train: Vec<WindowBatch>,
}

/// Forward-only pass over a split: embeddings of every window in order and
/// each window's total loss under `partition`.
type SplitPass = (BTreeMap<AgentId, Mat>, BTreeMap<AgentId, Vec<f64>>);

#[allow(clippy::needless_range_loop)]
fn forward_split(
    models: &[AgentModel],
    datasets: &[AgentDataset],
    partition: &SubContextPartition,
    config: &RunConfig,
    execution: Execution,
) -> Result<SplitPass> {
    if models.len() != datasets.len()
        || models
            .iter()
            .zip(datasets)
            .any(|(m, d)| m.agent_id != d.agent_id)
    {
        return Err(Error::Contract(
            "models and datasets list different agents".into(),
        ));
    }
    let loss_cfg = config.loss_config();
    let batches: Vec<Vec<WindowBatch>> = datasets
        .iter()
        .map(|d| batches_for(d, config.window, config.batch))
        .collect::<Result<_>>()?;
    let n_batches = batches[0].len();

    let mut embeddings: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    let mut losses: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    for m in 0..n_batches {
        let encoded: Vec<_> = map_agents(execution, models.len(), |i| {
            models[i].encode(&batches[i][m]).map(|(e, _)| e)
        })?;
        let submissions: BTreeMap<_, _> = encoded.into_iter().map(|e| (e.agent_id, e)).collect();
        let broadcast = step_broadcast(&submissions, partition)?;
        for (id, emb) in &submissions {
            let loss = total_loss(emb, &broadcast[id], &loss_cfg)?;
            losses
                .entry(*id)
                .or_default()
                .extend(std::iter::repeat_n(loss.value, emb.len()));
            embeddings
                .entry(*id)
                .or_default()
                .extend_from_slice(emb.embeddings.as_slice());
        }
    }
    let embeddings = embeddings
        .into_iter()
        .map(|(id, flat)| {
            let rows = flat.len() / EMBEDDING_DIM;
            (
                id,
                Mat::from_vec(rows, EMBEDDING_DIM, flat).expect("whole rows"),
            )
        })
        .collect();
    Ok((embeddings, losses))
}

fn map_agents<T, F>(execution: Execution, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match execution {
        Execution::Serial => (0..n).map(f).collect(),
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Forward-only evaluation of one split.
pub fn evaluate(
    epoch: usize,
    models: &[AgentModel],
    datasets: &[AgentDataset],
    partition: &SubContextPartition,
    config: &RunConfig,
) -> Result<MetricRecord> {
    evaluate_with(
        epoch,
        models,
        datasets,
        partition,
        config,
        Execution::Serial,
    )
}

fn evaluate_with(
    epoch: usize,
    models: &[AgentModel],
    datasets: &[AgentDataset],
    partition: &SubContextPartition,
    config: &RunConfig,
    execution: Execution,
) -> Result<MetricRecord> {
    let split = datasets
        .first()
        .map(|d| d.split)
        .ok_or_else(|| Error::Contract("evaluation without agents".into()))?;
    let (embeddings, losses) = forward_split(models, datasets, partition, config, execution)?;
    MetricRecord::build(epoch, split, &embeddings, &losses, partition)
}

/// Embeddings of every window of a split, one matrix per agent.
pub fn split_embeddings(
    models: &[AgentModel],
    datasets: &[AgentDataset],
    config: &RunConfig,
) -> Result<BTreeMap<AgentId, Mat>> {
    let mut out = BTreeMap::new();
    for (m, d) in models.iter().zip(datasets) {
        let mut flat = Vec::new();
        for b in batches_for(d, config.window, config.batch)? {
            flat.extend_from_slice(m.encode(&b)?.0.embeddings.as_slice());
        }
        let rows = flat.len() / EMBEDDING_DIM;
        out.insert(m.agent_id, Mat::from_vec(rows, EMBEDDING_DIM, flat)?);
    }
    Ok(out)
}

fn leading_rows(m: &Mat, n: usize) -> Mat {
    let n = n.min(m.rows());
    Mat::from_vec(n, m.cols(), m.as_slice()[..n * m.cols()].to_vec()).expect("prefix")
}

/// β-similarity and plain-cosine matrices for every agent pair `a ≤ b`.
pub fn pair_matrices(
    embeddings: &BTreeMap<AgentId, Mat>,
    beta: f64,
    extent: usize,
) -> Result<Vec<(SimilarityMatrix, SimilarityMatrix)>> {
    let ids: Vec<AgentId> = embeddings.keys().copied().collect();
    let mut out = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i..] {
            let ea = leading_rows(&embeddings[a], extent);
            let eb = leading_rows(&embeddings[b], extent);
            out.push((
                similarity_matrix(*a, &ea, *b, &eb, beta)?,
                similarity_matrix(*a, &ea, *b, &eb, 1.0)?,
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub config: String,
    pub agents: Vec<AgentId>,
    pub final_groups: Vec<Vec<AgentId>>,
    pub wall_time_secs: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub metrics: Vec<MetricRecord>,
    pub clusters: Vec<ClusterEvent>,
    pub models: Vec<AgentModel>,
    pub partition: SubContextPartition,
    /// Final-epoch test embeddings, one row per test window.
    pub test_embeddings: BTreeMap<AgentId, Mat>,
    pub metadata: RunMetadata,
}

impl RunArtifacts {
    pub fn record(&self, epoch: usize, split: Split) -> Option<&MetricRecord> {
        self.metrics
            .iter()
            .find(|r| r.epoch == epoch && r.split == split)
    }

    pub fn final_record(&self, split: Split) -> Option<&MetricRecord> {
        self.metrics.iter().rev().find(|r| r.split == split)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn clusters_jsonl(&self) -> String {
        clusters_jsonl(&self.clusters)
    }

    /// `metrics.csv`, `clusters.jsonl`, `checkpoints/`, `simmat/`, `run.json`
    /// and `config.cfg` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("metrics.csv", self.metrics_csv())?;
        write("clusters.jsonl", self.clusters_jsonl())?;
        write("config.cfg", self.config.to_text())?;
        write(
            "run.json",
            serde_json::to_string_pretty(&self.metadata).expect("metadata serialises"),
        )?;
        checkpoint(&self.models, &dir.join("checkpoints"))?;
        write_simmats(
            &dir.join("simmat"),
            Split::Test,
            &pair_matrices(&self.test_embeddings, self.config.beta, SIMMAT_EXTENT)?,
        )?;
        Ok(())
    }
}

pub fn clusters_jsonl(events: &[ClusterEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serialises") + "\n")
        .collect()
}

pub fn simmat_stem(split: Split, a: AgentId, b: AgentId) -> String {
    format!("{split}_{a}_{b}")
}

/// Writes `<stem>.csv` (β), `<stem>_cosine.csv` and `<stem>.pgm` per pair.
pub fn write_simmats(
    dir: &Path,
    split: Split,
    pairs: &[(SimilarityMatrix, SimilarityMatrix)],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (beta, cos) in pairs {
        let stem = simmat_stem(split, beta.agent_a, beta.agent_b);
        let csv = dir.join(format!("{stem}.csv"));
        beta.write_csv(&csv)?;
        cos.write_csv(&dir.join(format!("{stem}_cosine.csv")))?;
        beta.write_pgm(&dir.join(format!("{stem}.pgm")))?;
        written.push(csv);
    }
    Ok(written)
}

/// Owns agents, diffuser and data for the duration of a run.
pub struct Trainer {
    config: RunConfig,
    data: ContextData,
    workers: Vec<Worker>,
    diffuser: Diffuser,
    execution: Execution,
    loss_cfg: LossConfig,
    adam: AdamConfig,
}

impl Trainer {
    /// Fixes the seed, derives every agent's init stream
    /// and the diffuser's sampling stream, and builds the batch grid.
    pub fn new(config: RunConfig, data: ContextData) -> Result<Self> {
        config.validate()?;
        check_alignment(&data, config.window)?;
        let root = RngStream::new(config.seed);
        let workers = data
            .train
            .iter()
            .map(|ds| {
                let mut rng = root.substream(STREAM_AGENT_INIT + ds.agent_id.0 as u64);
                Ok(Worker {
                    model: AgentModel::new(ds.agent_id, ds.n_features(), &mut rng),
                    train: batches_for(ds, config.window, config.batch)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let diffuser = Diffuser::new(
            config.diffuser_config(),
            &data.agents(),
            root.substream(STREAM_DIFFUSER),
        );
        Ok(Self {
            loss_cfg: config.loss_config(),
            adam: config.adam_config(),
            config,
            data,
            workers,
            diffuser,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn models(&self) -> Vec<AgentModel> {
        self.workers.iter().map(|w| w.model.clone()).collect()
    }

    pub fn partition(&self) -> &SubContextPartition {
        self.diffuser.partition()
    }

    pub fn evaluate(&self, epoch: usize, split: Split) -> Result<MetricRecord> {
        evaluate_with(
            epoch,
            &self.models(),
            self.data.split(split),
            self.diffuser.partition(),
            &self.config,
            self.execution,
        )
    }

    /// One pass over every batch position. Returns the mean training loss.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let n_batches = self.workers[0].train.len();
        let mut loss_sum = 0.0;
        for m in 0..n_batches {
            let step = self.diffuser.step();
            let encoded = par_workers(self.execution, &mut self.workers, |w| {
                w.model.encode(&w.train[m])
            })?;
            let (submissions, caches): (BTreeMap<_, _>, Vec<_>) = encoded
                .into_iter()
                .map(|(e, c)| ((e.agent_id, e), c))
                .unzip();
            let broadcast = self.diffuser.exchange(step, &submissions)?;

            let (loss_cfg, adam) = (self.loss_cfg, self.adam);
            let jobs: Vec<_> = self.workers.iter_mut().zip(caches).collect();
            let run = |(w, cache): (&mut Worker, _)| -> Result<f64> {
                let id = w.model.agent_id;
                let emb = &submissions[&id];
                let loss = total_loss(emb, &broadcast[&id], &loss_cfg)?;
                if !loss.value.is_finite() {
                    return Err(Error::Divergence {
                        agent: id,
                        epoch,
                        batch: m,
                    });
                }
                let grads = w.model.encode_backward(&cache, &loss.grad)?;
                w.model.apply_update(&grads, &adam).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence {
                        agent: id,
                        epoch,
                        batch: m,
                    },
                    other => other,
                })?;
                Ok(loss.value)
            };
            let losses: Vec<f64> = match self.execution {
                Execution::Serial => jobs.into_iter().map(run).collect::<Result<_>>()?,
                Execution::Parallel => jobs.into_par_iter().map(run).collect::<Result<_>>()?,
            };
            loss_sum += losses.iter().sum::<f64>() / losses.len() as f64;
        }
        Ok(loss_sum / n_batches as f64)
    }

    /// Every agent embeds the same randomly drawn training
    /// positions and the diffuser regroups from those samples.
    pub fn recluster(&mut self, epoch: usize) -> Result<ClusterEvent> {
        let window = self.config.window;
        let available = self.data.train[0].window_count(window);
        let positions: Vec<usize> = self
            .diffuser
            .draw_sample_positions(available)
            .into_iter()
            .map(|p| p + window - 1)
            .collect();
        let data = &self.data;
        let samples = par_workers(self.execution, &mut self.workers, |w| {
            let ds = data
                .train
                .iter()
                .find(|d| d.agent_id == w.model.agent_id)
                .expect("worker per dataset");
            let batch = ds.windows_at(window, &positions)?;
            Ok(w.model.encode(&batch)?.0)
        })?;
        let samples: BTreeMap<_, _> = samples.into_iter().map(|e| (e.agent_id, e)).collect();
        self.diffuser.recluster(epoch, &samples)
    }

    pub fn run(mut self) -> Result<RunArtifacts> {
        let started = Instant::now();
        let mut metrics = vec![
            self.evaluate(0, Split::Train)?,
            self.evaluate(0, Split::Test)?,
        ];
        let mut clusters = Vec::new();
        info!(
            "epoch 0: train loss {:.5}, test accuracy {}",
            metrics[0].loss,
            fmt_opt(metrics[1].accuracy)
        );
        for epoch in 1..=self.config.epochs {
            let mean_loss = self.train_epoch(epoch)?;
            debug!("epoch {epoch}: mean step loss {mean_loss:.5}");
            if self.diffuser.should_recluster(epoch) {
                let event = self.recluster(epoch)?;
                info!(
                    "epoch {epoch}: regrouped into {}",
                    self.diffuser.partition()
                );
                clusters.push(event);
            }
            let train = self.evaluate(epoch, Split::Train)?;
            let test = self.evaluate(epoch, Split::Test)?;
            info!(
                "epoch {epoch}: train loss {:.5}, test accuracy {}, groups {}",
                train.loss,
                fmt_opt(test.accuracy),
                self.diffuser.partition()
            );
            metrics.push(train);
            metrics.push(test);
        }
        let models = self.models();
        let test_embeddings = split_embeddings(&models, &self.data.test, &self.config)?;
        let partition = self.diffuser.partition().clone();
        let metadata = RunMetadata {
            config: self.config.to_text(),
            agents: self.data.agents(),
            final_groups: partition.groups.clone(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        Ok(RunArtifacts {
            config: self.config,
            metrics,
            clusters,
            models,
            partition,
            test_embeddings,
            metadata,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |a| format!("{a:.5}"))
}

fn par_workers<T, F>(execution: Execution, workers: &mut [Worker], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut Worker) -> Result<T> + Sync + Send,
{
    match execution {
        Execution::Serial => workers.iter_mut().map(f).collect(),
        Execution::Parallel => workers.par_iter_mut().map(f).collect(),
    }
}

/// Runs a full training session and, if `out_dir` is set, writes the
/// artifact tree there.
pub fn train(config: RunConfig) -> Result<RunArtifacts> {
    train_with(config, Execution::default())
}

pub fn train_with(config: RunConfig, execution: Execution) -> Result<RunArtifacts> {
    config.validate()?;
    let data = load_context(&config)?;
    let artifacts = Trainer::new(config.clone(), data)?
        .with_execution(execution)
        .run()?;
    if let Some(dir) = &config.out_dir {
        artifacts.write(dir)?;
        info!("wrote artifacts to {}", dir.display());
    }
    Ok(artifacts)
}

/// The partition recorded by the last regrouping in `clusters.jsonl`, or the
/// global context if there was none.
pub fn final_partition_from_trace(path: &Path, agents: &[AgentId]) -> Result<SubContextPartition> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match text.lines().rfind(|l| !l.trim().is_empty()) {
        None => Ok(SubContextPartition::global(agents.iter().copied())),
        Some(line) => {
            let event: ClusterEvent = serde_json::from_str(line)
                .map_err(|e| Error::schema(path, format!("bad cluster record: {e}")))?;
            let mut p = SubContextPartition::from_groups(event.epoch, event.groups);
            if p.agents() != agents {
                return Err(Error::schema(
                    path,
                    "cluster trace lists a different agent set",
                ));
            }
            p.scores = Some(event.scores);
            Ok(p)
        }
    }
}
