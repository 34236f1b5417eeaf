//! The central coordinator.
//!
//! The diffuser only ever sees embeddings. Each step it averages the
//! submissions of every sub-context into that group's context embedding and
//! hands it back to the group's members. Every `cluster_period` epochs it
//! regroups agents by how well their embeddings agree at shared positions.

use std::collections::BTreeMap;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::modified_similarity;
use crate::model::EmbeddingBatch;
use crate::numerics::{Mat, RngStream};
use crate::AgentId;

/// Context targets for one agent, row-aligned with its embedding batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub indices: Vec<usize>,
    pub embeddings: Mat,
}

pub type ContextBroadcast = BTreeMap<AgentId, ContextBatch>;

/// Pairwise agent scores, rows and columns in `agents` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub agents: Vec<AgentId>,
    pub values: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn get(&self, a: AgentId, b: AgentId) -> Option<f64> {
        let i = self.agents.iter().position(|x| *x == a)?;
        let j = self.agents.iter().position(|x| *x == b)?;
        Some(self.values[i][j])
    }
}

/// Disjoint grouping of all agents. Groups are sorted internally and ordered
/// by their smallest member.
#[derive(Debug, Clone, PartialEq)]
pub struct SubContextPartition {
    pub epoch: usize,
    pub groups: Vec<Vec<AgentId>>,
    pub scores: Option<ScoreMatrix>,
}

impl SubContextPartition {
    /// Everyone in one context.
    pub fn global(agents: impl IntoIterator<Item = AgentId>) -> Self {
        Self::from_groups(0, vec![agents.into_iter().collect()])
    }

    pub fn from_groups(epoch: usize, groups: Vec<Vec<AgentId>>) -> Self {
        let mut groups: Vec<Vec<AgentId>> = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        groups.sort_unstable();
        Self {
            epoch,
            groups,
            scores: None,
        }
    }

    pub fn agents(&self) -> Vec<AgentId> {
        let mut all: Vec<AgentId> = self.groups.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn group_of(&self, agent: AgentId) -> Option<&[AgentId]> {
        self.groups
            .iter()
            .find(|g| g.contains(&agent))
            .map(Vec::as_slice)
    }

    pub fn same_groups(&self, other: &SubContextPartition) -> bool {
        self.groups == other.groups
    }
}

/// Renders as `{0,1} {2}`.
impl std::fmt::Display for SubContextPartition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, g) in self.groups.iter().enumerate() {
            let ids: Vec<String> = g.iter().map(ToString::to_string).collect();
            write!(f, "{}{{{}}}", if i == 0 { "" } else { " " }, ids.join(","))?;
        }
        Ok(())
    }
}

/// Point minimising the summed squared Euclidean distance to every member,
/// row by row: the arithmetic mean, accumulated in the given order.
pub fn osmotic_centroid(members: &[&Mat]) -> Result<Mat> {
    let first = members
        .first()
        .ok_or_else(|| Error::Precondition("osmotic centroid of an empty group".into()))?;
    let mut sum = Mat::zeros(first.rows(), first.cols());
    for m in members {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "group embeddings",
                format!("{}x{}", first.rows(), first.cols()),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        sum.add_assign(m);
    }
    sum.scale(1.0 / members.len() as f64);
    Ok(sum)
}

fn check_submissions(
    submissions: &BTreeMap<AgentId, EmbeddingBatch>,
    agents: &[AgentId],
) -> Result<()> {
    let reference = agents.first().and_then(|a| submissions.get(a));
    for a in agents {
        let batch = submissions.get(a).ok_or_else(|| Error::Barrier {
            agent: *a,
            detail: "did not submit embeddings".into(),
        })?;
        if batch.agent_id != *a {
            return Err(Error::Contract(format!(
                "submission filed under agent {a} belongs to agent {}",
                batch.agent_id
            )));
        }
        if let Some(r) = reference {
            if batch.indices != r.indices {
                return Err(Error::Barrier {
                    agent: *a,
                    detail: format!(
                        "submitted {} embeddings at different positions than agent {}",
                        batch.len(),
                        r.agent_id
                    ),
                });
            }
        }
    }
    if let Some(extra) = submissions.keys().find(|k| !agents.contains(k)) {
        return Err(Error::Contract(format!(
            "agent {extra} submitted embeddings but is not in the partition"
        )));
    }
    Ok(())
}

/// Per-group centroids, delivered to every member of the group.
pub fn step_broadcast(
    submissions: &BTreeMap<AgentId, EmbeddingBatch>,
    partition: &SubContextPartition,
) -> Result<ContextBroadcast> {
    check_submissions(submissions, &partition.agents())?;
    let mut out = ContextBroadcast::new();
    for group in &partition.groups {
        let members: Vec<&Mat> = group.iter().map(|a| &submissions[a].embeddings).collect();
        let centroid = osmotic_centroid(&members)?;
        let indices = &submissions[&group[0]].indices;
        for a in group {
            out.insert(
                *a,
                ContextBatch {
                    indices: indices.clone(),
                    embeddings: centroid.clone(),
                },
            );
        }
    }
    Ok(out)
}

/// Regroups agents: mean β-similarity over the shared sample positions, an
/// edge wherever that score reaches `tau`, one group per connected component.
pub fn cluster_agents(
    samples: &BTreeMap<AgentId, EmbeddingBatch>,
    tau: f64,
    beta: f64,
    epoch: usize,
) -> Result<SubContextPartition> {
    let agents: Vec<AgentId> = samples.keys().copied().collect();
    let reference = samples
        .values()
        .next()
        .ok_or_else(|| Error::Precondition("clustering needs at least one agent".into()))?;
    if reference.is_empty() {
        return Err(Error::Precondition(
            "clustering needs at least one sample".into(),
        ));
    }
    for (a, s) in samples {
        if s.indices != reference.indices {
            return Err(Error::Contract(format!(
                "agent {a} was sampled at different positions than agent {}",
                reference.agent_id
            )));
        }
    }

    let n = agents.len();
    let count = reference.len() as f64;
    let mut values = vec![vec![0.0; n]; n];
    let mut components = UnionFind::<usize>::new(n);
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let (ei, ej) = (
                &samples[&agents[i]].embeddings,
                &samples[&agents[j]].embeddings,
            );
            let mut score = 0.0;
            for r in 0..ei.rows() {
                score += modified_similarity(ei.row(r), ej.row(r), beta)?;
            }
            score /= count;
            values[i][j] = score;
            values[j][i] = score;
            if score >= tau {
                components.union(i, j);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<AgentId>> = BTreeMap::new();
    for (i, a) in agents.iter().enumerate() {
        groups.entry(components.find(i)).or_default().push(*a);
    }
    let mut partition = SubContextPartition::from_groups(epoch, groups.into_values().collect());
    partition.scores = Some(ScoreMatrix { agents, values });
    Ok(partition)
}

/// Whether to regroup after finishing `epoch` (1-based).
pub fn partition_schedule(epoch: usize, period: usize) -> bool {
    period >= 1 && epoch > 0 && epoch.is_multiple_of(period)
}

/// Line of `clusters.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvent {
    pub epoch: usize,
    pub groups: Vec<Vec<AgentId>>,
    pub sample_indices: Vec<usize>,
    pub scores: ScoreMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffuserConfig {
    pub tau: f64,
    pub beta: f64,
    pub cluster_period: usize,
    pub cluster_samples: usize,
}

/// Stateful coordinator: active partition, sampling stream and the step
/// counter enforcing one broadcast per submitted step.
#[derive(Debug, Clone)]
pub struct Diffuser {
    config: DiffuserConfig,
    partition: SubContextPartition,
    rng: RngStream,
    step: u64,
}

impl Diffuser {
    pub fn new(config: DiffuserConfig, agents: &[AgentId], rng: RngStream) -> Self {
        Self {
            config,
            partition: SubContextPartition::global(agents.iter().copied()),
            rng,
            step: 0,
        }
    }

    pub fn config(&self) -> &DiffuserConfig {
        &self.config
    }

    pub fn partition(&self) -> &SubContextPartition {
        &self.partition
    }

    /// Number of completed exchanges.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Aggregates step `step` once every agent has submitted, then releases
    /// the broadcast. Steps must arrive in order.
    pub fn exchange(
        &mut self,
        step: u64,
        submissions: &BTreeMap<AgentId, EmbeddingBatch>,
    ) -> Result<ContextBroadcast> {
        if step != self.step {
            return Err(Error::Contract(format!(
                "diffuser expected step {}, agents submitted step {step}",
                self.step
            )));
        }
        let broadcast = step_broadcast(submissions, &self.partition).map_err(|e| match e {
            Error::Barrier { agent, detail } => Error::Barrier {
                agent,
                detail: format!("{detail} (step {step})"),
            },
            other => other,
        })?;
        self.step += 1;
        Ok(broadcast)
    }

    pub fn should_recluster(&self, epoch: usize) -> bool {
        partition_schedule(epoch, self.config.cluster_period)
    }

    /// Positions (into `0..available`) every agent must embed for the next
    /// clustering round.
    pub fn draw_sample_positions(&mut self, available: usize) -> Vec<usize> {
        let amount = self.config.cluster_samples.min(available);
        self.rng.sample_indices(available, amount)
    }

    /// Replaces the active partition from agents' sampled embeddings.
    pub fn recluster(
        &mut self,
        epoch: usize,
        samples: &BTreeMap<AgentId, EmbeddingBatch>,
    ) -> Result<ClusterEvent> {
        let expected = self.partition.agents();
        let got: Vec<AgentId> = samples.keys().copied().collect();
        if let Some(missing) = expected.iter().find(|a| !got.contains(a)) {
            return Err(Error::Barrier {
                agent: *missing,
                detail: format!("did not submit clustering samples (epoch {epoch})"),
            });
        }
        let partition = cluster_agents(samples, self.config.tau, self.config.beta, epoch)?;
        let event = ClusterEvent {
            epoch,
            groups: partition.groups.clone(),
            sample_indices: samples
                .values()
                .next()
                .map(|s| s.indices.clone())
                .unwrap_or_default(),
            scores: partition
                .scores
                .clone()
                .expect("cluster_agents records scores"),
        };
        self.partition = partition;
        Ok(event)
    }
}
