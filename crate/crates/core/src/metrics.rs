//! Embedding similarity, context accuracy and context loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffuser::SubContextPartition;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Mat};
use crate::AgentId;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity operands", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `sign(cos) · |cos|^β`: strong alignments survive, weak ones shrink.
pub fn modified_similarity(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    let c = cosine(a, b)?;
    Ok(c.signum() * c.abs().powf(beta))
}

/// Pairwise similarities between two agents' embedding sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub beta: f64,
    /// Logical index of row/column 0.
    pub first_index: usize,
    pub values: Mat,
}

pub fn similarity_matrix(
    agent_a: AgentId,
    emb_a: &Mat,
    agent_b: AgentId,
    emb_b: &Mat,
    beta: f64,
) -> Result<SimilarityMatrix> {
    if emb_a.rows() != emb_b.rows() {
        return Err(Error::shape(
            "similarity matrix operands",
            format!("{} embeddings", emb_a.rows()),
            format!("{} embeddings", emb_b.rows()),
        ));
    }
    let t = emb_a.rows();
    let mut values = Mat::zeros(t, t);
    for p in 0..t {
        for q in 0..t {
            values[(p, q)] = modified_similarity(emb_a.row(p), emb_b.row(q), beta)?;
        }
    }
    Ok(SimilarityMatrix {
        agent_a,
        agent_b,
        beta,
        first_index: 0,
        values,
    })
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn diagonal_mean(&self) -> f64 {
        let t = self.size();
        (0..t).map(|i| self.values[(i, i)]).sum::<f64>() / t.max(1) as f64
    }

    pub fn abs_diagonal_mean(&self) -> f64 {
        let t = self.size();
        (0..t).map(|i| self.values[(i, i)].abs()).sum::<f64>() / t.max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# agents={},{} beta={} T={}\n",
            self.agent_a,
            self.agent_b,
            self.beta,
            self.size()
        );
        for row in self.values.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain-text graymap, `[-1, 1]` mapped linearly onto `[0, 255]`.
    pub fn to_pgm(&self) -> String {
        let t = self.size();
        let mut out = format!("P2\n{t} {t}\n255\n");
        for row in self.values.row_iter() {
            let line: Vec<String> = row
                .iter()
                .map(|v| {
                    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0)
                        .round()
                        .to_string()
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Cosine mapped onto `[0, 1]`.
fn unit_interval_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((cosine(a, b)? + 1.0) / 2.0)
}

fn check_aligned(embeddings: &BTreeMap<AgentId, Mat>, group: &[AgentId]) -> Result<usize> {
    let mut len = None;
    for id in group {
        let m = embeddings
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no embeddings for agent {id}")))?;
        match len {
            None => len = Some(m.rows()),
            Some(t) if t != m.rows() => {
                return Err(Error::shape(
                    "agent embeddings",
                    format!("{t} rows"),
                    format!("{} rows for agent {id}", m.rows()),
                ))
            }
            _ => {}
        }
    }
    Ok(len.unwrap_or(0))
}

/// Mean pairwise `[0,1]` cosine inside one group of at least two agents.
pub fn group_accuracy(embeddings: &BTreeMap<AgentId, Mat>, group: &[AgentId]) -> Result<f64> {
    let n = group.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "context accuracy needs at least two agents, group has {n}"
        )));
    }
    let t = check_aligned(embeddings, group)?;
    if t == 0 {
        return Err(Error::UndefinedMetric(
            "context accuracy over zero indices".into(),
        ));
    }
    let mut sum = 0.0;
    for step in 0..t {
        for i in 0..n - 1 {
            for j in i + 1..n {
                sum += unit_interval_cosine(
                    embeddings[&group[i]].row(step),
                    embeddings[&group[j]].row(step),
                )?;
            }
        }
    }
    Ok(2.0 * sum / ((n * (n - 1) * t) as f64))
}

/// Per-group accuracy for every group of size ≥ 2, and their mean.
pub fn context_accuracy(
    embeddings: &BTreeMap<AgentId, Mat>,
    partition: &SubContextPartition,
) -> Result<f64> {
    let per_group: Vec<f64> = partition
        .groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| group_accuracy(embeddings, g))
        .collect::<Result<_>>()?;
    if per_group.is_empty() {
        return Err(Error::UndefinedMetric(
            "context accuracy is undefined when every group is a singleton".into(),
        ));
    }
    Ok(per_group.iter().sum::<f64>() / per_group.len() as f64)
}

pub fn group_loss(losses: &BTreeMap<AgentId, Vec<f64>>, group: &[AgentId]) -> Result<f64> {
    let mut t = None;
    let mut sum = 0.0;
    for id in group {
        let l = losses
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no losses for agent {id}")))?;
        match t {
            None => t = Some(l.len()),
            Some(n) if n != l.len() => {
                return Err(Error::shape(
                    "agent losses",
                    format!("{n} values"),
                    format!("{} values for agent {id}", l.len()),
                ))
            }
            _ => {}
        }
        sum += l.iter().sum::<f64>();
    }
    let count = group.len() * t.unwrap_or(0);
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "context loss over zero values".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Mean per-step total loss inside every group, averaged across groups.
pub fn context_loss(
    losses: &BTreeMap<AgentId, Vec<f64>>,
    partition: &SubContextPartition,
) -> Result<f64> {
    let per_group: Vec<f64> = partition
        .groups
        .iter()
        .map(|g| group_loss(losses, g))
        .collect::<Result<_>>()?;
    Ok(per_group.iter().sum::<f64>() / per_group.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetric {
    pub members: Vec<AgentId>,
    /// `None` for singleton groups.
    pub accuracy: Option<f64>,
    pub loss: f64,
}

/// Evaluation of one split at one epoch under the active partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    /// `None` when no group has two or more members.
    pub accuracy: Option<f64>,
    pub loss: f64,
    pub groups: Vec<GroupMetric>,
}

impl MetricRecord {
    pub fn build(
        epoch: usize,
        split: Split,
        embeddings: &BTreeMap<AgentId, Mat>,
        losses: &BTreeMap<AgentId, Vec<f64>>,
        partition: &SubContextPartition,
    ) -> Result<Self> {
        let groups = partition
            .groups
            .iter()
            .map(|g| {
                Ok(GroupMetric {
                    members: g.clone(),
                    accuracy: if g.len() >= 2 {
                        Some(group_accuracy(embeddings, g)?)
                    } else {
                        None
                    },
                    loss: group_loss(losses, g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let accuracy = match context_accuracy(embeddings, partition) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            epoch,
            split,
            accuracy,
            loss: context_loss(losses, partition)?,
            groups,
        })
    }

    pub fn group_of(&self, agent: AgentId) -> Option<&GroupMetric> {
        self.groups.iter().find(|g| g.members.contains(&agent))
    }
}

pub const METRICS_CSV_HEADER: &str = "epoch,split,group_id,accuracy,loss";

fn fmt_accuracy(a: Option<f64>) -> String {
    a.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// Group ids are the member ids joined with `+`, e.g. `2+3+4`.
pub fn group_label(members: &[AgentId]) -> String {
    members
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        for g in &r.groups {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.split,
                group_label(&g.members),
                fmt_accuracy(g.accuracy),
                g.loss
            );
        }
        let _ = writeln!(
            out,
            "{},{},overall,{},{}",
            r.epoch,
            r.split,
            fmt_accuracy(r.accuracy),
            r.loss
        );
    }
    out
}
