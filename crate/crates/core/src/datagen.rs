//! Synthetic contexts and chronological windowing.
//!
//! Three contexts are available:
//!
//! * `simple`: two agents. Agent 1 follows a ramp/plateau cycle; agent 0
//!   follows the same cycle but oscillates while agent 1 sits on the plateau.
//! * `simple+misleading`: the simple context plus agents whose single feature
//!   is i.i.d. standard normal noise.
//! * `complex`: five agents. Agents 0 and 1 are the simple pair shifted by
//!   constant offsets; agents 2 and 3 follow a second cycle and its mirror
//!   image; agent 4 sees a discretised copy of that cycle plus a sinusoidal
//!   mix.
//!
//! All agents of a context share the same timestamps, so the values at one
//! position across agents form that position's context tuple.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Split;
use crate::model::WindowBatch;
use crate::numerics::{Mat, RngStream};
use crate::AgentId;

/// Every tunable number used by the generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConstants {
    pub simple_period: usize,
    pub complex_period: usize,
    /// Fraction of a period spent ramping up (and, symmetrically, down).
    pub ramp_fraction: f64,
    pub jitter_std: f64,
    pub oscillation_amplitude: f64,
    pub oscillation_period: f64,
    pub offset_agent0: f64,
    pub offset_agent1: f64,
    pub mix_scale: f64,
    pub mix_amplitude: f64,
    pub mix_period: f64,
    pub discrete_levels: f64,
}

impl Default for GeneratorConstants {
    fn default() -> Self {
        Self {
            simple_period: 100,
            complex_period: 80,
            ramp_fraction: 0.25,
            jitter_std: 0.02,
            oscillation_amplitude: 0.3,
            oscillation_period: 10.0,
            offset_agent0: 2.0,
            offset_agent1: 4.0,
            mix_scale: 0.5,
            mix_amplitude: 0.4,
            mix_period: 20.0,
            discrete_levels: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextKind {
    Simple,
    SimpleMisleading,
    Complex,
}

impl ContextKind {
    pub fn name(self) -> &'static str {
        match self {
            ContextKind::Simple => "simple",
            ContextKind::SimpleMisleading => "simple+misleading",
            ContextKind::Complex => "complex",
        }
    }
}

impl std::fmt::Display for ContextKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(ContextKind::Simple),
            "simple+misleading" | "misleading" => Ok(ContextKind::SimpleMisleading),
            "complex" => Ok(ContextKind::Complex),
            other => Err(Error::config(
                "context",
                format!(
                    "unknown context `{other}` (expected simple, simple+misleading or complex)"
                ),
            )),
        }
    }
}

/// Everything needed to regenerate a context bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub kind: ContextKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Number of noise agents; only used by `simple+misleading`.
    pub misleading: usize,
    pub constants: GeneratorConstants,
}

impl ContextSpec {
    pub fn new(kind: ContextKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            n_train: 1000,
            n_test: 200,
            misleading: 2,
            constants: GeneratorConstants::default(),
        }
    }

    pub fn generate(&self) -> ContextData {
        let (train, test) = match self.kind {
            ContextKind::Simple => gen_simple(self),
            ContextKind::SimpleMisleading => {
                let (mut train, mut test) = gen_simple(self);
                let (mt, ms) =
                    gen_misleading(self.seed, self.misleading, self.n_train, self.n_test, 2);
                train.extend(mt);
                test.extend(ms);
                (train, test)
            }
            ContextKind::Complex => gen_complex(self),
        };
        ContextData {
            generator: Some(*self),
            train,
            test,
        }
    }
}

/// One agent's series for one split: `N × k`, one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDataset {
    pub agent_id: AgentId,
    pub split: Split,
    pub names: Vec<String>,
    pub values: Mat,
}

impl AgentDataset {
    pub fn from_columns(agent_id: AgentId, split: Split, columns: &[Vec<f64>]) -> Self {
        let n = columns.first().map_or(0, Vec::len);
        let k = columns.len();
        let mut values = Mat::zeros(n, k);
        for (c, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), n, "feature columns must have equal length");
            for (r, v) in col.iter().enumerate() {
                values[(r, c)] = *v;
            }
        }
        Self {
            agent_id,
            split,
            names: (0..k).map(|i| format!("feature_{i}")).collect(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.values[(r, c)]).collect()
    }

    /// Number of full windows of length `l`.
    pub fn window_count(&self, l: usize) -> usize {
        (self.len() + 1).saturating_sub(l)
    }

    /// The window ending at position `t`.
    pub fn window(&self, l: usize, t: usize) -> Mat {
        let k = self.n_features();
        let start = t + 1 - l;
        Mat::from_vec(
            l,
            k,
            self.values.as_slice()[start * k..(t + 1) * k].to_vec(),
        )
        .expect("window bounds checked by caller")
    }

    /// Windows ending at each of `positions`, in the given order.
    pub fn windows_at(&self, l: usize, positions: &[usize]) -> Result<WindowBatch> {
        for &t in positions {
            if t + 1 < l || t >= self.len() {
                return Err(Error::Precondition(format!(
                    "window of length {l} ending at {t} does not fit agent {}'s {} samples",
                    self.agent_id,
                    self.len()
                )));
            }
        }
        Ok(WindowBatch {
            agent_id: self.agent_id,
            windows: positions.iter().map(|&t| self.window(l, t)).collect(),
            indices: positions.to_vec(),
        })
    }
}

/// Train and test datasets of all agents in a context, sorted by agent id.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextData {
    /// Set when the data came from a generator rather than external files.
    pub generator: Option<ContextSpec>,
    pub train: Vec<AgentDataset>,
    pub test: Vec<AgentDataset>,
}

impl ContextData {
    pub fn split(&self, split: Split) -> &[AgentDataset] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn agents(&self) -> Vec<AgentId> {
        self.train.iter().map(|d| d.agent_id).collect()
    }

    pub fn file_name(agent: AgentId, split: Split) -> String {
        format!("agent_{agent}_{split}.csv")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = String::new();
        match &self.generator {
            Some(g) => {
                let _ = writeln!(header, "# generator={} seed={}", g.kind, g.seed);
                let _ = writeln!(
                    header,
                    "# constants={}",
                    serde_json::to_string(&g.constants).expect("constants serialise")
                );
            }
            None => header.push_str("# generator=external\n"),
        }
        for ds in self.train.iter().chain(&self.test) {
            let path = dir.join(Self::file_name(ds.agent_id, ds.split));
            write_dataset_csv(ds, &header, &path)?;
        }
        Ok(())
    }

    /// Loads every `agent_<id>_<split>.csv` in `dir`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name
                .strip_prefix("agent_")
                .and_then(|r| r.strip_suffix("_train.csv"))
                .and_then(|r| r.parse::<usize>().ok())
            {
                ids.push(AgentId(id));
            }
        }
        if ids.is_empty() {
            return Err(Error::schema(dir, "no agent_<id>_train.csv files found"));
        }
        ids.sort_unstable();
        let mut data = ContextData {
            generator: None,
            train: Vec::new(),
            test: Vec::new(),
        };
        for id in ids {
            data.train.push(read_dataset_csv(
                &dir.join(Self::file_name(id, Split::Train)),
                id,
                Split::Train,
            )?);
            data.test.push(read_dataset_csv(
                &dir.join(Self::file_name(id, Split::Test)),
                id,
                Split::Test,
            )?);
        }
        Ok(data)
    }
}

pub fn write_dataset_csv(ds: &AgentDataset, header: &str, path: &Path) -> Result<()> {
    let mut out = String::from(header);
    out.push('t');
    for name in &ds.names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (t, row) in ds.values.row_iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset_csv(path: &Path, agent_id: AgentId, split: Split) -> Result<AgentDataset> {
    let bad = |msg: String| Error::schema(PathBuf::from(path), msg);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::schema(path, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.get(0) != Some("t") || headers.len() < 2 {
        return Err(bad("expected header `t,feature_0[,feature_1,...]`".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let t: usize = record
            .get(0)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("row {line}: bad timestamp")))?;
        if t != line {
            return Err(bad(format!("row {line}: timestamp {t} out of order")));
        }
        for (c, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                bad(format!(
                    "row {line}, {}: `{cell}` is not a number",
                    names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(bad(format!("row {line}, {}: non-finite value", names[c])));
            }
            data.push(v);
        }
        rows += 1;
    }
    let values = Mat::from_vec(rows, names.len(), data).map_err(|e| bad(e.to_string()))?;
    Ok(AgentDataset {
        agent_id,
        split,
        names,
        values,
    })
}

// Stream ids: (purpose << 1) | split.
const STREAM_SIMPLE: u64 = 1;
const STREAM_COMPLEX: u64 = 2;
const STREAM_MISLEADING: u64 = 16;

fn stream_id(purpose: u64, split: Split) -> u64 {
    (purpose << 1) | matches!(split, Split::Test) as u64
}

/// Noise-free ramp/plateau cycle at absolute time `t`.
fn cycle_shape(t: usize, period: usize, ramp_fraction: f64) -> f64 {
    let ramp = (period as f64 * ramp_fraction).round().max(1.0) as usize;
    let p = t % period;
    if p < ramp {
        p as f64 / ramp as f64
    } else if p < period - ramp {
        1.0
    } else {
        (period - p) as f64 / ramp as f64
    }
}

fn on_plateau(t: usize, period: usize, ramp_fraction: f64) -> bool {
    let ramp = (period as f64 * ramp_fraction).round().max(1.0) as usize;
    let p = t % period;
    p >= ramp && p < period - ramp
}

/// Jittered cycle for `n` steps starting at absolute time `t0`.
fn jittered_cycle(
    rng: &mut RngStream,
    t0: usize,
    n: usize,
    period: usize,
    c: &GeneratorConstants,
) -> Vec<f64> {
    (t0..t0 + n)
        .map(|t| cycle_shape(t, period, c.ramp_fraction) + rng.normal(0.0, c.jitter_std))
        .collect()
}

fn sine(t: usize, period: f64) -> f64 {
    (2.0 * std::f64::consts::PI * t as f64 / period).sin()
}

/// Test data continues the timeline where training data stops.
fn time_origin(spec: &ContextSpec, split: Split) -> (usize, usize) {
    match split {
        Split::Train => (0, spec.n_train),
        Split::Test => (spec.n_train, spec.n_test),
    }
}

fn simple_pair(spec: &ContextSpec, split: Split) -> (Vec<f64>, Vec<f64>) {
    let c = &spec.constants;
    let (t0, n) = time_origin(spec, split);
    let mut rng = RngStream::with_stream(spec.seed, stream_id(STREAM_SIMPLE, split));
    let base = jittered_cycle(&mut rng, t0, n, c.simple_period, c);
    let oscillating = base
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let t = t0 + i;
            let mask = on_plateau(t, c.simple_period, c.ramp_fraction) as u8 as f64;
            b + c.oscillation_amplitude * sine(t, c.oscillation_period) * mask
        })
        .collect();
    (oscillating, base)
}

/// Agent 0 (oscillating during plateaus) and agent 1 (plain cycle).
pub fn gen_simple(spec: &ContextSpec) -> (Vec<AgentDataset>, Vec<AgentDataset>) {
    let build = |split| {
        let (a0, a1) = simple_pair(spec, split);
        vec![
            AgentDataset::from_columns(AgentId(0), split, &[a0]),
            AgentDataset::from_columns(AgentId(1), split, &[a1]),
        ]
    };
    (build(Split::Train), build(Split::Test))
}

/// `count` agents of i.i.d. N(0, 1) noise, ids starting at `first_id`.
pub fn gen_misleading(
    seed: u64,
    count: usize,
    n_train: usize,
    n_test: usize,
    first_id: usize,
) -> (Vec<AgentDataset>, Vec<AgentDataset>) {
    let build = |split, n| {
        (0..count)
            .map(|k| {
                let purpose = STREAM_MISLEADING + k as u64;
                let mut rng = RngStream::with_stream(seed, stream_id(purpose, split));
                let values: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
                AgentDataset::from_columns(AgentId(first_id + k), split, &[values])
            })
            .collect()
    };
    (build(Split::Train, n_train), build(Split::Test, n_test))
}

/// Five agents in two latent groups: {0, 1} and {2, 3, 4}.
pub fn gen_complex(spec: &ContextSpec) -> (Vec<AgentDataset>, Vec<AgentDataset>) {
    let c = &spec.constants;
    let build = |split| {
        let (a0, a1) = simple_pair(spec, split);
        let (t0, n) = time_origin(spec, split);
        let mut rng = RngStream::with_stream(spec.seed, stream_id(STREAM_COMPLEX, split));
        let s = jittered_cycle(&mut rng, t0, n, c.complex_period, c);

        let a0: Vec<f64> = a0.iter().map(|v| v + c.offset_agent0).collect();
        let a1: Vec<f64> = a1.iter().map(|v| v + c.offset_agent1).collect();
        let a3: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let discrete: Vec<f64> = s
            .iter()
            .map(|v| (c.discrete_levels * v.clamp(0.0, 1.0)).round())
            .collect();
        let mix: Vec<f64> = s
            .iter()
            .enumerate()
            .map(|(i, v)| c.mix_scale * v + c.mix_amplitude * sine(t0 + i, c.mix_period))
            .collect();
        vec![
            AgentDataset::from_columns(AgentId(0), split, &[a0]),
            AgentDataset::from_columns(AgentId(1), split, &[a1]),
            AgentDataset::from_columns(AgentId(2), split, std::slice::from_ref(&s)),
            AgentDataset::from_columns(AgentId(3), split, &[a3]),
            AgentDataset::from_columns(AgentId(4), split, &[discrete, mix]),
        ]
    };
    (build(Split::Train), build(Split::Test))
}

/// Stride-1 windows of length `l`, grouped into consecutive batches of
/// `batch` (the last one may be shorter). Never shuffled.
pub fn sliding_windows(ds: &AgentDataset, l: usize, batch: usize) -> Result<Vec<WindowBatch>> {
    if l == 0 || batch == 0 {
        return Err(Error::Precondition(
            "window length and batch size must be positive".into(),
        ));
    }
    if ds.len() < l {
        return Err(Error::Precondition(format!(
            "agent {} has {} samples, fewer than the window length {l}",
            ds.agent_id,
            ds.len()
        )));
    }
    let positions: Vec<usize> = (l - 1..ds.len()).collect();
    positions
        .chunks(batch)
        .map(|chunk| ds.windows_at(l, chunk))
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
