//! `osmo`: generate contexts, train agents, evaluate and export run artifacts.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numeric
//! error, 3 I/O or file-format error. Progress goes to standard error;
//! results are only ever written to files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use osmotic::datagen::ContextData;
use osmotic::diffuser::SubContextPartition;
use osmotic::metrics::{metrics_csv, MetricRecord, Split};
use osmotic::orchestrator::{
    evaluate, final_partition_from_trace, load_context, pair_matrices, restore_expecting,
    split_embeddings, train, write_simmats, ManifestEntry, RunConfig,
};
use osmotic::{AgentId, Error, ErrorClass, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "osmo", version, about = "Osmotic learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file (flat `key = value` lines or a JSON object)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, applied after the file; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a generated context as per-agent CSV files
    Generate(ConfigArgs),
    /// Train every agent of a context and write the run directory
    Train(ConfigArgs),
    /// Re-evaluate a run's checkpoints under its final partition
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Evaluate one split only
        #[arg(long)]
        split: Option<Split>,
        /// Where to write the metrics CSV (default `<run>/eval.csv`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute similarity matrices for chosen agent pairs
    ExportSimmat {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated agent ids; every pair among them is exported
        #[arg(long, value_delimiter = ',', required = true)]
        agents: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory (default `<run>/simmat`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flatten a run's cluster trace into membership and score tables
    ExportClusters {
        #[arg(long)]
        run: PathBuf,
        /// Output directory (default: the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Runtime => EXIT_RUNTIME,
        ErrorClass::Io => EXIT_IO,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => generate(&args.resolve()?),
        Command::Train(args) => {
            let cfg = args.resolve()?;
            if cfg.out_dir.is_none() {
                return Err(Error::Config {
                    key: "out_dir".into(),
                    message: "training needs an output directory (--out or out_dir)".into(),
                });
            }
            let artifacts = train(cfg)?;
            if let Some(test) = artifacts.final_record(Split::Test) {
                info!(
                    "final test accuracy {} under {}",
                    test.accuracy
                        .map_or("undefined".into(), |a| format!("{a:.4}")),
                    artifacts.partition
                );
            }
            Ok(())
        }
        Command::Eval { run, split, out } => {
            let out = out.unwrap_or_else(|| run.join("eval.csv"));
            eval(&run, split, &out)
        }
        Command::ExportSimmat {
            run,
            agents,
            split,
            out,
        } => {
            let out = out.unwrap_or_else(|| run.join("simmat"));
            export_simmat(&run, &agents, split, &out)
        }
        Command::ExportClusters { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            export_clusters(&run, &out)
        }
    }
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir.as_ref().ok_or_else(|| Error::Config {
        key: "out_dir".into(),
        message: "generate needs an output directory (--out or out_dir)".into(),
    })?;
    let data = load_context(cfg)?;
    data.write_dir(out)?;
    info!("wrote {} agents to {}", data.agents().len(), out.display());
    Ok(())
}

struct LoadedRun {
    config: RunConfig,
    data: ContextData,
    models: Vec<osmotic::model::AgentModel>,
}

fn load_run(run: &Path) -> Result<LoadedRun> {
    let config = RunConfig::from_file(&run.join("config.cfg"))?;
    let data = load_context(&config)?;
    let expected: Vec<ManifestEntry> = data
        .train
        .iter()
        .map(|d| ManifestEntry {
            agent_id: d.agent_id,
            n_features: d.n_features(),
        })
        .collect();
    let models = restore_expecting(&run.join("checkpoints"), &expected)?;
    Ok(LoadedRun {
        config,
        data,
        models,
    })
}

fn partition_of(run: &Path, agents: &[AgentId]) -> Result<SubContextPartition> {
    let trace = run.join("clusters.jsonl");
    if trace.exists() {
        final_partition_from_trace(&trace, agents)
    } else {
        Ok(SubContextPartition::global(agents.iter().copied()))
    }
}

fn eval(run: &Path, split: Option<Split>, out: &Path) -> Result<()> {
    let loaded = load_run(run)?;
    let partition = partition_of(run, &loaded.data.agents())?;
    let splits = match split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Test],
    };
    let records: Vec<MetricRecord> = splits
        .into_iter()
        .map(|s| {
            evaluate(
                loaded.config.epochs,
                &loaded.models,
                loaded.data.split(s),
                &partition,
                &loaded.config,
            )
        })
        .collect::<Result<_>>()?;
    write_file(out, metrics_csv(&records))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn export_simmat(run: &Path, agents: &[usize], split: Split, out: &Path) -> Result<()> {
    let loaded = load_run(run)?;
    let known = loaded.data.agents();
    let mut selected = Vec::new();
    for &a in agents {
        let id = AgentId(a);
        if !known.contains(&id) {
            return Err(Error::Config {
                key: "agents".into(),
                message: format!("agent {id} is not part of this run"),
            });
        }
        if !selected.contains(&id) {
            selected.push(id);
        }
    }
    let idx: Vec<usize> = selected
        .iter()
        .map(|id| known.iter().position(|k| k == id).expect("checked"))
        .collect();
    let models: Vec<_> = idx.iter().map(|&i| loaded.models[i].clone()).collect();
    let datasets: Vec<_> = idx
        .iter()
        .map(|&i| loaded.data.split(split)[i].clone())
        .collect();
    let embeddings = split_embeddings(&models, &datasets, &loaded.config)?;
    let extent = embeddings.values().map(|m| m.rows()).max().unwrap_or(0);
    let pairs = pair_matrices(&embeddings, loaded.config.beta, extent)?;
    for path in write_simmats(out, split, &pairs)? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn export_clusters(run: &Path, out: &Path) -> Result<()> {
    let trace = run.join("clusters.jsonl");
    let text = std::fs::read_to_string(&trace).map_err(|e| Error::Io {
        path: trace.clone(),
        source: e,
    })?;
    let mut membership = String::from("epoch,agent_id,group_id\n");
    let mut scores = String::from("epoch,agent_a,agent_b,score\n");
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let event = serde_json_line(line).map_err(|message| Error::Schema {
            path: trace.clone(),
            message,
        })?;
        for group in &event.groups {
            let label = osmotic::metrics::group_label(group);
            for a in group {
                membership.push_str(&format!("{},{},{}\n", event.epoch, a, label));
            }
        }
        for (i, a) in event.scores.agents.iter().enumerate() {
            for (j, b) in event.scores.agents.iter().enumerate() {
                scores.push_str(&format!(
                    "{},{},{},{}\n",
                    event.epoch, a, b, event.scores.values[i][j]
                ));
            }
        }
    }
    write_file(&out.join("cluster_membership.csv"), membership)?;
    write_file(&out.join("cluster_scores.csv"), scores)?;
    info!("wrote cluster tables to {}", out.display());
    Ok(())
}

fn serde_json_line(line: &str) -> std::result::Result<osmotic::diffuser::ClusterEvent, String> {
    serde_json::from_str(line).map_err(|e| format!("bad cluster record: {e}"))
}

fn write_file(path: &Path, text: String) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}
