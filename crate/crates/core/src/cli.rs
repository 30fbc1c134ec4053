//! The `mese` command line.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for bad arguments,
//! configs or input files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, load_corpus, save_corpus, SyntheticSpec};
use crate::dataset_tools::{load_rerank_file, select_all};
use crate::encoder::{load_checkpoint, write_checkpoint, EncoderConfig, ModalityMask};
use crate::error::{Error, Result};
use crate::evaluation::{ablate_modality, evaluate, AblationMode, MetricReport};
use crate::expansion::{expand_queries, read_expansions, write_expansions, ExpansionConfig, Representations};
use crate::trainer::{train_full, TrainConfig};

/// Every tunable of a run. Missing keys take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus generation, initialisation and training. Overridden by
    /// `--seed`; one of the two is required by `generate` and `train`.
    pub rng_seed: Option<u64>,
    pub synthetic: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub expansion: ExpansionConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<RunConfig, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the run seed into every seeded section.
    fn seeded(mut self) -> Result<RunConfig> {
        let seed = self
            .rng_seed
            .ok_or_else(|| Error::Config("a seed is required: pass --seed or set rng_seed in the config".into()))?;
        self.synthetic.rng_seed = seed;
        self.encoder.rng_seed = seed;
        self.train.rng_seed = seed;
        Ok(self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mese", version, about = "Multi-modal entity set expansion")]
struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides rng_seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective config (defaults merged with --config) and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus; writes one checkpoint per round and a JSONL log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand queries with a checkpoint; writes JSONL.
    Expand {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated query indices; all queries when absent.
        #[arg(long, value_delimiter = ',')]
        queries: Option<Vec<usize>>,
        /// Leave-one-out re-ranking.
        #[arg(long)]
        ensemble: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an expansion file against the corpus queries.
    Evaluate {
        #[arg(long)]
        expansions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run evaluation with modalities removed from seeds or candidates.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of baseline,T_s,T_c,V_s,V_c,T,V.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the best image of every candidate group in a rerank file.
    RerankImages {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.rng_seed = cli.seed;
    }
    if cli.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidArgument("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Generate { out } => cmd_generate(&config, &out),
        Command::Train { corpus, out } => cmd_train(&config, &corpus, &out),
        Command::Expand {
            checkpoint,
            corpus,
            queries,
            ensemble,
            out,
        } => {
            let mut expansion = config.expansion;
            expansion.ensemble |= ensemble;
            cmd_expand(&checkpoint, &corpus, queries.as_deref(), &expansion, &out)
        }
        Command::Evaluate { expansions, corpus, out } => cmd_evaluate(&expansions, &corpus, &out),
        Command::Ablate {
            checkpoint,
            corpus,
            modes,
            out,
        } => {
            let modes = match modes {
                Some(m) => m.iter().map(|s| s.parse()).collect::<Result<Vec<AblationMode>>>()?,
                None => AblationMode::ALL.to_vec(),
            };
            cmd_ablate(&checkpoint, &corpus, &modes, &config.expansion, &out)
        }
        Command::RerankImages { features, alpha, out } => cmd_rerank_images(&features, alpha, &out),
    }
}

fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_name(round: usize) -> String {
    format!("round_{round}.ckpt")
}

pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<()> {
    let config = config.clone().seeded()?;
    let corpus = generate_synthetic(&config.synthetic)?;
    save_corpus(&corpus, out)?;
    println!(
        "wrote {} entities, {} contexts, {} queries to {}",
        corpus.entity_count(),
        corpus.contexts().len(),
        corpus.queries().len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<()> {
    let config = config.clone().seeded()?;
    require_input(corpus_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let encoder = config.encoder.clone().fitted_to(&corpus);
    let train = TrainConfig {
        expansion: config.expansion,
        ..config.train.clone()
    };
    let outcome = train_full(&corpus, encoder, &train)?;
    create_dir(out)?;
    for s in &outcome.snapshots {
        write_file(&out.join(checkpoint_name(s.round)), &write_checkpoint(&s.model)?)?;
    }
    let mut log = Vec::new();
    for r in &outcome.log {
        serde_json::to_writer(&mut log, r)?;
        log.push(b'\n');
    }
    write_file(&out.join(TRAIN_LOG), &log)?;
    write_file(&out.join("config.toml"), config.to_toml()?.as_bytes())?;
    println!(
        "trained {} steps, wrote {} checkpoints to {}",
        outcome.log.len(),
        outcome.snapshots.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_expand(
    checkpoint: &Path,
    corpus_dir: &Path,
    queries: Option<&[usize]>,
    expansion: &ExpansionConfig,
    out: &Path,
) -> Result<()> {
    require_input(checkpoint)?;
    require_input(corpus_dir)?;
    expansion.validate()?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    let all = corpus.queries();
    let selected = match queries {
        None => all.to_vec(),
        Some(ix) => ix
            .iter()
            .map(|&i| {
                all.get(i).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("query index {i} out of range ({} queries)", all.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let reps = Representations::from_model(&model, &corpus, ModalityMask::NONE, ModalityMask::NONE)?;
    let expansions = expand_queries(&selected, &reps, expansion)?;
    write_file(out, write_expansions(&expansions)?.as_bytes())?;
    println!("wrote {} expansions to {}", expansions.len(), out.display());
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
    write_file(&dir.join(format!("{stem}.json")), report.summary_json()?.as_bytes())
}

pub fn cmd_evaluate(expansions: &Path, corpus_dir: &Path, out: &Path) -> Result<()> {
    require_input(expansions)?;
    require_input(corpus_dir)?;
    let text = fs::read_to_string(expansions).map_err(|e| Error::io(expansions, e))?;
    let expansions = read_expansions(&text, expansions)?;
    let corpus = load_corpus(corpus_dir)?;
    let report = evaluate(&expansions, corpus.queries())?;
    create_dir(out)?;
    write_report(out, "metrics", &report)?;
    print!("{}", report.summary_json()?);
    Ok(())
}

pub fn cmd_ablate(
    checkpoint: &Path,
    corpus_dir: &Path,
    modes: &[AblationMode],
    expansion: &ExpansionConfig,
    out: &Path,
) -> Result<()> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no ablation modes given".into()));
    }
    require_input(checkpoint)?;
    require_input(corpus_dir)?;
    expansion.validate()?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    create_dir(out)?;
    let mut table = String::from("mode,MAP@10,MAP@20,MAP@50,MAP@100,P@10,P@20,P@50,P@100,Avg\n");
    for &mode in modes {
        let report = ablate_modality(&model, &corpus, mode, expansion)?;
        write_report(out, &format!("ablation_{}", mode.label()), &report)?;
        table.push_str(mode.label());
        for v in report.map.iter().chain(&report.precision).chain([&report.avg]) {
            table.push_str(&format!(",{v:.6}"));
        }
        table.push('\n');
    }
    write_file(&out.join("ablation.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn cmd_rerank_images(features: &Path, alpha: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    require_input(features)?;
    let groups = load_rerank_file(features)?;
    let selections = select_all(&groups, alpha)?;
    let mut buf = Vec::new();
    for s in &selections {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    write_file(out, &buf)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "wrote {} selections to {}", selections.len(), out.display());
    Ok(())
}
