//! Command-line surface. The binary only forwards to [`main`].

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{substream, RunConfig};
use crate::data::load_dataset;
use crate::error::{Error, Result};
use crate::io::{export_sweep, Checkpoint, CheckpointKind, RunSummary};
use crate::retrain::{load_retrained, retrain_checkpoint, train_child};
use crate::search::{evaluate, SearchState, Searcher};
use crate::space::Genotype;
use crate::xnor::{bench, bench_csv, run_network, BenchShape, KernelOptions};

#[derive(Parser, Debug)]
#[command(name = "dcpnas", version, about = "Child-parent architecture search for 1-bit CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Profile {
    Desk,
    Full,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; the built-in profile when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.profile {
                Profile::Desk => RunConfig::desk(),
                Profile::Full => RunConfig::full(),
            },
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.epochs {
            c.search.epochs = e;
        }
        if let Some(l) = self.lambda {
            c.search.lambda = l;
        }
        if let Some(m) = self.mu {
            c.search.mu = m;
        }
        if let Some(e) = self.epsilon {
            c.search.backtrack.epsilon = e;
        }
        if let Some(o) = &self.out {
            c.out_dir = Some(o.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run (or resume) the architecture search.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Search checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print the genotype stored in a search checkpoint.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the genotype here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a derived genotype from scratch and score it on the test split.
    TrainChild {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Accuracy of a retrained network, optionally on the packed kernel.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        packed: bool,
    },
    /// Packed against float convolution timings, as CSV.
    BenchKernel {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect run summaries below a directory into a λ/μ sweep table.
    Export {
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        #[arg(long, default_value = "runs")]
        root: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitName {
    SearchVal,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExportFormat {
    Csv,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config_of(c: &Checkpoint) -> Result<RunConfig> {
    let cfg: RunConfig = c.json("config")?;
    c.expect_hash(cfg.hash())?;
    Ok(cfg)
}

/// Executes one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { cfg, resume } => {
            let cfg = cfg.resolve()?;
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
            }
            let splits = load_dataset(&cfg.data, cfg.seed)?;
            let searcher = Searcher::new(&cfg, &splits)?;
            let out = match resume {
                Some(p) => searcher.resume(&p)?,
                None => searcher.run()?,
            };
            println!(
                "config {} search-val accuracy {:.4}",
                cfg.hash(),
                out.child_val_acc
            );
            if cfg.out_dir.is_none() {
                print!("{}", out.genotype.to_json()?);
            }
            Ok(())
        }
        Command::Derive { checkpoint, out } => {
            let c = Checkpoint::load(&checkpoint)?;
            if c.kind != CheckpointKind::Search {
                return Err(Error::Data("derive needs a search checkpoint".into()));
            }
            let cfg = config_of(&c)?;
            let st = SearchState::from_checkpoint(&cfg, &c)?;
            emit(&st.genotype(&cfg)?.to_json()?, out.as_deref())
        }
        Command::TrainChild { cfg, genotype } => {
            let cfg = cfg.resolve()?;
            let gt = Genotype::from_json(&std::fs::read_to_string(&genotype)?)?;
            if gt.meta.config_hash != cfg.hash().hex() {
                return Err(Error::HashMismatch {
                    expected: cfg.hash().hex(),
                    found: gt.meta.config_hash.clone(),
                });
            }
            let splits = load_dataset(&cfg.data, cfg.seed)?;
            let trained = train_child(&cfg, &gt, &splits)?;
            let acc = evaluate(&trained.network, None, &splits.test, cfg.retrain.batch_size)?;
            println!("config {} test accuracy {acc:.4}", cfg.hash());
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                retrain_checkpoint(&cfg, &trained)?.save(&dir.join("retrain.ckpt"))?;
                let path = dir.join("summary.json");
                if let Ok(text) = std::fs::read_to_string(&path) {
                    let mut s: RunSummary = serde_json::from_str(&text)?;
                    s.retrain_test_acc = Some(acc);
                    std::fs::write(&path, serde_json::to_string_pretty(&s)? + "\n")?;
                }
            }
            Ok(())
        }
        Command::Eval { checkpoint, split, packed } => {
            let c = Checkpoint::load(&checkpoint)?;
            let cfg = config_of(&c)?;
            let net = load_retrained(&cfg, &c)?;
            let splits = load_dataset(&cfg.data, cfg.seed)?;
            let ds = match split {
                SplitName::SearchVal => &splits.search_val,
                SplitName::Test => &splits.test,
            };
            let acc = if packed {
                let run = run_network(&net, &ds.images, 1, KernelOptions::default())?;
                println!(
                    "packed: {:.0} ns/image, {} bits stored ({:.1}x smaller), {:.3e} OPs/image",
                    run.timing.median_ns, run.memory.packed_bits, run.memory.saving, run.memory.ops
                );
                crate::supernet::accuracy(&run.logits, &ds.labels)
            } else {
                evaluate(&net, None, ds, cfg.retrain.batch_size)?
            };
            println!("accuracy {acc:.4}");
            Ok(())
        }
        Command::BenchKernel { repeats, threads, out } => {
            let opts = KernelOptions {
                threads,
                ..KernelOptions::default()
            };
            let rows = bench(&BenchShape::standard(), repeats, opts, &mut substream(0, "bench"))?;
            emit(&bench_csv(&rows)?, out.as_deref())
        }
        Command::Export { format: ExportFormat::Csv, root, out } => emit(&export_sweep(&root)?, out.as_deref()),
    }
}

/// Parses the process arguments, runs, and returns the exit code: 0 on
/// success, 2 for usage errors, 3 for a configuration-hash mismatch, 1
/// otherwise.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
