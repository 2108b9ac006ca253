use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use m4sc_core::semantic::{gen_dataset, gen_mixed, TaskKind};
use m4sc_core::sharing::SlotKind;
use m4sc_core::training::M4scSystem;
use m4sc_sim::config::ExperimentConfig;
use m4sc_sim::sweep::{self, SweepParam};
use m4sc_sim::train::{self, Corpora};
use m4sc_sim::{emit_metrics, io};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "m4sc", version, about = "Multi-user semantic communication simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one phase (pretrain, align, finetune, joint) or all of them.
    Train {
        #[arg(long, default_value = "all")]
        phase: String,
        /// JSON-lines corpus replacing the generated training corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// One sharing run at the configured users, overlap and channel.
    Simulate {
        #[command(flatten)]
        model: ModelSource,
        /// Where to write the frame (default: <output_dir>/frame.bin).
        #[arg(long)]
        frame_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep users, snr, overlap or tau and write metrics files.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[command(flatten)]
        model: ModelSource,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a frame file and print its layout.
    InspectFrame { file: PathBuf },
    /// Write a generated corpus as JSON lines.
    GenCorpus {
        /// caption, vqa, textclass or mixed
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct ModelSource {
    /// Checkpoint to load (default: newest under <output_dir>/checkpoints).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use a freshly initialised system instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    untrained: bool,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set train.joint.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (also settable through M4SC_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    /// none, awgn or rayleigh
    #[arg(long)]
    channel: Option<String>,
    /// Cosine threshold of the comparator.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    channel_dim: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut sets = self.sets.clone();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push(
            "output_dir",
            self.out
                .as_ref()
                .map(|p| toml::Value::String(p.display().to_string()).to_string()),
        );
        push("users", self.users.map(|v| v.to_string()));
        push("overlap", self.overlap.map(float));
        push("tokens", self.tokens.map(|v| v.to_string()));
        push("channel.snr_db", self.snr.map(float));
        push("channel.family", self.channel.clone().map(|c| format!("{c:?}")));
        push("comparator.cosine_threshold", self.tau.map(float));
        push("system.dim", self.dim.map(|v| v.to_string()));
        push("system.channel_dim", self.channel_dim.map(|v| v.to_string()));
        ExperimentConfig::load(self.config.as_deref(), &sets)
    }
}

/// TOML float literal.
fn float(v: f64) -> String {
    toml::Value::Float(v).to_string()
}

fn load_system(cfg: &ExperimentConfig, src: &ModelSource) -> Result<M4scSystem> {
    if src.untrained {
        return Ok(M4scSystem::new(cfg.system.clone())?);
    }
    let path = match &src.checkpoint {
        Some(p) => p.clone(),
        None => match train::latest_checkpoint(cfg) {
            Some((_, p)) => p,
            None => bail!(
                "no checkpoint under {}; run `m4sc train` first or pass --untrained",
                cfg.checkpoint_dir().display()
            ),
        },
    };
    let sys = io::load_checkpoint(&path)?;
    if sys.config != cfg.system {
        bail!("checkpoint {} does not match the configured system settings", path.display());
    }
    Ok(sys)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { phase, corpus, common } => {
            let cfg = common.load()?;
            let phases = train::phases_for(&phase)?;
            let mut corpora = Corpora::generate(&cfg.data);
            if let Some(path) = corpus {
                corpora.mixed = io::read_corpus(&path)?;
                corpora.captions = corpora
                    .mixed
                    .iter()
                    .filter(|s| s.task() == Some(TaskKind::Caption))
                    .cloned()
                    .collect();
            }
            train::run(&cfg, &phases, &corpora, |r| {
                let loss = r
                    .smoothed_start_end(50)
                    .map_or("-".into(), |(a, b)| format!("{a:.4} -> {b:.4}"));
                let acc: Vec<String> = r.accuracy.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                // progress only: a closed stdout must not stop training
                let _ = writeln!(
                    std::io::stdout(),
                    "{}: {} steps, loss {loss}, accuracy [{}]{}, {:.1}s",
                    r.phase,
                    r.steps,
                    acc.join(", "),
                    if r.cold_start { " (cold start)" } else { "" },
                    r.wall_clock_secs
                );
            })?;
            say!("checkpoints in {}", cfg.checkpoint_dir().display());
        }
        Command::Simulate {
            model,
            frame_out,
            common,
        } => {
            let cfg = common.load()?;
            let sys = load_system(&cfg, &model)?;
            let (row, out) = sweep::simulate(&sys, &cfg)?;
            let path = frame_out.unwrap_or_else(|| cfg.output_dir.join("frame.bin"));
            io::save_frame(&path, &out.frame)?;
            say!("{}", serde_json::to_string(&row)?);
            say!("frame written to {}", path.display());
        }
        Command::Sweep { param, model, common } => {
            let cfg = common.load()?;
            let sys = load_system(&cfg, &model)?;
            let rows = match param {
                SweepParam::Users => sweep::run_users_sweep(&sys, &cfg, &cfg.sweep.users)?,
                SweepParam::Overlap => sweep::run_overlap_sweep(&sys, &cfg, &cfg.sweep.overlaps)?,
                SweepParam::Tau => sweep::run_tau_sweep(&sys, &cfg, &cfg.sweep.taus)?,
                SweepParam::Snr => {
                    let eval = Corpora::generate(&cfg.data).eval_mixed;
                    sweep::run_snr_sweep(&sys, &cfg, &eval, &cfg.sweep.snrs)?
                }
            };
            let files = emit_metrics(&cfg.output_dir.join("sweeps"), &format!("sweep_{param}"), &rows, &cfg)?;
            print_summary(param, &rows)?;
            for f in files {
                say!("wrote {}", f.display());
            }
        }
        Command::InspectFrame { file } => inspect(&file)?,
        Command::GenCorpus { task, n, seed, output } => {
            let corpus = if task == "mixed" {
                gen_mixed(n, seed)
            } else {
                gen_dataset(task.parse()?, n, seed)
            };
            io::write_corpus(&output, &corpus)?;
            say!("wrote {} samples to {}", corpus.len(), output.display());
        }
    }
    Ok(())
}

fn print_summary(param: SweepParam, rows: &[m4sc_sim::MetricsRow]) -> Result<()> {
    let key = |r: &m4sc_sim::MetricsRow| match param {
        SweepParam::Users => format!("U={}", r.users),
        SweepParam::Overlap => format!("p={}", r.overlap),
        SweepParam::Tau => r.run_id.split('-').nth(1).unwrap_or("").to_string(),
        SweepParam::Snr => match r.snr_db {
            Some(s) => format!("{} {s} dB", r.channel),
            None => r.channel.clone(),
        },
    };
    let savings = sweep::mean_by(rows, key, |r| r.savings_ratio);
    let acc = sweep::mean_by(rows, key, |r| r.accuracy);
    let mse = sweep::mean_by(rows, key, |r| r.semantic_mse);
    for (((k, s), (_, a)), (_, m)) in savings.iter().zip(&acc).zip(&mse) {
        say!("{k:>16}  savings {s:.4}  accuracy {a:.4}  semantic_mse {m:.5}");
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let frame = io::load_frame(path)?;
    say!(
        "version {} | {} users | D_ch {} | {} public groups | public scale {}",
        frame.version,
        frame.users.len(),
        frame.channel_dim,
        frame.group_count(),
        frame.public_scale
    );
    say!(
        "payload {} symbols | side info {} bytes | total {} bytes",
        frame.payload_symbols(),
        frame.side_info_bytes(),
        frame.byte_len()
    );
    for (u, b) in frame.users.iter().enumerate() {
        let public = b.index.iter().filter(|e| e.kind == SlotKind::Public).count();
        say!(
            "user {u}: {} tokens ({public} public, {} private) | scale {}",
            b.token_count,
            b.token_count as usize - public,
            b.scale
        );
    }
    Ok(())
}

/// Output piped into something like `head` that stopped reading.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: the context chain joined with ": "
            let parts: Vec<String> = e.chain().map(|c| c.to_string().replace('\n', " ")).collect();
            eprintln!("error: {}", parts.join(": "));
            ExitCode::FAILURE
        }
    }
}
