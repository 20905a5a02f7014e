//! `sadkit` command line: dataset generation, training, inference,
//! evaluation, attention export and the distillation path ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use sadkit::config::RunConfig;
use sadkit::losses::Path as DistillPath;
use sadkit::pipeline::{self, Source};
use sadkit::train::{EpisodeRecord, Mode};

#[derive(Parser)]
#[command(name = "sadkit", version, about = "Lane detection with self attention distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (JSON); defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.learning_rate=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Sad,
    DeepSupervision,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Sad => Mode::Sad,
            ModeArg::DeepSupervision => Mode::DeepSupervision,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize `train/` and `val/` datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (`data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes `metrics.ndjson`, `best/` and `final/`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Training seed (`train.seed`): initialization, batch order, augmentation.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        activation_episode: Option<usize>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write probability maps and lane polylines for a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the labels as the probability maps.
        #[arg(long)]
        oracle: bool,
    },
    /// Score predictions from `infer` and print the metric report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention maps of the four encoder blocks as PGM images.
    ExportAttention {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Number of samples to export.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Train one distillation run per path set and tabulate the results.
    AblatePaths {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Path sets such as `23,34;24,34;12` (default: those three).
        #[arg(long)]
        paths: Option<String>,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: Option<&'a Path>,
    out: &'a Path,
    seed: Option<u64>,
    resolved: serde_json::Value,
}

fn write_manifest(sub: &str, common: &Common, out: &Path, seed: Option<u64>, resolved: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let m = RunManifest {
        subcommand: sub,
        config: common.config.as_deref(),
        out,
        seed,
        resolved,
    };
    let p = out.join("run.json");
    fs::write(&p, serde_json::to_vec_pretty(&m)?).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut all = common.overrides.clone();
    all.extend_from_slice(extra);
    Ok(RunConfig::load(common.config.as_deref(), &all)?)
}

/// `23,34;12` -> `[[(2,3),(3,4)],[(1,2)]]`.
fn parse_path_sets(s: &str) -> Result<Vec<Vec<DistillPath>>> {
    s.split(';')
        .map(|set| {
            set.split(',')
                .map(|p| {
                    let p = p.trim().trim_start_matches(['P', 'p']);
                    let d: Vec<usize> = p.chars().map(|c| c.to_digit(10).map(|v| v as usize)).collect::<Option<_>>().unwrap_or_default();
                    match d[..] {
                        [i, j] => Ok((i, j)),
                        _ => bail!("bad path `{p}`; expected two block digits such as 23"),
                    }
                })
                .collect()
        })
        .collect()
}

fn report_progress(label: &str, r: &EpisodeRecord) {
    if let Some(f1) = r.val_f1 {
        eprintln!("{label}episode {:>6}  loss {:.5}  val_f1 {:.4}", r.episode + 1, r.total, f1);
    } else if (r.episode + 1).is_multiple_of(50) {
        eprintln!("{label}episode {:>6}  loss {:.5}", r.episode + 1, r.total);
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::GenData { common, out, seed } => {
            let extra: Vec<String> = seed.map(|s| format!("data.seed={s}")).into_iter().collect();
            let cfg = load_config(&common, &extra)?;
            let (n_train, n_val) = pipeline::gen_data(&cfg.data, &out)?;
            write_manifest("gen-data", &common, &out, seed, serde_json::to_value(&cfg)?)?;
            Ok(json!({ "train": n_train, "val": n_val, "out": out }))
        }
        Command::Train {
            common,
            out,
            seed,
            mode,
            activation_episode,
            resume,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            if let Some(m) = mode {
                extra.push(format!("train.mode={}", serde_json::to_string(&Mode::from(m))?));
            }
            if let Some(a) = activation_episode {
                extra.push(format!("sad.activation_episode={a}"));
            }
            let cfg = load_config(&common, &extra)?;
            write_manifest("train", &common, &out, seed, serde_json::to_value(&cfg)?)?;
            let res = pipeline::run_training(&cfg, &out, resume.as_deref(), |r| report_progress("", r))?;
            let last = res.log.last();
            Ok(json!({
                "episodes": res.state.episode,
                "final_loss": last.map(|r| r.total),
                "best_episode": res.best.map(|b| b.0),
                "best_val_f1": res.best.map(|b| b.1),
                "out": out,
            }))
        }
        Command::Infer {
            common,
            out,
            data,
            checkpoint,
            oracle,
        } => {
            let cfg = load_config(&common, &[])?;
            let source = match (checkpoint, oracle) {
                (Some(c), false) => Source::Checkpoint(c),
                (None, true) => Source::Oracle,
                _ => bail!("pass exactly one of --checkpoint and --oracle"),
            };
            write_manifest("infer", &common, &out, None, serde_json::to_value(&cfg)?)?;
            let n = pipeline::infer(&source, &data, &out, &cfg.postprocess, cfg.eval.batch_size)?;
            Ok(json!({ "samples": n, "out": out }))
        }
        Command::Eval { common, pred, data, out } => {
            let cfg = load_config(&common, &[])?;
            let report = pipeline::eval_dir(&pred, &data, &cfg.eval)?;
            let v = serde_json::to_value(&report)?;
            if let Some(o) = &out {
                write_manifest("eval", &common, o, None, serde_json::to_value(&cfg)?)?;
                let p = o.join("report.json");
                fs::write(&p, serde_json::to_vec_pretty(&v)?).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(v)
        }
        Command::ExportAttention {
            out,
            data,
            checkpoint,
            count,
        } => {
            let files = pipeline::export_attention(&checkpoint, &data, count, &out)?;
            write_manifest(
                "export-attention",
                &Common::default(),
                &out,
                None,
                json!({ "checkpoints": checkpoint, "data": data, "count": count }),
            )?;
            Ok(json!({ "written": files.len(), "out": out }))
        }
        Command::AblatePaths {
            common,
            out,
            seed,
            paths,
        } => {
            let extra: Vec<String> = seed.map(|s| format!("train.seed={s}")).into_iter().collect();
            let cfg = load_config(&common, &extra)?;
            let sets = match paths {
                Some(s) => parse_path_sets(&s)?,
                None => pipeline::default_path_sets(),
            };
            write_manifest("ablate-paths", &common, &out, seed, serde_json::to_value(&cfg)?)?;
            let rows = pipeline::ablate_paths(&cfg, &sets, &out, |label, r| report_progress(&format!("[{label}] "), r))?;
            print!("{}", pipeline::render_table(&rows));
            Ok(json!({ "rows": rows, "out": out }))
        }
    }
}

fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<sadkit::Error>())
        .map_or("cli", |s| s.kind());
    json!({ "error": { "kind": kind, "message": format!("{e:#}") } })
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SADKIT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SADKIT_THREADS={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
