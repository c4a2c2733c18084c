use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ainfonce::analysis::{
    alpha_sweep, distance_histogram, embed, gradient_suites, histogram_csv, load_datasets, metrics_header, metrics_row,
    mode_name, sweep_csv,
};
use ainfonce::checkpoint::Checkpoint;
use ainfonce::config::{FinetuneMode, RunConfig};
use ainfonce::data::{gen_blobs, Split};
use ainfonce::train::{evaluate, finetune, pretrain};
use ainfonce::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ainfonce", version, about = "Adversarial contrastive learning with asymmetric InfoNCE")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Contrastive pretraining; writes an encoder checkpoint and a metrics CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to <out>.metrics.csv.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Trains a classifier on top of a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// lp, alf or aff; overrides the config.
        #[arg(long)]
        mode: Option<FinetuneMode>,
    },
    /// Standard and robust accuracy of a classifier checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON report path; the summary always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-alpha pretrain + linear probe + eval for each alpha.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,1")]
        alphas: Vec<f64>,
        /// Pretraining epochs per alpha.
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of negative-pair distances of test-split embeddings.
    DistHist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every objective.
    Gradcheck,
    /// Writes the blobs train/test splits as CSV into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> ainfonce::Result<(RunConfig, Option<PathBuf>)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let base = common
        .config
        .as_ref()
        .and_then(|p| p.parent())
        .map(Path::to_path_buf);
    Ok((cfg, base))
}

fn default_metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

fn run(cmd: Cmd) -> ainfonce::Result<()> {
    match cmd {
        Cmd::Pretrain { common, out, metrics } => {
            let (cfg, base) = load_config(&common)?;
            let (train, _) = load_datasets(&cfg, base.as_deref())?;
            let metrics = metrics.unwrap_or_else(|| default_metrics_path(&out));
            let mut log_file = File::create(&metrics)?;
            log_file.write_all(metrics_header(&cfg).as_bytes())?;
            log_file.flush()?;
            let result = pretrain(&cfg, &train, |row, _| {
                log_file.write_all(metrics_row(row).as_bytes())?;
                log_file.flush()?;
                Ok(())
            });
            match result {
                Ok(r) => {
                    Checkpoint::from_encoder(&r.encoder).save(&out)?;
                    println!("wrote {} and {}", out.display(), metrics.display());
                    Ok(())
                }
                Err(Error::Diverged {
                    epoch,
                    batch,
                    msg,
                    last_good,
                }) => {
                    Checkpoint::from_encoder(&last_good).save(&out)?;
                    eprintln!("last good parameters written to {}", out.display());
                    Err(Error::Diverged {
                        epoch,
                        batch,
                        msg,
                        last_good,
                    })
                }
                Err(e) => Err(e),
            }
        }
        Cmd::Finetune {
            common,
            checkpoint,
            out,
            mode,
        } => {
            let (mut cfg, base) = load_config(&common)?;
            if let Some(m) = mode {
                cfg.finetune.mode = m;
            }
            let (train, _) = load_datasets(&cfg, base.as_deref())?;
            let encoder = Checkpoint::load(&checkpoint)?.to_encoder()?;
            let model = finetune(&encoder, &train, &cfg.finetune, &cfg.eval.attack, cfg.seed)?;
            Checkpoint::from_classifier(&model).save(&out)?;
            println!("{} finetune done, wrote {}", mode_name(cfg.finetune.mode), out.display());
            Ok(())
        }
        Cmd::Eval { common, checkpoint, out } => {
            let (cfg, base) = load_config(&common)?;
            let (_, test) = load_datasets(&cfg, base.as_deref())?;
            let model = Checkpoint::load(&checkpoint)?.to_classifier()?;
            let report = evaluate(&model, &test, &cfg.eval.attack, cfg.seed)?;
            println!("SA {:.4} RA {:.4} (n = {})", report.sa, report.ra, report.n);
            if let Some(p) = out {
                let mut v = serde_json::to_value(&report)?;
                v["config_sha256"] = cfg.hash().into();
                std::fs::write(p, serde_json::to_string_pretty(&v)? + "\n")?;
            }
            Ok(())
        }
        Cmd::SweepAlpha {
            common,
            alphas,
            epochs,
            out,
        } => {
            let (mut cfg, base) = load_config(&common)?;
            cfg.pretrain.optim.epochs = epochs;
            cfg.anneal.enabled = false;
            cfg.validate()?;
            let (train, test) = load_datasets(&cfg, base.as_deref())?;
            let rows = alpha_sweep(&cfg, &alphas, &train, &test)?;
            std::fs::write(&out, sweep_csv(&cfg, &rows))?;
            for r in &rows {
                println!("alpha {:.3}: SA {:.4} RA {:.4} collapse {:.4}", r.alpha, r.sa, r.ra, r.collapse);
            }
            Ok(())
        }
        Cmd::DistHist {
            common,
            checkpoint,
            bins,
            out,
        } => {
            let (cfg, base) = load_config(&common)?;
            let (_, test) = load_datasets(&cfg, base.as_deref())?;
            let encoder = Checkpoint::load(&checkpoint)?.to_encoder()?;
            let h = distance_histogram(&embed(&encoder, &test)?, bins)?;
            std::fs::write(&out, histogram_csv(&cfg, &h))?;
            println!("mean negative-pair distance {:.6} over {} pairs", h.mean, h.pairs);
            Ok(())
        }
        Cmd::Gradcheck => {
            let suites = gradient_suites()?;
            let mut failed = 0;
            for s in &suites {
                let status = if s.passed() { "ok" } else { "FAIL" };
                println!("{:<16} {:>4}  max rel err {:.3e} (< {:e}, {} cases)", s.name, status, s.max_rel_err, s.threshold, s.cases);
                failed += usize::from(!s.passed());
            }
            if failed > 0 {
                return Err(Error::Domain {
                    op: "gradcheck",
                    msg: format!("{failed} suites above threshold"),
                });
            }
            Ok(())
        }
        Cmd::GenData { common, out } => {
            let (cfg, _) = load_config(&common)?;
            std::fs::create_dir_all(&out)?;
            for split in [Split::Train, Split::Test] {
                let d = gen_blobs(&cfg.data.blobs, cfg.seed, split)?;
                let name = match split {
                    Split::Train => "train.csv",
                    Split::Test => "test.csv",
                };
                d.save_csv(&out.join(name))?;
                println!("wrote {} ({} rows)", out.join(name).display(), d.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
