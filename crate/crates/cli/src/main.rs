use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attrunlearn::attacks::{attack_store, idlg_store};
use attrunlearn::experiment::config::{ExperimentConfig, OUT_DIR_ENV};
use attrunlearn::experiment::run::{
    dlg_config, evaluate, load_dataset, merge_reports, run_experiment, run_repeats, sweep_lambda, train, write_csv,
    write_sweep_csv, CsvRow, MetricReport, RunCheckpoint, RunPaths, TrainedRun,
};
use attrunlearn::fedsim::GradientStore;

#[derive(Parser)]
#[command(name = "attrunlearn", version, about = "Attribute unlearning in federated recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set adversary.lambda=1.0`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides).context("loading config")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and preprocess the configured dataset and save it as JSON.
    Prep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Federated training; writes a checkpoint and the gradient store.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Replay a gradient store with DLG and the iDLG sign rule.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        gradients: PathBuf,
        /// Where to write the DLG report as JSON.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Ranking and attribute-inference metrics from a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline (data, training, attacks, metrics) for `run.repeats` seeds.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// λ grid or SUT ablation.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated DSVAE λ values.
        #[arg(long, value_delimiter = ',', conflicts_with = "ablation")]
        lambdas: Vec<f64>,
        /// Original vs binary SUT vs always-on adversary.
        #[arg(long)]
        ablation: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Merge metrics CSV files, keeping the first row per run id.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn print_report(r: &MetricReport) {
    println!(
        "{} seed={} head={} sut={} hr@10={:.4} ndcg@10={:.4} f1={:.4} bacc={:.4} grad_attack_acc={} skip_rate={:.3}",
        r.run_id,
        r.seed,
        r.head,
        r.sut_mode,
        r.hr[1],
        r.ndcg[1],
        r.f1,
        r.bacc,
        r.grad_attack_acc.map_or("-".into(), |a| format!("{a:.4}")),
        r.skip_rate_mean()
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let start = Instant::now();
    match cli.command {
        Command::Prep { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.run.out_dir.join("dataset.json"));
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            ds.save_json(&out)?;
            let [male, female] = ds.gender_counts();
            println!(
                "{} users ({male}/{female} by gender), {} items, {} interactions -> {}",
                ds.n_users(),
                ds.n_items(),
                ds.interactions.len(),
                out.display()
            );
        }
        Command::Train { cfg } => {
            let cfg = cfg.load()?;
            let run = train(&cfg)?;
            let paths = RunPaths::for_config(&cfg);
            std::fs::create_dir_all(&paths.dir)?;
            run.checkpoint().save(&paths.checkpoint)?;
            if !run.store.is_empty() {
                run.store.write_jsonl(&paths.gradients)?;
            }
            if let Some(last) = run.logs.last() {
                println!(
                    "round {}: rec loss {:.4}, adv loss {}, skip rate {:.3}",
                    last.round,
                    last.mean_rec_loss,
                    last.mean_adv_loss.map_or("-".into(), |l| format!("{l:.4}")),
                    last.skip_rate
                );
            }
            println!("checkpoint -> {}", paths.checkpoint.display());
            if !run.store.is_empty() {
                println!("{} gradient records -> {}", run.store.len(), paths.gradients.display());
            }
        }
        Command::Attack { cfg, gradients, out } => {
            let cfg = cfg.load()?;
            let store = GradientStore::read_jsonl(&gradients)?;
            if store.is_empty() {
                bail!("{} contains no gradient records", gradients.display());
            }
            let idlg = idlg_store(&store)?;
            let (dlg, _) = attack_store(&store, &dlg_config(&cfg))?;
            println!("records: {}", dlg.trials);
            println!("idlg recovery: {:.4}", idlg.recovery_rate);
            println!("dlg recovery:  {:.4}", dlg.recovery_rate);
            if let Some(out) = out {
                dlg.write_json(&out)?;
            }
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = cfg.load()?;
            let data = load_dataset(&cfg)?.index(cfg.dataset.attribute);
            let run = TrainedRun::from_checkpoint(data, RunCheckpoint::load(&checkpoint)?)?;
            let (report, _) = evaluate(&cfg, &run)?;
            print_report(&report);
            if let Some(out) = out {
                write_csv(&[CsvRow::from(&report)], &out)?;
            }
        }
        Command::Run { cfg } => {
            let cfg = cfg.load()?;
            for r in run_repeats(&cfg)? {
                print_report(&r);
            }
            println!("artifacts under {} (override with {OUT_DIR_ENV})", cfg.run.out_dir.display());
        }
        Command::Sweep { cfg, lambdas, ablation, out } => {
            let cfg = cfg.load()?;
            if ablation {
                let mut rows = Vec::new();
                for overrides in [&["adversary.enabled=false"][..], &[], &["sut.mode=\"always\""]] {
                    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
                    let r = run_experiment(&cfg.with_overrides(&overrides)?)?;
                    print_report(&r);
                    rows.push(CsvRow::from(&r));
                }
                write_csv(&rows, &out)?;
            } else {
                if lambdas.is_empty() {
                    bail!("pass --lambdas or --ablation");
                }
                let rows = sweep_lambda(&cfg, &lambdas)?;
                for r in &rows {
                    println!(
                        "lambda={} ndcg@10={:.4} bacc={:.4} grad_attack_acc={}",
                        r.lambda,
                        r.ndcg10,
                        r.bacc,
                        r.grad_attack_acc.map_or("-".into(), |a| format!("{a:.4}"))
                    );
                }
                write_sweep_csv(&rows, &out)?;
            }
            println!("-> {}", out.display());
        }
        Command::Report { inputs, out } => {
            if inputs.is_empty() {
                bail!("no input CSV files");
            }
            let rows = merge_reports(&inputs)?;
            write_csv(&rows, &out)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
    }
    eprintln!("elapsed: {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}
