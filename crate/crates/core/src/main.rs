use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use scene_reid::bmn::{BnrMode, EmbeddingKind, MgeLevels};
use scene_reid::evaluation::ablation::{ablation_report, AblationGrid};
use scene_reid::evaluation::{evaluate, Evaluation, GalleryIndex, Protocol};
use scene_reid::fmn::FmnMode;
use scene_reid::pipeline::checkpoint::{checkpoint_load, checkpoint_save};
use scene_reid::pipeline::config::{Config, ModelOverrides};
use scene_reid::pipeline::dataset_io::{load_dataset, save_dataset};
use scene_reid::pipeline::synth::synth_generate;
use scene_reid::pipeline::train::{train, TrainOptions};
use scene_reid::selftest::run_selftest;
use scene_reid::ReidError;

#[derive(Parser)]
#[command(name = "scene-reid", version, about = "Scene-adaptive person re-identification on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Standard,
    Sweep,
    CrossCamera,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete config file.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
    },
    /// Render the synthetic dataset to a directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seed; defaults to `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch metrics log (line-delimited JSON).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Evaluate on the test split after each epoch.
        #[arg(long)]
        eval_each_epoch: bool,
        #[arg(long)]
        embedding: Option<EmbeddingKind>,
        #[arg(long)]
        mge_levels: Option<MgeLevels>,
        #[arg(long)]
        bnr: Option<BnrMode>,
        #[arg(long)]
        fmn: Option<FmnMode>,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        protocol: ProtocolArg,
        /// Gallery size for the standard and cross-camera protocols.
        #[arg(long)]
        gallery_size: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        gallery_sizes: Option<Vec<usize>>,
        /// Write the full result as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and evaluate every variant of a grid file.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Generated dataset; rendered in memory from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Line-delimited JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant and gradient suite.
    Selftest,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Config { profile } => {
            let cfg = match profile {
                Profile::Desk => Config::desk(),
                Profile::Paper => Config::default(),
            };
            print!("{}", cfg.to_toml_string());
        }
        Command::Generate { config, seed, out } => {
            let cfg = Config::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let ds = synth_generate(&cfg.data, seed)?;
            save_dataset(&ds, &cfg.data, seed, &out)?;
            println!(
                "wrote {} train and {} test scenes to {}",
                ds.train.scenes.len(),
                ds.test.scenes.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            log,
            eval_each_epoch,
            embedding,
            mge_levels,
            bnr,
            fmn,
            margin,
        } => {
            let base = Config::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let overrides = ModelOverrides {
                embedding,
                mge_levels,
                bnr,
                fmn,
                margin,
            };
            let cfg = overrides.apply(&base)?;
            let (ds, data_cfg, _) = load_dataset(&data)?;
            if (data_cfg.width, data_cfg.height) != (cfg.data.width, cfg.data.height) {
                bail!(ReidError::Config(format!(
                    "dataset scenes are {}x{} but the config expects {}x{}",
                    data_cfg.width, data_cfg.height, cfg.data.width, cfg.data.height
                )));
            }
            let mut log_file = log.map(fs::File::create).transpose()?;
            let opts = TrainOptions {
                eval_split: eval_each_epoch.then_some(&ds.test),
                log: log_file.as_mut().map(|f| f as &mut dyn Write),
            };
            let (trainer, history) = train(&cfg, &ds, seed.unwrap_or(cfg.train.seed), opts)?;
            for m in &history {
                println!(
                    "epoch {:>3}  loss {:.4}  bnr {:.4}  oim {:.4}  triplet {:.4}  lr {:.2e}",
                    m.epoch, m.loss, m.bnr, m.oim, m.triplet, m.lr
                );
            }
            checkpoint_save(&trainer, &out)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval {
            ckpt,
            data,
            protocol,
            gallery_size,
            gallery_sizes,
            json,
        } => {
            let trainer = checkpoint_load(&ckpt, None)?;
            let cfg = &trainer.model.config;
            let (ds, _, _) = load_dataset(&data)?;
            let index = GalleryIndex::from_split(&trainer.model, &ds.test)?;
            let size = gallery_size.unwrap_or(cfg.eval.gallery_size);
            let p = match protocol {
                ProtocolArg::Standard => Protocol::Standard { gallery_size: size },
                ProtocolArg::CrossCamera => Protocol::CrossCamera { gallery_size: size },
                ProtocolArg::Sweep => Protocol::Sweep {
                    sizes: gallery_sizes.unwrap_or_else(|| cfg.eval.gallery_sizes.clone()),
                },
            };
            let result = evaluate(&p, &index, cfg.eval.seed)?;
            match &result {
                Evaluation::Single(r) => {
                    println!("queries {}  mAP {:.4}  top-1 {:.4}", r.queries.len(), r.map, r.top1);
                    if r.zero_relevant > 0 {
                        eprintln!("warning: {} queries had no relevant gallery entry (scored AP 0)", r.zero_relevant);
                    }
                }
                Evaluation::Sweep(points) => {
                    println!("{:>8} {:>8} {:>8}", "gallery", "mAP", "top-1");
                    for pt in points {
                        println!("{:>8} {:>8.4} {:>8.4}", pt.size, pt.result.map, pt.result.top1);
                    }
                }
            }
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string(&result)?)?;
            }
        }
        Command::Ablate {
            config,
            grid,
            data,
            data_seed,
            out,
        } => {
            let cfg = Config::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let grid = AblationGrid::from_toml_str(&fs::read_to_string(&grid)?)?;
            let ds = match data {
                Some(dir) => load_dataset(&dir)?.0,
                None => synth_generate(&cfg.data, data_seed)?,
            };
            let report = ablation_report(&cfg, &grid.runs, &ds, &grid.seeds, |r| {
                eprintln!("{:<24} seed {:>3}  mAP {:.4}  top-1 {:.4}", r.name, r.seed, r.map, r.top1);
            })?;
            print!("{}", report.table());
            if let Some(path) = out {
                fs::write(&path, report.jsonl())?;
            }
        }
        Command::Selftest => {
            let checks = run_selftest()?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!(ReidError::Numerical(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<ReidError>().is_some_and(ReidError::is_numerical));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
