use clap::{Parser, Subcommand};
use deweather::config::{load_data_config, load_train_config, ConfigFile, DataConfig};
use deweather::data_synth::{generate_dataset, load_dataset, SceneSpec};
use deweather::error::{Error, Result};
use deweather::eval::{
    ablate, evaluate, summarize, write_metrics_csv, write_summary_csv, Against, SweepKind,
};
use deweather::plot::plot;
use deweather::training::{train_constructor, train_dew, Stage, Supervision};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "deweather",
    about = "Pseudo-label guided image de-weathering on synthetic time-multiplexed scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of degraded frame stacks with
    /// misaligned clean labels and an aligned oracle.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base RNG seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the pseudo-label constructor (stage clc or csaclc).
    TrainClc {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Constructor flavor: clc or csaclc (overrides the config file).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Train the de-weathering model under the configured supervision.
    TrainDew {
        #[arg(long)]
        data: PathBuf,
        /// Constructor checkpoint (not needed for --supervision original).
        #[arg(long)]
        constructor: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// original | pseudo | joint (overrides the config file).
        #[arg(long)]
        supervision: Option<String>,
    },
    /// Evaluate a checkpoint over a dataset; writes metrics.csv and
    /// summary.csv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// oracle (default) or misaligned_gt.
        #[arg(long)]
        against: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation sweep: supervision | frames | padding | topk |
    /// aggregator.
    Ablate {
        #[arg(long)]
        sweep: String,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Held-out evaluation dataset (defaults to --data).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render PNG panels from training-curve or ablation CSVs.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// CSV files to plot.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

fn read_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

fn build_specs(cfg: &DataConfig) -> Vec<SceneSpec> {
    (0..cfg.scenes)
        .map(|i| SceneSpec {
            scene_id: format!("scene_{i:03}"),
            canvas: (cfg.canvas, cfg.canvas),
            num_frames: cfg.frames,
            weather: cfg.weathers[i % cfg.weathers.len()],
            weather_density: cfg.density,
            inconsistency: cfg.inconsistencies.clone(),
            rng_seed: cfg.seed.wrapping_add(i as u64),
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let file = read_config(&config)?;
            let mut data_cfg = load_data_config(&file)?;
            if let Some(s) = seed {
                data_cfg.seed = s;
            }
            let train_cfg = load_train_config(&file)?;
            let specs = build_specs(&data_cfg);
            let manifest = generate_dataset(&specs, &out, train_cfg.match_cfg.s)?;
            println!(
                "wrote {} scenes to {} (manifest.csv included)",
                manifest.entries.len(),
                out.display()
            );
        }
        Command::TrainClc {
            data,
            config,
            seed,
            out,
            stage,
        } => {
            let file = read_config(&config)?;
            let mut cfg = load_train_config(&file)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(stage) = stage {
                cfg.stage = stage.parse()?;
            }
            if cfg.stage == Stage::Dew {
                return Err(Error::InvalidConfig(
                    "train-clc trains a constructor; set stage to clc or csaclc".into(),
                ));
            }
            let scenes = load_dataset(&data)?;
            let outcome = train_constructor(&scenes, &cfg, &out)?;
            println!(
                "constructor checkpoint: {}\nloss curve: {} ({} steps, final loss {:.6})",
                outcome.checkpoint.display(),
                outcome.curve_csv.display(),
                outcome.steps,
                outcome.final_loss
            );
        }
        Command::TrainDew {
            data,
            constructor,
            config,
            seed,
            out,
            supervision,
        } => {
            let file = read_config(&config)?;
            let mut cfg = load_train_config(&file)?;
            cfg.stage = Stage::Dew;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(sup) = supervision {
                cfg.supervision = sup.parse()?;
            }
            if cfg.supervision != Supervision::Original && constructor.is_none() {
                return Err(Error::InvalidConfig(
                    "pseudo-label supervision needs --constructor CKPT".into(),
                ));
            }
            let scenes = load_dataset(&data)?;
            let outcome = train_dew(&scenes, constructor.as_deref(), &cfg, &out)?;
            println!(
                "de-weathering checkpoint: {}\nloss curve: {} ({} steps, final loss {:.6})",
                outcome.checkpoint.display(),
                outcome.curve_csv.display(),
                outcome.steps,
                outcome.final_loss
            );
        }
        Command::Eval {
            ckpt,
            data,
            against,
            out,
        } => {
            let against: Against = against.as_deref().unwrap_or("oracle").parse()?;
            let records = evaluate(&ckpt, &data, against)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let metrics_path = out.join("metrics.csv");
            let summary_path = out.join("summary.csv");
            write_metrics_csv(&records, &metrics_path)?;
            let summary = summarize(&records);
            write_summary_csv(&summary, &summary_path)?;
            for row in &summary {
                let name = row
                    .weather
                    .map(|w| w.to_string())
                    .unwrap_or_else(|| "overall".into());
                println!(
                    "{name}: n={} psnr={:.3} dB ssim={:.4}",
                    row.count, row.psnr_db, row.ssim
                );
            }
            println!("metrics: {}", metrics_path.display());
        }
        Command::Ablate {
            sweep,
            data,
            eval_data,
            config,
            seed,
            out,
        } => {
            let sweep: SweepKind = sweep.parse()?;
            let file = read_config(&config)?;
            let mut cfg = load_train_config(&file)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let eval_dir = eval_data.unwrap_or_else(|| data.clone());
            let csv = ablate(sweep, &cfg, &data, &eval_dir, &out)?;
            println!("ablation table: {}", csv.display());
        }
        Command::Plot { out, csvs } => {
            let files = plot(&csvs, &out)?;
            for f in &files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
