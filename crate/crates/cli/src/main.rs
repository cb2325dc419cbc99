use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adagcd::data::{read_index_csv, KnownClasses};
use adagcd::pipeline::{
    evaluate_model, export_embeddings, format_table, load_dataset, load_split, parse_grid, read_meta, sweep, train,
};
use adagcd::{Checkpoint, Error, PipelineConfig, Precision, Result, Scalar};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adagcd", version, about = "Slot-based generalized category discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, evaluate it and write a checkpoint under run.out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set clusterer.k_max=10`.
        #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
        set: Vec<String>,
    },
    /// Cluster a checkpoint's embeddings of a split and print the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        k: usize,
        /// Also write `instance_id,cluster_id` rows here.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Train and evaluate every line of a grid file of overrides.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
        set: Vec<String>,
    },
    /// Write the unified vectors of every instance as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to export; defaults to the checkpoint's own split.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Build a labeled/unlabeled split from an index CSV.
    MakeSplit {
        #[arg(long)]
        index: PathBuf,
        /// `0.5` (fraction of classes), `first:5` or `0,2,4`.
        #[arg(long)]
        known: String,
        #[arg(long, default_value_t = 0.5)]
        frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; the split goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, set: &[String]) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(path)?;
    cfg.apply_overrides(set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_train<T: Scalar>(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.run.out_dir.clone();
    let outcome = train::<T>(cfg, Some(&out))?;
    print!("{}", outcome.report.to_kv());
    println!("checkpoint={}", out.join("model.safetensors").display());
    Ok(())
}

fn run_eval<T: Scalar>(checkpoint: &Path, split: &Path, k: usize, assignments: Option<&Path>) -> Result<()> {
    let model = Checkpoint::<T>::load(checkpoint)?.into_model()?;
    let dataset = load_dataset(&model.cfg)?;
    let split = adagcd::data::SplitSpec::read(split)?;
    let report = evaluate_model(&model, &dataset, &split, k)?;
    if let Some(p) = assignments {
        report.write_assignments_csv(p)?;
    }
    print!("{}", report.to_kv());
    Ok(())
}

fn run_export<T: Scalar>(checkpoint: &Path, out: &Path, split: Option<&Path>) -> Result<()> {
    let model = Checkpoint::<T>::load(checkpoint)?.into_model()?;
    let dataset = load_dataset(&model.cfg)?;
    let split = match split {
        Some(p) => adagcd::data::SplitSpec::read(p)?,
        None => load_split(&model.cfg, &dataset)?,
    };
    let rows = export_embeddings(&model, &dataset, &split, out)?;
    println!("rows={rows}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, set } => {
            let cfg = load_config(&config, &set)?;
            match cfg.run.precision {
                Precision::F32 => run_train::<f32>(&cfg),
                Precision::F64 => run_train::<f64>(&cfg),
            }
        }
        Command::Eval {
            checkpoint,
            split,
            k,
            assignments,
        } => match read_meta(&checkpoint)?.precision {
            Precision::F32 => run_eval::<f32>(&checkpoint, &split, k, assignments.as_deref()),
            Precision::F64 => run_eval::<f64>(&checkpoint, &split, k, assignments.as_deref()),
        },
        Command::Sweep { config, grid, set } => {
            let cfg = load_config(&config, &set)?;
            let text = std::fs::read_to_string(&grid).map_err(|e| Error::Io { path: grid.clone(), source: e })?;
            let grid = parse_grid(&text)?;
            let rows = match cfg.run.precision {
                Precision::F32 => sweep::<f32>(&cfg, &grid, true)?,
                Precision::F64 => sweep::<f64>(&cfg, &grid, true)?,
            };
            print!("{}", format_table(&rows));
            Ok(())
        }
        Command::Export { checkpoint, out, split } => match read_meta(&checkpoint)?.precision {
            Precision::F32 => run_export::<f32>(&checkpoint, &out, split.as_deref()),
            Precision::F64 => run_export::<f64>(&checkpoint, &out, split.as_deref()),
        },
        Command::MakeSplit {
            index,
            known,
            frac,
            seed,
            out,
        } => {
            let dataset = read_index_csv(&index)?;
            let known: KnownClasses = known.parse()?;
            let split = adagcd::data::build_split(&dataset.index(), &known, frac, seed)?;
            match out {
                Some(p) => {
                    split.write(&p)?;
                    println!("labeled={} unlabeled={}", split.num_labeled(), split.num_unlabeled());
                }
                None => print!("{}", split.to_text()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Parse { .. } => 4,
        Error::Io { .. } => 5,
        Error::InvalidInput(_) => 6,
        Error::Shape(_) => 7,
        Error::Numeric { .. } => 8,
        Error::Contract(_) => 9,
        Error::Checkpoint(_) => 10,
    }
}
