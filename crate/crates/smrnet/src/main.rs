use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smrnet::checkpoint;
use smrnet::dataset::{self, load_all, write_text};
use smrnet::run::{self, DatasetMetrics, Predictor};
use smrnet::{Error, Result, RunConfig};
use smrnet_core::synthgel::SnapType;

/// Snap detection on synthetic gel-sensor images.
///
/// Exit codes: 0 success, 2 usage or config error, 3 runtime or numeric
/// failure, 4 corrupted checkpoint or dataset. `SMRNET_THREADS` caps
/// parallelism (default 1).
#[derive(Parser)]
#[command(name = "smrnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset directory (PNG images and manifest.jsonl).
    Generate {
        /// Snap type, A or B.
        #[arg(long = "type")]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write a checkpoint.
    Train {
        /// Run configuration (`key = value` lines); omitted keys keep defaults.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directories, comma separated. Overrides `data` in the config.
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch CSV log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate on the eval split and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Echo the ground truth as predictions instead of running a model.
        #[arg(long, conflicts_with = "empty")]
        oracle: bool,
        /// Predict nothing instead of running a model.
        #[arg(long)]
        empty: bool,
        /// Configuration recorded in oracle and empty reports.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the CSV rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate the full model and three ablations over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn data_dirs(flag: Vec<PathBuf>, config: &RunConfig) -> Vec<PathBuf> {
    if flag.is_empty() {
        config.data.clone()
    } else {
        flag
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn with_csv(rows: &str, path: Option<&Path>) -> Result<()> {
    print!("{rows}");
    path.map_or(Ok(()), |p| write_text(p, rows))
}

fn execute(cmd: Command) -> Result<()> {
    smrnet::threads()?;
    match cmd {
        Command::Generate { kind, count, seed, out } => {
            let kind = SnapType::from_letter(&kind).ok_or_else(|| Error::Usage(format!("--type must be A or B, got {kind:?}")))?;
            let manifest = dataset::generate(kind, count, seed, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, data, out, log } => {
            let config = RunConfig::load(&config)?;
            let sets = load_all(&data_dirs(data, &config))?;
            let mut file = match &log {
                Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
                None => None,
            };
            let t = run::train(&config, &sets, |line| {
                println!("{line}");
                if let Some(f) = file.as_mut() {
                    use std::io::Write;
                    let _ = writeln!(f, "{line}");
                }
            })?;
            checkpoint::save(&out, &config, t.image_size, &t.store)?;
        }
        Command::Eval { ckpt, data, report, oracle, empty, config, csv } => {
            let predictor = if oracle {
                Predictor::Oracle
            } else if empty {
                Predictor::Empty
            } else {
                Predictor::Model
            };
            let loaded = match &ckpt {
                Some(p) => Some(checkpoint::load(p)?),
                None if predictor == Predictor::Model => return Err(Error::Usage("--ckpt is required unless --oracle or --empty is given".into())),
                None => None,
            };
            let cfg = match (&loaded, config) {
                (Some(c), _) => c.config.clone(),
                (None, Some(p)) => RunConfig::load(&p)?,
                (None, None) => RunConfig::default(),
            };
            let sets = load_all(&data_dirs(data, &cfg))?;
            if let Some(c) = &loaded {
                if sets[0].image_size() != c.image_size {
                    return Err(Error::Usage(format!("checkpoint expects {:?} images, data has {:?}", c.image_size, sets[0].image_size())));
                }
            }
            let r = run::eval_report(&cfg, predictor, loaded.as_ref().map(|c| (&c.model, &c.store)), &sets)?;
            write_text(&report, &to_json(&r))?;
            let mut rows = format!("{}\n", DatasetMetrics::CSV_HEADER);
            for m in &r.results {
                rows += &m.csv_row();
                rows.push('\n');
            }
            with_csv(&rows, csv.as_deref())?;
        }
        Command::Ablate { config, data, seeds, report, csv } => {
            let config = RunConfig::load(&config)?;
            let sets = load_all(&data_dirs(data, &config))?;
            let r = run::ablate(&config, &sets, &seeds, |msg| eprintln!("{msg}"))?;
            write_text(&report, &to_json(&r))?;
            with_csv(&r.csv(), csv.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
