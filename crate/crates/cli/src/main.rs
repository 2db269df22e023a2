//! Command-line front end: dataset generation, training, evaluation,
//! gradient checks, scaling benchmarks and the ablation grid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kmamba::bench::{parse_sizes, run_bench, BenchKind, BenchSettings, BENCH_CSV_HEADER};
use kmamba::data::{
    generate_dataset, load_case, read_manifest, write_pgm_slice, ManifestEntry, Split, Volume, MANIFEST_FILE,
};
use kmamba::gradsuite::{run_suite, SUITES};
use kmamba::metrics::LabelVolume;
use kmamba::model::load_checkpoint;
use kmamba::train::{
    ablation_grid, evaluate_case, infer, train_run, write_lines, AblationRow, EvalRow, TrainConfig,
    ABLATION_CSV_HEADER, EVAL_CSV_HEADER,
};
use kmamba::{Error, Tensor};

/// Process exit codes; usage errors keep clap's code 2.
mod exit {
    pub const OTHER: u8 = 1;
    pub const MISSING_FILE: u8 = 3;
    pub const BAD_CONFIG: u8 = 4;
    pub const INVARIANT: u8 = 5;
    pub const BAD_DATA: u8 = 6;
}

#[derive(Parser)]
#[command(name = "kmamba", version, about = "Volumetric segmentation with state-space scans, KAN operators and self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms and a manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Also dump the middle slice of every case as PGM images.
        #[arg(long)]
        pgm: bool,
    },
    /// Train on the manifest's training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Override both `model.seed` and `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-case metrics of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Finite-difference gradient suites; exits nonzero if any fails.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Runtime against sequence length, with the fitted log-log slope.
    Bench {
        #[arg(long, default_value = "scan")]
        kind: String,
        #[arg(long, default_value = "2^10..2^18")]
        sizes: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        samples: usize,
    },
    /// Train every on/off combination of the listed blocks.
    Ablate {
        /// Comma-separated subset of hsa, bkm, mda.
        #[arg(long, default_value = "hsa,bkm,mda")]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; defaults to the tiny preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => exit::MISSING_FILE,
            Error::Config(_) => exit::BAD_CONFIG,
            Error::BadMagic { .. } | Error::Header(_) | Error::Truncated { .. } | Error::DtypeMismatch { .. } => {
                exit::BAD_DATA
            }
            Error::Shape(_)
            | Error::InvalidSpec(_)
            | Error::Contract(_)
            | Error::NonFinite(_)
            | Error::LabelOutOfRange { .. }
            | Error::UndefinedMetric(_) => exit::INVARIANT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(f) = configure_threads().and_then(|_| run(cli)) {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    ExitCode::SUCCESS
}

/// `KMAMBA_THREADS` caps the worker pool.
fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("KMAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: exit::BAD_CONFIG,
        message: format!("KMAMBA_THREADS must be a positive integer, got {v:?}"),
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure {
        code: exit::OTHER,
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen {
            out,
            n,
            size,
            seed,
            noise,
            pgm,
        } => gen(&out, n, size, seed, noise, pgm),
        Command::Train {
            config,
            data,
            out,
            steps,
            seed,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            let cases = load_split(&data, &[Split::Train])?;
            let (_, records) = train_run(&strip_ids(cases), &cfg, &out)?;
            let last = records.last().expect("at least one step");
            println!("trained {} steps; final total loss {:.6}", last.step, last.l_total);
            Ok(())
        }
        Command::Eval {
            model,
            data,
            out,
            split,
        } => eval(&model, &data, &out, &split),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
        Command::Bench {
            kind,
            sizes,
            out,
            samples,
        } => {
            let kind: BenchKind = kind.parse()?;
            let settings = BenchSettings {
                samples,
                ..BenchSettings::default()
            };
            let report = run_bench(kind, &parse_sizes(&sizes)?, &settings)?;
            write_lines(&out, BENCH_CSV_HEADER, report.csv_lines())?;
            println!("{} log-log slope {:.4}", kind.name(), report.slope);
            Ok(())
        }
        Command::Ablate {
            grid,
            data,
            out,
            config,
            steps,
            seed,
        } => {
            let mut flags = [false; 3];
            for g in grid.split(',').map(str::trim).filter(|g| !g.is_empty()) {
                match g {
                    "hsa" => flags[0] = true,
                    "bkm" => flags[1] = true,
                    "mda" => flags[2] = true,
                    other => return Err(Error::Config(format!("unknown ablation block {other:?}")).into()),
                }
            }
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => kmamba::train::tiny_config(steps, seed),
            };
            cfg.train.steps = steps;
            let train = strip_ids(load_split(&data, &[Split::Train])?);
            let val = strip_ids(load_split(&data, &[Split::Val, Split::Test])?);
            let rows = ablation_grid(&train, &val, &cfg, flags)?;
            write_lines(&out, ABLATION_CSV_HEADER, rows.iter().map(AblationRow::csv_row))?;
            for r in &rows {
                println!("{}", r.csv_row());
            }
            Ok(())
        }
    }
}

fn gen(out: &Path, n: usize, size: usize, seed: u64, noise: f64, pgm: bool) -> CliResult {
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()).into());
    }
    let entries = generate_dataset(out, n, size, seed, noise)?;
    if pgm {
        for e in &entries {
            let (image, labels) = load_case(out, e)?;
            let image = Volume::from_image(&image, [1.0; 3])?;
            write_pgm_slice(&out.join(format!("{}_image.pgm", e.path)), &image, 0, size / 2)?;
            write_pgm_slice(&out.join(format!("{}_label.pgm", e.path)), &Volume::from_labels(&labels), 0, size / 2)?;
        }
    }
    println!("wrote {n} cases of {size}^3 to {}", out.display());
    Ok(())
}

fn load_split(dir: &Path, splits: &[Split]) -> Result<Vec<(String, Tensor, LabelVolume)>, Error> {
    let entries: Vec<ManifestEntry> = read_manifest(&dir.join(MANIFEST_FILE))?
        .into_iter()
        .filter(|e| splits.contains(&e.split))
        .collect();
    entries
        .iter()
        .map(|e| load_case(dir, e).map(|(x, y)| (e.path.clone(), x, y)))
        .collect()
}

fn strip_ids(cases: Vec<(String, Tensor, LabelVolume)>) -> Vec<(Tensor, LabelVolume)> {
    cases.into_iter().map(|(_, x, y)| (x, y)).collect()
}

fn eval(ckpt: &Path, data: &Path, out: &Path, split: &str) -> CliResult {
    let splits = match split {
        "all" => vec![Split::Train, Split::Val, Split::Test],
        s => vec![s.parse::<Split>().map_err(|e| Error::Config(e.to_string()))?],
    };
    let model = load_checkpoint(ckpt)?;
    let cases = load_split(data, &splits)?;
    if cases.is_empty() {
        return Err(Error::Config(format!("no cases in split {split}")).into());
    }
    let mut rows: Vec<EvalRow> = Vec::new();
    for (id, x, y) in &cases {
        rows.extend(evaluate_case(id, &infer(&model, x)?, y, model.config.num_classes)?);
    }
    write_lines(out, EVAL_CSV_HEADER, rows.iter().map(EvalRow::csv_row))?;
    let fg: Vec<f64> = rows.iter().filter(|r| r.class == "fg").map(|r| r.dice).collect();
    println!(
        "{} cases; mean foreground dice {:.4}",
        cases.len(),
        fg.iter().sum::<f64>() / fg.len() as f64
    );
    Ok(())
}

fn gradcheck(module: Option<&str>) -> CliResult {
    let names: Vec<&str> = match module {
        Some(m) => vec![m],
        None => SUITES.to_vec(),
    };
    let mut failed = 0;
    for name in names {
        for report in run_suite(name)? {
            println!("{report}");
            failed += !report.passed() as usize;
        }
    }
    if failed > 0 {
        return Err(Failure {
            code: exit::INVARIANT,
            message: format!("{failed} gradient check(s) failed"),
        });
    }
    println!("all gradient checks passed");
    Ok(())
}
