use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use dewarp_core::checks::{self, Suite};
use dewarp_core::geometry::{generate_dataset, DEFAULT_SIZE};
use dewarp_core::inference::dewarp;
use dewarp_core::metrics::{evaluate, parse_metrics};
use dewarp_core::training::{load_checkpoint, run_ablation, train, TrainConfig, TrainOptions};
use dewarp_core::{io, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const RUN_MANIFEST: &str = "run_manifest.txt";

#[derive(Parser)]
#[command(name = "dewarp", version, about = "Line-guided document dewarping")]
#[command(after_help = "Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.\n\
                        DEWARP_THREADS caps the worker threads of parallel stages.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of warped pages.
    Gen {
        #[arg(long)]
        count: usize,
        /// Side of each square sample in pixels.
        #[arg(long, default_value_t = DEFAULT_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rectify one image with a trained model.
    Dewarp {
        /// Checkpoint directory (e.g. <train out>/model).
        #[arg(long)]
        model: PathBuf,
        /// PGM/PPM or .dten image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write the predicted backward map (2 x H x W .dten).
        #[arg(long)]
        dump_field: Option<PathBuf>,
        /// Write per-layer line probability maps as PGM.
        #[arg(long)]
        dump_lines: Option<PathBuf>,
    },
    /// Score rectified images (and OCR text) against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated: ms_ssim, ld, ed, cer.
        #[arg(long, default_value = "ms_ssim,ld")]
        metrics: String,
        /// TSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Train every architecture variant and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset scored after training.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Ops,
    Model,
}

enum Failure {
    Lib(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Invalid(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::Inversion(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Provenance of one run, written last and atomically.
struct RunManifest {
    command: String,
    config: String,
    seed: Option<u64>,
    started: u64,
    outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest { command: command.into(), config: String::new(), seed: None, started: now(), outputs: vec![] }
    }

    fn write(&self, dir: &Path) -> Result<(), Error> {
        let mut s = String::new();
        writeln!(s, "command={}", self.command).unwrap();
        writeln!(s, "version={}", env!("CARGO_PKG_VERSION")).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed={seed}").unwrap();
        }
        writeln!(s, "started={}", self.started).unwrap();
        writeln!(s, "finished={}", now()).unwrap();
        for o in &self.outputs {
            writeln!(s, "output={}", o.display()).unwrap();
        }
        for line in self.config.lines() {
            writeln!(s, "config.{line}").unwrap();
        }
        io::write_atomic(&dir.join(RUN_MANIFEST), s.as_bytes())
    }
}

fn argv() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn cmd_gen(count: usize, size: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    if size < 16 {
        return Err(Error::Invalid(format!("size {size} is below 16 pixels")).into());
    }
    let existed = out.exists();
    let mut manifest = RunManifest::new(&argv());
    manifest.seed = Some(seed);
    manifest.config = format!("count={count}\nsize={size}\nseed={seed}\n");
    if let Err(e) = generate_dataset(out, count, size, seed) {
        // leave nothing half-written behind
        let _ = if existed {
            (0..count).try_for_each(|k| {
                let d = out.join(dewarp_core::geometry::bundle_name(k));
                if d.exists() { std::fs::remove_dir_all(d) } else { Ok(()) }
            })
        } else {
            std::fs::remove_dir_all(out)
        };
        return Err(e.into());
    }
    manifest.outputs.push(out.to_path_buf());
    manifest.write(out)?;
    log::info!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn cmd_train(data: &Path, config: &Path, out: &Path, resume: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = TrainConfig::load(config)?;
    let mut manifest = RunManifest::new(&argv());
    manifest.seed = Some(cfg.seed);
    manifest.config = cfg.to_text();
    let summary = train(data, &cfg, out, &TrainOptions { resume })?;
    if let (Some(a), Some(b)) = (summary.initial_loss(), summary.final_loss()) {
        log::info!("loss {a:.4e} -> {b:.4e} over {} steps", summary.records.len());
    }
    manifest.outputs.push(out.to_path_buf());
    manifest.write(out)?;
    Ok(())
}

fn cmd_dewarp(
    model: &Path,
    input: &Path,
    output: &Path,
    dump_field: Option<&Path>,
    dump_lines: Option<&Path>,
) -> Result<(), Failure> {
    let ck = load_checkpoint(model)?;
    let image = io::load_image::<f32>(input)?;
    let result = dewarp(&ck.model, &image)?;
    io::save_image(output, &result.rectified)?;
    if let Some(path) = dump_field {
        io::save_dten(path, &result.field.to_tensor::<f32>())?;
    }
    if let Some(dir) = dump_lines {
        io::create_dir(dir)?;
        for (tag, maps) in [("h", &result.h_lines), ("v", &result.v_lines)] {
            for (i, m) in maps.iter().enumerate() {
                io::save_pnm(&dir.join(format!("{tag}_line_{}.pgm", i + 1)), m)?;
            }
        }
    }
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, metrics: &str, out: Option<&Path>) -> Result<(), Failure> {
    let metrics = parse_metrics(metrics)?;
    let report = evaluate(pred, gt, &metrics)?;
    let tsv = report.to_tsv();
    match out {
        Some(path) => io::write_atomic(path, tsv.as_bytes())?,
        None => print!("{tsv}"),
    }
    Ok(())
}

fn cmd_gradcheck(suite: SuiteArg) -> Result<(), Failure> {
    let suite = match suite {
        SuiteArg::All => Suite::All,
        SuiteArg::Ops => Suite::Ops,
        SuiteArg::Model => Suite::Model,
    };
    let outcomes = checks::run(suite)?;
    for o in &outcomes {
        println!(
            "{:<6} {:<28} rel_err {:.3e} (tol {:.0e}) {:.1}s",
            if o.passed() { "ok" } else { "FAIL" },
            o.name,
            o.report.max_rel_err,
            o.tolerance,
            o.seconds
        );
    }
    let worst = outcomes
        .iter()
        .max_by(|a, b| (a.report.max_rel_err / a.tolerance).total_cmp(&(b.report.max_rel_err / b.tolerance)));
    if let Some(w) = worst {
        println!(
            "worst: {} input {} index {}: analytic {:.6e}, numeric {:.6e}",
            w.name, w.report.worst_input, w.report.worst_index, w.report.analytic, w.report.numeric
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} of {} gradient checks exceeded tolerance", outcomes.len())));
    }
    Ok(())
}

fn cmd_ablate(data: &Path, config: &Path, out: &Path, heldout: Option<&Path>) -> Result<(), Failure> {
    let cfg = TrainConfig::load(config)?;
    let mut manifest = RunManifest::new(&argv());
    manifest.seed = Some(cfg.seed);
    manifest.config = cfg.to_text();
    let rows = run_ablation(data, heldout, &cfg, out)?;
    print!("{}", dewarp_core::training::ablation_tsv(&rows));
    manifest.outputs.push(out.to_path_buf());
    manifest.write(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { count, size, seed, out } => cmd_gen(count, size, seed, &out),
        Command::Train { data, config, out, resume } => cmd_train(&data, &config, &out, resume),
        Command::Dewarp { model, input, output, dump_field, dump_lines } => {
            cmd_dewarp(&model, &input, &output, dump_field.as_deref(), dump_lines.as_deref())
        }
        Command::Eval { pred, gt, metrics, out } => cmd_eval(&pred, &gt, &metrics, out.as_deref()),
        Command::Gradcheck { suite } => cmd_gradcheck(suite),
        Command::Ablate { data, config, out, heldout } => cmd_ablate(&data, &config, &out, heldout.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("DEWARP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not cap threads at {n}: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
