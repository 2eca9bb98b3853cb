use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use halfspec::codec::{self, CompressedArchive, DecompressMode};
use halfspec::evalmetrics::{emit_report, fidelity_report};
use halfspec::gridio::{load_cube, pixel_area_weights, save_cube};
use halfspec::select::SelectionConfig;
use halfspec::spectral::{forward_dft_all, summary_maps, write_summary_maps, SmoothingKernel};
use halfspec::specmodel::{estimate_mean, remove_mean};
use halfspec::synthgen::{generate, GeneratorSpec};

#[derive(Parser, Debug)]
#[command(name = "halfspec", version, about = "Half-spectral compression and emulation of gridded space-time fields")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "HALFSPEC_THREADS", default_value_t = 0)]
    threads: usize,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model, select coefficients and write an archive.
    Compress(CompressArgs),
    /// Reconstruct a cube from an archive.
    Decompress(DecompressArgs),
    /// Write several conditional simulations.
    Emulate(EmulateArgs),
    /// Compare an original cube with a reconstruction.
    Evaluate(EvaluateArgs),
    /// Print the header, budget and per-frequency counts of an archive.
    Inspect { archive: PathBuf },
    /// Generate a synthetic cube.
    Synth(SynthArgs),
    /// Write mean, seasonal, spread and forecast-SD maps of a cube.
    Summary { input: PathBuf, output_dir: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Sequential,
    Distributed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Mean,
    Simulate,
}

#[derive(Args, Debug)]
struct CompressArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    ratio: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Sequential)]
    variant: VariantArg,
    /// Batch size per step (default 50 sequential, 7049 distributed).
    #[arg(long = "M")]
    m: Option<usize>,
    /// Number of coherence re-estimations during the search.
    #[arg(long = "J", default_value_t = 8)]
    j: usize,
    /// Minimum chordal spacing within a batch.
    #[arg(long, default_value_t = 0.05)]
    dmin: f64,
    /// Also keep new picks away from earlier ones.
    #[arg(long)]
    dmin_across_batches: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the selection trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecompressArgs {
    archive: PathBuf,
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Mean)]
    mode: ModeArg,
    /// Required in simulate mode.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EmulateArgs {
    archive: PathBuf,
    output_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    original: PathBuf,
    reconstructed: PathBuf,
    output_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    output: PathBuf,
    /// Generator description; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    nlat: Option<usize>,
    #[arg(long)]
    nlon: Option<usize>,
    #[arg(long)]
    ntime: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failures before any computation, reported with exit code 1.
#[derive(Debug)]
struct Invalid(String);

fn validate(cli: &Cli) -> Result<(), Invalid> {
    let bad = |m: String| Err(Invalid(m));
    match &cli.command {
        Command::Compress(a) => {
            if !(a.ratio > 0.0 && a.ratio.is_finite()) {
                return bad(format!("--ratio must be positive, got {}", a.ratio));
            }
            if a.m == Some(0) {
                return bad("--M must be at least 1".into());
            }
            if !(a.dmin >= 0.0) {
                return bad("--dmin must be non-negative".into());
            }
        }
        Command::Decompress(a) => {
            if matches!(a.mode, ModeArg::Simulate) && a.seed.is_none() {
                return bad("--seed is required with --mode simulate".into());
            }
        }
        Command::Emulate(a) => {
            if a.count == 0 {
                return bad("--count must be at least 1".into());
            }
        }
        Command::Synth(a) => {
            if a.spec.is_none() && (a.nlat.is_none() || a.nlon.is_none() || a.ntime.is_none()) {
                return bad("synth needs --spec or all of --nlat, --nlon, --ntime".into());
            }
        }
        Command::Evaluate(_) | Command::Inspect { .. } | Command::Summary { .. } => {}
    }
    Ok(())
}

fn read_archive(path: &Path) -> anyhow::Result<CompressedArchive> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(CompressedArchive::from_bytes(&bytes)?)
}

fn selection_config(a: &CompressArgs) -> SelectionConfig {
    let base = match a.variant {
        VariantArg::Sequential => SelectionConfig::sequential(a.ratio),
        VariantArg::Distributed => SelectionConfig::distributed(a.ratio),
    };
    SelectionConfig {
        batch_size: a.m.unwrap_or(base.batch_size),
        reestimations: a.j,
        d_min: a.dmin,
        d_min_across_batches: a.dmin_across_batches,
        ..base
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Compress(a) => {
            let start = Instant::now();
            let (_, cube) = load_cube(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
            let config = selection_config(&a);
            let (archive, outcome) = codec::compress_with_outcome(&cube, &config, a.seed, &Default::default())?;
            let bytes = archive.to_bytes()?;
            fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
            if let Some(path) = &a.trace {
                fs::write(path, outcome.trace_text())?;
            }
            log::info!(
                "{} pairs, {} of {} bytes, {:.1}s",
                archive.n_pairs(),
                bytes.len(),
                archive.header.capacity(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Decompress(a) => {
            let archive = read_archive(&a.archive)?;
            let mode = match a.mode {
                ModeArg::Mean => DecompressMode::Mean,
                ModeArg::Simulate => DecompressMode::Simulate,
            };
            let cube = codec::decompress(&archive, mode, a.seed.unwrap_or(0))?;
            save_cube(cube.grid(), &cube, &a.output)?;
        }
        Command::Emulate(a) => {
            let archive = read_archive(&a.archive)?;
            fs::create_dir_all(&a.output_dir)?;
            for (r, cube) in codec::emulate(&archive, a.count, a.seed)?.iter().enumerate() {
                save_cube(cube.grid(), cube, a.output_dir.join(format!("realization_{r:04}.cube")))?;
            }
        }
        Command::Evaluate(a) => {
            let start = Instant::now();
            let (grid, original) = load_cube(&a.original)?;
            let (_, rec) = load_cube(&a.reconstructed)?;
            let mut report = fidelity_report(&original, &rec, &pixel_area_weights(&grid))?;
            report.runtime_seconds = Some(start.elapsed().as_secs_f64());
            emit_report(&report, &grid, &a.output_dir)?;
            log::info!("rmspe (all) {}", report.rmspe.all);
        }
        Command::Inspect { archive } => {
            let archive = read_archive(&archive)?;
            print!("{}", codec::inspect(&archive)?);
        }
        Command::Synth(a) => {
            let mut spec = match &a.spec {
                Some(p) => GeneratorSpec::load(p)?,
                None => GeneratorSpec::new(0, 0, 0, 0),
            };
            spec.n_lat = a.nlat.unwrap_or(spec.n_lat);
            spec.n_lon = a.nlon.unwrap_or(spec.n_lon);
            spec.n_time = a.ntime.unwrap_or(spec.n_time);
            spec.seed = a.seed.unwrap_or(spec.seed);
            let cube = generate(&spec)?;
            save_cube(cube.grid(), &cube, &a.output)?;
        }
        Command::Summary { input, output_dir } => {
            let (grid, cube) = load_cube(&input)?;
            if cube.n_time() < 4 {
                bail!("summary maps need at least 4 time steps");
            }
            let mut field = forward_dft_all(&cube);
            let mean = estimate_mean(&field, &pixel_area_weights(&grid));
            remove_mean(&mut field, &mean);
            let maps = summary_maps(&field, &SmoothingKernel::exp_cosine(cube.n_time()))?;
            write_summary_maps(&maps, &grid, &output_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(Invalid(msg)) = validate(&cli) {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
