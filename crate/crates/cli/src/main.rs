//! `ipfn`: train periodic field models from an exemplar, synthesize
//! images and volumes, evaluate checkpoints and serve them over HTTP.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ipfn_core::checkpoint;
use ipfn_core::data::{load_exemplar, write_image_stack, ExemplarKind};
use ipfn_core::metrics::{diversity_score, periodicity_error, seam_error, wasserstein_trace, MetricReport};
use ipfn_core::model::{Conditioning, FieldModel};
use ipfn_core::synth::{seamless_tile, GuidanceSpec, SynthOutput, SynthesisRequest, Synthesizer, TileRequest};
use ipfn_core::training::{train, StepKind, Telemetry, TrainConfig, TrainObserver, TrainOptions, TrainState};
use ipfn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ipfn", version, about = "Periodic implicit field synthesis from a single exemplar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on an exemplar image (.png, .json stack) or SDF volume (.ipfvol).
    Train(TrainArgs),
    /// Synthesize an image or volume from a checkpoint.
    Synth(SynthArgs),
    /// Compute quality metrics for a checkpoint as JSON.
    Eval(EvalArgs),
    /// Serve checkpoints over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    exemplar: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint, keeping its configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total iteration count (overrides the configuration).
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print telemetry every N iterations.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct SynthArgs {
    ckpt: PathBuf,
    /// Output size such as 512x512 or 64x64x64.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<Dims>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// .png, .json (image stack) or .ipfvol
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    latent_extent: f64,
    /// Comma-separated latent vector used at every position.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    constant_latent: Option<Vec<f32>>,
    #[arg(long, value_parser = parse_dims)]
    chunk: Option<Dims>,
    /// Constant guidance value.
    #[arg(long, allow_hyphen_values = true)]
    guidance: Option<f64>,
    /// Linear guidance ramp AXIS:FROM:TO, axis 0 running down the rows.
    #[arg(long, value_parser = parse_ramp, allow_hyphen_values = true, conflicts_with_all = ["guidance", "guidance_line"])]
    guidance_ramp: Option<GuidanceSpec>,
    /// Guidance line A,B,C evaluated over normalized output coordinates.
    #[arg(long, value_delimiter = ',', num_args = 3, allow_hyphen_values = true, conflicts_with = "guidance")]
    guidance_line: Option<Vec<f64>>,
    /// Seamless constant-latent tile instead of a free-form synthesis.
    #[arg(long)]
    tile: bool,
    /// Whole periods per axis for --tile, e.g. 2x2.
    #[arg(long, value_parser = parse_dims)]
    periods: Option<Dims>,
}

#[derive(Args)]
struct EvalArgs {
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_seeds: usize,
    #[arg(long, value_parser = parse_dims)]
    dims: Option<Dims>,
    /// Random points for the periodicity check.
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long, allow_hyphen_values = true)]
    guidance: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = ".")]
    ckpt_dir: PathBuf,
    /// Largest output size per axis.
    #[arg(long, default_value_t = 1024)]
    max_dims: usize,
    /// Concurrent synthesis jobs.
    #[arg(long, default_value_t = 2)]
    workers: usize,
}

/// Sizes written width first (`WxH`, `WxHxD`), stored slowest axis first.
#[derive(Clone, Debug)]
struct Dims(Vec<usize>);

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let dims: std::result::Result<Vec<usize>, _> = s.split(['x', 'X']).map(str::parse).collect();
    match dims {
        Ok(d) if !d.is_empty() && !d.contains(&0) => Ok(Dims(d.into_iter().rev().collect())),
        _ => Err(format!("expected positive sizes like 256x256, got {s:?}")),
    }
}

fn parse_ramp(s: &str) -> std::result::Result<GuidanceSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected AXIS:FROM:TO, got {s:?}");
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok(GuidanceSpec::Ramp {
        axis: parts[0].parse().map_err(|_| bad())?,
        from: parts[1].parse().map_err(|_| bad())?,
        to: parts[2].parse().map_err(|_| bad())?,
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
    }
}

struct Progress {
    every: u64,
    start: Instant,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, _kind: StepKind, _iteration: u64, _loss: f64) {}

    fn on_telemetry(&mut self, t: &Telemetry) {
        if self.every > 0 && t.iteration.is_multiple_of(self.every) {
            eprintln!(
                "iter {:>6}  d {:>9.4}  g {:>9.4}  w {:>8.4}  period_px {:?}  {:.0}s",
                t.iteration,
                t.d_loss,
                t.g_loss,
                t.wasserstein_estimate,
                t.period_px.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
                self.start.elapsed().as_secs_f64()
            );
        }
    }

    fn on_checkpoint(&mut self, path: &Path, iteration: u64) {
        eprintln!("checkpoint {} (iteration {iteration})", path.display());
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let exemplar = load_exemplar(&args.exemplar)?;
    let mut state = match &args.resume {
        Some(path) => checkpoint::load(path)?,
        None => {
            let mut cfg = match &args.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    TrainConfig::from_json(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            TrainState::new(&exemplar, cfg)?
        }
    };
    if let Some(n) = args.iterations {
        state.config.iterations = n;
    }
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
    };
    let mut progress = Progress {
        every: args.log_every,
        start: Instant::now(),
    };
    train(&exemplar, &mut state, &opts, &mut progress)?;
    println!("{}", args.out.join("ckpt-final.ipfn").display());
    Ok(())
}

fn default_dims(model: &FieldModel) -> Vec<usize> {
    match model.kind {
        ExemplarKind::Image2d => vec![256, 256],
        ExemplarKind::Sdf3d => vec![64, 64, 64],
    }
}

/// Mid-range guidance for checkpoints that need one when none is given.
fn default_guidance(model: &FieldModel) -> Option<f64> {
    match model.conditioning {
        Conditioning::None => None,
        Conditioning::Directional { .. } => Some(0.0),
        Conditioning::Density => Some(0.5 / model.guidance_scale),
    }
}

fn write_output(out: &SynthOutput, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = match (ext.as_str(), out.kind) {
        ("png", ExemplarKind::Image2d) => out.to_png()?,
        ("ipfvol", _) => out.to_ipfvol()?,
        ("json", ExemplarKind::Image2d) => {
            return write_image_stack(path, out.dims[1], out.dims[0], out.channels, &out.values);
        }
        _ => {
            return Err(Error::Usage(format!(
                "cannot write a {}D result to {} (use .png or .json for images, .ipfvol for volumes)",
                out.dims.len(),
                path.display()
            )))
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Output buffer plus a per-chunk working set of coordinates, inputs and two
/// activation buffers.
fn memory_estimate(model: &FieldModel, out_positions: usize, chunk_positions: usize) -> usize {
    let arch = &model.generator.arch;
    let per_point = 8 * model.k() + 4 * (arch.in_dim() + 2 * arch.hidden + model.channels);
    out_positions * model.channels * 4 + chunk_positions * per_point * rayon::current_num_threads()
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let state = checkpoint::load(&args.ckpt)?;
    let model = &state.model;
    let start = Instant::now();
    let (out, chunk_positions) = if args.tile {
        let periods = args.periods.clone().map(|d| d.0).unwrap_or_else(|| vec![1; model.k()]);
        let req = TileRequest {
            periods,
            seed: args.seed,
            constant_latent: args.constant_latent.clone(),
            guidance: args.guidance.or_else(|| default_guidance(model)),
        };
        let tile = seamless_tile(model, &req)?;
        let n = tile.dims.iter().product();
        (tile, n)
    } else {
        let mut req = SynthesisRequest::new(args.dims.clone().map(|d| d.0).unwrap_or_else(|| default_dims(model)), args.seed)
            .with_latent_extent(args.latent_extent)?;
        req.constant_latent = args.constant_latent.clone();
        req.chunk_dims = args.chunk.clone().map(|d| d.0);
        req.guidance = match (&args.guidance_ramp, &args.guidance_line, args.guidance) {
            (Some(r), _, _) => Some(r.clone()),
            (None, Some(l), _) => Some(GuidanceSpec::Line { a: l[0], b: l[1], c: l[2] }),
            (None, None, Some(value)) => Some(GuidanceSpec::Scalar { value }),
            (None, None, None) => None,
        };
        let synth = Synthesizer::new(model, &req)?;
        let chunk: usize = req.chunk_dims_for(model.kind).iter().product();
        (synth.run()?, chunk)
    };
    let elapsed = start.elapsed();
    write_output(&out, &args.output)?;
    let est = memory_estimate(model, out.dims.iter().product(), chunk_positions);
    eprintln!(
        "wrote {} ({:?}, {} channels) in {:.3}s, peak memory estimate {:.1} MiB",
        args.output.display(),
        out.dims,
        out.channels,
        elapsed.as_secs_f64(),
        est as f64 / (1 << 20) as f64
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.n_seeds < 2 {
        return Err(Error::Usage(format!("--n-seeds must be at least 2, got {}", args.n_seeds)));
    }
    let state = checkpoint::load(&args.ckpt)?;
    let model = &state.model;
    let dims = args.dims.clone().map(|d| d.0).unwrap_or_else(|| match model.kind {
        ExemplarKind::Image2d => vec![128, 128],
        ExemplarKind::Sdf3d => vec![32, 32, 32],
    });
    let guidance = args.guidance.or_else(|| default_guidance(model));
    let mut outputs = Vec::with_capacity(args.n_seeds);
    for seed in 0..args.n_seeds as u64 {
        let mut req = SynthesisRequest::new(dims.clone(), seed);
        if matches!(model.conditioning, Conditioning::Density) || args.guidance.is_some() {
            req.guidance = guidance.map(|value| GuidanceSpec::Scalar { value });
        }
        outputs.push(ipfn_core::synth::synthesize(model, &req)?.values);
    }
    let refs: Vec<&[f32]> = outputs.iter().map(Vec::as_slice).collect();
    let diversity = diversity_score(&refs, model.channels)?;
    let tile = seamless_tile(
        model,
        &TileRequest {
            periods: vec![1; model.k()],
            seed: 0,
            constant_latent: None,
            guidance,
        },
    )?;
    let history: Vec<Telemetry> = state.history.iter().cloned().collect();
    let report = MetricReport {
        iteration: state.iteration,
        seeds: args.n_seeds,
        seam_error: seam_error(&tile.values, &tile.dims, tile.channels)?,
        periodicity_error: periodicity_error(model, args.points, 0)?,
        diversity,
        wasserstein_trace: wasserstein_trace(&history),
        a: model.a(),
        period_px: model.period_pixels(),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.output {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_serve(args: ServeArgs, threads: Option<usize>) -> Result<()> {
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().map_err(|e| Error::io("tokio runtime", e))?;
    let config = ipfn_service::ServiceConfig {
        ckpt_dir: args.ckpt_dir,
        max_dims: args.max_dims,
        workers: args.workers,
    };
    rt.block_on(ipfn_service::serve(config, args.port))
        .map_err(|e| Error::io(format!("port {}", args.port), e))
}

fn threads_from_env() -> std::result::Result<Option<usize>, Error> {
    match std::env::var("IPFN_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("IPFN_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = threads_from_env()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_are_width_first() {
        assert_eq!(parse_dims("640x480").unwrap().0, vec![480, 640]);
        assert_eq!(parse_dims("4x5x6").unwrap().0, vec![6, 5, 4]);
        assert!(parse_dims("0x4").is_err());
        assert!(parse_dims("4x").is_err());
    }

    #[test]
    fn ramp_syntax() {
        let r = parse_ramp("1:-0.5:2").unwrap();
        assert_eq!(r, GuidanceSpec::Ramp { axis: 1, from: -0.5, to: 2.0 });
        assert!(parse_ramp("1:2").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
    }
}
