use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use patchcycle::checkpoint::{load_checkpoint, read_header};
use patchcycle::imaging::load_frame_store;
use patchcycle::inference::{translate_frames, Direction, TranslationJob};
use patchcycle::netspec::{build_discriminator, empirical_rf_probe, format_stack, parse_stack, rf_trace, ConvStackSpec, Discriminator};
use patchcycle::training::train_loop_with;
use patchcycle::{CropRect, Error, Result, Scalar, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Unpaired face translation with cycle-consistent generators and patch
/// discriminators.
#[derive(Parser, Debug)]
#[command(name = "patchcycle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train G and F from a TOML experiment config.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override one config key, e.g. `--set loss.lambda=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Element type for parameters and activations.
        #[arg(long, value_enum, default_value = "f32")]
        dtype: Dtype,
        /// Print every loss report to stdout, not only at checkpoints.
        #[arg(long)]
        verbose: bool,
    },
    /// Translate a directory of frames with a trained generator.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// XtoY applies G, YtoX applies F.
        #[arg(long)]
        direction: String,
        /// Directory of input frames.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for frame_NNNNNN.png and frames.txt.
        #[arg(long)]
        output: PathBuf,
        /// Crop rectangle `left,top,width,height`; defaults to the training
        /// crop of the source domain.
        #[arg(long)]
        crop: Option<String>,
    },
    /// Print the analytic receptive field of a conv stack.
    Rf {
        /// Comma-separated layers such as `k4s2,k4s2,k4s1`.
        stack: String,
    },
    /// Measure a discriminator's receptive field by gradient probing and
    /// compare it with the analytic value.
    ProbeRf {
        /// Stack to build with constant weights.
        #[arg(long, conflicts_with = "checkpoint")]
        stack: Option<String>,
        /// Probe a discriminator stored in this checkpoint instead.
        #[arg(long, requires = "network")]
        checkpoint: Option<PathBuf>,
        /// Discriminator name in the checkpoint: DY1, DY2, DX1 or DX2.
        #[arg(long)]
        network: Option<String>,
        /// Side of the square probe input.
        #[arg(long, default_value_t = 256)]
        input_side: usize,
        /// Zero the weights of this 0-based layer before probing.
        #[arg(long)]
        zero_layer: Option<usize>,
    },
    /// Summarize a checkpoint.
    Inspect {
        checkpoint: PathBuf,
    },
}

/// Constant weight used for stacks built by `probe-rf`.
const PROBE_WEIGHT: f64 = 0.01;

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
            dtype,
            verbose,
        } => run_train(&config, &overrides, resume.as_deref(), dtype, verbose),
        Command::Translate {
            checkpoint,
            direction,
            input,
            output,
            crop,
        } => run_translate(&checkpoint, &direction, &input, &output, crop.as_deref()),
        Command::Rf { stack } => run_rf(&stack),
        Command::ProbeRf {
            stack,
            checkpoint,
            network,
            input_side,
            zero_layer,
        } => run_probe_rf(stack.as_deref(), checkpoint.as_deref(), network.as_deref(), input_side, zero_layer),
        Command::Inspect { checkpoint } => run_inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run_train(config: &Path, overrides: &[String], resume: Option<&Path>, dtype: Dtype, verbose: bool) -> CliResult {
    let cfg = TrainConfig::load(config, overrides)?;
    fn go<T: Scalar>(cfg: &TrainConfig, resume: Option<&Path>, verbose: bool) -> Result<u64> {
        let state = train_loop_with::<T>(cfg, resume, |r| {
            if verbose || r.step % cfg.checkpoint_interval == 0 || r.step == cfg.total_steps {
                println!("{r}");
            }
        })?;
        Ok(state.step)
    }
    let step = match dtype {
        Dtype::F32 => go::<f32>(&cfg, resume, verbose)?,
        Dtype::F64 => go::<f64>(&cfg, resume, verbose)?,
    };
    println!("finished at step {step}; outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn run_translate(checkpoint: &Path, direction: &str, input: &Path, output: &Path, crop: Option<&str>) -> CliResult {
    let direction: Direction = direction.parse()?;
    let crop = crop.map(str::parse::<CropRect>).transpose()?;
    let header = read_header(checkpoint)?;
    let store = load_frame_store(input, direction.source())?;
    let job = TranslationJob {
        checkpoint: checkpoint.to_path_buf(),
        direction,
        input: store,
        output_dir: output.to_path_buf(),
        crop,
    };
    let n = match header.dtype.as_str() {
        "f64" => translate_frames::<f64>(&job)?,
        _ => translate_frames::<f32>(&job)?,
    };
    println!("translated {n} frames into {}", output.display());
    Ok(())
}

fn run_rf(stack: &str) -> CliResult {
    let layers = parse_stack(stack)?;
    for (i, (layer, (r, j))) in layers.iter().zip(rf_trace(&layers)).enumerate() {
        println!("layer {:>2} {:<8} r={r} j={j}", i + 1, layer.to_string());
    }
    println!("receptive field {}", rf_trace(&layers).last().map_or(1, |t| t.0));
    Ok(())
}

fn probe_disc<T: Scalar>(mut disc: Discriminator<T>, input_side: usize, zero_layer: Option<usize>) -> std::result::Result<(usize, usize), Failure> {
    if let Some(l) = zero_layer {
        let name = format!("conv{l}.weight");
        let w = disc
            .params
            .get_mut(&name)
            .ok_or_else(|| Failure::Validation(format!("no layer {l}; the stack has {} layers", disc.spec.layers.len())))?;
        w.fill(T::zero());
    }
    let analytic = disc.spec.receptive_field();
    let empirical = empirical_rf_probe(&disc, input_side)?;
    Ok((analytic, empirical))
}

fn run_probe_rf(stack: Option<&str>, checkpoint: Option<&Path>, network: Option<&str>, input_side: usize, zero_layer: Option<usize>) -> CliResult {
    let (analytic, empirical) = match (stack, checkpoint) {
        (Some(s), _) => {
            let layers = parse_stack(s)?;
            let spec = ConvStackSpec::patch_discriminator(&layers, 3, 4, 8);
            let mut disc = build_discriminator::<f64, _>(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
            disc.fill_constant(PROBE_WEIGHT);
            probe_disc(disc, input_side, zero_layer)?
        }
        (None, Some(path)) => {
            let name = network.unwrap_or_default();
            let header = read_header(path)?;
            match header.dtype.as_str() {
                "f64" => probe_disc(find_disc::<f64>(path, name)?, input_side, zero_layer)?,
                _ => probe_disc(find_disc::<f32>(path, name)?, input_side, zero_layer)?,
            }
        }
        (None, None) => return Err(Failure::Validation("probe-rf needs --stack or --checkpoint".into())),
    };
    println!("analytic receptive field {analytic}");
    println!("empirical receptive field {empirical}");
    if analytic != empirical {
        return Err(Failure::Runtime(format!("empirical footprint {empirical} disagrees with analytic {analytic}")));
    }
    Ok(())
}

fn find_disc<T: Scalar>(path: &Path, name: &str) -> std::result::Result<Discriminator<T>, Failure> {
    let state = load_checkpoint::<T>(path)?;
    let index = |prefix: &str| name.strip_prefix(prefix).and_then(|i| i.parse::<usize>().ok()).filter(|&i| i >= 1);
    let found = match (index("DY"), index("DX")) {
        (Some(i), _) => state.d_y.get(i - 1),
        (_, Some(i)) => state.d_x.get(i - 1),
        _ => None,
    };
    found
        .cloned()
        .ok_or_else(|| Failure::Validation(format!("no discriminator {name:?} in checkpoint; it holds DY1..DY{}, DX1..DX{}", state.d_y.len(), state.d_x.len())))
}

fn run_inspect(checkpoint: &Path) -> CliResult {
    let h = read_header(checkpoint)?;
    println!("dtype        {}", h.dtype);
    println!("step         {}", h.step);
    println!("config hash  {}", h.config_hash);
    for n in &h.networks {
        println!("network {:<5} params={:<9} adam_t={}", n.name, n.numel(), n.adam_t);
    }
    let describe = |entries: &[String]| entries.join(" | ");
    println!("discriminators Y: {}", describe(&h.config.discriminators.y));
    println!("discriminators X: {}", describe(&h.config.discriminators.x));
    for (side, specs) in [("Y", h.config.stacks_y()?), ("X", h.config.stacks_x()?)] {
        for s in specs {
            println!("  {side} stack {} rf={}", format_stack(&s.convs()), s.receptive_field());
        }
    }
    println!("--- config ---");
    print!("{}", h.config.to_toml());
    Ok(())
}
