//! `fpl`: synthesize feature packs, train the two-scalar projection head,
//! evaluate it against the built-in baselines and inspect pack files.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpl_core::classifier::PoNorm;
use fpl_core::dataio::{gen_synthetic, read_pack, write_pack, PackError, ShiftSpec, Split};
use fpl_core::evalharness::{baseline_clip_zero_shot, baseline_nearest_class_mean, evaluate, shift_sweep, EvalError, EvalReport};
use fpl_core::trainer::{train_with, Ablation, TrainError, TrainState};
use fpl_core::{HyperParams, SynthSpec};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "fpl", version, about = "Few-shot classification by ridge feature projection")]
struct Cli {
    /// Worker threads; 0 uses every core. FPL_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic feature pack.
    Synth(SynthArgs),
    /// Learn (μ, ε) on a pack's train split and write a state snapshot.
    Train(TrainArgs),
    /// Score a pack's test split and write a JSON report.
    Eval(EvalArgs),
    /// Summarize a pack file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Classes.
    #[arg(long, default_value_t = SynthSpec::default().classes)]
    d: usize,
    /// Shots per class.
    #[arg(long, default_value_t = SynthSpec::default().shots)]
    n: usize,
    #[arg(long, default_value_t = SynthSpec::default().height)]
    h: usize,
    #[arg(long, default_value_t = SynthSpec::default().width)]
    w: usize,
    /// Map channels.
    #[arg(long, default_value_t = SynthSpec::default().channels)]
    c: usize,
    /// Text/global feature width.
    #[arg(long, default_value_t = SynthSpec::default().text_channels)]
    ct: usize,
    #[arg(long, default_value_t = SynthSpec::default().class_separation)]
    separation: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise_sigma)]
    noise: f64,
    /// Test queries per class.
    #[arg(long, default_value_t = SynthSpec::default().queries_per_class)]
    queries: usize,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    seed: u64,
    /// Zero-shot temperature stored in the pack.
    #[arg(long, default_value_t = SynthSpec::default().tau)]
    tau: f64,
    /// Keep raw location vectors instead of unit-normalizing them.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoNormArg {
    Literal,
    PairMean,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    pack: PathBuf,
    #[arg(long, default_value_t = HyperParams::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = HyperParams::default().lr)]
    lr: f64,
    /// Orthogonality penalty weight.
    #[arg(long, default_value_t = HyperParams::default().gamma)]
    gamma: f64,
    /// Fusion weight.
    #[arg(long, default_value_t = HyperParams::default().eta)]
    eta: f64,
    #[arg(long, default_value_t = HyperParams::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = HyperParams::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = HyperParams::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = PoNormArg::Literal)]
    po_norm: PoNormArg,
    /// Let training queries reconstruct from their own support rows.
    #[arg(long)]
    no_leave_self_out: bool,
    /// Keep δ at 1.
    #[arg(long)]
    fixed_delta: bool,
    /// Train without the orthogonality penalty.
    #[arg(long)]
    no_po: bool,
    /// Snapshot path; defaults to `<pack>.state.json` beside the pack.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Fpl,
    Clip,
    Ncm,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pack: PathBuf,
    /// Training snapshot; required for `--method fpl`.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Fpl)]
    method: MethodArg,
    /// Override the fusion weight stored in the snapshot.
    #[arg(long)]
    eta: Option<f64>,
    /// Additive query noise per shifted target, comma separated.
    #[arg(long, value_delimiter = ',')]
    shift_noise: Vec<f64>,
    /// Rotation strength per shifted target, comma separated.
    #[arg(long, value_delimiter = ',')]
    shift_rotation: Vec<f64>,
    /// Seed of the first target; later targets count up from it.
    #[arg(long, default_value_t = 0)]
    shift_seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    pack: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Pack(PackError::InvalidSpec(_))
            | CliError::Train(TrainError::InvalidHyperParams(_)) => 1,
            _ => 2,
        }
    }
}

fn configure_threads(flag: usize) -> Result<(), CliError> {
    let threads = match std::env::var("FPL_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("FPL_THREADS must be a count, got {v:?}")))?,
        Err(_) => flag,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn load_pack(path: &Path) -> Result<fpl_core::FeaturePack, CliError> {
    read_pack(path).map_err(|e| match e {
        PackError::Io(source) => CliError::Io { path: path.display().to_string(), source },
        other => other.into(),
    })
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        classes: a.d,
        shots: a.n,
        height: a.h,
        width: a.w,
        channels: a.c,
        text_channels: a.ct,
        class_separation: a.separation,
        noise_sigma: a.noise,
        queries_per_class: a.queries,
        seed: a.seed,
        tau: a.tau,
        normalize_locations: !a.no_normalize,
    };
    let pack = gen_synthetic(&spec)?;
    write_pack(&pack, &a.out)?;
    eprintln!("wrote {} (sha256 {})", a.out.display(), pack.content_hash()?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let pack = load_pack(&a.pack)?;
    let hp = HyperParams {
        eta: a.eta,
        gamma: a.gamma,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        weight_decay: a.weight_decay,
        po_norm: match a.po_norm {
            PoNormArg::Literal => PoNorm::Literal,
            PoNormArg::PairMean => PoNorm::PairMean,
        },
        leave_self_out: !a.no_leave_self_out,
    };
    let ablation = Ablation { po_off: a.no_po, freeze_mu: a.fixed_delta };
    let stdout = std::io::stdout();
    let state = train_with(&pack, &hp, ablation, |record| {
        let mut out = stdout.lock();
        // a closed pipe should not abort training
        let _ = writeln!(out, "{}", serde_json::to_string(record).expect("plain record"));
        ControlFlow::Continue(())
    })?;
    let path = a.out.unwrap_or_else(|| a.pack.with_extension("state.json"));
    let json = serde_json::to_string_pretty(&state).expect("plain state");
    write_file(&path, &(json + "\n"))?;
    eprintln!("wrote {} (mu {}, epsilon {})", path.display(), state.params.mu, state.params.epsilon);
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })
}

fn shifts(a: &EvalArgs) -> Result<Vec<ShiftSpec>, CliError> {
    let (noise, rotation) = (&a.shift_noise, &a.shift_rotation);
    let n = noise.len().max(rotation.len());
    let pick = |v: &[f64], i: usize| match v.len() {
        0 => Some(0.0),
        1 => Some(v[0]),
        len if len == n => Some(v[i]),
        _ => None,
    };
    (0..n)
        .map(|i| match (pick(noise, i), pick(rotation, i)) {
            (Some(noise_add), Some(rotation_strength)) => {
                Ok(ShiftSpec { rotation_strength, noise_add, seed: a.shift_seed + i as u64 })
            }
            _ => Err(CliError::Usage("--shift-noise and --shift-rotation need equal lengths (or one value)".into())),
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let targets = shifts(&a)?;
    if a.method != MethodArg::Fpl && (a.state.is_some() || a.eta.is_some() || !targets.is_empty()) {
        return Err(CliError::Usage("--state, --eta and shift flags apply to --method fpl only".into()));
    }
    let pack = load_pack(&a.pack)?;
    let mut reports: Vec<EvalReport> = match a.method {
        MethodArg::Clip => vec![baseline_clip_zero_shot(&pack)?],
        MethodArg::Ncm => vec![baseline_nearest_class_mean(&pack)?],
        MethodArg::Fpl => {
            let path = a.state.as_deref().ok_or_else(|| CliError::Usage("--method fpl needs --state".into()))?;
            let state = load_state(path)?;
            let mut hp = state.hyperparams.clone();
            if let Some(eta) = a.eta {
                hp.eta = eta;
            }
            if targets.is_empty() {
                vec![evaluate(&pack, &state, &hp)?]
            } else {
                shift_sweep(&pack, &state, &targets, &hp)?
            }
        }
    };
    for r in &mut reports {
        r.pack_path = Some(a.pack.display().to_string());
    }
    let json = if reports.len() == 1 {
        reports[0].to_json()
    } else {
        serde_json::to_string_pretty(&reports).expect("plain reports")
    } + "\n";
    match &a.out {
        Some(path) => write_file(path, &json)?,
        None => print!("{json}"),
    }
    for r in &reports {
        eprintln!("{:?} {:?}: {}/{} = {:.4}", r.method, r.role, r.correct, r.total, r.overall_accuracy);
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let pack = load_pack(&a.pack)?;
    let dims = pack.dims;
    let shots = pack.shots().map_or_else(
        || pack.support.iter().map(|s| s.len().to_string()).collect::<Vec<_>>().join(","),
        |n| n.to_string(),
    );
    println!("D={}", pack.classes());
    println!("N={shots}");
    println!("dims H={} W={} C={} C_t={}", dims.height, dims.width, dims.channels, dims.text_channels);
    println!("tau={}", pack.tau);
    println!("queries train={} test={}", pack.count_split(Split::Train), pack.count_split(Split::Test));
    println!("normalize_locations={}", pack.normalize_locations);
    println!("template={:?}", pack.prompt_template);
    if let Some(p) = &pack.provenance {
        println!("provenance={p:?}");
    }
    println!("sha256={}", pack.content_hash()?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too, on stdout
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fpl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
