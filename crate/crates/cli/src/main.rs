//! `dccrn-vae` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dccrn_vae::checks::{gradient_suite, selftest};
use dccrn_vae::data::{build_dataset, DatasetConfig, MixManifest, Split};
use dccrn_vae::eval::evaluate_triples;
use dccrn_vae::frontend::{load_wav, save_wav};
use dccrn_vae::losses::LossLog;
use dccrn_vae::train::{resolve_config, run_training, EnhanceMode, Enhancer, TrainData, CKPT_DIR_ENV};

const AFTER_HELP: &str = "\
Settings precedence (later wins): --config file, then the DCCRN_VAE_CKPT_DIR
environment variable (checkpoint directory only), then command-line flags.

Exit codes: 0 success, 1 usage error, 2 runtime failure.";

#[derive(Parser, Debug)]
#[command(name = "dccrn-vae", version, about = "Complex-Gaussian DCCRN-VAE speech enhancement", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic corpus (clean speech, noise, manifest).
    SynthData(SynthArgs),
    /// Train one stage or all three.
    Train(TrainArgs),
    /// Enhance one WAV file.
    Enhance(EnhanceArgs),
    /// Score a manifest split: SI-SDR and STOI of noisy and enhanced audio.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks of every layer and model.
    Gradcheck(GradcheckArgs),
    /// Quick invariant checks; prints pass counts per family.
    Selftest,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (clean/, noise/, manifest.jsonl).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    utterances: usize,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args, Debug)]
#[command(after_help = AFTER_HELP)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus manifest (JSON lines); the train split is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, env = CKPT_DIR_ENV)]
    ckpt_dir: Option<PathBuf>,
    /// Any config key, e.g. `--set crop_len=4096` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Loss log (default: <ckpt dir>/losses.csv).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Decode from the clean encoder on --clean (performance ceiling).
    #[arg(long, requires = "clean")]
    oracle: bool,
    #[arg(long)]
    clean: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Per-utterance CSV report (default: report.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write aggregate means as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Entries sampled per parameter array in the full-model checks.
    #[arg(long, default_value_t = 4)]
    entries: usize,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dccrn_vae::Error> for Failure {
    fn from(e: dccrn_vae::Error) -> Self {
        match e {
            dccrn_vae::Error::InvalidConfig(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn synth(a: SynthArgs) -> Outcome {
    let manifest = build_dataset(&DatasetConfig {
        root: a.out.clone(),
        utterances: a.utterances,
        duration_s: a.duration,
        sample_rate: a.sample_rate,
        seed: a.seed,
    })?;
    println!("wrote {} records to {}", manifest.records.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut overrides: Vec<(String, String)> = Vec::new();
    let stage = match a.stage {
        StageArg::One => "1",
        StageArg::Two => "2",
        StageArg::Three => "3",
        StageArg::All => "all",
    };
    overrides.push(("stage".into(), stage.into()));
    let flags = [
        ("profile", a.profile.clone()),
        ("steps", a.steps.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("alpha", a.alpha.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("data.manifest", a.manifest.as_ref().map(|p| p.display().to_string())),
        ("ckpt.dir", a.ckpt_dir.as_ref().map(|p| p.display().to_string())),
    ];
    // The profile resets profile defaults, so it goes first.
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.into(), v));
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    let cfg = resolve_config(a.config.as_deref(), &overrides)?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Failure::Usage("no training data: pass --manifest or set data.manifest".into()))?;
    let data = TrainData::from_manifest(&manifest, Split::Train)?;
    std::fs::create_dir_all(&cfg.ckpt_dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| cfg.ckpt_dir.join("losses.csv"));
    let file = std::fs::File::create(&csv).map_err(|e| Failure::Runtime(format!("{}: {e}", csv.display())))?;
    let mut log = LossLog::new(std::io::BufWriter::new(file))?;
    let every = a.log_every.max(1);
    let ckpt = run_training(&cfg, &data, Some(&mut log), |r| {
        if r.step % every == 0 {
            let parts: Vec<String> = r.losses.iter().map(|(n, l)| format!("{n} {:.4}", l.total)).collect();
            eprintln!("stage {} step {}: {}", r.stage, r.step, parts.join(", "));
        }
    })?;
    println!(
        "stage {} done after {} steps; checkpoint {}",
        ckpt.stage,
        ckpt.step,
        cfg.stage_path(ckpt.stage).display()
    );
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Outcome {
    let enhancer = Enhancer::load(&a.ckpt)?;
    let noisy = load_wav(&a.input)?;
    let out = match (a.oracle, &a.clean) {
        (true, Some(clean)) => {
            let clean = load_wav(clean)?;
            enhancer.enhance(&noisy, EnhanceMode::Oracle(&clean))?
        }
        (true, None) => return Err(Failure::Usage("--oracle needs --clean".into())),
        (false, _) => enhancer.enhance(&noisy, EnhanceMode::Noisy)?,
    };
    save_wav(&out, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let enhancer = Enhancer::load(&a.ckpt)?;
    let manifest = MixManifest::read_jsonl(&a.manifest)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let triples = manifest.load(split)?;
    let oracle = a.oracle;
    let report = evaluate_triples(&triples, |_, noisy, clean| {
        let mode = if oracle { EnhanceMode::Oracle(clean) } else { EnhanceMode::Noisy };
        enhancer.enhance(noisy, mode)
    })?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.ckpt.parent().unwrap_or(Path::new(".")).join("report.csv"));
    report.save(&out, a.json.as_deref())?;
    let agg = report.aggregate();
    println!(
        "{} utterances: SI-SDR {:.2} -> {:.2} dB, STOI {:.3} -> {:.3}; report {}",
        agg.count,
        agg.si_sdr_noisy,
        agg.si_sdr_enhanced,
        agg.stoi_noisy,
        agg.stoi_enhanced,
        out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut failed = 0;
    for (name, r) in gradient_suite(a.entries)? {
        let ok = r.max_rel_error < a.tolerance;
        failed += usize::from(!ok);
        println!(
            "{} {name}: max relative error {:.2e} over {} entries",
            if ok { "pass" } else { "FAIL" },
            r.max_rel_error,
            r.checked
        );
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn run_selftest() -> Outcome {
    let mut failed = 0;
    for f in selftest()? {
        println!("{}: {}/{} passed", f.name, f.passed, f.total);
        for label in &f.failures {
            println!("  failed: {label}");
        }
        failed += f.total - f.passed;
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} self-test checks failed")));
    }
    Ok(())
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::SynthData(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest => run_selftest(),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}
