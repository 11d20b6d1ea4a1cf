//! `fstcn`: dataset generation, factorization verification, training,
//! evaluation, offline score re-fusion, and saliency export.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure.

mod config;
mod records;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fstcn::clip::{load_dataset, sample_clip_pair, ClipSpec, VideoSequence};
use fstcn::factorized::{param_savings, random_equivalence_trial};
use fstcn::fusion::crop_variants;
use fstcn::net::{Network, PathMode};
use fstcn::subseed;
use fstcn::synth::generate_dataset;
use fstcn::trainer::train;
use fstcn::FstcnError;

use config::RunConfig;
use records::{fusion_report, DumpRecord, FusionReport};

#[derive(Parser)]
#[command(name = "fstcn", about = "Factorized spatio-temporal convolutional networks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motion dataset on disk.
    GenData(GenDataArgs),
    /// Check the factorized convolution against direct 3D convolution.
    VerifyFactorization(VerifyArgs),
    /// Train a network and write checkpoint plus metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint: fusion schemes and path ablations.
    Eval(EvalArgs),
    /// Re-fuse a dumped score file offline.
    Fuse(FuseArgs),
    /// Export a saliency map as a PGM image.
    Saliency(SaliencyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Number of randomized trials.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Largest spatial extent of the random volumes.
    #[arg(long, default_value_t = 16)]
    max_spatial: usize,
    /// Largest temporal extent of the random volumes.
    #[arg(long, default_value_t = 8)]
    max_temporal: usize,
    /// Largest kernel extent.
    #[arg(long, default_value_t = 5)]
    max_kernel: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-trial JSONL report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, metrics, and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional directory for the raw score dump and the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Score dump written by eval (scores.jsonl).
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    seq: usize,
    /// Class whose score is traced; defaults to the sequence label.
    #[arg(long)]
    class: Option<usize>,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
}

/// Failures carry the exit code they map to.
#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<FstcnError> for CliError {
    fn from(e: FstcnError) -> Self {
        match e {
            FstcnError::Io(_) | FstcnError::NonFinite(_) | FstcnError::TapeConsumed => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::VerifyFactorization(a) => cmd_verify_factorization(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Saliency(a) => cmd_saliency(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_root_seed(seed);
    }
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let text = cfg.to_toml()?;
    fs::write(dir.join("config.toml"), text)
        .map_err(|e| CliError::Runtime(format!("writing resolved config: {e}")))?;
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    echo_config(&cfg, &args.out)?;
    generate_dataset(&cfg.synth, &args.out)?;
    println!(
        "wrote {} classes x {} sequences to {}",
        cfg.synth.classes.len(),
        cfg.synth.seqs_per_class,
        args.out.display()
    );
    Ok(())
}

fn cmd_verify_factorization(args: VerifyArgs) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(CliError::Validation("--trials must be >= 1".into()));
    }
    if args.max_kernel == 0 || args.max_spatial < args.max_kernel || args.max_temporal < args.max_kernel.min(args.max_temporal) {
        return Err(CliError::Validation("kernel extents must fit the volume extents".into()));
    }
    let mut lines = String::new();
    let mut max_error = 0.0f64;
    for trial in 0..args.trials {
        let seed = subseed(args.seed, &format!("verify/{trial}"));
        let outcome = random_equivalence_trial(args.max_spatial, args.max_temporal, args.max_kernel, seed)?;
        let (direct, fact) = param_savings(outcome.n_x, outcome.n_y, outcome.n_t);
        max_error = max_error.max(outcome.error);
        let record = serde_json::json!({
            "trial": trial,
            "volume": [outcome.m_x, outcome.m_y, outcome.m_t],
            "kernel": [outcome.n_x, outcome.n_y, outcome.n_t],
            "error": outcome.error,
            "params_direct": direct,
            "params_factorized": fact,
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    match &args.report {
        Some(path) => fs::write(path, &lines).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
        None => print!("{lines}"),
    }
    eprintln!("max error over {} trials: {max_error:.3e}", args.trials);
    if max_error <= args.tolerance {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "factorization mismatch: max error {max_error:.3e} exceeds {:.1e}",
            args.tolerance
        )))
    }
}

fn load_data(path: &Path) -> Result<fstcn::clip::Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("dataset directory {} does not exist", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn load_net(path: &Path) -> Result<Network, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Network::load(path)?)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let ds = load_data(&args.data)?;
    let mut net_cfg = cfg.net.clone();
    net_cfg.num_classes = ds.classes.len();
    echo_config(&RunConfig { net: net_cfg.clone(), ..cfg.clone() }, &args.out)?;

    let mut net = Network::new(net_cfg, subseed(cfg.train.seed, "init"))?;
    let mut metrics_file = fs::File::create(args.out.join("metrics.jsonl"))
        .map_err(|e| CliError::Runtime(format!("metrics log: {e}")))?;
    let report = train(&mut net, &ds.train, &ds.test, &cfg.clip, &cfg.train, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        let _ = writeln!(metrics_file, "{line}");
        println!(
            "epoch {:3}  lr {:.5}  loss {:.4}  test acc {:.3}",
            m.epoch, m.learning_rate, m.train_loss, m.test_accuracy
        );
    })?;
    let ckpt = args.out.join("net.ckpt");
    net.save(&ckpt)?;
    println!("final accuracy {:.3}; checkpoint at {}", report.final_accuracy, ckpt.display());
    Ok(())
}

/// One forward per (path, sequence, clip start, crop variant) on the test
/// split; fusion happens afterwards over the records.
fn dump_scores(net: &Network, test: &[VideoSequence], spec: &ClipSpec) -> Result<Vec<DumpRecord>, CliError> {
    let mut records = Vec::new();
    for (path_name, path) in
        [("combined", PathMode::Combined), ("scl-only", PathMode::SclOnly), ("tcl-only", PathMode::TclOnly)]
    {
        for (si, seq) in test.iter().enumerate() {
            let label = seq
                .label
                .ok_or_else(|| CliError::Validation(format!("test sequence {si} has no label")))?;
            let (mx, my, mt, _) = seq.extents();
            let variants = crop_variants(mx, my, spec.l_x, spec.l_y)?;
            let starts = fstcn::trainer::even_starts(spec.max_start(mt)?, spec.clips_per_seq);
            for &start in &starts {
                for v in &variants {
                    let pair = sample_clip_pair(seq, spec, start, v.crop, v.flip)?;
                    let scores = net.infer(&pair, path)?;
                    records.push(DumpRecord {
                        path: path_name.to_string(),
                        seq: si,
                        label,
                        start,
                        crop_x: v.crop.0,
                        crop_y: v.crop.1,
                        flip: v.flip,
                        scores: scores.data().to_vec(),
                    });
                }
            }
        }
    }
    Ok(records)
}

fn print_report(report: &FusionReport, classes: &[String]) {
    for path in &report.paths {
        println!("[{}]", path.path);
        for (scheme, acc) in [("sci", &path.sci), ("average", &path.average)] {
            let per_class: Vec<String> = classes
                .iter()
                .zip(&acc.per_class)
                .map(|(name, a)| format!("{name} {a:.3}"))
                .collect();
            println!("  {scheme:8} mean {:.3}  ({})", acc.mean, per_class.join(", "));
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let net = load_net(&args.checkpoint)?;
    let ds = load_data(&args.data)?;
    if net.config.num_classes != ds.classes.len() {
        return Err(CliError::Validation(format!(
            "checkpoint has {} classes, dataset has {}",
            net.config.num_classes,
            ds.classes.len()
        )));
    }
    let records = dump_scores(&net, &ds.test, &cfg.clip)?;
    let report = fusion_report(&records).map_err(CliError::Validation)?;
    print_report(&report, &ds.classes);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
        let mut dump = String::new();
        for r in &records {
            dump.push_str(&serde_json::to_string(r).expect("record serialize"));
            dump.push('\n');
        }
        fs::write(out.join("scores.jsonl"), dump)
            .map_err(|e| CliError::Runtime(format!("score dump: {e}")))?;
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report).expect("report serialize"))
            .map_err(|e| CliError::Runtime(format!("eval report: {e}")))?;
    }
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<(), CliError> {
    if !args.scores.exists() {
        return Err(CliError::Validation(format!("score file {} does not exist", args.scores.display())));
    }
    let text = fs::read_to_string(&args.scores)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.scores.display())))?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DumpRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Validation(format!("score file line {}: {e}", ln + 1)))?;
        records.push(r);
    }
    let report = fusion_report(&records).map_err(CliError::Validation)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialize"));
    Ok(())
}

fn cmd_saliency(args: SaliencyArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let ds = load_data(&args.data)?;
    let net = load_net(&args.checkpoint)?;
    let seq = ds
        .test
        .get(args.seq)
        .ok_or_else(|| CliError::Validation(format!("test sequence index {} out of range ({} sequences)", args.seq, ds.test.len())))?;
    let class = match args.class {
        Some(c) => c,
        None => seq.label.ok_or_else(|| CliError::Validation("sequence has no label; pass --class".into()))?,
    };
    let (mx, my, mt, _) = seq.extents();
    let crop = ((mx - cfg.clip.l_x) / 2, (my - cfg.clip.l_y) / 2);
    let start = cfg.clip.max_start(mt)? / 2;
    let pair = sample_clip_pair(seq, &cfg.clip, start, crop, false)?;
    let map = net.saliency(&pair, class)?;
    write_pgm(&args.out, &map)?;
    println!("wrote {}x{} saliency map for class {class} to {}", map.shape()[0], map.shape()[1], args.out.display());
    Ok(())
}

/// Binary PGM (P5), max-normalized to the 0..=255 range.
fn write_pgm(path: &Path, map: &fstcn::Tensor) -> Result<(), CliError> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(CliError::Validation(format!("saliency map must be 2D, got {s:?}")));
    }
    let peak = map.max_abs();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(map.data().iter().map(|&v| (v.abs() * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}
