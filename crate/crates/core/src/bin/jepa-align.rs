use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use jepa_align::attnmask::{build_mask, dump_mask, AttnVariant, DumpFormat};
use jepa_align::checks::{gradcheck, parse_check_filter, roles_for, verify, GradcheckConfig, VerifyConfig};
use jepa_align::data::{generate, SyntheticVocab};
use jepa_align::encoders::{write_embedding_file, EmbeddingFile};
use jepa_align::masking::{sample_mask, Interval, MaskSpec, PatchGrid, SamplerConfig};
use jepa_align::model::{read_checkpoint, Model};
use jepa_align::numerics::GradFault;
use jepa_align::rng::{rng_for, Stream};
use jepa_align::training::{run_stage, Stage, TrainJob};
use jepa_align::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Masked latent prediction during vision-language alignment, at desk scale.
#[derive(Debug, Parser)]
#[command(name = "jepa-align", version)]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file; its schema depends on the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample masks or render attention masks.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Generate synthetic image-caption data.
    #[command(subcommand)]
    Data(DataCommand),
    /// Run one training stage.
    Train(TrainArgs),
    /// Finite-difference check of the alignment-stage gradients.
    Gradcheck(GradcheckArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Subcommand)]
enum MaskCommand {
    /// Draw one context/target mask and print it as JSON.
    Sample(MaskSampleArgs),
    /// Build the attention mask for a sampled mask plus a caption.
    Attn(MaskAttnArgs),
}

#[derive(Debug, Args)]
struct MaskSampleArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Number of target blocks.
    #[arg(long)]
    k: Option<usize>,
    /// Target block scale range, as `lo,hi`.
    #[arg(long, value_parser = parse_interval)]
    target_scale: Option<Interval>,
    /// Context block scale range, as `lo,hi`.
    #[arg(long, value_parser = parse_interval)]
    context_scale: Option<Interval>,
    /// Target aspect-ratio range, as `lo,hi`.
    #[arg(long, value_parser = parse_interval)]
    aspect: Option<Interval>,
    /// Forbid overlapping target blocks.
    #[arg(long)]
    no_overlap: bool,
}

#[derive(Debug, Args)]
struct MaskAttnArgs {
    /// Mask JSON written by `mask sample`.
    #[arg(long)]
    spec: PathBuf,
    /// Number of caption tokens after the visual tokens.
    #[arg(long)]
    caption_len: usize,
    /// Let target tokens attend across blocks.
    #[arg(long)]
    tgt_cross_block: bool,
    /// Hide target tokens from caption tokens.
    #[arg(long)]
    no_text_sees_targets: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Pgm,
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Write pixels as an embedding file and captions as JSON lines.
    Gen(DataGenArgs),
}

#[derive(Debug, Args)]
struct DataGenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    rows: usize,
    #[arg(long, default_value_t = 6)]
    cols: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(value_enum)]
    stage: StageArg,
    /// Checkpoint to start from; required for `sft`.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    /// Caption pretraining of the predictor on patch words.
    Lm,
    /// Projectors and latent token against a frozen predictor.
    Align,
    /// Predictor and input projector on unmasked images.
    Sft,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Lm => Stage::Lm,
            StageArg::Align => Stage::Align,
            StageArg::Sft => Stage::Sft,
        }
    }
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Negative control: corrupt a backward rule.
    #[arg(long, hide = true)]
    fault: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Comma-separated checks: mask, mask_oracle, sampler, leakage, lambda, checkpoint, all.
    #[arg(long, default_value = "all")]
    checks: String,
    /// Negative control: use the tampered attention-mask builder.
    #[arg(long, hide = true)]
    tamper_mask: bool,
}

enum Failure {
    Usage(String),
    Checks(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn parse_interval(s: &str) -> Result<Interval, String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(Interval::new(lo, hi))
}

fn read_config(path: Option<&Path>) -> Result<Value, Failure> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, Failure> {
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("config: {e}")))
}

fn print_resolved<T: Serialize>(cfg: &T) -> Outcome {
    eprintln!("resolved config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Outcome {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn mask_sample(cli: &Cli, a: &MaskSampleArgs) -> Outcome {
    let mut cfg: SamplerConfig = from_value(read_config(cli.config.as_deref())?)?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(i) = a.target_scale {
        cfg.target_scale = i;
    }
    if let Some(i) = a.context_scale {
        cfg.context_scale = i;
    }
    if let Some(i) = a.aspect {
        cfg.target_aspect = i;
    }
    if a.no_overlap {
        cfg.allow_overlap = false;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let grid = PatchGrid::new(a.rows, a.cols).map_err(|e| Failure::Usage(e.to_string()))?;
    print_resolved(&serde_json::json!({ "grid": grid, "sampler": cfg }))?;
    let spec = sample_mask(grid, &cfg, &mut rng_for(cfg.seed, Stream::Mask, 0)).map_err(Error::from)?;
    let mut json = serde_json::to_vec_pretty(&spec)?;
    json.push(b'\n');
    write_output(cli.out.as_deref(), &json)
}

fn mask_attn(cli: &Cli, a: &MaskAttnArgs) -> Outcome {
    let text = fs::read_to_string(&a.spec).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", a.spec.display())))?;
    let spec: MaskSpec = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.spec.display())))?;
    let variant = AttnVariant {
        tgt_cross_block: a.tgt_cross_block,
        text_sees_targets: !a.no_text_sees_targets,
    };
    print_resolved(&serde_json::json!({ "variant": variant, "caption_len": a.caption_len }))?;
    let mask = build_mask(&roles_for(&spec, a.caption_len), variant).map_err(Error::from)?;
    let format = match a.format {
        Format::Text => DumpFormat::Text,
        Format::Pgm => DumpFormat::Pgm,
    };
    write_output(cli.out.as_deref(), &dump_mask(&mask, format))
}

fn data_gen(cli: &Cli, a: &DataGenArgs) -> Outcome {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let grid = PatchGrid::new(a.rows, a.cols).map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    print_resolved(&serde_json::json!({ "seed": seed, "n": a.n, "grid": grid, "out": dir }))?;
    let samples = generate(seed, a.n, grid, SyntheticVocab::default())?;
    fs::create_dir_all(&dir)?;
    let pixels: Vec<_> = samples.iter().map(|s| s.pixels.clone()).collect();
    write_embedding_file(&EmbeddingFile::from_images(&pixels).map_err(Error::from)?, &dir.join("pixels.jvem")).map_err(Error::from)?;
    let mut captions = BufWriter::new(File::create(dir.join("captions.jsonl"))?);
    for s in &samples {
        serde_json::to_writer(&mut captions, s)?;
        captions.write_all(b"\n")?;
    }
    captions.flush()?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let stage = Stage::from(a.stage);
    let raw = read_config(cli.config.as_deref())?;
    let has_model = raw.get("model").is_some();
    let mut job: TrainJob = from_value(raw)?;
    job.run.train.stage = stage;
    if let Some(s) = cli.seed {
        job.run.train.seed = s;
    }
    if stage == Stage::Sft && a.init.is_none() {
        return Err(Failure::Usage("train sft needs --init with an align checkpoint".into()));
    }
    let model = match &a.init {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if !has_model {
                job.run.model = ckpt.header.config.clone();
            }
            if ckpt.header.config != job.run.model {
                return Err(Error::CheckpointMismatch("config model section differs from the checkpoint".into()).into());
            }
            ckpt.into_model()?
        }
        None => Model::new(job.run.model.clone())?,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{stage:?}").to_lowercase()));
    print_resolved(&job)?;
    let data = job.data.build(job.run.model.grid)?;
    let (_, reports) = run_stage(&job.run, model, &data, &out)?;
    let last = reports.last().map_or(f64::NAN, |r| r.total);
    println!("{} steps, final total loss {last:.6}, outputs in {}", reports.len(), out.display());
    Ok(())
}

fn run_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Outcome {
    let mut cfg: GradcheckConfig = from_value(read_config(cli.config.as_deref())?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    print_resolved(&cfg)?;
    let report = gradcheck(&cfg, a.fault.then_some(GradFault::GeluDerivative))?;
    for c in &report.cases {
        println!(
            "{} {:?}: max relative error {:.3e} over {} coordinates (worst {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.distance,
            c.max_rel_error,
            c.coordinates,
            c.worst_param
        );
    }
    if let Some(out) = &cli.out {
        fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    }
    match report.pass() {
        true => Ok(()),
        false => Err(Failure::Checks(format!("max relative error {:.3e} >= {:.0e}", report.max_rel_error(), report.tolerance))),
    }
}

fn run_verify(cli: &Cli, a: &VerifyArgs) -> Outcome {
    let mut cfg: VerifyConfig = from_value(read_config(cli.config.as_deref())?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.tamper_mask |= a.tamper_mask;
    let checks = parse_check_filter(&a.checks).map_err(|e| Failure::Usage(e.to_string()))?;
    print_resolved(&serde_json::json!({ "verify": cfg, "checks": checks }))?;
    let results = verify(&cfg, &checks)?;
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.check, r.detail);
    }
    if let Some(out) = &cli.out {
        fs::write(out, serde_json::to_vec_pretty(&results)?)?;
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    match failed {
        0 => Ok(()),
        n => Err(Failure::Checks(format!("{n} of {} checks failed", results.len()))),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::Numerics(_) => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_CHECK_FAILED,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Mask(MaskCommand::Sample(a)) => mask_sample(&cli, a),
        Command::Mask(MaskCommand::Attn(a)) => mask_attn(&cli, a),
        Command::Data(DataCommand::Gen(a)) => data_gen(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Gradcheck(a) => run_gradcheck(&cli, a),
        Command::Verify(a) => run_verify(&cli, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Checks(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
