use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cxr_core::attention::DecodeMode;
use cxr_core::image::preprocess;
use cxr_core::synth::SynthConfig;
use cxr::checkpoint::Checkpoint;
use cxr::config::RunConfig;
use cxr::dataset::{read_png, write_synthetic, Dataset, Split};
use cxr::evaluate::{evaluate, majority_report, score_files, DISPLAY_SCALE};
use cxr::review::ReviewService;
use cxr::training::{beam_config, beam_reports, prepare, train_run, RunOptions};
use cxr::viz::{trace_image, write_overlays};

#[derive(Parser)]
#[command(name = "cxr", about = "Chest X-ray report generation: data, training, evaluation and review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image/report corpus.
    SynthData(SynthArgs),
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Print beam-search reports for images.
    Generate(GenerateArgs),
    /// Score a checkpoint on a split, or score candidate/reference JSONL files.
    Eval(EvalArgs),
    /// Write per-word attention overlays for one image.
    Viz(VizArgs),
    /// Run the blind review service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated finding labels.
    #[arg(long, default_value = "effusion,enlarged_heart,increased_markings")]
    findings: String,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
    /// Train, validation and test ratios.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key = value file applied over the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    resume: bool,
    /// Skip the per-epoch validation CIDEr.
    #[arg(long)]
    no_val_cider: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSONL lines `{"id", "caption"}`.
    #[arg(long, requires = "references", conflicts_with = "checkpoint")]
    candidates: Option<PathBuf>,
    /// JSONL lines `{"id", "references": [...]}`.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Multiply scores by the display scale (labelled in the output).
    #[arg(long)]
    scale10: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trace greedy decoding instead of the top beam.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

fn ratios(s: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().context("split ratios")?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("expected three comma-separated ratios, got {s:?}"),
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let labels: Vec<&str> = a.findings.split(',').map(str::trim).filter(|l| !l.is_empty()).collect();
    let cfg = SynthConfig::from_labels(a.n, &labels, a.image_size, a.noise)?;
    let ds = write_synthetic(&a.out, &cfg, a.seed, ratios(&a.split)?)?;
    let count = |s| ds.split(s).len();
    eprintln!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        ds.records().len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::desk();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        cfg.apply(&text)?;
    }
    cfg.apply(&a.overrides.join("\n"))?;
    let opts = RunOptions {
        resume: a.resume,
        val_cider: !a.no_val_cider,
        stop_after: None,
        verbose: true,
    };
    let summary = train_run(&a.data, &a.out, &cfg, &opts)?;
    print_json(&summary)
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = beam_config(&ckpt.run_config());
    if let Some(w) = a.beam_width {
        cfg.beam_width = w;
        cfg.n_best = w;
    }
    let input = ckpt.model().config.encoder.input_size;
    let mut out = Vec::new();
    for path in &a.image {
        let img = preprocess(&read_png(path)?, input)?;
        let reports = beam_reports(ckpt.model(), &ckpt.vocab, &img, &cfg)?;
        out.push(serde_json::json!({ "image": path, "reports": reports }));
    }
    print_json(&out)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    if let (Some(c), Some(r)) = (&a.candidates, &a.references) {
        return print_json(&score_files(c, r, a.scale10)?);
    }
    let (Some(ckpt_path), Some(data)) = (&a.checkpoint, &a.data) else {
        bail!("give either --checkpoint with --data, or --candidates with --references");
    };
    let ckpt = Checkpoint::load(ckpt_path)?;
    let ds = Dataset::load(data)?;
    let split: Split = a.split.parse()?;
    let samples = prepare(&ds, &ds.split(split), &ckpt.vocab, ckpt.model().config.encoder.input_size)?;
    let baseline = majority_report(ds.split(Split::Train).iter().map(|r| r.report.as_str())).unwrap_or_default();
    let mut report = evaluate(ckpt.model(), &ckpt.vocab, &samples, &beam_config(&ckpt.run_config()), &baseline)?;
    let scale = if a.scale10 { DISPLAY_SCALE } else { 1.0 };
    if a.scale10 {
        for img in &mut report.images {
            img.scores.iter_mut().for_each(|s| *s *= scale);
            img.best *= scale;
        }
        report.mean_best *= scale;
        report.mean_rank1 *= scale;
        report.baseline_mean *= scale;
    }
    print_json(&serde_json::json!({ "scale": scale, "split": a.split, "report": report }))
}

fn viz(a: VizArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let base = read_png(&a.image)?;
    let mode = match a.greedy {
        true => DecodeMode::Greedy { max_len: ckpt.trainer.config.max_len },
        false => DecodeMode::Beam(beam_config(&ckpt.run_config())),
    };
    let trace = trace_image(ckpt.model(), &ckpt.vocab, &base, mode)?;
    let files = write_overlays(&trace, &base, &a.out)?;
    eprintln!("{}: {} overlays in {}", trace.words.join(" "), files.len(), a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let service = Arc::new(ReviewService::open(&a.data_dir)?);
    let addr = SocketAddr::new(a.host, a.port);
    eprintln!("serving {} on http://{addr}", service.data_dir().display());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(cxr::review::serve(service, addr))?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::SynthData(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz(a),
        Command::Serve(a) => serve(a),
    }
}
