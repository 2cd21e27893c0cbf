use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use facedistract::cam::{grad_cam, heatmap_to_pgm};
use facedistract::classifier::{MiniNet, MiniNetConfig};
use facedistract::eval::{
    attribute_agreement, attribute_names, ids_rate, read_records, reid_rate, Metric, VerificationConfig,
};
use facedistract::fixtures::{make_fixtures, stream_rng, FixtureCounts, InputItem, FRAME};
use facedistract::geometry::{anonymize_geometry_with, svg_overlay, BackgroundRegion, GeometryOptions, PoseAngles};
use facedistract::ifa::{distract, DistractionConfig, DistractionMode};
use facedistract::losses::{evaluate, LossManifest};
use facedistract::pipeline::{
    ablate, ablation_csv, item_seed, run_pipeline, sweep_csv, sweep_k, write_atomic, RunConfig, RunData, RunPaths,
};
use facedistract::sampler::{read_gallery, read_jsonl, sample_appearance, CandidateFilter, DpConfig, UtilityKind};
use facedistract::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "facedistract",
    version,
    about = "Identity attention distraction and delegate sampling for face anonymization"
)]
struct Cli {
    /// Seed; overrides the config file's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded fixture set and a matching config.json.
    Fixtures(FixturesArgs),
    /// Grad-CAM heatmap for one image.
    Cam(CamArgs),
    /// Distract the top-K classes and recast the identity feature.
    Ifa(IfaArgs),
    /// Sample appearance delegates.
    Sample(SampleArgs),
    /// Sample delegate structures and recover pose and expression.
    Gsa(GsaArgs),
    /// Evaluate a loss manifest.
    Loss(LossArgs),
    /// ReID / IDS rates and attribute agreement.
    Eval(EvalArgs),
    /// Full pipeline over the configured inputs.
    Run,
    /// Distraction statistics for a range of K.
    SweepK(SweepArgs),
    /// Stage removal and utility ablations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = FixtureCounts::default().identities)]
    identities: usize,
    #[arg(long, default_value_t = FixtureCounts::default().references)]
    references: usize,
    #[arg(long, default_value_t = FixtureCounts::default().gallery_per_id)]
    gallery_per_id: usize,
    #[arg(long, default_value_t = FixtureCounts::default().embedding_dim)]
    dim: usize,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Class to explain; defaults to the top prediction.
    #[arg(long)]
    class: Option<usize>,
    /// Heatmap tensor output.
    #[arg(long)]
    out: PathBuf,
    /// Optional greyscale preview.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct IfaArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Comma-separated per-class weights.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value = "paper-sum")]
    mode: DistractionMode,
    #[arg(long, default_value_t = 0)]
    bottom_j: usize,
    #[arg(long, default_value_t = 1.0)]
    bottom_weight: f64,
    /// Distracted activation output.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report path; printed to stdout otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DelegateArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Only this input; all inputs otherwise.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    sensitivity: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    exclude_same_id: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    delegate: DelegateArgs,
    #[arg(long, default_value = "appearance")]
    utility: UtilityKind,
}

#[derive(Args)]
struct GsaArgs {
    #[command(flatten)]
    delegate: DelegateArgs,
    #[arg(long, default_value = "geometry")]
    utility: UtilityKind,
    /// Overlay of original, aligned delegate and output (single item only).
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value = "cosine")]
    metric: Metric,
    #[arg(long, default_value_t = 0.30)]
    threshold: f64,
    /// Evaluate all five published threshold settings.
    #[arg(long)]
    paper_thresholds: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [DistractionMode::PaperSum, DistractionMode::ExactJoint])]
    modes: Vec<DistractionMode>,
    /// CSV output; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fixtures(cli: &Cli, args: &FixturesArgs) -> Result<()> {
    let counts = FixtureCounts {
        identities: args.identities,
        references: args.references,
        gallery_per_id: args.gallery_per_id,
        embedding_dim: args.dim,
        ..FixtureCounts::default()
    };
    let seed = cli.seed.unwrap_or(0);
    let summary = make_fixtures(&args.out, seed, &counts, &MiniNetConfig::default())?;
    let cfg = RunConfig {
        seed,
        paths: RunPaths::default(),
        ..RunConfig::default()
    };
    let config_path = args.out.join("config.json");
    write_atomic(&config_path, (serde_json::to_string_pretty(&cfg)? + "\n").as_bytes())?;
    info!("wrote fixtures and {}", config_path.display());
    print_json(&summary)
}

fn cam(args: &CamArgs) -> Result<()> {
    let net = MiniNet::load(&args.net)?;
    let (a, pred) = net.forward(&Tensor::read_adt(&args.image)?)?;
    let class = args.class.unwrap_or(pred.top_k[0]);
    let result = grad_cam(&net, &a, class)?;
    result.heatmap.write_adt(&args.out)?;
    if let Some(pgm) = &args.pgm {
        fs::write(pgm, heatmap_to_pgm(&result.heatmap))?;
    }
    #[derive(Serialize)]
    struct CamReport<'a> {
        class_index: usize,
        logit: f32,
        alpha: &'a [f64],
        top_k: &'a [usize],
    }
    print_json(&CamReport {
        class_index: class,
        logit: pred.logits[class],
        alpha: &result.alpha,
        top_k: pred.top(5),
    })
}

fn ifa(args: &IfaArgs) -> Result<()> {
    let net = MiniNet::load(&args.net)?;
    let (a, pred) = net.forward(&Tensor::read_adt(&args.image)?)?;
    let cfg = DistractionConfig {
        k: args.k,
        weights: args.weights.clone(),
        mode: args.mode,
        bottom_j: args.bottom_j,
        bottom_weight: args.bottom_weight,
    };
    let result = distract(&net, &a, &pred, &cfg)?;
    result.a_hat.maps().write_adt(&args.out)?;

    #[derive(Serialize)]
    struct ClassRow {
        class_index: usize,
        weight: f64,
        skipped: bool,
        residual: f64,
        normalized_residual: f64,
    }
    #[derive(Serialize)]
    struct IfaReport {
        mode: DistractionMode,
        classes: Vec<ClassRow>,
        diversity: Vec<ClassRow>,
        logits_before: Vec<f32>,
        logits_after: Vec<f32>,
        recast_feature: Vec<f32>,
    }
    let rows = |cs: &[facedistract::ifa::ClassDistraction]| {
        cs.iter()
            .map(|c| ClassRow {
                class_index: c.class_index,
                weight: c.weight,
                skipped: c.skipped,
                residual: c.residual,
                normalized_residual: c.normalized_residual(),
            })
            .collect()
    };
    let report = IfaReport {
        mode: result.mode,
        classes: rows(&result.classes),
        diversity: rows(&result.diversity),
        logits_before: result.logits_before.clone(),
        logits_after: result.logits_after.clone(),
        recast_feature: result.recast_feature.clone(),
    };
    match &args.report {
        Some(path) => write_atomic(path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn selected_inputs(args: &DelegateArgs) -> Result<Vec<(usize, InputItem)>> {
    let inputs: Vec<InputItem> = read_jsonl(&args.inputs)?;
    match args.index {
        Some(i) if i >= inputs.len() => bail!("index {i} out of range ({} inputs)", inputs.len()),
        Some(i) => Ok(vec![(i, inputs[i].clone())]),
        None => Ok(inputs.into_iter().enumerate().collect()),
    }
}

fn dp_for(cli: &Cli, args: &DelegateArgs, index: usize) -> DpConfig {
    DpConfig {
        epsilon: args.epsilon,
        sensitivity: args.sensitivity,
        seed: item_seed(cli.seed.unwrap_or(0), index),
    }
}

// Stream numbers match the pipeline so standalone draws reproduce a run.
const VAA_STREAM: u64 = 0;
const GSA_STREAM: u64 = 1;

fn sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let gallery = read_gallery(&args.delegate.gallery)?;
    for (index, input) in selected_inputs(&args.delegate)? {
        let dp = dp_for(cli, &args.delegate, index);
        let filter = CandidateFilter {
            exclude_id: args.delegate.exclude_same_id.then(|| input.id.clone()),
            pose_bucket: None,
        };
        let mut rng = stream_rng(dp.seed, VAA_STREAM);
        let audit = sample_appearance(
            &input.embedding,
            &gallery,
            args.delegate.k,
            &filter,
            args.utility,
            &dp,
            &mut rng,
        )
        .with_context(|| format!("input {index} ({})", input.id))?;
        println!(
            "{}",
            serde_json::json!({ "index": index, "id": input.id, "audit": audit })
        );
    }
    Ok(())
}

fn gsa(cli: &Cli, args: &GsaArgs) -> Result<()> {
    let gallery = read_gallery(&args.delegate.gallery)?;
    let inputs = selected_inputs(&args.delegate)?;
    if args.svg.is_some() && inputs.len() != 1 {
        bail!("--svg needs --index");
    }
    for (index, input) in inputs {
        let dp = dp_for(cli, &args.delegate, index);
        let opts = GeometryOptions {
            query_pose: input.pose.map(|[y, p, r]| PoseAngles::new(y, p, r)),
            exclude_id: args.delegate.exclude_same_id.then(|| input.id.clone()),
            utility: Some(args.utility),
        };
        let mut rng = stream_rng(dp.seed, GSA_STREAM);
        let background = BackgroundRegion::outside_face(&input.landmarks);
        let result = anonymize_geometry_with(
            &input.landmarks,
            &gallery,
            args.delegate.k,
            &dp,
            background,
            &opts,
            &mut rng,
        )
        .with_context(|| format!("input {index} ({})", input.id))?;
        if let Some(svg) = &args.svg {
            let layers = [
                ("original", &input.landmarks),
                ("aligned-delegate", &result.aligned_delegate),
                ("anonymized", &result.input.structure),
            ];
            fs::write(svg, svg_overlay(FRAME, FRAME, &layers))?;
        }
        println!(
            "{}",
            serde_json::json!({ "index": index, "id": input.id, "result": result })
        );
    }
    Ok(())
}

fn loss(args: &LossArgs) -> Result<()> {
    let (manifest, base) = LossManifest::load(&args.manifest)?;
    let weights = manifest.weights();
    let breakdown = evaluate(&manifest.resolve(&base)?, &weights)?;
    println!("mode: {:?}", breakdown.mode);
    if let Some(adv) = breakdown.adversarial {
        println!("adversarial generator: {:.6}", adv.generator);
        println!("adversarial discriminator: {:.6}", adv.discriminator);
    }
    let names = [
        "adversarial",
        "feature-matching",
        "perceptual",
        "appearance",
        "identity",
        "background",
    ];
    for (i, ((name, value), lambda)) in names
        .iter()
        .zip(&breakdown.components)
        .zip(weights.lambdas())
        .enumerate()
    {
        match value {
            Some(v) => println!("L{} {name:<17} {v:>12.6}  (lambda {lambda})", i + 1),
            None => println!("L{} {name:<17} {:>12}", i + 1, "-"),
        }
    }
    match breakdown.total {
        Some(t) => println!("total {t:.6}"),
        None => println!("total - (not every component supplied)"),
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let gallery = read_gallery(&args.gallery)?;
    let configs = if args.paper_thresholds {
        VerificationConfig::standard_configs().to_vec()
    } else {
        vec![VerificationConfig {
            metric: args.metric,
            threshold: args.threshold,
        }]
    };
    println!(
        "{:<8} {:>9} {:>8} {:>8}  (ReID, IDS)",
        "metric", "threshold", "ReID%", "IDS%"
    );
    for cfg in &configs {
        let reid = reid_rate(&records, &gallery, cfg)?;
        let ids = ids_rate(&records, &gallery, cfg)?;
        println!(
            "{:<8} {:>9.2} {:>8.2} {:>8.2}  ({:.2}, {:.2})",
            cfg.metric.to_string(),
            cfg.threshold,
            reid.rate,
            ids.rate,
            reid.rate,
            ids.rate
        );
        if !reid.skipped.is_empty() {
            println!("  skipped records without gallery identity: {}", reid.skipped.len());
        }
    }
    let names = attribute_names(&records);
    if !names.is_empty() {
        let report = attribute_agreement(&records, &names);
        println!("attribute agreement:");
        for (name, pct) in &report.agreement {
            println!("  {name:<12} {pct:>7.2}%");
        }
        for (name, n) in &report.excluded {
            println!("  {name:<12} missing on {n} records");
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let report = run_pipeline(&cfg, cli.jobs)?;
    print_json(&report)
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    if args.k_min == 0 || args.k_min > args.k_max {
        bail!("invalid K range {}..={}", args.k_min, args.k_max);
    }
    let data = RunData::load(&cfg.paths)?;
    let ks: Vec<usize> = (args.k_min..=args.k_max).collect();
    let rows = sweep_k(&data, &cfg, &ks, &args.modes, cli.jobs)?;
    emit(&sweep_csv(&rows), args.out.as_deref())
}

fn ablation(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = RunData::load(&cfg.paths)?;
    let rows = ablate(&data, &cfg, cli.jobs)?;
    emit(&ablation_csv(&rows), args.out.as_deref())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Fixtures(args) => fixtures(&cli, args),
        Command::Cam(args) => cam(args),
        Command::Ifa(args) => ifa(args),
        Command::Sample(args) => sample(&cli, args),
        Command::Gsa(args) => gsa(&cli, args),
        Command::Loss(args) => loss(args),
        Command::Eval(args) => eval(args),
        Command::Run => run(&cli),
        Command::SweepK(args) => sweep(&cli, args),
        Command::Ablate(args) => ablation(&cli, args),
    }
}
