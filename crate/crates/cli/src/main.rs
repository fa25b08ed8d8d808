use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use labelfusion::io::{read_affine, read_labels, read_volume};
use labelfusion::phantom::{generate_cohort, leave_one_out, PhantomSpec};
use labelfusion::pipeline::library::{load_atlases, read_manifest, run_pipeline};
use labelfusion::pipeline::{Method, PipelineConfig};
use labelfusion::similarity::{rank_atlases, SimilarityMetric};
use labelfusion::volume::{dice, resample, AffineTransform, FieldThenAffine, Interpolation};

/// Multi-atlas label fusion.
#[derive(Parser, Debug)]
#[command(name = "labelfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank library atlases by similarity to a target after affine alignment.
    Rank(RankArgs),
    /// Segment a target with one fusion method.
    Fuse(FuseArgs),
    /// Generate synthetic cohorts or run leave-one-out on them.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Dice overlap between an automatic and a reference segmentation.
    Eval(EvalArgs),
    /// Geometry and value summary of a volume.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    target: PathBuf,
    /// Target space to common space; identity when omitted.
    #[arg(long)]
    target_affine: Option<PathBuf>,
    #[arg(long)]
    library: PathBuf,
    #[arg(long, default_value = "mi")]
    metric: SimilarityMetric,
    /// Only print the best `n`.
    #[arg(long)]
    n: Option<usize>,
    /// Restrict the comparison to this label map (target space).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// `key = value` file with pipeline settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    target_affine: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Any other setting, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum PhantomCommand {
    /// Write a cohort with per-target manifests and displacement fields.
    Generate(GenerateArgs),
    /// Leave-one-out evaluation on a generated cohort.
    Loo(LooArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Phantom spec (`key = value`); defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 11)]
    n: usize,
    /// Subjects that get fields and a manifest, e.g. `0,3`; all by default.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<usize>,
}

#[derive(Args, Debug)]
struct LooArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    n: usize,
    /// Registration residual in mm RMS; the phantom spec's value when omitted.
    #[arg(long)]
    residual: Option<f64>,
    /// Comma-separated methods or `all`.
    #[arg(long, default_value = "mv,staple,crf,patch,combined")]
    methods: String,
    /// Pipeline settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-fold Dice CSV.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Summary CSV; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    auto: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args, Debug)]
struct InfoArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version land here too, with exit code 0
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rank(a) => rank(a),
        Command::Fuse(a) => fuse(a),
        Command::Phantom(PhantomCommand::Generate(a)) => generate(a),
        Command::Phantom(PhantomCommand::Loo(a)) => loo(a),
        Command::Eval(a) => eval(a),
        Command::Info(a) => info(a),
    }
}

fn rank(a: RankArgs) -> Result<()> {
    let target = read_volume(&a.target)?;
    let target_affine = match &a.target_affine {
        Some(p) => read_affine(p)?,
        None => AffineTransform::identity(),
    };
    let common = *target.geometry();
    let atlases = load_atlases(&read_manifest(&a.library)?, &common)?;
    let mask = a.mask.as_deref().map(read_labels).transpose()?;
    // compare in the target's own grid: atlas native <- common <- target native
    let to_common = target_affine.inverse().context("target affine is not invertible")?;
    let aligned = atlases
        .iter()
        .map(|at| {
            let composed = at.affine.compose(&to_common);
            resample(&at.intensity, &FieldThenAffine { field: None, affine: &composed }, &common, Interpolation::Trilinear, 0.0)
        })
        .collect::<labelfusion::Result<Vec<_>>>()?;
    let list: Vec<(String, &labelfusion::volume::Volume)> =
        atlases.iter().zip(&aligned).map(|(at, v)| (at.id.clone(), v)).collect();
    let ranked = rank_atlases(&target, &list, a.metric, mask.as_ref())?;
    println!("rank,id,score");
    for (i, (id, score)) in ranked.entries.iter().take(a.n.unwrap_or(usize::MAX)).enumerate() {
        println!("{},{id},{score}", i + 1);
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    for (slot, v) in [
        (&mut cfg.target, a.target),
        (&mut cfg.target_affine, a.target_affine),
        (&mut cfg.library, a.library),
        (&mut cfg.truth, a.truth),
        (&mut cfg.output, a.output),
        (&mut cfg.metrics, a.metrics),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    for kv in &a.sets {
        let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got '{kv}'") };
        cfg.set(k.trim(), v.trim())?;
    }
    if cfg.output.is_none() && cfg.metrics.is_none() && cfg.truth.is_none() {
        bail!("nothing to do: give --output, --metrics or --truth");
    }
    let out = run_pipeline(&cfg)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    for r in out.results.iter().filter(|r| r.method == cfg.method) {
        if let Some(d) = r.dice {
            println!("{},{},{d:?}", r.roi, r.method);
        }
    }
    Ok(())
}

fn load_spec(path: Option<&Path>) -> Result<PhantomSpec> {
    Ok(match path {
        Some(p) => PhantomSpec::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => PhantomSpec::default(),
    })
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref())?;
    let cohort = generate_cohort(&spec, a.n)?;
    let targets: Vec<usize> = if a.targets.is_empty() { (0..a.n).collect() } else { a.targets };
    cohort.write(&a.out, &targets)?;
    println!("wrote {} subjects and {} manifests to {}", a.n, targets.len(), a.out.display());
    Ok(())
}

fn loo(a: LooArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref())?;
    let methods = Method::parse_list(&a.methods)?;
    let cfg = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    let cohort = generate_cohort(&spec, a.n)?;
    let res = leave_one_out(&cohort, &cfg, &methods, a.residual.unwrap_or(spec.residual_mm))?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(p) = &a.folds {
        std::fs::write(p, res.folds_csv())?;
    }
    let summary = res.summary_csv();
    if let Some(p) = &a.out {
        std::fs::write(p, &summary)?;
    }
    print!("{summary}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let auto = read_labels(&a.auto)?;
    let truth = read_labels(&a.truth)?;
    println!("dice,{:?}", dice(&auto, &truth)?);
    Ok(())
}

fn info(a: InfoArgs) -> Result<()> {
    let v = read_volume(&a.path)?;
    let g = v.geometry();
    let d = v.data();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    println!("dims: {} x {} x {}", g.dims[0], g.dims[1], g.dims[2]);
    println!("spacing: {} x {} x {}", g.spacing[0], g.spacing[1], g.spacing[2]);
    println!("origin: {} {} {}", g.origin[0], g.origin[1], g.origin[2]);
    println!("range: {lo} .. {hi}");
    println!("mean: {mean}");
    println!("nonzero: {}", d.iter().filter(|&&x| x != 0.0).count());
    Ok(())
}
