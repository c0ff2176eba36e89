use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use plainseg::eval::{benchmark, cost_report, predict_scores};
use plainseg::io::{
    all_stages, dump_feature, generate_dataset, images_to_tensor, Checkpoint, DumpStage, Image8, LoadMode, RunConfig,
    SyntheticSpec,
};
use plainseg::pipeline::{evaluate, fit, load_splits};
use plainseg::{Error, Segmenter32, Tensor32, Trainer32};

#[derive(Parser)]
#[command(name = "plainseg", version, about = "Segmentation heads over plain Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Run configuration file.
    config: PathBuf,
    /// Load weights from this checkpoint (strict).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for parameter initialization.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes `model.pseg` and `metrics.tsv` to the output directory.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Initialize from a checkpoint, skipping missing or mismatched records.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from a checkpoint written by `train`, including optimizer state.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Stop once validation mIoU reaches this value.
        #[arg(long)]
        target_miou: Option<f64>,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Report mIoU on the validation split.
    Eval(ModelArgs),
    /// Print parameter and multiply-accumulate counts.
    Count {
        config: PathBuf,
        /// Input height; defaults to the encoder image size.
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Median forward latency on a blank image.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Write channel-mean maps of refiner features as PGM files.
    DumpFeatures {
        #[command(flatten)]
        model: ModelArgs,
        /// RGB image (binary PPM) sized like the encoder input.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "dumps")]
        out: PathBuf,
        /// pre-refine, post-refine or group-<i>; every stage when omitted.
        #[arg(long = "stage")]
        stages: Vec<String>,
    },
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Take the spec from a run configuration's `[data.synthetic]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        min_shapes: Option<usize>,
        #[arg(long)]
        max_shapes: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

fn build_model(cfg: &RunConfig, checkpoint: Option<&Path>, seed: u64) -> anyhow::Result<Segmenter32> {
    let mut model = Segmenter32::new(&cfg.model, seed)?;
    if let Some(p) = checkpoint {
        Checkpoint::load(p)?
            .load_into(&mut model.store, LoadMode::Strict)
            .with_context(|| format!("loading {}", p.display()))?;
    }
    Ok(model)
}

fn train(
    config: &Path,
    out: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    target: Option<f64>,
    seed: u64,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let (train, val) = load_splits(&cfg)?;
    let mut model = Segmenter32::new(&cfg.model, seed)?;
    if let Some(p) = init {
        let r = Checkpoint::load(p)?.load_into(&mut model.store, LoadMode::NonStrict)?;
        eprintln!("init: loaded {} tensors, {} missing, {} skipped", r.loaded.len(), r.missing.len(), r.skipped.len());
    }
    let mut trainer = Trainer32::new(model, cfg.train.clone())?;
    if let Some(p) = resume {
        let ck = Checkpoint::load(p)?;
        ck.load_into(&mut trainer.model.store, LoadMode::Strict)?;
        trainer.iter = ck.load_training_state(&trainer.model.store, &mut trainer.optimizer)?;
    }
    std::fs::create_dir_all(out)?;
    let log = BufWriter::new(File::create(out.join("metrics.tsv"))?);
    let summary = fit(&mut trainer, &cfg, &train, &val, target, log)?;
    let mut ck = Checkpoint::from_store(&trainer.model.store);
    ck.add_training_state(&trainer.model.store, &trainer.optimizer, trainer.iter);
    ck.save(out.join("model.pseg"))?;
    println!("steps={}", summary.steps);
    if let Some(l) = summary.losses.last() {
        println!("final_loss={l:.6}");
    }
    if let Some(v) = summary.validations.last() {
        println!("val_miou={:.4}", v.miou);
    }
    Ok(())
}

fn eval(args: &ModelArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let model = build_model(&cfg, args.checkpoint.as_deref(), args.init_seed)?;
    let (_, val) = load_splits(&cfg)?;
    if val.is_empty() {
        bail!(Error::Config("no validation images: set data.val_dir or data.val_count".into()));
    }
    let cm = evaluate(&model, &val, cfg.eval.crop, cfg.eval.stride)?;
    for (c, iou) in cm.iou().iter().enumerate() {
        match iou {
            Some(v) => println!("iou_{c}={v:.4}"),
            None => println!("iou_{c}=absent"),
        }
    }
    if let Some(acc) = cm.pixel_accuracy() {
        println!("pixel_accuracy={acc:.4}");
    }
    println!("miou={:.4}", cm.miou()?);
    Ok(())
}

fn count(config: &Path, height: Option<usize>, width: Option<usize>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let s = cfg.model.encoder.img_size;
    let report = cost_report(&cfg.model, height.unwrap_or(s), width.unwrap_or(s))?;
    println!("{report}");
    print!("{}", report.to_key_values());
    Ok(())
}

fn bench(args: &ModelArgs, warmup: usize, repeats: usize) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let model = build_model(&cfg, args.checkpoint.as_deref(), args.init_seed)?;
    let s = cfg.model.encoder.img_size;
    let x = Tensor32::zeros([1, 3, s, s]);
    let r = benchmark(warmup, repeats, || predict_scores(&model, &x).map(|_| ()))?;
    println!("input={s}x{s}");
    println!("repeats={repeats}");
    println!("median_ms={:.3}", r.median_ms);
    println!("hardware={}", r.hardware);
    Ok(())
}

fn dump(args: &ModelArgs, image: &Path, out: &Path, stages: &[String]) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let model = build_model(&cfg, args.checkpoint.as_deref(), args.init_seed)?;
    let stages = if stages.is_empty() {
        all_stages(&model)
    } else {
        stages.iter().map(|s| s.parse::<DumpStage>()).collect::<Result<_, _>>()?
    };
    let img = Image8::load(image).with_context(|| format!("reading {}", image.display()))?;
    let x = images_to_tensor::<f32>(&[&img])?;
    std::fs::create_dir_all(out)?;
    for st in stages {
        let path = out.join(format!("{st}.pgm"));
        let map = dump_feature(&model, &x, st)?;
        map.save(&path)?;
        println!("{} {}x{}", path.display(), map.width, map.height);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    count: Option<usize>,
    size: Option<usize>,
    classes: Option<usize>,
    min_shapes: Option<usize>,
    max_shapes: Option<usize>,
    noise: Option<f64>,
) -> anyhow::Result<()> {
    let mut spec = match config {
        Some(p) => RunConfig::load(p)?
            .data
            .synthetic
            .ok_or_else(|| Error::Config(format!("{}: no [data.synthetic] section", p.display())))?,
        None => SyntheticSpec::default(),
    };
    spec.seed = seed.unwrap_or(spec.seed);
    spec.count = count.unwrap_or(spec.count);
    spec.size = size.unwrap_or(spec.size);
    spec.num_classes = classes.unwrap_or(spec.num_classes);
    spec.min_shapes = min_shapes.unwrap_or(spec.min_shapes);
    spec.max_shapes = max_shapes.unwrap_or(spec.max_shapes);
    spec.noise = noise.unwrap_or(spec.noise);
    generate_dataset(&spec, out)?;
    println!("wrote {} pairs to {}", spec.count, out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, init, resume, target_miou, init_seed } => {
            train(&config, &out, init.as_deref(), resume.as_deref(), target_miou, init_seed)
        }
        Command::Eval(args) => eval(&args),
        Command::Count { config, height, width } => count(&config, height, width),
        Command::Bench { model, warmup, repeats } => bench(&model, warmup, repeats),
        Command::DumpFeatures { model, image, out, stages } => dump(&model, &image, &out, &stages),
        Command::GenData { out, config, seed, count, size, classes, min_shapes, max_shapes, noise } => {
            gen_data(&out, config.as_deref(), seed, count, size, classes, min_shapes, max_shapes, noise)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
