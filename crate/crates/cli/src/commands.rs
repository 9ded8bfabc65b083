//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use vitae_core::analysis::{attention_distance, model_report, render_report, report_jsonl};
use vitae_core::attention::{AttentionKind, AttnScale, MultiHeadAttention};
use vitae_core::cells::{NormalCell, RcBuild, ReductionCell, TokenGrid};
use vitae_core::checkpoint::Checkpoint;
use vitae_core::data::{read_cifar10, read_idx, synth::synth_dataset, AugmentOps, Dataset};
use vitae_core::mim::{inflate_kernels, pretrain_step, MimPipeline};
use vitae_core::model::{build, preset, Model, ModelConfig, PRESET_NAMES};
use vitae_core::rng::SplitMix64;
use vitae_core::tensor::{conv, grad_check, norm, ops, ConvSpec, Tape, Tensor};
use vitae_core::training::{evaluate, fit, AdamW, AdamWConfig, FitConfig};

use crate::exit::{CliError, CliResult};

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Auto,
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Args)]
pub struct ModelSelector {
    /// Built-in preset name.
    #[arg(long, value_parser = PRESET_NAMES.to_vec())]
    preset: Option<String>,
    /// Model config file (TOML); overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSelector {
    fn resolve(&self) -> Result<ModelConfig, CliError> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            return vitae_core::config::parse_config(&text)
                .map_err(|e| CliError::data(e.to_string()));
        }
        match &self.preset {
            Some(name) => Ok(preset(name)?),
            None => Err(CliError::usage("pass --preset or --config")),
        }
    }
}

struct LoadedData {
    train: Dataset<f32>,
    test: Option<Dataset<f32>>,
    name: &'static str,
}

fn detect_kind(dir: &Path) -> Result<DatasetKind, CliError> {
    if dir.join("train-images-idx3-ubyte").exists() || dir.join("t10k-images-idx3-ubyte").exists()
    {
        return Ok(DatasetKind::Mnist);
    }
    if dir.join("data_batch_1.bin").exists() || dir.join("test_batch.bin").exists() {
        return Ok(DatasetKind::Cifar10);
    }
    Err(CliError::data(format!(
        "no recognizable dataset in {} (expected MNIST idx files or CIFAR-10 .bin batches)",
        dir.display()
    )))
}

fn load_dataset(
    data: Option<&Path>,
    kind: DatasetKind,
    config: &ModelConfig,
    seed: u64,
) -> Result<LoadedData, CliError> {
    let kind = match (kind, data) {
        (DatasetKind::Auto, Some(dir)) => detect_kind(dir)?,
        (DatasetKind::Auto, None) | (DatasetKind::Synthetic, _) => DatasetKind::Synthetic,
        (k, _) => k,
    };
    match kind {
        DatasetKind::Synthetic => {
            let train = synth_dataset(2048, config.input_size, config.in_channels, config.num_classes.min(10), seed)?;
            let test = synth_dataset(512, config.input_size, config.in_channels, config.num_classes.min(10), seed ^ 0xFEED)?;
            Ok(LoadedData {
                train,
                test: Some(test),
                name: "synthetic",
            })
        }
        DatasetKind::Mnist => {
            let dir = data.ok_or_else(|| CliError::usage("--data DIR required for mnist"))?;
            let train = read_idx(
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
            )?;
            let test_img = dir.join("t10k-images-idx3-ubyte");
            let test = if test_img.exists() {
                Some(read_idx(test_img, dir.join("t10k-labels-idx1-ubyte"))?)
            } else {
                None
            };
            Ok(LoadedData {
                train,
                test,
                name: "mnist",
            })
        }
        DatasetKind::Cifar10 => {
            let dir = data.ok_or_else(|| CliError::usage("--data DIR required for cifar10"))?;
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if batches.is_empty() {
                return Err(CliError::data(format!(
                    "no data_batch_*.bin files in {}",
                    dir.display()
                )));
            }
            let train = read_cifar10(&batches)?;
            let test_path = dir.join("test_batch.bin");
            let test = if test_path.exists() {
                Some(read_cifar10(&[test_path])?)
            } else {
                None
            };
            Ok(LoadedData {
                train,
                test,
                name: "cifar10",
            })
        }
        DatasetKind::Auto => unreachable!(),
    }
}

/// Adapt the model config to the dataset (channel count, class count) and the
/// dataset to the model (zero-pad smaller images up to the input size).
fn reconcile(config: &mut ModelConfig, data: &mut LoadedData) -> Result<(), CliError> {
    config.in_channels = data.train.channels();
    config.num_classes = data.train.num_classes;
    let size = data.train.image_size();
    if size < config.input_size {
        data.train = data.train.pad_to(config.input_size)?;
        if let Some(t) = data.test.take() {
            data.test = Some(t.pad_to(config.input_size)?);
        }
    } else if size > config.input_size {
        return Err(CliError::data(format!(
            "dataset images are {size}px but the model expects {}px; pick a larger input_size",
            config.input_size
        )));
    }
    config.validate()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    model: ModelSelector,
    /// Dataset directory (omit with --dataset synthetic).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DatasetKind::Auto)]
    dataset: DatasetKind,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Base learning rate (anchored at batch 512 unless --no-lr-scaling).
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Use --lr as-is instead of scaling it linearly with the batch size.
    #[arg(long, default_value_t = false)]
    no_lr_scaling: bool,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    /// Geometric layer-wise learning-rate decay factor for finetuning
    /// (e.g. 0.75); off by default.
    #[arg(long)]
    layer_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random pad-crop (and horizontal flips for CIFAR) during training.
    #[arg(long, default_value_t = false)]
    augment: bool,
    /// Write the final weights here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the line-delimited training log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> CliResult {
    let mut config = args.model.resolve()?;
    let mut data = load_dataset(args.data.as_deref(), args.dataset, &config, args.seed)?;
    reconcile(&mut config, &mut data)?;
    eprintln!(
        "training on {} ({} train / {} test images, {} classes)",
        data.name,
        data.train.len(),
        data.test.as_ref().map_or(0, Dataset::len),
        config.num_classes
    );

    let mut model: Model<f32> = build(&config, args.seed)?;
    let augment = args.augment.then(|| AugmentOps {
        pad_crop: Some(2),
        hflip: if data.name == "cifar10" { 0.5 } else { 0.0 },
        normalize: None,
    });
    let fit_cfg = FitConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr_base: args.lr,
        lr_min: 1e-6,
        scale_lr: !args.no_lr_scaling,
        warmup_frac: 0.05,
        optim: AdamWConfig {
            weight_decay: args.weight_decay,
            ..Default::default()
        },
        seed: args.seed,
        augment,
        layer_decay: args.layer_decay,
        verbose: true,
    };
    let log = fit(&mut model, &data.train, data.test.as_ref(), &fit_cfg)?;

    if let Some(path) = &args.log {
        std::fs::write(path, log.to_jsonl()).map_err(CliError::from_io)?;
    }
    if let Some(path) = &args.out {
        Checkpoint::from_module(&model, 3).save(path)?;
        eprintln!("saved weights to {}", path.display());
    }
    if let Some(acc) = log.final_accuracy() {
        println!("final eval accuracy: {:.2}%", 100.0 * acc);
    } else {
        println!("final loss: {:.4}", log.final_loss().unwrap_or(f64::NAN));
    }
    Ok(())
}

impl CliError {
    fn from_io(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// pretrain-mim
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    model: ModelSelector,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DatasetKind::Auto)]
    dataset: DatasetKind,
    /// Fraction of tokens to mask.
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn pretrain(args: PretrainArgs) -> CliResult {
    let mut config = args.model.resolve()?;
    let mut data = load_dataset(args.data.as_deref(), args.dataset, &config, args.seed)?;
    reconcile(&mut config, &mut data)?;

    let mut pipeline: MimPipeline<f32> = MimPipeline::from_config(&config, 1, args.seed)?;
    let mut optim = AdamW::new(AdamWConfig {
        weight_decay: 0.05,
        ..Default::default()
    });
    let mut order_rng = SplitMix64::new(args.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut log_lines = String::new();

    for step in 0..args.steps {
        if cursor + args.batch > order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch = data.train.batch(&order[cursor..cursor + args.batch]);
        cursor += args.batch;

        let mut tape = Tape::recording();
        let loss = pretrain_step(
            &mut tape,
            &pipeline,
            &batch.images,
            args.ratio,
            args.seed ^ (step as u64).wrapping_mul(0x9E37_79B9),
            true,
        )?;
        let loss_val = loss.item() as f64;
        if !loss_val.is_finite() {
            return Err(CliError::numeric(format!(
                "non-finite reconstruction loss at step {step}"
            )));
        }
        tape.backward(&loss)?;
        optim.step_module(&mut pipeline, &tape, args.lr, None)?;
        log_lines.push_str(&format!("{{\"step\":{step},\"loss\":{loss_val:.6}}}\n"));
        if step % 50 == 0 || step + 1 == args.steps {
            eprintln!("step {step}: masked-pixel mse {loss_val:.5}");
        }
    }

    if let Some(path) = &args.log {
        std::fs::write(path, &log_lines).map_err(CliError::from_io)?;
    }
    if let Some(path) = &args.out {
        Checkpoint::from_module(&pipeline, 1).save(path)?;
        eprintln!("saved pretraining weights (1x1 PCM kernels) to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// inflate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct InflateArgs {
    /// Input checkpoint (must hold 1x1 PCM kernels).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output checkpoint with 3x3 kernels.
    #[arg(long = "out")]
    output: PathBuf,
}

pub fn inflate(args: InflateArgs) -> CliResult {
    let ckpt = Checkpoint::load(&args.input)?;
    let inflated = inflate_kernels(&ckpt)?;
    inflated.save(&args.output)?;
    eprintln!(
        "inflated {} PCM kernel tensors; wrote {}",
        inflated
            .entries
            .iter()
            .filter(|e| e.name.contains(".pcm.conv") && e.name.ends_with(".weight"))
            .count(),
        args.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    model: ModelSelector,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DatasetKind::Auto)]
    dataset: DatasetKind,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn eval(args: EvalArgs) -> CliResult {
    let mut config = args.model.resolve()?;
    let mut data = load_dataset(args.data.as_deref(), args.dataset, &config, args.seed)?;
    reconcile(&mut config, &mut data)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    if ckpt.pcm_kernel != 3 {
        return Err(CliError::data(
            "checkpoint holds 1x1 pretraining kernels; run `vitae inflate` first".to_string(),
        ));
    }
    let mut model: Model<f32> = build(&config, 0)?;
    ckpt.load_into(&mut model)?;
    let set = data.test.as_ref().unwrap_or(&data.train);
    let acc = evaluate(&model, set, args.batch)?;
    println!("accuracy: {:.2}% over {} images", 100.0 * acc, set.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct InspectArgs {
    /// Preset to report on; default reports every published preset.
    #[arg(long, value_parser = PRESET_NAMES.to_vec())]
    preset: Option<String>,
    /// Also write machine-readable rows (one JSON object per line).
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn inspect(args: InspectArgs) -> CliResult {
    let names: Vec<&str> = match &args.preset {
        Some(name) => vec![name.as_str()],
        None => PRESET_NAMES
            .iter()
            .copied()
            .filter(|n| *n != "tiny-desk")
            .collect(),
    };
    let rows = model_report(&names)?;
    print!("{}", render_report(&rows));
    if let Some(path) = &args.json {
        std::fs::write(path, report_jsonl(&rows)).map_err(CliError::from_io)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attn-dist
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AttnDistArgs {
    #[command(flatten)]
    model: ModelSelector,
    /// Trained weights; omitting it reports the random-init distances.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DatasetKind::Auto)]
    dataset: DatasetKind,
    /// `all` or a zero-based layer index.
    #[arg(long, default_value = "all")]
    layer: String,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn attn_dist(args: AttnDistArgs) -> CliResult {
    let mut config = args.model.resolve()?;
    let mut data = load_dataset(args.data.as_deref(), args.dataset, &config, args.seed)?;
    reconcile(&mut config, &mut data)?;
    let mut model: Model<f32> = build(&config, args.seed)?;
    if let Some(path) = &args.ckpt {
        let ckpt = Checkpoint::load(path)?;
        ckpt.load_into(&mut model)?;
    }
    let set = data.test.as_ref().unwrap_or(&data.train);
    let n = args.batch.min(set.len());
    let batch = set.batch(&(0..n).collect::<Vec<_>>());
    let mut tape = Tape::inference();
    let (_, stats) = model.forward_classify(&mut tape, &batch.images, false, true)?;

    let selected: Box<dyn Fn(usize) -> bool> = if args.layer == "all" {
        Box::new(|_| true)
    } else {
        let idx: usize = args
            .layer
            .parse()
            .map_err(|_| CliError::usage("--layer expects `all` or an index"))?;
        Box::new(move |i| i == idx)
    };
    let mut printed = 0;
    for (i, s) in stats.iter().enumerate() {
        if !selected(i) {
            continue;
        }
        let px = attention_distance(s)?;
        println!("layer {i:<3} {:<14} mean attention distance {px:8.2} px", s.label);
        printed += 1;
    }
    if printed == 0 {
        return Err(CliError::usage("layer index out of range"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GradcheckArgs {
    /// Check a single op (`matmul`, `elementwise`, `softmax`, `gelu`,
    /// `conv2d`, `batchnorm2d`, `layernorm`, `cross_entropy`, `attention`).
    #[arg(long)]
    op: Option<String>,
    /// Check a full cell end to end.
    #[arg(long, value_parser = ["rc", "nc"])]
    cell: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn project(tape: &mut Tape<f64>, y: &Tensor<f64>, seed: u64) -> vitae_core::Result<Tensor<f64>> {
    let mut rng = SplitMix64::new(seed ^ 0xABCD);
    let r = Tensor::randn(y.shape(), 1.0, &mut rng);
    let p = ops::mul(tape, y, &r)?;
    Ok(ops::sum_all(tape, &p))
}

type CheckFn = fn(u64, f64) -> vitae_core::Result<vitae_core::tensor::GradCheckReport>;

fn op_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("matmul", |seed, tol| {
            let b = randn(&[4, 5], seed ^ 1);
            grad_check(
                |tape, x| {
                    let y = ops::matmul(tape, x, &b)?;
                    project(tape, &y, seed)
                },
                &randn(&[2, 3, 4], seed),
                tol,
            )
        }),
        ("elementwise", |seed, tol| {
            let b = randn(&[4], seed ^ 2);
            grad_check(
                |tape, x| {
                    let y = ops::mul(tape, x, &b)?;
                    let y = ops::add(tape, &y, &b)?;
                    project(tape, &y, seed)
                },
                &randn(&[2, 3, 4], seed),
                tol,
            )
        }),
        ("softmax", |seed, tol| {
            grad_check(
                |tape, x| {
                    let y = ops::softmax(tape, x, 1)?;
                    project(tape, &y, seed)
                },
                &randn(&[3, 6], seed),
                tol,
            )
        }),
        ("gelu", |seed, tol| {
            grad_check(
                |tape, x| {
                    let y = ops::gelu(tape, x);
                    project(tape, &y, seed)
                },
                &randn(&[4, 5], seed),
                tol,
            )
        }),
        ("conv2d", |seed, tol| {
            let w = randn(&[4, 2, 3, 3], seed ^ 3);
            grad_check(
                |tape, x| {
                    let y = conv::conv2d(
                        tape,
                        x,
                        &w,
                        None,
                        ConvSpec::same(3, 2, 2).with_groups(2),
                    )?;
                    project(tape, &y, seed)
                },
                &randn(&[1, 4, 6, 6], seed),
                tol,
            )
        }),
        ("batchnorm2d", |seed, tol| {
            let gamma = randn(&[3], seed ^ 4);
            let beta = randn(&[3], seed ^ 5);
            let (rm, rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
            grad_check(
                |tape, x| {
                    let out = norm::batchnorm2d(tape, x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, true)?;
                    project(tape, &out.output, seed)
                },
                &randn(&[2, 3, 4, 4], seed),
                tol,
            )
        }),
        ("layernorm", |seed, tol| {
            let gamma = randn(&[6], seed ^ 6);
            let beta = randn(&[6], seed ^ 7);
            grad_check(
                |tape, x| {
                    let y = norm::layernorm(tape, x, &gamma, &beta, 1e-5)?;
                    project(tape, &y, seed)
                },
                &randn(&[2, 5, 6], seed),
                tol,
            )
        }),
        ("cross_entropy", |seed, tol| {
            grad_check(
                |tape, x| ops::cross_entropy(tape, x, &[0, 2, 1]),
                &randn(&[3, 4], seed),
                tol,
            )
        }),
        ("attention", |seed, tol| {
            let mut rng = SplitMix64::new(seed ^ 8);
            let attn =
                MultiHeadAttention::<f64>::new(6, 8, 2, AttnScale::PerHead, &mut rng).unwrap();
            grad_check(
                |tape, x| {
                    let (y, _) = attn.forward(tape, x, false)?;
                    project(tape, &y, seed)
                },
                &randn(&[1, 5, 6], seed),
                tol,
            )
        }),
    ]
}

fn cell_check(which: &str, seed: u64, tol: f64) -> vitae_core::Result<vitae_core::tensor::GradCheckReport> {
    let mut rng = SplitMix64::new(seed ^ 9);
    match which {
        "rc" => {
            let rc = ReductionCell::<f64>::new(
                &RcBuild {
                    cin: 2,
                    dout: 8,
                    reduction: 2,
                    kernel: 3,
                    dilations: &[1, 2],
                    heads: 2,
                    kind: AttentionKind::Full,
                    scale: AttnScale::PerHead,
                    pcm_hidden: 4,
                    ffn_ratio: 2.0,
                },
                &mut rng,
            )?;
            grad_check(
                |tape, x| {
                    let (y, _) = rc.forward(tape, x, true, false)?;
                    project(tape, &y, seed)
                },
                &randn(&[1, 2, 6, 6], seed),
                tol,
            )
        }
        _ => {
            let nc = NormalCell::<f64>::new(
                8,
                2,
                AttentionKind::Full,
                AttnScale::PerHead,
                2,
                3,
                2.0,
                &mut rng,
            )?;
            grad_check(
                |tape, x| {
                    let (y, _) = nc.forward(tape, x, true, TokenGrid::Spatial(3, 3), true, false)?;
                    project(tape, &y, seed)
                },
                &randn(&[1, 10, 8], seed),
                tol,
            )
        }
    }
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    let mut failures = Vec::new();
    let mut run = |label: String, report: vitae_core::Result<vitae_core::tensor::GradCheckReport>| {
        match report {
            Ok(r) => {
                println!(
                    "{} {label}: max rel err {:.3e}",
                    if r.pass { "[PASS]" } else { "[FAIL]" },
                    r.max_rel_err
                );
                if !r.pass {
                    failures.push(label);
                }
            }
            Err(e) => {
                println!("[FAIL] {label}: {e}");
                failures.push(label);
            }
        }
    };

    let seeds: Vec<u64> = (0..args.seeds.max(1)).map(|i| 11 * (i + 1)).collect();
    match (&args.op, &args.cell) {
        (Some(op), _) => {
            let checks = op_checks();
            let Some((name, f)) = checks.iter().find(|(n, _)| n == op) else {
                let names: Vec<&str> = checks.iter().map(|(n, _)| *n).collect();
                return Err(CliError::usage(format!(
                    "unknown op `{op}` (expected one of {names:?})"
                )));
            };
            for &seed in &seeds {
                run(format!("{name} (seed {seed})"), f(seed, args.tol));
            }
        }
        (None, Some(cell)) => {
            for &seed in &seeds {
                run(format!("{cell} (seed {seed})"), cell_check(cell, seed, args.tol));
            }
        }
        (None, None) => {
            for (name, f) in op_checks() {
                for &seed in &seeds {
                    run(format!("{name} (seed {seed})"), f(seed, args.tol));
                }
            }
            for which in ["rc", "nc"] {
                for &seed in &seeds {
                    run(format!("{which} (seed {seed})"), cell_check(which, seed, args.tol));
                }
            }
        }
    }
    if failures.is_empty() {
        println!("all gradient checks passed at tol {:.0e}", args.tol);
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "{} gradient check(s) failed: {failures:?}",
            failures.len()
        )))
    }
}
