//! Command-line interface: upscale, evaluate, toy training, the gradient
//! check, and the attention-cost benchmark.
//!
//! Exit codes are 0/1 only. Diagnostics go to stderr; data goes to files or
//! stdout. File outputs are atomic (temp file + rename).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, ImageBuffer, NetworkModel, SrModel};
use crate::geometry::{adaptive_footage, attention_cost, global_attention_cost, log_log_slope, AttentionMode};
use crate::model::{load_checkpoint, load_checkpoint_into, save_checkpoint, ModelConfig};
use crate::tensor::{no_grad, Tensor};
use crate::train::{train, trace_to_csv, SrDataset, TrainConfig};

#[derive(Parser)]
#[command(
    name = "maxsr",
    version,
    about = "Single-image super-resolution with adaptive multi-axis attention"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upscale a PNG with a trained checkpoint.
    Upscale {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Average over the 8 dihedral transforms of the input.
        #[arg(long)]
        self_ensemble: bool,
        /// Override the attention footage: exact | approx | fixed:P.
        /// Lets a fixed-footage-trained checkpoint run adaptively and
        /// vice versa.
        #[arg(long)]
        attention: Option<AttentionMode>,
    },
    /// Evaluate Y-channel PSNR/SSIM over a directory of HR PNGs.
    /// Writes eval_report.json and eval_report.txt to the working directory
    /// and prints the table to stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        /// Must equal the checkpoint's scale factor.
        #[arg(long)]
        scale: usize,
        /// Border pixels stripped per side before PSNR (default: the scale).
        #[arg(long)]
        border: Option<usize>,
        #[arg(long)]
        self_ensemble: bool,
    },
    /// Train a small model on a directory of HR PNGs.
    /// Writes the checkpoint plus a loss CSV next to it (<out>.loss.csv).
    #[command(after_long_help = CLI_CONFIG_HELP)]
    TrainToy {
        /// JSON config file; `--help` shows the schema with all defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Finite-difference gradient validation of every operation and the
    /// full toy network (f64). Exit code 0 iff everything passes.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Closed-form attention cost and measured wall time per input size.
    /// CSV on stdout; the fitted log-log slope goes to stderr.
    BenchAttention {
        /// Comma-separated square input sizes.
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256")]
        sizes: Vec<usize>,
        /// adaptive | approx | fixed:P | global
        #[arg(long, default_value = "adaptive")]
        mode: String,
    },
}

/// JSON document for `train-toy`: model and training sections plus optional
/// initialization from an existing checkpoint. Unknown keys are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optional checkpoint to start from.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// With init_checkpoint: ignore reconstruction-block tensors, the
    /// fine-tune path from a x2 model to another scale.
    #[serde(default)]
    pub init_skip_rb: bool,
}

const CLI_CONFIG_HELP: &str = concat!("Config JSON schema (defaults shown):\n", r#"{
  "model": {
    "blocks": 8,          // attention blocks (B); divisible by stages
    "stages": 4,          // fusion stages (S)
    "width": 48,          // channel width (W)
    "heads": 4,           // attention heads; must divide width
    "scale": 2,           // upsampling factor: 2, 3, 4 or 8
    "attention_mode": "exact",   // exact | approx | fixed:P (default exact)
    "rpe": false,         // relative position embedding (default false)
    "mask_padding": false // mask padded tokens in attention (default false)
  },
  "train": {
    "total_iters": 2000,  // required
    "batch": 32,          // default 32
    "lr0": 2e-4,          // default 2e-4
    "milestones": [250000, 400000, 450000, 475000, 500000],
    "decay": 2.0,         // default 2
    "patch_lr": 64,       // LR patch size, default 64
    "seed": 0,
    "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
    "log_every": 1        // loss CSV row cadence
  },
  "init_checkpoint": null,  // optional starting checkpoint
  "init_skip_rb": false     // with init_checkpoint: reinitialize the
                            // reconstruction block (x2 -> x3/x4/x8 fine-tune)
}"#);

pub fn run() -> i32 {
    // usage errors exit 1 (not clap's default 2); help/version exit 0
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Upscale { checkpoint, input, output, self_ensemble, attention } => {
            cmd_upscale(&checkpoint, &input, &output, self_ensemble, attention)
        }
        Command::Eval { checkpoint, hr_dir, scale, border, self_ensemble } => {
            cmd_eval(&checkpoint, &hr_dir, scale, border, self_ensemble)
        }
        Command::TrainToy { config, data_dir, out_checkpoint } => {
            cmd_train_toy(&config, &data_dir, &out_checkpoint)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::BenchAttention { sizes, mode } => cmd_bench_attention(&sizes, &mode),
    }
}

fn cmd_upscale(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    self_ensemble: bool,
    attention: Option<AttentionMode>,
) -> Result<()> {
    let (state, mut config) = load_checkpoint(checkpoint)?;
    if let Some(mode) = attention {
        config.attention_mode = mode;
    }
    let img = crate::image_io::read_png(input)?;
    let x = img.to_float_chw();
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let x = x.reshape(&[1, 3, h, w])?;
    let model = NetworkModel::new(&state, config);
    let y = if self_ensemble {
        crate::eval::self_ensemble(&model, &x)?
    } else {
        model.upscale(&x)?
    };
    let out = ImageBuffer::from_float_chw(&y)?;
    crate::image_io::write_png(output, &out)?;
    eprintln!(
        "upscaled {}x{} -> {}x{} (x{})",
        w,
        h,
        out.width,
        out.height,
        model.config.scale
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    hr_dir: &Path,
    scale: usize,
    border: Option<usize>,
    self_ensemble: bool,
) -> Result<()> {
    let (state, config) = load_checkpoint(checkpoint)?;
    if config.scale != scale {
        return Err(Error::invalid(
            "eval",
            format!("--scale {scale} does not match the checkpoint's scale {}", config.scale),
        ));
    }
    let border = border.unwrap_or(scale);
    let label = config.attention_mode.to_string();
    let model = NetworkModel::new(&state, config);
    let report = evaluate_dataset(&model, hr_dir, border, self_ensemble, &label)?;
    let json = serde_json::to_vec_pretty(&report)?;
    crate::image_io::atomic_write(Path::new("eval_report.json"), &json)?;
    let table = report.to_table();
    crate::image_io::atomic_write(Path::new("eval_report.txt"), table.as_bytes())?;
    print!("{table}");
    eprintln!("wrote eval_report.json and eval_report.txt");
    Ok(())
}

fn cmd_train_toy(config_path: &Path, data_dir: &Path, out_checkpoint: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg: CliConfig = serde_json::from_str(&text)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let mut state = match &cfg.init_checkpoint {
        Some(path) => load_checkpoint_into(path, &cfg.model, cfg.init_skip_rb)?,
        None => crate::model::build_model(&cfg.model, cfg.train.seed)?,
    };
    let dataset = SrDataset::from_hr_dir(data_dir, cfg.model.scale)?;
    eprintln!(
        "training: {} images, {} iterations, batch {}, patch {}",
        dataset.pairs.len(),
        cfg.train.total_iters,
        cfg.train.batch,
        cfg.train.patch_lr
    );
    let trace = train(&mut state, &cfg.model, &dataset, &cfg.train)?;
    save_checkpoint(&state, &cfg.model, out_checkpoint)?;
    let mut csv_path = out_checkpoint.as_os_str().to_os_string();
    csv_path.push(".loss.csv");
    crate::image_io::atomic_write(Path::new(&csv_path), trace_to_csv(&trace).as_bytes())?;
    if let Some(last) = trace.last() {
        eprintln!("final loss {:.6} at iteration {}", last.loss, last.iter);
    }
    eprintln!("wrote {} and {}", out_checkpoint.display(), PathBuf::from(&csv_path).display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let corrupt = std::env::var("MAXSR_GRADCHECK_CORRUPT").map(|v| v == "1").unwrap_or(false);
    if corrupt {
        eprintln!("negative control: corrupting one analytic gradient");
    }
    let results = crate::gradcheck::run_suite(seed, corrupt)?;
    let mut failures = 0usize;
    for r in &results {
        println!(
            "{} {:<40} max rel err {:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Autodiff(format!("{failures} gradient checks failed")));
    }
    eprintln!("all {} gradient checks passed", results.len());
    Ok(())
}

/// Keep timed global attention below ~512 MB of score matrices; the cost
/// column is exact either way.
fn bench_forward_feasible(tokens: usize, heads: usize) -> bool {
    tokens * tokens * heads <= (1usize << 27)
}

fn cmd_bench_attention(sizes: &[usize], mode: &str) -> Result<()> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("bench-attention", "sizes must be >= 1"));
    }
    enum BenchMode {
        Plan(AttentionMode),
        Global,
    }
    let bench = match mode {
        "global" => BenchMode::Global,
        other => BenchMode::Plan(
            other
                .parse::<AttentionMode>()
                .map_err(|e| Error::invalid("bench-attention", e))?,
        ),
    };

    let width = 16usize;
    let heads = 4usize;
    let mut points = Vec::new();
    println!("size,cost,wall_time_ms");
    for &n in sizes {
        let (cost, plan_mode) = match &bench {
            BenchMode::Plan(m) => (attention_cost(&adaptive_footage(n, n, *m)?), Some(*m)),
            BenchMode::Global => (global_attention_cost(n, n), None),
        };
        // wall time: one block + grid pass over a width-16 map, when feasible
        let timed = {
            let mode = plan_mode.unwrap_or(AttentionMode::Fixed(n));
            let plan = adaptive_footage(n, n, mode)?;
            let tokens = plan.tokens_per_window().max(plan.tokens_per_cell());
            if bench_forward_feasible(tokens, heads) {
                let mut rng = crate::rng::Rng::new(1);
                let x = Tensor::from_vec(
                    (0..width * n * n).map(|_| rng.uniform(0.0, 1.0) as f32).collect(),
                    &[1, width, n, n],
                )?;
                let params = crate::attention::AttentionParams {
                    heads,
                    qkv_weight: Tensor::from_vec(
                        (0..width * 3 * width).map(|_| rng.uniform(-0.2, 0.2) as f32).collect(),
                        &[width, 3 * width],
                    )?,
                    qkv_bias: Tensor::zeros(&[3 * width])?,
                    out_weight: Tensor::from_vec(
                        (0..width * width).map(|_| rng.uniform(-0.2, 0.2) as f32).collect(),
                        &[width, width],
                    )?,
                    out_bias: Tensor::zeros(&[width])?,
                    rpe: None,
                };
                let t0 = Instant::now();
                no_grad(|| -> Result<()> {
                    let y = crate::attention::adaptive_block_attention(&x, &params, mode, false)?;
                    let _ = crate::attention::adaptive_grid_attention(&y, &params, mode, false)?;
                    Ok(())
                })?;
                Some(t0.elapsed().as_secs_f64() * 1e3)
            } else {
                None
            }
        };
        match timed {
            Some(ms) => println!("{n},{cost},{ms:.3}"),
            None => println!("{n},{cost},"),
        }
        points.push(((n * n) as f64, cost as f64));
    }
    if points.len() >= 2 {
        eprintln!("log-log slope of cost vs pixel count: {:.4}", log_log_slope(&points));
    }
    Ok(())
}
