use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrq::config::{RunConfig, ToyConfig};
use lrq::diag::{rmse_curve, run_sweep, write_sweep_csv, SweepAxis};
use lrq::lrq::{learnable_param_ratio, parse_layer_dims, RoundVariant};
use lrq::model::container::{load_model, save_model};
use lrq::model::{evaluate_ppl, train_toy_model, ActQuant, Model};
use lrq::recon::{quantize_model, PipelineMode};
use lrq::{Error, Result};

#[derive(Parser)]
#[command(name = "lrq", version, about = "Low-rank learnable weight rounding for transformer PTQ")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// per-tensor-static | per-token | weight-only
    #[arg(long)]
    mode: Option<PipelineMode>,
    /// rtn | flexround | lrq | lrq-no-bias
    #[arg(long)]
    variant: Option<RoundVariant>,
    #[arg(long = "bits-w")]
    bits_w: Option<u32>,
    #[arg(long = "bits-a")]
    bits_a: Option<u32>,
    #[arg(long = "bits-kv")]
    bits_kv: Option<u32>,
    #[arg(long)]
    rank: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.recon.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.scheme.mode = m;
        }
        if let Some(v) = self.variant {
            cfg.recon.variant = v;
        }
        if let Some(b) = self.bits_w {
            cfg.scheme.bits_w = b;
        }
        if let Some(b) = self.bits_a {
            cfg.scheme.bits_a = b;
        }
        if self.bits_kv.is_some() {
            cfg.scheme.bits_kv = self.bits_kv;
        }
        if let Some(r) = self.rank {
            cfg.recon.rank = r;
        }
        cfg.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a quantized model and write the container and reports.
    Quantize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Perplexity of a model on the configured evaluation corpus.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the configured full-precision model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Adds per-token activation quantization at this width.
        #[arg(long = "bits-a")]
        bits_a: Option<u32>,
        /// Adds per-token KV-cache quantization at this width.
        #[arg(long = "bits-kv")]
        bits_kv: Option<u32>,
    },
    /// Accumulated block-output RMSE between the configured model and a quantized one.
    Rmse {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quant: PathBuf,
        #[arg(long, default_value = "rmse.csv")]
        out: PathBuf,
    },
    /// Quantize and evaluate once per value of rank or calibration size.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// rank | calib_samples
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Learnable-parameter ratio of the low-rank scale for given layer shapes.
    Ratio {
        /// e.g. 4x4096x4096+3x4096x11008; omitted prints the reference table.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Train a small full-precision model on a synthetic language.
    MakeToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "toy.lrqm")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

const REFERENCE_DIMS: [(&str, &str, usize); 4] = [
    ("llama-7b", "4x4096x4096+3x4096x11008", 1024),
    ("llama-13b", "4x5120x5120+3x5120x13824", 1024),
    ("llama-33b", "4x6656x6656+3x6656x17920", 2048),
    ("llama-65b", "4x8192x8192+3x8192x22016", 2048),
];

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn eval_set(cfg: &RunConfig) -> Result<lrq::model::CalibrationSet> {
    let spec = cfg.eval.as_ref().unwrap_or(&cfg.calibration);
    spec.load(Path::new("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Quantize { config, out, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            let fp = load_model(&cfg.model)?;
            let calib = cfg.calibration.load(Path::new("."))?;
            let (q, report) = quantize_model(&fp, &calib, &cfg.recon, &cfg.scheme)?;
            ensure_dir(&out)?;
            save_model(&q, &out.join("model.lrqm"))?;
            report.save(&out)?;
            for b in &report.blocks {
                eprintln!(
                    "block {}: loss {:.6e} -> {:.6e} (best at {})",
                    b.block, b.initial_loss, b.final_loss, b.best_iteration
                );
            }
            println!("{}", out.join("model.lrqm").display());
        }
        Command::Eval {
            config,
            model,
            bits_a,
            bits_kv,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut m = load_model(model.as_ref().unwrap_or(&cfg.model))?;
            for q in &mut m.quant {
                if let Some(b) = bits_a {
                    q.act = ActQuant::PerToken { bits: b };
                }
                if bits_kv.is_some() {
                    q.kv_bits = bits_kv;
                }
            }
            let ppl = evaluate_ppl(&m, &eval_set(&cfg)?)?;
            println!("{}", serde_json::json!({ "ppl": ppl }));
        }
        Command::Rmse { config, quant, out } => {
            let cfg = RunConfig::load(&config)?;
            let fp = load_model(&cfg.model)?;
            let q = load_model(&quant)?;
            let calib = cfg.calibration.load(Path::new("."))?;
            let mut sets = vec![("calibration", calib)];
            if let Some(e) = &cfg.eval {
                sets.push(("unseen", e.load(Path::new("."))?));
            }
            let refs: Vec<(&str, &lrq::model::CalibrationSet)> = sets.iter().map(|(t, s)| (*t, s)).collect();
            let curve = rmse_curve(&fp, &q, &refs)?;
            curve.write_csv(fs::File::create(&out)?)?;
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            overrides,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            let fp = load_model(&cfg.model)?;
            let mut spec = cfg.calibration.clone();
            if axis == SweepAxis::CalibSamples {
                spec.n_samples = spec.n_samples.max(values.iter().copied().max().unwrap_or(0));
            }
            let calib = spec.load(Path::new("."))?;
            let rows = run_sweep(&fp, &calib, &eval_set(&cfg)?, &cfg.recon, &cfg.scheme, axis, &values)?;
            write_sweep_csv(axis, &rows, fs::File::create(&out)?)?;
        }
        Command::Ratio { dims, rank } => {
            let rows: Vec<(String, String, usize)> = match dims {
                Some(d) => {
                    let r = rank.ok_or_else(|| Error::Config("--rank is required with --dims".into()))?;
                    vec![("custom".into(), d, r)]
                }
                None => REFERENCE_DIMS
                    .iter()
                    .map(|(n, d, r)| (n.to_string(), d.to_string(), rank.unwrap_or(*r)))
                    .collect(),
            };
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(["name", "dims", "rank", "low_rank_percent", "full_percent"])?;
            for (name, d, r) in rows {
                let ratio = learnable_param_ratio(&parse_layer_dims(&d)?, r)?;
                w.write_record([
                    name,
                    d,
                    r.to_string(),
                    format!("{:.2}", ratio.low_rank_percent),
                    format!("{:.2}", ratio.full_percent),
                ])?;
            }
            w.flush()?;
        }
        Command::MakeToy { config, out, seed } => {
            let mut toy = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(format!("toy config: {e}")))?,
                None => ToyConfig::default(),
            };
            if let Some(s) = seed {
                toy.init_seed = s;
                toy.train.seed = s;
            }
            let mut m = Model::random(toy.model.clone(), toy.init_seed)?;
            let report = train_toy_model(&mut m, &toy.train)?;
            m.metadata = serde_json::json!({ "toy": toy, "final_loss": report.final_loss });
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            save_model(&m, &out)?;
            eprintln!("loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LRQ_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("LRQ_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
