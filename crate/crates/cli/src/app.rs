//! Argument parsing and subcommand dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use ainet_core::tracker::{self, FusionMode, PipelineConfig};
use ainet_core::verify;
use ainet_tensor::gradcheck;
use clap::{Parser, Subcommand};

use crate::bench::{self, BenchConfig, Model};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ainet", version, about = "RGB-thermal fusion tracker: checks, benchmarks and demo training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Pipeline config (JSON); defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed; overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Bitwise-reproducible execution. Also set by `AINET_STRICT=1`.
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every op and module.
    Gradcheck,
    /// Comparisons against reference computations.
    Oracle,
    /// Cost sweep of the ordered fusion against the attention baseline (CSV to --out).
    Bench {
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Comma-separated token counts, multiples of --layer-tokens.
        #[arg(long, value_delimiter = ',', default_values_t = bench::TOKEN_COUNTS)]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = bench::LAYER_TOKENS)]
        layer_tokens: usize,
        /// Largest token count at which the attention forward is timed.
        #[arg(long, default_value_t = bench::ATTENTION_WALL_LIMIT)]
        attention_wall_limit: usize,
        /// Skip forward passes; analytic columns only.
        #[arg(long)]
        no_timing: bool,
    },
    /// Train on synthetic data; writes config, metrics and checkpoint to --out.
    DemoTrain,
    /// Evaluate the run directory given by --out.
    DemoEval,
    /// Train every fusion mode for each seed and report test IoU.
    Ablation {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = ["baseline_add".to_string(), "dfm_only".to_string(), "dfm_ofm".to_string()])]
        modes: Vec<String>,
    },
}

pub fn strict_from_env() -> bool {
    std::env::var("AINET_STRICT").is_ok_and(|v| v == "1")
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<FusionMode> {
    FusionMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown fusion mode `{s}`")))
}

fn out_path<'a>(cli: &'a Cli, default: &'a str) -> &'a Path {
    cli.out.as_deref().unwrap_or(Path::new(default))
}

fn fmt_iou(v: f64) -> String {
    format!("{v:.4}")
}

/// Runs one parsed command, writing its report to `w`.
pub fn run(cli: &Cli, w: &mut impl Write) -> Result<()> {
    let strict = cli.strict || strict_from_env();
    match &cli.command {
        Command::Gradcheck => {
            let seed = cli.seed.unwrap_or(0);
            let mut reports = gradcheck::op_suite(seed)?;
            reports.extend(verify::gradient_suite(seed)?);
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                writeln!(
                    w,
                    "gradcheck {} checked={} max_rel_err={:.3e} tol={:e} {}",
                    r.name,
                    r.checked,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                )?;
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} gradient checks failed", reports.len())));
            }
        }
        Command::Oracle => {
            let reports = verify::oracle_suite(cli.seed.unwrap_or(0))?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                writeln!(
                    w,
                    "oracle {} metric={:.3e} tol={:e} {} ({})",
                    r.name,
                    r.metric,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" },
                    r.detail
                )?;
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} oracle checks failed", reports.len())));
            }
        }
        Command::Bench {
            channels,
            heads,
            tokens,
            layer_tokens,
            attention_wall_limit,
            no_timing,
        } => {
            let cfg = BenchConfig {
                token_counts: tokens.clone(),
                layer_tokens: *layer_tokens,
                heads: *heads,
                timed: !no_timing,
                attention_wall_limit: *attention_wall_limit,
                seed: cli.seed.unwrap_or(0),
                ..BenchConfig::new(*channels)
            };
            if *heads == 0 || channels % heads != 0 {
                return Err(CliError::Usage(format!("{heads} heads do not divide {channels} channels")));
            }
            let report = bench::bench_scaling(&cfg)?;
            let path = out_path(cli, "costs.csv");
            report.write_csv(path)?;
            for model in [Model::Ofm, Model::Attention] {
                writeln!(w, "slope {model} {:.4}", report.slope(model))?;
            }
            writeln!(w, "wrote {}", path.display())?;
        }
        Command::DemoTrain => {
            let cfg = load_config(cli)?;
            let out = out_path(cli, "run");
            let report = tracker::run_demo(&cfg, out)?;
            let e = report.final_eval;
            writeln!(
                w,
                "demo-train steps={} seed={} strict={} initial_loss={:.4} final_loss={:.4} mean_iou={} out={}",
                report.rows.len(),
                cfg.seed,
                u8::from(strict),
                report.initial_loss(),
                report.final_loss(50),
                fmt_iou(e.mean_iou),
                out.display()
            )?;
        }
        Command::DemoEval => {
            let dir = out_path(cli, "run");
            if !dir.join(tracker::train::CONFIG_FILE).is_file() {
                return Err(CliError::Usage(format!("{} is not a demo-train output directory", dir.display())));
            }
            let e = tracker::evaluate_run(dir)?;
            writeln!(
                w,
                "demo-eval mean_iou={} rgb_clear={} tir_clear={} both={}",
                fmt_iou(e.mean_iou),
                fmt_iou(e.regime_iou[0]),
                fmt_iou(e.regime_iou[1]),
                fmt_iou(e.regime_iou[2])
            )?;
        }
        Command::Ablation { seeds, modes } => {
            let base = load_config(cli)?;
            let modes: Vec<FusionMode> = modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?;
            let mut csv_out = cli
                .out
                .as_deref()
                .map(|p| {
                    csv::WriterBuilder::new()
                        .terminator(csv::Terminator::Any(b'\n'))
                        .from_path(p)
                        .map_err(|e| CliError::Output(format!("{}: {e}", p.display())))
                })
                .transpose()?;
            if let Some(c) = csv_out.as_mut() {
                c.write_record(["mode", "seed", "initial_loss", "final_loss", "mean_iou", "iou_rgb_clear", "iou_tir_clear", "iou_both", "seconds"])?;
            }
            let mut io_err = None;
            let runs = tracker::ablation(&base, &modes, seeds, |r| {
                let line = format!(
                    "run mode={} seed={} loss={:.4}->{:.4} mean_iou={} seconds={:.1}",
                    r.mode.name(),
                    r.seed,
                    r.initial_loss,
                    r.final_loss,
                    fmt_iou(r.eval.mean_iou),
                    r.seconds
                );
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    io_err.get_or_insert(CliError::Io(e));
                }
                if let Some(c) = csv_out.as_mut() {
                    let mut rec = vec![r.mode.name().to_string(), r.seed.to_string()];
                    rec.extend([r.initial_loss, r.final_loss, r.eval.mean_iou].map(|v| format!("{v:.6e}")));
                    rec.extend(r.eval.regime_iou.map(|v| format!("{v:.6e}")));
                    rec.push(format!("{:.3}", r.seconds));
                    if let Err(e) = c.write_record(&rec) {
                        io_err.get_or_insert(CliError::Csv(e));
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            if let Some(c) = csv_out.as_mut() {
                c.flush()?;
            }
            for &mode in &modes {
                let ious: Vec<f64> = runs.iter().filter(|r| r.mode == mode).map(|r| r.eval.mean_iou).collect();
                writeln!(w, "median mode={} mean_iou={}", mode.name(), fmt_iou(tracker::median(&ious)))?;
            }
        }
    }
    Ok(())
}
