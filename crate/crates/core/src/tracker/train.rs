//! Training and evaluation on the synthetic data.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ainet_tensor::{checkpoint, Adam, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FusionMode, PipelineConfig};
use super::data::{generate_dataset, DataConfig, Regime, TrackSample};
use super::model::{Ainet, Batch, Targets};
use crate::error::{CoreError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.json";

/// Mean IoU overall and per regime (`NaN` for a regime with no samples).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_iou: f64,
    pub regime_iou: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub eval: Option<Evaluation>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub final_eval: Evaluation,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.rows[0].loss
    }

    /// Mean loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

/// Train and test splits; the test split uses its own seed stream.
pub fn datasets(cfg: &PipelineConfig) -> Result<(Vec<TrackSample>, Vec<TrackSample>)> {
    let dc = DataConfig {
        frames_per_sequence: cfg.train.frames_per_sequence,
        noise: cfg.train.noise,
        ..DataConfig::new(cfg.search_size, cfg.template_size)
    };
    let train = generate_dataset(cfg.seed, cfg.train.train_sequences, &dc)?;
    let test = generate_dataset(cfg.seed ^ 0x5eed_7e57, cfg.train.test_sequences, &dc)?;
    Ok((train, test))
}

pub fn evaluate(model: &Ainet, store: &ParamStore, samples: &[TrackSample]) -> Result<Evaluation> {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for chunk in samples.chunks(16) {
        let refs: Vec<&TrackSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, model.cfg.patch)?;
        let mut g = Graph::new();
        let (out, _) = model.forward(&mut g, store, &batch)?;
        for (s, pred) in chunk.iter().zip(model.decode(&g, &out)) {
            sums[s.regime.index()] += pred.iou(&s.gt_box);
            counts[s.regime.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let mut regime_iou = [f64::NAN; 3];
    for r in Regime::ALL {
        if counts[r.index()] > 0 {
            regime_iou[r.index()] = sums[r.index()] / counts[r.index()] as f64;
        }
    }
    Ok(Evaluation {
        mean_iou: sums.iter().sum::<f64>() / total.max(1) as f64,
        regime_iou,
    })
}

/// Adam on the summed heatmap and box loss. Batches are drawn with
/// replacement from `train` by a generator seeded from the config seed.
/// A non-finite loss aborts with [`CoreError::Diverged`].
pub fn train(cfg: &PipelineConfig, train: &[TrackSample], test: &[TrackSample]) -> Result<(ParamStore, Ainet, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::Config("empty split".into()));
    }
    let mut store = ParamStore::new(cfg.seed);
    let model = Ainet::new(&mut store, cfg)?;
    let mut adam = Adam::new(cfg.train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut rows = Vec::with_capacity(cfg.train.steps);
    let mut last_eval = None;
    for step in 0..cfg.train.steps {
        let picks: Vec<&TrackSample> = (0..cfg.train.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let batch = Batch::new(&picks, cfg.patch)?;
        let boxes: Vec<_> = picks.iter().map(|s| s.gt_box).collect();
        let targets = Targets::new(&boxes, cfg)?;

        let mut g = Graph::new();
        let (out, _) = model.forward(&mut g, &store, &batch)?;
        let loss = model.loss(&mut g, &out, &targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(CoreError::Diverged { step, loss: value });
        }
        let grads = g.backward(loss)?;
        drop(g);
        store.zero_grads();
        store.accumulate(&grads);
        adam.step(&mut store);

        let done = step + 1;
        let eval = if done % cfg.train.eval_every == 0 || done == cfg.train.steps {
            let e = evaluate(&model, &store, test)?;
            last_eval = Some(e);
            Some(e)
        } else {
            None
        };
        rows.push(MetricRow { step, loss: value, eval });
    }
    let final_eval = last_eval.expect("the last step always evaluates");
    Ok((store, model, TrainReport { rows, final_eval }))
}

fn fmt_real(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6e}")
    }
}

/// Columns `step,loss,mean_iou,iou_rgb_clear,iou_tir_clear,iou_both`; the
/// IoU columns are empty on steps without evaluation.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["step", "loss", "mean_iou", "iou_rgb_clear", "iou_tir_clear", "iou_both"])?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), fmt_real(r.loss)];
        match &r.eval {
            Some(e) => {
                rec.push(fmt_real(e.mean_iou));
                rec.extend(e.regime_iou.iter().map(|&v| fmt_real(v)));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Generates the data, trains, and writes `config.json`, `metrics.csv` and
/// `checkpoint/` under `out`.
pub fn run_demo(cfg: &PipelineConfig, out: &Path) -> Result<TrainReport> {
    let (train_set, test_set) = datasets(cfg)?;
    let (store, _, report) = train(cfg, &train_set, &test_set)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    write_metrics(&out.join(METRICS_FILE), &report.rows)?;
    checkpoint::save(&store, &out.join(CHECKPOINT_DIR))?;
    Ok(report)
}

/// Loads the model written by [`run_demo`] and evaluates it on the test split.
pub fn evaluate_run(dir: &Path) -> Result<Evaluation> {
    let cfg = PipelineConfig::load(&dir.join(CONFIG_FILE))?;
    let mut store = ParamStore::new(cfg.seed);
    let model = Ainet::new(&mut store, &cfg)?;
    checkpoint::load_into(&mut store, &dir.join(CHECKPOINT_DIR))?;
    let (_, test) = datasets(&cfg)?;
    evaluate(&model, &store, &test)
}

/// Outcome of one training run inside an ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: FusionMode,
    pub seed: u64,
    pub initial_loss: f64,
    /// Mean loss over the last 50 steps.
    pub final_loss: f64,
    pub eval: Evaluation,
    pub seconds: f64,
}

/// Trains every `(seed, mode)` pair from `base`. Runs sharing a seed share
/// the generated data.
pub fn ablation(base: &PipelineConfig, modes: &[FusionMode], seeds: &[u64], mut on_run: impl FnMut(&AblationRun)) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    for &seed in seeds {
        let cfg = PipelineConfig { seed, ..base.clone() };
        let (train_set, test_set) = datasets(&cfg)?;
        for &mode in modes {
            let cfg = PipelineConfig { fusion_mode: mode, ..cfg.clone() };
            let start = Instant::now();
            let (_, _, report) = train(&cfg, &train_set, &test_set)?;
            let run = AblationRun {
                mode,
                seed,
                initial_loss: report.initial_loss(),
                final_loss: report.final_loss(50),
                eval: report.final_eval,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Median of the finite values; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
