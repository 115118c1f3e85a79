//! End-to-end training runs driven by a [`RunConfig`].

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint;
use crate::config::{DataConfig, Mode, ProbeSource, RunConfig};
use crate::data::{load_mnist_idx, synth_spirals, Batcher, CharCorpus, CharStreams, ClassDataset};
use crate::diagnostics::{probe, ProbeReport};
use crate::engine::{one_hot, Architecture, PartitionedModel, PipelineReport, StepInput, StepRecord, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::submodel::{all_submodels, evaluate_chars, evaluate_classes, Complexity, Evaluation};
use crate::tensor::Tensor;

const SHUFFLE_SALT: u64 = 0x05EE_D0FB_A7C4;
const SPIRAL_TEST_SALT: u64 = 0x7E57;
const EVAL_BATCH: usize = 1000;

/// Loaded training and held-out data.
#[derive(Clone, Debug)]
pub enum RunData {
    Classes { train: ClassDataset, test: ClassDataset },
    Chars { train: CharStreams, valid: CharStreams },
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data {
            DataConfig::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
            } => {
                let mut train = load_mnist_idx(train_images, train_labels)?;
                if let Some(n) = train_limit {
                    train = train.head(*n);
                }
                let test = load_mnist_idx(test_images, test_labels)?;
                Ok(RunData::Classes { train, test })
            }
            DataConfig::Spirals {
                n_per_class,
                classes,
                noise_std,
                test_per_class,
            } => Ok(RunData::Classes {
                train: synth_spirals(*n_per_class, *classes, *noise_std, cfg.seed)?,
                test: synth_spirals(*test_per_class, *classes, *noise_std, cfg.seed ^ SPIRAL_TEST_SALT)?,
            }),
            DataConfig::Char {
                corpus,
                bptt,
                valid_fraction,
            } => {
                let text = CharCorpus::load(corpus)?;
                let (train, valid) = text.split_tail(*valid_fraction)?;
                Ok(RunData::Chars {
                    train: train.streams(cfg.train.batch_size, *bptt)?,
                    valid: valid.streams(cfg.train.batch_size, *bptt)?,
                })
            }
        }
    }

    /// Per-example input shape and class count.
    pub fn signature(&self) -> (Vec<usize>, usize) {
        match self {
            RunData::Classes { train, .. } => (train.item_shape().to_vec(), train.classes()),
            RunData::Chars { train, .. } => (vec![train.vocab_size()], train.vocab_size()),
        }
    }

    pub fn bptt(&self) -> Option<usize> {
        match self {
            RunData::Classes { .. } => None,
            RunData::Chars { train, .. } => Some(train.bptt()),
        }
    }

    pub fn heldout_split(&self) -> &'static str {
        match self {
            RunData::Classes { .. } => "test",
            RunData::Chars { .. } => "valid",
        }
    }

    fn batches_per_epoch(&self, batch_size: usize) -> usize {
        match self {
            RunData::Classes { train, .. } => train.len().div_ceil(batch_size),
            RunData::Chars { train, .. } => train.windows(),
        }
    }

    /// The fixed probe batch.
    pub fn probe_batch(&self, size: usize, source: ProbeSource) -> Result<(Vec<Tensor>, Vec<Vec<usize>>)> {
        match self {
            RunData::Classes { train, test } => {
                let d = match source {
                    ProbeSource::Test => test,
                    ProbeSource::Train => train,
                };
                let idx: Vec<usize> = (0..size.min(d.len())).collect();
                let b = d.gather(&idx)?;
                Ok((vec![b.x], vec![b.y]))
            }
            RunData::Chars { train, valid } => {
                let s = match source {
                    ProbeSource::Test => valid,
                    ProbeSource::Train => train,
                };
                let w = s.window(0);
                let xs = w.inputs.iter().map(|ids| one_hot(ids, s.vocab_size())).collect::<Result<_>>()?;
                Ok((xs, w.targets))
            }
        }
    }

    /// Evaluates a network on the held-out split.
    pub fn evaluate(&self, net: &crate::nn::Sequential) -> Result<Evaluation> {
        match self {
            RunData::Classes { test, .. } => evaluate_classes(net, test, EVAL_BATCH),
            RunData::Chars { valid, .. } => evaluate_chars(net, valid, valid.vocab_size()),
        }
    }
}

/// Builds the architecture for a config and its data.
pub fn build_architecture(cfg: &RunConfig, data: &RunData) -> Result<Architecture> {
    let (shape, classes) = data.signature();
    Architecture::build(&cfg.model.preset, &cfg.preset()?, cfg.model.n_critics, &shape, classes, data.bptt())
}

pub fn build_trainer(cfg: &RunConfig, data: &RunData) -> Result<Trainer> {
    let arch = build_architecture(cfg, data)?;
    let mut t = Trainer::new(PartitionedModel::init(arch, cfg.seed), &cfg.optim.main, &cfg.optim.critic);
    t.set_check_finite(cfg.train.check_finite);
    Ok(t)
}

/// Fails unless `arch` fits the data's input shape, classes and unroll length.
pub fn check_compatible(arch: &Architecture, data: &RunData) -> Result<()> {
    let (shape, classes) = data.signature();
    if arch.input_shape != shape || arch.classes != classes || arch.bptt != data.bptt() {
        return Err(Error::config(
            "data",
            format!(
                "data has input {shape:?}, {classes} classes, bptt {:?}; the model expects input {:?}, {} classes, bptt {:?}",
                data.bptt(),
                arch.input_shape,
                arch.classes,
                arch.bptt
            ),
        ));
    }
    Ok(())
}

/// Name of head `i` (0-based) out of `n`.
pub fn head_name(i: usize, n: usize) -> String {
    if i + 1 == n {
        "main".to_string()
    } else {
        format!("sub{}", i + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadEval {
    pub depth: usize,
    pub head: String,
    pub eval: Evaluation,
    pub complexity: Complexity,
}

/// Evaluates every head (or only the main one) on the held-out split.
pub fn evaluate_heads(model: &PartitionedModel, data: &RunData, all: bool) -> Result<Vec<HeadEval>> {
    let subs = all_submodels(model)?;
    let n = subs.len();
    subs.into_iter()
        .filter(|s| all || s.is_main)
        .map(|s| {
            Ok(HeadEval {
                depth: s.depth,
                head: head_name(s.depth - 1, n),
                eval: data.evaluate(&s.net)?,
                complexity: s.complexity,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub epoch: usize,
    pub epoch_end: bool,
    pub report: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    /// Mean training loss per prediction of each head.
    pub head_loss: Vec<f64>,
    pub head_accuracy: Vec<f64>,
    /// Mean over the epoch's steps of `|L_i - L_N|` per critic.
    pub loss_gaps: Vec<f64>,
    pub eval: Vec<HeadEval>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub trainer: Trainer,
    pub rows: Vec<MetricsRow>,
    pub metrics_csv: String,
    pub probes: Vec<ProbeRecord>,
    pub epochs: Vec<EpochSummary>,
    pub pipeline: Option<PipelineReport>,
    pub wall_secs: f64,
}

impl RunOutcome {
    /// Held-out evaluation of every head after the last epoch.
    pub fn final_eval(&self) -> &[HeadEval] {
        self.epochs.last().map_or(&[], |e| &e.eval)
    }

    pub fn final_main(&self) -> Option<&Evaluation> {
        self.final_eval().iter().find(|h| h.head == "main").map(|h| &h.eval)
    }
}

#[derive(Default)]
struct EpochAcc {
    steps: u64,
    loss: Vec<f64>,
    correct: Vec<usize>,
    count: Vec<usize>,
    gaps: Vec<f64>,
}

impl EpochAcc {
    fn new(n: usize) -> Self {
        EpochAcc {
            steps: 0,
            loss: vec![0.0; n],
            correct: vec![0; n],
            count: vec![0; n],
            gaps: vec![0.0; n - 1],
        }
    }

    fn add(&mut self, rec: &StepRecord) {
        let n = rec.heads.len();
        let per_char = |i: usize| rec.heads[i].loss / rec.heads[i].steps as f64;
        for i in 0..n {
            self.loss[i] += per_char(i);
            self.correct[i] += rec.heads[i].correct;
            self.count[i] += rec.heads[i].count;
        }
        for i in 0..n - 1 {
            self.gaps[i] += (per_char(i) - per_char(n - 1)).abs();
        }
        self.steps += 1;
    }
}

struct Driver<'a> {
    cfg: &'a RunConfig,
    data: &'a RunData,
    log: MetricsLog,
    start: Instant,
    n: usize,
    recurrent: bool,
    probes: Vec<ProbeRecord>,
    probe_batch: (Vec<Tensor>, Vec<Vec<usize>>),
}

impl Driver<'_> {
    fn wall(&self) -> Option<f64> {
        self.cfg
            .train
            .log_wall_clock
            .then(|| self.start.elapsed().as_secs_f64() * 1e3)
    }

    fn metric(&self, accuracy: f64, loss_per_char: f64) -> f64 {
        if self.recurrent {
            crate::nn::loss::bits_per_char(loss_per_char)
        } else {
            accuracy
        }
    }

    fn on_record(&mut self, rec: &StepRecord, epoch: usize) -> Result<()> {
        let step = rec.batch_id + 1;
        let every = self.cfg.train.log_every;
        if every == 0 || !step.is_multiple_of(every) {
            return Ok(());
        }
        for (i, h) in rec.heads.iter().enumerate() {
            let mut row = MetricsRow::new(step, epoch, "train", &head_name(i, self.n), self.n - 1);
            let per_char = h.loss / h.steps as f64;
            row.loss = Some(per_char);
            row.metric = Some(self.metric(h.correct as f64 / h.count as f64, per_char));
            row.wall_ms = self.wall();
            self.log.push(row)?;
        }
        Ok(())
    }

    fn probe(&mut self, trainer: &Trainer, step: u64, epoch: usize, epoch_end: bool) -> Result<()> {
        let model = trainer.snapshot();
        let (xs, ys) = &self.probe_batch;
        let report = probe(&model, xs, ys, step)?;
        let split = if epoch_end { "epoch_probe" } else { "probe" };
        let mut row = MetricsRow::new(step, epoch, split, "main", self.n - 1);
        let t = self.data.bptt().unwrap_or(1) as f64;
        row.loss = Some(report.head_losses[self.n - 1] / t);
        row.sigma = report.sigma.sigma.clone();
        row.loss_gaps = report.loss_gaps.iter().map(|g| Some(g / t)).collect();
        row.grad_norm_sq = Some(report.grad_norm_sq);
        row.wall_ms = self.wall();
        self.log.push(row)?;
        self.probes.push(ProbeRecord {
            step,
            epoch,
            epoch_end,
            report,
        });
        Ok(())
    }

    fn epoch_rows(&mut self, acc: &EpochAcc, epoch: usize, step: u64, eval: &[HeadEval]) -> Result<()> {
        for i in 0..self.n {
            let mut row = MetricsRow::new(step, epoch, "train_epoch", &head_name(i, self.n), self.n - 1);
            let loss = acc.loss[i] / acc.steps as f64;
            row.loss = Some(loss);
            row.metric = Some(self.metric(acc.correct[i] as f64 / acc.count[i] as f64, loss));
            if i + 1 == self.n {
                row.loss_gaps = acc.gaps.iter().map(|g| Some(g / acc.steps as f64)).collect();
            }
            row.wall_ms = self.wall();
            self.log.push(row)?;
        }
        for h in eval {
            let mut row = MetricsRow::new(step, epoch, self.data.heldout_split(), &h.head, self.n - 1);
            row.loss = Some(h.eval.loss);
            row.metric = Some(h.eval.headline());
            row.wall_ms = self.wall();
            self.log.push(row)?;
        }
        self.log.flush()
    }
}

fn class_input(data: &ClassDataset, idx: &[usize]) -> StepInput {
    let b = data.gather(idx).expect("batch indices come from the dataset");
    StepInput::single(b.x, b.y)
}

fn char_input(data: &CharStreams, k: usize) -> StepInput {
    let w = data.window(k);
    let xs = w
        .inputs
        .iter()
        .map(|ids| one_hot(ids, data.vocab_size()).expect("ids come from the vocabulary"))
        .collect();
    StepInput {
        xs,
        targets: Arc::new(w.targets),
    }
}

/// Trains per `cfg`. When `out_dir` is given, writes `config.resolved.toml`,
/// `metrics.csv`, `checkpoint.bin`, `summary.json` and, for decoupled runs
/// or with wall-clock logging on, `utilization.json`.
pub fn train(cfg: &RunConfig, data: &RunData, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let trainer = build_trainer(cfg, data)?;
    train_from(cfg, data, trainer, out_dir)
}

/// Continues training an existing trainer.
pub fn train_from(cfg: &RunConfig, data: &RunData, mut trainer: Trainer, out_dir: Option<&Path>) -> Result<RunOutcome> {
    check_compatible(trainer.arch(), data)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.resolved.toml");
        std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
    }
    let n = trainer.arch().n_groups();
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));
    let mut drv = Driver {
        cfg,
        data,
        log: MetricsLog::new(n - 1, metrics_path.as_deref())?,
        start: Instant::now(),
        n,
        recurrent: trainer.arch().is_recurrent(),
        probes: Vec::new(),
        probe_batch: data.probe_batch(cfg.train.probe_batch, cfg.train.probe_source)?,
    };
    let t = &cfg.train;
    let per_epoch = data.batches_per_epoch(t.batch_size) as u64;
    let epochs = if t.epochs > 0 {
        t.epochs
    } else {
        t.max_steps.div_ceil(per_epoch.max(1)) as usize
    };
    let cap = if t.max_steps > 0 { t.max_steps } else { u64::MAX };
    let mut batcher = match data {
        RunData::Classes { train, .. } => Some(Batcher::new(train.len(), t.batch_size, t.shuffle, cfg.seed ^ SHUFFLE_SALT)),
        RunData::Chars { .. } => None,
    };
    let mut pipeline: Option<PipelineReport> = None;
    let mut summaries = Vec::new();

    drv.probe(&trainer, trainer.steps_done(), 0, false)?;
    for epoch in 1..=epochs {
        if trainer.steps_done() >= cap {
            break;
        }
        trainer.reset_state();
        let left = (cap - trainer.steps_done()).min(per_epoch) as usize;
        let order: Vec<Vec<usize>> = match (&mut batcher, data) {
            (Some(b), _) => b.next_epoch().into_iter().take(left).collect(),
            (None, RunData::Chars { train, .. }) => (0..train.windows().min(left)).map(|k| vec![k]).collect(),
            _ => unreachable!("class data always has a batcher"),
        };
        let mut acc = EpochAcc::new(n);
        let mut pos = 0;
        while pos < order.len() {
            let done = trainer.steps_done();
            let mut seg_end = order.len();
            if let Some(k) = done.checked_div(t.probe_every) {
                let next_probe = (k + 1) * t.probe_every;
                seg_end = seg_end.min(pos + (next_probe - done) as usize);
            }
            let segment = &order[pos..seg_end];
            let make = |b: &Vec<usize>| match data {
                RunData::Classes { train, .. } => class_input(train, b),
                RunData::Chars { train, .. } => char_input(train, b[0]),
            };
            match t.mode {
                Mode::Sequential => {
                    for b in segment {
                        let rec = trainer.step(make(b))?;
                        acc.add(&rec);
                        drv.on_record(&rec, epoch)?;
                    }
                }
                Mode::Decoupled => {
                    let mut records = Vec::with_capacity(segment.len());
                    let report = trainer.run_decoupled(segment.iter().map(make), t.max_inflight, |r| records.push(r))?;
                    for rec in &records {
                        acc.add(rec);
                        drv.on_record(rec, epoch)?;
                    }
                    merge_pipeline(&mut pipeline, report);
                }
            }
            pos = seg_end;
            let done = trainer.steps_done();
            if t.probe_every > 0 && done.is_multiple_of(t.probe_every) && pos < order.len() {
                drv.probe(&trainer, done, epoch, false)?;
            }
        }
        let step = trainer.steps_done();
        drv.probe(&trainer, step, epoch, true)?;
        let eval = evaluate_heads(&trainer.snapshot(), data, t.eval_heads)?;
        drv.epoch_rows(&acc, epoch, step, &eval)?;
        summaries.push(EpochSummary {
            epoch,
            steps: step,
            head_loss: acc.loss.iter().map(|l| l / acc.steps as f64).collect(),
            head_accuracy: acc.correct.iter().zip(&acc.count).map(|(c, k)| *c as f64 / *k as f64).collect(),
            loss_gaps: acc.gaps.iter().map(|g| g / acc.steps as f64).collect(),
            eval,
        });
    }

    let wall_secs = drv.start.elapsed().as_secs_f64();
    let metrics_csv = drv.log.to_csv();
    let rows = drv.log.into_rows()?;
    let outcome = RunOutcome {
        trainer,
        rows,
        metrics_csv,
        probes: drv.probes,
        epochs: summaries,
        pipeline,
        wall_secs,
    };
    if let Some(dir) = out_dir {
        write_outputs(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

fn merge_pipeline(total: &mut Option<PipelineReport>, part: PipelineReport) {
    match total {
        None => *total = Some(part),
        Some(t) => {
            t.batches += part.batches;
            for (a, b) in t.links.iter_mut().zip(part.links) {
                a.forwarded.extend(b.forwarded);
                a.acknowledged.extend(b.acknowledged);
            }
            for (a, b) in t.workers.iter_mut().zip(part.workers) {
                a.forward_steps += b.forward_steps;
                a.critic_steps += b.critic_steps;
                a.busy += b.busy;
                a.wall += b.wall;
            }
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    preset: &'a str,
    n_critics: usize,
    mode: Mode,
    seed: u64,
    steps: u64,
    epochs: usize,
    heads: &'a [HeadEval],
    #[serde(skip_serializing_if = "Option::is_none")]
    messages_conserved: Option<bool>,
}

#[derive(Serialize)]
struct WorkerUtil {
    worker: usize,
    forward_steps: u64,
    critic_steps: u64,
    busy_secs: f64,
    wall_secs: f64,
    utilization: f64,
}

#[derive(Serialize)]
struct Utilization {
    wall_secs: f64,
    workers: Vec<WorkerUtil>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutcome) -> Result<()> {
    checkpoint::save(&dir.join("checkpoint.bin"), cfg, &out.trainer)?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            preset: &cfg.model.preset,
            n_critics: cfg.model.n_critics,
            mode: cfg.train.mode,
            seed: cfg.seed,
            steps: out.trainer.steps_done(),
            epochs: out.epochs.len(),
            heads: out.final_eval(),
            messages_conserved: out.pipeline.as_ref().map(PipelineReport::conserved),
        },
    )?;
    if out.pipeline.is_some() || cfg.train.log_wall_clock {
        let workers = out
            .pipeline
            .as_ref()
            .map(|p| {
                p.workers
                    .iter()
                    .map(|w| WorkerUtil {
                        worker: w.index,
                        forward_steps: w.forward_steps,
                        critic_steps: w.critic_steps,
                        busy_secs: w.busy.as_secs_f64(),
                        wall_secs: w.wall.as_secs_f64(),
                        utilization: w.utilization(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        write_json(
            &dir.join("utilization.json"),
            &Utilization {
                wall_secs: out.wall_secs,
                workers,
            },
        )?;
    }
    Ok(())
}
