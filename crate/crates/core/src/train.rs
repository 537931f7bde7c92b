//! Classifier on top of a fusion model, trained with Adam on synthetic tasks.
//!
//! Questions are embedded with a token table plus learned positions, the
//! image grid enters the fusion model directly, and the fused tokens are
//! mean-pooled into a linear head trained with softmax cross-entropy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionKind, FusionModel, InputShape, EMBED_STD};
use crate::graph::{Graph, Var};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::rng::{derive, seeded};
use crate::sampler::{sample_batch_composition, TaskMixState, DEFAULT_DECAY};
use crate::tasks::{sample_one, SyntheticSample, TaskSpec, QUESTION_LEN};
use crate::tensor::Tensor;

// Stream tags for seed derivation.
const STREAM_INIT: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_MIX: u64 = 4;

/// Fusion model plus question embedding and classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub fusion: FusionModel,
    pub embed: ParamId,
    pub text_pos: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub classes: usize,
    pub vocab: usize,
}

impl TaskModel {
    /// Builds a model able to answer every task in `specs`; they must share
    /// the grid and the colour/shape sets.
    pub fn build(store: &mut ParamStore, kind: FusionKind, config: &FusionConfig, specs: &[TaskSpec], seed: u64) -> Result<Self> {
        let first = specs.first().ok_or_else(|| Error::Config("no tasks given".into()))?;
        for s in specs {
            s.validate()?;
            if (s.grid_h, s.grid_w, s.colors, s.shapes) != (first.grid_h, first.grid_w, first.colors, first.shapes) {
                return Err(Error::Config("tasks in a mixture must share grid, colours and shapes".into()));
            }
        }
        let input = InputShape {
            text_len: QUESTION_LEN,
            grid_h: first.grid_h,
            grid_w: first.grid_w,
            channels: first.channels(),
        };
        let mut rng = seeded(derive(seed, STREAM_INIT));
        let fusion = FusionModel::build(store, kind, config, input, &mut rng)?;
        let d = config.width;
        let classes = specs.iter().map(TaskSpec::classes).max().unwrap_or(2);
        let vocab = first.vocab_size();
        Ok(Self {
            embed: store.normal("embed.tokens", &[vocab, d], 1.0, &mut rng)?,
            text_pos: store.normal("embed.pos", &[QUESTION_LEN, d], EMBED_STD, &mut rng)?,
            head_w: store.normal("head.w", &[d, classes], 1.0 / libm::sqrt(d as f64), &mut rng)?,
            head_b: store.constant("head.b", &[classes], 0.0)?,
            fusion,
            classes,
            vocab,
        })
    }

    pub fn new(kind: FusionKind, config: &FusionConfig, specs: &[TaskSpec], seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::build(&mut store, kind, config, specs, seed)?;
        Ok((model, store))
    }

    /// Records the forward pass and returns `[1×classes]` logits. With
    /// `ablate_image` the image grid is replaced by zeros.
    pub fn logits(&self, g: &mut Graph, sample: &SyntheticSample, ablate_image: bool) -> Result<Var> {
        let table = g.param(self.embed);
        let tokens = g.gather_rows(table, &sample.question)?;
        let pos = g.param(self.text_pos);
        let text = g.add(tokens, pos)?;
        let image = if ablate_image {
            g.input(&Tensor::zeros(sample.image.shape()))
        } else {
            g.input(&sample.image)
        };
        let fused = self.fusion.forward(g, text, image)?;
        let pooled = g.mean_rows(fused)?;
        let (w, b) = (g.param(self.head_w), g.param(self.head_b));
        g.linear(pooled, w, b)
    }

    pub fn predict(&self, store: &ParamStore, sample: &SyntheticSample, ablate_image: bool) -> Result<usize> {
        let mut g = Graph::with_params(store);
        let logits = self.logits(&mut g, sample, ablate_image)?;
        Ok(argmax(g.value(logits)))
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
        .0
}

/// Fraction of `samples` answered correctly.
pub fn evaluate(model: &TaskModel, store: &ParamStore, samples: &[SyntheticSample], ablate_image: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if model.predict(store, s, ablate_image)? == s.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last step).
    pub eval_every: usize,
    /// Size of the fixed evaluation set, per task.
    pub eval_samples: usize,
    /// Stop at the first evaluation reaching this accuracy.
    pub stop_at_accuracy: Option<f64>,
    /// Feed zeros instead of the image during training and evaluation.
    pub ablate_image: bool,
    /// Parameters (by exact name) left at their initial values.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 100,
            eval_samples: 256,
            stop_at_accuracy: None,
            ablate_image: false,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch_size, eval_every and eval_samples must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("stop accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    frozen: Vec<bool>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        for name in &cfg.frozen {
            if store.id(name).is_none() {
                return Err(Error::Config(format!("cannot freeze unknown parameter `{name}`")));
            }
        }
        let sizes: Vec<usize> = store.iter().map(|(_, _, t)| t.numel()).collect();
        Ok(Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            frozen: store.iter().map(|(_, n, _)| cfg.frozen.iter().any(|f| f == n)).collect(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(id) else { continue };
            if self.frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / (libm::sqrt(v[j] / c2) + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Accuracy at the most recent evaluation.
    pub eval_acc: f64,
    /// Forward FLOPs spent on training samples so far.
    pub cum_flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRow {
    pub step: usize,
    pub task: usize,
    pub ema_loss: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Per-task sampling trajectory; empty for single-task runs.
    pub weights: Vec<WeightRow>,
    /// Accuracy before the first step.
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,eval_acc,cum_flops";
pub const WEIGHT_LOG_HEADER: &str = "step,task,ema_loss,weight";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.eval_acc, r.cum_flops);
        }
        out
    }

    pub fn weights_csv(&self, task_names: &[&str]) -> String {
        let mut out = String::from(WEIGHT_LOG_HEADER);
        out.push('\n');
        for r in &self.weights {
            let task = task_names.get(r.task).copied().unwrap_or("?");
            let _ = writeln!(out, "{},{},{},{}", r.step, task, r.ema_loss, r.weight);
        }
        out
    }

    /// Cumulative training FLOPs at the first evaluation reaching `accuracy`.
    pub fn flops_to_reach(&self, accuracy: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.eval_acc >= accuracy).map(|r| r.cum_flops)
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_flops)
    }
}

/// Trains on one task. See [`train_mixture`].
pub fn train(model: &TaskModel, store: &mut ParamStore, spec: &TaskSpec, cfg: &TrainConfig) -> Result<TrainLog> {
    train_mixture(model, store, core::slice::from_ref(spec), cfg, DEFAULT_DECAY, 0.0)
}

/// Fixed evaluation set: `eval_samples` per task, drawn from a seed derived
/// from the training seed.
pub fn eval_set(specs: &[TaskSpec], cfg: &TrainConfig) -> Result<Vec<SyntheticSample>> {
    let mut rng = seeded(derive(cfg.seed, STREAM_EVAL));
    let mut out = Vec::with_capacity(specs.len() * cfg.eval_samples);
    for spec in specs {
        for _ in 0..cfg.eval_samples {
            out.push(sample_one(spec, &mut rng)?);
        }
    }
    Ok(out)
}

/// Trains on a mixture of tasks. Every step draws fresh samples; with more
/// than one task the batch composition comes from a loss-proportional
/// sampler (EMA factor `decay`, minimum weight `floor`).
///
/// Deterministic given `cfg.seed`. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train_mixture(
    model: &TaskModel,
    store: &mut ParamStore,
    specs: &[TaskSpec],
    cfg: &TrainConfig,
    decay: f64,
    floor: f64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("no tasks given".into()));
    }
    if let Some(s) = specs.iter().find(|s| s.classes() > model.classes) {
        return Err(Error::Config(format!("task {} has more classes than the head", s.kind.name())));
    }
    let eval = eval_set(specs, cfg)?;
    let mut mix = TaskMixState::new(specs.len(), decay, floor)?;
    let mut rng = seeded(derive(cfg.seed, STREAM_TRAIN));
    let mut adam = Adam::new(store, cfg)?;

    let mut log = TrainLog {
        initial_accuracy: evaluate(model, store, &eval, cfg.ablate_image)?,
        ..TrainLog::default()
    };
    let mut acc = log.initial_accuracy;
    let mut cum_flops = 0u64;

    for step in 1..=cfg.steps {
        let counts = if specs.len() == 1 {
            vec![cfg.batch_size]
        } else {
            sample_batch_composition(&mix, cfg.batch_size, derive(cfg.seed, STREAM_MIX ^ (step as u64) << 8))?
        };
        let mut grads = ParamGrads::default();
        let mut total_loss = 0.0;
        let mut task_loss = vec![0.0; specs.len()];
        for (task, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let sample = sample_one(&specs[task], &mut rng)?;
                let (loss, g, flops) = sample_gradients(model, store, &sample, cfg.ablate_image).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Divergence { step, loss: f64::NAN },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { step, loss });
                }
                grads.add_assign(&g);
                total_loss += loss;
                task_loss[task] += loss;
                cum_flops += flops;
            }
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        adam.step(store, &grads);

        if specs.len() > 1 {
            for (task, &count) in counts.iter().enumerate() {
                if count > 0 {
                    mix.update_loss(task, task_loss[task] / count as f64)?;
                }
            }
            for task in 0..specs.len() {
                log.weights.push(WeightRow {
                    step,
                    task,
                    ema_loss: mix.ema_loss(task).unwrap_or(f64::NAN),
                    weight: mix.weights()[task],
                });
            }
        }

        let last = step == cfg.steps;
        if step % cfg.eval_every == 0 || last {
            acc = evaluate(model, store, &eval, cfg.ablate_image)?;
        }
        log.rows.push(LogRow {
            step,
            loss: total_loss / cfg.batch_size as f64,
            eval_acc: acc,
            cum_flops,
        });
        if cfg.stop_at_accuracy.is_some_and(|target| acc >= target) && (step % cfg.eval_every == 0 || last) {
            break;
        }
    }
    log.final_accuracy = acc;
    Ok(log)
}

/// Loss, parameter gradients and forward FLOPs of one sample.
fn sample_gradients(
    model: &TaskModel,
    store: &ParamStore,
    sample: &SyntheticSample,
    ablate_image: bool,
) -> Result<(f64, ParamGrads, u64)> {
    let mut g = Graph::with_params(store);
    let logits = model.logits(&mut g, sample, ablate_image)?;
    let loss = g.cross_entropy(logits, sample.answer)?;
    let flops = g.counter().total_flops();
    let value = g.scalar(loss);
    Ok((value, g.backward(loss)?.into_params(), flops))
}

/// Randomly relabelled copy of `samples`, used to probe chance-level accuracy.
pub fn shuffled_labels(samples: &[SyntheticSample], classes: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = seeded(seed);
    samples
        .iter()
        .map(|s| SyntheticSample {
            answer: rng.random_range(0..classes),
            ..s.clone()
        })
        .collect()
}
