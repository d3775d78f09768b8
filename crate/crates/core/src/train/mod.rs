//! Toy datasets, the training loop, evaluation, and the bicubic baseline.

pub mod bicubic;
mod eval;

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentMethod, AugmentParams, AugmentSpec};
use crate::error::{Error, Result};
use crate::event::{build_sequences, EventCountImage, EventStream, Sequence, SequenceWindow, WindowPolicy};
use crate::model::{Forward, Mode, Model, StepInput};
use crate::rng;
use crate::synth::{synth_toy_stream, ToySceneSpec};
use crate::tensor::{Graph, Scalar, Tensor};

pub use eval::{evaluate, evaluate_with, infer_window, EvalReport, InferenceState, ScaleReport, SequenceEval};

/// HR streams and the training sequences cut from them.
#[derive(Clone, Debug)]
pub struct Dataset {
    scale: usize,
    window: WindowPolicy,
    seq_len: usize,
    streams: Vec<EventStream>,
    sequences: Vec<Sequence>,
}

impl Dataset {
    /// The first full sequence of each stream; streams too short for
    /// `seq_len` windows are an error.
    pub fn from_streams(streams: Vec<EventStream>, scale: usize, window: WindowPolicy, seq_len: usize) -> Result<Self> {
        let sequences = streams
            .iter()
            .enumerate()
            .map(|(i, s)| {
                first_sequence(s, scale, window, seq_len)?
                    .ok_or_else(|| Error::Data(format!("stream {i} yields fewer than {seq_len} windows")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { scale, window, seq_len, streams, sequences })
    }

    /// `count` toy scenes whose seeds derive from `root_seed` under `scene/<split>/<i>`.
    pub fn toy(
        scene: &ToySceneSpec,
        count: usize,
        root_seed: u64,
        split: &str,
        scale: usize,
        window: WindowPolicy,
        seq_len: usize,
    ) -> Result<Self> {
        let streams = (0..count)
            .map(|i| {
                let spec = ToySceneSpec { seed: rng::child_seed(root_seed, &format!("scene/{split}/{i}")), ..scene.clone() };
                synth_toy_stream(&spec)
            })
            .collect::<Result<_>>()?;
        Self::from_streams(streams, scale, window, seq_len)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn streams(&self) -> &[EventStream] {
        &self.streams
    }

    /// Sequence `i`, augmented on the HR stream first when `aug` is given.
    /// Falls back to the clean sequence if augmentation leaves too few windows.
    pub fn sample(&self, i: usize, aug: Option<&AugmentSpec>) -> Result<Cow<'_, Sequence>> {
        let Some(spec) = aug else {
            return Ok(Cow::Borrowed(&self.sequences[i]));
        };
        let stream = augment(&self.streams[i], spec)?;
        Ok(match first_sequence(&stream, self.scale, self.window, self.seq_len)? {
            Some(seq) => Cow::Owned(seq),
            None => Cow::Borrowed(&self.sequences[i]),
        })
    }
}

fn first_sequence(hr: &EventStream, scale: usize, window: WindowPolicy, seq_len: usize) -> Result<Option<Sequence>> {
    if hr.is_empty() {
        return Ok(None);
    }
    Ok(build_sequences(hr, scale, window, seq_len)?.into_iter().next())
}

/// Divisor applied to a window's inputs and targets: the LR frame's maximum, or 1.
pub fn normalizer(w: &SequenceWindow, normalize: bool) -> f64 {
    if normalize {
        f64::from(w.lr_frame.max().max(1))
    } else {
        1.0
    }
}

fn plane<T: Scalar>(img: &EventCountImage, inv: f64, out: &mut Vec<T>) {
    out.extend(img.counts().iter().map(|&c| T::of(f64::from(c) * inv)));
}

/// Stack one window of each sequence into `[N,·,H,W]` step inputs.
pub fn stack_batch<T: Scalar>(seqs: &[&Sequence], normalize: bool) -> Result<Vec<StepInput<T>>> {
    let first = seqs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let t_len = first.len();
    if t_len == 0 || seqs.iter().any(|s| s.len() != t_len) {
        return Err(Error::Data("sequences in a batch must share a non-zero length".into()));
    }
    let (w, h, r) = (first[0].lr_pos.width(), first[0].lr_pos.height(), first[0].scale());
    let n = seqs.len();
    (0..t_len)
        .map(|t| {
            let (mut pos, mut neg, mut frame, mut target) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in seqs {
                let win = &s[t];
                if (win.lr_pos.width(), win.lr_pos.height(), win.scale()) != (w, h, r) {
                    return Err(Error::Data("windows in a batch must share geometry".into()));
                }
                let inv = 1.0 / normalizer(win, normalize);
                plane(&win.lr_pos, inv, &mut pos);
                plane(&win.lr_neg, inv, &mut neg);
                plane(&win.lr_frame, inv, &mut frame);
                plane(&win.hr_pos, inv, &mut target);
                plane(&win.hr_neg, inv, &mut target);
            }
            Ok(StepInput {
                pos: Tensor::new(&[n, 1, h, w], pos)?,
                neg: Tensor::new(&[n, 1, h, w], neg)?,
                frame: Tensor::new(&[n, 1, h, w], frame)?,
                target: Some(Tensor::new(&[n, 2, h * r, w * r], target)?),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub seq_len: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub augment: AugmentMethod,
    pub augment_params: AugmentParams,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub eval_interval: usize,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 500,
            seq_len: 9,
            batch_size: 2,
            augment: AugmentMethod::None,
            augment_params: AugmentParams::default(),
            eval_interval: 0,
            checkpoint: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.augment_params.validate()
    }
}

/// One loss-curve record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction, state kept per parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &HashMap<String, Tensor<T>>, lr: f64) {
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, p) in model.params_mut().iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.as_f64();
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let upd = lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
                *pv = T::of(pv.as_f64() - upd);
            }
        }
    }
}

/// Deterministic epoch-shuffled batches of dataset indices.
struct Batcher {
    n: usize,
    seed: u64,
    epoch: usize,
    queue: Vec<usize>,
}

impl Batcher {
    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut order: Vec<usize> = (0..self.n).collect();
                order.shuffle(&mut rng::stream(self.seed, &format!("batches/epoch{}", self.epoch)));
                order.reverse();
                self.queue = order;
                self.epoch += 1;
            }
            out.push(self.queue.pop().expect("refilled"));
        }
        out
    }
}

/// Gradients keyed by parameter name.
pub type NamedGrads<T> = HashMap<String, Tensor<T>>;

/// Batch statistics of every train-mode normalization layer, by layer name.
pub type LayerStats<T> = Vec<(String, crate::tensor::BatchStats<T>)>;

/// The loss of one forward/backward pass and the gradients by parameter name.
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, inputs: &[StepInput<T>], step: usize) -> Result<(f64, NamedGrads<T>, LayerStats<T>)> {
    let mut g = Graph::new();
    let (loss_v, vars, stats) = {
        let mut fw = Forward::new(&mut g, model, Mode::Train);
        let l = fw.sequence_loss(inputs)?;
        (l, fw.param_vars(), fw.take_stats())
    };
    let loss = g.value(loss_v).item().as_f64();
    let mut grads = g.backward(loss_v)?;
    let mut out = HashMap::new();
    let mut bad = None;
    for (name, var) in vars {
        if let Some(gr) = grads.take(var) {
            if bad.is_none() && !gr.all_finite() {
                bad = Some(name.clone());
            }
            out.insert(name, gr);
        }
    }
    if !loss.is_finite() || bad.is_some() {
        let param = bad
            .or_else(|| model.params().iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n.to_string()))
            .unwrap_or_else(|| "loss".into());
        return Err(Error::Numerical { step, param });
    }
    Ok((loss, out, stats))
}

/// Train in place; `on_step` sees each loss record as it is produced.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if data.seq_len() != cfg.seq_len {
        return Err(Error::Config(format!("dataset built for T={}, config asks for {}", data.seq_len(), cfg.seq_len)));
    }
    if data.scale() != model.config().scale {
        return Err(Error::Config(format!("dataset scale {} vs model scale {}", data.scale(), model.config().scale)));
    }
    let normalize = model.config().normalize_input;
    let mut adam = Adam::default();
    let mut batcher = Batcher { n: data.len(), seed: cfg.seed, epoch: 0, queue: Vec::new() };
    let mut log = Vec::with_capacity(cfg.steps);
    let started = Instant::now();
    for step in 1..=cfg.steps {
        let idx = batcher.next(cfg.batch_size);
        let seqs = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let spec = (cfg.augment != AugmentMethod::None).then(|| AugmentSpec {
                    method: cfg.augment,
                    params: cfg.augment_params.clone(),
                    seed: rng::child_seed(cfg.seed, &format!("augment/{step}/{slot}")),
                });
                data.sample(i, spec.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Sequence> = seqs.iter().map(|s| s.as_ref()).collect();
        let inputs = stack_batch::<f32>(&refs, normalize)?;
        let (loss, grads, stats) = loss_and_grads(model, &inputs, step)?;
        adam.step(model, &grads, cfg.learning_rate);
        model.update_running_stats(&stats);
        if let Some((name, _)) = model.params().iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numerical { step, param: name.to_string() });
        }
        let rec = LossRecord { step, loss, lr: cfg.learning_rate, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
        on_step(&rec)?;
        log.push(rec);
        let at_interval = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
        if let Some(path) = &cfg.checkpoint {
            if at_interval || step == cfg.steps {
                model.save(path)?;
            }
        }
    }
    Ok(log)
}
