use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bicubic::{bicubic_baseline, Edge};
use super::{normalizer, stack_batch, Dataset};
use crate::error::{Error, Result};
use crate::event::{Sequence, SequenceWindow};
use crate::model::{Forward, Mode, Model, RecurrentState};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub index: usize,
    pub model_mse: f64,
    pub bicubic_mse: f64,
}

/// Mean per-window MSE of the model and of bicubic upscaling, in the
/// normalized units used for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scale: usize,
    pub model_mse: f64,
    pub bicubic_mse: f64,
    pub sequences: Vec<SequenceEval>,
    pub wall_ms_per_step: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scales: Vec<ScaleReport>,
}

fn mse(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - f64::from(y)).powi(2)).sum::<f64>() / a.len() as f64
}

/// Score `predict`'s per-window outputs (`[1,2,rH,rW]`, normalized) on every sequence.
pub fn evaluate_with<F>(data: &Dataset, normalize: bool, predict: F) -> Result<ScaleReport>
where
    F: Fn(&Sequence) -> Result<Vec<Tensor<f32>>> + Sync,
{
    let r = data.scale();
    let started = Instant::now();
    let per_seq = data
        .sequences()
        .par_iter()
        .enumerate()
        .map(|(index, seq)| {
            let outs = predict(seq)?;
            if outs.len() != seq.len() {
                return Err(Error::Data(format!("{} predictions for {} windows", outs.len(), seq.len())));
            }
            let targets = stack_batch::<f32>(&[seq], normalize)?;
            let (mut model_mse, mut bicubic_mse) = (0.0, 0.0);
            for ((win, out), step) in seq.iter().zip(&outs).zip(&targets) {
                let target = step.target.as_ref().expect("stacked with targets");
                if out.shape() != target.shape() {
                    return Err(Error::shape("evaluate", format!("{:?} vs target {:?}", out.shape(), target.shape())));
                }
                let pred: Vec<f64> = out.data().iter().map(|&v| f64::from(v)).collect();
                model_mse += mse(&pred, target.data());
                let inv = 1.0 / normalizer(win, normalize);
                let base: Vec<f64> = bicubic_baseline(&win.lr_pos, &win.lr_neg, r, Edge::default()).iter().map(|v| v * inv).collect();
                bicubic_mse += mse(&base, target.data());
            }
            let n = seq.len() as f64;
            Ok(SequenceEval { index, model_mse: model_mse / n, bicubic_mse: bicubic_mse / n })
        })
        .collect::<Result<Vec<_>>>()?;
    let windows: usize = data.sequences().iter().map(Vec::len).sum();
    let mean = |f: fn(&SequenceEval) -> f64| {
        data.sequences().iter().zip(&per_seq).map(|(s, e)| f(e) * s.len() as f64).sum::<f64>() / windows.max(1) as f64
    };
    Ok(ScaleReport {
        scale: r,
        model_mse: mean(|e| e.model_mse),
        bicubic_mse: mean(|e| e.bicubic_mse),
        wall_ms_per_step: started.elapsed().as_secs_f64() * 1e3 / windows.max(1) as f64,
        sequences: per_seq,
    })
}

/// Model outputs on each held-out sequence, running statistics in the batch norms.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<ScaleReport> {
    if data.scale() != model.config().scale {
        return Err(Error::Config(format!("dataset scale {} vs model scale {}", data.scale(), model.config().scale)));
    }
    let normalize = model.config().normalize_input;
    evaluate_with(data, normalize, |seq| {
        let inputs = stack_batch::<f32>(&[seq], normalize)?;
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, model, Mode::Eval);
        let outs = fw.run_sequence(&inputs)?;
        Ok(outs.into_iter().map(|o| g.value(o).clone()).collect())
    })
}

/// Recurrent state carried between [`infer_window`] calls.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceState {
    pub h: Tensor<f32>,
    pub o: Tensor<f32>,
}

/// One step of streaming inference on an LR window. Returns the SR planes
/// `[1,2,rH,rW]` rescaled back to counts. `state` starts as `None`.
pub fn infer_window(model: &Model<f32>, win: &SequenceWindow, state: &mut Option<InferenceState>) -> Result<Tensor<f32>> {
    let normalize = model.config().normalize_input;
    let s = normalizer(win, normalize);
    let inputs = stack_batch::<f32>(&[&vec![win.clone()]], normalize)?;
    let step = &inputs[0];
    let (_, _, h, w) = step.pos.dims4()?;
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, model, Mode::Eval);
    let st = match state.as_ref() {
        Some(prev) if prev.h.shape()[2..] == [h, w] => {
            RecurrentState { h: fw.graph().constant(prev.h.clone()), o: fw.graph().constant(prev.o.clone()) }
        }
        Some(prev) => {
            return Err(Error::shape("infer", format!("window {h}x{w} does not match carried state {:?}", prev.h.shape())))
        }
        None => fw.zero_state(1, h, w),
    };
    let p = fw.graph().constant(step.pos.clone());
    let n = fw.graph().constant(step.neg.clone());
    let f = fw.graph().constant(step.frame.clone());
    let (o, next) = fw.step(p, n, f, st)?;
    let out = g.value(o).clone();
    *state = Some(InferenceState { h: g.value(next.h).clone(), o: out.clone() });
    Ok(out.map(|v| v * s as f32))
}
