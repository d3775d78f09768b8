//! Forward pass: every layer records onto a [`Graph`] through a [`Forward`] context.

use std::collections::HashMap;

use super::{BranchMode, FusionMode, GateFn, Model, BN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Parameters require gradients, batch norms use batch statistics.
    Train,
    /// Running statistics, no parameter gradients.
    Eval,
}

/// Carried between steps: hidden state `[N,C,H,W]` and previous output `[N,2,rH,rW]`.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    pub h: Var,
    pub o: Var,
}

/// One time step of a batch: LR planes `[N,1,H,W]` and the HR target `[N,2,rH,rW]`.
#[derive(Clone, Debug)]
pub struct StepInput<T> {
    pub pos: Tensor<T>,
    pub neg: Tensor<T>,
    pub frame: Tensor<T>,
    pub target: Option<Tensor<T>>,
}

pub struct Forward<'a, T: Scalar> {
    graph: &'a mut Graph<T>,
    model: &'a Model<T>,
    mode: Mode,
    vars: HashMap<String, Var>,
    order: Vec<String>,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, model: &'a Model<T>, mode: Mode) -> Self {
        Self { graph, model, mode, vars: HashMap::new(), order: Vec::new(), stats: Vec::new() }
    }

    pub fn graph(&mut self) -> &mut Graph<T> {
        self.graph
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    /// Use `var` in place of the stored parameter `name`.
    pub fn bind(&mut self, name: &str, var: Var) {
        if self.vars.insert(name.to_string(), var).is_none() {
            self.order.push(name.to_string());
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.model.params.get(name).ok_or_else(|| Error::Data(format!("model has no parameter `{name}`")))?;
        let v = self.graph.leaf(t.clone(), self.mode == Mode::Train);
        self.bind(name, v);
        Ok(v)
    }

    /// Parameter leaves touched so far, in first-use order.
    pub fn param_vars(&self) -> Vec<(String, Var)> {
        self.order.iter().map(|n| (n.clone(), self.vars[n])).collect()
    }

    /// Batch statistics of every training-mode batch norm, in call order.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    pub fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.graph.conv2d(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.weight"))?;
        let beta = self.param(&format!("{name}.bias"))?;
        let (n, _, h, w) = dims(self.graph, x, "batch_norm")?;
        // A single value per channel has no batch statistics; use the running ones.
        let batch_stats = self.mode == Mode::Train && n * h * w > 1;
        match batch_stats {
            true => {
                let (y, s) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push((name.to_string(), s));
                Ok(y)
            }
            false => {
                let buf = |s: &str| {
                    self.model
                        .buffers
                        .get(&format!("{name}.{s}"))
                        .ok_or_else(|| Error::Data(format!("model has no buffer `{name}.{s}`")))
                };
                let (mean, var) = (buf("running_mean")?.data().to_vec(), buf("running_var")?.data().to_vec());
                self.graph.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }

    /// Conv3×3 → BN → ReLU.
    pub fn basic_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(self.graph.relu(y))
    }

    /// BN(1×1(ReLU(BN(1×1(x))))), used on full maps and on pooled vectors alike.
    pub fn channel_attention(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv1"), x)?;
        let y = self.batch_norm(&format!("{name}.bn1"), y)?;
        let y = self.graph.relu(y);
        let y = self.conv(&format!("{name}.conv2"), y)?;
        self.batch_norm(&format!("{name}.bn2"), y)
    }

    /// Gated injection of enhancement features:
    /// `f + fuse ⊗ σ(global(GAP(fuse)) ⊕ local(fuse))` with `fuse = BasicBlock([f, enh])`.
    pub fn ffm_forward(&mut self, name: &str, f: Var, enh: Var) -> Result<Var> {
        let cat = self.graph.concat_channels(f, enh)?;
        let fuse = self.basic_block(&format!("{name}.fuse"), cat)?;
        let local = self.channel_attention(&format!("{name}.local"), fuse)?;
        let pooled = self.graph.global_avg_pool(fuse)?;
        let global = self.channel_attention(&format!("{name}.global"), pooled)?;
        let logits = self.graph.broadcast_add(global, local)?;
        let gate = self.graph.sigmoid(logits);
        let gated = self.graph.mul(fuse, gate)?;
        self.graph.add(f, gated)
    }

    /// `a + 1×1([a, b])`, the ablation stand-in for both attention modules.
    pub fn lateral(&mut self, name: &str, a: Var, b: Var) -> Result<Var> {
        let cat = self.graph.concat_channels(a, b)?;
        let mix = self.conv(&format!("{name}.lateral"), cat)?;
        self.graph.add(a, mix)
    }

    /// `w(F̃) ⊗ F̃ + b(F̃)` with `F̃ = BasicBlock(x)`.
    pub fn fem_gate(&mut self, name: &str, x: Var) -> Result<Var> {
        let ft = self.basic_block(&format!("{name}.block"), x)?;
        let w = self.conv(&format!("{name}.w"), ft)?;
        let b = self.conv(&format!("{name}.b"), ft)?;
        let wf = self.graph.mul(w, ft)?;
        self.graph.add(wf, b)
    }

    /// `V · gate(Qᵀ K)` reshaped back to a map, where `V` projects `own` and
    /// `Q`, `K` project `other`. Not yet added to `own`.
    pub fn cross_attention_map(&mut self, name: &str, own: Var, other: Var) -> Result<Var> {
        let shape = self.graph.shape(own).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape("fem_cross_attention", format!("expected [N,C,H,W], got {shape:?}")));
        };
        let hw = h * w;
        let ceiling = self.model.config.max_attention_positions;
        if hw > ceiling {
            return Err(Error::Resource(format!(
                "cross-branch attention over {h}x{w} = {hw} positions exceeds the ceiling of {ceiling}"
            )));
        }
        let v = self.conv(&format!("{name}.v"), own)?;
        let q = self.conv(&format!("{name}.q"), other)?;
        let k = self.conv(&format!("{name}.k"), other)?;
        let c1 = self.graph.shape(q)[1];
        let v = self.graph.reshape(v, &[n, c, hw])?;
        let q = self.graph.reshape(q, &[n, c1, hw])?;
        let k = self.graph.reshape(k, &[n, c1, hw])?;
        let qt = self.graph.transpose(q)?;
        let scores = self.graph.matmul(qt, k)?;
        let m = match self.model.config.fem_gate_fn {
            GateFn::Sigmoid => self.graph.sigmoid(scores),
            GateFn::Softmax => self.graph.softmax_rows(scores)?,
        };
        let out = self.graph.matmul(v, m)?;
        self.graph.reshape(out, &[n, c, h, w])
    }

    pub fn fem_cross_attention(&mut self, name: &str, own: Var, other: Var) -> Result<Var> {
        let att = self.cross_attention_map(name, own, other)?;
        self.graph.add(own, att)
    }

    /// Gate both branches, then let each attend with the other's queries and keys.
    pub fn fem_forward(&mut self, index: usize, pos: Var, neg: Var) -> Result<(Var, Var)> {
        let gp = self.fem_gate(&format!("fem{index}.pos.gate"), pos)?;
        let gn = self.fem_gate(&format!("fem{index}.neg.gate"), neg)?;
        let op = self.fem_cross_attention(&format!("fem{index}.pos.attn"), gp, gn)?;
        let on = self.fem_cross_attention(&format!("fem{index}.neg.attn"), gn, gp)?;
        Ok((op, on))
    }

    pub fn residual_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv1"), x)?;
        let y = self.graph.relu(y);
        let y = self.conv(&format!("{name}.conv2"), y)?;
        self.graph.add(x, y)
    }

    /// ReLU(3×3([3×3(frame), h, 1×1(space_to_depth(o))])).
    pub fn build_enhancement(&mut self, frame: Var, state: RecurrentState) -> Result<Var> {
        let (nf, _, hf, wf) = dims(self.graph, frame, "build_enhancement")?;
        let (nh, _, hh, wh) = dims(self.graph, state.h, "build_enhancement")?;
        if (nf, hf, wf) != (nh, hh, wh) {
            return Err(Error::shape(
                "build_enhancement",
                format!("frame {:?} vs hidden state {:?}", self.graph.shape(frame), self.graph.shape(state.h)),
            ));
        }
        let f = self.conv("enh.frame", frame)?;
        let prev = self.graph.space_to_depth(state.o, self.model.config.scale)?;
        if self.graph.shape(prev)[2..] != [hf, wf] {
            return Err(Error::shape(
                "build_enhancement",
                format!("previous output {:?} for input {hf}x{wf}", self.graph.shape(state.o)),
            ));
        }
        let prev = self.conv("enh.prev", prev)?;
        let cat = self.graph.concat_channels(f, state.h)?;
        let cat = self.graph.concat_channels(cat, prev)?;
        let y = self.conv("enh.fuse", cat)?;
        Ok(self.graph.relu(y))
    }

    pub fn zero_state(&mut self, n: usize, h: usize, w: usize) -> RecurrentState {
        let cfg = &self.model.config;
        let (c, r) = (cfg.channels, cfg.scale);
        let h_var = self.graph.constant(Tensor::zeros(&[n, c, h, w]));
        let o_var = self.graph.constant(Tensor::zeros(&[n, 2, h * r, w * r]));
        RecurrentState { h: h_var, o: o_var }
    }

    /// One recurrent step; returns `O_t` `[N,2,rH,rW]` and the next state.
    pub fn step(&mut self, pos: Var, neg: Var, frame: Var, state: RecurrentState) -> Result<(Var, RecurrentState)> {
        let cfg = self.model.config.clone();
        let relu_conv = |s: &mut Self, name: &str, x: Var| -> Result<Var> {
            let y = s.conv(name, x)?;
            Ok(s.graph.relu(y))
        };
        let enh_input = |s: &mut Self, name: &str, f: Var, enh: Var| match cfg.ffm_mode {
            FusionMode::Module => s.ffm_forward(name, f, enh),
            FusionMode::Lateral => s.lateral(name, f, enh),
        };
        let fused_in = match cfg.branch_mode {
            BranchMode::Multi => {
                let mut fp = relu_conv(self, "input.pos", pos)?;
                let mut fn_ = relu_conv(self, "input.neg", neg)?;
                let enh = self.build_enhancement(frame, state)?;
                fp = enh_input(self, "ffm.pos", fp, enh)?;
                fn_ = enh_input(self, "ffm.neg", fn_, enh)?;
                for i in 0..cfg.num_blocks {
                    fp = self.residual_block(&format!("branch.pos.block{i}"), fp)?;
                    fn_ = self.residual_block(&format!("branch.neg.block{i}"), fn_)?;
                    (fp, fn_) = match cfg.fem_mode {
                        FusionMode::Module => self.fem_forward(i, fp, fn_)?,
                        FusionMode::Lateral => {
                            let a = self.lateral(&format!("fem{i}.pos"), fp, fn_)?;
                            let b = self.lateral(&format!("fem{i}.neg"), fn_, fp)?;
                            (a, b)
                        }
                    };
                }
                self.graph.concat_channels(fp, fn_)?
            }
            BranchMode::Single => {
                let x = self.graph.concat_channels(pos, neg)?;
                let x = self.graph.concat_channels(x, frame)?;
                let mut f = relu_conv(self, "input.joint", x)?;
                let enh = self.build_enhancement(frame, state)?;
                f = enh_input(self, "ffm.joint", f, enh)?;
                for i in 0..cfg.num_blocks {
                    f = self.residual_block(&format!("branch.joint.block{i}"), f)?;
                }
                f
            }
        };
        let fused = relu_conv(self, "fuse", fused_in)?;
        let h = self.conv("state", fused)?;
        let head = self.conv("head", fused)?;
        let o = self.graph.pixel_shuffle(head, cfg.scale)?;
        Ok((o, RecurrentState { h, o }))
    }

    /// Run a sequence from the zero state; returns every `O_t`.
    pub fn run_sequence(&mut self, steps: &[StepInput<T>]) -> Result<Vec<Var>> {
        let first = steps.first().ok_or_else(|| Error::Data("empty sequence".into()))?;
        let (n, _, h, w) = first.pos.dims4()?;
        let mut state = self.zero_state(n, h, w);
        let mut outs = Vec::with_capacity(steps.len());
        for s in steps {
            for (plane, t) in [("pos", &s.pos), ("neg", &s.neg), ("frame", &s.frame)] {
                if t.shape() != [n, 1, h, w] {
                    return Err(Error::shape("sequence", format!("{plane} plane {:?}, expected {:?}", t.shape(), [n, 1, h, w])));
                }
            }
            let p = self.graph.constant(s.pos.clone());
            let q = self.graph.constant(s.neg.clone());
            let f = self.graph.constant(s.frame.clone());
            let (o, next) = self.step(p, q, f, state)?;
            outs.push(o);
            state = next;
        }
        Ok(outs)
    }

    /// Σ_t MSE(O_t, target_t), with gradients through the whole recurrence.
    pub fn sequence_loss(&mut self, steps: &[StepInput<T>]) -> Result<Var> {
        let outs = self.run_sequence(steps)?;
        let mut total: Option<Var> = None;
        for (o, s) in outs.into_iter().zip(steps) {
            let target = s.target.clone().ok_or_else(|| Error::Data("sequence step without a target".into()))?;
            if target.shape() != self.graph.shape(o) {
                return Err(Error::shape(
                    "sequence_loss",
                    format!("target {:?} vs output {:?}", target.shape(), self.graph.shape(o)),
                ));
            }
            let t = self.graph.constant(target);
            let l = self.graph.mse(o, t)?;
            total = Some(match total {
                Some(acc) => self.graph.add(acc, l)?,
                None => l,
            });
        }
        Ok(total.expect("non-empty sequence"))
    }
}

fn dims<T: Scalar>(g: &Graph<T>, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    g.value(v).dims4().map_err(|_| Error::shape(op, format!("expected [N,C,H,W], got {:?}", g.shape(v))))
}
