//! Straight-line loop implementations of the network's layers, kept deliberately
//! naive and independent of the autodiff graph. Used as test oracles.
#![allow(clippy::needless_range_loop)]

use crate::model::{GateFn, Model};
use crate::tensor::{Scalar, Tensor};

type T64 = Tensor<f64>;

fn map4(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> T64 {
    let mut data = Vec::with_capacity(n * c * h * w);
    for a in 0..n {
        for b in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(a, b, y, x));
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], data).expect("non-empty shape")
}

fn dims(t: &T64) -> (usize, usize, usize, usize) {
    t.dims4().expect("4-d tensor")
}

/// Zero-padded same-size cross-correlation.
pub fn conv(x: &T64, w: &T64, b: Option<&T64>) -> T64 {
    let (n, cin, h, wd) = dims(x);
    let (cout, _, k, _) = dims(w);
    let pad = (k / 2) as isize;
    map4(n, cout, h, wd, |s, co, y, xx| {
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    let sx = xx as isize + kx as isize - pad;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                        acc += w.at4(co, ci, ky, kx) * x.at4(s, ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    })
}

/// `(x − mean) / √(var + eps) · γ + β` with biased statistics over N·H·W.
pub fn batch_norm(x: &T64, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> T64 {
    let (n, c, h, w) = dims(x);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        if let Some((m, v)) = stats {
            mean[ch] = m[ch];
            var[ch] = v[ch];
            continue;
        }
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| (0..h).flat_map(move |y| (0..w).map(move |xx| (s, y, xx))))
            .map(|(s, y, xx)| x.at4(s, ch, y, xx))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        mean[ch] = m;
        var[ch] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    }
    map4(n, c, h, w, |s, ch, y, xx| (x.at4(s, ch, y, xx) - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch])
}

pub fn relu(x: &T64) -> T64 {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &T64) -> T64 {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn zip(a: &T64, b: &T64, f: impl Fn(f64, f64) -> f64) -> T64 {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).expect("same shape")
}

pub fn concat(a: &T64, b: &T64) -> T64 {
    let (n, ca, h, w) = dims(a);
    let cb = dims(b).1;
    map4(n, ca + cb, h, w, |s, c, y, x| if c < ca { a.at4(s, c, y, x) } else { b.at4(s, c - ca, y, x) })
}

pub fn global_avg_pool(x: &T64) -> T64 {
    let (n, c, h, w) = dims(x);
    map4(n, c, 1, 1, |s, ch, _, _| {
        let mut acc = 0.0;
        for y in 0..h {
            for xx in 0..w {
                acc += x.at4(s, ch, y, xx);
            }
        }
        acc / (h * w) as f64
    })
}

/// `out[c, r·h+i, r·w+j] = x[c·r² + i·r + j, h, w]`.
pub fn pixel_shuffle(x: &T64, r: usize) -> T64 {
    let (n, c, h, w) = dims(x);
    map4(n, c / (r * r), h * r, w * r, |s, ch, y, xx| x.at4(s, ch * r * r + (y % r) * r + xx % r, y / r, xx / r))
}

pub fn space_to_depth(x: &T64, r: usize) -> T64 {
    let (n, c, h, w) = dims(x);
    map4(n, c * r * r, h / r, w / r, |s, ch, y, xx| {
        let (co, rem) = (ch / (r * r), ch % (r * r));
        x.at4(s, co, y * r + rem / r, xx * r + rem % r)
    })
}

/// Batch-norm handling for the reference network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    Batch,
    Running,
}

/// Reference forward pass over a model's weights, in `f64`.
pub struct RefNet {
    model: Model<f64>,
    norm: NormStats,
}

impl RefNet {
    pub fn new<T: Scalar>(model: &Model<T>, norm: NormStats) -> Self {
        Self { model: model.cast(), norm }
    }

    fn p(&self, name: &str) -> &T64 {
        self.model.params().get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn conv(&self, name: &str, x: &T64) -> T64 {
        conv(x, self.p(&format!("{name}.weight")), Some(self.p(&format!("{name}.bias"))))
    }

    pub fn bn(&self, name: &str, x: &T64) -> T64 {
        let g = self.p(&format!("{name}.weight")).data();
        let b = self.p(&format!("{name}.bias")).data();
        let buf = |s: &str| self.model.buffers().get(&format!("{name}.{s}")).expect("buffer").data();
        let stats = match self.norm {
            NormStats::Batch => None,
            NormStats::Running => Some((buf("running_mean"), buf("running_var"))),
        };
        batch_norm(x, g, b, stats, crate::model::BN_EPS)
    }

    pub fn basic_block(&self, name: &str, x: &T64) -> T64 {
        relu(&self.bn(&format!("{name}.bn"), &self.conv(&format!("{name}.conv"), x)))
    }

    fn attention(&self, name: &str, x: &T64) -> T64 {
        let y = relu(&self.bn(&format!("{name}.bn1"), &self.conv(&format!("{name}.conv1"), x)));
        self.bn(&format!("{name}.bn2"), &self.conv(&format!("{name}.conv2"), &y))
    }

    pub fn ffm(&self, name: &str, f: &T64, enh: &T64) -> T64 {
        let fuse = self.basic_block(&format!("{name}.fuse"), &concat(f, enh));
        let local = self.attention(&format!("{name}.local"), &fuse);
        let global = self.attention(&format!("{name}.global"), &global_avg_pool(&fuse));
        let (n, c, h, w) = dims(&fuse);
        map4(n, c, h, w, |s, ch, y, x| {
            let a = global.at4(s, ch, 0, 0) + local.at4(s, ch, y, x);
            f.at4(s, ch, y, x) + fuse.at4(s, ch, y, x) / (1.0 + (-a).exp())
        })
    }

    pub fn lateral(&self, name: &str, a: &T64, b: &T64) -> T64 {
        zip(a, &self.conv(&format!("{name}.lateral"), &concat(a, b)), |x, y| x + y)
    }

    pub fn fem_gate(&self, name: &str, x: &T64) -> T64 {
        let ft = self.basic_block(&format!("{name}.block"), x);
        let w = self.conv(&format!("{name}.w"), &ft);
        let b = self.conv(&format!("{name}.b"), &ft);
        let (n, c, h, wd) = dims(&ft);
        map4(n, c, h, wd, |s, ch, y, xx| w.at4(s, ch, y, xx) * ft.at4(s, ch, y, xx) + b.at4(s, ch, y, xx))
    }

    /// Double loop over positions: `out[c, j] = Σ_i v[c, i] · g(Σ_k q[k, i] · k[k, j])`.
    pub fn cross_attention_map(&self, name: &str, own: &T64, other: &T64) -> T64 {
        let v = self.conv(&format!("{name}.v"), own);
        let q = self.conv(&format!("{name}.q"), other);
        let k = self.conv(&format!("{name}.k"), other);
        let (n, c, h, w) = dims(&v);
        let c1 = dims(&q).1;
        let hw = h * w;
        let at = |t: &T64, s: usize, ch: usize, i: usize| t.at4(s, ch, i / w, i % w);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for s in 0..n {
            let mut m = vec![vec![0.0; hw]; hw];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = (0..c1).map(|ch| at(&q, s, ch, i) * at(&k, s, ch, j)).sum();
                }
                match self.model.config().fem_gate_fn {
                    GateFn::Sigmoid => row.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
                    GateFn::Softmax => {
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
                    }
                }
            }
            for ch in 0..c {
                for j in 0..hw {
                    let acc: f64 = (0..hw).map(|i| at(&v, s, ch, i) * m[i][j]).sum();
                    out.data_mut()[((s * c + ch) * h + j / w) * w + j % w] = acc;
                }
            }
        }
        out
    }

    pub fn fem(&self, index: usize, pos: &T64, neg: &T64) -> (T64, T64) {
        let gp = self.fem_gate(&format!("fem{index}.pos.gate"), pos);
        let gn = self.fem_gate(&format!("fem{index}.neg.gate"), neg);
        let ap = self.cross_attention_map(&format!("fem{index}.pos.attn"), &gp, &gn);
        let an = self.cross_attention_map(&format!("fem{index}.neg.attn"), &gn, &gp);
        (zip(&gp, &ap, |a, b| a + b), zip(&gn, &an, |a, b| a + b))
    }

    pub fn residual_block(&self, name: &str, x: &T64) -> T64 {
        let y = self.conv(&format!("{name}.conv2"), &relu(&self.conv(&format!("{name}.conv1"), x)));
        zip(x, &y, |a, b| a + b)
    }

    pub fn enhancement(&self, frame: &T64, h: &T64, o: &T64) -> T64 {
        let f = self.conv("enh.frame", frame);
        let prev = self.conv("enh.prev", &space_to_depth(o, self.model.config().scale));
        relu(&self.conv("enh.fuse", &concat(&concat(&f, h), &prev)))
    }

    /// One step; returns `(O_t, h_t)`.
    pub fn step(&self, pos: &T64, neg: &T64, frame: &T64, h: &T64, o: &T64) -> (T64, T64) {
        use crate::model::{BranchMode, FusionMode};
        let cfg = self.model.config();
        let inject = |name: &str, f: &T64, enh: &T64| match cfg.ffm_mode {
            FusionMode::Module => self.ffm(name, f, enh),
            FusionMode::Lateral => self.lateral(name, f, enh),
        };
        let enh = self.enhancement(frame, h, o);
        let joined = match cfg.branch_mode {
            BranchMode::Multi => {
                let mut fp = inject("ffm.pos", &relu(&self.conv("input.pos", pos)), &enh);
                let mut fn_ = inject("ffm.neg", &relu(&self.conv("input.neg", neg)), &enh);
                for i in 0..cfg.num_blocks {
                    let rp = self.residual_block(&format!("branch.pos.block{i}"), &fp);
                    let rn = self.residual_block(&format!("branch.neg.block{i}"), &fn_);
                    (fp, fn_) = match cfg.fem_mode {
                        FusionMode::Module => self.fem(i, &rp, &rn),
                        FusionMode::Lateral => {
                            (self.lateral(&format!("fem{i}.pos"), &rp, &rn), self.lateral(&format!("fem{i}.neg"), &rn, &rp))
                        }
                    };
                }
                concat(&fp, &fn_)
            }
            BranchMode::Single => {
                let x = concat(&concat(pos, neg), frame);
                let mut f = inject("ffm.joint", &relu(&self.conv("input.joint", &x)), &enh);
                for i in 0..cfg.num_blocks {
                    f = self.residual_block(&format!("branch.joint.block{i}"), &f);
                }
                f
            }
        };
        let fused = relu(&self.conv("fuse", &joined));
        (pixel_shuffle(&self.conv("head", &fused), cfg.scale), self.conv("state", &fused))
    }

    /// `Σ_t mean((O_t − Y_t)²)` from the zero state.
    /// Each step is `(pos, neg, frame, target)`.
    pub fn sequence_loss(&self, steps: &[(T64, T64, T64, T64)]) -> f64 {
        let cfg = self.model.config();
        let (n, _, h, w) = dims(&steps[0].0);
        let mut hs = Tensor::zeros(&[n, cfg.channels, h, w]);
        let mut o = Tensor::zeros(&[n, 2, h * cfg.scale, w * cfg.scale]);
        let mut total = 0.0;
        for (p, q, f, y) in steps {
            let (out, next_h) = self.step(p, q, f, &hs, &o);
            let mut se = 0.0;
            for (a, b) in out.data().iter().zip(y.data()) {
                se += (a - b) * (a - b);
            }
            total += se / out.numel() as f64;
            hs = next_h;
            o = out;
        }
        total
    }
}
