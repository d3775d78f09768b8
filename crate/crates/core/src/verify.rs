//! Built-in self checks run by `rmfnet verify`.
//!
//! Four suites: analytic against finite-difference gradients, network
//! building blocks against straight-line reference transcriptions,
//! representation invariants, and augmentation laws. Each check is
//! deterministic in the root seed.

use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;

use crate::augment::{self, AugmentMethod, AugmentParams, AugmentSpec};
use crate::error::Result;
use crate::event::{
    downsample_stream, make_event_frame, partition_windows, stack_count_image, EventStream, PolarityTag, WindowPolicy,
};
use crate::model::{Forward, Mode, Model, ModelConfig, RecurrentState, StepInput, Variant};
use crate::reference::{self, NormStats, RefNet};
use crate::rng;
use crate::synth::uniform_random_stream;
use crate::tensor::{grad_check, op_cases, random_tensor, Graph, Scalar, Tensor, Var};

/// Largest relative error allowed for a single op.
pub const OP_GRAD_TOL: f64 = 1e-4;
/// Largest relative error allowed for a whole recurrent step.
pub const STEP_GRAD_TOL: f64 = 1e-3;
/// Denominator floor of the full-step relative error. Central differences
/// of a loss of order 10 with a 1e-5 step carry about 1e-10 of rounding
/// noise, which a smaller floor would turn into spurious failures on
/// parameters whose true gradient is zero (biases feeding batch statistics).
pub const STEP_GRAD_FLOOR: f64 = 1e-6;
/// Central-difference step, scaled by `1 + |x|`.
pub const FD_STEP: f64 = 1e-5;
/// Oracle agreement in single precision, relative to `max(1, ‖reference‖∞)`.
pub const ORACLE_TOL: f64 = 1e-6;
/// Accepted share of each pool member under `selected_da`.
pub const POOL_FREQ_RANGE: (f64, f64) = (0.22, 0.28);
pub const POOL_SEEDS: u64 = 10_000;

pub const SUITES: [&str; 4] = ["gradients", "formula_oracles", "representation", "augmentation"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub wall_ms: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Randomized cases per representation and augmentation law.
    pub cases: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { cases: 1000, seed: 0 }
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), passed, detail: detail.into() }
}

pub fn run_suite(name: &str, opts: VerifyOptions) -> Result<SuiteReport> {
    let started = Instant::now();
    let (suite, checks) = match name {
        "gradients" => ("gradients", gradient_suite(opts)?),
        "formula_oracles" => ("formula_oracles", oracle_suite(opts)?),
        "representation" => ("representation", representation_suite(opts)?),
        "augmentation" => ("augmentation", augmentation_suite(opts)?),
        other => {
            return Err(crate::Error::Usage(format!("unknown suite `{other}` (one of {})", SUITES.join(", "))))
        }
    };
    Ok(SuiteReport { suite, checks, wall_ms: started.elapsed().as_secs_f64() * 1e3 })
}

pub fn run_all(opts: VerifyOptions) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, opts)).collect()
}

/// A freshly initialized model with noise added to every parameter, so no
/// bias, norm scale or zero-initialized projection sits at a special value.
pub fn perturbed_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut m = Model::new(config, seed)?;
    for (name, t) in m.params_mut().iter_mut() {
        let noise = random_tensor::<T>(t.shape(), seed, name);
        let scale = T::of(if name.ends_with(".bias") { 0.3 } else { 0.1 });
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += *n * scale;
        }
    }
    Ok(m)
}

fn rand4<T: Scalar>(shape: [usize; 4], seed: u64, label: &str) -> Tensor<T> {
    random_tensor(&shape, seed, label)
}

// ---------------------------------------------------------------- gradients

/// Worst relative error of a full recurrent step over sampled coordinates
/// of every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub coordinates: usize,
}

struct StepProbe {
    pos: Tensor<f64>,
    neg: Tensor<f64>,
    frame: Tensor<f64>,
    h: Tensor<f64>,
    o: Tensor<f64>,
    w_o: Tensor<f64>,
    w_h: Tensor<f64>,
}

impl StepProbe {
    fn new(cfg: &ModelConfig, n: usize, hw: usize, seed: u64) -> Self {
        let (c, r) = (cfg.channels, cfg.scale);
        let t = |shape, label| rand4::<f64>(shape, seed, label);
        Self {
            pos: t([n, 1, hw, hw], "probe/pos"),
            neg: t([n, 1, hw, hw], "probe/neg"),
            frame: t([n, 1, hw, hw], "probe/frame"),
            h: t([n, c, hw, hw], "probe/h"),
            o: t([n, 2, hw * r, hw * r], "probe/o"),
            w_o: t([n, 2, hw * r, hw * r], "probe/w_o"),
            w_h: t([n, c, hw, hw], "probe/w_h"),
        }
    }

    /// `Σ O⊙W_o + Σ h⊙W_h` after one step, and the parameter leaves it used.
    fn build(&self, g: &mut Graph<f64>, m: &Model<f64>) -> Result<(Var, Vec<(String, Var)>)> {
        let mut fw = Forward::new(g, m, Mode::Train);
        let c = |fw: &mut Forward<f64>, t: &Tensor<f64>| fw.graph().constant(t.clone());
        let state = RecurrentState { h: c(&mut fw, &self.h), o: c(&mut fw, &self.o) };
        let (p, q, f) = (c(&mut fw, &self.pos), c(&mut fw, &self.neg), c(&mut fw, &self.frame));
        let (o, next) = fw.step(p, q, f, state)?;
        let (wo, wh) = (c(&mut fw, &self.w_o), c(&mut fw, &self.w_h));
        let vars = fw.param_vars();
        let g = fw.graph();
        let a = g.mul(o, wo)?;
        let b = g.mul(next.h, wh)?;
        let (a, b) = (g.sum(a), g.sum(b));
        Ok((g.add(a, b)?, vars))
    }

    fn loss(&self, m: &Model<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let (l, _) = self.build(&mut g, m)?;
        Ok(g.value(l).item())
    }
}

/// Full-step gradient check on `per_param` sampled coordinates of every
/// parameter tensor (all coordinates when the tensor is that small).
pub fn step_gradient_check(m: &Model<f64>, hw: usize, per_param: usize, seed: u64) -> Result<StepGradCheck> {
    let probe = StepProbe::new(m.config(), 1, hw, seed);
    let mut g = Graph::new();
    let (loss, vars) = probe.build(&mut g, m)?;
    let grads = g.backward(loss)?;
    let mut rng = rng::stream(seed, "gradcheck/coords");
    let mut shifted = m.clone();
    let mut out = StepGradCheck { max_rel_error: 0.0, worst: String::new(), coordinates: 0 };
    for name in m.params().names() {
        let analytic = vars.iter().find(|(n, _)| n == name).and_then(|(_, v)| grads.get(*v));
        let x = m.params().get(name).expect("listed");
        let picks: Vec<usize> = if x.numel() <= per_param {
            (0..x.numel()).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..x.numel())).collect()
        };
        for i in picks {
            let x0 = x.data()[i];
            let h = FD_STEP * (1.0 + x0.abs());
            let mut at = |v: f64| -> Result<f64> {
                shifted.params_mut().get_mut(name).expect("listed").data_mut()[i] = v;
                probe.loss(&shifted)
            };
            let numeric = (at(x0 + h)? - at(x0 - h)?) / (2.0 * h);
            at(x0)?;
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(STEP_GRAD_FLOOR);
            out.coordinates += 1;
            if e > out.max_rel_error || !e.is_finite() {
                out.max_rel_error = e;
                out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(out)
}

fn gradient_suite(opts: VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for c in op_cases() {
        let r = grad_check(|g, v| (c.build)(g, v), &c.input, FD_STEP)?;
        checks.push(check(
            format!("op/{}", c.name),
            r.max_rel_error < OP_GRAD_TOL,
            format!("max rel error {:.2e} (< {OP_GRAD_TOL:e})", r.max_rel_error),
        ));
    }
    for v in Variant::ALL {
        let cfg = ModelConfig { channels: 8, num_blocks: 1, scale: 2, ..ModelConfig::default() }.with_variant(v);
        let m = perturbed_model::<f64>(cfg, opts.seed.wrapping_add(1))?;
        let r = step_gradient_check(&m, 4, 8, opts.seed)?;
        checks.push(check(
            format!("step/{}", v.name()),
            r.max_rel_error < STEP_GRAD_TOL,
            format!(
                "max rel error {:.2e} (< {STEP_GRAD_TOL:e}) over {} coordinates; worst {}",
                r.max_rel_error, r.coordinates, r.worst
            ),
        ));
    }
    Ok(checks)
}

// ---------------------------------------------------------- formula oracles

fn oracle_check(name: &str, got: &Tensor<f32>, want: &Tensor<f64>) -> Check {
    if got.shape() != want.shape() {
        return check(name, false, format!("shape {:?} vs reference {:?}", got.shape(), want.shape()));
    }
    let d = got.cast::<f64>().max_abs_diff(want);
    let mag = want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    check(name, d < ORACLE_TOL * mag, format!("max abs diff {d:.2e} (< {ORACLE_TOL:e} × {mag:.3})"))
}

fn oracle_suite(opts: VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let cfg = ModelConfig { channels: 16, num_blocks: 1, scale: 2, ..ModelConfig::default() };
    for trial in 0..3u64 {
        let seed = opts.seed.wrapping_add(100 + trial);
        let m = perturbed_model::<f32>(cfg.clone(), seed)?;
        let net = RefNet::new(&m, NormStats::Batch);
        let x = |c, label| rand4::<f32>([2, c, 4, 4], seed, label);
        let (a, b) = (x(16, "oracle/a"), x(16, "oracle/b"));

        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &m, Mode::Train);
        let (av, bv) = (fw.graph().constant(a.clone()), fw.graph().constant(b.clone()));
        let ffm = fw.ffm_forward("ffm.pos", av, bv)?;
        let gate = fw.fem_gate("fem0.neg.gate", av)?;
        let cross = fw.fem_cross_attention("fem0.pos.attn", av, bv)?;
        let res = fw.residual_block("branch.pos.block0", av)?;
        let (fp, fneg) = fw.fem_forward(0, av, bv)?;
        let (a64, b64) = (a.cast::<f64>(), b.cast::<f64>());
        let cross_ref = reference::zip(&net.cross_attention_map("fem0.pos.attn", &a64, &b64), &a64, |x, y| x + y);
        let (rp, rn) = net.fem(0, &a64, &b64);
        let g = fw.graph();
        checks.push(oracle_check(&format!("ffm_forward/{trial}"), g.value(ffm), &net.ffm("ffm.pos", &a64, &b64)));
        checks.push(oracle_check(&format!("fem_gate/{trial}"), g.value(gate), &net.fem_gate("fem0.neg.gate", &a64)));
        checks.push(oracle_check(&format!("fem_cross_attention/{trial}"), g.value(cross), &cross_ref));
        checks.push(oracle_check(&format!("fem_forward/pos/{trial}"), g.value(fp), &rp));
        checks.push(oracle_check(&format!("fem_forward/neg/{trial}"), g.value(fneg), &rn));
        checks.push(oracle_check(
            &format!("residual_block/{trial}"),
            g.value(res),
            &net.residual_block("branch.pos.block0", &a64),
        ));

        let steps: Vec<StepInput<f32>> = (0..3)
            .map(|t| {
                let l = |k: &str| format!("oracle/seq{t}/{k}");
                StepInput {
                    pos: rand4([2, 1, 4, 4], seed, &l("pos")),
                    neg: rand4([2, 1, 4, 4], seed, &l("neg")),
                    frame: rand4([2, 1, 4, 4], seed, &l("frame")),
                    target: Some(rand4([2, 2, 8, 8], seed, &l("target"))),
                }
            })
            .collect();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &m, Mode::Train);
        let l = fw.sequence_loss(&steps)?;
        let got = f64::from(fw.graph().value(l).item());
        let ref_steps: Vec<_> = steps
            .iter()
            .map(|s| (s.pos.cast(), s.neg.cast(), s.frame.cast(), s.target.as_ref().expect("set").cast()))
            .collect();
        let want = net.sequence_loss(&ref_steps);
        let d = (got - want).abs();
        checks.push(check(
            format!("sequence_loss/{trial}"),
            d < ORACLE_TOL * want.abs().max(1.0),
            format!("{got:.9} vs reference {want:.9} (diff {d:.2e})"),
        ));
    }
    Ok(checks)
}

// ----------------------------------------------------------- representation

fn random_stream(rng: &mut rng::Rng, seed: u64) -> EventStream {
    let f = [1usize, 2, 4][rng.random_range(0..3)];
    let w = f * rng.random_range(1..=8);
    let h = f * rng.random_range(1..=8);
    let n = rng.random_range(0..=300);
    let span = rng.random_range(1..=20_000);
    uniform_random_stream(seed, w, h, n, span)
}

/// Counts each law over `cases` random streams; the first violation is reported.
struct Tally {
    name: &'static str,
    cases: usize,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, failure: None }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(detail());
        }
    }

    fn finish(self) -> Check {
        let passed = self.failure.is_none();
        let detail = self.failure.unwrap_or_else(|| format!("{} cases", self.cases));
        check(self.name, passed, detail)
    }
}

fn representation_suite(opts: VerifyOptions) -> Result<Vec<Check>> {
    let mut conservation = Tally::new("eci_count_conservation");
    let mut frame = Tally::new("frame_equals_pos_plus_neg");
    let mut block = Tally::new("downsample_block_sum");
    let mut shuffle = Tally::new("pixel_shuffle_inversion");
    let mut partition = Tally::new("partition_round_trip");
    let mut rng = rng::stream(opts.seed, "verify/representation");
    for case in 0..opts.cases {
        let seed = rng::child_seed(opts.seed, &format!("verify/representation/{case}"));
        let s = random_stream(&mut rng, seed);
        let pos = stack_count_image(&s, PolarityTag::Positive);
        let neg = stack_count_image(&s, PolarityTag::Negative);
        let all = stack_count_image(&s, PolarityTag::All);
        conservation.record(pos.total() + neg.total() == s.len() as u64 && all.total() == s.len() as u64, || {
            format!("case {case}: {} + {} vs {} events", pos.total(), neg.total(), s.len())
        });
        let f = make_event_frame(&s);
        let sum = pos.add(&neg)?;
        frame.record(f.counts() == sum.counts() && f.counts() == all.counts(), || format!("case {case}"));

        let factor = [1usize, 2, 4].into_iter().filter(|k| s.width().is_multiple_of(*k) && s.height().is_multiple_of(*k)).max().unwrap_or(1);
        let lr = downsample_stream(&s, factor)?;
        let lhs = stack_count_image(&lr, PolarityTag::All);
        let rhs = all.block_sum(factor)?;
        block.record(lhs == rhs && lr.len() == s.len(), || format!("case {case}: factor {factor}"));

        let r = [1usize, 2, 3, 4][rng.random_range(0..4)];
        let (c, hh, ww) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let x = random_tensor::<f64>(&[1, c * r * r, hh, ww], seed, "verify/shuffle");
        let y = random_tensor::<f64>(&[1, c, hh * r, ww * r], seed, "verify/unshuffle");
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let up = g.pixel_shuffle(xv, r)?;
        let back = g.space_to_depth(up, r)?;
        let down = g.space_to_depth(yv, r)?;
        let again = g.pixel_shuffle(down, r)?;
        let oracle = reference::pixel_shuffle(&x, r);
        shuffle.record(g.value(back) == &x && g.value(again) == &y && g.value(up) == &oracle, || {
            format!("case {case}: r={r}, c={c}, {hh}x{ww}")
        });

        let policy = if rng.random_bool(0.5) {
            WindowPolicy::FixedDuration(rng.random_range(1..=5_000))
        } else {
            WindowPolicy::FixedCount(rng.random_range(1..=64))
        };
        let windows = partition_windows(&s, policy)?;
        let mut next = 0;
        let mut ok = true;
        let mut rebuilt = Vec::with_capacity(s.len());
        // Fixed-count boundaries may split a run of equal timestamps, so an
        // event there can sit at its window's end time.
        let tied = matches!(policy, WindowPolicy::FixedCount(_));
        for (i, w) in windows.iter().enumerate() {
            ok &= w.events.start == next && (w.t_start < w.t_end || tied && w.t_start == w.t_end);
            ok &= i == 0 || windows[i - 1].t_end == w.t_start;
            ok &= s.events()[w.events.clone()]
                .iter()
                .all(|e| e.t >= w.t_start && (e.t < w.t_end || tied && e.t == w.t_end));
            rebuilt.extend_from_slice(&s.events()[w.events.clone()]);
            next = w.events.end;
        }
        ok &= next == s.len() && rebuilt == s.events();
        partition.record(ok, || format!("case {case}: {policy:?}"));
    }
    Ok(vec![conservation.finish(), frame.finish(), block.finish(), shuffle.finish(), partition.finish()])
}

// ------------------------------------------------------------- augmentation

fn augmentation_suite(opts: VerifyOptions) -> Result<Vec<Check>> {
    let mut involution = Tally::new("polarity_flip_involution");
    let mut swap = Tally::new("polarity_flip_swaps_eci");
    let mut flips = Tally::new("flip_reverses_columns_and_rows");
    let mut drop_ends = Tally::new("random_drop_extremes");
    let mut valid = Tally::new("outputs_satisfy_stream_invariants");
    let mut rng = rng::stream(opts.seed, "verify/augmentation");
    for case in 0..opts.cases {
        let seed = rng::child_seed(opts.seed, &format!("verify/augmentation/{case}"));
        let s = random_stream(&mut rng, seed);
        let flipped = augment::polarity_flip(&s);
        involution.record(augment::polarity_flip(&flipped) == s, || format!("case {case}"));
        swap.record(
            stack_count_image(&flipped, PolarityTag::Positive).counts()
                == stack_count_image(&s, PolarityTag::Negative).counts()
                && stack_count_image(&flipped, PolarityTag::Negative).counts()
                    == stack_count_image(&s, PolarityTag::Positive).counts(),
            || format!("case {case}"),
        );

        let (w, h) = (s.width(), s.height());
        let base = stack_count_image(&s, PolarityTag::All);
        let horiz = stack_count_image(&augment::apply_flip(&s, true, false), PolarityTag::All);
        let vert = stack_count_image(&augment::apply_flip(&s, false, true), PolarityTag::All);
        let mut ok = true;
        for y in 0..h {
            for x in 0..w {
                ok &= horiz.get(x, y) == base.get(w - 1 - x, y);
                ok &= vert.get(x, y) == base.get(x, h - 1 - y);
            }
        }
        flips.record(ok, || format!("case {case}: {w}x{h}"));

        let mut r0 = rng::stream(seed, "verify/drop");
        let kept = augment::apply_random_drop(&s, 0.0, &mut r0);
        let gone = augment::apply_random_drop(&s, 1.0, &mut r0);
        drop_ends.record(kept == s && gone.is_empty(), || format!("case {case}"));

        let method = AugmentMethod::ALL[case % AugmentMethod::ALL.len()];
        let out = augment::augment(&s, &AugmentSpec { method, params: AugmentParams::default(), seed })?;
        let rebuilt = EventStream::new(out.width(), out.height(), out.events().to_vec());
        valid.record(rebuilt.is_ok() && (out.width(), out.height()) == (w, h), || {
            format!("case {case}: {} produced an invalid stream", method.name())
        });
    }

    let mut hits = [0u64; AugmentMethod::SELECTED_POOL.len()];
    for i in 0..POOL_SEEDS {
        let seed = rng::child_seed(opts.seed, &format!("verify/pool/{i}"));
        let m = augment::selected_member(seed);
        let k = AugmentMethod::SELECTED_POOL.iter().position(|&p| p == m).expect("member of the pool");
        hits[k] += 1;
    }
    let (lo, hi) = POOL_FREQ_RANGE;
    let shares: Vec<f64> = hits.iter().map(|&n| n as f64 / POOL_SEEDS as f64).collect();
    let pool = check(
        "selected_da_pool_frequencies",
        shares.iter().all(|f| (lo..=hi).contains(f)),
        AugmentMethod::SELECTED_POOL
            .iter()
            .zip(&shares)
            .map(|(m, f)| format!("{} {:.1}%", m.name(), f * 100.0))
            .collect::<Vec<_>>()
            .join(", "),
    );
    Ok(vec![involution.finish(), swap.finish(), flips.finish(), drop_ends.finish(), valid.finish(), pool])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_usage_error() {
        assert_eq!(run_suite("nope", VerifyOptions::default()).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn small_representation_and_augmentation_runs_pass() {
        let opts = VerifyOptions { cases: 50, seed: 3 };
        for s in ["representation", "augmentation"] {
            let r = run_suite(s, opts).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn gradient_and_oracle_suites_pass() {
        for s in ["gradients", "formula_oracles"] {
            let r = run_suite(s, VerifyOptions::default()).unwrap();
            for c in &r.checks {
                println!("{} {} {}", c.name, c.passed, c.detail);
            }
            assert!(r.passed(), "{s} failed");
        }
    }

    #[test]
    fn tally_reports_first_failure() {
        let mut t = Tally::new("law");
        t.record(true, || unreachable!());
        t.record(false, || "second".into());
        t.record(false, || "third".into());
        let c = t.finish();
        assert!(!c.passed);
        assert_eq!(c.detail, "second");
    }
}
