use super::*;
use crate::reference::{self, NormStats, RefNet};
use crate::tensor::{grad_check, random_tensor, Graph};

fn cfg(c: usize, blocks: usize, r: usize) -> ModelConfig {
    ModelConfig { channels: c, num_blocks: blocks, scale: r, ..ModelConfig::default() }
}

fn random_model<T: Scalar>(config: ModelConfig, seed: u64) -> Model<T> {
    crate::verify::perturbed_model(config, seed).unwrap()
}

fn rand4<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    random_tensor(&shape, seed, "model-test")
}

/// `‖a − b‖∞ < tol · max(1, ‖b‖∞)`: single precision carries about seven
/// significant digits, so the bound scales with the reference magnitude.
fn close(a: &Tensor<f32>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.cast::<f64>().max_abs_diff(b);
    let mag = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    assert!(d < tol * mag, "max abs diff {d:e} ≥ {tol:e} × {mag}");
}

#[test]
fn layout_names_follow_scheme() {
    let m = Model::<f32>::new(cfg(16, 2, 2), 0).unwrap();
    let names: Vec<&str> = m.params().names().collect();
    for n in [
        "branch.pos.block0.conv1.weight",
        "branch.neg.block1.conv2.bias",
        "ffm.pos.fuse.conv.weight",
        "ffm.neg.global.bn2.weight",
        "fem0.pos.gate.w.weight",
        "fem1.neg.attn.q.weight",
        "enh.prev.weight",
        "head.bias",
        "state.weight",
    ] {
        assert!(names.contains(&n), "missing {n}");
    }
    assert_eq!(m.params().get("fem0.pos.attn.q.weight").unwrap().shape(), &[2, 16, 1, 1]);
    assert_eq!(m.params().get("head.weight").unwrap().shape(), &[8, 16, 3, 3]);
    assert!(m.buffers().get("ffm.pos.fuse.bn.running_var").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn branches_have_identical_shapes() {
    let m = Model::<f32>::new(cfg(8, 2, 2), 1).unwrap();
    for (name, t) in m.params().iter() {
        if name.contains(".pos.") || name.starts_with("input.pos") {
            let twin = name.replacen("pos", "neg", 1);
            assert_eq!(m.params().get(&twin).unwrap().shape(), t.shape(), "{name}");
        }
    }
}

#[test]
fn config_validation() {
    assert!(cfg(16, 2, 3).validate().is_err());
    assert!(cfg(12, 2, 2).validate().is_err());
    assert!(ModelConfig { attn_channels_ratio: 0.25, ..cfg(12, 1, 2) }.validate().is_ok());
    assert_eq!("model#E".parse::<Variant>().unwrap(), Variant::E);
    assert_eq!("b".parse::<Variant>().unwrap(), Variant::B);
    assert!("z".parse::<Variant>().is_err());
}

#[test]
fn enhancement_zero_and_shape() {
    let m = Model::<f64>::zero_init(cfg(8, 1, 2), 2).unwrap();
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let state = fw.zero_state(1, 5, 3);
    let f = fw.graph().constant(Tensor::zeros(&[1, 1, 5, 3]));
    let e = fw.build_enhancement(f, state).unwrap();
    assert_eq!(fw.graph().shape(e), &[1, 8, 5, 3]);
    assert!(fw.graph().value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn enhancement_gradient_reaches_all_inputs() {
    let m = random_model::<f64>(cfg(8, 1, 2), 3);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Eval);
    let f = fw.graph().variable(rand4([1, 1, 4, 4], 1));
    let h = fw.graph().variable(rand4([1, 8, 4, 4], 2));
    let o = fw.graph().variable(rand4([1, 2, 8, 8], 3));
    let e = fw.build_enhancement(f, RecurrentState { h, o }).unwrap();
    let s = fw.graph().sum(e);
    let grads = g.backward(s).unwrap();
    for v in [f, h, o] {
        assert!(grads.get(v).unwrap().data().iter().any(|&x| x != 0.0));
    }
}

#[test]
fn enhancement_rejects_mismatched_state() {
    let m = Model::<f64>::new(cfg(8, 1, 2), 3).unwrap();
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Eval);
    let state = fw.zero_state(1, 4, 4);
    let f = fw.graph().constant(Tensor::zeros(&[1, 1, 5, 4]));
    assert_eq!(fw.build_enhancement(f, state).unwrap_err().category(), "shape");
}

#[test]
fn ffm_zero_fuse_is_identity_and_bounded() {
    let mut m = random_model::<f64>(cfg(8, 1, 2), 4);
    for n in ["ffm.pos.fuse.conv.weight", "ffm.pos.fuse.conv.bias", "ffm.pos.fuse.bn.bias"] {
        m.params_mut().get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let f = rand4([2, 8, 3, 3], 5);
    let enh = rand4([2, 8, 3, 3], 6);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let (fv, ev) = (fw.graph().constant(f.clone()), fw.graph().constant(enh.clone()));
    let out = fw.ffm_forward("ffm.pos", fv, ev).unwrap();
    assert_eq!(fw.graph().value(out), &f);

    let m = random_model::<f64>(cfg(8, 1, 2), 7);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let (fv, ev) = (fw.graph().constant(f.clone()), fw.graph().constant(enh));
    let out = fw.ffm_forward("ffm.neg", fv, ev).unwrap();
    let cat = fw.graph().concat_channels(fv, ev).unwrap();
    let fuse = fw.basic_block("ffm.neg.fuse", cat).unwrap();
    let (o, fu) = (fw.graph().value(out).clone(), fw.graph().value(fuse).clone());
    let bound = fu.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(bound > 0.0);
    for (a, b) in o.data().iter().zip(f.data()) {
        assert!((a - b).abs() <= bound);
    }
}

#[test]
fn ffm_matches_reference() {
    let m = random_model::<f32>(cfg(16, 1, 2), 8);
    let f = rand4::<f32>([2, 16, 4, 4], 9);
    let enh = rand4::<f32>([2, 16, 4, 4], 10);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let (fv, ev) = (fw.graph().constant(f.clone()), fw.graph().constant(enh.clone()));
    let out = fw.ffm_forward("ffm.pos", fv, ev).unwrap();
    let r = RefNet::new(&m, NormStats::Batch).ffm("ffm.pos", &f.cast(), &enh.cast());
    close(fw.graph().value(out), &r, 1e-6);
}

#[test]
fn fem_gate_zero_and_reference() {
    let mut m = random_model::<f32>(cfg(8, 1, 2), 11);
    let x = rand4::<f32>([1, 8, 4, 4], 12);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let xv = fw.graph().constant(x.clone());
    let y = fw.fem_gate("fem0.pos.gate", xv).unwrap();
    assert_eq!(fw.graph().shape(y), x.shape());
    let r = RefNet::new(&m, NormStats::Batch).fem_gate("fem0.pos.gate", &x.cast());
    close(fw.graph().value(y), &r, 1e-6);

    for n in ["w.weight", "w.bias", "b.weight", "b.bias"] {
        let t = m.params_mut().get_mut(&format!("fem0.pos.gate.{n}")).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let xv = fw.graph().constant(x);
    let y = fw.fem_gate("fem0.pos.gate", xv).unwrap();
    assert!(fw.graph().value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_attention_zero_query_is_half_row_sum() {
    let mut m = random_model::<f64>(cfg(8, 1, 2), 13);
    for n in ["weight", "bias"] {
        let t = m.params_mut().get_mut(&format!("fem0.pos.attn.q.{n}")).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let own = rand4::<f64>([1, 8, 3, 3], 14);
    let other = rand4::<f64>([1, 8, 3, 3], 15);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Eval);
    let (a, b) = (fw.graph().constant(own.clone()), fw.graph().constant(other));
    let att = fw.cross_attention_map("fem0.pos.attn", a, b).unwrap();
    let v = reference::conv(&own, m.params().get("fem0.pos.attn.v.weight").unwrap(), m.params().get("fem0.pos.attn.v.bias"));
    let out = fw.graph().value(att);
    for c in 0..8 {
        let row_sum: f64 = v.data()[c * 9..(c + 1) * 9].iter().sum();
        for j in 0..9 {
            assert!((out.data()[c * 9 + j] - 0.5 * row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_single_position() {
    let m = random_model::<f64>(cfg(8, 1, 2), 16);
    let own = rand4::<f64>([1, 8, 1, 1], 17);
    let other = rand4::<f64>([1, 8, 1, 1], 18);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Eval);
    let (a, b) = (fw.graph().constant(own.clone()), fw.graph().constant(other.clone()));
    let att = fw.cross_attention_map("fem0.neg.attn", a, b).unwrap();
    let p = |n: &str| m.params().get(&format!("fem0.neg.attn.{n}")).unwrap();
    let v = reference::conv(&own, p("v.weight"), Some(p("v.bias")));
    let q = reference::conv(&other, p("q.weight"), Some(p("q.bias")));
    let k = reference::conv(&other, p("k.weight"), Some(p("k.bias")));
    let s = q.data()[0] * k.data()[0];
    let gate = 1.0 / (1.0 + (-s).exp());
    for (o, vv) in fw.graph().value(att).data().iter().zip(v.data()) {
        assert!((o - vv * gate).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_matches_reference() {
    for gate in [GateFn::Sigmoid, GateFn::Softmax] {
        let m = random_model::<f32>(ModelConfig { fem_gate_fn: gate, attn_channels_ratio: 0.25, ..cfg(4, 1, 2) }, 19);
        let own = rand4::<f32>([2, 4, 3, 3], 20);
        let other = rand4::<f32>([2, 4, 3, 3], 21);
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &m, Mode::Eval);
        let (a, b) = (fw.graph().constant(own.clone()), fw.graph().constant(other.clone()));
        let att = fw.fem_cross_attention("fem0.pos.attn", a, b).unwrap();
        let r = RefNet::new(&m, NormStats::Running).cross_attention_map("fem0.pos.attn", &own.cast(), &other.cast());
        let r = reference::zip(&r, &own.cast(), |x, y| x + y);
        close(fw.graph().value(att), &r, 1e-6);
    }
}

#[test]
fn cross_attention_ceiling() {
    let m = Model::<f32>::new(ModelConfig { max_attention_positions: 15, ..cfg(8, 1, 2) }, 0).unwrap();
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Eval);
    let a = fw.graph().constant(Tensor::zeros(&[1, 8, 4, 4]));
    let err = fw.fem_cross_attention("fem0.pos.attn", a, a).unwrap_err();
    assert_eq!(err.category(), "resource");
    assert_eq!(err.exit_code(), 3);
}

/// Exchange every `pos` parameter with its `neg` twin and permute the channels
/// that couple the two branches (fusion input, head output, fed-back output).
fn swap_branches(m: &Model<f64>) -> Model<f64> {
    let mut s = m.clone();
    let names: Vec<String> = m.params().names().map(str::to_string).collect();
    for n in &names {
        let twin = if n.contains(".pos.") || n.starts_with("input.pos") {
            n.replacen("pos", "neg", 1)
        } else if n.contains(".neg.") || n.starts_with("input.neg") {
            n.replacen("neg", "pos", 1)
        } else {
            continue;
        };
        *s.params_mut().get_mut(n).unwrap() = m.params().get(&twin).unwrap().clone();
    }
    let c = m.config().channels;
    let r2 = m.config().scale * m.config().scale;
    let swap_in = |t: &Tensor<f64>, half: usize| {
        let (co, ci, k, _) = t.dims4().unwrap();
        Tensor::from_fn(t.shape(), |i| {
            let (o, rest) = (i / (ci * k * k), i % (ci * k * k));
            let (cin, kk) = (rest / (k * k), rest % (k * k));
            let src = if cin < half { cin + half } else { cin - half };
            let _ = co;
            t.data()[(o * ci + src) * k * k + kk]
        })
    };
    let swap_out = |t: &Tensor<f64>, half: usize| {
        let per = t.numel() / t.shape()[0];
        Tensor::from_fn(t.shape(), |i| {
            let o = i / per;
            let src = if o < half { o + half } else { o - half };
            t.data()[src * per + i % per]
        })
    };
    let fw = swap_in(m.params().get("fuse.weight").unwrap(), c);
    *s.params_mut().get_mut("fuse.weight").unwrap() = fw;
    let pw = swap_in(m.params().get("enh.prev.weight").unwrap(), r2);
    *s.params_mut().get_mut("enh.prev.weight").unwrap() = pw;
    for n in ["head.weight", "head.bias"] {
        let t = swap_out(m.params().get(n).unwrap(), r2);
        *s.params_mut().get_mut(n).unwrap() = t;
    }
    s
}

#[test]
fn fem_swap_symmetry_is_exact() {
    let m = random_model::<f64>(cfg(8, 1, 2), 22);
    let s = swap_branches(&m);
    let p = rand4::<f64>([2, 8, 3, 3], 23);
    let n = rand4::<f64>([2, 8, 3, 3], 24);
    let run = |model: &Model<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, model, Mode::Train);
        let (av, bv) = (fw.graph().constant(a.clone()), fw.graph().constant(b.clone()));
        let (x, y) = fw.fem_forward(0, av, bv).unwrap();
        (fw.graph().value(x).clone(), fw.graph().value(y).clone())
    };
    let (op, on) = run(&m, &p, &n);
    let (sp, sn) = run(&s, &n, &p);
    assert_eq!(op, sn);
    assert_eq!(on, sp);
    assert_eq!(op.shape(), p.shape());
}

#[test]
fn fem_cross_path_is_live() {
    let m = random_model::<f64>(cfg(8, 1, 2), 25);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let p = fw.graph().variable(rand4([2, 8, 3, 3], 26));
    let n = fw.graph().variable(rand4([2, 8, 3, 3], 27));
    let (op, _) = fw.fem_forward(0, p, n).unwrap();
    let s = fw.graph().sum(op);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(n).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn fem_reference() {
    let m = random_model::<f32>(cfg(8, 1, 2), 28);
    let p = rand4::<f32>([2, 8, 3, 3], 29);
    let n = rand4::<f32>([2, 8, 3, 3], 30);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let (pv, nv) = (fw.graph().constant(p.clone()), fw.graph().constant(n.clone()));
    let (a, b) = fw.fem_forward(0, pv, nv).unwrap();
    let (ra, rb) = RefNet::new(&m, NormStats::Batch).fem(0, &p.cast(), &n.cast());
    close(fw.graph().value(a), &ra, 1e-6);
    close(fw.graph().value(b), &rb, 1e-6);
}

#[test]
fn residual_block_identity_and_reference() {
    let m = Model::<f64>::zero_init(cfg(8, 1, 2), 31).unwrap();
    let x = rand4::<f64>([1, 8, 4, 4], 32);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let xv = fw.graph().constant(x.clone());
    let y = fw.residual_block("branch.pos.block0", xv).unwrap();
    assert_eq!(fw.graph().value(y), &x);

    let m = random_model::<f32>(cfg(16, 1, 2), 33);
    let x = rand4::<f32>([1, 16, 5, 5], 34);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let xv = fw.graph().constant(x.clone());
    let y = fw.residual_block("branch.neg.block0", xv).unwrap();
    assert_eq!(fw.graph().shape(y), x.shape());
    let r = RefNet::new(&m, NormStats::Batch).residual_block("branch.neg.block0", &x.cast());
    close(fw.graph().value(y), &r, 1e-6);
}

fn run_step<T: Scalar>(m: &Model<T>, n: usize, h: usize, w: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, m, Mode::Eval);
    let state = fw.zero_state(n, h, w);
    let p = fw.graph().constant(rand4([n, 1, h, w], seed));
    let q = fw.graph().constant(rand4([n, 1, h, w], seed + 1));
    let f = fw.graph().constant(rand4([n, 1, h, w], seed + 2));
    let (o, st) = fw.step(p, q, f, state).unwrap();
    (fw.graph().value(o).clone(), fw.graph().value(st.h).clone())
}

#[test]
fn step_shape_contract_and_determinism() {
    let m = Model::<f32>::new(cfg(16, 2, 4), 35).unwrap();
    let (o, h) = run_step(&m, 1, 8, 8, 36);
    assert_eq!(o.shape(), &[1, 2, 32, 32]);
    assert_eq!(h.shape(), &[1, 16, 8, 8]);
    assert!(o.all_finite());
    let m2 = Model::<f32>::new(cfg(16, 2, 4), 35).unwrap();
    assert_eq!(run_step(&m2, 1, 8, 8, 36).0, o);
}

#[test]
fn every_variant_runs_and_param_counts_order() {
    let counts: Vec<usize> = Variant::ALL
        .iter()
        .map(|&v| {
            let c = cfg(16, 2, 4).with_variant(v);
            let m = Model::<f32>::new(c, 37).unwrap();
            assert_eq!(m.config().variant(), Some(v));
            let (o, h) = run_step(&m, 1, 8, 8, 38);
            assert_eq!(o.shape(), &[1, 2, 32, 32]);
            assert_eq!(h.shape(), &[1, 16, 8, 8]);
            m.param_count()
        })
        .collect();
    let [a, b, c, d, e] = counts[..] else { unreachable!() };
    assert!(a < b && b <= d && c <= e && b <= c && d <= e, "{counts:?}");
}

#[test]
fn zero_init_collapses_to_head_bias() {
    let m = Model::<f64>::zero_init(cfg(8, 2, 2), 39).unwrap();
    let (o, h) = run_step(&m, 1, 4, 4, 40);
    assert!(o.data().iter().all(|&v| v == 0.0));
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn branch_swap_symmetry_of_full_step() {
    let m = random_model::<f64>(cfg(8, 2, 2), 41);
    let s = swap_branches(&m);
    let (n, h, w) = (2, 4, 4);
    let p = rand4::<f64>([n, 1, h, w], 42);
    let q = rand4::<f64>([n, 1, h, w], 43);
    let f = rand4::<f64>([n, 1, h, w], 44);
    let two_steps = |model: &Model<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, model, Mode::Train);
        let mut state = fw.zero_state(n, h, w);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let (av, bv, fv) = (fw.graph().constant(a.clone()), fw.graph().constant(b.clone()), fw.graph().constant(f.clone()));
            let (o, st) = fw.step(av, bv, fv, state).unwrap();
            outs.push(fw.graph().value(o).clone());
            state = st;
        }
        outs
    };
    let plain = two_steps(&m, &p, &q);
    let swapped = two_steps(&s, &q, &p);
    for (a, b) in plain.iter().zip(&swapped) {
        let r = 16;
        for smp in 0..n {
            for (ca, cb) in [(0, 1), (1, 0)] {
                for i in 0..r * 4 {
                    let x = a.data()[(smp * 2 + ca) * r * 4 + i];
                    let y = b.data()[(smp * 2 + cb) * r * 4 + i];
                    assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
            }
        }
    }
}

fn step_inputs<T: Scalar>(t: usize, n: usize, h: usize, w: usize, r: usize, seed: u64) -> Vec<StepInput<T>> {
    (0..t as u64)
        .map(|i| StepInput {
            pos: rand4([n, 1, h, w], seed + 10 * i),
            neg: rand4([n, 1, h, w], seed + 10 * i + 1),
            frame: rand4([n, 1, h, w], seed + 10 * i + 2),
            target: Some(rand4([n, 2, h * r, w * r], seed + 10 * i + 3)),
        })
        .collect()
}

#[test]
fn sequence_loss_trivial_cases() {
    let mut m = Model::<f64>::zero_init(cfg(8, 1, 2), 45).unwrap();
    let mut steps = step_inputs::<f64>(3, 1, 4, 4, 2, 46);
    for s in &mut steps {
        s.target = Some(Tensor::zeros(&[1, 2, 8, 8]));
    }
    let loss = |m: &Model<f64>, steps: &[StepInput<f64>]| {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, m, Mode::Eval);
        let l = fw.sequence_loss(steps).unwrap();
        fw.graph().value(l).item()
    };
    assert_eq!(loss(&m, &steps), 0.0);
    m.params_mut().get_mut("head.bias").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.7);
    assert!((loss(&m, &steps[..1]) - 0.49).abs() < 1e-12);
    steps[0].target = None;
    let mut g = Graph::new();
    assert!(Forward::new(&mut g, &m, Mode::Eval).sequence_loss(&steps).is_err());
}

#[test]
fn sequence_loss_matches_reference() {
    let m = random_model::<f32>(cfg(8, 1, 2), 47);
    let steps = step_inputs::<f32>(3, 2, 4, 4, 2, 48);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &m, Mode::Train);
    let l = fw.sequence_loss(&steps).unwrap();
    let got = fw.graph().value(l).item() as f64;
    let ref_steps: Vec<_> = steps
        .iter()
        .map(|s| (s.pos.cast(), s.neg.cast(), s.frame.cast(), s.target.as_ref().unwrap().cast()))
        .collect();
    let want = RefNet::new(&m, NormStats::Batch).sequence_loss(&ref_steps);
    assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn full_step_gradient_check_small() {
    let m = random_model::<f64>(cfg(8, 1, 2), 49);
    let (n, h, w) = (1, 4, 4);
    let p = rand4::<f64>([n, 1, h, w], 50);
    let q = rand4::<f64>([n, 1, h, w], 51);
    let f = rand4::<f64>([n, 1, h, w], 52);
    let h0 = rand4::<f64>([n, 8, h, w], 53);
    let o0 = rand4::<f64>([n, 2, 2 * h, 2 * w], 54);
    let mut worst = 0.0f64;
    for name in ["fem0.pos.attn.q.weight", "ffm.neg.global.conv1.weight", "enh.prev.weight", "head.bias"] {
        let x = m.params().get(name).unwrap().clone();
        let r = grad_check(
            |g, v| {
                let mut fw = Forward::new(g, &m, Mode::Train);
                fw.bind(name, v);
                let c = |fw: &mut Forward<f64>, t: &Tensor<f64>| fw.graph().constant(t.clone());
                let state = RecurrentState { h: c(&mut fw, &h0), o: c(&mut fw, &o0) };
                let (pv, qv, fv) = (c(&mut fw, &p), c(&mut fw, &q), c(&mut fw, &f));
                let (o, _) = fw.step(pv, qv, fv, state)?;
                Ok(fw.graph().sum(o))
            },
            &x,
            1e-5,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn checkpoint_round_trip_and_inference() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let c = ModelConfig { attn_channels_ratio: 0.25, ..cfg(8, 3, 4) }.with_variant(v);
        let mut m = random_model::<f32>(c.clone(), 55);
        m.update_running_stats(&[(
            if v == Variant::A { "ffm.joint.fuse.bn".into() } else { "ffm.pos.fuse.bn".into() },
            BatchStats { mean: vec![1.0; 8], var: vec![2.0; 8] },
        )]);
        let path = dir.path().join(format!("{}.rmf", v.name()));
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path, &ModelConfig::default()).unwrap();
        let mut expect = c.clone();
        if c.fem_mode == FusionMode::Lateral {
            // no query projection to read the ratio from
            expect.attn_channels_ratio = ModelConfig::default().attn_channels_ratio;
        }
        assert_eq!(back.config(), &expect);
        assert!(back.params() == m.params() && back.buffers() == m.buffers());
    }
    let err = Model::<f32>::load(&dir.path().join("none.rmf"), &ModelConfig::default()).unwrap_err();
    assert_eq!(err.category(), "checkpoint_not_found");
}

#[test]
fn running_stats_momentum() {
    let mut m = Model::<f64>::new(cfg(8, 1, 2), 0).unwrap();
    let s = BatchStats { mean: vec![2.0; 8], var: vec![3.0; 8] };
    m.update_running_stats(&[("ffm.pos.fuse.bn".into(), s)]);
    assert!((m.buffers().get("ffm.pos.fuse.bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
    assert!((m.buffers().get("ffm.pos.fuse.bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-12);
}
