use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences with per-element step `h_scale·(1 + |x_i|)`.
pub fn numeric_gradient(f: impl Fn(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h_scale: f64) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let h = h_scale * (1.0 + x0.abs());
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Checks `d f(x) / dx` where `f` builds a scalar on the graph from the
/// leaf it is handed. `h_scale` of `1e-5` is the usual choice.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h_scale: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(
        |probe| {
            let mut g = Graph::new();
            let xv = g.constant(probe.clone());
            let y = f(&mut g, xv)?;
            Ok(g.value(y).item())
        },
        x,
        h_scale,
    )?;
    compare(&analytic, &numeric)
}

pub(crate) fn compare(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<GradCheck> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape("grad_check", "analytic/numeric shape mismatch"));
    }
    let mut best = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = relative_error(a, n);
        if e > best.max_rel_error || !e.is_finite() {
            best = GradCheck { max_rel_error: e, worst_index: i, analytic: a, numeric: n };
        }
    }
    Ok(best)
}

/// Scalar-valued probe of one differentiable op: the input to perturb and
/// the graph built from it.
pub struct OpCase {
    pub name: &'static str,
    pub input: Tensor<f64>,
    pub build: BuildFn,
}

pub type BuildFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + Send + Sync>;

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    super::random_tensor(shape, seed, "gradcheck")
}

fn case(
    name: &'static str,
    input: Tensor<f64>,
    build: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + Send + Sync + 'static,
) -> OpCase {
    OpCase { name, input, build: Box::new(build) }
}

/// One probe per differentiable op, each routed through a nonlinearity so
/// the upstream gradient is not constant.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("conv3x3", rt(&[1, 2, 3, 4], 40), move |g, x| {
            let w = g.constant(rt(&[3, 2, 3, 3], 30));
            let b = g.constant(rt(&[3], 32));
            let y = g.conv2d(x, w, Some(b))?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        }),
        case("conv_weight", rt(&[3, 2, 3, 3], 30), move |g, w| {
            let x = g.constant(rt(&[1, 2, 3, 4], 33));
            let y = g.conv2d(x, w, None)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        case("conv1x1", rt(&[3, 2, 1, 1], 31), move |g, w| {
            let x = g.constant(rt(&[1, 2, 3, 4], 33));
            let y = g.conv2d(x, w, None)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        }),
        case("batch_norm_train", rt(&[2, 2, 2, 3], 41), move |g, x| {
            let ga = g.constant(Tensor::new(&[2], vec![1.3, -0.7])?);
            let be = g.constant(Tensor::new(&[2], vec![0.2, 0.1])?);
            let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
            let wts = g.constant(rt(&[2, 2, 2, 3], 42));
            let y = g.mul(y, wts)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        }),
        case("batch_norm_params", Tensor::from_parts(vec![2], vec![0.9, 1.1]), move |g, ga| {
            let x = g.constant(rt(&[2, 2, 2, 3], 43));
            let be = g.constant(Tensor::zeros(&[2]));
            let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        }),
        case("batch_norm_eval", rt(&[1, 2, 2, 2], 44), move |g, x| {
            let ga = g.constant(Tensor::new(&[2], vec![1.3, -0.7])?);
            let be = g.constant(Tensor::new(&[2], vec![0.2, 0.1])?);
            let y = g.batch_norm_eval(x, ga, be, &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        case("relu", rt(&[20], 45).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v }), move |g, x| {
            let y = g.relu(x);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        case("sigmoid_chain", rt(&[10], 46), move |g, x| {
            let y = g.sigmoid(x);
            let y = g.sigmoid(y);
            let y = g.mul(y, x)?;
            Ok(g.sum(y))
        }),
        case("gap_broadcast", rt(&[1, 2, 3, 3], 47), move |g, x| {
            let p = g.global_avg_pool(x)?;
            let p = g.sigmoid(p);
            let y = g.broadcast_add(p, x)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        case("concat_sub_scale", rt(&[1, 2, 2, 2], 48), move |g, x| {
            let c = g.constant(rt(&[1, 1, 2, 2], 49));
            let y = g.concat_channels(x, c)?;
            let y = g.concat_channels(c, y)?;
            let z = g.sigmoid(y);
            let d = g.sub(z, y)?;
            let d = g.scale(d, 1.7);
            let d = g.mul(d, d)?;
            Ok(g.sum(d))
        }),
        case("matmul_transpose_reshape", rt(&[3, 4], 50), move |g, a| {
            let b = g.constant(rt(&[3, 5], 51));
            let at = g.transpose(a)?;
            let m = g.matmul(at, b)?;
            let m = g.reshape(m, &[2, 10])?;
            let m = g.sigmoid(m);
            let m2 = g.matmul(a, at)?;
            let m2 = g.sigmoid(m2);
            let s1 = g.sum(m);
            let s2 = g.sum(m2);
            g.add(s1, s2)
        }),
        case("batched_matmul", rt(&[2, 3, 4], 52), move |g, a| {
            let b = g.constant(rt(&[2, 4, 2], 53));
            let m = g.matmul(a, b)?;
            let m = g.mul(m, m)?;
            Ok(g.sum(m))
        }),
        case("pixel_shuffle_space_to_depth", rt(&[1, 8, 2, 3], 54), move |g, x| {
            let y = g.pixel_shuffle(x, 2)?;
            let wts = g.constant(rt(&[1, 2, 4, 6], 55));
            let y = g.mul(y, wts)?;
            let z = g.space_to_depth(y, 2)?;
            let z = g.sigmoid(z);
            Ok(g.sum(z))
        }),
        case("softmax_rows", rt(&[3, 4], 56), move |g, x| {
            let y = g.softmax_rows(x)?;
            let wts = g.constant(rt(&[3, 4], 57));
            let y = g.mul(y, wts)?;
            Ok(g.sum(y))
        }),
        case("mse", rt(&[2, 3], 58), move |g, x| {
            let t = g.constant(rt(&[2, 3], 59));
            g.mse(x, t)
        }),
    ]
}
