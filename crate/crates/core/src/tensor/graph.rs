use super::kernels::{col2im, gemm, gemm_at, gemm_bt, im2col, transpose};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BroadcastAdd(Var, Var),
    GlobalAvgPool(Var),
    Concat(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    PixelShuffle(Var, usize),
    SpaceToDepth(Var, usize),
    SoftmaxRows(Var),
    Sum(Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records every operation applied to its nodes, in creation order, so a
/// reverse sweep visits each node once after all of its consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Statistics a training-mode batch norm computed, for the caller to fold
/// into its running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n−1) variance; equals the biased one when only one value
    /// per channel is available.
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4().map_err(|_| Error::shape(op, format!("expected [N,C,H,W], got {:?}", self.shape(v))))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    /// `x: [N,Cin,H,W]`, `w: [Cout,Cin,k,k]` with odd `k`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin, h, wd) = self.dims4(x, "conv2d")?;
        let (cout, wcin, k, k2) = self.dims4(w, "conv2d")?;
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let hw = h * wd;
        let ckk = cin * k * k;
        let mut out = vec![T::zero(); n * cout * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
                let os = &mut out[s * cout * hw..(s + 1) * cout * hw];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (co, row) in os.chunks_mut(hw).enumerate() {
                        row.fill(bv[co]);
                    }
                }
                if k == 1 {
                    gemm(cout, ckk, hw, wv, xs, os);
                } else {
                    let cols = im2col(xs, cin, h, wd, k);
                    gemm(cout, ckk, hw, wv, &cols, os);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(vec![n, cout, h, wd], out), Op::Conv2d { x, w, b }, &inputs))
    }

    /// Batch norm using the statistics of this batch (over N·H·W per channel).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.dims4(x, "batch_norm")?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for smp in 0..n {
                for &v in &xv[(smp * c + ch) * hw..][..hw] {
                    s += v;
                }
            }
            let mu = s / T::of(m as f64);
            let mut ss = T::zero();
            for smp in 0..n {
                for &v in &xv[(smp * c + ch) * hw..][..hw] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / T::of(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|&v| if m > 1 { v * T::of(m as f64 / (m - 1) as f64) } else { v })
            .collect();
        let out = self.affine_norm(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = self.dims4(x, "batch_norm")?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats sized for {} channels, input has {c}", mean.len())));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        Ok(self.affine_norm(x, gamma, beta, mean, &inv_std, false))
    }

    fn check_channel_param(&self, p: Var, c: usize) -> Result<()> {
        if self.shape(p) != [c] {
            return Err(Error::shape("batch_norm", format!("parameter {:?} for {c} channels", self.shape(p))));
        }
        Ok(())
    }

    fn affine_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], batch_stats: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, ((xh, o), &v)) in xhat.iter_mut().zip(out.iter_mut()).zip(xv).enumerate() {
            let ch = (i / hw) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gv[ch] * *xh + bv[ch];
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), batch_stats };
        self.push(Tensor::from_parts(shape, out), op, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a: [N,C,1,1]` broadcast over the spatial extent of `b: [N,C,H,W]`.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(b, "broadcast_add")?;
        if self.shape(a) != [n, c, 1, 1] {
            return Err(Error::shape("broadcast_add", format!("{:?} onto {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let av = self.value(a).data();
        let data = self.value(b).data().iter().enumerate().map(|(i, &v)| v + av[i / hw]).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, h, w], data), Op::BroadcastAdd(a, b), &[a, b]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], data), Op::GlobalAvgPool(x), &[x]))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.dims4(a, "concat_channels")?;
        let (nb, cb, hb, wb) = self.dims4(b, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        Ok(self.push(Tensor::from_parts(vec![n, ca + cb, h, w], data), Op::Concat(a, b), &[a, b]))
    }

    /// `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bt, m, k, n) = self.matmul_dims(a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            gemm(m, k, n, &av[i * m * k..][..m * k], &bv[i * k * n..][..k * n], &mut out[i * m * n..][..m * n]);
        }
        let shape = if self.shape(a).len() == 2 { vec![m, n] } else { vec![bt, m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Matmul(a, b), &[a, b]))
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let err = || Error::shape("matmul", format!("{:?} · {:?}", self.shape(a), self.shape(b)));
        match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
            (&[bt, m, k], &[bt2, k2, n]) if k == k2 && bt == bt2 => Ok((bt, m, k, n)),
            _ => Err(err()),
        }
    }

    /// Swap the last two axes of a 2-d or 3-d tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (bt, r, c) = match shape[..] {
            [r, c] => (1, r, c),
            [bt, r, c] => (bt, r, c),
            _ => return Err(Error::shape("transpose", format!("expected 2-d or 3-d, got {shape:?}"))),
        };
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(av.len());
        for i in 0..bt {
            data.extend(transpose(r, c, &av[i * r * c..][..r * c]));
        }
        let mut out_shape = shape.clone();
        let l = out_shape.len();
        out_shape.swap(l - 1, l - 2);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `[N,C·r²,H,W] → [N,C,rH,rW]` with
    /// `out[c, r·h+i, r·w+j] = in[c·r² + i·r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("{c} channels not divisible by r²={}", r * r)));
        }
        let out = shuffle(self.value(x).data(), n, c / (r * r), h, w, r);
        Ok(self.push(Tensor::from_parts(vec![n, c / (r * r), h * r, w * r], out), Op::PixelShuffle(x, r), &[x]))
    }

    /// Exact inverse of [`Graph::pixel_shuffle`].
    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "space_to_depth")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape("space_to_depth", format!("{h}x{w} not divisible by {r}")));
        }
        let out = unshuffle(self.value(x).data(), n, c, h / r, w / r, r);
        Ok(self.push(Tensor::from_parts(vec![n, c * r * r, h / r, w / r], out), Op::SpaceToDepth(x, r), &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&cols) = shape.last() else {
            return Err(Error::shape("softmax_rows", "scalar input"));
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let m = s / T::of(av.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`; gradients add across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (n, cin, h, wd) = self.value(*x).dims4().expect("conv input");
                let (cout, _, k, _) = self.value(*w).dims4().expect("conv weight");
                let hw = h * wd;
                let ckk = cin * k * k;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    acc(*b, &|gb| {
                        for s in 0..n {
                            for co in 0..cout {
                                gb[co] += g[(s * cout + co) * hw..][..hw].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let need_w = rg(*w);
                let need_x = rg(*x);
                let mut dw = if need_w { vec![T::zero(); cout * ckk] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); n * cin * hw] } else { Vec::new() };
                for s in 0..n {
                    let gs = &g[s * cout * hw..][..cout * hw];
                    let xs = &xv[s * cin * hw..][..cin * hw];
                    if need_w {
                        if k == 1 {
                            gemm_bt(cout, hw, ckk, gs, xs, &mut dw);
                        } else {
                            gemm_bt(cout, hw, ckk, gs, &im2col(xs, cin, h, wd, k), &mut dw);
                        }
                    }
                    if need_x {
                        let dxs = &mut dx[s * cin * hw..][..cin * hw];
                        if k == 1 {
                            gemm_at(ckk, cout, hw, wv, gs, dxs);
                        } else {
                            let mut dcols = vec![T::zero(); ckk * hw];
                            gemm_at(ckk, cout, hw, wv, gs, &mut dcols);
                            col2im(&dcols, cin, h, wd, k, dxs);
                        }
                    }
                }
                if need_w {
                    acc(*w, &|gw| add_into(gw, &dw));
                }
                if need_x {
                    acc(*x, &|gx| add_into(gx, &dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.shape(*x);
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = T::of((n * hw) as f64);
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * xh;
                }
                acc(*gamma, &|d| add_into(d, &sum_gx));
                acc(*beta, &|d| add_into(d, &sum_g));
                acc(*x, &|d| {
                    for (i, (dv, (&gi, &xh))) in d.iter_mut().zip(g.iter().zip(xhat)).enumerate() {
                        let ch = (i / hw) % c;
                        let k = gv[ch] * inv_std[ch];
                        *dv += if *batch_stats {
                            k * (gi - (sum_g[ch] + xh * sum_gx[ch]) / m)
                        } else {
                            k * gi
                        };
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for ((dv, &gi), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *dv += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                acc(*x, &|d| {
                    for ((dv, &gi), &s) in d.iter_mut().zip(g).zip(out) {
                        *dv += gi * s * (T::one() - s);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(dv, &gi)| *dv -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| d.iter_mut().zip(g).zip(bv).for_each(|((dv, &gi), &y)| *dv += gi * y));
                acc(*b, &|d| d.iter_mut().zip(g).zip(av).for_each(|((dv, &gi), &x)| *dv += gi * x));
            }
            Op::Scale(a, s) => {
                acc(*a, &|d| d.iter_mut().zip(g).for_each(|(dv, &gi)| *dv += gi * *s));
            }
            Op::BroadcastAdd(a, b) => {
                let shape = self.shape(*b);
                let hw = shape[2] * shape[3];
                acc(*a, &|d| {
                    for (dv, chunk) in d.iter_mut().zip(g.chunks(hw)) {
                        *dv += chunk.iter().copied().sum::<T>();
                    }
                });
                acc(*b, &|d| add_into(d, g));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let hw = shape[2] * shape[3];
                let inv = T::of(1.0 / hw as f64);
                acc(*x, &|d| {
                    for (chunk, &gi) in d.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|dv| *dv += gi * inv);
                    }
                });
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let ct = ca + cb;
                acc(*a, &|d| {
                    for s in 0..n {
                        add_into(&mut d[s * ca * hw..][..ca * hw], &g[s * ct * hw..][..ca * hw]);
                    }
                });
                acc(*b, &|d| {
                    for s in 0..n {
                        add_into(&mut d[s * cb * hw..][..cb * hw], &g[(s * ct + ca) * hw..][..cb * hw]);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (bt, m, k, n) = self.matmul_dims(*a, *b).expect("matmul dims");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..bt {
                        gemm_bt(m, n, k, &g[i * m * n..][..m * n], &bv[i * k * n..][..k * n], &mut d[i * m * k..][..m * k]);
                    }
                });
                acc(*b, &|d| {
                    for i in 0..bt {
                        gemm_at(k, m, n, &av[i * m * k..][..m * k], &g[i * m * n..][..m * n], &mut d[i * k * n..][..k * n]);
                    }
                });
            }
            Op::Transpose(a) => {
                let out_shape = node.value.shape();
                let l = out_shape.len();
                let (r, c) = (out_shape[l - 2], out_shape[l - 1]);
                acc(*a, &|d| {
                    for (i, chunk) in g.chunks(r * c).enumerate() {
                        add_into(&mut d[i * r * c..][..r * c], &transpose(r, c, chunk));
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|d| add_into(d, g)),
            Op::PixelShuffle(x, r) => {
                let (n, c, h, w) = node.value.dims4().expect("shuffle output");
                acc(*x, &|d| add_into(d, &unshuffle(g, n, c, h / r, w / r, *r)));
            }
            Op::SpaceToDepth(x, r) => {
                let (n, c, h, w) = node.value.dims4().expect("unshuffle output");
                acc(*x, &|d| add_into(d, &shuffle(g, n, c / (r * r), h, w, *r)));
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().expect("softmax shape");
                let out = node.value.data();
                acc(*x, &|d| {
                    for ((drow, grow), srow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: T = grow.iter().zip(srow).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gi), &s) in drow.iter_mut().zip(grow).zip(srow) {
                            *dv += s * (gi - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &|d| d.iter_mut().for_each(|dv| *dv += g0));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] * T::of(2.0 / av.len() as f64);
                acc(*a, &|d| {
                    for ((dv, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dv += k * (x - y);
                    }
                });
                acc(*b, &|d| {
                    for ((dv, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dv -= k * (x - y);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Depth-to-space; `c` is the output channel count and `(h, w)` the input
/// spatial size.
pub(crate) fn shuffle<T: Scalar>(src: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ic = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            out[((s * c + ch) * oh + r * y + i) * ow + r * x + j] =
                                src[((s * c * r * r + ic) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Space-to-depth; `c` is the input channel count and `(h, w)` the output
/// spatial size.
pub(crate) fn unshuffle<T: Scalar>(src: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ih, iw) = (h * r, w * r);
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let oc = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            out[((s * c * r * r + oc) * h + y) * w + x] =
                                src[((s * c + ch) * ih + r * y + i) * iw + r * x + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is not a grad-requiring leaf reached by the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
