//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its value and whatever it needs for
//! the backward rule. Nodes only reference earlier nodes, so a reverse sweep
//! over the node list is a valid topological order and visits each node once.

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        inner: usize,
        training: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    RowLogSumExp {
        x: Var,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of every parameter that took part in a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId::from_index(i))
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies a parameter onto the tape. Frozen parameters and buffers do not
    /// receive gradients.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let needs = params.requires_grad(id);
        self.push(params.get(id).clone(), Op::Param(id), needs)
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_f64(v.numel() as f64);
        let s: T = v.data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Matrix product of 2-D operands, optionally transposing either side.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("operands must be 2-D: {sa:?}, {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2} ({sa:?} x {sb:?})"));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, sa[1]) } else { (sa[1], 1) };
        let (rsb, csb) = if tb { (1, sb[1]) } else { (sb[1], 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb, m, k, n }, ng))
    }

    /// `x[N, F] + b[F]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return shape_err("add_bias", format!("{sx:?} + {sb:?}"));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(sx[1]) {
            for (v, &bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddBias { x, b }, ng))
    }

    /// Stride-1 cross-correlation with zero padding.
    ///
    /// `x` is `[N, C, H, W]`, `w` is `[O, C, KH, KW]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad_h: usize, pad_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err("conv2d", format!("input {sx:?}, weight {sw:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return shape_err("conv2d", format!("bias {:?} for {} filters", self.shape(b), sw[0]));
            }
        }
        let (hp, wp) = (sx[2] + 2 * pad_h, sx[3] + 2 * pad_w);
        if hp < sw[2] || wp < sw[3] {
            return shape_err("conv2d", format!("kernel {:?} larger than padded input {hp}x{wp}", &sw[2..]));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            ph: pad_h,
            pw: pad_w,
            ho: hp - sw[2] + 1,
            wo: wp - sw[3] + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (ckk, np) = (geom.ckk(), geom.n * geom.p());
        let mut tmp = vec![T::zero(); geom.o * np];
        T::gemm(geom.o, ckk, np, T::one(), self.value(w).data(), ckk, 1, &cols, np, 1, T::zero(), &mut tmp, np, 1);
        let p = geom.p();
        let mut out = vec![T::zero(); geom.n * geom.o * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for o in 0..geom.o {
            let bo = bias.as_ref().map_or(T::zero(), |bv| bv[o]);
            for n in 0..geom.n {
                let src = &tmp[o * np + n * p..o * np + (n + 1) * p];
                let dst = &mut out[(n * geom.o + o) * p..(n * geom.o + o + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Non-overlapping max pooling over the last two axes of `[N, C, H, W]`.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, x: Var, win_h: usize, win_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || win_h == 0 || win_w == 0 || sx[2] < win_h || sx[3] < win_w {
            return shape_err("maxpool2d", format!("input {sx:?}, window {win_h}x{win_w}"));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / win_h, w / win_w);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * win_h * w + ox * win_w;
                    for dy in 0..win_h {
                        for dx in 0..win_w {
                            let idx = base + (oy * win_h + dy) * w + ox * win_w + dx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::MaxPool { x, argmax }, ng))
    }

    /// Training-mode batch norm over `[N, C, ...]`: normalises each channel with
    /// the biased batch variance and returns the batch statistics so the caller
    /// can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let sx = self.shape(x).to_vec();
        self.check_bn("batch_norm", &sx, gamma, beta)?;
        if sx[0] < 2 {
            return Err(NnError::BatchTooSmall(sx[0]));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let count = n * inner;
        let cnt = T::from_f64(count as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let row = &xv[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                mean[ch] += row.iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m /= cnt;
        }
        for s in 0..n {
            for ch in 0..c {
                let row = &xv[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                var[ch] += row.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        for v in &mut var {
            *v /= cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (t, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, &sx)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, inner, training: true }, ng);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        self.check_bn("batch_norm", &sx, gamma, beta)?;
        if mean.len() != sx[1] || var.len() != sx[1] {
            return shape_err("batch_norm", "running statistics length differs from channel count");
        }
        let inner: usize = sx[2..].iter().product();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (t, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, &sx)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, inner, training: false }, ng))
    }

    fn check_bn(&self, op: &'static str, sx: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return shape_err(op, format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)));
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        sx: &[usize],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        Ok((Tensor::new(sx.to_vec(), out)?, xhat))
    }

    /// Row-wise `v / ||v||_2` on a 2-D input.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return shape_err("l2_normalize", format!("expected 2-D input, got {sx:?}"));
        }
        let d = sx[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(sx[0]);
        for (r, row) in xv.chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(NnError::ZeroNorm(r));
            }
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(sx, out)?, Op::L2Normalize { x, norms }, ng))
    }

    /// Row-wise `log sum_j exp(x[i, j])` over the entries selected by `mask`
    /// (all entries when `mask` is `None`). Output shape `[N]`.
    pub fn row_logsumexp(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return shape_err("row_logsumexp", format!("expected 2-D input, got {sx:?}"));
        }
        if let Some(m) = mask {
            if m.len() != sx[0] * sx[1] {
                return shape_err("row_logsumexp", format!("mask length {} for {sx:?}", m.len()));
            }
        }
        let cols = sx[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(sx[0]);
        let mut probs = vec![T::zero(); xv.len()];
        for r in 0..sx[0] {
            let sel = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if sel(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return shape_err("row_logsumexp", format!("row {r} selects no entries"));
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if sel(j) {
                    let e = (v - mx).exp();
                    probs[r * cols + j] = e;
                    z += e;
                }
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p /= z;
            }
            out.push(mx + z.ln());
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![sx[0]], out)?, Op::RowLogSumExp { x, probs }, ng))
    }

    /// Picks `x[i, idx[i]]` from a 2-D input. Output shape `[N]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || idx.len() != sx[0] || idx.iter().any(|&j| j >= sx[1]) {
            return shape_err("gather_rows", format!("input {sx:?}, {} indices", idx.len()));
        }
        let xv = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| xv[i * sx[1] + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![sx[0]], out)?, Op::Gather { x, idx: idx.to_vec() }, ng))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NnError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut params: Vec<Option<Vec<T>>> = Vec::new();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let k = id.index();
                    if params.len() <= k {
                        params.resize_with(k + 1, || None);
                    }
                    match &mut params[k] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| d.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, &gy), &bb) in d.iter_mut().zip(&g).zip(bv) {
                            *x += gy * bb;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((x, &gy), &aa) in d.iter_mut().zip(&g).zip(av) {
                            *x += gy * aa;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, |d| d.iter_mut().zip(&g).for_each(|(x, &y)| *x += s * y));
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::Mean(a) => {
                    let n = T::from_f64(self.value(*a).numel() as f64);
                    let g0 = g[0] / n;
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::Reshape(a) => self.acc(&mut grads, *a, |d| add_into(d, &g)),
                Op::Relu(a) => {
                    let out = node.value.data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, &gy), &o) in d.iter_mut().zip(&g).zip(out) {
                            if o > T::zero() {
                                *x += gy;
                            }
                        }
                    });
                }
                Op::MatMul { a, b, ta, tb, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let (rsa, csa) = if *ta { (1, sa[1]) } else { (sa[1], 1) };
                    let (rsb, csb) = if *tb { (1, sb[1]) } else { (sb[1], 1) };
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // dA_logical[m,k] = g[m,n] . B_logical^T
                    self.acc(&mut grads, *a, |d| {
                        T::gemm(m, n, k, T::one(), &g, n, 1, bv, csb, rsb, T::one(), d, rsa, csa);
                    });
                    // dB_logical[k,n] = A_logical^T . g
                    self.acc(&mut grads, *b, |d| {
                        T::gemm(k, m, n, T::one(), av, csa, rsa, &g, n, 1, T::one(), d, rsb, csb);
                    });
                }
                Op::AddBias { x, b } => {
                    let f = self.shape(*b)[0];
                    self.acc(&mut grads, *x, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        for row in g.chunks(f) {
                            add_into(d, row);
                        }
                    });
                }
                Op::Conv2d { x, w, b, geom, cols } => self.conv2d_backward(&mut grads, &g, *x, *w, *b, geom, cols),
                Op::MaxPool { x, argmax } => {
                    self.acc(&mut grads, *x, |d| {
                        for (&gy, &idx) in g.iter().zip(argmax) {
                            d[idx] += gy;
                        }
                    });
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, inner, training } => {
                    let sx = self.shape(*x);
                    let (n, c, inner) = (sx[0], sx[1], *inner);
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            for i in off..off + inner {
                                dgamma[ch] += g[i] * xhat[i];
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                    self.acc(&mut grads, *gamma, |d| add_into(d, &dgamma));
                    self.acc(&mut grads, *beta, |d| add_into(d, &dbeta));
                    let training = *training;
                    self.acc(&mut grads, *x, |d| {
                        let m = T::from_f64((n * inner) as f64);
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * inner;
                                let scale = gv[ch] * inv_std[ch];
                                for i in off..off + inner {
                                    d[i] += if training {
                                        // dxhat_i = g_i * gamma; dx = inv_std/M (M dxhat - sum dxhat - xhat sum dxhat xhat)
                                        scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                    } else {
                                        scale * g[i]
                                    };
                                }
                            }
                        }
                    });
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.data();
                    let dcols = node.value.shape()[1];
                    self.acc(&mut grads, *x, |d| {
                        for r in 0..norms.len() {
                            let yr = &y[r * dcols..(r + 1) * dcols];
                            let gr = &g[r * dcols..(r + 1) * dcols];
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..dcols {
                                d[r * dcols + j] += (gr[j] - yr[j] * dot) / norms[r];
                            }
                        }
                    });
                }
                Op::RowLogSumExp { x, probs } => {
                    let cols = self.shape(*x)[1];
                    self.acc(&mut grads, *x, |d| {
                        for (r, &gr) in g.iter().enumerate() {
                            for j in 0..cols {
                                d[r * cols + j] += gr * probs[r * cols + j];
                            }
                        }
                    });
                }
                Op::Gather { x, idx } => {
                    let cols = self.shape(*x)[1];
                    self.acc(&mut grads, *x, |d| {
                        for (r, (&gr, &j)) in g.iter().zip(idx).enumerate() {
                            d[r * cols + j] += gr;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(buf);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[T],
    ) {
        let (ckk, p) = (geom.ckk(), geom.p());
        let np = geom.n * p;
        // g is [N, O, P]; gather it into [O, N*P] to match the column layout.
        let mut gt = vec![T::zero(); geom.o * np];
        for n in 0..geom.n {
            for o in 0..geom.o {
                let src = &g[(n * geom.o + o) * p..(n * geom.o + o + 1) * p];
                gt[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(src);
            }
        }
        if let Some(b) = b {
            self.acc(grads, b, |d| {
                for (o, row) in gt.chunks(np).enumerate() {
                    d[o] += row.iter().copied().sum::<T>();
                }
            });
        }
        self.acc(grads, w, |d| {
            T::gemm(geom.o, np, ckk, T::one(), &gt, np, 1, cols, 1, np, T::one(), d, ckk, 1);
        });
        if self.nodes[x.0].needs_grad {
            let wv = self.value(w).data();
            let mut dcols = vec![T::zero(); ckk * np];
            T::gemm(ckk, geom.o, np, T::one(), wv, 1, ckk, &gt, np, 1, T::zero(), &mut dcols, np, 1);
            self.acc(grads, x, |d| col2im_add(&dcols, geom, d));
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Column matrix `[C*KH*KW, N*HO*WO]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut cols = vec![T::zero(); g.ckk() * np];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = oy + ki;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let iy = iy - g.ph;
                        let dst = &mut dst_row[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox + kj;
                            if ix >= g.pw && ix - g.pw < g.w {
                                *d = plane[iy * g.w + ix - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (p, np) = (g.p(), g.n * g.p());
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &dcols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = oy + ki;
                        if iy < g.ph || iy - g.ph >= g.h {
                            continue;
                        }
                        let iy = iy - g.ph;
                        let src = &src_row[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = ox + kj;
                            if ix >= g.pw && ix - g.pw < g.w {
                                plane[iy * g.w + ix - g.pw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
