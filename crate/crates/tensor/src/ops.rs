use std::rc::Rc;

use crate::graph::Node;
use crate::tensor::check_shape;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    MeanTrailing { x: Var },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Gather { x: Var, index: Rc<[usize]> },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Logistic function clamped to the open interval (0, 1), which plain
/// rounding would otherwise leave for |x| beyond roughly 17 in f32.
fn sigmoid<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(top)
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

// da[m,k] += dc[m,n] · bᵀ
fn matmul_grad_a<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize, scale: T) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: T = dcrow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            da[i * k + p] = da[i * k + p] + s * scale;
        }
    }
}

// db[k,n] += aᵀ · dc
fn matmul_grad_b<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &g) in dbrow.iter_mut().zip(dcrow) {
                *o = *o + av * g;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(f);
        Ok(self.push(value, op, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            matmul_into(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, batch, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        self.unary(x, |v| v * f, Op::Scale { x, factor: f })
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds `bias[c]` to every element of channel `c` in `x[c, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let c = self.shape(x)[0];
        if self.shape(bias) != [c] {
            return Err(mismatch(
                "add_channel_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let inner = self.value(x).numel() / c;
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / inner])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// `x · w + b` for `x[m,k]`, `w[k,n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        self.unary(
            x,
            move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu { x },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let n = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(mismatch(
                "layer_norm",
                format!("{:?} with affine {:?}/{:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::lit(eps);
        let nt = T::lit(n as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(xd.len() / n);
        let mut out = vec![T::zero(); xd.len()];
        for (r, row) in xd.chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, &[x]))
    }

    /// Mean over every axis but the first: `[c, ...] → [c]`.
    pub fn mean_trailing(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let c = v.shape()[0];
        let inner = v.numel() / c;
        let it = T::lit(inner as f64);
        let data = v
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<T>() / it)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push(value, Op::MeanTrailing { x }, &[x]))
    }

    /// Global average pooling `[C,H,W] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.shape(x).len() != 3 {
            return Err(mismatch("global_avg_pool", format!("expected [C,H,W], got {:?}", self.shape(x))));
        }
        self.mean_trailing(x)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: base.len(),
            });
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
            parts,
        ))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`. Covers slicing, transposes
    /// and window partitioning.
    pub fn gather(&mut self, x: Var, index: impl Into<Rc<[usize]>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let index: Rc<[usize]> = index.into();
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != index.len() {
            return Err(mismatch("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            let v = *src.get(i).ok_or(TensorError::IndexOutOfRange {
                index: i,
                len: src.len(),
            })?;
            data.push(v);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// 2-d transpose `[m,n] → [n,m]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        self.gather(x, crate::index::transpose(m, n), vec![n, m])
    }

    /// Rows `start..start+len` of `x[m, ...]`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(mismatch("rows", format!("rows {start}..{} of {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let index: Vec<usize> = (start * inner..(start + len) * inner).collect();
        let mut shape = s;
        shape[0] = len;
        self.gather(x, index, shape)
    }

    /// 2-d convolution without bias: `x[Ci,H,W]`, `w[Co,Ci,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] || stride == 0 {
            return Err(mismatch("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding {
            return Err(TensorError::WindowTooLarge {
                op: "conv2d",
                window: kh,
                extent: h + 2 * padding,
            });
        }
        if kw > wd + 2 * padding {
            return Err(TensorError::WindowTooLarge {
                op: "conv2d",
                window: kw,
                extent: wd + 2 * padding,
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); co * ho * wo];
        for o in 0..co {
            for c in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((o * ci + c) * kh + ki) * kw + kj];
                        for oy in 0..ho {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = (c * h + iy as usize) * wd + ix as usize;
                                let oi = (o * ho + oy) * wo + ox;
                                out[oi] = out[oi] + wv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, padding }, &[x, w]))
    }

    /// Window maximum over `x[C,H,W]`; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 3 || stride == 0 || k == 0 {
            return Err(mismatch("maxpool2d", format!("input {s:?}, window {k}, stride {stride}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if k > h || k > w {
            return Err(TensorError::WindowTooLarge {
                op: "maxpool2d",
                window: k,
                extent: h.min(w),
            });
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (ch * h + oy * stride) * w + ox * stride;
                    for ki in 0..k {
                        for kj in 0..k {
                            let i = (ch * h + oy * stride + ki) * w + ox * stride + kj;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[N,K]`. Non-finite logits are rejected.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let lv = self.value(logits);
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy logits"));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for (r, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[labels[r]]);
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::lit(labels.len() as f64);
        if !loss.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy"));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }
}

fn acc<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(slot);
}

fn acc_elementwise<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    g: &[T],
    f: impl Fn(usize, T) -> T,
) {
    acc(nodes, grads, v, |slot| {
        for (i, (s, &gi)) in slot.iter_mut().zip(g).enumerate() {
            *s = *s + f(i, gi);
        }
    });
}

pub(crate) fn backward_node<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    sabotage: bool,
) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let scale = if sabotage { T::lit(1.1) } else { T::one() };
            acc(nodes, grads, *a, |da| matmul_grad_a(g, val(*b), da, *m, *k, *n, scale));
            acc(nodes, grads, *b, |db| matmul_grad_b(val(*a), g, db, *m, *k, *n));
        }
        Op::Bmm { a, b, batch, m, k, n } => {
            let (mk, kn, mn) = (m * k, k * n, m * n);
            acc(nodes, grads, *a, |da| {
                for t in 0..*batch {
                    matmul_grad_a(
                        &g[t * mn..(t + 1) * mn],
                        &val(*b)[t * kn..(t + 1) * kn],
                        &mut da[t * mk..(t + 1) * mk],
                        *m,
                        *k,
                        *n,
                        T::one(),
                    );
                }
            });
            acc(nodes, grads, *b, |db| {
                for t in 0..*batch {
                    matmul_grad_b(
                        &val(*a)[t * mk..(t + 1) * mk],
                        &g[t * mn..(t + 1) * mn],
                        &mut db[t * kn..(t + 1) * kn],
                        *m,
                        *k,
                        *n,
                    );
                }
            });
        }
        Op::Add { a, b } => {
            acc_elementwise(nodes, grads, *a, g, |_, gi| gi);
            acc_elementwise(nodes, grads, *b, g, |_, gi| gi);
        }
        Op::Sub { a, b } => {
            acc_elementwise(nodes, grads, *a, g, |_, gi| gi);
            acc_elementwise(nodes, grads, *b, g, |_, gi| -gi);
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            acc_elementwise(nodes, grads, *a, g, |i, gi| gi * bv[i]);
            acc_elementwise(nodes, grads, *b, g, |i, gi| gi * av[i]);
        }
        Op::Scale { x, factor } => acc_elementwise(nodes, grads, *x, g, |_, gi| gi * *factor),
        Op::AddBias { x, bias } => {
            acc_elementwise(nodes, grads, *x, g, |_, gi| gi);
            acc(nodes, grads, *bias, |db| {
                let n = db.len();
                for (i, &gi) in g.iter().enumerate() {
                    db[i % n] = db[i % n] + gi;
                }
            });
        }
        Op::AddChannelBias { x, bias } => {
            acc_elementwise(nodes, grads, *x, g, |_, gi| gi);
            acc(nodes, grads, *bias, |db| {
                let inner = g.len() / db.len();
                for (i, &gi) in g.iter().enumerate() {
                    db[i / inner] = db[i / inner] + gi;
                }
            });
        }
        Op::Sigmoid { x } => acc_elementwise(nodes, grads, *x, g, |i, gi| gi * out[i] * (T::one() - out[i])),
        Op::Tanh { x } => acc_elementwise(nodes, grads, *x, g, |i, gi| gi * (T::one() - out[i] * out[i])),
        Op::Relu { x } => {
            let xv = val(*x);
            acc_elementwise(nodes, grads, *x, g, |i, gi| if xv[i] > T::zero() { gi } else { T::zero() })
        }
        Op::Gelu { x } => {
            let xv = val(*x);
            let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
            let three = T::lit(3.0);
            acc_elementwise(nodes, grads, *x, g, |i, gi| {
                let v = xv[i];
                let t = (c * (v + a * v * v * v)).tanh();
                let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                gi * d
            })
        }
        Op::Softmax { x } => {
            let n = *nodes[id].value.shape().last().unwrap();
            acc(nodes, grads, *x, |dx| {
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    for j in 0..n {
                        dxr[j] = dxr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gm = val(*gamma);
            let n = gm.len();
            let nt = T::lit(n as f64);
            acc(nodes, grads, *x, |dx| {
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        mean_d = mean_d + d;
                        mean_dh = mean_dh + d * hr[j];
                    }
                    mean_d = mean_d / nt;
                    mean_dh = mean_dh / nt;
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        dx[r * n + j] = dx[r * n + j] + *rs * (d - mean_d - hr[j] * mean_dh);
                    }
                }
            });
            acc(nodes, grads, *gamma, |dg| {
                for (i, &gi) in g.iter().enumerate() {
                    dg[i % n] = dg[i % n] + gi * xhat[i];
                }
            });
            acc(nodes, grads, *beta, |db| {
                for (i, &gi) in g.iter().enumerate() {
                    db[i % n] = db[i % n] + gi;
                }
            });
        }
        Op::Sum { x } => acc_elementwise(nodes, grads, *x, &vec![g[0]; nodes[x.0].value.numel()], |_, gi| gi),
        Op::Mean { x } => {
            let n = nodes[x.0].value.numel();
            let share = g[0] / T::lit(n as f64);
            acc(nodes, grads, *x, |dx| {
                for d in dx.iter_mut() {
                    *d = *d + share;
                }
            });
        }
        Op::MeanTrailing { x } => {
            let c = g.len();
            let inner = nodes[x.0].value.numel() / c;
            let it = T::lit(inner as f64);
            acc(nodes, grads, *x, |dx| {
                for (i, d) in dx.iter_mut().enumerate() {
                    *d = *d + g[i / inner] / it;
                }
            });
        }
        Op::Concat { parts, outer, inner, lens } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(lens) {
                acc(nodes, grads, p, |dp| {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Gather { x, index } => acc(nodes, grads, *x, |dx| {
            for (&i, &gi) in index.iter().zip(g) {
                dx[i] = dx[i] + gi;
            }
        }),
        Op::Reshape { x } => acc_elementwise(nodes, grads, *x, g, |_, gi| gi),
        Op::Conv2d { x, w, stride, padding } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (ci, h, wd) = (sx[0], sx[1], sx[2]);
            let (co, kh, kw) = (sw[0], sw[2], sw[3]);
            let so = nodes[id].value.shape();
            let (ho, wo) = (so[1], so[2]);
            let (xd, wdat) = (val(*x), val(*w));
            let (stride, padding) = (*stride, *padding);
            // Visits every (output, kernel tap) pair that touched the input.
            let for_each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
                for o in 0..co {
                    for c in 0..ci {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let wi = ((o * ci + c) * kh + ki) * kw + kj;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ki) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kj) as isize - padding as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (c * h + iy as usize) * wd + ix as usize;
                                        f((o * ho + oy) * wo + ox, wi, xi);
                                    }
                                }
                            }
                        }
                    }
                }
            };
            acc(nodes, grads, *x, |dx| for_each_tap(&mut |oi, wi, xi| dx[xi] = dx[xi] + g[oi] * wdat[wi]));
            acc(nodes, grads, *w, |dw| for_each_tap(&mut |oi, wi, xi| dw[wi] = dw[wi] + g[oi] * xd[xi]));
        }
        Op::MaxPool2d { x, argmax } => acc(nodes, grads, *x, |dx| {
            for (&i, &gi) in argmax.iter().zip(g) {
                dx[i] = dx[i] + gi;
            }
        }),
        Op::CrossEntropy { logits, probs, labels } => {
            let k = probs.len() / labels.len();
            let share = g[0] / T::lit(labels.len() as f64);
            acc(nodes, grads, *logits, |dl| {
                for (i, d) in dl.iter_mut().enumerate() {
                    let onehot = if labels[i / k] == i % k { T::one() } else { T::zero() };
                    *d = *d + (probs[i] - onehot) * share;
                }
            });
        }
    }
}
