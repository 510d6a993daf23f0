//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! Values live on a [`Tape`] as nodes addressed by [`Var`] handles. Every
//! operation appends one node; [`Tape::backward`] walks the nodes in reverse
//! and returns a [`Gradients`] table without mutating the tape, so repeated
//! backward passes over the same forward are bit-identical.
//!
//! Layout conventions: matrices are `[rows, cols]`, feature maps are
//! `[height, width, channels]`, convolution kernels are
//! `[kh, kw, in_channels, out_channels]` and depthwise kernels `[kh, kw, channels]`.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// Owned tensor value, used for parameters, images and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the stored gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        input: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (in_h, in_w) = (input[0], input[1]);
        if stride == 0 {
            return Err(Error::dim(op, input, &[kh, kw, stride]));
        }
        let (out_h, pad_top) = conv_extent(in_h, kh, stride, padding)
            .ok_or_else(|| Error::dim(op, input, &[kh, kw, stride]))?;
        let (out_w, pad_left) = conv_extent(in_w, kw, stride, padding)
            .ok_or_else(|| Error::dim(op, input, &[kh, kw, stride]))?;
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the map.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNormInjected {
        x: Var,
        residual: Var,
        injected: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    NllFromProbs {
        probs: Var,
        labels: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    DepthwiseConv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Parameters may be borrowed for the
/// lifetime of the tape, so building a graph never copies weights.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op,
            detail: "NaN input".into(),
        });
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Registers a tensor by reference; it participates in gradients when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape.clone(), Cow::Borrowed(&t.data), Op::Leaf, t.requires_grad)
    }

    /// Registers a tensor by reference with gradient tracking forced off.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape.clone(), Cow::Borrowed(&t.data), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Leaf, false))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("variable", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), Cow::Owned(data), Op::Leaf, true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], Cow::Owned(out), Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean(x), rg)
    }

    /// Max-subtracted softmax along `axis`. `-inf` entries are allowed (masking)
    /// as long as every slice has at least one finite entry.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let v = self.value(x);
        check_finite("softmax", v)?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::Numeric {
                        op: "softmax",
                        detail: "slice without a finite entry".into(),
                    });
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::Softmax {
                input: x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis of `x + residual + injected`,
    /// with `injected` broadcast to every row and included in the statistics.
    pub fn layer_norm_injected(
        &mut self,
        x: Var,
        residual: Var,
        injected: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::dim("layer_norm_injected", &sx, &[2]));
        }
        let d = sx[1];
        if self.shape(residual) != sx.as_slice() {
            return Err(Error::dim("layer_norm_injected", &sx, self.shape(residual)));
        }
        for v in [injected, gamma, beta] {
            if self.shape(v) != [d] {
                return Err(Error::dim("layer_norm_injected", &sx, self.shape(v)));
            }
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let rows = sx[0];
        let (xv, rv, iv) = (self.value(x), self.value(residual), self.value(injected));
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let mut s = vec![0.0; d];
        for t in 0..rows {
            for j in 0..d {
                s[j] = xv[t * d + j] + rv[t * d + j] + iv[j];
            }
            let mu = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[t] = is;
            for j in 0..d {
                let n = (s[j] - mu) * is;
                normalized[t * d + j] = n;
                out[t * d + j] = gv[j] * n + bv[j];
            }
        }
        let rg = [x, residual, injected, gamma, beta].iter().any(|&v| self.rg(v));
        Ok(self.push(
            sx,
            Cow::Owned(out),
            Op::LayerNormInjected {
                x,
                residual,
                injected,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target equals `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        }
        let (b, v) = (s[0], s[1]);
        let lv = self.value(logits);
        check_finite("cross_entropy", lv)?;
        let mut rows = Vec::with_capacity(b);
        let mut probs = vec![0.0; b * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                rows.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::dim("cross_entropy", &s, &[t]));
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
            total += log_z - row[t];
            count += 1;
            rows.push(Some(t));
        }
        if count == 0 {
            return Err(Error::DegenerateBatch("every target position is ignored".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![total / count as f64]),
            Op::CrossEntropy {
                logits,
                rows,
                probs,
                count,
            },
            rg,
        ))
    }

    /// `-(1/B) Σ log p[i, label_i]` for a `[B, n]` matrix of probabilities.
    pub fn nll_from_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if labels.is_empty() {
            return Err(Error::DegenerateBatch("empty label list".into()));
        }
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("nll_from_probs", &s, &[labels.len()]));
        }
        let n = s[1];
        let pv = self.value(probs);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::dim("nll_from_probs", &s, &[y]));
            }
            total -= pv[i * n + y].ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![total / labels.len() as f64]),
            Op::NllFromProbs {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[2] != si[2] {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        let geom = ConvGeom::new("conv2d", &si, sk[0], sk[1], stride, padding)?;
        let (cin, cout) = (sk[2], sk[3]);
        let x = self.value(input);
        let w = self.value(kernel);
        let mut out = vec![0.0; geom.out_h * geom.out_w * cout];
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let o = &mut out[(oy * geom.out_w + ox) * cout..][..cout];
                for ky in 0..geom.kh {
                    let Some(iy) = ConvGeom::src(oy, ky, stride, geom.pad_top, geom.in_h) else {
                        continue;
                    };
                    for kx in 0..geom.kw {
                        let Some(ix) = ConvGeom::src(ox, kx, stride, geom.pad_left, geom.in_w) else {
                            continue;
                        };
                        let xs = &x[(iy * geom.in_w + ix) * cin..][..cin];
                        let wk = &w[(ky * geom.kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (ov, &wv) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![geom.out_h, geom.out_w, cout],
            Cow::Owned(out),
            Op::Conv2d { input, kernel, geom },
            rg,
        ))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 3 || sk[2] != si[2] {
            return Err(Error::dim("depthwise_conv2d", &si, &sk));
        }
        let geom = ConvGeom::new("depthwise_conv2d", &si, sk[0], sk[1], stride, padding)?;
        let c = si[2];
        let x = self.value(input);
        let w = self.value(kernel);
        let mut out = vec![0.0; geom.out_h * geom.out_w * c];
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let o = &mut out[(oy * geom.out_w + ox) * c..][..c];
                for ky in 0..geom.kh {
                    let Some(iy) = ConvGeom::src(oy, ky, stride, geom.pad_top, geom.in_h) else {
                        continue;
                    };
                    for kx in 0..geom.kw {
                        let Some(ix) = ConvGeom::src(ox, kx, stride, geom.pad_left, geom.in_w) else {
                            continue;
                        };
                        let xs = &x[(iy * geom.in_w + ix) * c..][..c];
                        let wk = &w[(ky * geom.kw + kx) * c..][..c];
                        for ((ov, &xv), &wv) in o.iter_mut().zip(xs).zip(wk) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![geom.out_h, geom.out_w, c],
            Cow::Owned(out),
            Op::DepthwiseConv2d { input, kernel, geom },
            rg,
        ))
    }

    /// Reduces `[H, W, C]` to `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("global_avg_pool", &s, &[3]));
        }
        let c = s[2];
        let hw = s[0] * s[1];
        let mut out = vec![0.0; c];
        for px in self.value(x).chunks_exact(c) {
            out.iter_mut().zip(px).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= hw as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![c], Cow::Owned(out), Op::GlobalAvgPool(x), rg))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::dim("embedding", &s, &[ids.len()]));
        }
        let d = s[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(Error::dim("embedding", &s, &[id]));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", &[], &[]))?;
        let d = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, d], Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols", &[], &[]))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, len], Cow::Owned(out), Op::SliceCols { input: x, start }, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Interior nodes keep their gradients too; only prune what never required one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.len();
                grads[$v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let bv = self.value(*b);
                    let da = slot!(*a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                if rg(*b) {
                    let av = self.value(*a);
                    let db = slot!(*b);
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if rg(*x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if rg(*bias) {
                    let db = slot!(*bias);
                    let d = db.len();
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = self.value(*b);
                    let da = slot!(*a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let av = self.value(*a);
                    let db = slot!(*b);
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(d, v)| *d += v * c);
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let xv = self.value(*x);
                    let dx = slot!(*x);
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Transpose(x) => {
                if rg(*x) {
                    let s = self.shape(*x);
                    let (r, c) = (s[0], s[1]);
                    let dx = slot!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    slot!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let dx = slot!(*x);
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                if rg(*input) {
                    let y = &node.value;
                    let dx = slot!(*input);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNormInjected {
                x,
                residual,
                injected,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = inv_std.len();
                let gv = self.value(*gamma);
                if rg(*gamma) {
                    let dg = slot!(*gamma);
                    for t in 0..rows {
                        for j in 0..d {
                            dg[j] += g[t * d + j] * normalized[t * d + j];
                        }
                    }
                }
                if rg(*beta) {
                    let db = slot!(*beta);
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if rg(*x) || rg(*residual) || rg(*injected) {
                    let mut ds = vec![0.0; rows * d];
                    for t in 0..rows {
                        let gr = &g[t * d..(t + 1) * d];
                        let nr = &normalized[t * d..(t + 1) * d];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[j];
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            ds[t * d + j] = inv_std[t] * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    for v in [*x, *residual] {
                        if rg(v) {
                            slot!(v).iter_mut().zip(&ds).for_each(|(o, s)| *o += s);
                        }
                    }
                    if rg(*injected) {
                        let di = slot!(*injected);
                        for row in ds.chunks_exact(d) {
                            di.iter_mut().zip(row).for_each(|(o, s)| *o += s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                probs,
                count,
            } => {
                if rg(*logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / *count as f64;
                    let dl = slot!(*logits);
                    for (r, t) in rows.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            dl[r * v + j] += scale * probs[r * v + j];
                        }
                        dl[r * v + t] -= scale;
                    }
                }
            }
            Op::NllFromProbs { probs, labels } => {
                if rg(*probs) {
                    let n = self.shape(*probs)[1];
                    let pv = self.value(*probs);
                    let b = labels.len() as f64;
                    let dp = slot!(*probs);
                    for (i, &y) in labels.iter().enumerate() {
                        dp[i * n + y] -= g[0] / (b * pv[i * n + y]);
                    }
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let cin = self.shape(*input)[2];
                let cout = self.shape(*kernel)[3];
                let x = self.value(*input);
                let w = self.value(*kernel);
                let want_x = rg(*input);
                let want_w = rg(*kernel);
                let mut dx = want_x.then(|| vec![0.0; x.len()]);
                let mut dw = want_w.then(|| vec![0.0; w.len()]);
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let go = &g[(oy * geom.out_w + ox) * cout..][..cout];
                        for ky in 0..geom.kh {
                            let Some(iy) = ConvGeom::src(oy, ky, geom.stride, geom.pad_top, geom.in_h) else {
                                continue;
                            };
                            for kx in 0..geom.kw {
                                let Some(ix) = ConvGeom::src(ox, kx, geom.stride, geom.pad_left, geom.in_w)
                                else {
                                    continue;
                                };
                                let xo = (iy * geom.in_w + ix) * cin;
                                let wo = (ky * geom.kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wrow = &w[wo + ci * cout..][..cout];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xo + ci] += go.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let xv = x[xo + ci];
                                        if xv != 0.0 {
                                            for (d, gv) in dw[wo + ci * cout..][..cout].iter_mut().zip(go) {
                                                *d += xv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    slot!(*input).iter_mut().zip(&dx).for_each(|(o, v)| *o += v);
                }
                if let Some(dw) = dw {
                    slot!(*kernel).iter_mut().zip(&dw).for_each(|(o, v)| *o += v);
                }
            }
            Op::DepthwiseConv2d { input, kernel, geom } => {
                let c = self.shape(*input)[2];
                let x = self.value(*input);
                let w = self.value(*kernel);
                let want_x = rg(*input);
                let want_w = rg(*kernel);
                let mut dx = want_x.then(|| vec![0.0; x.len()]);
                let mut dw = want_w.then(|| vec![0.0; w.len()]);
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let go = &g[(oy * geom.out_w + ox) * c..][..c];
                        for ky in 0..geom.kh {
                            let Some(iy) = ConvGeom::src(oy, ky, geom.stride, geom.pad_top, geom.in_h) else {
                                continue;
                            };
                            for kx in 0..geom.kw {
                                let Some(ix) = ConvGeom::src(ox, kx, geom.stride, geom.pad_left, geom.in_w)
                                else {
                                    continue;
                                };
                                let xo = (iy * geom.in_w + ix) * c;
                                let wo = (ky * geom.kw + kx) * c;
                                for ch in 0..c {
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xo + ch] += go[ch] * w[wo + ch];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[wo + ch] += go[ch] * x[xo + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    slot!(*input).iter_mut().zip(&dx).for_each(|(o, v)| *o += v);
                }
                if let Some(dw) = dw {
                    slot!(*kernel).iter_mut().zip(&dw).for_each(|(o, v)| *o += v);
                }
            }
            Op::GlobalAvgPool(x) => {
                if rg(*x) {
                    let s = self.shape(*x);
                    let c = s[2];
                    let inv = 1.0 / (s[0] * s[1]) as f64;
                    let dx = slot!(*x);
                    for px in dx.chunks_exact_mut(c) {
                        px.iter_mut().zip(g).for_each(|(o, v)| *o += v * inv);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = self.shape(*table)[1];
                    let dt = slot!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if rg(p) {
                        slot!(p).iter_mut().zip(&g[off..off + n]).for_each(|(o, v)| *o += v);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if rg(p) {
                        let dp = slot!(p);
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { input, start } => {
                if rg(*input) {
                    let cols = self.shape(*input)[1];
                    let (rows, len) = (node.shape[0], node.shape[1]);
                    let dx = slot!(*input);
                    for r in 0..rows {
                        for j in 0..len {
                            dx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let mut tape = Tape::new();
        let i = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = tape.constant(&[2, 1], vec![0.0, 5.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!(close(tape.value(y), &[1.0, 0.0], 1e-12));

        let x = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!(close(tape.value(y), &[0.09003, 0.24473, 0.66524], 1e-5));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_non_last_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!(close(tape.value(y), &[0.5, 0.5, 0.5, 0.5], 1e-15));
    }

    #[test]
    fn layer_norm_zero_input_is_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(&[2, 4], vec![0.0; 8]).unwrap();
        let i = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
        let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm_injected(z, z, i, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_each_row() {
        let mut tape = Tape::new();
        // rows with mean 5
        let x = tape.constant(&[2, 4], vec![2.0, 4.0, 6.0, 8.0, 5.0, 5.0, 4.0, 6.0]).unwrap();
        let z = tape.constant(&[2, 4], vec![0.0; 8]).unwrap();
        let i = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
        let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let eps = 1e-5;
        let y = tape.layer_norm_injected(x, z, i, g, b, eps).unwrap();
        for (row, raw_var) in tape.value(y).chunks(4).zip([5.0, 0.5]) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            // undo the eps shrinkage to recover the pre-eps variance
            assert!((var * (raw_var + eps) / raw_var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_dimension_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 4], vec![0.0; 8]).unwrap();
        let i = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
        assert!(matches!(
            tape.layer_norm_injected(x, x, i, g, g, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        let loss = tape.cross_entropy(l, &[0], usize::MAX).unwrap();
        assert!(tape.value(loss)[0] < 1e-30);

        let l = tape.constant(&[2, 4], vec![0.3; 8]).unwrap();
        let loss = tape.cross_entropy(l, &[1, 3], usize::MAX).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-9);

        // hand instance: rows [1,2,3] target 2 and [0,0,1] target 0
        let l = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = tape.cross_entropy(l, &[2, 0], usize::MAX).unwrap();
        let r1 = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let r2 = -(1.0 / (2.0 + 1f64.exp())).ln();
        assert!((tape.value(loss)[0] - (r1 + r2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_degenerate() {
        let mut tape = Tape::new();
        let l = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(tape.cross_entropy(l, &[7, 7], 7), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn relu_and_pool() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);

        let m = tape.constant(&[3, 2, 2], [1.5, -2.0].repeat(6)).unwrap();
        let p = tape.global_avg_pool(m).unwrap();
        assert_eq!(tape.value(p), &[1.5, -2.0]);
    }

    #[test]
    fn conv_extents() {
        assert_eq!(conv_extent(7, 3, 2, Padding::Same), Some((4, 1)));
        assert_eq!(conv_extent(8, 3, 2, Padding::Same), Some((4, 0)));
        assert_eq!(conv_extent(8, 3, 1, Padding::Valid), Some((6, 0)));
        assert_eq!(conv_extent(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 4, 3], vec![0.0; 48]).unwrap();
        let k = tape.constant(&[3, 3, 2, 4], vec![0.0; 72]).unwrap();
        assert!(tape.conv2d(x, k, 1, Padding::Same).is_err());
        let k = tape.constant(&[3, 3, 3, 4], vec![0.0; 108]).unwrap();
        assert!(tape.conv2d(x, k, 0, Padding::Same).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let a = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a), Some(&[1.0, 1.0][..]));
        assert!(grads.get(b).is_none());
    }
}
