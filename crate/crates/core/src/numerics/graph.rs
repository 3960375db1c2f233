use super::tensor::gemm;
use super::{NumericsError, Real, Tensor, NORM_EPS};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape bookkeeping for a 2-D convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    XLogX(Var),
    SumAll(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    NormalizeRows { input: Var, denom: Vec<T> },
    DivScalar(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-use gradient tape. One graph is built per training step; every op
/// appends a node and `backward` walks the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    clamp_events: usize,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not require grad.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of normalizations whose denominator was clamped to the floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector of length `C` to every row of a `[.., C]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &bv) in chunk.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Elementwise product with a constant tensor (typically a 0/1 mask).
    pub fn mul_const(&mut self, x: Var, mask: Tensor<T>) -> Result<Var, NumericsError> {
        if self.shape(x) != mask.shape() {
            return Err(mismatch("mul_const", self.shape(x), mask.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| a * m)
            .collect();
        let out = Tensor::new(mask.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, mask), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through rather than being clipped to zero
        let out = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        let rg = self.rg(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    /// `x * ln(x)` with `0 * ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v <= T::zero() {
                T::zero()
            } else {
                v * v.ln()
            }
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::XLogX(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// `[R, C] -> [R]`, summing each row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = v.dims2();
        let data = (0..r).map(|i| v.data()[i * c..(i + 1) * c].iter().copied().sum()).collect();
        let out = Tensor::new(vec![r], data).expect("row sums");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumRows(x), rg)
    }

    /// `[R, C] -> [C]`, summing each column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, c) = v.dims2();
        let mut data = vec![T::zero(); c];
        for row in v.data().chunks(c.max(1)) {
            for (d, &e) in data.iter_mut().zip(row) {
                *d += e;
            }
        }
        let out = Tensor::new(vec![c], data).expect("column sums");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = super::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// L2-normalizes every row, clamping norms at the normalization floor.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = v.dims2();
        let eps = T::of(NORM_EPS);
        let mut out = v.clone();
        let mut denom = Vec::with_capacity(r);
        let mut clamped = 0;
        for row in out.data_mut().chunks_mut(c.max(1)).take(r) {
            let norm = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let d = if norm > eps {
                norm
            } else {
                clamped += 1;
                eps
            };
            for a in row.iter_mut() {
                *a /= d;
            }
            denom.push(d);
        }
        if clamped > 0 {
            log::warn!("normalize_rows: {clamped} row(s) below norm floor {NORM_EPS}");
            self.clamp_events += clamped;
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows { input: x, denom }, rg)
    }

    /// Divides every element of `x` by the single-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        if self.value(s).len() != 1 {
            return Err(NumericsError::NotScalar("div_scalar divisor"));
        }
        let d = self.value(s).data()[0];
        let out = self.value(x).map(|v| v / d);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::DivScalar(x, s), rg))
    }

    /// Convolution over NHWC input with weight `[k*k*in_c, out_c]` and bias `[out_c]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[0] != kernel * kernel * xs[3] || stride == 0 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if xs[1] + 2 * pad < kernel || xs[2] + 2 * pad < kernel {
            return Err(mismatch("conv2d", &xs, &[kernel, kernel]));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(mismatch("conv2d bias", &ws, self.shape(bias)));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            in_c: xs[3],
            out_c: ws[1],
            kernel,
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - kernel) / stride + 1,
            out_w: (xs[2] + 2 * pad - kernel) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let rows = geom.rows();
        let mut out = vec![T::zero(); rows * geom.out_c];
        let bias_v = self.value(bias).data();
        for row in out.chunks_mut(geom.out_c) {
            row.copy_from_slice(bias_v);
        }
        gemm(
            false,
            false,
            rows,
            geom.patch(),
            geom.out_c,
            &cols,
            self.value(weight).data(),
            T::one(),
            &mut out,
        );
        let out = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 average pooling with stride 2 over NHWC input (odd edges dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(mismatch("avg_pool2", &s, &[2, 2]));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * oh * ow * c];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((b * oh + i) * ow + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let p = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                        for ch in 0..c {
                            out[o + ch] += src[p + ch] * quarter;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// `[N, H, W, C] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("global_avg_pool", &s, &[4]));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let src = self.value(x).data();
        let inv = T::one() / T::of(hw as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..hw {
                let base = (b * hw + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += src[base + ch] * inv;
                }
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Per-row layer normalization with affine `gain` and `bias` of length `C`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.value(x).dims2();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let bv = self.value(bias).data();
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() * inv_c;
            let is = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + bv[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::NotScalar("concat_rows of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(mismatch("concat_rows", &tail, &s[1..]));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(mismatch("slice_rows", &s, &[start, end]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { input: x, start }, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar("backward"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            // Leaves keep their gradients; interior nodes are released.
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(false, true, m, n, k, g.data(), vb.data(), T::zero(), da.data_mut());
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(true, false, k, m, n, va.data(), g.data(), T::zero(), db.data_mut());
                    self.acc(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let c = self.value(*b).len();
                    let mut db = Tensor::zeros(&[c]);
                    for row in g.data().chunks(c) {
                        for (d, &e) in db.data_mut().iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y);
                    self.acc(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y);
                    self.acc(grads, *b, d);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::MulConst(x, mask) => self.acc(grads, *x, zip_map(g, mask, |a, b| a * b)),
            Op::Relu(x) => {
                let d = zip_map(g, out, |gv, o| if o > T::zero() { gv } else { T::zero() });
                self.acc(grads, *x, d);
            }
            Op::Exp(x) => self.acc(grads, *x, zip_map(g, out, |a, b| a * b)),
            Op::Log(x) => self.acc(grads, *x, zip_map(g, self.value(*x), |a, b| a / b)),
            Op::XLogX(x) => {
                let d = zip_map(g, self.value(*x), |gv, v| {
                    gv * (v.max(T::tiny()).ln() + T::one())
                });
                self.acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let gv = g.data()[0] / T::of(v.len() as f64);
                self.acc(grads, *x, Tensor::filled(v.shape(), gv));
            }
            Op::SumRows(x) => {
                let (r, c) = self.value(*x).dims2();
                let mut d = Tensor::zeros(&[r, c]);
                for (i, row) in d.data_mut().chunks_mut(c.max(1)).take(r).enumerate() {
                    row.fill(g.data()[i]);
                }
                self.acc(grads, *x, d);
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).dims2();
                let mut d = Tensor::zeros(&[r, c]);
                for row in d.data_mut().chunks_mut(c.max(1)).take(r) {
                    row.copy_from_slice(g.data());
                }
                self.acc(grads, *x, d);
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()),
            Op::SoftmaxRows(x) => {
                let (r, c) = out.dims2();
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let s = out.row(i);
                    let gr = g.row(i);
                    let dot: T = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d.data_mut()[i * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::NormalizeRows { input, denom } => {
                let (r, c) = out.dims2();
                let eps = T::of(NORM_EPS);
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let den = denom[i];
                    let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                    if den > eps {
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dst[j] = (gr[j] - y[j] * dot) / den;
                        }
                    } else {
                        for j in 0..c {
                            dst[j] = gr[j] / eps;
                        }
                    }
                }
                self.acc(grads, *input, d);
            }
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                self.acc(grads, *x, g.map(|v| v / sv));
                if self.requires_grad(*s) {
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.acc(grads, *s, Tensor::scalar(-dot / (sv * sv)));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.rows();
                let patch = geom.patch();
                if self.requires_grad(*weight) {
                    let mut dw = Tensor::zeros(&[patch, geom.out_c]);
                    gemm(true, false, patch, rows, geom.out_c, cols, g.data(), T::zero(), dw.data_mut());
                    self.acc(grads, *weight, dw);
                }
                if self.requires_grad(*bias) {
                    let mut db = Tensor::zeros(&[geom.out_c]);
                    for row in g.data().chunks(geom.out_c) {
                        for (d, &e) in db.data_mut().iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    self.acc(grads, *bias, db);
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(
                        false,
                        true,
                        rows,
                        geom.out_c,
                        patch,
                        g.data(),
                        self.value(*weight).data(),
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, geom);
                    let shape = self.value(*input).shape().to_vec();
                    self.acc(grads, *input, Tensor::new(shape, dx).expect("conv input grad"));
                }
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut d = Tensor::zeros(&s);
                let dd = d.data_mut();
                for b in 0..n {
                    for i in 0..oh {
                        for j in 0..ow {
                            let o = ((b * oh + i) * ow + j) * c;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let p = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                                for ch in 0..c {
                                    dd[p + ch] += g.data()[o + ch] * quarter;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = T::one() / T::of(hw as f64);
                let mut d = Tensor::zeros(&s);
                let dd = d.data_mut();
                for b in 0..n {
                    for p in 0..hw {
                        let base = (b * hw + p) * c;
                        for ch in 0..c {
                            dd[base + ch] = g.data()[b * c + ch] * inv;
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = out.dims2();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = Tensor::zeros(&[c]);
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            let e = g.data()[i * c + j];
                            dg.data_mut()[j] += e * xhat[i * c + j];
                            db.data_mut()[j] += e;
                        }
                    }
                    self.acc(grads, *gain, dg);
                    self.acc(grads, *bias, db);
                }
                if self.requires_grad(*input) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut d = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[i * c + j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            d.data_mut()[i * c + j] =
                                inv_std[i] * (dh - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                    self.acc(grads, *input, d);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshaped(&shape).expect("reshape grad"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    let len = v.len();
                    if self.requires_grad(p) {
                        let d = Tensor::new(v.shape().to_vec(), g.data()[offset..offset + len].to_vec())
                            .expect("concat grad");
                        self.acc(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let v = self.value(*input);
                let inner: usize = v.shape()[1..].iter().product();
                let mut d = Tensor::zeros(v.shape());
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.acc(grads, *input, d);
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same-shape elementwise op")
}

fn im2col<T: Real>(x: &[T], geom: &ConvGeometry) -> Vec<T> {
    let patch = geom.patch();
    let mut cols = vec![T::zero(); geom.rows() * patch];
    let c = geom.in_c;
    for b in 0..geom.batch {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let row = (b * geom.out_h + oh) * geom.out_w + ow;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ki in 0..geom.kernel {
                    let ih = (oh * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= geom.in_h as isize {
                        continue;
                    }
                    for kj in 0..geom.kernel {
                        let iw = (ow * geom.stride + kj) as isize - geom.pad as isize;
                        if iw < 0 || iw >= geom.in_w as isize {
                            continue;
                        }
                        let src = ((b * geom.in_h + ih as usize) * geom.in_w + iw as usize) * c;
                        let off = (ki * geom.kernel + kj) * c;
                        dst[off..off + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], geom: &ConvGeometry) -> Vec<T> {
    let patch = geom.patch();
    let c = geom.in_c;
    let mut x = vec![T::zero(); geom.batch * geom.in_h * geom.in_w * c];
    for b in 0..geom.batch {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let row = (b * geom.out_h + oh) * geom.out_w + ow;
                let src = &cols[row * patch..(row + 1) * patch];
                for ki in 0..geom.kernel {
                    let ih = (oh * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= geom.in_h as isize {
                        continue;
                    }
                    for kj in 0..geom.kernel {
                        let iw = (ow * geom.stride + kj) as isize - geom.pad as isize;
                        if iw < 0 || iw >= geom.in_w as isize {
                            continue;
                        }
                        let dst = ((b * geom.in_h + ih as usize) * geom.in_w + iw as usize) * c;
                        let off = (ki * geom.kernel + kj) * c;
                        for ch in 0..c {
                            x[dst + ch] += src[off + ch];
                        }
                    }
                }
            }
        }
    }
    x
}
