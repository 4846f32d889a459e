//! Wengert-list reverse-mode automatic differentiation.
//!
//! Operations are recorded in execution order, which is a topological order by
//! construction: every input of an op was produced before the op itself.
//! [`Tape::backward`] walks the list once, in reverse, accumulating gradients
//! additively into every tracked input, so a tensor feeding several consumers
//! receives the sum of all branch gradients.
//!
//! An [`Tape::inference`] tape runs the same forward code without recording.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvDims,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn next_tape_id() -> u64 {
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(1) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

enum Rule<S: Scalar> {
    Add,
    Sub,
    Mul,
    Scale(S),
    AddScalar,
    Silu,
    AddBias,
    MulRowVec,
    ScaleRows(Rc<[S]>),
    MatMul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    Reshape,
    ConcatRows { row_elems: usize, rows_per_part: Vec<usize> },
    SliceRows { start_elem: usize },
    GatherRows { indices: Rc<[usize]>, row_elems: usize },
    Softmax { axis_len: usize, inner: usize },
    LayerNorm { feat: usize, xhat: Vec<S>, inv_std: Vec<S> },
    Conv2d(ConvDims),
    ConvTranspose2d(ConvDims),
    Embedding { index: usize },
    SumAll,
    MeanAll,
}

struct TapeOp<S: Scalar> {
    inputs: Vec<Tensor<S>>,
    output: Tensor<S>,
    rule: Rule<S>,
}

pub struct Tape<S: Scalar> {
    id: u64,
    recording: bool,
    consumed: Cell<bool>,
    ops: RefCell<Vec<TapeOp<S>>>,
}

impl<S: Scalar> Tape<S> {
    /// A tape that records backward rules for later [`Tape::backward`].
    pub fn recording() -> Self {
        Tape {
            id: next_tape_id(),
            recording: true,
            consumed: Cell::new(false),
            ops: RefCell::new(Vec::new()),
        }
    }

    /// A tape that executes forward math only.
    pub fn inference() -> Self {
        Tape {
            id: next_tape_id(),
            recording: false,
            consumed: Cell::new(false),
            ops: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    fn emit(
        &self,
        op: &'static str,
        inputs: Vec<Tensor<S>>,
        shape: Vec<usize>,
        data: Vec<S>,
        rule: Rule<S>,
    ) -> Result<Tensor<S>> {
        if !data.iter().all(|v| v.is_finite_scalar()) {
            return Err(Error::NonFinite { op });
        }
        let out = Tensor::new_raw(shape, data, false);
        if self.recording && inputs.iter().any(|t| t.is_tracked()) {
            out.mark_tape_output(self.id);
            self.ops.borrow_mut().push(TapeOp {
                inputs,
                output: out.clone(),
                rule,
            });
        }
        Ok(out)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: impl Fn(S, S) -> S,
        rule: Rule<S>,
    ) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.emit(op, vec![a.clone(), b.clone()], a.shape().to_vec(), data, rule)
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Rule::Add)
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Rule::Sub)
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Rule::Mul)
    }

    pub fn scale(&self, a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data = a.data().iter().map(|&x| x * c).collect();
        self.emit("scale", vec![a.clone()], a.shape().to_vec(), data, Rule::Scale(c))
    }

    pub fn add_scalar(&self, a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let data = a.data().iter().map(|&x| x + c).collect();
        self.emit("add_scalar", vec![a.clone()], a.shape().to_vec(), data, Rule::AddScalar)
    }

    pub fn silu(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
        self.emit("silu", vec![a.clone()], a.shape().to_vec(), data, Rule::Silu)
    }

    // ── Row-structured ops on 2D tensors ────────────────────────────────

    fn expect_2d(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
        match *t.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                shape: t.shape().to_vec(),
                msg: "expected a rank-2 tensor".into(),
            }),
        }
    }

    /// `x[m,n] + b[n]`, the one sanctioned row broadcast.
    pub fn add_bias(&self, x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = Self::expect_2d("add_bias", x)?;
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let xd = x.data();
        let bd = b.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(xd[i * n + j] + bd[j]);
            }
        }
        drop(xd);
        drop(bd);
        self.emit("add_bias", vec![x.clone(), b.clone()], vec![m, n], data, Rule::AddBias)
    }

    /// `x[m,n] * v[n]` per row.
    pub fn mul_rowvec(&self, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = Self::expect_2d("mul_rowvec", x)?;
        if v.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "mul_rowvec",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let xd = x.data();
        let vd = v.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(xd[i * n + j] * vd[j]);
            }
        }
        drop(xd);
        drop(vd);
        self.emit("mul_rowvec", vec![x.clone(), v.clone()], vec![m, n], data, Rule::MulRowVec)
    }

    /// Scales row `i` by the constant `factors[i]` (no gradient to factors).
    pub fn scale_rows(&self, x: &Tensor<S>, factors: &[S]) -> Result<Tensor<S>> {
        let (m, n) = Self::expect_2d("scale_rows", x)?;
        if factors.len() != m {
            return Err(Error::InvalidShape {
                op: "scale_rows",
                shape: x.shape().to_vec(),
                msg: format!("{} factors for {m} rows", factors.len()),
            });
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(xd[i * n + j] * factors[i]);
            }
        }
        drop(xd);
        let rc: Rc<[S]> = factors.into();
        self.emit("scale_rows", vec![x.clone()], vec![m, n], data, Rule::ScaleRows(rc))
    }

    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = Self::expect_2d("matmul", a)?;
        let (k2, n) = Self::expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = matmul_nn(&a.data(), &b.data(), m, k, n);
        self.emit("matmul", vec![a.clone(), b.clone()], vec![m, n], data, Rule::MatMul { m, k, n })
    }

    pub fn transpose(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = Self::expect_2d("transpose", a)?;
        let ad = a.data();
        let mut data = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        drop(ad);
        self.emit("transpose", vec![a.clone()], vec![n, m], data, Rule::Transpose { rows: m, cols: n })
    }

    pub fn reshape(&self, a: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                msg: format!("element count must stay {}", a.numel()),
            });
        }
        let data = a.to_vec();
        self.emit("reshape", vec![a.clone()], shape, data, Rule::Reshape)
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat_rows(&self, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "need at least one part"))?;
        if first.shape().is_empty() {
            return Err(Error::InvalidShape {
                op: "concat_rows",
                shape: vec![],
                msg: "rank must be >= 1".into(),
            });
        }
        let trailing = first.shape()[1..].to_vec();
        let row_elems: usize = trailing.iter().product();
        let mut rows = 0usize;
        let mut rows_per_part = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            if p.shape()[1..] != trailing[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.shape()[0];
            rows_per_part.push(p.shape()[0]);
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        self.emit(
            "concat_rows",
            parts.to_vec(),
            shape,
            data,
            Rule::ConcatRows { row_elems, rows_per_part },
        )
    }

    /// Contiguous row range `[start, start+len)` of the leading axis.
    pub fn slice_rows(&self, a: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
        if a.shape().is_empty() || start + len > a.shape()[0] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: a.shape().to_vec(),
                msg: format!("rows {start}..{}", start + len),
            });
        }
        let row_elems: usize = a.shape()[1..].iter().product();
        let data = a.data()[start * row_elems..(start + len) * row_elems].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&a.shape()[1..]);
        self.emit(
            "slice_rows",
            vec![a.clone()],
            shape,
            data,
            Rule::SliceRows { start_elem: start * row_elems },
        )
    }

    /// Arbitrary row permutation/selection; backward scatter-adds.
    pub fn gather_rows(&self, a: &Tensor<S>, indices: &Rc<[usize]>) -> Result<Tensor<S>> {
        if a.shape().is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: vec![],
                msg: "rank must be >= 1".into(),
            });
        }
        let rows = a.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("index {bad} >= {rows} rows")));
        }
        let row_elems: usize = a.shape()[1..].iter().product();
        let ad = a.data();
        let mut data = Vec::with_capacity(indices.len() * row_elems);
        for &i in indices.iter() {
            data.extend_from_slice(&ad[i * row_elems..(i + 1) * row_elems]);
        }
        drop(ad);
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&a.shape()[1..]);
        self.emit(
            "gather_rows",
            vec![a.clone()],
            shape,
            data,
            Rule::GatherRows { indices: Rc::clone(indices), row_elems },
        )
    }

    // ── Normalization and reduction ─────────────────────────────────────

    /// Numerically stable softmax along `axis`; lanes sum to one.
    pub fn softmax(&self, a: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape,
                msg: format!("axis {axis} out of range"),
            });
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let ad = a.data();
        let mut data = vec![S::ZERO; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * axis_len + j) * inner + i;
                let mut max = ad[idx(0)];
                for j in 1..axis_len {
                    max = max.maximum(ad[idx(j)]);
                }
                let mut denom = 0.0f64;
                for j in 0..axis_len {
                    denom += (ad[idx(j)] - max).to_f64().exp();
                }
                for j in 0..axis_len {
                    data[idx(j)] = S::from_f64((ad[idx(j)] - max).to_f64().exp() / denom);
                }
            }
        }
        drop(ad);
        self.emit("softmax", vec![a.clone()], shape, data, Rule::Softmax { axis_len, inner })
    }

    /// Layer normalization over the trailing (channel) axis of a 2D tensor,
    /// with affine `gain`/`bias`. Variance uses `LAYER_NORM_EPS` so constant
    /// rows normalize to zero instead of dividing by zero.
    pub fn layer_norm(&self, x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = Self::expect_2d("layer_norm", x)?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let xd = x.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut data = Vec::with_capacity(m * n);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(S::from_f64(istd));
            for j in 0..n {
                let h = (row[j].to_f64() - mean) * istd;
                xhat.push(S::from_f64(h));
                data.push(S::from_f64(h * gd[j].to_f64() + bd[j].to_f64()));
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        self.emit(
            "layer_norm",
            vec![x.clone(), gain.clone(), bias.clone()],
            vec![m, n],
            data,
            Rule::LayerNorm { feat: n, xhat, inv_std },
        )
    }

    pub fn sum_all(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let s: f64 = a.data().iter().map(|v| v.to_f64()).sum();
        self.emit("sum_all", vec![a.clone()], vec![1], vec![S::from_f64(s)], Rule::SumAll)
    }

    pub fn mean_all(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let s: f64 = a.data().iter().map(|v| v.to_f64()).sum();
        let mean = s / a.numel() as f64;
        self.emit("mean_all", vec![a.clone()], vec![1], vec![S::from_f64(mean)], Rule::MeanAll)
    }

    // ── Convolution ─────────────────────────────────────────────────────

    /// `x[cin,h,w] ⊛ w[cout,cin,kh,kw] + b[cout]`.
    pub fn conv2d(&self, x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let (cin, hin, win) = expect_3d("conv2d", x)?;
        let wshape = w.shape();
        if wshape.len() != 4 || wshape[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wshape.to_vec(),
            });
        }
        let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: wshape.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let dims = ConvDims::conv(cin, hin, win, cout, kh, kw, stride, pad).ok_or_else(|| {
            Error::invalid("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {hin}x{win}"))
        })?;
        let data = conv2d_forward(&x.data(), &w.data(), &b.data(), &dims);
        self.emit(
            "conv2d",
            vec![x.clone(), w.clone(), b.clone()],
            vec![cout, dims.hout, dims.wout],
            data,
            Rule::Conv2d(dims),
        )
    }

    /// Transposed conv; `w[cin,cout,kh,kw]`, upsampling counterpart of conv2d.
    pub fn conv_transpose2d(&self, x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let (cin, hin, win) = expect_3d("conv_transpose2d", x)?;
        let wshape = w.shape();
        if wshape.len() != 4 || wshape[0] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: x.shape().to_vec(),
                rhs: wshape.to_vec(),
            });
        }
        let (cout, kh, kw) = (wshape[1], wshape[2], wshape[3]);
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: wshape.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let dims = ConvDims::conv_transpose(cin, hin, win, cout, kh, kw, stride, pad)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "invalid geometry"))?;
        let data = conv_transpose2d_forward(&x.data(), &w.data(), &b.data(), &dims);
        self.emit(
            "conv_transpose2d",
            vec![x.clone(), w.clone(), b.clone()],
            vec![cout, dims.hout, dims.wout],
            data,
            Rule::ConvTranspose2d(dims),
        )
    }

    /// Row lookup into an embedding table `[vocab, width]`.
    pub fn embedding(&self, table: &Tensor<S>, index: usize) -> Result<Tensor<S>> {
        let (vocab, width) = Self::expect_2d("embedding", table)?;
        if index >= vocab {
            return Err(Error::invalid("embedding", format!("index {index} >= vocab {vocab}")));
        }
        let data = table.data()[index * width..(index + 1) * width].to_vec();
        self.emit("embedding", vec![table.clone()], vec![width], data, Rule::Embedding { index })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Seeds `loss` with gradient one and propagates through the recorded ops
    /// in reverse. Each recorded op is visited exactly once.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        if loss.origin_tape() != Some(self.id) {
            return Err(Error::invalid("backward", "loss was not produced on this tape"));
        }
        if self.consumed.replace(true) {
            return Err(Error::invalid("backward", "tape already consumed by a previous backward"));
        }
        loss.accumulate_grad(&[S::ONE]);
        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            let Some(gout) = op.output.grad() else { continue };
            op.propagate(&gout);
        }
        Ok(())
    }
}

fn expect_3d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            msg: "expected a rank-3 tensor".into(),
        }),
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `a[m,k] · b[n,k]^T`.
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::ZERO;
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[j * k..(j + 1) * k];
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `a[k,m]^T · b[k,n]`.
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

impl<S: Scalar> TapeOp<S> {
    fn acc(&self, input_idx: usize, delta: &[S]) {
        let t = &self.inputs[input_idx];
        if t.is_tracked() {
            t.accumulate_grad(delta);
        }
    }

    fn propagate(&self, g: &[S]) {
        match &self.rule {
            Rule::Add => {
                self.acc(0, g);
                self.acc(1, g);
            }
            Rule::Sub => {
                self.acc(0, g);
                if self.inputs[1].is_tracked() {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    self.inputs[1].accumulate_grad(&neg);
                }
            }
            Rule::Mul => {
                if self.inputs[0].is_tracked() {
                    let b = self.inputs[1].data();
                    let da: Vec<S> = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect();
                    drop(b);
                    self.inputs[0].accumulate_grad(&da);
                }
                if self.inputs[1].is_tracked() {
                    let a = self.inputs[0].data();
                    let db: Vec<S> = g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect();
                    drop(a);
                    self.inputs[1].accumulate_grad(&db);
                }
            }
            Rule::Scale(c) => {
                if self.inputs[0].is_tracked() {
                    let da: Vec<S> = g.iter().map(|&gv| gv * *c).collect();
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::AddScalar | Rule::Reshape => self.acc(0, g),
            Rule::Silu => {
                if self.inputs[0].is_tracked() {
                    let x = self.inputs[0].data();
                    let da: Vec<S> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s * (S::ONE + xv * (S::ONE - s)))
                        })
                        .collect();
                    drop(x);
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::AddBias => {
                self.acc(0, g);
                if self.inputs[1].is_tracked() {
                    let n = self.inputs[1].numel();
                    let mut db = vec![S::ZERO; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.inputs[1].accumulate_grad(&db);
                }
            }
            Rule::MulRowVec => {
                let n = self.inputs[1].numel();
                if self.inputs[0].is_tracked() {
                    let v = self.inputs[1].data();
                    let da: Vec<S> = g.iter().enumerate().map(|(i, &gv)| gv * v[i % n]).collect();
                    drop(v);
                    self.inputs[0].accumulate_grad(&da);
                }
                if self.inputs[1].is_tracked() {
                    let x = self.inputs[0].data();
                    let mut dv = vec![S::ZERO; n];
                    for (i, &gv) in g.iter().enumerate() {
                        dv[i % n] += gv * x[i];
                    }
                    drop(x);
                    self.inputs[1].accumulate_grad(&dv);
                }
            }
            Rule::ScaleRows(factors) => {
                if self.inputs[0].is_tracked() {
                    let n = g.len() / factors.len();
                    let da: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * factors[i / n])
                        .collect();
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::MatMul { m, k, n } => {
                if self.inputs[0].is_tracked() {
                    let b = self.inputs[1].data();
                    let da = matmul_nt(g, &b, *m, *n, *k);
                    drop(b);
                    self.inputs[0].accumulate_grad(&da);
                }
                if self.inputs[1].is_tracked() {
                    let a = self.inputs[0].data();
                    let db = matmul_tn(&a, g, *k, *m, *n);
                    drop(a);
                    self.inputs[1].accumulate_grad(&db);
                }
            }
            Rule::Transpose { rows, cols } => {
                if self.inputs[0].is_tracked() {
                    // g has shape [cols, rows]; transpose back.
                    let mut da = vec![S::ZERO; rows * cols];
                    for j in 0..*cols {
                        for i in 0..*rows {
                            da[i * cols + j] = g[j * rows + i];
                        }
                    }
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::ConcatRows { row_elems, rows_per_part } => {
                let mut offset = 0usize;
                for (part, rows) in self.inputs.iter().zip(rows_per_part) {
                    let len = rows * row_elems;
                    if part.is_tracked() {
                        part.accumulate_grad(&g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Rule::SliceRows { start_elem } => {
                if self.inputs[0].is_tracked() {
                    let mut da = vec![S::ZERO; self.inputs[0].numel()];
                    da[*start_elem..*start_elem + g.len()].copy_from_slice(g);
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::GatherRows { indices, row_elems } => {
                if self.inputs[0].is_tracked() {
                    let mut da = vec![S::ZERO; self.inputs[0].numel()];
                    for (pos, &row) in indices.iter().enumerate() {
                        let src = &g[pos * row_elems..(pos + 1) * row_elems];
                        let dst = &mut da[row * row_elems..(row + 1) * row_elems];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::Softmax { axis_len, inner } => {
                if self.inputs[0].is_tracked() {
                    let y = self.output.data();
                    let lanes = y.len() / (axis_len * inner);
                    let mut da = vec![S::ZERO; y.len()];
                    for o in 0..lanes {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * axis_len + j) * inner + i;
                            let mut dot = S::ZERO;
                            for j in 0..*axis_len {
                                dot += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..*axis_len {
                                da[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    drop(y);
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::LayerNorm { feat, xhat, inv_std } => {
                let n = *feat;
                let m = inv_std.len();
                if self.inputs[0].is_tracked() {
                    let gain = self.inputs[1].data();
                    let mut da = vec![S::ZERO; m * n];
                    let inv_n = S::from_f64(1.0 / n as f64);
                    for i in 0..m {
                        let mut sum_gh = S::ZERO;
                        let mut sum_gh_xhat = S::ZERO;
                        for j in 0..n {
                            let gh = g[i * n + j] * gain[j];
                            sum_gh += gh;
                            sum_gh_xhat += gh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let gh = g[i * n + j] * gain[j];
                            da[i * n + j] = inv_std[i]
                                * (gh - inv_n * sum_gh - xhat[i * n + j] * inv_n * sum_gh_xhat);
                        }
                    }
                    drop(gain);
                    self.inputs[0].accumulate_grad(&da);
                }
                if self.inputs[1].is_tracked() {
                    let mut dg = vec![S::ZERO; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.inputs[1].accumulate_grad(&dg);
                }
                if self.inputs[2].is_tracked() {
                    let mut db = vec![S::ZERO; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.inputs[2].accumulate_grad(&db);
                }
            }
            Rule::Conv2d(dims) => {
                let x = self.inputs[0].data();
                let w = self.inputs[1].data();
                let (gx, gw, gb) = conv2d_backward(&x, &w, g, dims);
                drop(x);
                drop(w);
                self.acc(0, &gx);
                self.acc(1, &gw);
                self.acc(2, &gb);
            }
            Rule::ConvTranspose2d(dims) => {
                let x = self.inputs[0].data();
                let w = self.inputs[1].data();
                let (gx, gw, gb) = conv_transpose2d_backward(&x, &w, g, dims);
                drop(x);
                drop(w);
                self.acc(0, &gx);
                self.acc(1, &gw);
                self.acc(2, &gb);
            }
            Rule::Embedding { index } => {
                if self.inputs[0].is_tracked() {
                    let width = g.len();
                    let mut dt = vec![S::ZERO; self.inputs[0].numel()];
                    dt[index * width..(index + 1) * width].copy_from_slice(g);
                    self.inputs[0].accumulate_grad(&dt);
                }
            }
            Rule::SumAll => {
                if self.inputs[0].is_tracked() {
                    let da = vec![g[0]; self.inputs[0].numel()];
                    self.inputs[0].accumulate_grad(&da);
                }
            }
            Rule::MeanAll => {
                if self.inputs[0].is_tracked() {
                    let n = self.inputs[0].numel();
                    let da = vec![g[0] * S::from_f64(1.0 / n as f64); n];
                    self.inputs[0].accumulate_grad(&da);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::inference();
        let out = tape
            .add(&t(vec![2], vec![1.0, 2.0]), &t(vec![2], vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(out.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn scale_by_one_is_identity() {
        let tape = Tape::inference();
        let x = t(vec![3], vec![0.25, -1.5, 7.0]);
        let out = tape.scale(&x, 1.0).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::inference();
        let err = tape
            .add(&t(vec![2], vec![1.0, 2.0]), &t(vec![3], vec![1.0, 2.0, 3.0]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn mul_gradient_is_other_factor() {
        let tape = Tape::recording();
        let a = t(vec![1], vec![2.0]).requires_grad();
        let b = t(vec![1], vec![3.0]).requires_grad();
        let y = tape.mul(&a, &b).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::inference();
        let x = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(tape.matmul(&eye, &x).unwrap().to_vec(), x.to_vec());
        let ones = t(vec![2, 1], vec![1.0, 1.0]);
        assert_eq!(tape.matmul(&x, &ones).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let tape = Tape::<f64>::inference();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::inference();
        let y = tape.softmax(&t(vec![3], vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = tape.softmax(&t(vec![2], vec![1000.0, 0.0]), 0).unwrap();
        let v = y.to_vec();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(y.all_finite());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let tape = Tape::inference();
        let x = t(vec![1, 4], vec![5.0; 4]);
        let gain = Tensor::<f64>::ones(vec![4]);
        let bias = Tensor::<f64>::zeros(vec![4]);
        let y = tape.layer_norm(&x, &gain, &bias).unwrap();
        for v in y.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let tape = Tape::inference();
        // Variance well above LAYER_NORM_EPS so the epsilon bias is negligible.
        let x = t(vec![1, 8], vec![12.0, -7.0, 3.0, 40.0, -22.0, 9.0, -1.0, 18.0]);
        let gain = Tensor::<f64>::ones(vec![8]);
        let bias = Tensor::<f64>::zeros(vec![8]);
        let y = tape.layer_norm(&x, &gain, &bias).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 8.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }

    #[test]
    fn backward_sum_gives_ones_and_unused_param_stays_zero() {
        let tape = Tape::recording();
        let x = t(vec![3], vec![1.0, 2.0, 3.0]).requires_grad();
        let unused = t(vec![2], vec![1.0, 1.0]).requires_grad();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(unused.grad().is_none());
        assert_eq!(unused.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::recording();
        let x = t(vec![2], vec![1.0, 2.0]).requires_grad();
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_foreign_loss() {
        let tape = Tape::<f64>::recording();
        let other = Tape::<f64>::recording();
        let x = t(vec![1], vec![2.0]).requires_grad();
        let loss = other.sum_all(&x).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn shared_input_accumulates_both_branches() {
        let tape = Tape::recording();
        let x = t(vec![2], vec![1.0, 2.0]).requires_grad();
        let a = tape.scale(&x, 2.0).unwrap();
        let b = tape.scale(&x, 3.0).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = t(vec![2], vec![1.0, 2.0]).requires_grad();
        let _ = tape.scale(&x, 2.0).unwrap();
        assert_eq!(tape.num_ops(), 0);
    }

    #[test]
    fn gather_rows_backward_scatters() {
        let tape = Tape::recording();
        let x = t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requires_grad();
        let idx: Rc<[usize]> = vec![2, 0, 2].into();
        let y = tape.gather_rows(&x, &idx).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
