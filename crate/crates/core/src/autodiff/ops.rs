//! Forward and vector-Jacobian rules for every op the tape records.

use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[n, k] × [k, m]`.
    MatMul,
    /// `[n, k] × [m, k]ᵀ`, a product against a row-major weight.
    MatMulNt,
    /// Rank-2 transpose.
    Transpose,
    /// Elementwise with rank ≤ 2 broadcasting (size-1 dims stretch).
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Exp,
    Log,
    Sqrt,
    Square,
    Sum,
    Mean,
    /// Sum along one axis, keeping it with size 1.
    SumAxis {
        axis: usize,
    },
    /// `u vᵀ` of two vectors.
    Outer,
    Elu {
        alpha: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Softmax {
        axis: usize,
    },
    /// Inputs: `x [c_in, len]`, `w [c_in, c_out, kernel]`.
    ConvTranspose1d {
        stride: usize,
        padding: usize,
    },
    /// Adjoint of [`OpKind::ConvTranspose1d`]. Inputs: `y [c_out, len]`, `w [c_in, c_out, kernel]`.
    Conv1d {
        stride: usize,
        padding: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::Outer => "outer",
            OpKind::Elu { .. } => "elu",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Softmax { .. } => "softmax",
            OpKind::ConvTranspose1d { .. } => "conv_transpose1d",
            OpKind::Conv1d { .. } => "conv1d",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::MatMulNt
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Outer
            | OpKind::ConvTranspose1d { .. }
            | OpKind::Conv1d { .. } => 2,
            OpKind::Concat { .. } => usize::MAX,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses attribute-free op names; attributed ops take their defaults
/// (`scale`=1, `shift`=0, axis 0, ELU α=1, LeakyReLU slope 0.01, stride 2/padding 1).
impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "matmul_nt" => OpKind::MatMulNt,
            "transpose" => OpKind::Transpose,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale(1.0),
            "shift" => OpKind::Shift(0.0),
            "concat" => OpKind::Concat { axis: 0 },
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "sqrt" => OpKind::Sqrt,
            "square" => OpKind::Square,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "sum_axis" => OpKind::SumAxis { axis: 0 },
            "outer" => OpKind::Outer,
            "elu" => OpKind::Elu { alpha: 1.0 },
            "leaky_relu" => OpKind::LeakyRelu { slope: 0.01 },
            "softmax" => OpKind::Softmax { axis: 0 },
            "conv_transpose1d" => OpKind::ConvTranspose1d { stride: 2, padding: 1 },
            "conv1d" => OpKind::Conv1d { stride: 2, padding: 1 },
            other => return Err(AutodiffError::UnknownOp(other.to_string())),
        })
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

pub(crate) fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<((usize, usize), (usize, usize), Vec<usize>), AutodiffError> {
    if a == b {
        let d = Tensor::as_matrix_dims(a).unwrap_or((1, a.iter().product()));
        return Ok((d, d, a.to_vec()));
    }
    let (Some(da), Some(db)) = (Tensor::as_matrix_dims(a), Tensor::as_matrix_dims(b)) else {
        return Err(mismatch(op, format!("{a:?} vs {b:?}")));
    };
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let (Some(r), Some(c)) = (dim(da.0, db.0), dim(da.1, db.1)) else {
        return Err(mismatch(op, format!("{a:?} vs {b:?}")));
    };
    let shape = if da == (r, c) {
        a.to_vec()
    } else if db == (r, c) {
        b.to_vec()
    } else {
        vec![r, c]
    };
    Ok((da, db, shape))
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    let ((ar, ac), (br, bc), shape) = broadcast_dims(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape, data);
    }
    let (r, c) = (ar.max(br), ac.max(bc));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let x = ad[ia * ac + if ac == 1 { 0 } else { j }];
            let y = bd[ib * bc + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::new(shape, out)
}

/// Sums a broadcast gradient `[r, c]` back down to `(tr, tc)`.
fn unbroadcast(g: &[f64], r: usize, c: usize, tr: usize, tc: usize) -> Vec<f64> {
    if tr == r && tc == c {
        return g.to_vec();
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g[i * c + j];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [n, k] · b [m, k]ᵀ`.
fn matmul_nt_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for arow in a.chunks_exact(k).take(n) {
        for brow in b.chunks_exact(k).take(m) {
            out.push(dot(arow, brow));
        }
    }
    out
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for j in 0..4 {
            acc[j] += a[j] * b[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_dims(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    transposed: bool,
) -> Result<(usize, usize, usize), AutodiffError> {
    let (&[c_a, len], &[c_in, c_out, kernel]) = (x.shape(), w.shape()) else {
        return Err(mismatch(op, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
    };
    let expected = if transposed { c_in } else { c_out };
    if c_a != expected || kernel == 0 {
        return Err(mismatch(op, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
    }
    Ok((len, c_in, c_out))
}

/// `y[o, l·s + k − p] += x[i, l] · w[i, o, k]`.
fn conv_transpose_raw(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    len: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; c_out * out_len];
    for i in 0..c_in {
        for l in 0..len {
            let xv = x[i * len + l];
            for o in 0..c_out {
                for k in 0..kernel {
                    let t = (l * stride + k) as isize - padding as isize;
                    if t >= 0 && (t as usize) < out_len {
                        y[o * out_len + t as usize] += xv * w[(i * c_out + o) * kernel + k];
                    }
                }
            }
        }
    }
    y
}

/// `x[i, l] = Σ y[o, l·s + k − p] · w[i, o, k]`.
fn conv_raw(
    y: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    len: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; c_in * out_len];
    for i in 0..c_in {
        for l in 0..out_len {
            let mut acc = 0.0;
            for o in 0..c_out {
                for k in 0..kernel {
                    let t = (l * stride + k) as isize - padding as isize;
                    if t >= 0 && (t as usize) < len {
                        acc += y[o * len + t as usize] * w[(i * c_out + o) * kernel + k];
                    }
                }
            }
            x[i * out_len + l] = acc;
        }
    }
    x
}

fn conv_transpose_len(len: usize, stride: usize, padding: usize, kernel: usize) -> Option<usize> {
    ((len.checked_sub(1)? * stride + kernel) as isize - 2 * padding as isize).try_into().ok().filter(|&n: &usize| n > 0)
}

fn conv_len(len: usize, stride: usize, padding: usize, kernel: usize) -> Option<usize> {
    let padded = (len + 2 * padding).checked_sub(kernel)?;
    Some(padded / stride + 1)
}

pub(crate) fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let name = op.name();
    let arity = op.arity();
    if (arity == usize::MAX && inputs.is_empty()) || (arity != usize::MAX && inputs.len() != arity) {
        return Err(mismatch(name, format!("expected {arity} inputs, got {}", inputs.len())));
    }
    let unary = |f: &dyn Fn(f64) -> f64| -> Result<Tensor, AutodiffError> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    };
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                (&[n, k], &[k2, m]) if k == k2 => Tensor::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m)),
                (sa, sb) => Err(mismatch(name, format!("{sa:?} × {sb:?}"))),
            }
        }
        OpKind::MatMulNt => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                (&[n, k], &[m, k2]) if k == k2 => Tensor::new(vec![n, m], matmul_nt_raw(a.data(), b.data(), n, k, m)),
                (sa, sb) => Err(mismatch(name, format!("{sa:?} × {sb:?}ᵀ"))),
            }
        }
        OpKind::Transpose => {
            let x = inputs[0];
            let &[r, c] = x.shape() else {
                return Err(mismatch(name, format!("{:?}", x.shape())));
            };
            let d = x.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)
        }
        OpKind::Add => broadcast_binary(name, inputs[0], inputs[1], |x, y| x + y),
        OpKind::Sub => broadcast_binary(name, inputs[0], inputs[1], |x, y| x - y),
        OpKind::Mul => broadcast_binary(name, inputs[0], inputs[1], |x, y| x * y),
        OpKind::Scale(c) => unary(&|v| v * c),
        OpKind::Shift(c) => unary(&|v| v + c),
        OpKind::Exp => unary(&f64::exp),
        OpKind::Log => unary(&f64::ln),
        OpKind::Sqrt => unary(&f64::sqrt),
        OpKind::Square => unary(&|v| v * v),
        OpKind::Elu { alpha } => unary(&|v| elu(v, *alpha)),
        OpKind::LeakyRelu { slope } => unary(&|v| leaky_relu(v, *slope)),
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => {
            let x = inputs[0];
            if x.is_empty() {
                return Err(mismatch(name, "empty input".into()));
            }
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        OpKind::SumAxis { axis } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(AutodiffError::InvalidAxis { op: name, axis: *axis, rank: x.rank() });
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            let d = x.data();
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * n + j) * inner + i];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = 1;
            Tensor::new(shape, out)
        }
        OpKind::Reshape { shape } => inputs[0].clone().reshaped(shape.clone()),
        OpKind::Concat { axis } => {
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(AutodiffError::InvalidAxis { op: name, axis: *axis, rank: first.len() });
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(mismatch(name, format!("{first:?} vs {s:?} on axis {axis}")));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = axis_split(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let n = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)
        }
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(AutodiffError::InvalidAxis { op: name, axis: *axis, rank: x.rank() });
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            if start >= end || *end > n {
                return Err(mismatch(name, format!("range {start}..{end} of {:?}", x.shape())));
            }
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, out)
        }
        OpKind::Outer => {
            let (u, v) = (inputs[0], inputs[1]);
            if u.rank() > 2 || v.rank() > 2 {
                return Err(mismatch(name, format!("{:?} ⊗ {:?}", u.shape(), v.shape())));
            }
            let (n, m) = (u.len(), v.len());
            let mut out = Vec::with_capacity(n * m);
            for &a in u.data() {
                out.extend(v.data().iter().map(|&b| a * b));
            }
            Tensor::new(vec![n, m], out)
        }
        OpKind::Softmax { axis } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(AutodiffError::InvalidAxis { op: name, axis: *axis, rank: x.rank() });
            }
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let d = x.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = if d[idx(j)] == f64::NEG_INFINITY { 0.0 } else { (d[idx(j)] - max).exp() };
                        out[idx(j)] = e;
                        z += e;
                    }
                    for j in 0..n {
                        out[idx(j)] /= z;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        OpKind::ConvTranspose1d { stride, padding } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (len, c_in, c_out) = conv_dims(name, x, w, true)?;
            let kernel = w.shape()[2];
            let out_len = conv_transpose_len(len, *stride, *padding, kernel)
                .filter(|_| *stride > 0)
                .ok_or_else(|| mismatch(name, format!("stride {stride}, padding {padding}, kernel {kernel}")))?;
            let y = conv_transpose_raw(x.data(), w.data(), c_in, c_out, kernel, len, out_len, *stride, *padding);
            Tensor::new(vec![c_out, out_len], y)
        }
        OpKind::Conv1d { stride, padding } => {
            let (y, w) = (inputs[0], inputs[1]);
            let (len, c_in, c_out) = conv_dims(name, y, w, false)?;
            let kernel = w.shape()[2];
            let out_len = conv_len(len, *stride, *padding, kernel)
                .filter(|_| *stride > 0)
                .ok_or_else(|| mismatch(name, format!("stride {stride}, padding {padding}, kernel {kernel}")))?;
            let x = conv_raw(y.data(), w.data(), c_in, c_out, kernel, len, out_len, *stride, *padding);
            Tensor::new(vec![c_in, out_len], x)
        }
    }
}

/// Vector-Jacobian products. `wants[i]` marks inputs needing a gradient.
pub(crate) fn backward(
    op: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(|i| g[i] * f(i)).collect() };
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            if wants[0] {
                let mut ga = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bd[p * m..(p + 1) * m];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                grads[0] = Some(ga);
            }
            if wants[1] {
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                grads[1] = Some(gb);
            }
        }
        OpKind::MatMulNt => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            if wants[0] {
                grads[0] = Some(matmul_raw(g, b.data(), n, m, k));
            }
            if wants[1] {
                let mut gb = vec![0.0; m * k];
                for (grow, arow) in g.chunks_exact(m).zip(a.data().chunks_exact(k)) {
                    for (j, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for (o, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *o += gv * av;
                        }
                    }
                }
                grads[1] = Some(gb);
            }
        }
        OpKind::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ((ar, ac), (br, bc), _) = broadcast_dims(op.name(), a.shape(), b.shape()).expect("checked in forward");
            let (r, c) = (ar.max(br), ac.max(bc));
            let at = |t: &Tensor, tr: usize, tc: usize, i: usize, j: usize| {
                t.data()[if tr == 1 { 0 } else { i } * tc + if tc == 1 { 0 } else { j }]
            };
            let full = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
                let mut v = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        v.push(g[i * c + j] * f(i, j));
                    }
                }
                v
            };
            if wants[0] {
                let ga = match op {
                    OpKind::Mul => full(&|i, j| at(b, br, bc, i, j)),
                    _ => g.to_vec(),
                };
                grads[0] = Some(unbroadcast(&ga, r, c, ar, ac));
            }
            if wants[1] {
                let gb = match op {
                    OpKind::Mul => full(&|i, j| at(a, ar, ac, i, j)),
                    OpKind::Sub => g.iter().map(|v| -v).collect(),
                    _ => g.to_vec(),
                };
                grads[1] = Some(unbroadcast(&gb, r, c, br, bc));
            }
        }
        OpKind::Scale(c) => grads[0] = Some(g.iter().map(|v| v * c).collect()),
        OpKind::Shift(_) | OpKind::Reshape { .. } => grads[0] = Some(g.to_vec()),
        OpKind::Exp => grads[0] = Some(elementwise(&|i| out.data()[i])),
        OpKind::Log => grads[0] = Some(elementwise(&|i| 1.0 / inputs[0].data()[i])),
        OpKind::Sqrt => grads[0] = Some(elementwise(&|i| 0.5 / out.data()[i])),
        OpKind::Square => grads[0] = Some(elementwise(&|i| 2.0 * inputs[0].data()[i])),
        OpKind::Elu { alpha } => {
            let x = inputs[0].data();
            grads[0] = Some(elementwise(&|i| if x[i] > 0.0 { 1.0 } else { alpha * x[i].exp() }));
        }
        OpKind::LeakyRelu { slope } => {
            let x = inputs[0].data();
            grads[0] = Some(elementwise(&|i| if x[i] > 0.0 { 1.0 } else { *slope }));
        }
        OpKind::Sum => grads[0] = Some(vec![g[0]; inputs[0].len()]),
        OpKind::Mean => {
            let n = inputs[0].len();
            grads[0] = Some(vec![g[0] / n as f64; n]);
        }
        OpKind::SumAxis { axis } => {
            let (outer, n, inner) = axis_split(inputs[0].shape(), *axis);
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        gx[(o * n + j) * inner + i] = g[o * inner + i];
                    }
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::Concat { axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for (t, (x, want)) in inputs.iter().zip(wants).enumerate() {
                let n = x.shape()[*axis];
                if *want {
                    let mut gx = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + n * inner]);
                    }
                    grads[t] = Some(gx);
                }
                offset += n;
            }
        }
        OpKind::Slice { axis, start, end } => {
            let (outer, n, inner) = axis_split(inputs[0].shape(), *axis);
            let width = (end - start) * inner;
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            grads[0] = Some(gx);
        }
        OpKind::Outer => {
            let (u, v) = (inputs[0].data(), inputs[1].data());
            let m = v.len();
            if wants[0] {
                grads[0] =
                    Some((0..u.len()).map(|i| g[i * m..(i + 1) * m].iter().zip(v).map(|(a, b)| a * b).sum()).collect());
            }
            if wants[1] {
                let mut gv = vec![0.0; m];
                for (i, &ui) in u.iter().enumerate() {
                    for (o, &gi) in gv.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                        *o += ui * gi;
                    }
                }
                grads[1] = Some(gv);
            }
        }
        OpKind::Softmax { axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::ConvTranspose1d { stride, padding } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (c_in, len) = (x.shape()[0], x.shape()[1]);
            let (c_out, kernel) = (w.shape()[1], w.shape()[2]);
            let out_len = out.shape()[1];
            if wants[0] {
                grads[0] = Some(conv_raw(g, w.data(), c_in, c_out, kernel, out_len, len, *stride, *padding));
            }
            if wants[1] {
                let mut gw = vec![0.0; w.len()];
                let xd = x.data();
                for i in 0..c_in {
                    for l in 0..len {
                        let xv = xd[i * len + l];
                        for o in 0..c_out {
                            for k in 0..kernel {
                                let t = (l * stride + k) as isize - *padding as isize;
                                if t >= 0 && (t as usize) < out_len {
                                    gw[(i * c_out + o) * kernel + k] += xv * g[o * out_len + t as usize];
                                }
                            }
                        }
                    }
                }
                grads[1] = Some(gw);
            }
        }
        OpKind::Conv1d { stride, padding } => {
            let (y, w) = (inputs[0], inputs[1]);
            let (c_out, len) = (y.shape()[0], y.shape()[1]);
            let (c_in, kernel) = (w.shape()[0], w.shape()[2]);
            let out_len = out.shape()[1];
            if wants[0] {
                grads[0] = Some(conv_transpose_raw(g, w.data(), c_in, c_out, kernel, out_len, len, *stride, *padding));
            }
            if wants[1] {
                let mut gw = vec![0.0; w.len()];
                let yd = y.data();
                for i in 0..c_in {
                    for l in 0..out_len {
                        let gv = g[i * out_len + l];
                        for o in 0..c_out {
                            for k in 0..kernel {
                                let t = (l * stride + k) as isize - *padding as isize;
                                if t >= 0 && (t as usize) < len {
                                    gw[(i * c_out + o) * kernel + k] += gv * yd[o * len + t as usize];
                                }
                            }
                        }
                    }
                }
                grads[1] = Some(gw);
            }
        }
    }
    grads
}
