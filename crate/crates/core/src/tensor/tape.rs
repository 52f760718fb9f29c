use rand::Rng;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    /// Elementwise map with caller-supplied derivative values.
    Map(Var, Vec<T>),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Dropout(Var, Vec<T>),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Gather { x: Var, cols: Vec<usize> },
    MaskedSelect { x: Var, positions: Vec<usize> },
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    /// Scalar loss whose input gradient was computed during the forward pass.
    Precomputed { x: Var, grad: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse sweep is a simple backwards scan.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_kernel<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ── binary ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!("{} x {}", shape_str(sa), shape_str(sb)),
                ))
            }
        };
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_check(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [n] {
            return Err(Error::dim(
                op,
                format!(
                    "row operand {} does not match trailing dim of {}",
                    shape_str(self.shape(row)),
                    shape_str(self.shape(a))
                ),
            ));
        }
        Ok(n)
    }

    /// `a + row`, broadcasting `row` over every leading index of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_check("add_row", a, row)?;
        let r = self.data(row);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// `a ⊙ row`, broadcasting `row` over every leading index of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_check("mul_row", a, row)?;
        let r = self.data(row);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % n])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    // ── unary ops ────────────────────────────────────────────────────

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: out,
        };
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    /// Elementwise `f` with derivative `df`, both evaluated at the input.
    pub fn map(&mut self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Var {
        let deriv: Vec<T> = self.data(a).iter().map(|&x| df(x)).collect();
        self.unary(a, f, Op::Map(a, deriv))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for {}", shape_str(self.shape(a))),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (out[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[idx(j)] /= s;
                }
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { x: a, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|j| (out[idx(j)] - m).exp()).sum();
                let lse = m + s.ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LogSoftmax { x: a, outer, len, inner }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.row_check("layer_norm", x, gamma)?;
        self.row_check("layer_norm", x, beta)?;
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / n.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "embedding",
                format!("id {bad} outside table of {rows} rows"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{} vs {} on axis {axis}", shape_str(s), shape_str(&base)),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start > end || end > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} of {}", shape_str(&shape)),
            ));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let d = self.data(x);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = w;
        let t = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)` so evaluation
    /// needs no rescaling. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: out,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout(x, mask), rg)
    }

    // ── reductions and selection ─────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s / T::from_f64(n as f64)),
            Op::MeanAll(x),
            rg,
        ))
    }

    /// Sum along `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumAxis { x, outer, len, inner }, rg))
    }

    /// Picks `x[i, cols[i]]` from a matrix, giving a vector of length rows.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::dim(
                "gather",
                format!("{} column indices for a {r}x{c} matrix", cols.len()),
            ));
        }
        let d = self.data(x);
        let out: Vec<T> = cols.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let t = Tensor::new(vec![r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Flat vector of the elements of `x` where `mask` is true.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim(
                "masked_select",
                format!("mask of {} for {}", mask.len(), shape_str(self.shape(x))),
            ));
        }
        let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let d = self.data(x);
        let out: Vec<T> = positions.iter().map(|&i| d[i]).collect();
        let t = Tensor::new(vec![positions.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskedSelect { x, positions }, rg))
    }

    /// Sliding windows over the rows of `[T, C]`: row `t` of the result is
    /// the concatenation of input rows `t*stride - pad + 0..kernel`, with
    /// zeros outside the input. Output is `[ceil-style T_out, kernel*C]`.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t_in, c) = self.value(x).dims2()?;
        if kernel == 0 || stride == 0 || t_in + 2 * pad < kernel {
            return Err(Error::dim(
                "unfold",
                format!("kernel {kernel} stride {stride} on {t_in} rows"),
            ));
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let d = self.data(x);
        let mut out = vec![T::zero(); t_out * kernel * c];
        for t in 0..t_out {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    let s = src as usize;
                    out[(t * kernel + j) * c..(t * kernel + j + 1) * c]
                        .copy_from_slice(&d[s * c..(s + 1) * c]);
                }
            }
        }
        let t = Tensor::new(vec![t_out, kernel * c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Records a scalar `value` whose gradient with respect to `x` is already
    /// known. Used by losses with closed-form gradients such as CTC.
    pub fn precomputed_scalar(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::dim(
                "precomputed_scalar",
                format!("gradient of {} for {}", grad.len(), shape_str(self.shape(x))),
            ));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }, rg))
    }

    // ── reverse sweep ────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar. Gradients accumulate by summation
    /// where a value fans out to several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = lower[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if needs(*a) {
                    let bd = val(*b);
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bd[p * n..(p + 1) * n];
                                let mut s = T::zero();
                                for (&x, &y) in g_row.iter().zip(b_row) {
                                    s += x * y;
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                }
                if needs(*b) {
                    let ad = val(*a);
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *o += av * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                let n = nodes[row.0].value.numel();
                acc(*row, &mut |gr| {
                    for (i, &x) in g.iter().enumerate() {
                        gr[i % n] += x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (ad, rd) = (val(*a), val(*row));
                let n = rd.len();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * rd[i % n];
                    }
                });
                acc(*row, &mut |gr| {
                    for i in 0..g.len() {
                        gr[i % n] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x * *c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
            }
            Op::Relu(a) => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if ad[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / ad[i];
                    }
                });
            }
            Op::Map(a, deriv) | Op::Dropout(a, deriv) => {
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * deriv[i];
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let gs: T = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma);
                let n = gam.len();
                let rows = rstd.len();
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                });
                let nf = T::from_f64(n as f64);
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let gh = g[r * n + j] * gam[j];
                            s1 += gh;
                            s2 += gh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let gh = g[r * n + j] * gam[j];
                            gx[r * n + j] +=
                                rstd[r] / nf * (nf * gh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let w = nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            gt[id * w + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                gv[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_extents(nodes[x.0].value.shape(), *axis);
                let w = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * w * inner;
                        for k in 0..w * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::MeanAll(x) => {
                let n = T::from_f64(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Gather { x, cols } => {
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
            Op::MaskedSelect { x, positions } => {
                acc(*x, &mut |gx| {
                    for (k, &p) in positions.iter().enumerate() {
                        gx[p] += g[k];
                    }
                });
            }
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (t_in, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let t_out = node.value.shape()[0];
                acc(*x, &mut |gx| {
                    for t in 0..t_out {
                        for j in 0..*kernel {
                            let src = (t * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let s = src as usize;
                                for ch in 0..c {
                                    gx[s * c + ch] += g[(t * kernel + j) * c + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::Precomputed { x, grad } => {
                acc(*x, &mut |gx| {
                    for (o, &d) in gx.iter_mut().zip(grad) {
                        *o += g[0] * d;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[3, 4], &data));
            let ls = tape.log_softmax(x, 1).unwrap();
            let s = tape.softmax(x, 1).unwrap();
            let ls2 = tape.log(s);
            for (a, b) in tape.value(ls).data().iter().zip(tape.value(ls2).data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 0.5];
        let x = tape.leaf(t(&[3], &data));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        for (gv, xv) in g.get(x).unwrap().iter().zip(data) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // loss = sum(3x) + sum(x ⊙ x): gradient 3 + 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 4.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, 11.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn dropout_is_inverted_and_identity_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1000], 1.0f64));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng), x);
        let y = tape.dropout(x, 0.5, true, &mut rng);
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || v == 2.0);
        }
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn unfold_covers_stride_two_windows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let u = tape.unfold(x, 3, 2, 1).unwrap();
        assert_eq!(tape.shape(u), &[2, 3]);
        assert_eq!(tape.value(u).data(), &[0.0, 1.0, 2.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
    }
}
