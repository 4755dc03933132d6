//! Wengert-list reverse-mode autodiff.
//!
//! Every operation appends a node; inputs always have lower indices than
//! outputs, so iterating the list in reverse is a topological order and the
//! backward pass visits each node exactly once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Recip(Var),
    Ln(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    PowConst(Var, f64),
    AddScalar(Var),
    MulScalar(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[m,n] + v[n]`, broadcast over rows.
    AddRowVec(Var, Var),
    /// `[m,n] * s[m]`, one scalar per row.
    ScaleRows(Var, Var),
    /// `x * s` where `s` is a single-element tensor.
    ScaleBy(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    /// `[m,n] -> [n]`, mean over rows.
    MeanRows(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        rows: Var,
        indices: Vec<usize>,
    },
    /// Gather by row-major flat index; output is a flat vector.
    GatherElems(Var, Vec<usize>),
    BilinearResize {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph. Single-threaded during build and backward.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Inserts a copy of `t` as a leaf. Gradients flow into it only when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Inserts constant data that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let t = Tensor::from_vec(shape, data).expect("internal op produced mismatched shape");
        self.push(t, op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward target w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| -x).collect();
        self.out(self.shape(a).to_vec(), data, Op::Neg(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| 1.0 / x).collect();
        self.out(self.shape(a).to_vec(), data, Op::Recip(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        self.out(self.shape(a).to_vec(), data, Op::Ln(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        self.out(self.shape(a).to_vec(), data, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        self.out(self.shape(a).to_vec(), data, Op::Sigmoid(a), &[a])
    }

    /// Exact GeLU: `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        self.out(self.shape(a).to_vec(), data, Op::Gelu(a), &[a])
    }

    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        let data = self.data(a).iter().map(|x| x.powf(e)).collect();
        self.out(self.shape(a).to_vec(), data, Op::PowConst(a, e), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + c).collect();
        self.out(self.shape(a).to_vec(), data, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        self.out(self.shape(a).to_vec(), data, Op::MulScalar(a, c), &[a])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.out(self.shape(a).to_vec(), data, Op::Clamp(a, lo, hi), &[a])
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.out(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.out(vec![n, m], data, Op::Transpose(a), &[a]))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: sa.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let (src, vec_data) = (self.data(a), self.data(v));
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] + vec_data[j];
            }
        }
        Ok(self.out(vec![m, n], data, Op::AddRowVec(a, v), &[a, v]))
    }

    /// Multiplies row `i` of an `[m,n]` matrix by scalar `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if sa.len() != 2 || ss.len() != 1 || sa[0] != ss[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sa.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let (src, sc) = (self.data(a), self.data(s));
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] * sc[i];
            }
        }
        Ok(self.out(vec![m, n], data, Op::ScaleRows(a, s), &[a, s]))
    }

    /// Multiplies every element by a single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sc = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * sc).collect();
        Ok(self.out(self.shape(a).to_vec(), data, Op::ScaleBy(a, s), &[a, s]))
    }

    // ── Neural network ops ──────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let src = self.data(a);
        if !src.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("softmax input contains non-finite values"));
        }
        let data = softmax_raw(src, &shape, axis);
        Ok(self.out(shape, data, Op::Softmax(a, axis), &[a]))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut data = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.out(
            self.shape(x).to_vec(),
            data,
            Op::LayerNorm { x, gamma, beta },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: active only in training; identity otherwise.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = zip_map(self.data(x), &mask, |v, m| v * m);
        Ok(self.out(self.shape(x).to_vec(), data, Op::Dropout { x, mask }, &[x]))
    }

    // ── Reductions and shape ────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.out(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.out(vec![1], vec![s / n], Op::Mean(a), &[a])
    }

    /// `[m,n] -> [n]`: mean over the row axis.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        Ok(self.out(vec![n], data, Op::MeanRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.out(shape, data, Op::Reshape(a), &[a]))
    }

    /// Columns `[start, end)` of an `[m,n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s.to_vec(),
                rhs: vec![start, end],
            });
        }
        let (m, n, w) = (s[0], s[1], end - start);
        let src = self.data(a);
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
        }
        Ok(self.out(vec![m, w], data, Op::SliceCols(a, start, end), &[a]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::config("concat_cols needs at least one input"));
        }
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..m {
                data[i * n + col..i * n + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        Ok(self.out(vec![m, n], data, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of an `[m,n]` matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::config(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0; indices.len() * n];
        for (r, &idx) in indices.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&src[idx * n..(idx + 1) * n]);
        }
        Ok(self.out(
            vec![indices.len(), n],
            data,
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        ))
    }

    /// Places rows of a `[k,n]` matrix into a zeroed `[total,n]` matrix,
    /// adding on index collisions.
    pub fn scatter_rows(&mut self, rows: Var, indices: &[usize], total: usize) -> Result<Var> {
        let s = self.shape(rows);
        if s.len() != 2 || s[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: s.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let n = s[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= total) {
            return Err(Error::config(format!(
                "scatter_rows index {bad} out of range for {total} rows"
            )));
        }
        let src = self.data(rows);
        let mut data = vec![0.0; total * n];
        for (r, &idx) in indices.iter().enumerate() {
            for j in 0..n {
                data[idx * n + j] += src[r * n + j];
            }
        }
        Ok(self.out(
            vec![total, n],
            data,
            Op::ScatterRows {
                rows,
                indices: indices.to_vec(),
            },
            &[rows],
        ))
    }

    /// Gathers elements by row-major flat index into a flat vector.
    pub fn gather_elems(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let numel = self.data(a).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(Error::config(format!(
                "gather_elems index {bad} out of range for {numel} elements"
            )));
        }
        let src = self.data(a);
        let data = indices.iter().map(|&i| src[i]).collect();
        Ok(self.out(
            vec![indices.len()],
            data,
            Op::GatherElems(a, indices.to_vec()),
            &[a],
        ))
    }

    /// Bilinear resize of a 2D map using half-pixel sample centers.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || out_h == 0 || out_w == 0 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_resize",
                lhs: s.to_vec(),
                rhs: vec![out_h, out_w],
            });
        }
        let (in_h, in_w) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; out_h * out_w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for (iy, ix, w) in bilinear_taps(oy, ox, in_h, in_w, out_h, out_w) {
                    acc += w * src[iy * in_w + ix];
                }
                data[oy * out_w + ox] = acc;
            }
        }
        Ok(self.out(
            vec![out_h, out_w],
            data,
            Op::BilinearResize { x, out_h, out_w },
            &[x],
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients are accumulated
    /// into every node that (transitively) depends on a `requires_grad`
    /// leaf and stored on the node tensors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_t = &self.nodes[loss.0].value;
        if loss_t.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: loss_t.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !loss_t.data()[0].is_finite() {
            return Err(Error::numeric(format!(
                "backward from non-finite loss {}",
                loss_t.data()[0]
            )));
        }

        let n = loss.0 + 1;
        let needs: Vec<bool> = self.nodes[..n].iter().map(|nd| nd.needs_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !needs[i] {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &needs, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        // Accumulates `src` (scaled elementwise by f) into the gradient slot
        // of `dst` if it participates in differentiation.
        fn accum(
            grads: &mut [Option<Vec<f64>>],
            needs: &[bool],
            dst: Var,
            len: usize,
            write: impl FnOnce(&mut [f64]),
        ) {
            if !needs[dst.0] {
                return;
            }
            let slot = grads[dst.0].get_or_insert_with(|| vec![0.0; len]);
            write(slot);
        }

        let numel = |v: Var| self.nodes[v.0].value.numel();

        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                accum(grads, needs, *a, numel(*a), |d| add_into(d, g));
                accum(grads, needs, *b, numel(*b), |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accum(grads, needs, *a, numel(*a), |d| add_into(d, g));
                accum(grads, needs, *b, numel(*b), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), bv) in d.iter_mut().zip(g).zip(db) {
                        *x += gv * bv;
                    }
                });
                accum(grads, needs, *b, numel(*b), |d| {
                    for ((x, gv), av) in d.iter_mut().zip(g).zip(da) {
                        *x += gv * av;
                    }
                });
            }
            Op::Neg(a) => accum(grads, needs, *a, numel(*a), |d| {
                for (x, gv) in d.iter_mut().zip(g) {
                    *x -= gv;
                }
            }),
            Op::Recip(a) => {
                let y = self.data(Var(i));
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *x -= gv * yv * yv;
                    }
                });
            }
            Op::Ln(a) => {
                let src = self.data(*a);
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), sv) in d.iter_mut().zip(g).zip(src) {
                        *x += gv / sv;
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.data(Var(i));
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *x += gv * yv;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.data(Var(i));
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Gelu(a) => {
                let src = self.data(*a);
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), &sv) in d.iter_mut().zip(g).zip(src) {
                        *x += gv * gelu_derivative(sv);
                    }
                });
            }
            Op::PowConst(a, e) => {
                let src = self.data(*a);
                let e = *e;
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), &sv) in d.iter_mut().zip(g).zip(src) {
                        *x += gv * e * sv.powf(e - 1.0);
                    }
                });
            }
            Op::AddScalar(a) => accum(grads, needs, *a, numel(*a), |d| add_into(d, g)),
            Op::MulScalar(a, c) => {
                let c = *c;
                accum(grads, needs, *a, numel(*a), |d| {
                    for (x, gv) in d.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let src = self.data(*a);
                let (lo, hi) = (*lo, *hi);
                accum(grads, needs, *a, numel(*a), |d| {
                    for ((x, gv), &sv) in d.iter_mut().zip(g).zip(src) {
                        if sv > lo && sv < hi {
                            *x += gv;
                        }
                    }
                });
            }

            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = g @ B^T
                accum(grads, needs, *a, m * k, |d| {
                    for i_ in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let g_row = &g[i_ * n..(i_ + 1) * n];
                            let b_row = &db[p * n..(p + 1) * n];
                            for j in 0..n {
                                s += g_row[j] * b_row[j];
                            }
                            d[i_ * k + p] += s;
                        }
                    }
                });
                // dB = A^T @ g
                accum(grads, needs, *b, k * n, |d| {
                    for i_ in 0..m {
                        let g_row = &g[i_ * n..(i_ + 1) * n];
                        for p in 0..k {
                            let a_ip = da[i_ * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let d_row = &mut d[p * n..(p + 1) * n];
                            for j in 0..n {
                                d_row[j] += a_ip * g_row[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (self.shape(Var(i))[0], self.shape(Var(i))[1]);
                accum(grads, needs, *a, numel(*a), |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::AddRowVec(a, v) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                accum(grads, needs, *a, m * n, |d| add_into(d, g));
                accum(grads, needs, *v, n, |d| {
                    for i_ in 0..m {
                        for j in 0..n {
                            d[j] += g[i_ * n + j];
                        }
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (da, ds) = (self.data(*a), self.data(*s));
                accum(grads, needs, *a, m * n, |d| {
                    for i_ in 0..m {
                        for j in 0..n {
                            d[i_ * n + j] += g[i_ * n + j] * ds[i_];
                        }
                    }
                });
                accum(grads, needs, *s, m, |d| {
                    for i_ in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i_ * n + j] * da[i_ * n + j];
                        }
                        d[i_] += acc;
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let (da, sv) = (self.data(*a), self.data(*s)[0]);
                accum(grads, needs, *a, numel(*a), |d| {
                    for (x, gv) in d.iter_mut().zip(g) {
                        *x += gv * sv;
                    }
                });
                accum(grads, needs, *s, 1, |d| {
                    d[0] += g.iter().zip(da).map(|(gv, av)| gv * av).sum::<f64>();
                });
            }

            Op::Softmax(a, axis) => {
                let y = self.data(Var(i));
                let shape = self.shape(Var(i));
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                accum(grads, needs, *a, numel(*a), |d| {
                    for o in 0..outer {
                        for inr in 0..inner {
                            let mut dot = 0.0;
                            for t in 0..axis_len {
                                let f = o * axis_len * inner + t * inner + inr;
                                dot += g[f] * y[f];
                            }
                            for t in 0..axis_len {
                                let f = o * axis_len * inner + t * inner + inr;
                                d[f] += y[f] * (g[f] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xs = self.data(*x);
                let gs = self.data(*gamma);
                let d_len = self.shape(*gamma)[0];
                let rows = xs.len() / d_len;
                // dgamma / dbeta
                accum(grads, needs, *gamma, d_len, |d| {
                    for r in 0..rows {
                        let row = &xs[r * d_len..(r + 1) * d_len];
                        let mean = row.iter().sum::<f64>() / d_len as f64;
                        let var =
                            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d_len as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for j in 0..d_len {
                            d[j] += g[r * d_len + j] * (row[j] - mean) * inv_std;
                        }
                    }
                });
                accum(grads, needs, *beta, d_len, |d| {
                    for r in 0..rows {
                        for j in 0..d_len {
                            d[j] += g[r * d_len + j];
                        }
                    }
                });
                accum(grads, needs, *x, xs.len(), |d| {
                    let df = d_len as f64;
                    for r in 0..rows {
                        let row = &xs[r * d_len..(r + 1) * d_len];
                        let g_row = &g[r * d_len..(r + 1) * d_len];
                        let mean = row.iter().sum::<f64>() / df;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / df;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d_len {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = g_row[j] * gs[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d_len {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = g_row[j] * gs[j];
                            d[r * d_len + j] +=
                                inv_std / df * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accum(grads, needs, *x, numel(*x), |d| {
                    for ((dv, gv), mv) in d.iter_mut().zip(g).zip(mask) {
                        *dv += gv * mv;
                    }
                });
            }

            Op::Sum(a) => {
                let gv = g[0];
                accum(grads, needs, *a, numel(*a), |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let gv = g[0] / numel(*a) as f64;
                accum(grads, needs, *a, numel(*a), |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                accum(grads, needs, *a, m * n, |d| {
                    for i_ in 0..m {
                        for j in 0..n {
                            d[i_ * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::Reshape(a) => accum(grads, needs, *a, numel(*a), |d| add_into(d, g)),
            Op::SliceCols(a, start, end) => {
                let n = self.shape(*a)[1];
                let m = self.shape(*a)[0];
                let w = end - start;
                let start = *start;
                accum(grads, needs, *a, m * n, |d| {
                    for i_ in 0..m {
                        for j in 0..w {
                            d[i_ * n + start + j] += g[i_ * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.shape(Var(i))[0];
                let n = self.shape(Var(i))[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    accum(grads, needs, p, m * w, |d| {
                        for i_ in 0..m {
                            for j in 0..w {
                                d[i_ * w + j] += g[i_ * n + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::GatherRows(a, indices) => {
                let n = self.shape(*a)[1];
                accum(grads, needs, *a, numel(*a), |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..n {
                            d[idx * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::ScatterRows { rows, indices } => {
                let n = self.shape(*rows)[1];
                accum(grads, needs, *rows, numel(*rows), |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..n {
                            d[r * n + j] += g[idx * n + j];
                        }
                    }
                });
            }
            Op::GatherElems(a, indices) => {
                accum(grads, needs, *a, numel(*a), |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        d[idx] += g[r];
                    }
                });
            }
            Op::BilinearResize { x, out_h, out_w } => {
                let (in_h, in_w) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (out_h, out_w) = (*out_h, *out_w);
                accum(grads, needs, *x, in_h * in_w, |d| {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let gv = g[oy * out_w + ox];
                            for (iy, ix, w) in bilinear_taps(oy, ox, in_h, in_w, out_h, out_w) {
                                d[iy * in_w + ix] += gv * w;
                            }
                        }
                    }
                });
            }
        }
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────────

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

fn softmax_raw(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for inr in 0..inner {
            let at = |t: usize| o * axis_len * inner + t * inner + inr;
            let mut max = f64::NEG_INFINITY;
            for t in 0..axis_len {
                max = max.max(src[at(t)]);
            }
            let mut sum = 0.0;
            for t in 0..axis_len {
                let e = (src[at(t)] - max).exp();
                out[at(t)] = e;
                sum += e;
            }
            for t in 0..axis_len {
                out[at(t)] /= sum;
            }
        }
    }
    out
}

/// The (up to four) input taps and weights contributing to one output pixel
/// of a bilinear resize with half-pixel alignment.
fn bilinear_taps(
    oy: usize,
    ox: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> impl Iterator<Item = (usize, usize, f64)> {
    let map = |o: usize, in_len: usize, out_len: usize| -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
        let src = src.clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        (lo, hi, frac)
    };
    let (y0, y1, fy) = map(oy, in_h, out_h);
    let (x0, x1, fx) = map(ox, in_w, out_w);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
    .into_iter()
    .filter(|&(_, _, w)| w != 0.0)
}
