//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the adjoint. `backward` walks the nodes in reverse creation order,
//! which is a valid topological order because a node only references earlier
//! nodes.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry, Tap};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization obtains its per-channel statistics.
#[derive(Clone, Debug)]
pub enum NormStats<'a, F> {
    /// Normalize with the statistics of the current batch (training).
    Batch { eps: F },
    /// Normalize with stored running statistics (evaluation).
    Fixed { mean: &'a [F], var: &'a [F], eps: F },
}

/// Per-channel batch mean and unbiased variance, reported by training-mode
/// batch normalization so the caller can update running statistics.
#[derive(Clone, Debug)]
pub struct BatchMoments<F> {
    pub mean: Vec<F>,
    pub var_unbiased: Vec<F>,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv1x1 { x: Var, w: Var, b: Var },
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F>, batch_stats: bool },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Replicate { x: Var },
    Bilinear { x: Var, rows: Vec<Tap>, cols: Vec<Tap> },
    Reshape { x: Var },
    MaxLast { x: Var, argmax: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    Narrow { x: Var },
    TransposeLast2 { x: Var },
    Chamfer { a: Var, b: Var, a_to_b: Vec<usize>, b_to_a: Vec<usize>, squared: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: F },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Splits a `[B, C, ...]` shape into `(B, C, positions)`.
fn bcp(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return dim_err(op, format!("expected [batch, channels, ...], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Fully connected layer: `x [B, in]`, `w [out, in]`, `b [out]` → `[B, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return dim_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        let mut y = vec![F::zero(); batch * out];
        kernels::matmul_nt_acc(self.value(x).data(), self.value(w).data(), batch, inp, out, &mut y);
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(out) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let value = Tensor::new(vec![batch, out], y)?;
        self.push("linear", value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Per-position affine map: `x [B, c_in, ...]`, `w [c_out, c_in]`, `b [c_out]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (sw, sb) = (self.shape(w), self.shape(b));
        let (batch, cin, positions) = bcp("conv1x1", &sx)?;
        if sw.len() != 2 || sw[1] != cin || sb != [sw[0]] {
            return dim_err("conv1x1", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        }
        let cout = sw[0];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = Vec::with_capacity(batch * cout * positions);
        for item in xv.chunks_exact(cin * positions) {
            let mut part = kernels::matmul(wv, item, cout, cin, positions);
            for (row, &bb) in part.chunks_exact_mut(positions).zip(bv) {
                row.iter_mut().for_each(|v| *v += bb);
            }
            y.extend(part);
        }
        let mut shape = sx;
        shape[1] = cout;
        let value = Tensor::new(shape, y)?;
        self.push("conv1x1", value, Op::Conv1x1 { x, w, b }, &[x, w, b])
    }

    /// Fractionally strided convolution: `x [B, c_in, h, w]`,
    /// `w [c_in, c_out, k, k]`, `b [c_out]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b);
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || sb != [sw[1]] {
            return dim_err("conv_transpose2d", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        }
        if stride == 0 {
            return Err(TensorError::Config("transposed convolution stride must be positive".into()));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[1], sw[2]);
        let extent = |n| kernels::conv_transpose_extent(n, k, stride, padding);
        let (Some(oh), Some(ow)) = (extent(h), extent(wd)) else {
            return Err(TensorError::Config(format!(
                "transposed convolution of {h}x{wd} with kernel {k}, stride {stride}, padding {padding} has no output"
            )));
        };
        let geom = ConvGeometry { in_h: h, in_w: wd, out_h: oh, out_w: ow, kernel: k, stride, padding };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let ckk = cout * k * k;
        let mut out = vec![F::zero(); batch * cout * oh * ow];
        let mut cols = vec![F::zero(); ckk * h * wd];
        for (item, dst) in xv.chunks_exact(cin * h * wd).zip(out.chunks_exact_mut(cout * oh * ow)) {
            cols.iter_mut().for_each(|v| *v = F::zero());
            kernels::matmul_tn_acc(wv, item, ckk, cin, h * wd, &mut cols);
            geom.col2im(&cols, cout, dst);
            for (plane, &bb) in dst.chunks_exact_mut(oh * ow).zip(bv) {
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        self.push("conv_transpose2d", value, Op::ConvTranspose { x, w, b, geom }, &[x, w, b])
    }

    /// Per-channel normalization over batch and spatial positions of
    /// `x [B, C, ...]`. Returns the batch moments in training mode.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, F>,
    ) -> Result<(Var, Option<BatchMoments<F>>)> {
        let sx = self.shape(x).to_vec();
        let (batch, ch, positions) = bcp("batchnorm", &sx)?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return dim_err("batchnorm", format!("affine parameters do not match {ch} channels"));
        }
        let count = batch * positions;
        let xv = self.value(x).data();
        let idx = |b: usize, c: usize, p: usize| (b * ch + c) * positions + p;
        let (mean, inv_std, moments, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                if count < 2 {
                    return Err(TensorError::Degenerate {
                        op: "batchnorm",
                        detail: format!("{count} value per channel in training mode"),
                    });
                }
                let n = F::of(count as f64);
                let mut mean = vec![F::zero(); ch];
                let mut var = vec![F::zero(); ch];
                let row = |b: usize, c: usize| &xv[idx(b, c, 0)..idx(b, c, 0) + positions];
                for c in 0..ch {
                    let mu = (0..batch).map(|b| kernels::lane_sum(row(b, c))).sum::<F>() / n;
                    let ss: F = (0..batch).map(|b| kernels::lane_sq_dev(row(b, c), mu)).sum();
                    mean[c] = mu;
                    var[c] = ss / n;
                }
                let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
                let unbiased = F::of(count as f64 / (count as f64 - 1.0));
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, inv_std, Some(moments), true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != ch || var.len() != ch {
                    return dim_err("batchnorm", "running statistics do not match channels");
                }
                let inv_std = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); xv.len()];
        let mut y = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let r = idx(b, c, 0)..idx(b, c, 0) + positions;
                let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xv[r]) {
                    *h = (v - mu) * is;
                    *o = gc * *h + bc;
                }
            }
        }
        let value = Tensor::new(sx, y)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats };
        let v = self.push("batchnorm", value, op, &[x, gamma, beta])?;
        Ok((v, moments))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// Concatenates `[B, c_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_channels", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        let (batch, _, positions) = bcp("concat_channels", &s0)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != batch || s[2..] != s0[2..] {
                return dim_err("concat_channels", format!("{s:?} vs {s0:?}"));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(batch * total * positions);
        for b in 0..batch {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * c * positions..(b + 1) * c * positions]);
            }
        }
        let mut shape = s0;
        shape[1] = total;
        let value = Tensor::new(shape, out)?;
        self.push("concat_channels", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Tiles `x [B, C]` over spatial extents: `[B, C, *spatial]`.
    pub fn replicate(&mut self, x: Var, spatial: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || spatial.is_empty() || spatial.contains(&0) {
            return dim_err("replicate", format!("{sx:?} over {spatial:?}"));
        }
        let positions: usize = spatial.iter().product();
        let out = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, positions))
            .collect();
        let mut shape = sx;
        shape.extend_from_slice(spatial);
        let value = Tensor::new(shape, out)?;
        self.push("replicate", value, Op::Replicate { x }, &[x])
    }

    /// Align-corners bilinear resize of `x [B, C, h, w]` to `[B, C, h′, w′]`.
    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || out_h == 0 || out_w == 0 {
            return dim_err("bilinear", format!("{sx:?} to {out_h}x{out_w}"));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let rows = kernels::linear_taps(h, out_h);
        let cols = kernels::linear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bc * out_h * out_w);
        if h == out_h && w == out_w {
            out.extend_from_slice(xv);
        } else {
            for plane in xv.chunks_exact(h * w) {
                for r in &rows {
                    let (fy, gy) = (F::of(r.frac), F::of(1.0 - r.frac));
                    for c in &cols {
                        let (fx, gx) = (F::of(c.frac), F::of(1.0 - c.frac));
                        let top = plane[r.lo * w + c.lo] * gx + plane[r.lo * w + c.hi] * fx;
                        let bot = plane[r.hi * w + c.lo] * gx + plane[r.hi * w + c.hi] * fx;
                        out.push(top * gy + bot * fy);
                    }
                }
            }
        }
        let value = Tensor::new(vec![sx[0], sx[1], out_h, out_w], out)?;
        self.push("bilinear", value, Op::Bilinear { x, rows, cols }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Maximum over the last axis; ties pick the first position.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return dim_err("max_last", format!("{sx:?}"));
        }
        let len = *sx.last().unwrap_or(&1);
        let mut argmax = Vec::with_capacity(self.value(x).numel() / len);
        let mut out = Vec::with_capacity(argmax.capacity());
        for row in self.value(x).data().chunks_exact(len) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let value = Tensor::new(sx[..sx.len() - 1].to_vec(), out)?;
        self.push("max_last", value, Op::MaxLast { x, argmax }, &[x])
    }

    /// Gathers positions of `x [B, C, N]` into `[B, C, Q]`; `index` holds `B·Q`
    /// entries, one block of `Q` per batch item.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index.is_empty() || index.len() % sx[0] != 0 {
            return dim_err("gather_last", format!("{sx:?} with {} indices", index.len()));
        }
        let (batch, ch, n) = (sx[0], sx[1], sx[2]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return dim_err("gather_last", format!("index {bad} out of range {n}"));
        }
        let q = index.len() / batch;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * ch * q);
        for b in 0..batch {
            let ids = &index[b * q..(b + 1) * q];
            for c in 0..ch {
                let row = &xv[(b * ch + c) * n..(b * ch + c + 1) * n];
                out.extend(ids.iter().map(|&i| row[i]));
            }
        }
        let value = Tensor::new(vec![batch, ch, q], out)?;
        self.push("gather_last", value, Op::Gather { x, index: index.to_vec() }, &[x])
    }

    /// Keeps the first `len` positions of the last axis.
    pub fn narrow_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let full = *sx.last().unwrap_or(&0);
        if len == 0 || len > full {
            return dim_err("narrow_last", format!("{len} of {sx:?}"));
        }
        let out = self
            .value(x)
            .data()
            .chunks_exact(full)
            .flat_map(|row| row[..len].iter().copied())
            .collect();
        let mut shape = sx;
        *shape.last_mut().expect("non-empty shape") = len;
        let value = Tensor::new(shape, out)?;
        self.push("narrow_last", value, Op::Narrow { x }, &[x])
    }

    /// `[B, R, S]` → `[B, S, R]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return dim_err("transpose_last2", format!("{sx:?}"));
        }
        let (batch, r, s) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for i in 0..r {
                for j in 0..s {
                    out[(b * s + j) * r + i] = xv[(b * r + i) * s + j];
                }
            }
        }
        let value = Tensor::new(vec![batch, s, r], out)?;
        self.push("transpose_last2", value, Op::TransposeLast2 { x }, &[x])
    }

    /// Batch-mean chamfer distance between `a [B, Na, 3]` and `b [B, Nb, 3]`.
    /// With `squared` unset, nearest-neighbor distances enter as plain L2 norms.
    pub fn chamfer(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != 3 || sb[2] != 3 {
            return dim_err("chamfer", format!("{sa:?} vs {sb:?}"));
        }
        let (batch, na, nb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut a_to_b = Vec::with_capacity(batch * na);
        let mut b_to_a = Vec::with_capacity(batch * nb);
        let dist = |d2: F| if squared { d2 } else { d2.sqrt() };
        let mut total = F::zero();
        for item in 0..batch {
            let pa = &av[item * na * 3..(item + 1) * na * 3];
            let pb = &bv[item * nb * 3..(item + 1) * nb * 3];
            let fwd = kernels::nearest_neighbors(pa, pb);
            let bwd = kernels::nearest_neighbors(pb, pa);
            let s_ab: F = fwd.iter().map(|&(_, d)| dist(d)).sum();
            let s_ba: F = bwd.iter().map(|&(_, d)| dist(d)).sum();
            total += s_ab / F::of(na as f64) + s_ba / F::of(nb as f64);
            a_to_b.extend(fwd.into_iter().map(|(j, _)| j));
            b_to_a.extend(bwd.into_iter().map(|(i, _)| i));
        }
        let value = Tensor::scalar(total / F::of(batch as f64));
        self.push("chamfer", value, Op::Chamfer { a, b, a_to_b, b_to_a, squared }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: impl FnOnce(Var, Var) -> Op<F>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(name, value, op(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * factor).collect())?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s: F = xv.data().iter().copied().sum::<F>() / F::of(xv.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Runs [`backward`](Self::backward) and adds parameter gradients into `store`.
    /// Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul_nt_acc(g, val(b), m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_tn_acc(val(a), g, k, m, n, gb);
                }
            }
            &Op::Linear { x, w, b } => {
                let (batch, inp) = (self.shape(x)[0], self.shape(x)[1]);
                let out = self.shape(w)[0];
                if let Some(gx) = self.slot(grads, x) {
                    F::gemm(batch, out, inp, g, out as isize, 1, val(w), inp as isize, 1, F::one(), gx, inp as isize, 1);
                }
                if let Some(gw) = self.slot(grads, w) {
                    kernels::matmul_tn_acc(g, val(x), out, batch, inp, gw);
                }
                if let Some(gb) = self.slot(grads, b) {
                    for row in g.chunks_exact(out) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Conv1x1 { x, w, b } => {
                let (_, cin, positions) = bcp("conv1x1", self.shape(x)).expect("validated");
                let cout = self.shape(w)[0];
                if let Some(gx) = self.slot(grads, x) {
                    for (gi, gxi) in g.chunks_exact(cout * positions).zip(gx.chunks_exact_mut(cin * positions)) {
                        kernels::matmul_tn_acc(val(w), gi, cin, cout, positions, gxi);
                    }
                }
                if let Some(gw) = self.slot(grads, w) {
                    for (gi, xi) in g.chunks_exact(cout * positions).zip(val(x).chunks_exact(cin * positions)) {
                        kernels::matmul_nt_acc(gi, xi, cout, positions, cin, gw);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (c, row) in g.chunks_exact(positions).enumerate() {
                        gb[c % cout] += kernels::lane_sum(row);
                    }
                }
            }
            &Op::ConvTranspose { x, w, b, geom } => {
                let cin = self.shape(x)[1];
                let cout = self.shape(w)[1];
                let hw = geom.in_h * geom.in_w;
                let ohw = geom.out_h * geom.out_w;
                let ckk = cout * geom.kernel * geom.kernel;
                let need_x = self.needs(x);
                let need_w = self.needs(w);
                for (item, gi) in g.chunks_exact(cout * ohw).enumerate() {
                    if !(need_x || need_w) {
                        break;
                    }
                    let cols = geom.im2col(gi, cout);
                    if let Some(gx) = self.slot(grads, x) {
                        let dst = &mut gx[item * cin * hw..(item + 1) * cin * hw];
                        F::gemm(cin, ckk, hw, val(w), ckk as isize, 1, &cols, hw as isize, 1, F::one(), dst, hw as isize, 1);
                    }
                    if let Some(gw) = self.slot(grads, w) {
                        let xi = &val(x)[item * cin * hw..(item + 1) * cin * hw];
                        kernels::matmul_nt_acc(xi, &cols, cin, hw, ckk, gw);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (c, plane) in g.chunks_exact(ohw).enumerate() {
                        gb[c % cout] += plane.iter().copied().sum::<F>();
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (batch, ch, positions) = bcp("batchnorm", self.shape(*x)).expect("validated");
                let idx = |b: usize, c: usize, p: usize| (b * ch + c) * positions + p;
                let mut sum_g = vec![F::zero(); ch];
                let mut sum_gx = vec![F::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let r = idx(b, c, 0)..idx(b, c, 0) + positions;
                        sum_g[c] += kernels::lane_sum(&g[r.clone()]);
                        sum_gx[c] += kernels::lane_dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                }
                let gam = val(*gamma);
                if let Some(gx) = self.slot(grads, *x) {
                    let n = F::of((batch * positions) as f64);
                    for b in 0..batch {
                        for c in 0..ch {
                            let r = idx(b, c, 0)..idx(b, c, 0) + positions;
                            let scale = gam[c] * inv_std[c];
                            let dst = gx[r.clone()].iter_mut().zip(&g[r.clone()]);
                            if *batch_stats {
                                let (k0, k1) = (scale / n, sum_g[c]);
                                let k2 = sum_gx[c];
                                for ((d, &gk), &hk) in dst.zip(&xhat[r]) {
                                    *d += k0 * (n * gk - k1 - hk * k2);
                                }
                            } else {
                                for (d, &gk) in dst {
                                    *d += scale * gk;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        *d += if v > F::zero() { s } else { F::zero() };
                    }
                }
            }
            Op::Concat { parts } => {
                let (batch, total, positions) = bcp("concat_channels", self.nodes[i].value.shape()).expect("validated");
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for b in 0..batch {
                            let src = &g[(b * total + offset) * positions..(b * total + offset + c) * positions];
                            let dst = &mut gp[b * c * positions..(b + 1) * c * positions];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += c;
                }
            }
            &Op::Replicate { x } => {
                let n = val(x).len();
                let positions = g.len() / n;
                if let Some(gx) = self.slot(grads, x) {
                    for (d, row) in gx.iter_mut().zip(g.chunks_exact(positions)) {
                        *d += kernels::lane_sum(row);
                    }
                }
            }
            Op::Bilinear { x, rows, cols } => {
                let sx = self.shape(*x).to_vec();
                let (h, w) = (sx[2], sx[3]);
                let (oh, ow) = (rows.len(), cols.len());
                if let Some(gx) = self.slot(grads, *x) {
                    if h == oh && w == ow {
                        gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                        return;
                    }
                    for (plane, gp) in gx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
                        for (ri, r) in rows.iter().enumerate() {
                            let (fy, gy) = (F::of(r.frac), F::of(1.0 - r.frac));
                            for (ci, c) in cols.iter().enumerate() {
                                let (fx, gxw) = (F::of(c.frac), F::of(1.0 - c.frac));
                                let s = gp[ri * ow + ci];
                                plane[r.lo * w + c.lo] += s * gy * gxw;
                                plane[r.lo * w + c.hi] += s * gy * fx;
                                plane[r.hi * w + c.lo] += s * fy * gxw;
                                plane[r.hi * w + c.hi] += s * fy * fx;
                            }
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MaxLast { x, argmax } => {
                let len = *self.shape(*x).last().expect("validated");
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (&a, &s)) in argmax.iter().zip(g).enumerate() {
                        gx[r * len + a] += s;
                    }
                }
            }
            Op::Gather { x, index } => {
                let sx = self.shape(*x).to_vec();
                let (batch, ch, n) = (sx[0], sx[1], sx[2]);
                let q = index.len() / batch;
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..batch {
                        let ids = &index[b * q..(b + 1) * q];
                        for c in 0..ch {
                            let src = &g[(b * ch + c) * q..(b * ch + c + 1) * q];
                            let dst = &mut gx[(b * ch + c) * n..(b * ch + c + 1) * n];
                            for (&id, &s) in ids.iter().zip(src) {
                                dst[id] += s;
                            }
                        }
                    }
                }
            }
            &Op::Narrow { x } => {
                let full = *self.shape(x).last().expect("validated");
                let len = *self.nodes[i].value.shape().last().expect("validated");
                if let Some(gx) = self.slot(grads, x) {
                    for (dst, src) in gx.chunks_exact_mut(full).zip(g.chunks_exact(len)) {
                        dst[..len].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::TransposeLast2 { x } => {
                let sx = self.shape(x).to_vec();
                let (batch, r, s) = (sx[0], sx[1], sx[2]);
                if let Some(gx) = self.slot(grads, x) {
                    for b in 0..batch {
                        for ii in 0..r {
                            for j in 0..s {
                                gx[(b * r + ii) * s + j] += g[(b * s + j) * r + ii];
                            }
                        }
                    }
                }
            }
            Op::Chamfer { a, b, a_to_b, b_to_a, squared } => {
                let (a, b) = (*a, *b);
                let (batch, na) = (self.shape(a)[0], self.shape(a)[1]);
                let nb = self.shape(b)[1];
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                let direction = |p: &[F], q: &[F]| -> [F; 3] {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    if *squared {
                        let two = F::of(2.0);
                        return [two * d[0], two * d[1], two * d[2]];
                    }
                    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if norm > F::zero() {
                        [d[0] / norm, d[1] / norm, d[2] / norm]
                    } else {
                        [F::zero(); 3]
                    }
                };
                let mut ga = vec![F::zero(); av.len()];
                let mut gb = vec![F::zero(); bv.len()];
                let bf = F::of(batch as f64);
                for item in 0..batch {
                    let s_ab = g[0] / (bf * F::of(na as f64));
                    for p in 0..na {
                        let ia = item * na + p;
                        let ib = item * nb + a_to_b[ia];
                        let d = direction(&av[ia * 3..ia * 3 + 3], &bv[ib * 3..ib * 3 + 3]);
                        for k in 0..3 {
                            ga[ia * 3 + k] += s_ab * d[k];
                            gb[ib * 3 + k] -= s_ab * d[k];
                        }
                    }
                    let s_ba = g[0] / (bf * F::of(nb as f64));
                    for q in 0..nb {
                        let ib = item * nb + q;
                        let ia = item * na + b_to_a[ib];
                        let d = direction(&bv[ib * 3..ib * 3 + 3], &av[ia * 3..ia * 3 + 3]);
                        for k in 0..3 {
                            gb[ib * 3 + k] += s_ba * d[k];
                            ga[ia * 3 + k] -= s_ba * d[k];
                        }
                    }
                }
                if let Some(dst) = self.slot(grads, a) {
                    dst.iter_mut().zip(&ga).for_each(|(d, &s)| *d += s);
                }
                if let Some(dst) = self.slot(grads, b) {
                    dst.iter_mut().zip(&gb).for_each(|(d, &s)| *d += s);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * o;
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * factor);
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                let n = F::of(val(x).len() as f64);
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }
}
