//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Parameters enter the tape
//! through [`Graph::param`] and are memoized so one graph can reuse a weight across
//! many frames without copying it twice.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::WarpPlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }
}

enum Op<T> {
    Constant,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    AddScalar(Var, Var),
    Gelu(Var),
    SoftmaxRows {
        x: Var,
    },
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    Warp {
        x: Var,
        plan: Arc<WarpPlan<T>>,
        channels: usize,
    },
    CosineWeight {
        a: Var,
        b: Var,
        channels: usize,
        active: Vec<bool>,
        na: Vec<T>,
        nb: Vec<T>,
    },
    MulChannels {
        x: Var,
        w: Var,
        channels: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    BceWithLogitsRows {
        logits: Var,
        targets: Arc<Vec<T>>,
    },
    DiceRows {
        logits: Var,
        targets: Arc<Vec<T>>,
        probs: Vec<T>,
        num: Vec<T>,
        den: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients indexed by `ParamId`; parameters not touched by the loss are `None`.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; n_params];
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.0] = Some(g.clone());
            }
        }
        out
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let c = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x);
    (y, dy)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `-[y ln σ(x) + (1-y) ln(1-σ(x))]`.
pub(crate) fn bce_logit<T: Scalar>(x: T, y: T) -> T {
    x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let k = g.kernel;
    let pad = g.pad();
    let mut cols = vec![T::zero(); g.c_in * k * k * p];
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    // Replicate padding: clamp the sampling position into the image.
                    let sy =
                        ((oy * g.stride) as isize + ky as isize - pad).clamp(0, h - 1) as usize;
                    let src_row = &plane[sy * g.w..(sy + 1) * g.w];
                    for ox in 0..ow {
                        let sx =
                            ((ox * g.stride) as isize + kx as isize - pad).clamp(0, w - 1) as usize;
                        dst[oy * ow + ox] = src_row[sx];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let k = g.kernel;
    let pad = g.pad();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let sy =
                        ((oy * g.stride) as isize + ky as isize - pad).clamp(0, h - 1) as usize;
                    for ox in 0..ow {
                        let sx =
                            ((ox * g.stride) as isize + kx as isize - pad).clamp(0, w - 1) as usize;
                        plane[sy * g.w + sx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Per-axis linear interpolation taps for align-corners-false upsampling.
pub(crate) fn upsample_taps<T: Scalar>(n_in: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = T::from_usize_lossy(factor);
    let half = T::c(0.5);
    let max = T::from_usize_lossy(n_in - 1);
    (0..n_in * factor)
        .map(|o| {
            let s = ((T::from_usize_lossy(o) + half) / f - half)
                .max(T::zero())
                .min(max);
            let i0 = s.floor().to_usize().unwrap_or(0).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - T::from_usize_lossy(i0))
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = upsample_taps::<T>(h, factor);
    let tx = upsample_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, a)) in tx.iter().enumerate() {
                let r = &plane[y * w..];
                tmp[y * ow + ox] = r[i0] + a * (r[i1] - r[i0]);
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(i0, i1, a)) in ty.iter().enumerate() {
            for ox in 0..ow {
                let v0 = tmp[i0 * ow + ox];
                let v1 = tmp[i1 * ow + ox];
                dst[oy * ow + ox] = v0 + a * (v1 - v0);
            }
        }
    }
    out
}

fn upsample_adjoint<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = upsample_taps::<T>(h, factor);
    let tx = upsample_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); c * h * w];
    let mut tmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let src = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(i0, i1, a)) in ty.iter().enumerate() {
            for ox in 0..ow {
                let g = src[oy * ow + ox];
                tmp[i0 * ow + ox] += (T::one() - a) * g;
                tmp[i1 * ow + ox] += a * g;
            }
        }
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, a)) in tx.iter().enumerate() {
                let g = tmp[y * ow + ox];
                plane[y * w + i0] += (T::one() - a) * g;
                plane[y * w + i1] += a * g;
            }
        }
    }
    dx
}

pub(crate) fn cosine_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    channels: usize,
    b_valid: &[bool],
) -> (Vec<T>, Vec<bool>, Vec<T>, Vec<T>) {
    let eps = T::c(1e-8);
    let p = b_valid.len();
    let mut w = vec![T::zero(); p];
    let mut active = vec![false; p];
    let mut na = vec![T::zero(); p];
    let mut nb = vec![T::zero(); p];
    let mut dot = vec![T::zero(); p];
    for c in 0..channels {
        let ar = &a[c * p..(c + 1) * p];
        let br = &b[c * p..(c + 1) * p];
        for i in 0..p {
            dot[i] += ar[i] * br[i];
            na[i] += ar[i] * ar[i];
            nb[i] += br[i] * br[i];
        }
    }
    for i in 0..p {
        na[i] = na[i].sqrt();
        nb[i] = nb[i].sqrt();
        if b_valid[i] && na[i] >= eps && nb[i] >= eps {
            active[i] = true;
            w[i] = dot[i] / (na[i] * nb[i] + eps);
        }
    }
    (w, active, na, nb)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
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

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `op(a) * op(b)` for 2-D values (leading axes of `a` flattened into rows).
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).matrix_dims();
        let (br, bc) = self.value(b).matrix_dims();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {k} vs {k2} (shapes {:?}, {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x[r, c] + bias[c]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        if self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "row bias {} vs cols {cols}",
                self.value(bias).len()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), ng))
    }

    /// `x[c, ...] + bias[c]` for channel-first maps.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "channel bias {} vs channels {c}",
                self.value(bias).len()
            )));
        }
        let per = self.value(x).len() / c.max(1);
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (ch, &bv) in b.iter().enumerate() {
            for o in &mut out.data_mut()[ch * per..(ch + 1) * per] {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddChannelBias(x, bias), ng))
    }

    /// `x + s` with a one-element `s` broadcast over every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("add_scalar with {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v + sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::AddScalar(x, s), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| gelu_parts(a).0);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax; columns with `key_mask[c] == false` receive zero probability.
    /// A row with no admissible column is all zeros.
    pub fn softmax_rows_masked(&mut self, x: Var, key_mask: Option<Arc<Vec<bool>>>) -> Var {
        let (rows, cols) = self.value(x).matrix_dims();
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            match &key_mask {
                None => softmax_in_place(row),
                Some(mask) => {
                    let m = row
                        .iter()
                        .zip(mask.iter())
                        .filter(|(_, &k)| k)
                        .map(|(&v, _)| v)
                        .fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for (v, &k) in row.iter_mut().zip(mask.iter()) {
                        *v = if k { (*v - m).exp() } else { T::zero() };
                        s += *v;
                    }
                    if s > T::zero() {
                        for v in row.iter_mut() {
                            *v /= s;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows { x }, ng)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Shape("layer norm affine size".into()));
        }
        let eps = T::c(1e-5);
        let n = T::from_usize_lossy(cols);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Convolution with replicate padding `kernel / 2`; input `[c_in, h, w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("conv2d expects [c,h,w], got {xs:?}")));
        }
        let c_out = self.shape(w)[0];
        let geom = ConvGeom {
            c_in: xs[0],
            c_out,
            h: xs[1],
            w: xs[2],
            kernel,
            stride,
        };
        if self.value(w).len() != c_out * geom.c_in * kernel * kernel {
            return Err(Error::Shape(format!(
                "conv weight {:?} for input {xs:?}",
                self.shape(w)
            )));
        }
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.out_h() * geom.out_w();
        let kk = geom.c_in * kernel * kernel;
        let mut out = vec![T::zero(); c_out * p];
        T::gemm(
            c_out,
            kk,
            p,
            T::one(),
            self.value(w).data(),
            false,
            &cols,
            false,
            T::zero(),
            &mut out,
        );
        let bias = self.value(b).data();
        for (co, &bv) in bias.iter().enumerate() {
            for o in &mut out[co * p..(co + 1) * p] {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if ng { cols } else { Vec::new() };
        let t = Tensor::new(vec![c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Bilinear (align-corners-false) upsampling of a `[c, h, w]` map.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("upsample expects [c,h,w], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = upsample_forward(self.value(x).data(), c, h, w, factor);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![c, h * factor, w * factor], out)?,
            Op::Upsample { x, c, h, w, factor },
            ng,
        ))
    }

    /// Horizontal resampling of a `[c, h, w]` map with precomputed taps.
    pub fn warp(&mut self, x: Var, plan: Arc<WarpPlan<T>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != plan.height() || s[2] != plan.width() {
            return Err(Error::Shape(format!(
                "warp of {s:?} with plan {}x{}",
                plan.height(),
                plan.width()
            )));
        }
        let out = plan.apply(self.value(x).data(), s[0]);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(s.clone(), out)?,
            Op::Warp {
                x,
                plan,
                channels: s[0],
            },
            ng,
        ))
    }

    /// Pixelwise cosine similarity of two `[c, h, w]` maps; zero where `b_valid` is false
    /// or either norm is below 1e-8. Output `[h, w]`.
    pub fn cosine_weight(&mut self, a: Var, b: Var, b_valid: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s != self.shape(b) || s.len() != 3 || s[1] * s[2] != b_valid.len() {
            return Err(Error::Shape(format!(
                "cosine weight {:?} vs {:?}",
                s,
                self.shape(b)
            )));
        }
        let (w, active, na, nb) =
            cosine_forward(self.value(a).data(), self.value(b).data(), s[0], b_valid);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![s[1], s[2]], w)?,
            Op::CosineWeight {
                a,
                b,
                channels: s[0],
                active,
                na,
                nb,
            },
            ng,
        ))
    }

    /// `x[c, p] * w[p]`.
    pub fn mul_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        let p = self.value(w).len();
        if self.value(x).len() != c * p {
            return Err(Error::Shape(format!(
                "mul_channels {:?} by {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let mut out = self.value(x).clone();
        let wv = self.value(w).data().to_vec();
        for ch in 0..c {
            for (o, &wi) in out.data_mut()[ch * p..(ch + 1) * p].iter_mut().zip(&wv) {
                *o *= wi;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::MulChannels { x, w, channels: c }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (rows, cols) = self.value(x).matrix_dims();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![cols, rows], out).expect("sizes"),
            Op::Transpose { x, rows, cols },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        if start + len > cols {
            return Err(Error::Shape(format!("slice {start}+{len} of {cols} cols")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols {
                x,
                start,
                len,
                cols,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).matrix_dims().0;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims();
            if r != rows {
                return Err(Error::Shape("concat_cols row mismatch".into()));
            }
            dims.push((p, c));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for &(p, c) in &dims {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols { parts: dims },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).matrix_dims().1;
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).matrix_dims().1 != cols {
                return Err(Error::Shape("concat_rows col mismatch".into()));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Shape(format!("gather row {i} of {rows}")));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// `Σ_i weights[i] · (−ln softmax(logits_i)[targets[i]])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.value(logits).matrix_dims();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape(format!(
                "cross entropy: {rows} rows, {} targets",
                targets.len()
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for r in 0..rows {
            if targets[r] >= cols {
                return Err(Error::Argument(format!(
                    "target {} out of {cols} classes",
                    targets[r]
                )));
            }
            let row = &mut probs[r * cols..(r + 1) * cols];
            let lr = &self.nodes[logits.0].value.data()[r * cols..(r + 1) * cols];
            let m = lr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + lr.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += weights[r] * (lse - lr[targets[r]]);
            softmax_in_place(row);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-row mean binary cross-entropy of `σ(logits)` against constant targets.
    pub fn bce_with_logits_rows(&mut self, logits: Var, targets: Arc<Vec<T>>) -> Result<Var> {
        let (rows, cols) = self.value(logits).matrix_dims();
        if targets.len() != rows * cols {
            return Err(Error::Shape("bce targets".into()));
        }
        let x = self.value(logits).data();
        let inv = T::one() / T::from_usize_lossy(cols.max(1));
        let out: Vec<T> = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| bce_logit(x[r * cols + c], targets[r * cols + c]))
                    .sum::<T>()
                    * inv
            })
            .collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::BceWithLogitsRows { logits, targets },
            ng,
        ))
    }

    /// Per-row Dice loss `1 − 2Σpg / (Σp + Σg)` with `p = σ(logits)`.
    pub fn dice_rows(&mut self, logits: Var, targets: Arc<Vec<T>>) -> Result<Var> {
        let (rows, cols) = self.value(logits).matrix_dims();
        if targets.len() != rows * cols {
            return Err(Error::Shape("dice targets".into()));
        }
        let eps = T::c(1e-8);
        let probs: Vec<T> = self
            .value(logits)
            .data()
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let mut num = vec![T::zero(); rows];
        let mut den = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let p = &probs[r * cols..(r + 1) * cols];
            let g = &targets[r * cols..(r + 1) * cols];
            let mut inter = T::zero();
            let mut s = T::zero();
            for c in 0..cols {
                inter += p[c] * g[c];
                s += p[c] + g[c];
            }
            num[r] = T::c(2.0) * inter;
            den[r] = s + eps;
            out[r] = T::one() - num[r] / den[r];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::DiceRows {
                logits,
                targets,
                probs,
                num,
                den,
            },
            ng,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        let mut out = self.value(x).clone();
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n <= T::zero() {
                return Err(Error::Data(format!("zero-norm row {r}")));
            }
            norms[r] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.shape(loss).to_vec(), T::one());
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), g).expect("grad shape"));
            }
        }
    }

    fn backprop(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dy = gy.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.ng(a) {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        T::gemm(k, n, m, T::one(), bv, tb, dy, true, T::zero(), &mut da);
                    } else {
                        T::gemm(m, n, k, T::one(), dy, false, bv, !tb, T::zero(), &mut da);
                    }
                    self.acc(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        T::gemm(n, m, k, T::one(), dy, true, av, ta, T::zero(), &mut db);
                    } else {
                        T::gemm(k, m, n, T::one(), av, !ta, dy, false, T::zero(), &mut db);
                    }
                    self.acc(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, dy.to_vec());
                self.acc(grads, b, dy.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, dy.to_vec());
                self.acc(grads, b, dy.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.ng(a) {
                    self.acc(grads, a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.ng(b) {
                    self.acc(grads, b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            &Op::Scale(a, s) => self.acc(grads, a, dy.iter().map(|&g| g * s).collect()),
            &Op::AddRowBias(x, bias) => {
                self.acc(grads, x, dy.to_vec());
                if self.ng(bias) {
                    let cols = self.value(bias).len();
                    let mut db = vec![T::zero(); cols];
                    for row in dy.chunks(cols) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.acc(grads, bias, db);
                }
            }
            &Op::AddChannelBias(x, bias) => {
                self.acc(grads, x, dy.to_vec());
                if self.ng(bias) {
                    let c = self.value(bias).len();
                    let per = dy.len() / c.max(1);
                    let db = (0..c)
                        .map(|ch| dy[ch * per..(ch + 1) * per].iter().copied().sum())
                        .collect();
                    self.acc(grads, bias, db);
                }
            }
            &Op::AddScalar(x, s) => {
                self.acc(grads, x, dy.to_vec());
                self.acc(grads, s, vec![dy.iter().copied().sum()]);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                self.acc(
                    grads,
                    x,
                    dy.iter()
                        .zip(xv)
                        .map(|(&g, &v)| g * gelu_parts(v).1)
                        .collect(),
                );
            }
            Op::SoftmaxRows { x, .. } => {
                let y = node.value.data();
                let cols = node.value.matrix_dims().1;
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / cols.max(1) {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &dy[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.matrix_dims().1;
                let rows = rstd.len();
                let g = self.value(*gamma).data();
                let n = T::from_usize_lossy(cols);
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..cols {
                        dgamma[c] += dyr[c] * xh[c];
                        dbeta[c] += dyr[c];
                        let dxh = dyr[c] * g[c];
                        s1 += dxh;
                        s2 += dxh * xh[c];
                    }
                    for c in 0..cols {
                        let dxh = dyr[c] * g[c];
                        dx[r * cols + c] = rstd[r] / n * (n * dxh - s1 - xh[c] * s2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.out_h() * geom.out_w();
                let kk = geom.c_in * geom.kernel * geom.kernel;
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); geom.c_out * kk];
                    T::gemm(
                        geom.c_out,
                        p,
                        kk,
                        T::one(),
                        dy,
                        false,
                        cols,
                        true,
                        T::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, dw);
                }
                if self.ng(*b) {
                    let db = (0..geom.c_out)
                        .map(|co| dy[co * p..(co + 1) * p].iter().copied().sum())
                        .collect();
                    self.acc(grads, *b, db);
                }
                if self.ng(*x) {
                    let mut dcols = vec![T::zero(); kk * p];
                    T::gemm(
                        kk,
                        geom.c_out,
                        p,
                        T::one(),
                        self.value(*w).data(),
                        true,
                        dy,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    self.acc(grads, *x, col2im(&dcols, geom));
                }
            }
            &Op::Upsample { x, c, h, w, factor } => {
                self.acc(grads, x, upsample_adjoint(dy, c, h, w, factor));
            }
            Op::Warp { x, plan, channels } => {
                self.acc(grads, *x, plan.adjoint(dy, *channels));
            }
            Op::CosineWeight {
                a,
                b,
                channels,
                active,
                na,
                nb,
            } => {
                let eps = T::c(1e-8);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let w = node.value.data();
                let p = active.len();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..p {
                    if !active[i] {
                        continue;
                    }
                    let d = na[i] * nb[i] + eps;
                    // w = s / d, s = <a,b>
                    let s = w[i] * d;
                    let g = dy[i];
                    for c in 0..*channels {
                        let j = c * p + i;
                        da[j] = g * (bv[j] / d - s / (d * d) * nb[i] * av[j] / na[i]);
                        db[j] = g * (av[j] / d - s / (d * d) * na[i] * bv[j] / nb[i]);
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            &Op::MulChannels { x, w, channels } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let p = wv.len();
                if self.ng(x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for c in 0..channels {
                        for i in 0..p {
                            dx[c * p + i] = dy[c * p + i] * wv[i];
                        }
                    }
                    self.acc(grads, x, dx);
                }
                if self.ng(w) {
                    let mut dw = vec![T::zero(); p];
                    for c in 0..channels {
                        for i in 0..p {
                            dw[i] += dy[c * p + i] * xv[c * p + i];
                        }
                    }
                    self.acc(grads, w, dw);
                }
            }
            &Op::Reshape(x) => self.acc(grads, x, dy.to_vec()),
            &Op::Transpose { x, rows, cols } => {
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = dy[c * rows + r];
                    }
                }
                self.acc(grads, x, dx);
            }
            &Op::SliceCols {
                x,
                start,
                len,
                cols,
            } => {
                let rows = dy.len() / len.max(1);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.acc(grads, x, dx);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = dy.len() / total.max(1);
                let mut off = 0;
                for &(p, c) in parts {
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + off..r * total + off + c]);
                    }
                    self.acc(grads, p, dp);
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, dy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = node.value.matrix_dims().1;
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += dy[k * cols + c];
                    }
                }
                self.acc(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.acc(grads, x, vec![dy[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let cols = self.value(*logits).matrix_dims().1;
                let g = dy[0];
                let mut dx = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dx[r * cols..(r + 1) * cols];
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= w * g);
                }
                self.acc(grads, *logits, dx);
            }
            Op::BceWithLogitsRows { logits, targets } => {
                let x = self.value(*logits).data();
                let cols = self.value(*logits).matrix_dims().1;
                let inv = T::one() / T::from_usize_lossy(cols.max(1));
                let dx = x
                    .iter()
                    .zip(targets.iter())
                    .enumerate()
                    .map(|(j, (&v, &t))| dy[j / cols] * inv * (sigmoid(v) - t))
                    .collect();
                self.acc(grads, *logits, dx);
            }
            Op::DiceRows {
                logits,
                targets,
                probs,
                num,
                den,
            } => {
                let cols = self.value(*logits).matrix_dims().1;
                let dx = probs
                    .iter()
                    .zip(targets.iter())
                    .enumerate()
                    .map(|(j, (&p, &g))| {
                        let r = j / cols;
                        let dl_dp = -(T::c(2.0) * g * den[r] - num[r]) / (den[r] * den[r]);
                        dy[r] * dl_dp * p * (T::one() - p)
                    })
                    .collect();
                self.acc(grads, *logits, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let cols = node.value.matrix_dims().1;
                let mut dx = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &dy[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - yr[c] * dot) / n;
                    }
                }
                self.acc(grads, *x, dx);
            }
        }
    }
}
