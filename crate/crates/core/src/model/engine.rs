//! Pre-norm transformer layers with a hand-written reverse pass.
//!
//! Everything here works on compact token sets: masked tokens are gathered
//! out before a block runs. For the surviving tokens this is exactly the
//! masked computation, since masked keys would receive zero attention weight
//! and every other op is per-token.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{EncoderSlots, LayerSlots};
use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Additive nudge applied to one post-softmax attention probability. Only used
/// to probe gradients numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnNudge {
    pub layer: usize,
    pub head: usize,
    /// Compact (gathered) row/column indices.
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

pub(crate) struct Ctx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub nudge: Option<AttnNudge>,
}

impl Ctx<'_> {
    pub fn inference() -> Ctx<'static> {
        Ctx {
            dropout: 0.0,
            rng: None,
            nudge: None,
        }
    }

    fn dropout_mask<T: Real>(&mut self, len: usize) -> Option<Vec<T>> {
        let p = self.dropout;
        let rng = self.rng.as_deref_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - p));
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], n: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let eps = T::of(LN_EPS);
    let dn = T::of(d as f64);
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            y[i * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, and into `dg`/`db` when given.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    g: &[T],
    n: usize,
    d: usize,
    mut dgb: Option<(&mut [T], &mut [T])>,
    dx: &mut [T],
) {
    let dn = T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        if let Some((dg, db)) = dgb.as_mut() {
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
                db[c] += dyr[c];
            }
        }
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        let r = cache.rstd[i];
        for c in 0..d {
            dx[i * d + c] += r * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn col_sum_into<T: Real>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks(db.len()) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

/// `y = x @ W + b` for `x: n x din`, `W: din x dout`.
fn linear<T: Real>(x: &[T], n: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    matmul(n, din, dout, x, false, w, false, T::zero(), &mut y);
    add_bias(&mut y, b);
    y
}

/// Returns `dx` and accumulates weight/bias gradients when requested.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    dout: usize,
    grads: Option<&mut [Tensor<T>]>,
    slot: (usize, usize),
) -> Vec<T> {
    if let Some(g) = grads {
        matmul(din, n, dout, x, true, dy, false, T::one(), &mut g[slot.0].data);
        col_sum_into(dy, &mut g[slot.1].data);
    }
    let mut dx = vec![T::zero(); n * din];
    matmul(n, dout, din, dy, false, w, true, T::zero(), &mut dx);
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    /// Per-head projections, `[head][token][dh]`.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Post-softmax probabilities, `[head][query][key]`.
    pub attn: Vec<T>,
    o: Vec<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    gact: Vec<T>,
    drop2: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub d: usize,
    pub heads: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

fn check_finite<T: Real>(x: &[T], layer: usize, block: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            block: block.to_string(),
            layer,
        })
    }
}

fn softmax_rows<T: Real>(s: &mut [T], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Real>(
    p: &[Tensor<T>],
    s: &LayerSlots,
    dims: Dims,
    x: &mut [T],
    n: usize,
    layer: usize,
    ctx: &mut Ctx<'_>,
) -> LayerCache<T> {
    let d = dims.d;
    let h = dims.heads;
    let dh = dims.dh();
    let (h1, ln1) = layer_norm(x, n, d, &p[s.ln1.0].data, &p[s.ln1.1].data);
    let qkv = linear(&h1, n, d, &p[s.qkv.0].data, &p[s.qkv.1].data, 3 * d);

    let mut q = vec![T::zero(); h * n * dh];
    let mut k = vec![T::zero(); h * n * dh];
    let mut v = vec![T::zero(); h * n * dh];
    for i in 0..n {
        let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
        for hh in 0..h {
            let dst = (hh * n + i) * dh;
            q[dst..dst + dh].copy_from_slice(&row[hh * dh..(hh + 1) * dh]);
            k[dst..dst + dh].copy_from_slice(&row[d + hh * dh..d + (hh + 1) * dh]);
            v[dst..dst + dh].copy_from_slice(&row[2 * d + hh * dh..2 * d + (hh + 1) * dh]);
        }
    }

    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut attn = vec![T::zero(); h * n * n];
    let mut o = vec![T::zero(); n * d];
    let mut oh = vec![T::zero(); n * dh];
    for hh in 0..h {
        let qh = &q[hh * n * dh..(hh + 1) * n * dh];
        let kh = &k[hh * n * dh..(hh + 1) * n * dh];
        let vh = &v[hh * n * dh..(hh + 1) * n * dh];
        let a = &mut attn[hh * n * n..(hh + 1) * n * n];
        matmul(n, dh, n, qh, false, kh, true, T::zero(), a);
        a.iter_mut().for_each(|e| *e *= scale);
        softmax_rows(a, n);
        if let Some(nd) = ctx.nudge {
            if nd.layer == layer && nd.head == hh && nd.row < n && nd.col < n {
                a[nd.row * n + nd.col] += T::of(nd.delta);
            }
        }
        matmul(n, n, dh, a, false, vh, false, T::zero(), &mut oh);
        for i in 0..n {
            o[i * d + hh * dh..i * d + (hh + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
        }
    }

    let mut a_out = linear(&o, n, d, &p[s.proj.0].data, &p[s.proj.1].data, d);
    let drop1 = ctx.dropout_mask::<T>(n * d);
    if let Some(m) = &drop1 {
        a_out.iter_mut().zip(m).for_each(|(v, &mm)| *v *= mm);
    }
    x.iter_mut().zip(&a_out).for_each(|(xv, &av)| *xv += av);

    let (h2, ln2) = layer_norm(x, n, d, &p[s.ln2.0].data, &p[s.ln2.1].data);
    let f = 4 * d;
    let f1 = linear(&h2, n, d, &p[s.fc1.0].data, &p[s.fc1.1].data, f);
    let gact: Vec<T> = f1.iter().map(|&u| gelu(u)).collect();
    let mut f2 = linear(&gact, n, f, &p[s.fc2.0].data, &p[s.fc2.1].data, d);
    let drop2 = ctx.dropout_mask::<T>(n * d);
    if let Some(m) = &drop2 {
        f2.iter_mut().zip(m).for_each(|(v, &mm)| *v *= mm);
    }
    x.iter_mut().zip(&f2).for_each(|(xv, &fv)| *xv += fv);

    LayerCache {
        ln1,
        h1,
        q,
        k,
        v,
        attn,
        o,
        drop1,
        ln2,
        h2,
        f1,
        gact,
        drop2,
    }
}

/// Reverse pass through one layer. `dx` holds the gradient w.r.t. the layer
/// output on entry and w.r.t. its input on exit. Returns ∂/∂A per head.
fn layer_backward<T: Real>(
    p: &[Tensor<T>],
    s: &LayerSlots,
    dims: Dims,
    c: &LayerCache<T>,
    dx: &mut [T],
    n: usize,
    mut grads: Option<&mut [Tensor<T>]>,
) -> Vec<T> {
    let d = dims.d;
    let h = dims.heads;
    let dh = dims.dh();
    let f = 4 * d;

    // Feed-forward branch.
    let mut df2 = dx.to_vec();
    if let Some(m) = &c.drop2 {
        df2.iter_mut().zip(m).for_each(|(v, &mm)| *v *= mm);
    }
    let mut dg = linear_backward(&df2, &c.gact, n, f, &p[s.fc2.0].data, d, grads.as_deref_mut(), s.fc2);
    dg.iter_mut().zip(&c.f1).for_each(|(v, &u)| *v *= gelu_grad(u));
    let dh2 = linear_backward(&dg, &c.h2, n, d, &p[s.fc1.0].data, f, grads.as_deref_mut(), s.fc1);
    {
        let dgb = grads.as_deref_mut().map(|g| split2(g, s.ln2));
        layer_norm_backward(&dh2, &c.ln2, &p[s.ln2.0].data, n, d, dgb, dx);
    }

    // Attention branch.
    let mut da = dx.to_vec();
    if let Some(m) = &c.drop1 {
        da.iter_mut().zip(m).for_each(|(v, &mm)| *v *= mm);
    }
    let d_o = linear_backward(&da, &c.o, n, d, &p[s.proj.0].data, d, grads.as_deref_mut(), s.proj);

    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut grad_attn = vec![T::zero(); h * n * n];
    let mut dqkv = vec![T::zero(); n * 3 * d];
    let mut doh = vec![T::zero(); n * dh];
    let mut ds = vec![T::zero(); n * n];
    let mut tmp = vec![T::zero(); n * dh];
    for hh in 0..h {
        for i in 0..n {
            doh[i * dh..(i + 1) * dh].copy_from_slice(&d_o[i * d + hh * dh..i * d + (hh + 1) * dh]);
        }
        let qh = &c.q[hh * n * dh..(hh + 1) * n * dh];
        let kh = &c.k[hh * n * dh..(hh + 1) * n * dh];
        let vh = &c.v[hh * n * dh..(hh + 1) * n * dh];
        let a = &c.attn[hh * n * n..(hh + 1) * n * n];
        let ga = &mut grad_attn[hh * n * n..(hh + 1) * n * n];
        // dA = dO V^T
        matmul(n, dh, n, &doh, false, vh, true, T::zero(), ga);
        // dV = A^T dO
        matmul(n, n, dh, a, true, &doh, false, T::zero(), &mut tmp);
        scatter_head(&mut dqkv, &tmp, n, d, 2 * d + hh * dh, dh);
        // softmax backward
        for i in 0..n {
            let ar = &a[i * n..(i + 1) * n];
            let gr = &ga[i * n..(i + 1) * n];
            let dot = ar.iter().zip(gr).map(|(&x, &y)| x * y).sum::<T>();
            for j in 0..n {
                ds[i * n + j] = ar[j] * (gr[j] - dot) * scale;
            }
        }
        // dQ = dS K, dK = dS^T Q
        matmul(n, n, dh, &ds, false, kh, false, T::zero(), &mut tmp);
        scatter_head(&mut dqkv, &tmp, n, d, hh * dh, dh);
        matmul(n, n, dh, &ds, true, qh, false, T::zero(), &mut tmp);
        scatter_head(&mut dqkv, &tmp, n, d, d + hh * dh, dh);
    }
    let dh1 = linear_backward(&dqkv, &c.h1, n, d, &p[s.qkv.0].data, 3 * d, grads.as_deref_mut(), s.qkv);
    let dgb = grads.map(|g| split2(g, s.ln1));
    layer_norm_backward(&dh1, &c.ln1, &p[s.ln1.0].data, n, d, dgb, dx);
    grad_attn
}

fn scatter_head<T: Real>(dst: &mut [T], src: &[T], n: usize, d: usize, off: usize, dh: usize) {
    for i in 0..n {
        let base = i * 3 * d + off;
        dst[base..base + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Two distinct mutable parameter slots (gamma, beta).
fn split2<T>(g: &mut [Tensor<T>], slot: (usize, usize)) -> (&mut [T], &mut [T]) {
    let (a, b) = slot;
    assert!(a < b, "slot order");
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderCache<T> {
    pub n: usize,
    pub layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    pub out: Vec<T>,
}

pub(crate) fn encoder_forward<T: Real>(
    p: &[Tensor<T>],
    slots: &EncoderSlots,
    dims: Dims,
    mut x: Vec<T>,
    n: usize,
    ctx: &mut Ctx<'_>,
    block: &str,
) -> Result<EncoderCache<T>> {
    let mut layers = Vec::with_capacity(slots.layers.len());
    for (l, s) in slots.layers.iter().enumerate() {
        let cache = layer_forward(p, s, dims, &mut x, n, l, ctx);
        check_finite(&x, l, block)?;
        layers.push(cache);
    }
    let (out, final_ln) = layer_norm(&x, n, dims.d, &p[slots.norm.0].data, &p[slots.norm.1].data);
    check_finite(&out, slots.layers.len(), block)?;
    Ok(EncoderCache {
        n,
        layers,
        final_ln,
        out,
    })
}

/// Returns the input gradient and, per layer, ∂/∂A stacked over heads.
pub(crate) fn encoder_backward<T: Real>(
    p: &[Tensor<T>],
    slots: &EncoderSlots,
    dims: Dims,
    cache: &EncoderCache<T>,
    dout: &[T],
    mut grads: Option<&mut [Tensor<T>]>,
) -> (Vec<T>, Vec<Vec<T>>) {
    let n = cache.n;
    let d = dims.d;
    let mut dx = vec![T::zero(); n * d];
    {
        let dgb = grads.as_deref_mut().map(|g| split2(g, slots.norm));
        layer_norm_backward(dout, &cache.final_ln, &p[slots.norm.0].data, n, d, dgb, &mut dx);
    }
    let mut grad_attn = vec![Vec::new(); slots.layers.len()];
    for (l, s) in slots.layers.iter().enumerate().rev() {
        grad_attn[l] = layer_backward(p, s, dims, &cache.layers[l], &mut dx, n, grads.as_deref_mut());
    }
    (dx, grad_attn)
}
