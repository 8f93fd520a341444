//! Forward and backward kernels on raw slices. Layouts are channel-last:
//! sequences are `(batch, time, channels)`, images `(batch, freq, time, channels)`.

use rayon::prelude::*;

use crate::scalar::Real;

// ---------------------------------------------------------------- conv1d

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv1dDims {
    pub batch: usize,
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

fn im2col_1d<T: Real>(x: &[T], d: &Conv1dDims, cols: &mut [T]) {
    let pad = d.kernel / 2;
    let row = d.kernel * d.c_in;
    for t in 0..d.len {
        let dst = &mut cols[t * row..(t + 1) * row];
        for k in 0..d.kernel {
            let src_t = t as isize + k as isize - pad as isize;
            let seg = &mut dst[k * d.c_in..(k + 1) * d.c_in];
            if src_t < 0 || src_t >= d.len as isize {
                seg.iter_mut().for_each(|v| *v = T::zero());
            } else {
                let s = src_t as usize * d.c_in;
                seg.copy_from_slice(&x[s..s + d.c_in]);
            }
        }
    }
}

fn col2im_1d<T: Real>(cols: &[T], d: &Conv1dDims, dx: &mut [T]) {
    let pad = d.kernel / 2;
    let row = d.kernel * d.c_in;
    for t in 0..d.len {
        let src = &cols[t * row..(t + 1) * row];
        for k in 0..d.kernel {
            let dst_t = t as isize + k as isize - pad as isize;
            if dst_t >= 0 && dst_t < d.len as isize {
                let s = dst_t as usize * d.c_in;
                for (o, &v) in dx[s..s + d.c_in].iter_mut().zip(&src[k * d.c_in..(k + 1) * d.c_in]) {
                    *o += v;
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, d: Conv1dDims) -> Vec<T> {
    let in_len = d.len * d.c_in;
    let out_len = d.len * d.c_out;
    let mut out = vec![T::zero(); d.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, ob)| {
        let mut cols = vec![T::zero(); d.len * d.kernel * d.c_in];
        im2col_1d(&x[b * in_len..(b + 1) * in_len], &d, &mut cols);
        if let Some(bias) = bias {
            for row in ob.chunks_mut(d.c_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(false, false, d.len, d.c_out, d.kernel * d.c_in, T::one(), &cols, w, beta, ob);
    });
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: Conv1dDims,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let in_len = d.len * d.c_in;
    let out_len = d.len * d.c_out;
    let krow = d.kernel * d.c_in;
    let mut dw = vec![T::zero(); krow * d.c_out];
    let mut db = vec![T::zero(); d.c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); d.len * krow];
    for b in 0..d.batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        im2col_1d(&x[b * in_len..(b + 1) * in_len], &d, &mut cols);
        T::gemm(true, false, krow, d.c_out, d.len, T::one(), &cols, dyb, T::one(), &mut dw);
        for row in dyb.chunks(d.c_out) {
            for (a, &v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(false, true, d.len, krow, d.c_out, T::one(), dyb, w, T::zero(), &mut cols);
            col2im_1d(&cols, &d, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub freq: usize,
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kf: usize,
    pub kt: usize,
}

impl Conv2dDims {
    fn krow(&self) -> usize {
        self.kf * self.kt * self.c_in
    }
}

/// im2col for the output row `f` of one sample: `(len, kf * kt * c_in)`.
fn im2col_2d_row<T: Real>(x: &[T], d: &Conv2dDims, f: usize, cols: &mut [T]) {
    let (pf, pt) = (d.kf / 2, d.kt / 2);
    let krow = d.krow();
    for t in 0..d.len {
        let dst = &mut cols[t * krow..(t + 1) * krow];
        for a in 0..d.kf {
            let sf = f as isize + a as isize - pf as isize;
            for c in 0..d.kt {
                let st = t as isize + c as isize - pt as isize;
                let seg = &mut dst[(a * d.kt + c) * d.c_in..(a * d.kt + c + 1) * d.c_in];
                if sf < 0 || sf >= d.freq as isize || st < 0 || st >= d.len as isize {
                    seg.iter_mut().for_each(|v| *v = T::zero());
                } else {
                    let s = (sf as usize * d.len + st as usize) * d.c_in;
                    seg.copy_from_slice(&x[s..s + d.c_in]);
                }
            }
        }
    }
}

fn col2im_2d_row<T: Real>(cols: &[T], d: &Conv2dDims, f: usize, dx: &mut [T]) {
    let (pf, pt) = (d.kf / 2, d.kt / 2);
    let krow = d.krow();
    for t in 0..d.len {
        let src = &cols[t * krow..(t + 1) * krow];
        for a in 0..d.kf {
            let sf = f as isize + a as isize - pf as isize;
            if sf < 0 || sf >= d.freq as isize {
                continue;
            }
            for c in 0..d.kt {
                let st = t as isize + c as isize - pt as isize;
                if st < 0 || st >= d.len as isize {
                    continue;
                }
                let s = (sf as usize * d.len + st as usize) * d.c_in;
                let seg = &src[(a * d.kt + c) * d.c_in..(a * d.kt + c + 1) * d.c_in];
                for (o, &v) in dx[s..s + d.c_in].iter_mut().zip(seg) {
                    *o += v;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, d: Conv2dDims) -> Vec<T> {
    let in_len = d.freq * d.len * d.c_in;
    let row_out = d.len * d.c_out;
    let mut out = vec![T::zero(); d.batch * d.freq * row_out];
    out.par_chunks_mut(d.freq * row_out).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let mut cols = vec![T::zero(); d.len * d.krow()];
        for f in 0..d.freq {
            im2col_2d_row(xb, &d, f, &mut cols);
            let orow = &mut ob[f * row_out..(f + 1) * row_out];
            if let Some(bias) = bias {
                for r in orow.chunks_mut(d.c_out) {
                    r.copy_from_slice(bias);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(false, false, d.len, d.c_out, d.krow(), T::one(), &cols, w, beta, orow);
        }
    });
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: Conv2dDims,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let in_len = d.freq * d.len * d.c_in;
    let row_out = d.len * d.c_out;
    let krow = d.krow();
    let mut dw = vec![T::zero(); krow * d.c_out];
    let mut db = vec![T::zero(); d.c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); d.len * krow];
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for f in 0..d.freq {
            let off = (b * d.freq + f) * row_out;
            let dyr = &dy[off..off + row_out];
            im2col_2d_row(xb, &d, f, &mut cols);
            T::gemm(true, false, krow, d.c_out, d.len, T::one(), &cols, dyr, T::one(), &mut dw);
            for r in dyr.chunks(d.c_out) {
                for (a, &v) in db.iter_mut().zip(r) {
                    *a += v;
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(false, true, d.len, krow, d.c_out, T::one(), dyr, w, T::zero(), &mut cols);
                col2im_2d_row(&cols, &d, f, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------- pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Pool pairs along the middle axis of an `(outer, len, inner)` view.
/// Returns the output and, for max pooling, the selected input index per output.
pub(crate) fn pool_forward<T: Real>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<usize>) {
    let out_len = len / 2;
    let mut out = Vec::with_capacity(outer * out_len * inner);
    let mut arg = Vec::new();
    let half = T::lit(0.5);
    for o in 0..outer {
        for t in 0..out_len {
            let a = (o * len + 2 * t) * inner;
            let b = a + inner;
            for c in 0..inner {
                let (va, vb) = (x[a + c], x[b + c]);
                match kind {
                    PoolKind::Avg => out.push((va + vb) * half),
                    PoolKind::Max => {
                        if vb > va {
                            out.push(vb);
                            arg.push(b + c);
                        } else {
                            out.push(va);
                            arg.push(a + c);
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool_backward<T: Real>(
    dy: &[T],
    in_size: usize,
    outer: usize,
    len: usize,
    inner: usize,
    kind: PoolKind,
    arg: &[usize],
) -> Vec<T> {
    let mut dx = vec![T::zero(); in_size];
    match kind {
        PoolKind::Max => {
            for (&i, &g) in arg.iter().zip(dy) {
                dx[i] += g;
            }
        }
        PoolKind::Avg => {
            let half = T::lit(0.5);
            let out_len = len / 2;
            for o in 0..outer {
                for t in 0..out_len {
                    let a = (o * len + 2 * t) * inner;
                    let src = (o * out_len + t) * inner;
                    for c in 0..inner {
                        let g = dy[src + c] * half;
                        dx[a + c] += g;
                        dx[a + inner + c] += g;
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- batchnorm

/// Statistics are kept per `(g1, g2)` pair and reduced over the `outer` and
/// `span` axes of an `(outer, g1, span, g2)` view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayout {
    pub outer: usize,
    pub g1: usize,
    pub span: usize,
    pub g2: usize,
}

impl BnLayout {
    pub fn groups(&self) -> usize {
        self.g1 * self.g2
    }

    pub fn count(&self) -> usize {
        self.outer * self.span
    }

    #[inline]
    fn for_each_index(&self, mut f: impl FnMut(usize, usize)) {
        // f(flat index, group index)
        let mut idx = 0;
        for _ in 0..self.outer {
            for i1 in 0..self.g1 {
                for _ in 0..self.span {
                    for i2 in 0..self.g2 {
                        f(idx, i1 * self.g2 + i2);
                        idx += 1;
                    }
                }
            }
        }
    }

    pub(crate) fn group_sums<T: Real>(&self, x: &[T]) -> Vec<f64> {
        let mut s = vec![0.0; self.groups()];
        self.for_each_index(|i, g| s[g] += x[i].to_f64_lossy());
        s
    }

    pub(crate) fn group_dot<T: Real>(&self, a: &[T], b: &[T]) -> Vec<f64> {
        let mut s = vec![0.0; self.groups()];
        self.for_each_index(|i, g| s[g] += a[i].to_f64_lossy() * b[i].to_f64_lossy());
        s
    }

    pub(crate) fn map_groups<T: Real>(&self, x: &[T], mut f: impl FnMut(T, usize) -> T) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        self.for_each_index(|i, g| out[i] = f(x[i], g));
        out
    }
}

pub const BN_EPSILON: f64 = 1e-8;
pub const BN_MOMENTUM: f64 = 0.99;

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Training-mode forward using batch statistics.
pub(crate) fn bn_train_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T], l: BnLayout) -> BnForward<T> {
    let n = l.count() as f64;
    let mean: Vec<f64> = l.group_sums(x).into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; l.groups()];
    l.for_each_index(|i, g| {
        let d = x[i].to_f64_lossy() - mean[g];
        var[g] += d * d;
    });
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + BN_EPSILON).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
    let xhat = l.map_groups(x, |v, g| (v - mean_t[g]) * inv_std[g]);
    let y = l.map_groups(&xhat, |v, g| gamma[g] * v + beta[g]);
    BnForward {
        y,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    }
}

/// Inference-mode forward with fixed statistics.
pub(crate) fn bn_infer_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    l: BnLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::lit(BN_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat = l.map_groups(x, |v, g| (v - mean[g]) * inv_std[g]);
    let y = l.map_groups(&xhat, |v, g| gamma[g] * v + beta[g]);
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    l: BnLayout,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dbeta: Vec<T> = l.group_sums(dy).into_iter().map(T::lit).collect();
    let dgamma: Vec<T> = l.group_dot(dy, xhat).into_iter().map(T::lit).collect();
    let dx = if batch_stats {
        let n = T::lit(l.count() as f64);
        // dxhat = dy * gamma, so its group sums are gamma * dbeta and gamma * dgamma
        let mut dx = vec![T::zero(); dy.len()];
        l.for_each_index(|i, g| {
            let k = gamma[g] * inv_std[g] / n;
            dx[i] = k * (n * dy[i] - dbeta[g] - xhat[i] * dgamma[g]);
        });
        dx
    } else {
        l.map_groups(dy, |v, g| v * gamma[g] * inv_std[g])
    };
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------- lstm

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LstmDims {
    pub batch: usize,
    pub len: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDims {
    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.len).rev())
        } else {
            Box::new(0..self.len)
        }
    }
}

/// Saved activations per sample: gates `(len, 4H)` holding activated
/// `[i, f, g, o]`, cell states `(len, H)`.
pub(crate) struct LstmCache<T> {
    pub gates: Vec<T>,
    pub cells: Vec<T>,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Returns hidden states `(batch, len, H)` and the cache.
pub(crate) fn lstm_forward<T: Real>(
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    d: LstmDims,
) -> (Vec<T>, LstmCache<T>) {
    let h4 = 4 * d.hidden;
    let hh = d.hidden;
    let mut out = vec![T::zero(); d.batch * d.len * hh];
    let mut gates = vec![T::zero(); d.batch * d.len * h4];
    let mut cells = vec![T::zero(); d.batch * d.len * hh];
    out.par_chunks_mut(d.len * hh)
        .zip(gates.par_chunks_mut(d.len * h4))
        .zip(cells.par_chunks_mut(d.len * hh))
        .enumerate()
        .for_each(|(b, ((ob, gb), cb))| {
            let xb = &x[b * d.len * d.input..(b + 1) * d.len * d.input];
            for row in gb.chunks_mut(h4) {
                row.copy_from_slice(bias);
            }
            T::gemm(false, false, d.len, h4, d.input, T::one(), xb, w_ih, T::one(), gb);
            let mut h_prev = vec![T::zero(); hh];
            let mut c_prev = vec![T::zero(); hh];
            let mut z = vec![T::zero(); h4];
            for t in d.order() {
                let zrow = &mut gb[t * h4..(t + 1) * h4];
                z.copy_from_slice(zrow);
                T::gemm(false, false, 1, h4, hh, T::one(), &h_prev, w_hh, T::one(), &mut z);
                for j in 0..hh {
                    let i_g = sigmoid(z[j]);
                    let f_g = sigmoid(z[hh + j]);
                    let g_g = z[2 * hh + j].tanh();
                    let o_g = sigmoid(z[3 * hh + j]);
                    let c = f_g * c_prev[j] + i_g * g_g;
                    let h = o_g * c.tanh();
                    zrow[j] = i_g;
                    zrow[hh + j] = f_g;
                    zrow[2 * hh + j] = g_g;
                    zrow[3 * hh + j] = o_g;
                    cb[t * hh + j] = c;
                    ob[t * hh + j] = h;
                    c_prev[j] = c;
                    h_prev[j] = h;
                }
            }
        });
    (out, LstmCache { gates, cells })
}

pub(crate) struct LstmGrads<T> {
    pub dx: Vec<T>,
    pub dw_ih: Vec<T>,
    pub dw_hh: Vec<T>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward<T: Real>(
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    hidden: &[T],
    cache: &LstmCache<T>,
    dy: &[T],
    d: LstmDims,
) -> LstmGrads<T> {
    let h4 = 4 * d.hidden;
    let hh = d.hidden;
    let per_sample: Vec<LstmGrads<T>> = (0..d.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * d.len * d.input..(b + 1) * d.len * d.input];
            let hb = &hidden[b * d.len * hh..(b + 1) * d.len * hh];
            let gb = &cache.gates[b * d.len * h4..(b + 1) * d.len * h4];
            let cb = &cache.cells[b * d.len * hh..(b + 1) * d.len * hh];
            let dyb = &dy[b * d.len * hh..(b + 1) * d.len * hh];
            let mut dz = vec![T::zero(); d.len * h4];
            // h_prev per step in time order (zero at the first processed step)
            let mut h_prev_mat = vec![T::zero(); d.len * hh];
            let order: Vec<usize> = d.order().collect();
            for w in order.windows(2) {
                let (prev, cur) = (w[0], w[1]);
                h_prev_mat[cur * hh..(cur + 1) * hh].copy_from_slice(&hb[prev * hh..(prev + 1) * hh]);
            }
            let mut dh_next = vec![T::zero(); hh];
            let mut dc_next = vec![T::zero(); hh];
            for (pos, &t) in order.iter().enumerate().rev() {
                let c_prev: Option<&[T]> = (pos > 0).then(|| {
                    let p = order[pos - 1];
                    &cb[p * hh..(p + 1) * hh]
                });
                let g = &gb[t * h4..(t + 1) * h4];
                let dzr = &mut dz[t * h4..(t + 1) * h4];
                for j in 0..hh {
                    let (ig, fg, gg, og) = (g[j], g[hh + j], g[2 * hh + j], g[3 * hh + j]);
                    let c = cb[t * hh + j];
                    let tc = c.tanh();
                    let dh = dyb[t * hh + j] + dh_next[j];
                    let d_o = dh * tc;
                    let dc = dh * og * (T::one() - tc * tc) + dc_next[j];
                    let cp = c_prev.map_or(T::zero(), |cp| cp[j]);
                    dzr[j] = dc * gg * ig * (T::one() - ig);
                    dzr[hh + j] = dc * cp * fg * (T::one() - fg);
                    dzr[2 * hh + j] = dc * ig * (T::one() - gg * gg);
                    dzr[3 * hh + j] = d_o * og * (T::one() - og);
                    dc_next[j] = dc * fg;
                }
                T::gemm(false, true, 1, hh, h4, T::one(), dzr, w_hh, T::zero(), &mut dh_next);
            }
            let mut dx = vec![T::zero(); d.len * d.input];
            T::gemm(false, true, d.len, d.input, h4, T::one(), &dz, w_ih, T::zero(), &mut dx);
            let mut dw_ih = vec![T::zero(); d.input * h4];
            T::gemm(true, false, d.input, h4, d.len, T::one(), xb, &dz, T::zero(), &mut dw_ih);
            let mut dw_hh = vec![T::zero(); hh * h4];
            T::gemm(true, false, hh, h4, d.len, T::one(), &h_prev_mat, &dz, T::zero(), &mut dw_hh);
            let mut db = vec![T::zero(); h4];
            for row in dz.chunks(h4) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            LstmGrads { dx, dw_ih, dw_hh, db }
        })
        .collect();

    let mut total = LstmGrads {
        dx: Vec::with_capacity(x.len()),
        dw_ih: vec![T::zero(); d.input * h4],
        dw_hh: vec![T::zero(); hh * h4],
        db: vec![T::zero(); h4],
    };
    for g in per_sample {
        total.dx.extend(g.dx);
        for (a, v) in total.dw_ih.iter_mut().zip(g.dw_ih) {
            *a += v;
        }
        for (a, v) in total.dw_hh.iter_mut().zip(g.dw_hh) {
            *a += v;
        }
        for (a, v) in total.db.iter_mut().zip(g.db) {
            *a += v;
        }
    }
    total
}

// ---------------------------------------------------------------- softmax

pub(crate) fn softmax_forward<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, dr) in y.chunks(width).zip(dy.chunks(width)) {
        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(dr).map(|(&a, &b)| a * (b - dot)));
    }
    dx
}
