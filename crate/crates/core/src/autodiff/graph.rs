use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cwt::{CwtMethod, MorletBank};
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::kernels::{self, BnLayout, Conv1dDims, Conv2dDims, LstmCache, LstmDims, PoolKind};
use super::{ParamId, ParamStore, Tensor};

/// Probabilities are clamped from below before taking logs.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Vec<T>),
    Relu(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv1dDims,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv2dDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Pool {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        kind: PoolKind,
        arg: Vec<usize>,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        dims: LstmDims,
        cache: LstmCache<T>,
    },
    Dropout(Var, Vec<T>),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        c_in: usize,
        c_out: usize,
    },
    Softmax(Var, usize),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        width: usize,
    },
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    FreqToChannels {
        x: Var,
        dims: [usize; 4],
    },
    Cwt {
        x: Var,
        log_beta: Var,
        bank: MorletBank,
        border: usize,
        method: CwtMethod,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of operations over a parameter store. Values are computed eagerly;
/// [`Graph::backward`] accumulates parameter gradients into the store.
pub struct Graph<'a, T: Real = f64> {
    store: &'a mut ParamStore<T>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

fn shape_err(layer: &'static str, expected: impl Into<String>, got: &[usize]) -> Error {
    Error::Shape {
        layer,
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is kept and can be read with [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let (value, trainable) = (p.value.clone(), p.trainable);
        self.push(value, Op::Param(id), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data);
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.data(x).len() as f64);
        let s: T = self.data(x).iter().copied().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), ng)
    }

    /// `sum(x * weights)` with constant weights.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.data(x).len() {
            return Err(shape_err("dot", format!("{} weights", weights.len()), self.shape(x)));
        }
        let s: T = self.data(x).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(self.shape(x), data);
        let ng = self.needs(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(shape_err("reshape", format!("{shape:?}"), self.shape(x)));
        }
        let value = self.value(x).clone().reshaped(shape);
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    // ------------------------------------------------------------ layers

    /// Same-length 1D convolution with zero padding. `x: (B, T, Cin)`,
    /// `w: (K, Cin, Cout)` with odd `K`, `b: (Cout)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 {
            return Err(shape_err("conv1d", "(batch, time, channels)", &xs));
        }
        if ws.len() != 3 || ws[1] != xs[2] || ws[0] % 2 == 0 {
            return Err(shape_err("conv1d", format!("(odd k, {}, c_out) kernel", xs[2]), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[2]] {
                return Err(shape_err("conv1d", format!("[{}] bias", ws[2]), self.shape(b)));
            }
        }
        let dims = Conv1dDims {
            batch: xs[0],
            len: xs[1],
            c_in: xs[2],
            c_out: ws[2],
            kernel: ws[0],
        };
        let out = kernels::conv1d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), dims);
        let value = Tensor::new(&[xs[0], xs[1], ws[2]], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(value, Op::Conv1d { x, w, b, dims }, ng))
    }

    /// Same-size 2D convolution with zero padding. `x: (B, F, T, Cin)`,
    /// `w: (KF, KT, Cin, Cout)` with odd kernel sizes.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 {
            return Err(shape_err("conv2d", "(batch, freq, time, channels)", &xs));
        }
        if ws.len() != 4 || ws[2] != xs[3] || ws[0] % 2 == 0 || ws[1] % 2 == 0 {
            return Err(shape_err("conv2d", format!("(odd kf, odd kt, {}, c_out) kernel", xs[3]), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[3]] {
                return Err(shape_err("conv2d", format!("[{}] bias", ws[3]), self.shape(b)));
            }
        }
        let dims = Conv2dDims {
            batch: xs[0],
            freq: xs[1],
            len: xs[2],
            c_in: xs[3],
            c_out: ws[3],
            kf: ws[0],
            kt: ws[1],
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), dims);
        let value = Tensor::new(&[xs[0], xs[1], xs[2], ws[3]], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, ng))
    }

    /// Batch normalization over an `(outer, g1, span, g2)` view of `x`, with
    /// one statistic per `(g1, g2)` group. In training mode batch statistics
    /// are used and the running estimates (when given) are updated in place.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(ParamId, ParamId)>,
        layout: BnLayout,
    ) -> Result<Var> {
        let n = self.data(x).len();
        if layout.outer * layout.g1 * layout.span * layout.g2 != n {
            return Err(shape_err("batchnorm", format!("{layout:?}"), self.shape(x)));
        }
        for p in [gamma, beta] {
            if self.data(p).len() != layout.groups() {
                return Err(shape_err("batchnorm", format!("{} affine values", layout.groups()), self.shape(p)));
            }
        }
        let use_batch = self.mode == Mode::Train || running.is_none();
        let (y, xhat, inv_std) = if use_batch {
            if layout.count() < 2 {
                return Err(Error::invalid("batchnorm needs at least two values per group in training"));
            }
            let f = kernels::bn_train_forward(self.data(x), self.data(gamma), self.data(beta), layout);
            if let Some((mean_id, var_id)) = running {
                let m = T::lit(kernels::BN_MOMENTUM);
                let one_m = T::lit(1.0 - kernels::BN_MOMENTUM);
                let rm = self.store.get_mut(mean_id).value.data_mut();
                for (r, &b) in rm.iter_mut().zip(&f.batch_mean) {
                    *r = m * *r + one_m * T::lit(b);
                }
                let rv = self.store.get_mut(var_id).value.data_mut();
                for (r, &b) in rv.iter_mut().zip(&f.batch_var) {
                    *r = m * *r + one_m * T::lit(b);
                }
            }
            (f.y, f.xhat, f.inv_std)
        } else {
            let (mean_id, var_id) = running.expect("checked above");
            kernels::bn_infer_forward(
                self.data(x),
                self.data(gamma),
                self.data(beta),
                self.store.value(mean_id).data(),
                self.store.value(var_id).data(),
                layout,
            )
        };
        let value = Tensor::new(self.shape(x), y);
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats: use_batch,
            },
            ng,
        ))
    }

    /// Pooling of size and stride 2 along `axis`; a trailing odd element is dropped.
    pub fn pool(&mut self, x: Var, axis: usize, kind: PoolKind) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] < 2 {
            return Err(shape_err("pool", format!("axis {axis} of length >= 2"), &xs));
        }
        let outer = xs[..axis].iter().product();
        let inner = xs[axis + 1..].iter().product();
        let len = xs[axis];
        let (out, arg) = kernels::pool_forward(self.data(x), outer, len, inner, kind);
        let mut shape = xs;
        shape[axis] = len / 2;
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out),
            Op::Pool {
                x,
                outer,
                len,
                inner,
                kind,
                arg,
            },
            ng,
        ))
    }

    /// Unidirectional LSTM over `x: (B, T, D)`; gates ordered `[i, f, g, o]`
    /// in `w_ih: (D, 4H)`, `w_hh: (H, 4H)`, `b: (4H)`. Returns `(B, T, H)`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("lstm", "(batch, time, features)", &xs));
        }
        let hs = self.shape(w_hh).to_vec();
        if hs.len() != 2 || hs[1] != 4 * hs[0] {
            return Err(shape_err("lstm", "(H, 4H) recurrent weights", &hs));
        }
        let h = hs[0];
        if self.shape(w_ih) != [xs[2], 4 * h] {
            return Err(shape_err("lstm", format!("[{}, {}] input weights", xs[2], 4 * h), self.shape(w_ih)));
        }
        if self.shape(b) != [4 * h] {
            return Err(shape_err("lstm", format!("[{}] bias", 4 * h), self.shape(b)));
        }
        let dims = LstmDims {
            batch: xs[0],
            len: xs[1],
            input: xs[2],
            hidden: h,
            reverse,
        };
        let (out, cache) =
            kernels::lstm_forward(self.data(x), self.data(w_ih), self.data(w_hh), self.data(b), dims);
        let ng = self.needs(&[x, w_ih, w_hh, b]);
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1], h], out),
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                dims,
                cache,
            },
            ng,
        ))
    }

    /// Inverted dropout with independent masks per element; identity in
    /// inference mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if self.mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.data(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(self.shape(x), data);
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Dropout(x, mask), ng))
    }

    /// Pointwise dense layer on the last axis: `w: (Cin, Cout)`, `b: (Cout)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let c_in = *xs.last().ok_or_else(|| shape_err("dense", "at least one axis", &xs))?;
        if ws.len() != 2 || ws[0] != c_in {
            return Err(shape_err("dense", format!("({c_in}, c_out) weights"), &ws));
        }
        let c_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("dense", format!("[{c_out}] bias"), self.shape(b)));
            }
        }
        let rows = self.data(x).len() / c_in.max(1);
        let mut out = vec![T::zero(); rows * c_out];
        if let Some(b) = b {
            let bias = self.data(b);
            for r in out.chunks_mut(c_out) {
                r.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(false, false, rows, c_out, c_in, T::one(), self.data(x), self.data(w), beta, &mut out);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = c_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(
            Tensor::new(&shape, out),
            Op::Dense {
                x,
                w,
                b,
                rows,
                c_in,
                c_out,
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().ok_or_else(|| shape_err("softmax", "at least one axis", &xs))?;
        let out = kernels::softmax_forward(self.data(x), width);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(&xs, out), Op::Softmax(x, width), ng))
    }

    /// Mean over rows of `-ln max(p[row, label], 1e-12)`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        let width = *ps.last().ok_or_else(|| shape_err("cross_entropy", "at least one axis", &ps))?;
        let rows = self.data(probs).len() / width.max(1);
        if labels.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} rows for {} labels", labels.len(), labels.len()), &ps));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
            return Err(Error::invalid(format!("label {bad} out of range for {width} classes")));
        }
        let p = self.data(probs);
        let clamp = T::lit(CE_CLAMP);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * width + l].max(clamp).ln())
            .sum();
        let loss = total / T::lit(rows as f64);
        let ng = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                width,
            },
            ng,
        ))
    }

    /// Concatenate on the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", format!("{sa:?} with matching leading axes"), &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.data(a).len() / ca.max(1);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out), Op::Concat { a, b, rows, ca, cb }, ng))
    }

    /// `(B, F, T, C) -> (B, T, F * C)` with feature index `f * C + c`.
    pub fn freq_to_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("freq_to_channels", "(batch, freq, time, channels)", &xs));
        }
        let [b, f, t, c] = [xs[0], xs[1], xs[2], xs[3]];
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for fi in 0..f {
                for ti in 0..t {
                    let s = ((bi * f + fi) * t + ti) * c;
                    let d = (bi * t + ti) * f * c + fi * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[b, t, f * c], out),
            Op::FreqToChannels { x, dims: [b, f, t, c] },
            ng,
        ))
    }

    /// Complex Morlet front end on `x: (B, T + 2 border)`; returns
    /// `(B, n_scales, T, 2)` with real and imaginary parts as channels.
    /// The width is `exp(log_beta)`; no gradient flows to `x`.
    pub fn cwt(&mut self, x: Var, log_beta: Var, bank: &MorletBank, border: usize, method: CwtMethod) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("cwt", "(batch, samples)", &xs));
        }
        if self.data(log_beta).len() != 1 {
            return Err(shape_err("cwt", "scalar log-width", self.shape(log_beta)));
        }
        if xs[1] <= 2 * border {
            return Err(Error::SegmentLength {
                expected: 2 * border + 1,
                got: xs[1],
            });
        }
        let beta = self.data(log_beta)[0].to_f64_lossy().exp();
        let n_t = xs[1] - 2 * border;
        let n_s = bank.n_scales();
        let mut out = vec![T::zero(); xs[0] * n_s * n_t * 2];
        for (bi, chunk) in self.data(x).chunks(xs[1]).enumerate() {
            let (re, im) = bank.transform(chunk, border, beta, method)?;
            let dst = &mut out[bi * n_s * n_t * 2..(bi + 1) * n_s * n_t * 2];
            for (k, (r, i)) in re.iter().zip(&im).enumerate() {
                dst[2 * k] = *r;
                dst[2 * k + 1] = *i;
            }
        }
        let ng = self.needs(&[log_beta]);
        Ok(self.push(
            Tensor::new(&[xs[0], n_s, n_t, 2], out),
            Op::Cwt {
                x,
                log_beta,
                bank: bank.clone(),
                border,
                method,
            },
            ng,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Back-propagate from a scalar `loss`, adding parameter gradients into
    /// the store and keeping every node's gradient for [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            if let Op::Param(id) = self.nodes[i].op {
                for (a, &v) in self.store.get_mut(id).grad.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.data(*b)).map(|(&u, &v)| u * v).collect();
                let gb = g.iter().zip(self.data(*a)).map(|(&u, &v)| u * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.data(*x).len()])],
            Op::Mean(x) => {
                let n = self.data(*x).len();
                vec![(*x, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Dot(x, w) => vec![(*x, w.iter().map(|&v| v * g[0]).collect())],
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_backward(self.data(*x), self.data(*w), g, *dims, wants(*x));
                let mut v = vec![(*w, dw)];
                v.extend(dx.map(|dx| (*x, dx)));
                v.extend(b.map(|b| (b, db)));
                v
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.data(*x), self.data(*w), g, *dims, wants(*x));
                let mut v = vec![(*w, dw)];
                v.extend(dx.map(|dx| (*x, dx)));
                v.extend(b.map(|b| (b, db)));
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dg, dbeta) =
                    kernels::bn_backward(g, xhat, inv_std, self.data(*gamma), *layout, *batch_stats);
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::Pool {
                x,
                outer,
                len,
                inner,
                kind,
                arg,
            } => {
                let n = self.data(*x).len();
                vec![(*x, kernels::pool_backward(g, n, *outer, *len, *inner, *kind, arg))]
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                dims,
                cache,
            } => {
                let gr = kernels::lstm_backward(
                    self.data(*x),
                    self.data(*w_ih),
                    self.data(*w_hh),
                    node.value.data(),
                    cache,
                    g,
                    *dims,
                );
                vec![(*x, gr.dx), (*w_ih, gr.dw_ih), (*w_hh, gr.dw_hh), (*b, gr.db)]
            }
            Op::Dropout(x, mask) => vec![(*x, g.iter().zip(mask).map(|(&u, &m)| u * m).collect())],
            Op::Dense {
                x,
                w,
                b,
                rows,
                c_in,
                c_out,
            } => {
                let mut v = Vec::new();
                let mut dw = vec![T::zero(); c_in * c_out];
                T::gemm(true, false, *c_in, *c_out, *rows, T::one(), self.data(*x), g, T::zero(), &mut dw);
                v.push((*w, dw));
                if wants(*x) {
                    let mut dx = vec![T::zero(); rows * c_in];
                    T::gemm(false, true, *rows, *c_in, *c_out, T::one(), g, self.data(*w), T::zero(), &mut dx);
                    v.push((*x, dx));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); *c_out];
                    for r in g.chunks(*c_out) {
                        for (a, &u) in db.iter_mut().zip(r) {
                            *a += u;
                        }
                    }
                    v.push((*b, db));
                }
                v
            }
            Op::Softmax(x, width) => vec![(*x, kernels::softmax_backward(node.value.data(), g, *width))],
            Op::CrossEntropy { probs, labels, width } => {
                let p = self.data(*probs);
                let mut dp = vec![T::zero(); p.len()];
                let scale = g[0] / T::lit(labels.len() as f64);
                let clamp = T::lit(CE_CLAMP);
                for (r, &l) in labels.iter().enumerate() {
                    let v = p[r * width + l];
                    if v > clamp {
                        dp[r * width + l] = -scale / v;
                    }
                }
                vec![(*probs, dp)]
            }
            Op::Concat { a, b, rows, ca, cb } => {
                let w = ca + cb;
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..*rows {
                    ga.extend_from_slice(&g[r * w..r * w + ca]);
                    gb.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::FreqToChannels { x, dims } => {
                let [b, f, t, c] = *dims;
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for fi in 0..f {
                        for ti in 0..t {
                            let s = ((bi * f + fi) * t + ti) * c;
                            let d = (bi * t + ti) * f * c + fi * c;
                            gx[s..s + c].copy_from_slice(&g[d..d + c]);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Cwt {
                x,
                log_beta,
                bank,
                border,
                method,
            } => {
                let beta = self.data(*log_beta)[0].to_f64_lossy().exp();
                let len = self.shape(*x)[1];
                let plane = node.value.len() / self.shape(*x)[0] / 2;
                let mut total = 0.0;
                for (bi, chunk) in self.data(*x).chunks(len).enumerate() {
                    let gs = &g[bi * 2 * plane..(bi + 1) * 2 * plane];
                    let gr: Vec<T> = gs.iter().step_by(2).copied().collect();
                    let gi: Vec<T> = gs.iter().skip(1).step_by(2).copied().collect();
                    total += bank.beta_gradient(chunk, *border, beta, &gr, &gi, *method)?;
                }
                vec![(*log_beta, vec![T::lit(total * beta)])]
            }
        };
        Ok(out)
    }
}
