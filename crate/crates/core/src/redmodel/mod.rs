//! The two detector networks: RED-Time works on the raw segment, RED-CWT on
//! its Morlet spectrogram. Both emit one two-class probability row every
//! eight input samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnLayout, Graph, Mode, ParamId, ParamStore, PoolKind, Tensor, Var};
use crate::cwt::{CwtConfig, CwtMethod, MorletBank};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Output rows per input sample is `1 / DOWNSAMPLING`.
pub const DOWNSAMPLING: usize = 8;
const N_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Time,
    Cwt,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Variant::Time),
            "cwt" => Ok(Variant::Cwt),
            other => Err(Error::invalid(format!("unknown variant {other:?} (expected time or cwt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Samples per segment (`T`).
    pub segment_len: usize,
    /// Context samples on each side for the spectrogram (`T_B`).
    pub border: usize,
    pub channels: usize,
    pub n_filters: usize,
    pub n_scales: usize,
    pub beta_init: f64,
    pub eta: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub fs: f64,
    pub lstm_units: usize,
    pub hidden: usize,
    pub dropout_1: f64,
    pub dropout_2: f64,
    pub pooling: PoolKind,
    pub cwt_method: CwtMethod,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_variant(Variant::Time)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            segment_len: 4000,
            border: 1000,
            channels: 1,
            n_filters: match variant {
                Variant::Time => 64,
                Variant::Cwt => 32,
            },
            n_scales: 32,
            beta_init: 0.5,
            eta: 1.5,
            f_min: 0.5,
            f_max: 30.0,
            fs: 200.0,
            lstm_units: 256,
            hidden: 128,
            dropout_1: 0.2,
            dropout_2: 0.5,
            pooling: PoolKind::Avg,
            cwt_method: CwtMethod::Fft,
        }
    }

    pub fn cwt_config(&self) -> CwtConfig {
        CwtConfig {
            f_min: self.f_min,
            f_max: self.f_max,
            n_scales: self.n_scales,
            beta: self.beta_init,
            eta: self.eta,
            border: self.border,
        }
    }

    /// Samples each input segment must hold.
    pub fn input_len(&self) -> usize {
        match self.variant {
            Variant::Time => self.segment_len,
            Variant::Cwt => self.segment_len + 2 * self.border,
        }
    }

    /// Context samples carried on each side of the segment of interest.
    pub fn context(&self) -> usize {
        match self.variant {
            Variant::Time => 0,
            Variant::Cwt => self.border,
        }
    }

    pub fn output_len(&self) -> usize {
        self.segment_len / DOWNSAMPLING
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || !self.segment_len.is_multiple_of(DOWNSAMPLING) {
            return Err(Error::invalid(format!(
                "segment length must be a positive multiple of {DOWNSAMPLING}, got {}",
                self.segment_len
            )));
        }
        if self.channels != 1 {
            return Err(Error::invalid("only single-channel input is supported"));
        }
        for (name, v) in [
            ("n_filters", self.n_filters),
            ("lstm_units", self.lstm_units),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, r) in [("dropout_1", self.dropout_1), ("dropout_2", self.dropout_2)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if !(self.fs > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if self.variant == Variant::Cwt {
            MorletBank::new(&self.cwt_config(), self.fs)?.check_border(self.border)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Lstm {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Arch {
    log_beta: Option<ParamId>,
    bank: Option<MorletBank>,
    input_bn: Bn,
    convs: Vec<(ParamId, Bn)>,
    blstm: Vec<(Lstm, Lstm)>,
    dense1: (ParamId, ParamId),
    dense2: (ParamId, ParamId),
}

/// A built network: configuration, parameters, and layer wiring.
#[derive(Debug, Clone)]
pub struct Network<T: Real = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn add_bn<T: Real>(store: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Bn {
    Bn {
        gamma: store.add(format!("{name}/gamma"), Tensor::full(shape, T::one()), true),
        beta: store.add(format!("{name}/beta"), Tensor::zeros(shape), true),
        mean: store.add(format!("{name}/moving_mean"), Tensor::zeros(shape), false),
        var: store.add(format!("{name}/moving_var"), Tensor::full(shape, T::one()), false),
    }
}

fn add_lstm<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, h: usize, rng: &mut ChaCha8Rng) -> Lstm {
    let mut bias = Tensor::zeros(&[4 * h]);
    // forget gate starts open
    bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = T::one());
    Lstm {
        w_ih: store.add(format!("{name}/w_ih"), Tensor::uniform(&[d, 4 * h], 1.0 / (d as f64).sqrt(), rng), true),
        w_hh: store.add(format!("{name}/w_hh"), Tensor::uniform(&[h, 4 * h], 1.0 / (h as f64).sqrt(), rng), true),
        b: store.add(format!("{name}/b"), bias, true),
    }
}

impl<T: Real> Network<T> {
    /// Build and initialize a network; weights depend only on `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nf = config.n_filters;
        let (log_beta, bank, input_bn, mut c_in, freq) = match config.variant {
            Variant::Time => (None, None, add_bn(&mut store, "input_bn", &[1]), 1, 1),
            Variant::Cwt => {
                let bank = MorletBank::new(&config.cwt_config(), config.fs)?;
                let lb = store.add("cwt/log_beta", Tensor::new(&[1], vec![T::lit(config.beta_init.ln())]), true);
                let bn = add_bn(&mut store, "input_bn", &[config.n_scales, 2]);
                (Some(lb), Some(bank), bn, 2, config.n_scales)
            }
        };
        let mut convs = Vec::new();
        for block in 0..N_BLOCKS {
            let c_out = nf << block;
            for j in 0..2 {
                let name = format!("block{}/conv{}", block + 1, j + 1);
                let w = match config.variant {
                    Variant::Time => glorot(&[3, c_in, c_out], 3 * c_in, 3 * c_out, &mut rng),
                    Variant::Cwt => glorot(&[3, 3, c_in, c_out], 9 * c_in, 9 * c_out, &mut rng),
                };
                let w = store.add(format!("{name}/w"), w, true);
                let bn = add_bn(&mut store, &format!("{name}/bn"), &[c_out]);
                convs.push((w, bn));
                c_in = c_out;
            }
        }
        let mut d = c_in * freq;
        let h = config.lstm_units;
        let mut blstm = Vec::new();
        for layer in 0..2 {
            let fw = add_lstm(&mut store, &format!("blstm{}/fw", layer + 1), d, h, &mut rng);
            let bw = add_lstm(&mut store, &format!("blstm{}/bw", layer + 1), d, h, &mut rng);
            blstm.push((fw, bw));
            d = 2 * h;
        }
        let n2 = config.hidden;
        let dense1 = (
            store.add("dense1/w", glorot(&[d, n2], d, n2, &mut rng), true),
            store.add("dense1/b", Tensor::zeros(&[n2]), true),
        );
        let dense2 = (
            store.add("dense2/w", glorot(&[n2, 2], n2, 2, &mut rng), true),
            store.add("dense2/b", Tensor::zeros(&[2]), true),
        );
        Ok(Network {
            config,
            store,
            arch: Arch {
                log_beta,
                bank,
                input_bn,
                convs,
                blstm,
                dense1,
                dense2,
            },
        })
    }

    /// Rebuild the wiring for `config` and take parameter values from `store`.
    pub fn from_store(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let mut net = Network::build(config, 0)?;
        crate::autodiff::assign_by_name(&mut net.store, store)?;
        Ok(net)
    }

    /// Current wavelet width, for the spectrogram variant.
    pub fn beta(&self) -> Option<f64> {
        self.arch
            .log_beta
            .map(|id| self.store.value(id).data()[0].to_f64_lossy().exp())
    }

    pub fn log_beta_id(&self) -> Option<ParamId> {
        self.arch.log_beta
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        let expected = self.config.input_len();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape {
                layer: "input",
                expected: format!("(batch, {expected})"),
                got: format!("{s:?}"),
            });
        }
        if s[1] != expected {
            return Err(Error::SegmentLength { expected, got: s[1] });
        }
        Ok(())
    }

    /// Record the forward pass of a `(batch, input_len)` tensor; returns the
    /// `(batch, T / 8, 2)` probabilities.
    pub fn record(&self, g: &mut Graph<'_, T>, batch: Tensor<T>) -> Result<Var> {
        Self::record_with(&self.config, &self.arch, g, batch)
    }

    fn record_with(config: &ModelConfig, arch: &Arch, g: &mut Graph<'_, T>, batch: Tensor<T>) -> Result<Var> {
        let b = batch.shape()[0];
        let t = config.segment_len;
        let pool = config.pooling;
        let bn = |g: &mut Graph<'_, T>, x: Var, p: &Bn, layout: BnLayout| -> Result<Var> {
            let (ga, be) = (g.param(p.gamma), g.param(p.beta));
            g.batchnorm(x, ga, be, Some((p.mean, p.var)), layout)
        };
        let mut x = g.input(batch);
        match config.variant {
            Variant::Time => {
                x = g.reshape(x, &[b, t, 1])?;
                x = bn(g, x, &arch.input_bn, BnLayout { outer: b, g1: 1, span: t, g2: 1 })?;
                let mut len = t;
                for (k, (w, p)) in arch.convs.iter().enumerate() {
                    let wv = g.param(*w);
                    x = g.conv1d(x, wv, None)?;
                    let c = g.shape(x)[2];
                    x = bn(g, x, p, BnLayout { outer: b, g1: 1, span: len, g2: c })?;
                    x = g.relu(x);
                    if k % 2 == 1 {
                        x = g.pool(x, 1, pool)?;
                        len /= 2;
                    }
                }
            }
            Variant::Cwt => {
                let lb = g.param(arch.log_beta.expect("spectrogram variant has a width"));
                let bank = arch.bank.as_ref().expect("spectrogram variant has a bank");
                x = g.cwt(x, lb, bank, config.border, config.cwt_method)?;
                let f = config.n_scales;
                x = bn(g, x, &arch.input_bn, BnLayout { outer: b, g1: f, span: t, g2: 2 })?;
                let mut len = t;
                for (k, (w, p)) in arch.convs.iter().enumerate() {
                    let wv = g.param(*w);
                    x = g.conv2d(x, wv, None)?;
                    let c = g.shape(x)[3];
                    x = bn(g, x, p, BnLayout { outer: b * f * len, g1: 1, span: 1, g2: c })?;
                    x = g.relu(x);
                    if k % 2 == 1 {
                        x = g.pool(x, 2, pool)?;
                        len /= 2;
                    }
                }
                x = g.freq_to_channels(x)?;
            }
        }
        let out_len = g.shape(x)[1];
        if out_len != t / DOWNSAMPLING {
            return Err(Error::Shape {
                layer: "conv stack",
                expected: format!("{} time steps", t / DOWNSAMPLING),
                got: format!("{out_len}"),
            });
        }
        for (layer, (fw, bw)) in arch.blstm.iter().enumerate() {
            let rate = if layer == 0 { config.dropout_1 } else { config.dropout_2 };
            x = g.dropout(x, rate)?;
            let f_out = {
                let (a, c, d) = (g.param(fw.w_ih), g.param(fw.w_hh), g.param(fw.b));
                g.lstm(x, a, c, d, false)?
            };
            let b_out = {
                let (a, c, d) = (g.param(bw.w_ih), g.param(bw.w_hh), g.param(bw.b));
                g.lstm(x, a, c, d, true)?
            };
            x = g.concat_last(f_out, b_out)?;
        }
        x = g.dropout(x, config.dropout_2)?;
        let (w1, b1) = (g.param(arch.dense1.0), g.param(arch.dense1.1));
        x = g.dense(x, w1, Some(b1))?;
        x = g.relu(x);
        let (w2, b2) = (g.param(arch.dense2.0), g.param(arch.dense2.1));
        x = g.dense(x, w2, Some(b2))?;
        g.softmax(x)
    }

    /// Probabilities `(batch, T / 8, 2)` for a `(batch, input_len)` tensor.
    /// Training mode uses batch statistics and updates the running estimates.
    pub fn forward(&mut self, batch: Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        self.check_batch(&batch)?;
        let Network { config, store, arch } = self;
        let mut g = Graph::new(store, mode, seed);
        let p = Self::record_with(config, arch, &mut g, batch)?;
        Ok(g.value(p).clone())
    }

    /// Inference without touching any state; callable concurrently.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(&batch)?;
        let mut store = self.store.clone();
        let mut g = Graph::new(&mut store, Mode::Infer, 0);
        let p = Self::record_with(&self.config, &self.arch, &mut g, batch)?;
        Ok(g.value(p).clone())
    }

    /// Zero gradients, run a training-mode forward pass, and back-propagate
    /// the cross-entropy against `labels` (one per output row, row-major over
    /// the batch). Returns the loss.
    pub fn loss_and_backward(&mut self, batch: Tensor<T>, labels: &[usize], seed: u64) -> Result<f64> {
        self.check_batch(&batch)?;
        self.store.zero_grad();
        let Network { config, store, arch } = self;
        let mut g = Graph::new(store, Mode::Train, seed);
        let p = Self::record_with(config, arch, &mut g, batch)?;
        let loss = g.cross_entropy(p, labels)?;
        let value = g.value(loss).item().to_f64_lossy();
        g.backward(loss)?;
        Ok(value)
    }

    /// Cross-entropy in inference mode.
    pub fn eval_loss(&self, batch: Tensor<T>, labels: &[usize]) -> Result<f64> {
        self.check_batch(&batch)?;
        let mut store = self.store.clone();
        let mut g = Graph::new(&mut store, Mode::Infer, 0);
        let p = Self::record_with(&self.config, &self.arch, &mut g, batch)?;
        let loss = g.cross_entropy(p, labels)?;
        Ok(g.value(loss).item().to_f64_lossy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            segment_len: 64,
            border: 40,
            n_filters: 2,
            n_scales: 3,
            f_min: 4.0,
            f_max: 12.0,
            fs: 50.0,
            lstm_units: 3,
            hidden: 4,
            cwt_method: CwtMethod::Direct,
            ..ModelConfig::for_variant(variant)
        }
    }

    fn random_batch(b: usize, len: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, len], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn table_defaults() {
        let t = ModelConfig::for_variant(Variant::Time);
        assert_eq!((t.segment_len, t.n_filters, t.lstm_units, t.hidden), (4000, 64, 256, 128));
        assert_eq!((t.dropout_1, t.dropout_2), (0.2, 0.5));
        let c = ModelConfig::for_variant(Variant::Cwt);
        assert_eq!((c.n_filters, c.n_scales, c.beta_init, c.border), (32, 32, 0.5, 1000));
        assert_eq!(c.input_len(), 6000);
    }

    #[test]
    fn output_is_one_row_per_eight_samples() {
        for variant in [Variant::Time, Variant::Cwt] {
            let cfg = tiny(variant);
            let mut net = Network::<f64>::build(cfg.clone(), 1).unwrap();
            let p = net.forward(random_batch(2, cfg.input_len(), 3), Mode::Train, 0).unwrap();
            assert_eq!(p.shape(), &[2, 8, 2]);
            for row in p.data().chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectrogram_variant_has_two_input_channels() {
        let net = Network::<f64>::build(tiny(Variant::Cwt), 1).unwrap();
        let w = net.store.find("block1/conv1/w").unwrap();
        assert_eq!(net.store.value(w).shape(), &[3, 3, 2, 2]);
        let bn = net.store.find("input_bn/gamma").unwrap();
        assert_eq!(net.store.value(bn).shape(), &[3, 2]);
        assert!(net.beta().is_some());
    }

    #[test]
    fn wrong_segment_length_is_reported() {
        let mut net = Network::<f64>::build(tiny(Variant::Time), 1).unwrap();
        let err = net.forward(random_batch(1, 65, 0), Mode::Infer, 0).unwrap_err();
        assert!(matches!(err, Error::SegmentLength { expected: 64, got: 65 }));
    }

    #[test]
    fn insufficient_border_fails_to_build() {
        let cfg = ModelConfig { border: 10, ..tiny(Variant::Cwt) };
        assert!(matches!(
            Network::<f64>::build(cfg, 0),
            Err(Error::InsufficientPadding { .. })
        ));
    }

    #[test]
    fn indivisible_segment_is_rejected() {
        let cfg = ModelConfig { segment_len: 60, ..tiny(Variant::Time) };
        assert!(Network::<f64>::build(cfg, 0).is_err());
    }

    #[test]
    fn inference_is_repeatable() {
        let cfg = tiny(Variant::Time);
        let net = Network::<f64>::build(cfg.clone(), 4).unwrap();
        let x = random_batch(3, cfg.input_len(), 5);
        assert_eq!(net.predict(x.clone()).unwrap(), net.predict(x).unwrap());
    }

    #[test]
    fn width_gradient_through_full_network() {
        let cfg = ModelConfig {
            dropout_1: 0.0,
            dropout_2: 0.0,
            ..tiny(Variant::Cwt)
        };
        let net = Network::<f64>::build(cfg.clone(), 9).unwrap();
        let x = random_batch(2, cfg.input_len(), 1);
        let labels: Vec<usize> = (0..16).map(|i| (i / 3) % 2).collect();
        let lb = net.log_beta_id().unwrap();
        let mut a = net.clone();
        a.loss_and_backward(x.clone(), &labels, 0).unwrap();
        let analytic = a.store.grad(lb)[0];
        let loss_at = |delta: f64| {
            let mut n = net.clone();
            n.store.get_mut(lb).value.data_mut()[0] += delta;
            n.loss_and_backward(x.clone(), &labels, 0).unwrap()
        };
        let h = 1e-5;
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(rel < 1e-3, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn config_json_fills_missing_fields() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"variant": "time", "n_filters": 8}"#).unwrap();
        assert_eq!(cfg.n_filters, 8);
        assert_eq!(cfg.segment_len, 4000);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
