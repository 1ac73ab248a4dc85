//! The multimodal variational autoencoder: two Gaussian encoders (one over
//! parameters θ, one over responses x) sharing a single Gaussian decoder.
//!
//! Training pulls the two encodings of the same underlying system toward
//! each other — the reconstruction path x → z → x̃ and the prediction path
//! θ → z → x̃ share the decoder, and a symmetric KL penalty (weight α)
//! aligns the encoder posteriors directly. Once aligned, the latent space
//! supports a closed-form likelihood over θ for a measured x (see the
//! `latent` module).
//!
//! The loss for one triple (θ, x, x̃), each expectation estimated with a
//! single reparameterized draw:
//!
//! ```text
//! recon = −E_{q(z|x)}[ln p(x̃|z)]
//! pred  = −E_{q(z|θ)}[ln p(x̃|z)]
//! regul = KL(q(z|x)‖p) + KL(q(z|θ)‖p)
//!         + α·[KL(q(z|x)‖q(z|θ)) + KL(q(z|θ)‖q(z|x))]
//! ```
//!
//! Gradients are hand-derived reverse-mode (see `backward_weighted`), pinned
//! against central finite differences in 64-bit by the tests here and by the
//! acceptance suite.

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::container;
use crate::dataset::{Standardization, TrainingDataset};
use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, upsample2, upsample2_backward, Adam, Conv1d, ConvResBlock, ConvResTrace,
    FcResBlock, FcResTrace, Linear, Scalar, Tensor,
};

pub const MODEL_MAGIC: &[u8; 8] = b"LSBIMODL";
pub const MODEL_VERSION: u8 = 1;

/// Decoder log-variance is clamped to this symmetric band to keep the
/// Gaussian likelihood away from collapse early in training; wide enough to
/// be inactive at convergence.
pub const DECODER_LOGVAR_CLAMP: f64 = 10.0;

/// Diagonal Gaussian over the latent space, as produced by either encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn standard(n_z: usize) -> Self {
        GaussianLatent {
            mean: vec![0.0; n_z],
            log_var: vec![0.0; n_z],
        }
    }

    pub fn n_z(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_var).all(|v| v.is_finite())
    }
}

/// KL(q ‖ p) between diagonal Gaussians, in nats.
pub fn kl_diag_gauss(q: &GaussianLatent, p: &GaussianLatent) -> f64 {
    assert_eq!(q.n_z(), p.n_z());
    let mut acc = 0.0;
    for d in 0..q.n_z() {
        let (m1, l1) = (q.mean[d], q.log_var[d]);
        let (m2, l2) = (p.mean[d], p.log_var[d]);
        acc += 0.5 * ((l2 - l1) + ((l1.exp() + (m1 - m2).powi(2)) / l2.exp()) - 1.0);
    }
    acc
}

/// Sizes that fully determine the three networks. The response length must
/// be divisible by 8 (three stride-2 stages).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchitectureConfig {
    pub n_z: usize,
    pub theta_dim: usize,
    pub x_len: usize,
    pub conv_channels: [usize; 3],
    pub fc_width: usize,
    pub kernel: usize,
}

impl ArchitectureConfig {
    /// Benchmark default: latent dimension 8 over the 1024-point response.
    pub fn benchmark() -> Self {
        ArchitectureConfig {
            n_z: 8,
            theta_dim: 4,
            x_len: 1024,
            conv_channels: [16, 32, 64],
            fc_width: 128,
            kernel: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 || self.theta_dim == 0 || self.fc_width == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.x_len == 0 || self.x_len % 8 != 0 {
            return Err(Error::Config(format!(
                "response length {} must be a positive multiple of 8",
                self.x_len
            )));
        }
        if self.conv_channels.iter().any(|c| *c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn l8(&self) -> usize {
        self.x_len / 8
    }
}

// ---------------------------------------------------------------------------
// Response encoder
// ---------------------------------------------------------------------------

/// Strided convolutional encoder x → (μ, ln σ²).
#[derive(Debug, Clone)]
pub struct XEncoder<T> {
    stem: Conv1d<T>,
    b1: ConvResBlock<T>,
    d1: Conv1d<T>,
    b2: ConvResBlock<T>,
    d2: Conv1d<T>,
    b3: ConvResBlock<T>,
    fc: Linear<T>,
    head_mean: Linear<T>,
    head_logvar: Linear<T>,
}

struct XEncTrace<T> {
    x3: Array3<T>,
    col_stem: Array2<T>,
    r0: Array3<T>,
    t1: ConvResTrace<T>,
    col_d1: Array2<T>,
    r1: Array3<T>,
    t2: ConvResTrace<T>,
    col_d2: Array2<T>,
    r2: Array3<T>,
    t3: ConvResTrace<T>,
    flat: Array2<T>,
    fc_r: Array2<T>,
}

impl<T: Scalar> XEncoder<T> {
    fn new<R: Rng>(cfg: &ArchitectureConfig, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.conv_channels;
        let k = cfg.kernel;
        XEncoder {
            stem: Conv1d::new("xenc.stem", 1, c1, k, 2, rng),
            b1: ConvResBlock::new("xenc.b1", c1, k, rng),
            d1: Conv1d::new("xenc.d1", c1, c2, k, 2, rng),
            b2: ConvResBlock::new("xenc.b2", c2, k, rng),
            d2: Conv1d::new("xenc.d2", c2, c3, k, 2, rng),
            b3: ConvResBlock::new("xenc.b3", c3, k, rng),
            fc: Linear::new("xenc.fc", c3 * cfg.l8(), cfg.fc_width, rng),
            head_mean: Linear::new("xenc.mean", cfg.fc_width, cfg.n_z, rng),
            head_logvar: Linear::new("xenc.logvar", cfg.fc_width, cfg.n_z, rng),
        }
    }

    fn forward(&self, x: &Array2<T>) -> (Array2<T>, Array2<T>, XEncTrace<T>) {
        let (bsz, l) = x.dim();
        let x3 = x
            .to_owned()
            .into_shape_with_order((bsz, 1, l))
            .expect("contiguous");
        let (a0, col_stem) = self.stem.forward(&x3);
        let r0 = relu(&a0);
        let t1 = self.b1.forward(&r0);
        let (a1, col_d1) = self.d1.forward(&t1.out);
        let r1 = relu(&a1);
        let t2 = self.b2.forward(&r1);
        let (a2, col_d2) = self.d2.forward(&t2.out);
        let r2 = relu(&a2);
        let t3 = self.b3.forward(&r2);
        let (b2_, c3, l8) = t3.out.dim();
        let flat = t3
            .out
            .to_owned()
            .into_shape_with_order((b2_, c3 * l8))
            .expect("contiguous");
        let fc_r = relu(&self.fc.forward(&flat));
        let mean = self.head_mean.forward(&fc_r);
        let logvar = self.head_logvar.forward(&fc_r);
        let trace = XEncTrace {
            x3,
            col_stem,
            r0,
            t1,
            col_d1,
            r1,
            t2,
            col_d2,
            r2,
            t3,
            flat,
            fc_r,
        };
        (mean, logvar, trace)
    }

    fn backward(&mut self, tr: &XEncTrace<T>, d_mean: &Array2<T>, d_logvar: &Array2<T>) {
        let d_fc_r = self.head_mean.backward(&tr.fc_r, d_mean)
            + self.head_logvar.backward(&tr.fc_r, d_logvar);
        let d_fc = relu_backward(&tr.fc_r, &d_fc_r);
        let d_flat = self.fc.backward(&tr.flat, &d_fc);
        let (bsz, c3, l8) = tr.t3.out.dim();
        let d_t3 = d_flat
            .into_shape_with_order((bsz, c3, l8))
            .expect("contiguous");
        let d_r2 = self.b3.backward(&tr.t3, &d_t3);
        let d_a2 = relu_backward(&tr.r2, &d_r2);
        let (_, _, l4) = tr.t2.out.dim();
        let d_t2out = self.d2.backward(&tr.col_d2, &d_a2, bsz, l4);
        let d_r1 = self.b2.backward(&tr.t2, &d_t2out);
        let d_a1 = relu_backward(&tr.r1, &d_r1);
        let (_, _, l2) = tr.t1.out.dim();
        let d_t1out = self.d1.backward(&tr.col_d1, &d_a1, bsz, l2);
        let d_r0 = self.b1.backward(&tr.t1, &d_t1out);
        let d_a0 = relu_backward(&tr.r0, &d_r0);
        let (_, _, l_in) = tr.x3.dim();
        let _ = self.stem.backward(&tr.col_stem, &d_a0, bsz, l_in);
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.stem.tensors_mut();
        v.extend(self.b1.tensors_mut());
        v.extend(self.d1.tensors_mut());
        v.extend(self.b2.tensors_mut());
        v.extend(self.d2.tensors_mut());
        v.extend(self.b3.tensors_mut());
        v.extend(self.fc.tensors_mut());
        v.extend(self.head_mean.tensors_mut());
        v.extend(self.head_logvar.tensors_mut());
        v
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.stem.tensors();
        v.extend(self.b1.tensors());
        v.extend(self.d1.tensors());
        v.extend(self.b2.tensors());
        v.extend(self.d2.tensors());
        v.extend(self.b3.tensors());
        v.extend(self.fc.tensors());
        v.extend(self.head_mean.tensors());
        v.extend(self.head_logvar.tensors());
        v
    }
}

// ---------------------------------------------------------------------------
// Parameter encoder
// ---------------------------------------------------------------------------

/// Fully connected residual encoder θ → (μ, ln σ²).
#[derive(Debug, Clone)]
pub struct ThetaEncoder<T> {
    inp: Linear<T>,
    blocks: Vec<FcResBlock<T>>,
    head_mean: Linear<T>,
    head_logvar: Linear<T>,
}

struct ThetaEncTrace<T> {
    theta: Array2<T>,
    r0: Array2<T>,
    traces: Vec<FcResTrace<T>>,
}

impl<T: Scalar> ThetaEncoder<T> {
    fn new<R: Rng>(cfg: &ArchitectureConfig, rng: &mut R) -> Self {
        let w = cfg.fc_width;
        let names: [&'static str; 3] = ["tenc.r1", "tenc.r2", "tenc.r3"];
        ThetaEncoder {
            inp: Linear::new("tenc.inp", cfg.theta_dim, w, rng),
            blocks: names.iter().map(|n| FcResBlock::new(n, w, rng)).collect(),
            head_mean: Linear::new("tenc.mean", w, cfg.n_z, rng),
            head_logvar: Linear::new("tenc.logvar", w, cfg.n_z, rng),
        }
    }

    fn forward(&self, theta: &Array2<T>) -> (Array2<T>, Array2<T>, ThetaEncTrace<T>) {
        let r0 = relu(&self.inp.forward(theta));
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut h = r0.clone();
        for b in &self.blocks {
            let t = b.forward(&h);
            h = t.out.clone();
            traces.push(t);
        }
        let mean = self.head_mean.forward(&h);
        let logvar = self.head_logvar.forward(&h);
        (
            mean,
            logvar,
            ThetaEncTrace {
                theta: theta.clone(),
                r0,
                traces,
            },
        )
    }

    fn backward(&mut self, tr: &ThetaEncTrace<T>, d_mean: &Array2<T>, d_logvar: &Array2<T>) {
        let last = tr.traces.last().expect("at least one block");
        let mut dh = self.head_mean.backward(&last.out, d_mean)
            + self.head_logvar.backward(&last.out, d_logvar);
        for (b, t) in self.blocks.iter_mut().zip(&tr.traces).rev() {
            dh = b.backward(t, &dh);
        }
        let d_a0 = relu_backward(&tr.r0, &dh);
        let _ = self.inp.backward(&tr.theta, &d_a0);
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.inp.tensors_mut();
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.head_mean.tensors_mut());
        v.extend(self.head_logvar.tensors_mut());
        v
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.inp.tensors();
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.head_mean.tensors());
        v.extend(self.head_logvar.tensors());
        v
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Upsampling convolutional decoder z → (μ_x, ln σ²_x), mirroring the
/// response encoder.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    fc1: Linear<T>,
    fc2: Linear<T>,
    b3: ConvResBlock<T>,
    u2: Conv1d<T>,
    b2: ConvResBlock<T>,
    u1: Conv1d<T>,
    b1: ConvResBlock<T>,
    out: Conv1d<T>,
}

struct DecoderTrace<T> {
    z: Array2<T>,
    r1: Array2<T>,
    r2: Array2<T>,
    t3: ConvResTrace<T>,
    up3: Array3<T>,
    col_u2: Array2<T>,
    ru2: Array3<T>,
    t2: ConvResTrace<T>,
    up2: Array3<T>,
    col_u1: Array2<T>,
    ru1: Array3<T>,
    t1: ConvResTrace<T>,
    col_out: Array2<T>,
    logvar_raw: Array2<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new<R: Rng>(cfg: &ArchitectureConfig, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.conv_channels;
        let k = cfg.kernel;
        Decoder {
            fc1: Linear::new("dec.fc1", cfg.n_z, cfg.fc_width, rng),
            fc2: Linear::new("dec.fc2", cfg.fc_width, c3 * cfg.l8(), rng),
            b3: ConvResBlock::new("dec.b3", c3, k, rng),
            u2: Conv1d::new("dec.u2", c3, c2, k, 1, rng),
            b2: ConvResBlock::new("dec.b2", c2, k, rng),
            u1: Conv1d::new("dec.u1", c2, c1, k, 1, rng),
            b1: ConvResBlock::new("dec.b1", c1, k, rng),
            out: Conv1d::new("dec.out", c1, 2, k, 1, rng),
        }
    }

    fn forward(
        &self,
        cfg: &ArchitectureConfig,
        z: &Array2<T>,
    ) -> (Array2<T>, Array2<T>, DecoderTrace<T>) {
        let bsz = z.nrows();
        let [_, _, c3] = cfg.conv_channels;
        let r1 = relu(&self.fc1.forward(z));
        let r2 = relu(&self.fc2.forward(&r1));
        let v = r2
            .to_owned()
            .into_shape_with_order((bsz, c3, cfg.l8()))
            .expect("contiguous");
        let t3 = self.b3.forward(&v);
        let up3 = upsample2(&t3.out);
        let (a_u2, col_u2) = self.u2.forward(&up3);
        let ru2 = relu(&a_u2);
        let t2 = self.b2.forward(&ru2);
        let up2 = upsample2(&t2.out);
        let (a_u1, col_u1) = self.u1.forward(&up2);
        let ru1 = relu(&a_u1);
        let t1 = self.b1.forward(&ru1);
        let up1 = upsample2(&t1.out);
        let (o, col_out) = self.out.forward(&up1);
        let mean = o.index_axis(Axis(1), 0).to_owned();
        let logvar_raw = o.index_axis(Axis(1), 1).to_owned();
        let clamp = T::from_f64(DECODER_LOGVAR_CLAMP);
        let logvar = logvar_raw.mapv(|v| v.min(clamp).max(-clamp));
        let trace = DecoderTrace {
            z: z.clone(),
            r1,
            r2,
            t3,
            up3,
            col_u2,
            ru2,
            t2,
            up2,
            col_u1,
            ru1,
            t1,
            col_out,
            logvar_raw,
        };
        (mean, logvar, trace)
    }

    /// Returns the gradient with respect to z.
    fn backward(
        &mut self,
        cfg: &ArchitectureConfig,
        tr: &DecoderTrace<T>,
        d_mean: &Array2<T>,
        d_logvar: &Array2<T>,
    ) -> Array2<T> {
        let (bsz, l) = d_mean.dim();
        let clamp = T::from_f64(DECODER_LOGVAR_CLAMP);
        let mut d_o = Array3::<T>::zeros((bsz, 2, l));
        for b in 0..bsz {
            for j in 0..l {
                d_o[(b, 0, j)] = d_mean[(b, j)];
                // Clamp: gradient passes only strictly inside the band.
                let raw = tr.logvar_raw[(b, j)];
                if raw.abs() < clamp {
                    d_o[(b, 1, j)] = d_logvar[(b, j)];
                }
            }
        }
        let d_up1 = self.out.backward(&tr.col_out, &d_o, bsz, l);
        let d_t1 = upsample2_backward(&d_up1);
        let d_ru1 = self.b1.backward(&tr.t1, &d_t1);
        let d_au1 = relu_backward(&tr.ru1, &d_ru1);
        let (_, _, l2) = tr.up2.dim();
        let d_up2 = self.u1.backward(&tr.col_u1, &d_au1, bsz, l2);
        let d_t2 = upsample2_backward(&d_up2);
        let d_ru2 = self.b2.backward(&tr.t2, &d_t2);
        let d_au2 = relu_backward(&tr.ru2, &d_ru2);
        let (_, _, l4) = tr.up3.dim();
        let d_up3 = self.u2.backward(&tr.col_u2, &d_au2, bsz, l4);
        let d_t3 = upsample2_backward(&d_up3);
        let d_v = self.b3.backward(&tr.t3, &d_t3);
        let [_, _, c3] = cfg.conv_channels;
        let d_r2_lin = d_v
            .into_shape_with_order((bsz, c3 * cfg.l8()))
            .expect("contiguous");
        let d_a2 = relu_backward(&tr.r2, &d_r2_lin);
        let d_r1 = self.fc2.backward(&tr.r1, &d_a2);
        let d_a1 = relu_backward(&tr.r1, &d_r1);
        self.fc1.backward(&tr.z, &d_a1)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.fc1.tensors_mut();
        v.extend(self.fc2.tensors_mut());
        v.extend(self.b3.tensors_mut());
        v.extend(self.u2.tensors_mut());
        v.extend(self.b2.tensors_mut());
        v.extend(self.u1.tensors_mut());
        v.extend(self.b1.tensors_mut());
        v.extend(self.out.tensors_mut());
        v
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.fc1.tensors();
        v.extend(self.fc2.tensors());
        v.extend(self.b3.tensors());
        v.extend(self.u2.tensors());
        v.extend(self.b2.tensors());
        v.extend(self.u1.tensors());
        v.extend(self.b1.tensors());
        v.extend(self.out.tensors());
        v
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// The full surrogate: both encoders, the decoder, and the data
/// transformations it was fitted under.
#[derive(Debug, Clone)]
pub struct MVAEModel<T> {
    pub config: ArchitectureConfig,
    pub x_encoder: XEncoder<T>,
    pub theta_encoder: ThetaEncoder<T>,
    pub decoder: Decoder<T>,
    /// Response standardization fitted on the training partition; set by
    /// `train` and required for encoding raw observations.
    pub normalization: Option<Standardization>,
    /// Prior box used to scale θ to network inputs; set by `train`.
    pub theta_bounds: Vec<(f64, f64)>,
}

/// One reparameterized draw per sample for each encoder, held fixed through
/// a loss/gradient evaluation so finite differences see a deterministic
/// function.
pub struct LatentDraws<T> {
    pub eps_x: Array2<T>,
    pub eps_theta: Array2<T>,
}

impl<T: Scalar> LatentDraws<T> {
    pub fn sample<R: Rng>(batch: usize, n_z: usize, rng: &mut R) -> Self {
        let mut draw = || {
            Array2::from_shape_simple_fn((batch, n_z), || {
                T::from_f64(rng.sample::<f64, _>(StandardNormal))
            })
        };
        LatentDraws {
            eps_x: draw(),
            eps_theta: draw(),
        }
    }
}

/// Batch-averaged loss values, always reported in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub pred: f64,
    pub regul: f64,
}

/// One training batch in network units: θ scaled to [0,1], responses
/// standardized; `x` is the clean response (encoder input), `x_tilde` the
/// noisy copy (decoder target).
pub struct Batch<'a, T> {
    pub theta: &'a Array2<T>,
    pub x: &'a Array2<T>,
    pub x_tilde: &'a Array2<T>,
}

fn check_finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "non-finite {term} term in MVAE loss"
        )))
    }
}

impl<T: Scalar> MVAEModel<T> {
    /// Freshly initialized model; deterministic in the seed.
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "mvae-init");
        Ok(MVAEModel {
            x_encoder: XEncoder::new(&config, &mut rng),
            theta_encoder: ThetaEncoder::new(&config, &mut rng),
            decoder: Decoder::new(&config, &mut rng),
            config,
            normalization: None,
            theta_bounds: Vec::new(),
        })
    }

    /// All parameter tensors in a fixed order (x-encoder, θ-encoder,
    /// decoder).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.x_encoder.tensors_mut();
        v.extend(self.theta_encoder.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.x_encoder.tensors();
        v.extend(self.theta_encoder.tensors());
        v.extend(self.decoder.tensors());
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat parameter access for the finite-difference harness: global index
    /// over the concatenation of all tensors in `tensors()` order.
    pub fn get_param(&self, index: usize) -> f64 {
        let (t, off) = self.locate(index);
        self.tensors()[t].value.as_slice().unwrap()[off].to_f64()
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (t, off) = self.locate(index);
        self.tensors_mut()[t].value.as_slice_mut().unwrap()[off] = T::from_f64(value);
    }

    pub fn get_grad(&self, index: usize) -> f64 {
        let (t, off) = self.locate(index);
        self.tensors()[t].grad.as_slice().unwrap()[off].to_f64()
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let mut rem = index;
        for (i, t) in self.tensors().iter().enumerate() {
            if rem < t.len() {
                return (i, rem);
            }
            rem -= t.len();
        }
        panic!("parameter index {index} out of range {}", self.param_count());
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for t in self.tensors() {
            if !t.value.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite values in parameter tensor {}",
                    t.name
                )));
            }
        }
        Ok(())
    }

    // -- inference-facing single-row passes --------------------------------

    /// Encode one scaled parameter vector (soft precondition [0,1]^D;
    /// out-of-box values are permitted and simply extrapolate).
    pub fn encode_theta(&self, theta_scaled: &[f64]) -> Result<GaussianLatent> {
        if theta_scaled.len() != self.config.theta_dim {
            return Err(Error::Parameter(format!(
                "theta has dimension {}, model expects {}",
                theta_scaled.len(),
                self.config.theta_dim
            )));
        }
        let row = Array2::from_shape_fn((1, theta_scaled.len()), |(_, j)| {
            T::from_f64(theta_scaled[j])
        });
        let (mean, logvar, _) = self.theta_encoder.forward(&row);
        self.latent_from_rows(&mean, &logvar)
    }

    /// Encode one standardized response vector.
    pub fn encode_x(&self, x_standardized: &[f64]) -> Result<GaussianLatent> {
        if x_standardized.len() != self.config.x_len {
            return Err(Error::Parameter(format!(
                "response has {} points, model expects {}",
                x_standardized.len(),
                self.config.x_len
            )));
        }
        let row = Array2::from_shape_fn((1, x_standardized.len()), |(_, j)| {
            T::from_f64(x_standardized[j])
        });
        let (mean, logvar, _) = self.x_encoder.forward(&row);
        self.latent_from_rows(&mean, &logvar)
    }

    /// Decode one latent point to Gaussian observation parameters in
    /// standardized response space.
    pub fn decode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != self.config.n_z {
            return Err(Error::Parameter(format!(
                "latent point has dimension {}, model expects {}",
                z.len(),
                self.config.n_z
            )));
        }
        let row = Array2::from_shape_fn((1, z.len()), |(_, j)| T::from_f64(z[j]));
        let (mean, logvar, _) = self.decoder.forward(&self.config, &row);
        let m: Vec<f64> = mean.row(0).iter().map(|v| (*v).to_f64()).collect();
        let l: Vec<f64> = logvar.row(0).iter().map(|v| (*v).to_f64()).collect();
        if m.iter().chain(&l).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "decoder produced non-finite output; model parameters corrupt".into(),
            ));
        }
        Ok((m, l))
    }

    fn latent_from_rows(&self, mean: &Array2<T>, logvar: &Array2<T>) -> Result<GaussianLatent> {
        let lat = GaussianLatent {
            mean: mean.row(0).iter().map(|v| (*v).to_f64()).collect(),
            log_var: logvar.row(0).iter().map(|v| (*v).to_f64()).collect(),
        };
        if lat.is_finite() {
            Ok(lat)
        } else {
            Err(Error::Numerical(
                "encoder produced non-finite latent; model parameters corrupt".into(),
            ))
        }
    }

    // -- loss ----------------------------------------------------------------

    /// Loss with caller-supplied reparameterization draws; forward only.
    pub fn loss_with_draws(
        &self,
        batch: &Batch<'_, T>,
        alpha: f64,
        draws: &LatentDraws<T>,
    ) -> Result<LossTerms> {
        let (terms, _) = self.forward_full(batch, alpha, draws)?;
        Ok(terms)
    }

    /// Loss with fresh draws from `rng` (the spec's `loss` operation).
    pub fn loss<R: Rng>(&self, batch: &Batch<'_, T>, alpha: f64, rng: &mut R) -> Result<LossTerms> {
        let draws = LatentDraws::sample(batch.theta.nrows(), self.config.n_z, rng);
        self.loss_with_draws(batch, alpha, &draws)
    }

    fn forward_full(
        &self,
        batch: &Batch<'_, T>,
        alpha: f64,
        draws: &LatentDraws<T>,
    ) -> Result<(LossTerms, ForwardState<T>)> {
        let bsz = batch.theta.nrows();
        assert!(bsz > 0, "empty batch");
        assert_eq!(batch.x.nrows(), bsz);
        assert_eq!(batch.x_tilde.nrows(), bsz);
        assert_eq!(draws.eps_x.dim(), (bsz, self.config.n_z));
        assert_eq!(draws.eps_theta.dim(), (bsz, self.config.n_z));

        let (mx, lx, tr_x) = self.x_encoder.forward(batch.x);
        let (mt, lt, tr_t) = self.theta_encoder.forward(batch.theta);

        let half = T::from_f64(0.5);
        let reparam = |m: &Array2<T>, l: &Array2<T>, eps: &Array2<T>| {
            let mut z = m.clone();
            ndarray::Zip::from(&mut z).and(l).and(eps).for_each(|z, &l, &e| {
                *z += (l * half).exp() * e;
            });
            z
        };
        let zx = reparam(&mx, &lx, &draws.eps_x);
        let zt = reparam(&mt, &lt, &draws.eps_theta);

        let (dmx, dlx, tr_dx) = self.decoder.forward(&self.config, &zx);
        let (dmt, dlt, tr_dt) = self.decoder.forward(&self.config, &zt);

        let recon = check_finite("reconstruction", gaussian_nll_mean(&dmx, &dlx, batch.x_tilde))?;
        let pred = check_finite("prediction", gaussian_nll_mean(&dmt, &dlt, batch.x_tilde))?;
        let regul = check_finite("regularization", regul_mean(&mx, &lx, &mt, &lt, alpha))?;
        let terms = LossTerms {
            total: recon + pred + regul,
            recon,
            pred,
            regul,
        };
        let state = ForwardState {
            mx,
            lx,
            mt,
            lt,
            zx,
            zt,
            dmx,
            dlx,
            dmt,
            dlt,
            tr_x,
            tr_t,
            tr_dx,
            tr_dt,
        };
        Ok((terms, state))
    }

    /// Forward and reverse pass with per-term weights (c_recon, c_pred,
    /// c_regul); gradients of c_r·recon + c_p·pred + c_g·regul accumulate
    /// into the parameter tensors. Weights (1,1,1) give the training loss;
    /// the switch-off cases pin term coupling in tests.
    pub fn backward_weighted(
        &mut self,
        batch: &Batch<'_, T>,
        alpha: f64,
        draws: &LatentDraws<T>,
        weights: (f64, f64, f64),
    ) -> Result<LossTerms> {
        let (terms, st) = self.forward_full(batch, alpha, draws)?;
        let bsz = batch.theta.nrows();
        let (c_r, c_p, c_g) = weights;
        let half = T::from_f64(0.5);
        let one = T::one();

        // Decoder seeds from the two Gaussian NLL terms.
        let nll_seeds = |mean: &Array2<T>, logvar: &Array2<T>, target: &Array2<T>, w: f64| {
            let scale = T::from_f64(w / bsz as f64);
            let mut d_mean = Array2::<T>::zeros(mean.raw_dim());
            let mut d_logvar = Array2::<T>::zeros(mean.raw_dim());
            ndarray::Zip::from(&mut d_mean)
                .and(&mut d_logvar)
                .and(mean)
                .and(logvar)
                .and(target)
                .for_each(|dm, dl, &m, &l, &t| {
                    let e = (-l).exp();
                    let r = m - t;
                    *dm = scale * r * e;
                    *dl = scale * half * (one - r * r * e);
                });
            (d_mean, d_logvar)
        };

        let (d_dmx, d_dlx) = nll_seeds(&st.dmx, &st.dlx, batch.x_tilde, c_r);
        let d_zx = self.decoder.backward(&self.config, &st.tr_dx, &d_dmx, &d_dlx);
        let (d_dmt, d_dlt) = nll_seeds(&st.dmt, &st.dlt, batch.x_tilde, c_p);
        let d_zt = self.decoder.backward(&self.config, &st.tr_dt, &d_dmt, &d_dlt);

        // Encoder seeds: reparameterization path plus the KL terms.
        // For KL(q1‖q2) with logvars l1, l2:
        //   ∂m1 = (m1−m2)e^{−l2}        ∂m2 = (m2−m1)e^{−l2}
        //   ∂l1 = ½(e^{l1−l2} − 1)      ∂l2 = ½(1 − (e^{l1}+(m1−m2)²)e^{−l2})
        let g = T::from_f64(c_g / bsz as f64);
        let al = T::from_f64(alpha);
        let mut d_mx = Array2::<T>::zeros(d_zx.raw_dim());
        let mut d_lx = Array2::<T>::zeros(d_zx.raw_dim());
        let mut d_mt = Array2::<T>::zeros(d_zt.raw_dim());
        let mut d_lt = Array2::<T>::zeros(d_zt.raw_dim());
        for b in 0..bsz {
            for d in 0..self.config.n_z {
                let mx = st.mx[(b, d)];
                let lx = st.lx[(b, d)];
                let mt = st.mt[(b, d)];
                let lt = st.lt[(b, d)];
                let zx = st.zx[(b, d)];
                let zt = st.zt[(b, d)];

                // Reparameterization path.
                let mut dmx = d_zx[(b, d)];
                let mut dlx = d_zx[(b, d)] * half * (zx - mx);
                let mut dmt = d_zt[(b, d)];
                let mut dlt = d_zt[(b, d)] * half * (zt - mt);

                // Prior KLs.
                dmx += g * mx;
                dlx += g * half * (lx.exp() - one);
                dmt += g * mt;
                dlt += g * half * (lt.exp() - one);

                // Symmetric cross terms, weight α.
                let e_neg_lt = (-lt).exp();
                let e_neg_lx = (-lx).exp();
                let dm = mx - mt;
                // KL(q_x ‖ q_t): q1 = x, q2 = t.
                dmx += g * al * dm * e_neg_lt;
                dlx += g * al * half * ((lx - lt).exp() - one);
                dmt += g * al * (-dm) * e_neg_lt;
                dlt += g * al * half * (one - (lx.exp() + dm * dm) * e_neg_lt);
                // KL(q_t ‖ q_x): q1 = t, q2 = x.
                dmt += g * al * (-dm) * e_neg_lx;
                dlt += g * al * half * ((lt - lx).exp() - one);
                dmx += g * al * dm * e_neg_lx;
                dlx += g * al * half * (one - (lt.exp() + dm * dm) * e_neg_lx);

                d_mx[(b, d)] = dmx;
                d_lx[(b, d)] = dlx;
                d_mt[(b, d)] = dmt;
                d_lt[(b, d)] = dlt;
            }
        }

        // NLL seeds were already scaled by their weights; the z-path seeds
        // came back through the decoder with those weights folded in, so the
        // encoder backward just propagates.
        self.x_encoder.backward(&st.tr_x, &d_mx, &d_lx);
        self.theta_encoder.backward(&st.tr_t, &d_mt, &d_lt);
        Ok(terms)
    }
}

/// Intermediates the reverse pass needs, produced by `forward_full`.
struct ForwardState<T> {
    mx: Array2<T>,
    lx: Array2<T>,
    mt: Array2<T>,
    lt: Array2<T>,
    zx: Array2<T>,
    zt: Array2<T>,
    dmx: Array2<T>,
    dlx: Array2<T>,
    dmt: Array2<T>,
    dlt: Array2<T>,
    tr_x: XEncTrace<T>,
    tr_t: ThetaEncTrace<T>,
    tr_dx: DecoderTrace<T>,
    tr_dt: DecoderTrace<T>,
}

/// Batch mean of the per-sample Gaussian negative log-likelihood
/// Σ_j ½(ln 2π + l_j + (t_j−m_j)² e^{−l_j}).
fn gaussian_nll_mean<T: Scalar>(mean: &Array2<T>, logvar: &Array2<T>, target: &Array2<T>) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0f64;
    ndarray::Zip::from(mean).and(logvar).and(target).for_each(|&m, &l, &t| {
        let lf = l.to_f64();
        let r = t.to_f64() - m.to_f64();
        acc += 0.5 * (ln2pi + lf + r * r * (-lf).exp());
    });
    acc / mean.nrows() as f64
}

/// Batch mean of the regularization term.
fn regul_mean<T: Scalar>(
    mx: &Array2<T>,
    lx: &Array2<T>,
    mt: &Array2<T>,
    lt: &Array2<T>,
    alpha: f64,
) -> f64 {
    let bsz = mx.nrows();
    let mut acc = 0.0f64;
    let kl = |m1: f64, l1: f64, m2: f64, l2: f64| {
        0.5 * ((l2 - l1) + ((l1.exp() + (m1 - m2) * (m1 - m2)) / l2.exp()) - 1.0)
    };
    for b in 0..bsz {
        for d in 0..mx.ncols() {
            let (a, la) = (mx[(b, d)].to_f64(), lx[(b, d)].to_f64());
            let (c, lc) = (mt[(b, d)].to_f64(), lt[(b, d)].to_f64());
            acc += kl(a, la, 0.0, 0.0) + kl(c, lc, 0.0, 0.0);
            acc += alpha * (kl(a, la, c, lc) + kl(c, lc, a, la));
        }
    }
    acc / bsz as f64
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Optimizer and schedule settings for `train`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub alpha: f64,
    pub max_epochs: usize,
    pub rng_seed: u64,
}

impl TrainingConfig {
    /// Benchmark defaults: Adam at 1e-3, batches of 256, early stopping
    /// after 20 epochs without validation improvement.
    pub fn benchmark() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            patience_epochs: 20,
            alpha: 5.0,
            max_epochs: 500,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch cap must be positive".into(),
            ));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-epoch record of batch-averaged losses.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossTerms,
    pub val: LossTerms,
}

/// Loss history of a training run.
#[derive(Debug, Clone)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best_val_total(&self) -> f64 {
        self.epochs[self.best_epoch].val.total
    }

    /// Epoch-by-epoch CSV with a term breakdown.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| {
            Error::io(path, std::io::Error::other(e))
        })?;
        w.write_record([
            "epoch",
            "train_total",
            "train_recon",
            "train_pred",
            "train_regul",
            "val_total",
            "val_recon",
            "val_pred",
            "val_regul",
            "is_best",
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train.total.to_string(),
                e.train.recon.to_string(),
                e.train.pred.to_string(),
                e.train.regul.to_string(),
                e.val.total.to_string(),
                e.val.recon.to_string(),
                e.val.pred.to_string(),
                e.val.regul.to_string(),
                (e.epoch == self.best_epoch).to_string(),
            ])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn lift<T: Scalar>(a: &Array2<f32>) -> Array2<T> {
    a.mapv(|v| T::from_f64(f64::from(v)))
}

fn gather_rows<T: Scalar>(src: &Array2<T>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::<T>::zeros((rows.len(), src.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&src.row(r));
    }
    out
}

/// Train the model on a split dataset. Runs Adam over shuffled minibatches,
/// stops early when validation stalls for `patience_epochs`, and leaves the
/// parameters of the best validation epoch in the model. The validation
/// reparameterization draws are sampled once and reused every epoch so the
/// early-stopping signal tracks parameter movement, not fresh Monte Carlo
/// noise.
///
/// On divergence (non-finite loss) the best finite parameters are restored
/// and an error is returned; the model remains usable.
pub fn train<T: Scalar>(
    model: &mut MVAEModel<T>,
    dataset: &TrainingDataset,
    config: &TrainingConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    if dataset.dim_x() != model.config.x_len || dataset.dim_theta() != model.config.theta_dim {
        return Err(Error::Config(format!(
            "dataset shape ({} θ-dims, {} response points) does not match the model ({}, {})",
            dataset.dim_theta(),
            dataset.dim_x(),
            model.config.theta_dim,
            model.config.x_len
        )));
    }
    crate::nn::retain_large_allocations();
    let train_rows: Vec<u32> = dataset.train_rows()?.to_vec();
    let val_rows: Vec<u32> = dataset.val_rows()?.to_vec();
    let (xc_tr, xn_tr) = dataset.standardized_responses(&train_rows)?;
    let th_tr = dataset.scaled_thetas(&train_rows);
    let (xc_va, xn_va) = dataset.standardized_responses(&val_rows)?;
    let th_va = dataset.scaled_thetas(&val_rows);
    let (xc_tr, xn_tr, th_tr) = (lift::<T>(&xc_tr), lift::<T>(&xn_tr), lift::<T>(&th_tr));
    let (xc_va, xn_va, th_va) = (lift::<T>(&xc_va), lift::<T>(&xn_va), lift::<T>(&th_va));

    model.normalization = Some(dataset.standardization()?.clone());
    model.theta_bounds = dataset.bounds.clone();

    let n_tr = train_rows.len();
    let n_va = val_rows.len();
    let bs = config.batch_size;
    let n_z = model.config.n_z;

    // Fixed validation draws (see doc comment).
    let mut val_rng = crate::rng::stream(config.rng_seed, "mvae-val-draws");
    let val_draws = LatentDraws::<T>::sample(n_va, n_z, &mut val_rng);

    let val_loss = |model: &MVAEModel<T>| -> Result<LossTerms> {
        let mut tot = LossTerms {
            total: 0.0,
            recon: 0.0,
            pred: 0.0,
            regul: 0.0,
        };
        let mut start = 0;
        while start < n_va {
            let end = (start + bs).min(n_va);
            let rows: Vec<usize> = (start..end).collect();
            let batch_draws = LatentDraws {
                eps_x: gather_rows(&val_draws.eps_x, &rows),
                eps_theta: gather_rows(&val_draws.eps_theta, &rows),
            };
            let b = Batch {
                theta: &gather_rows(&th_va, &rows),
                x: &gather_rows(&xc_va, &rows),
                x_tilde: &gather_rows(&xn_va, &rows),
            };
            let t = model.loss_with_draws(&b, config.alpha, &batch_draws)?;
            let w = rows.len() as f64 / n_va as f64;
            tot.total += t.total * w;
            tot.recon += t.recon * w;
            tot.pred += t.pred * w;
            tot.regul += t.regul * w;
            start = end;
        }
        Ok(tot)
    };

    let mut opt = Adam::<T>::new(config.learning_rate);
    let mut history = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<ArrayD<T>> =
        model.tensors().iter().map(|t| t.value.clone()).collect();

    let restore = |model: &mut MVAEModel<T>, params: &[ArrayD<T>]| {
        for (t, p) in model.tensors_mut().into_iter().zip(params) {
            t.value.assign(p);
        }
    };

    for epoch in 0..config.max_epochs {
        // Deterministic per-epoch shuffle and draw streams.
        let mut shuffle_rng = crate::rng::stream_indexed(config.rng_seed, "mvae-shuffle", epoch as u64);
        let mut order: Vec<usize> = (0..n_tr).collect();
        for i in (1..n_tr).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut draw_rng = crate::rng::stream_indexed(config.rng_seed, "mvae-draws", epoch as u64);

        let mut train_tot = LossTerms {
            total: 0.0,
            recon: 0.0,
            pred: 0.0,
            regul: 0.0,
        };
        for chunk in order.chunks(bs) {
            let b = Batch {
                theta: &gather_rows(&th_tr, chunk),
                x: &gather_rows(&xc_tr, chunk),
                x_tilde: &gather_rows(&xn_tr, chunk),
            };
            let draws = LatentDraws::sample(chunk.len(), n_z, &mut draw_rng);
            model.zero_grad();
            let terms = match model.backward_weighted(&b, config.alpha, &draws, (1.0, 1.0, 1.0)) {
                Ok(t) => t,
                Err(e) => {
                    restore(model, &best_params);
                    return Err(Error::Numerical(format!(
                        "training diverged at epoch {epoch}: {e}; best parameters restored"
                    )));
                }
            };
            let mut tensors = model.tensors_mut();
            opt.step(&mut tensors);
            let w = chunk.len() as f64 / n_tr as f64;
            train_tot.total += terms.total * w;
            train_tot.recon += terms.recon * w;
            train_tot.pred += terms.pred * w;
            train_tot.regul += terms.regul * w;
        }

        let val = match val_loss(model) {
            Ok(v) => v,
            Err(e) => {
                restore(model, &best_params);
                return Err(Error::Numerical(format!(
                    "validation diverged at epoch {epoch}: {e}; best parameters restored"
                )));
            }
        };
        history.push(EpochStats {
            epoch,
            train: train_tot,
            val,
        });
        if val.total < best_val {
            best_val = val.total;
            best_epoch = epoch;
            for (p, t) in best_params.iter_mut().zip(model.tensors()) {
                p.assign(&t.value);
            }
        }
        if epoch - best_epoch >= config.patience_epochs && epoch + 1 < config.max_epochs {
            break;
        }
    }

    restore(model, &best_params);
    Ok(TrainingHistory {
        epochs: history,
        best_epoch,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Save parameters plus everything needed to rebuild and reuse the model.
pub fn save_model<T: Scalar>(model: &MVAEModel<T>, path: &std::path::Path) -> Result<()> {
    let tensors = model.tensors();
    let names: Vec<&str> = tensors.iter().map(|t| t.name).collect();
    let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.value.shape().to_vec()).collect();
    let metadata = serde_json::json!({
        "architecture": model.config,
        "normalization": model.normalization,
        "theta_bounds": model.theta_bounds,
        "tensor_names": names,
        "tensor_shapes": shapes,
    });
    let flats: Vec<Array2<f32>> = tensors
        .iter()
        .map(|t| {
            Array2::from_shape_fn((1, t.len()), |(_, j)| {
                t.value.as_slice().unwrap()[j].to_f64() as f32
            })
        })
        .collect();
    let arrays: Vec<(&str, &Array2<f32>)> = names
        .iter()
        .zip(&flats)
        .map(|(n, a)| (*n, a))
        .collect();
    container::write_container(path, MODEL_MAGIC, MODEL_VERSION, &metadata, &arrays)
}

/// Load a model saved by [`save_model`]. Parameters were stored in 32-bit;
/// they are widened elementwise when `T = f64`.
pub fn load_model<T: Scalar>(path: &std::path::Path) -> Result<MVAEModel<T>> {
    let c = container::read_container(path, MODEL_MAGIC)?;
    if c.version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {} (expected {MODEL_VERSION})",
            c.version
        )));
    }
    let field = |name: &str| -> Result<serde_json::Value> {
        c.metadata
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("model metadata missing {name:?}")))
    };
    let config: ArchitectureConfig = serde_json::from_value(field("architecture")?)
        .map_err(|e| Error::Format(format!("bad architecture metadata: {e}")))?;
    let normalization: Option<Standardization> = serde_json::from_value(field("normalization")?)
        .map_err(|e| Error::Format(format!("bad normalization metadata: {e}")))?;
    let theta_bounds: Vec<(f64, f64)> = serde_json::from_value(field("theta_bounds")?)
        .map_err(|e| Error::Format(format!("bad bounds metadata: {e}")))?;
    let names: Vec<String> = serde_json::from_value(field("tensor_names")?)
        .map_err(|e| Error::Format(format!("bad tensor names: {e}")))?;
    let shapes: Vec<Vec<usize>> = serde_json::from_value(field("tensor_shapes")?)
        .map_err(|e| Error::Format(format!("bad tensor shapes: {e}")))?;

    let mut model = MVAEModel::<T>::new(config, 0)?;
    model.normalization = normalization;
    model.theta_bounds = theta_bounds;
    {
        let tensors = model.tensors_mut();
        if tensors.len() != names.len() {
            return Err(Error::Format(format!(
                "model file has {} tensors, architecture defines {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((t, name), shape) in tensors.into_iter().zip(&names).zip(&shapes) {
            if t.name != name || t.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor mismatch: file has {name:?} {shape:?}, architecture expects {:?} {:?}",
                    t.name,
                    t.value.shape()
                )));
            }
            let data = c.array(name)?;
            if data.len() != t.len() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has {} values, expected {}",
                    data.len(),
                    t.len()
                )));
            }
            for (dst, src) in t.value.as_slice_mut().unwrap().iter_mut().zip(data.iter()) {
                *dst = T::from_f64(f64::from(*src));
            }
        }
    }
    model.assert_finite()?;
    Ok(model)
}
