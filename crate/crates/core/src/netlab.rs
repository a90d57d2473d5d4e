//! Hardware-in-the-loop networks. The first layer of every model runs in the
//! simulated array; activations, losses and weight updates run digitally.
//!
//! Three architectures are provided:
//!
//! - [`FcClassifier`]: 3x3 array, four banks, softmax + cross-entropy.
//!   Optionally binarized with a straight-through estimator.
//! - [`Autoencoder`]: analog encoder 9 -> 4 on normalized capacitance,
//!   digital sigmoid decoder 4 -> 9, MSE on reconstructed induced capacitance.
//! - [`CnnClassifier`]: 5x5 array computing one shared 3x3 kernel, sigmoid,
//!   digital FC head 9 -> 4, softmax + cross-entropy.
//!
//! Gradients through the array treat the series capacitances as constants:
//! `dU_m/dV_mn = C_n / (N * c0)`. The normalization divisor is a projection
//! step applied at the start of every epoch and is not differentiated.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{
    build_conv_array, build_fc_array, conv_forward_series, fc_forward_series, schedule_conv,
    series_image, ArrayTopology, ConvSchedule,
};
use crate::dataset::{
    balanced_batch, classify_bitmap, sample_batch, CapacitiveSample, CLASS_COUNT,
};
use crate::device::{mac_evaluate, SensorParams};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Voltage weights `V_mn` programmed into the array, with the divisor used
/// by the most recent normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    pub v: Array2<f64>,
    pub beta: f64,
}

impl WeightBank {
    pub fn new(v: Array2<f64>) -> Self {
        WeightBank { v, beta: 1.0 }
    }

    pub fn max_abs(&self) -> f64 {
        self.v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn row(&self, m: usize) -> Vec<f64> {
        self.v.row(m).to_vec()
    }
}

/// Divides every weight by `beta = max |v_mn|`. An all-zero bank is
/// returned unchanged with `beta = 1`.
pub fn normalize_weights(bank: &WeightBank) -> WeightBank {
    let beta = bank.max_abs();
    if beta == 0.0 || !beta.is_finite() {
        return WeightBank {
            v: bank.v.clone(),
            beta: 1.0,
        };
    }
    WeightBank {
        v: bank.v.mapv(|x| x / beta),
        beta,
    }
}

/// Sign binarization with `sign(0) = +1`.
pub fn binarize_weights(bank: &WeightBank) -> WeightBank {
    WeightBank {
        v: bank.v.mapv(|x| if x < 0.0 { -1.0 } else { 1.0 }),
        beta: bank.beta,
    }
}

pub fn softmax(u: &[f64]) -> Result<Vec<f64>> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("softmax of non-finite input {u:?}")));
    }
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`] at `z`.
pub fn sigmoid_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

pub fn cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    -p.iter()
        .zip(y)
        .map(|(&pi, &yi)| yi * pi.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

fn uniform_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

/// Result of presenting one sample to a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: bool,
    /// Per-output values recorded in the history (`U_m`, codes or logits).
    pub outputs: Vec<f64>,
}

/// A model trainable by the hardware-in-the-loop SGD loop.
pub trait Trainable: Clone + Send + Sync {
    fn architecture(&self) -> Architecture;
    /// All trainable parameters, flattened in a fixed order.
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    /// Rescales the array weights into the programmable range.
    fn project(&mut self);
    fn loss(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<f64>;
    /// Loss and its gradient with respect to [`Trainable::params`].
    fn loss_and_grad(
        &self,
        sample: &CapacitiveSample,
        sensor: &SensorParams,
    ) -> Result<(f64, Vec<f64>)>;
    fn evaluate(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<Evaluation>;
}

fn set_matrix(dst: &mut Array2<f64>, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s;
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(format!("{expected} parameters"), got));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    FcClassifier,
    Autoencoder,
    CnnClassifier,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::FcClassifier => "fc_classifier",
            Architecture::Autoencoder => "autoencoder",
            Architecture::CnnClassifier => "cnn_classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Architecture> {
        [
            Architecture::FcClassifier,
            Architecture::Autoencoder,
            Architecture::CnnClassifier,
        ]
        .into_iter()
        .find(|a| a.name() == s.trim())
    }

    /// Side length of the sensor array.
    pub fn resolution(self) -> usize {
        match self {
            Architecture::CnnClassifier => 5,
            _ => 3,
        }
    }
}

/// Array layer shape and activations of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub rows: usize,
    pub cols: usize,
    /// Outputs of the analog layer (FC neurons or convolution windows).
    pub analog_outputs: usize,
    pub banks: usize,
}

impl NetworkSpec {
    pub fn for_architecture(architecture: Architecture) -> Self {
        match architecture {
            Architecture::FcClassifier | Architecture::Autoencoder => NetworkSpec {
                architecture,
                rows: 3,
                cols: 3,
                analog_outputs: 4,
                banks: 4,
            },
            Architecture::CnnClassifier => NetworkSpec {
                architecture,
                rows: 5,
                cols: 5,
                analog_outputs: 9,
                banks: 9,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// FC classifier

#[derive(Debug, Clone, PartialEq)]
pub struct FcClassifier {
    pub weights: WeightBank,
    /// Forward passes use sign(V); gradients update the latent V.
    pub binarize: bool,
    topology: ArrayTopology,
}

impl FcClassifier {
    pub const INPUTS: usize = 9;

    pub fn new(weights: WeightBank, binarize: bool) -> Result<Self> {
        if weights.v.dim() != (CLASS_COUNT, Self::INPUTS) {
            return Err(Error::shape(
                "4x9 weights",
                format!("{}x{}", weights.v.nrows(), weights.v.ncols()),
            ));
        }
        Ok(FcClassifier {
            weights,
            binarize,
            topology: build_fc_array(3, 3, CLASS_COUNT)?,
        })
    }

    /// Weights uniform in [-1, 1].
    pub fn random<R: Rng + ?Sized>(rng: &mut R, binarize: bool) -> Self {
        let v = uniform_matrix(CLASS_COUNT, Self::INPUTS, 1.0, rng);
        FcClassifier::new(WeightBank::new(v), binarize).expect("fixed shape")
    }

    pub fn topology(&self) -> &ArrayTopology {
        &self.topology
    }

    /// Voltages actually applied to the array.
    pub fn programmed(&self) -> WeightBank {
        if self.binarize {
            binarize_weights(&self.weights)
        } else {
            self.weights.clone()
        }
    }

    /// Analog outputs `U_m` for an induced-capacitance image.
    pub fn forward(&self, c_i: &Array2<f64>, sensor: &SensorParams) -> Result<Vec<f64>> {
        let series = series_image(c_i, sensor.c0)?;
        fc_forward_series(&self.topology, &series, &self.programmed(), sensor.c0)
    }
}

impl Trainable for FcClassifier {
    fn architecture(&self) -> Architecture {
        Architecture::FcClassifier
    }

    fn params(&self) -> Vec<f64> {
        self.weights.v.iter().copied().collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(self.weights.v.len(), params.len())?;
        set_matrix(&mut self.weights.v, params);
        Ok(())
    }

    fn project(&mut self) {
        self.weights = normalize_weights(&self.weights);
    }

    fn loss(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<f64> {
        let u = self.forward(&sample.c_i, sensor)?;
        Ok(cross_entropy(&softmax(&u)?, &sample.label))
    }

    fn loss_and_grad(
        &self,
        sample: &CapacitiveSample,
        sensor: &SensorParams,
    ) -> Result<(f64, Vec<f64>)> {
        let series = series_image(&sample.c_i, sensor.c0)?;
        let u = fc_forward_series(&self.topology, &series, &self.programmed(), sensor.c0)?;
        let p = softmax(&u)?;
        let loss = cross_entropy(&p, &sample.label);
        let scale = 1.0 / (Self::INPUTS as f64 * sensor.c0);
        let mut grad = Vec::with_capacity(CLASS_COUNT * Self::INPUTS);
        for (pm, ym) in p.iter().zip(&sample.label) {
            let dz = pm - ym;
            grad.extend(series.iter().map(|&c| dz * c * scale));
        }
        Ok((loss, grad))
    }

    fn evaluate(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<Evaluation> {
        let u = self.forward(&sample.c_i, sensor)?;
        Ok(Evaluation {
            correct: argmax(&u) == sample.glyph().index(),
            outputs: u,
        })
    }
}

// ---------------------------------------------------------------------------
// Autoencoder

/// Intermediate values of one autoencoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderPass {
    /// Series capacitance of the input, `C_n`.
    pub c_series: Vec<f64>,
    /// `A_m = sum_n C_n V_mn`, measured in the array.
    pub analog: Vec<f64>,
    /// `U_m = (A_m - B_m) / C`.
    pub u: Vec<f64>,
    /// Encoder activations `phi_m`.
    pub code: Vec<f64>,
    /// Decoder pre-activations `Z_n`.
    pub z: Vec<f64>,
    /// Reconstructed series capacitance `C'_n`.
    pub c_series_rec: Vec<f64>,
    /// Reconstructed induced capacitance `C'_I,n`.
    pub c_i_rec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    /// Encoder voltages, hidden x inputs.
    pub encoder: WeightBank,
    /// Digital decoder weights `W`, inputs x hidden.
    pub decoder: Array2<f64>,
    /// Series capacitance of an inside pixel.
    pub c_h: f64,
    /// Series capacitance of an outside pixel.
    pub c_l: f64,
}

impl Autoencoder {
    pub const INPUTS: usize = 9;
    pub const HIDDEN: usize = 4;

    pub fn new(encoder: WeightBank, decoder: Array2<f64>, sensor: &SensorParams) -> Result<Self> {
        sensor.validate()?;
        if encoder.v.dim() != (Self::HIDDEN, Self::INPUTS)
            || decoder.dim() != (Self::INPUTS, Self::HIDDEN)
        {
            return Err(Error::shape(
                "4x9 encoder and 9x4 decoder",
                format!("{:?} and {:?}", encoder.v.dim(), decoder.dim()),
            ));
        }
        Ok(Autoencoder {
            encoder,
            decoder,
            c_h: sensor.c_high(),
            c_l: sensor.c_low(),
        })
    }

    /// Uniform initialization in `[-1/sqrt(N), 1/sqrt(N)]` with `N = 9` inputs, for both layers.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, sensor: &SensorParams) -> Result<Self> {
        let enc = uniform_matrix(
            Self::HIDDEN,
            Self::INPUTS,
            (Self::INPUTS as f64).sqrt().recip(),
            rng,
        );
        let dec = uniform_matrix(
            Self::INPUTS,
            Self::HIDDEN,
            (Self::INPUTS as f64).sqrt().recip(),
            rng,
        );
        Autoencoder::new(WeightBank::new(enc), dec, sensor)
    }

    pub fn contrast(&self) -> f64 {
        self.c_h - self.c_l
    }

    /// `(C - C_L) / (C_H - C_L)`
    pub fn normalize_capacitance(&self, c: f64) -> f64 {
        (c - self.c_l) / self.contrast()
    }

    /// Inverse of [`Autoencoder::normalize_capacitance`].
    pub fn denormalize_capacitance(&self, c_nl: f64) -> f64 {
        c_nl * self.contrast() + self.c_l
    }

    /// Encoder outputs `U_m` computed directly as `sum_n C_nl,n V_mn`.
    pub fn direct_encoding(&self, c_series: &[f64]) -> Vec<f64> {
        (0..Self::HIDDEN)
            .map(|m| {
                c_series
                    .iter()
                    .enumerate()
                    .map(|(n, &c)| self.normalize_capacitance(c) * self.encoder.v[(m, n)])
                    .sum()
            })
            .collect()
    }

    pub fn forward(&self, c_i: &Array2<f64>, sensor: &SensorParams) -> Result<AutoencoderPass> {
        if c_i.len() != Self::INPUTS {
            return Err(Error::shape("3x3 image", format!("{:?}", c_i.dim())));
        }
        let c0 = sensor.c0;
        let c_series: Vec<f64> = series_image(c_i, c0)?.iter().copied().collect();
        let n = Self::INPUTS as f64;
        let mut analog = Vec::with_capacity(Self::HIDDEN);
        let mut u = Vec::with_capacity(Self::HIDDEN);
        for m in 0..Self::HIDDEN {
            let row = self.encoder.row(m);
            // The array reports A / (N c0).
            let a = mac_evaluate(&c_series, &row, c0)? * n * c0;
            let b = self.c_l * row.iter().sum::<f64>();
            analog.push(a);
            u.push((a - b) / self.contrast());
        }
        let code: Vec<f64> = u.iter().map(|&x| sigmoid(x)).collect();
        let z: Vec<f64> = (0..Self::INPUTS)
            .map(|i| {
                (0..Self::HIDDEN)
                    .map(|m| self.decoder[(i, m)] * code[m])
                    .sum()
            })
            .collect();
        let c_series_rec: Vec<f64> = z
            .iter()
            .map(|&zn| self.denormalize_capacitance(sigmoid(zn)))
            .collect();
        let c_i_rec = c_series_rec
            .iter()
            .map(|&c| {
                assert!(
                    c < c0,
                    "reconstructed series capacitance {c} reached c0 {c0}"
                );
                c * c0 / (c0 - c)
            })
            .collect();
        Ok(AutoencoderPass {
            c_series,
            analog,
            u,
            code,
            z,
            c_series_rec,
            c_i_rec,
        })
    }

    /// Reconstructed bitmap: a pixel is inside when its reconstructed series
    /// capacitance exceeds `(C_H + C_L) / 2`.
    pub fn reconstruct_bitmap(&self, pass: &AutoencoderPass, side: usize) -> Array2<bool> {
        let mid = 0.5 * (self.c_h + self.c_l);
        Array2::from_shape_fn((side, side), |(r, c)| pass.c_series_rec[r * side + c] > mid)
    }

    /// Mean squared reconstruction error of the induced capacitance, in pF^2.
    pub fn mse(pass: &AutoencoderPass, c_i: &Array2<f64>) -> f64 {
        pass.c_i_rec
            .iter()
            .zip(c_i.iter())
            .map(|(r, t)| (r - t).powi(2))
            .sum::<f64>()
            / Self::INPUTS as f64
    }
}

impl Trainable for Autoencoder {
    fn architecture(&self) -> Architecture {
        Architecture::Autoencoder
    }

    fn params(&self) -> Vec<f64> {
        self.encoder
            .v
            .iter()
            .chain(self.decoder.iter())
            .copied()
            .collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let split = self.encoder.v.len();
        check_len(split + self.decoder.len(), params.len())?;
        set_matrix(&mut self.encoder.v, &params[..split]);
        set_matrix(&mut self.decoder, &params[split..]);
        Ok(())
    }

    fn project(&mut self) {
        self.encoder = normalize_weights(&self.encoder);
    }

    fn loss(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<f64> {
        Ok(Self::mse(&self.forward(&sample.c_i, sensor)?, &sample.c_i))
    }

    fn loss_and_grad(
        &self,
        sample: &CapacitiveSample,
        sensor: &SensorParams,
    ) -> Result<(f64, Vec<f64>)> {
        let pass = self.forward(&sample.c_i, sensor)?;
        let loss = Self::mse(&pass, &sample.c_i);
        let c0 = sensor.c0;
        let n = Self::INPUTS;
        let h = Self::HIDDEN;

        let target: Vec<f64> = sample.c_i.iter().copied().collect();
        // dL/dZ_n through C'_I = C' c0 / (c0 - C'), C' = s C + C_L, s = sigmoid(Z).
        let dz: Vec<f64> = (0..n)
            .map(|i| {
                let dl_dci = 2.0 / n as f64 * (pass.c_i_rec[i] - target[i]);
                let gap = c0 - pass.c_series_rec[i];
                let s = sigmoid(pass.z[i]);
                dl_dci * (c0 * c0 / (gap * gap)) * self.contrast() * s * (1.0 - s)
            })
            .collect();

        let mut grad_dec = vec![0.0; n * h];
        for i in 0..n {
            for m in 0..h {
                grad_dec[i * h + m] = dz[i] * pass.code[m];
            }
        }
        let mut grad_enc = vec![0.0; h * n];
        for m in 0..h {
            let dphi: f64 = (0..n).map(|i| dz[i] * self.decoder[(i, m)]).sum();
            let du = dphi * pass.code[m] * (1.0 - pass.code[m]);
            for i in 0..n {
                grad_enc[m * n + i] = du * self.normalize_capacitance(pass.c_series[i]);
            }
        }
        grad_enc.extend(grad_dec);
        Ok((loss, grad_enc))
    }

    fn evaluate(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<Evaluation> {
        let pass = self.forward(&sample.c_i, sensor)?;
        let bitmap = self.reconstruct_bitmap(&pass, sample.c_i.nrows());
        Ok(Evaluation {
            correct: classify_bitmap(&bitmap) == Some(sample.glyph()),
            outputs: pass.code,
        })
    }
}

// ---------------------------------------------------------------------------
// CNN classifier

#[derive(Debug, Clone, PartialEq)]
pub struct CnnClassifier {
    /// Shared 3x3 kernel voltages as a 1x9 bank, row-major.
    pub kernel: WeightBank,
    /// Digital head, classes x features.
    pub head: Array2<f64>,
    topology: ArrayTopology,
    schedule: ConvSchedule,
}

impl CnnClassifier {
    pub const SIDE: usize = 5;
    pub const KERNEL: usize = 3;
    pub const FEATURES: usize = 9;

    pub fn new(kernel: WeightBank, head: Array2<f64>) -> Result<Self> {
        if kernel.v.dim() != (1, Self::KERNEL * Self::KERNEL)
            || head.dim() != (CLASS_COUNT, Self::FEATURES)
        {
            return Err(Error::shape(
                "1x9 kernel and 4x9 head",
                format!("{:?} and {:?}", kernel.v.dim(), head.dim()),
            ));
        }
        Ok(CnnClassifier {
            kernel,
            head,
            topology: build_conv_array(Self::SIDE, Self::SIDE, Self::KERNEL)?,
            schedule: schedule_conv(Self::SIDE, Self::SIDE, Self::KERNEL)?,
        })
    }

    /// Kernel uniform in [-1, 1]; head uniform in [-1, 1].
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kernel = uniform_matrix(1, Self::KERNEL * Self::KERNEL, 1.0, rng);
        let head = uniform_matrix(CLASS_COUNT, Self::FEATURES, 1.0, rng);
        CnnClassifier::new(WeightBank::new(kernel), head).expect("fixed shape")
    }

    pub fn topology(&self) -> &ArrayTopology {
        &self.topology
    }

    pub fn schedule(&self) -> &ConvSchedule {
        &self.schedule
    }

    /// Window outputs in normalized-capacitance units, flattened row-major.
    /// The array measures `A / (9 c0)` per window; the digital side forms
    /// `(A - C_L * sum k) / (C_H - C_L)`, i.e. the kernel applied to
    /// `(C_n - C_L) / (C_H - C_L)`.
    pub fn features(&self, series: &Array2<f64>, sensor: &SensorParams) -> Result<Vec<f64>> {
        let c0 = sensor.c0;
        let kernel = self.kernel.row(0);
        let map = conv_forward_series(&self.topology, &self.schedule, series, &kernel, c0)?;
        let taps = kernel.len() as f64;
        let (c_h, c_l) = (sensor.c_high(), sensor.c_low());
        let offset = c_l * kernel.iter().sum::<f64>();
        Ok(map
            .iter()
            .map(|&u| (u * taps * c0 - offset) / (c_h - c_l))
            .collect())
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        (0..CLASS_COUNT)
            .map(|k| {
                hidden
                    .iter()
                    .enumerate()
                    .map(|(j, h)| self.head[(k, j)] * h)
                    .sum()
            })
            .collect()
    }

    pub fn forward(&self, c_i: &Array2<f64>, sensor: &SensorParams) -> Result<Vec<f64>> {
        let series = series_image(c_i, sensor.c0)?;
        let hidden: Vec<f64> = self
            .features(&series, sensor)?
            .into_iter()
            .map(sigmoid)
            .collect();
        Ok(self.logits(&hidden))
    }
}

impl Trainable for CnnClassifier {
    fn architecture(&self) -> Architecture {
        Architecture::CnnClassifier
    }

    fn params(&self) -> Vec<f64> {
        self.kernel
            .v
            .iter()
            .chain(self.head.iter())
            .copied()
            .collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let split = self.kernel.v.len();
        check_len(split + self.head.len(), params.len())?;
        set_matrix(&mut self.kernel.v, &params[..split]);
        set_matrix(&mut self.head, &params[split..]);
        Ok(())
    }

    fn project(&mut self) {
        self.kernel = normalize_weights(&self.kernel);
    }

    fn loss(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<f64> {
        let z = self.forward(&sample.c_i, sensor)?;
        Ok(cross_entropy(&softmax(&z)?, &sample.label))
    }

    fn loss_and_grad(
        &self,
        sample: &CapacitiveSample,
        sensor: &SensorParams,
    ) -> Result<(f64, Vec<f64>)> {
        let c0 = sensor.c0;
        let series = series_image(&sample.c_i, c0)?;
        let hidden: Vec<f64> = self
            .features(&series, sensor)?
            .into_iter()
            .map(sigmoid)
            .collect();
        let p = softmax(&self.logits(&hidden))?;
        let loss = cross_entropy(&p, &sample.label);

        let dz: Vec<f64> = p.iter().zip(&sample.label).map(|(p, y)| p - y).collect();
        let kk = Self::KERNEL * Self::KERNEL;
        let mut grad = vec![0.0; kk + CLASS_COUNT * Self::FEATURES];
        for k in 0..CLASS_COUNT {
            for j in 0..Self::FEATURES {
                grad[kk + k * Self::FEATURES + j] = dz[k] * hidden[j];
            }
        }
        let (c_h, c_l) = (sensor.c_high(), sensor.c_low());
        let out_cols = self.schedule.out_cols();
        for slot in self.schedule.windows() {
            let j = slot.origin_row * out_cols + slot.origin_col;
            let dh: f64 = (0..CLASS_COUNT).map(|k| dz[k] * self.head[(k, j)]).sum();
            let df = dh * hidden[j] * (1.0 - hidden[j]);
            for tap in &self.topology.banks[j] {
                grad[tap.subpixel] += df * (series[(tap.row, tap.col)] - c_l) / (c_h - c_l);
            }
        }
        Ok((loss, grad))
    }

    fn evaluate(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<Evaluation> {
        let z = self.forward(&sample.c_i, sensor)?;
        Ok(Evaluation {
            correct: argmax(&z) == sample.glyph().index(),
            outputs: z,
        })
    }
}

// ---------------------------------------------------------------------------
// Training

/// Any of the three trained models.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Fc(FcClassifier),
    Autoencoder(Autoencoder),
    Cnn(CnnClassifier),
}

impl Model {
    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Fc(m) => m.architecture(),
            Model::Autoencoder(m) => m.architecture(),
            Model::Cnn(m) => m.architecture(),
        }
    }

    pub fn evaluate(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<Evaluation> {
        match self {
            Model::Fc(m) => m.evaluate(sample, sensor),
            Model::Autoencoder(m) => m.evaluate(sample, sensor),
            Model::Cnn(m) => m.evaluate(sample, sensor),
        }
    }

    pub fn loss(&self, sample: &CapacitiveSample, sensor: &SensorParams) -> Result<f64> {
        match self {
            Model::Fc(m) => m.loss(sample, sensor),
            Model::Autoencoder(m) => m.loss(sample, sensor),
            Model::Cnn(m) => m.loss(sample, sensor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Samples per epoch, S.
    pub batch_size: usize,
    /// Step size alpha in `V - (alpha / S) * sum dL/dV`.
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Binarize the FC classifier's voltages (ignored by other models).
    pub binarize: bool,
    /// Evaluation batch size per glyph.
    pub eval_per_glyph: usize,
    /// Worker threads for per-sample gradients; 1 runs inline.
    pub threads: usize,
}

impl TrainConfig {
    pub fn defaults(architecture: Architecture) -> Self {
        let (learning_rate, epochs) = match architecture {
            Architecture::FcClassifier => (10.0, 350),
            Architecture::Autoencoder => (0.0004, 100),
            Architecture::CnnClassifier => (3.0, 60),
        };
        TrainConfig {
            batch_size: 20,
            learning_rate,
            epochs,
            seed: 0,
            binarize: false,
            eval_per_glyph: 25,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be at least 1".into()));
        }
        if self.eval_per_glyph == 0 {
            return Err(Error::Domain("eval_per_glyph must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Domain("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Metrics of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batch.
    pub loss: f64,
    /// Fraction of the evaluation batch classified (or reconstructed) correctly.
    pub accuracy: f64,
    /// `mean_outputs[class][m]`: mean of output `m` over evaluation samples of `class`.
    pub mean_outputs: [[f64; CLASS_COUNT]; CLASS_COUNT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Final model with array weights in the programmable range.
    pub model: Model,
    pub seed: u64,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// First epoch (1-based) whose evaluation accuracy is 1.
    pub fn first_perfect_epoch(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.accuracy == 1.0)
            .map(|r| r.epoch)
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy");
        for class in 0..CLASS_COUNT {
            for m in 0..CLASS_COUNT {
                out.push_str(&format!(",u_c{}_{}", class, m + 1));
            }
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{}", r.epoch, r.loss, r.accuracy));
            for row in &r.mean_outputs {
                for x in row {
                    out.push_str(&format!(",{x}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// A training run that stopped on a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Diverged {
    pub epoch: usize,
    pub detail: String,
    /// Records up to the last finite epoch and the model from before the failing update.
    pub last_good: TrainHistory,
}

pub type RunOutcome = std::result::Result<TrainHistory, Box<Diverged>>;

/// Evaluates `model` on `samples`, returning accuracy and per-class mean outputs.
pub fn evaluate_batch<M: Trainable>(
    model: &M,
    samples: &[CapacitiveSample],
    sensor: &SensorParams,
) -> Result<(f64, [[f64; CLASS_COUNT]; CLASS_COUNT])> {
    let mut correct = 0usize;
    let mut sums = [[0.0; CLASS_COUNT]; CLASS_COUNT];
    let mut counts = [0usize; CLASS_COUNT];
    for s in samples {
        let e = model.evaluate(s, sensor)?;
        correct += usize::from(e.correct);
        let class = s.glyph().index();
        counts[class] += 1;
        for (acc, x) in sums[class].iter_mut().zip(&e.outputs) {
            *acc += x;
        }
    }
    for (row, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            row.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    Ok((correct as f64 / samples.len().max(1) as f64, sums))
}

fn batch_loss_and_grad<M: Trainable>(
    model: &M,
    batch: &[CapacitiveSample],
    sensor: &SensorParams,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<f64>)> {
    let per_sample: Vec<(f64, Vec<f64>)> = match pool {
        Some(pool) => pool.install(|| {
            batch
                .par_iter()
                .map(|s| model.loss_and_grad(s, sensor))
                .collect::<Result<_>>()
        })?,
        None => batch
            .iter()
            .map(|s| model.loss_and_grad(s, sensor))
            .collect::<Result<_>>()?,
    };
    // Reduction in sample order keeps the result independent of thread count.
    let mut grad = vec![0.0; per_sample.first().map_or(0, |(_, g)| g.len())];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    Ok((loss / batch.len() as f64, grad))
}

/// Hardware-in-the-loop SGD. Each epoch: normalize the array weights, draw
/// S noisy letters, accumulate gradients through the analog forward pass,
/// step by `alpha / S`, then score a fresh balanced evaluation batch.
pub fn train_model<M: Trainable>(
    mut model: M,
    wrap: fn(M) -> Model,
    config: &TrainConfig,
    sensor: &SensorParams,
    rng: &mut ChaCha8Rng,
) -> Result<RunOutcome> {
    config.validate()?;
    sensor.validate()?;
    let resolution = model.architecture().resolution();
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Usage(e.to_string()))?,
        )
    } else {
        None
    };
    let step = config.learning_rate / config.batch_size as f64;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        model.project();
        let batch = sample_batch(config.batch_size, resolution, sensor, rng)?;
        let detail = match batch_loss_and_grad(&model, &batch, sensor, pool.as_ref()) {
            Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                Ok((loss, grad))
            }
            Ok((loss, _)) => Err(format!("loss {loss} or its gradient is not finite")),
            Err(Error::Numeric(detail)) => Err(detail),
            Err(e) => return Err(e),
        };
        let (loss, grad) = match detail {
            Ok(v) => v,
            Err(detail) => {
                return Ok(Err(Box::new(Diverged {
                    epoch,
                    detail,
                    last_good: TrainHistory {
                        records,
                        model: wrap(model),
                        seed: config.seed,
                    },
                })))
            }
        };
        let updated: Vec<f64> = model
            .params()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - step * g)
            .collect();
        model.set_params(&updated)?;

        let mut snapshot = model.clone();
        snapshot.project();
        let eval = balanced_batch(config.eval_per_glyph, resolution, sensor, rng)?;
        let (accuracy, mean_outputs) = evaluate_batch(&snapshot, &eval, sensor)?;
        records.push(EpochRecord {
            epoch,
            loss,
            accuracy,
            mean_outputs,
        });
    }
    model.project();
    Ok(Ok(TrainHistory {
        records,
        model: wrap(model),
        seed: config.seed,
    }))
}

/// Initializes and trains the selected architecture from `config.seed`.
pub fn train(
    architecture: Architecture,
    config: &TrainConfig,
    sensor: &SensorParams,
) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match architecture {
        Architecture::FcClassifier => {
            let m = FcClassifier::random(&mut rng, config.binarize);
            train_model(m, Model::Fc, config, sensor, &mut rng)
        }
        Architecture::Autoencoder => {
            let m = Autoencoder::random(&mut rng, sensor)?;
            train_model(m, Model::Autoencoder, config, sensor, &mut rng)
        }
        Architecture::CnnClassifier => {
            let m = CnnClassifier::random(&mut rng);
            train_model(m, Model::Cnn, config, sensor, &mut rng)
        }
    }
}

fn finish(outcome: RunOutcome) -> Result<TrainHistory> {
    outcome.map_err(|d| Error::Divergence {
        epoch: d.epoch,
        detail: d.detail,
    })
}

pub fn train_fc_classifier(config: &TrainConfig, sensor: &SensorParams) -> Result<TrainHistory> {
    finish(train(Architecture::FcClassifier, config, sensor)?)
}

pub fn train_autoencoder(config: &TrainConfig, sensor: &SensorParams) -> Result<TrainHistory> {
    finish(train(Architecture::Autoencoder, config, sensor)?)
}

pub fn train_cnn_classifier(config: &TrainConfig, sensor: &SensorParams) -> Result<TrainHistory> {
    finish(train(Architecture::CnnClassifier, config, sensor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_capacitive, letter_pattern, Glyph};
    use ndarray::array;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(argmax(&softmax(&[1.0, 0.0, 0.0, 0.0]).unwrap()), 0);
        let p = softmax(&[1000.0, 0.0, -1000.0, 999.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid_grad(0.0), 0.25);
    }

    #[test]
    fn cross_entropy_examples() {
        let y = Glyph::Y.one_hot();
        assert_eq!(cross_entropy(&y, &y), 0.0);
        assert!((cross_entropy(&[0.25; 4], &y) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_weights(&WeightBank::new(array![[2.0, -4.0], [1.0, 0.0]]));
        assert_eq!(n.beta, 4.0);
        assert_eq!(n.v, array![[0.5, -1.0], [0.25, 0.0]]);
        let already = WeightBank::new(array![[0.5, 1.0]]);
        let again = normalize_weights(&already);
        assert_eq!((again.v, again.beta), (already.v, 1.0));
        let zero = normalize_weights(&WeightBank::new(Array2::zeros((2, 2))));
        assert_eq!((zero.v, zero.beta), (Array2::zeros((2, 2)), 1.0));
    }

    #[test]
    fn binarize_maps_zero_to_plus_one() {
        let b = binarize_weights(&WeightBank::new(array![[0.3, -0.7, 0.0]]));
        assert_eq!(b.v, array![[1.0, -1.0, 1.0]]);
    }

    #[test]
    fn binarized_gradient_is_straight_through() {
        let sensor = SensorParams::default();
        let latent = WeightBank::new(Array2::from_shape_fn((4, 9), |(m, n)| {
            ((m * 9 + n) as f64 * 0.61).sin() * 0.8
        }));
        let bin = FcClassifier::new(latent.clone(), true).unwrap();
        let signed = FcClassifier::new(binarize_weights(&latent), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = &sample_batch(1, 3, &sensor, &mut rng).unwrap()[0];
        assert_eq!(
            bin.loss_and_grad(s, &sensor).unwrap(),
            signed.loss_and_grad(s, &sensor).unwrap()
        );
    }

    #[test]
    fn fc_gradient_formula() {
        // dL/dV_mn = (p_m - y_m) C_n / (N c0)
        let sensor = SensorParams::default();
        let fc = FcClassifier::new(WeightBank::new(Array2::zeros((4, 9))), false).unwrap();
        let s = encode_capacitive(&letter_pattern(Glyph::L, 3).unwrap(), &sensor);
        let (loss, grad) = fc.loss_and_grad(&s, &sensor).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let c_h = sensor.c_high();
        let want = (0.25 - 1.0) * c_h / (9.0 * 72.0);
        assert!((grad[9] - want).abs() < 1e-15);
    }

    #[test]
    fn clean_fc_reaches_full_accuracy_quickly() {
        let sensor = SensorParams {
            noise_frac: 0.0,
            ..SensorParams::default()
        };
        for seed in 0..5 {
            let config = TrainConfig {
                epochs: 20,
                seed,
                ..TrainConfig::defaults(Architecture::FcClassifier)
            };
            let h = train_fc_classifier(&config, &sensor).unwrap();
            assert!(h.first_perfect_epoch().is_some(), "seed {seed}");
        }
    }

    #[test]
    fn clean_cnn_needs_no_more_epochs_than_noisy_over_paired_seeds() {
        let noisy = SensorParams::default();
        let clean = SensorParams {
            noise_frac: 0.0,
            ..noisy
        };
        let (mut total_clean, mut total_noisy) = (0, 0);
        for seed in 0..10 {
            let config = TrainConfig {
                epochs: 60,
                seed,
                ..TrainConfig::defaults(Architecture::CnnClassifier)
            };
            let first = |s: &SensorParams| {
                train_cnn_classifier(&config, s)
                    .unwrap()
                    .first_perfect_epoch()
                    .unwrap_or(config.epochs + 1)
            };
            total_clean += first(&clean);
            total_noisy += first(&noisy);
        }
        assert!(total_clean <= total_noisy, "{total_clean} > {total_noisy}");
    }

    #[test]
    fn training_is_deterministic() {
        let sensor = SensorParams::default();
        for arch in [
            Architecture::FcClassifier,
            Architecture::Autoencoder,
            Architecture::CnnClassifier,
        ] {
            let config = TrainConfig {
                epochs: 8,
                seed: 21,
                ..TrainConfig::defaults(arch)
            };
            let a = train(arch, &config, &sensor).unwrap().unwrap();
            let b = train(arch, &config, &sensor).unwrap().unwrap();
            assert_eq!(a, b);
            let threaded = TrainConfig {
                threads: 3,
                ..config
            };
            assert_eq!(train(arch, &threaded, &sensor).unwrap().unwrap(), a);
        }
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let config = TrainConfig {
            epochs: 7,
            ..TrainConfig::defaults(Architecture::FcClassifier)
        };
        let h = train_fc_classifier(&config, &SensorParams::default()).unwrap();
        let csv = h.history_csv();
        assert_eq!(csv.lines().count(), 8);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3 + 16);
    }

    #[test]
    fn autoencoder_reconstruction_stays_below_c0() {
        let sensor = SensorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ae = Autoencoder::random(&mut rng, &sensor).unwrap();
        ae.decoder.fill(50.0);
        let s = encode_capacitive(&letter_pattern(Glyph::H, 3).unwrap(), &sensor);
        let pass = ae.forward(&s.c_i, &sensor).unwrap();
        assert!(pass.c_series_rec.iter().all(|&c| c <= sensor.c_high()));
        assert!(pass.c_i_rec.iter().all(|&c| c.is_finite()));
    }

    #[test]
    fn autoencoder_encoding_matches_direct_sum() {
        let sensor = SensorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ae = Autoencoder::random(&mut rng, &sensor).unwrap();
        let s = &sample_batch(1, 3, &sensor, &mut rng).unwrap()[0];
        let pass = ae.forward(&s.c_i, &sensor).unwrap();
        for (a, d) in pass.u.iter().zip(ae.direct_encoding(&pass.c_series)) {
            assert!((a - d).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::defaults(Architecture::FcClassifier)
        };
        assert!(matches!(
            train(Architecture::FcClassifier, &bad, &SensorParams::default()),
            Err(Error::Domain(_))
        ));
    }
}
