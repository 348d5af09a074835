//! Physical layer: BPSK, power-domain superposition, Rayleigh/AWGN channels,
//! SIC and direct receivers, link-budget arithmetic.
//!
//! Conventions: bit 0 maps to +1 and bit 1 to -1; one complex baseband sample
//! per symbol; receivers know their channel coefficient exactly.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::BitVector;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// BPSK bit error rate in AWGN at SNR `gamma` (linear).
pub fn ber_bpsk_awgn(gamma: f64) -> f64 {
    q_function((2.0 * gamma).sqrt())
}

/// BPSK bit error rate averaged over Rayleigh fading with mean SNR `mean_gamma`.
pub fn ber_bpsk_rayleigh(mean_gamma: f64) -> f64 {
    0.5 * (1.0 - (mean_gamma / (1.0 + mean_gamma)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// Total transmit power in watts.
    pub total_power: f64,
    /// Share of power on the strong (image) component.
    pub alpha: f64,
    pub bandwidth: f64,
    /// AWGN power spectral density in W/Hz.
    pub noise_psd: f64,
    pub bit_rate: f64,
}

impl LinkBudget {
    pub fn new(total_power: f64, alpha: f64, bandwidth: f64, noise_psd: f64, bit_rate: f64) -> Result<Self> {
        let b = LinkBudget {
            total_power,
            alpha,
            bandwidth,
            noise_psd,
            bit_rate,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.total_power > 0.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.bandwidth > 0.0
            && self.noise_psd >= 0.0
            && self.bit_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid link budget {self:?}")))
        }
    }

    /// Noise power in the receiver bandwidth, `N0·B`.
    pub fn noise_power(&self) -> f64 {
        self.noise_psd * self.bandwidth
    }

    pub fn strong_amplitude(&self) -> f64 {
        (self.alpha * self.total_power).sqrt()
    }

    pub fn weak_amplitude(&self) -> f64 {
        ((1.0 - self.alpha) * self.total_power).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fading {
    /// One Rayleigh coefficient per frame.
    #[default]
    RayleighBlock,
    RayleighPerSymbol,
    /// Deterministic gain equal to the mean gain, zero phase.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub mean_gain_db: f64,
    pub fading: Fading,
}

/// One coefficient for block/static channels, one per symbol otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    coefficients: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn constant(h: Complex64) -> Self {
        ChannelRealization { coefficients: vec![h] }
    }

    pub fn at(&self, i: usize) -> Complex64 {
        if self.coefficients.len() == 1 {
            self.coefficients[0]
        } else {
            self.coefficients[i]
        }
    }

    /// Average `|h|²` over the stored coefficients.
    pub fn power_gain(&self) -> f64 {
        self.coefficients.iter().map(|h| h.norm_sqr()).sum::<f64>() / self.coefficients.len() as f64
    }
}

/// Unit-power BPSK symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame(pub Vec<f64>);

impl SymbolFrame {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|s| s * s).sum::<f64>() / self.0.len() as f64
    }
}

/// Power-scaled real baseband samples at the transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct TxFrame(pub Vec<f64>);

impl TxFrame {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|s| s * s).sum::<f64>() / self.0.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub samples: Vec<Complex64>,
    pub channel: ChannelRealization,
}

pub fn bpsk_modulate(bits: &BitVector) -> SymbolFrame {
    SymbolFrame(bits.iter().map(|b| if b { -1.0 } else { 1.0 }).collect())
}

/// Hard decision on real samples: negative → 1.
pub fn bpsk_demodulate(samples: &[f64]) -> BitVector {
    BitVector::from_bits(samples.iter().map(|&s| s < 0.0))
}

/// Public whitening streams, one per superposition layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scrambler {
    Strong,
    Weak,
}

/// XORs `bits` with the layer's fixed pseudo-random sequence. Image and mask
/// bits are far from equiprobable and correlated with each other; whitening
/// keeps the superposed power at `P` and the interference symmetric. Applying
/// it twice is the identity.
pub fn scramble(bits: &BitVector, layer: Scrambler) -> BitVector {
    let id = match layer {
        Scrambler::Strong => 1,
        Scrambler::Weak => 2,
    };
    let mut rng = crate::seed::rng(crate::seed::label("scrambler"), &[id]);
    bits.xor(&BitVector::random(bits.len(), &mut rng))
        .expect("equal lengths")
}

/// `√(α·P)·s_i + √((1−α)·P)·s_p`.
pub fn superpose(strong: &SymbolFrame, weak: &SymbolFrame, budget: &LinkBudget) -> Result<TxFrame> {
    if strong.len() != weak.len() {
        return Err(Error::LengthMismatch {
            expected: strong.len(),
            actual: weak.len(),
        });
    }
    let (a, b) = (budget.strong_amplitude(), budget.weak_amplitude());
    Ok(TxFrame(strong.0.iter().zip(&weak.0).map(|(si, sp)| a * si + b * sp).collect()))
}

/// Strong component alone at `√(α·P)`; with α = 1 this is the plain
/// single-layer transmission.
pub fn transmit_single(symbols: &SymbolFrame, budget: &LinkBudget) -> TxFrame {
    let a = budget.strong_amplitude();
    TxFrame(symbols.0.iter().map(|s| a * s).collect())
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `h = √(z̄)·g` with `g ~ CN(0, 1)` (or `g = 1` for a static channel).
pub fn draw_channel<R: Rng + ?Sized>(spec: &ChannelSpec, frame_len: usize, rng: &mut R) -> ChannelRealization {
    let amp = db_to_linear(spec.mean_gain_db).sqrt();
    let coefficients = match spec.fading {
        Fading::Static => vec![Complex64::new(amp, 0.0)],
        Fading::RayleighBlock => vec![complex_gaussian(rng) * amp],
        Fading::RayleighPerSymbol => (0..frame_len.max(1)).map(|_| complex_gaussian(rng) * amp).collect(),
    };
    ChannelRealization { coefficients }
}

/// `y = h·s + n`, with complex AWGN of total power `N0·B` per sample.
pub fn transmit<R: Rng + ?Sized>(
    s: &TxFrame,
    h: &ChannelRealization,
    budget: &LinkBudget,
    rng: &mut R,
) -> ReceivedFrame {
    let sigma = budget.noise_power().sqrt();
    let samples = s
        .0
        .iter()
        .enumerate()
        .map(|(i, &x)| h.at(i) * x + complex_gaussian(rng) * sigma)
        .collect();
    ReceivedFrame {
        samples,
        channel: h.clone(),
    }
}

/// Coherently combined real statistic `Re(h*·y)/|h|` per sample, and `|h|`.
fn matched(y: &ReceivedFrame) -> impl Iterator<Item = (f64, f64)> + '_ {
    y.samples.iter().enumerate().map(|(i, &s)| {
        let h = y.channel.at(i);
        let mag = h.norm();
        if mag == 0.0 {
            (0.0, 0.0)
        } else {
            ((h.conj() * s).re / mag, mag)
        }
    })
}

/// Strong-component hard decisions only.
pub fn direct_receive(y: &ReceivedFrame) -> BitVector {
    BitVector::from_bits(matched(y).map(|(z, _)| z < 0.0))
}

/// Two-stage SIC: decide the strong stream treating the weak one as
/// interference, subtract its remodulated contribution, decide the residual.
pub fn sic_receive(y: &ReceivedFrame, budget: &LinkBudget) -> Result<(BitVector, BitVector)> {
    if budget.alpha >= 1.0 {
        return Err(Error::DegenerateAlpha);
    }
    let a = budget.strong_amplitude();
    let mut strong = Vec::with_capacity(y.samples.len());
    let mut weak = Vec::with_capacity(y.samples.len());
    for (z, mag) in matched(y) {
        let s_hat = if z < 0.0 { -1.0 } else { 1.0 };
        strong.push(z < 0.0);
        weak.push(z - a * mag * s_hat < 0.0);
    }
    Ok((BitVector::from_bits(strong), BitVector::from_bits(weak)))
}

/// Pre-SIC SINR of the strong component in dB. Saturates to `+∞` when there
/// is neither interference nor noise.
pub fn sinr_strong(budget: &LinkBudget, gain: f64) -> f64 {
    let signal = budget.alpha * budget.total_power * gain;
    let denom = (1.0 - budget.alpha) * budget.total_power * gain + budget.noise_power();
    if denom == 0.0 {
        return f64::INFINITY;
    }
    linear_to_db(signal / denom)
}

/// SINR of the weak component after ideal cancellation, in dB.
pub fn sinr_weak_post_sic(budget: &LinkBudget, gain: f64) -> f64 {
    let signal = (1.0 - budget.alpha) * budget.total_power * gain;
    let noise = budget.noise_power();
    if noise == 0.0 {
        return if signal > 0.0 { f64::INFINITY } else { f64::NAN };
    }
    linear_to_db(signal / noise)
}
