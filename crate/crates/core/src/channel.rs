//! Tapped-delay-line MIMO-OFDM channel generator.
//!
//! Exponential power-delay profile with random tap delays, recalibrated so the
//! realised RMS delay spread equals the configured one; i.i.d. complex Gaussian
//! gains per (rx, tx, tap) and one Doppler arrival angle per tap.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::csi::ChannelEstimate;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    /// RMS delay spread, seconds.
    pub tau_rms: f64,
    /// Maximum Doppler shift, Hz.
    pub max_doppler: f64,
    pub resource_blocks: usize,
    /// Subcarrier spacing, Hz.
    pub subcarrier_spacing: f64,
    pub n_sym: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub taps: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            tau_rms: 300e-9,
            max_doppler: 5.0,
            resource_blocks: 52,
            subcarrier_spacing: 15e3,
            n_sym: 14,
            n_tx: 8,
            n_rx: 2,
            taps: 23,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn n_sc(&self) -> usize {
        12 * self.resource_blocks
    }

    /// Slot length under the numerology implied by the subcarrier spacing
    /// (1 ms at 15 kHz).
    pub fn slot_duration(&self) -> f64 {
        1e-3 * 15e3 / self.subcarrier_spacing
    }

    pub fn symbol_duration(&self) -> f64 {
        self.slot_duration() / self.n_sym as f64
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tau_rms >= 0.0 && self.tau_rms.is_finite()) {
            problems.push(format!("tau_rms must be non-negative, got {}", self.tau_rms));
        }
        if !(self.max_doppler >= 0.0 && self.max_doppler.is_finite()) {
            problems.push(format!("max_doppler must be non-negative, got {}", self.max_doppler));
        }
        if !(self.subcarrier_spacing > 0.0) {
            problems.push(format!("subcarrier_spacing must be positive, got {}", self.subcarrier_spacing));
        }
        for (name, v) in [
            ("resource_blocks", self.resource_blocks),
            ("n_sym", self.n_sym),
            ("n_tx", self.n_tx),
            ("n_rx", self.n_rx),
            ("taps", self.taps),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One channel realisation's multipath description.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSet {
    /// Seconds, first arrival at zero.
    pub delays: Vec<f64>,
    /// Linear mean powers summing to one.
    pub powers: Vec<f64>,
    /// Unit-variance complex gains, `[rx][tx][tap]` row-major.
    pub gains: Vec<Complex64>,
    /// `cos θ_l` of each tap's arrival angle.
    pub doppler_cos: Vec<f64>,
    pub n_rx: usize,
    pub n_tx: usize,
}

impl TapSet {
    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }

    pub fn gain(&self, rx: usize, tx: usize, tap: usize) -> Complex64 {
        self.gains[(rx * self.n_tx + tx) * self.len() + tap]
    }

    /// Power-weighted RMS of the delays.
    pub fn rms_delay_spread(&self) -> f64 {
        rms_spread(&self.delays, &self.powers)
    }
}

fn rms_spread(delays: &[f64], powers: &[f64]) -> f64 {
    let mean: f64 = delays.iter().zip(powers).map(|(d, p)| d * p).sum();
    let second: f64 = delays.iter().zip(powers).map(|(d, p)| (d - mean).powi(2) * p).sum();
    second.max(0.0).sqrt()
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn draw_taps<R: Rng + ?Sized>(config: &ChannelConfig, rng: &mut R) -> Result<TapSet> {
    config.validate()?;
    let l = config.taps;
    let tau = config.tau_rms;
    let mut delays: Vec<f64> = if l == 1 || tau == 0.0 {
        vec![0.0; l]
    } else {
        (0..l).map(|_| rng.random_range(0.0..=6.0 * tau)).collect()
    };
    let mut powers: Vec<f64> = if tau > 0.0 {
        delays.iter().map(|d| (-d / tau).exp()).collect()
    } else {
        vec![1.0; l]
    };
    let total: f64 = powers.iter().sum();
    powers.iter_mut().for_each(|p| *p /= total);
    if l > 1 && tau > 0.0 {
        let spread = rms_spread(&delays, &powers);
        let first = delays.iter().copied().fold(f64::INFINITY, f64::min);
        if spread > 0.0 {
            let stretch = tau / spread;
            delays.iter_mut().for_each(|d| *d = (*d - first) * stretch);
        }
    }
    let gains = (0..config.n_rx * config.n_tx * l).map(|_| complex_normal(rng)).collect();
    let doppler_cos = (0..l).map(|_| rng.random_range(0.0..2.0 * PI).cos()).collect();
    Ok(TapSet {
        delays,
        powers,
        gains,
        doppler_cos,
        n_rx: config.n_rx,
        n_tx: config.n_tx,
    })
}

/// `H[f,t,r,x] = Σ_l sqrt(p_l) g_{l,r,x} exp(j2π f_D cos θ_l t) exp(-j2π f Δf τ_l)`.
pub fn frequency_response(taps: &TapSet, config: &ChannelConfig, slot_time: f64) -> Result<ChannelEstimate> {
    config.validate()?;
    if taps.n_rx != config.n_rx || taps.n_tx != config.n_tx {
        return Err(Error::contract("tap set antenna counts disagree with the configuration"));
    }
    let (n_sc, n_sym, n_rx, n_tx) = (config.n_sc(), config.n_sym, config.n_rx, config.n_tx);
    let l = taps.len();
    let t_sym = config.symbol_duration();
    // per-tap phasors over subcarriers and symbols
    let freq: Vec<Complex64> = (0..l)
        .flat_map(|tap| {
            let delay = taps.delays[tap];
            (0..n_sc).map(move |f| Complex64::from_polar(1.0, -2.0 * PI * f as f64 * config.subcarrier_spacing * delay))
        })
        .collect();
    let time: Vec<Complex64> = (0..l)
        .flat_map(|tap| {
            let shift = config.max_doppler * taps.doppler_cos[tap];
            (0..n_sym).map(move |t| Complex64::from_polar(1.0, 2.0 * PI * shift * (slot_time + t as f64 * t_sym)))
        })
        .collect();
    let mut h = ChannelEstimate::zeros([n_sc, n_sym, n_rx, n_tx], config.subcarrier_spacing);
    let data = h.data_mut();
    for tap in 0..l {
        let amp = taps.powers[tap].sqrt();
        let weights: Vec<Complex64> = (0..n_rx * n_tx)
            .map(|rt| taps.gain(rt / n_tx, rt % n_tx, tap) * amp)
            .collect();
        for f in 0..n_sc {
            let pf = freq[tap * n_sc + f];
            for t in 0..n_sym {
                let ptf = pf * time[tap * n_sym + t];
                let base = (f * n_sym + t) * n_rx * n_tx;
                for (d, w) in data[base..base + n_rx * n_tx].iter_mut().zip(&weights) {
                    *d += w * ptf;
                }
            }
        }
    }
    Ok(h)
}

/// Independent RNG stream for realisation `index` under the master seed.
pub fn realization_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Realisation `index` of the dataset defined by `config` (seeded from `config.seed`).
pub fn generate_realization(config: &ChannelConfig, index: usize) -> Result<ChannelEstimate> {
    let mut rng = realization_rng(config.seed, index as u64);
    let taps = draw_taps(config, &mut rng)?;
    let mut h = frequency_response(&taps, config, 0.0)?;
    h.slot = index;
    Ok(h)
}

/// All `n` realisations, generated in parallel; identical for identical seeds.
pub fn generate_dataset(config: &ChannelConfig, n: usize) -> Result<Vec<ChannelEstimate>> {
    (0..n).into_par_iter().map(|i| generate_realization(config, i)).collect()
}

/// Contiguous 60 / 20 / 20 partition of `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl Split {
    pub fn sixty_twenty_twenty(n: usize) -> Self {
        let train = n * 3 / 5;
        let val = n / 5;
        Self {
            train: 0..train,
            val: train..train + val,
            test: train + val..n,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}
