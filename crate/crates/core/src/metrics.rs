//! Evaluation arithmetic: cosine correlation, NMSE, compression rate and the
//! report rows they end up in.

use std::fmt;

use num_complex::Complex64;

use crate::csi::ChannelEstimate;
use crate::error::{Error, Result};

/// Per-sample correlation with the number of zero-norm subcarriers skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    pub skipped: usize,
}

fn check_pair(a: &ChannelEstimate, b: &ChannelEstimate, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op,
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// `(1/N) Σ_p |ĥ_pᴴ h_p| / (‖ĥ_p‖ ‖h_p‖)` with `h_p` everything at subcarrier `p`.
pub fn cosine_correlation(truth: &ChannelEstimate, recon: &ChannelEstimate) -> Result<Correlation> {
    check_pair(truth, recon, "cosine_correlation")?;
    let n_sc = truth.n_sc();
    let inner = truth.data().len() / n_sc;
    let mut total = 0.0;
    let mut used = 0usize;
    for (h, hh) in truth.data().chunks(inner).zip(recon.data().chunks(inner)) {
        let dot: Complex64 = h.iter().zip(hh).map(|(a, b)| b.conj() * a).sum();
        let nh: f64 = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let nhh: f64 = hh.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if nh == 0.0 || nhh == 0.0 {
            continue;
        }
        total += dot.norm() / (nh * nhh);
        used += 1;
    }
    if used == 0 {
        return Err(Error::data("cosine correlation undefined: every subcarrier has zero norm"));
    }
    Ok(Correlation {
        rho: (total / used as f64).min(1.0),
        skipped: n_sc - used,
    })
}

/// `‖H - Ĥ‖² / ‖H‖²` for one sample.
pub fn nmse(truth: &ChannelEstimate, recon: &ChannelEstimate) -> Result<f64> {
    check_pair(truth, recon, "nmse")?;
    let energy = truth.energy();
    if energy == 0.0 {
        return Err(Error::data("NMSE undefined for an all-zero true channel"));
    }
    let err: f64 = truth
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(err / energy)
}

/// `10 log10(x)`; zero maps to negative infinity, shown as `-inf`.
pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    }
}

/// Running means over samples, accumulated in sample order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChannelScores {
    rho_sum: f64,
    nmse_sum: f64,
    pub samples: usize,
    pub skipped_subcarriers: usize,
}

impl ChannelScores {
    pub fn add(&mut self, truth: &ChannelEstimate, recon: &ChannelEstimate) -> Result<()> {
        let c = cosine_correlation(truth, recon)?;
        self.rho_sum += c.rho;
        self.skipped_subcarriers += c.skipped;
        self.nmse_sum += nmse(truth, recon)?;
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.rho_sum += other.rho_sum;
        self.nmse_sum += other.nmse_sum;
        self.samples += other.samples;
        self.skipped_subcarriers += other.skipped_subcarriers;
    }

    pub fn rho(&self) -> f64 {
        self.rho_sum / self.samples as f64
    }

    pub fn nmse_linear(&self) -> f64 {
        self.nmse_sum / self.samples as f64
    }

    pub fn nmse_db(&self) -> f64 {
        to_db(self.nmse_linear())
    }
}

/// Bits per transmitted index: `ceil(log2 k)`.
pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// 8 bits per channel value.
pub fn image_bits(channels: usize, height: usize, width: usize) -> u64 {
    (channels * height * width * 8) as u64
}

/// Real and imaginary parts as 32-bit floats.
pub fn csi_bits(n_delay: usize, n_tx: usize) -> u64 {
    (2 * n_delay * n_tx * 32) as u64
}

/// `γ = Σ_m bits_m / (h_e · w_e · ceil(log2 k))`.
pub fn compression_rate(input_bits: &[u64], h_e: usize, w_e: usize, k: usize) -> Result<f64> {
    compression_rate_with_side_info(input_bits, h_e, w_e, k, 0)
}

/// As [`compression_rate`], with `side_bits` of extra payload (a transmitted
/// normalisation scale) added to the feedback.
pub fn compression_rate_with_side_info(input_bits: &[u64], h_e: usize, w_e: usize, k: usize, side_bits: u64) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract(format!("compression rate needs k >= 2, got {k}")));
    }
    if h_e == 0 || w_e == 0 {
        return Err(Error::contract("latent grid must be non-empty"));
    }
    let bits: u64 = input_bits.iter().sum();
    Ok(bits as f64 / ((h_e * w_e) as u64 * index_bits(k) as u64 + side_bits) as f64)
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub experiment: String,
    pub latent: (usize, usize),
    pub k: usize,
    pub mse_per_modality: Vec<f64>,
    pub rho: Option<f64>,
    pub nmse_linear: Option<f64>,
    pub gamma: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn mean_mse(&self) -> f64 {
        self.mse_per_modality.iter().sum::<f64>() / self.mse_per_modality.len().max(1) as f64
    }

    pub fn nmse_db(&self) -> Option<f64> {
        self.nmse_linear.map(to_db)
    }

    pub const CSV_HEADER: &'static str = "label,experiment,latent,k,gamma,samples,mean_mse,mse_per_modality,rho,nmse_linear,nmse_db";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        format!(
            "{},{},{}x{},{},{:.6},{},{},{},{},{},{}",
            self.label,
            self.experiment,
            self.latent.0,
            self.latent.1,
            self.k,
            self.gamma,
            self.samples,
            fmt_float(self.mean_mse()),
            self.mse_per_modality.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(";"),
            opt(self.rho),
            opt(self.nmse_linear),
            opt(self.nmse_db()),
        )
    }

    /// Parses a row written by [`Self::csv_row`].
    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::format(format!("expected 11 report columns, got {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::format(format!("bad number `{s}` in report")))
        };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let (lh, lw) = f[2]
            .split_once('x')
            .ok_or_else(|| Error::format(format!("bad latent `{}`", f[2])))?;
        let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::format(format!("bad integer `{s}`"))) };
        Ok(Self {
            label: f[0].to_string(),
            experiment: f[1].to_string(),
            latent: (int(lh)?, int(lw)?),
            k: int(f[3])?,
            gamma: num(f[4])?,
            samples: int(f[5])?,
            mse_per_modality: f[7].split(';').filter(|s| !s.is_empty()).map(num).collect::<Result<_>>()?,
            rho: opt(f[8])?,
            nmse_linear: opt(f[9])?,
        })
    }
}

fn fmt_float(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.8e}")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} [{} latent {}x{}, k={}] samples={} gamma={:.2}",
            self.label, self.experiment, self.latent.0, self.latent.1, self.k, self.samples, self.gamma
        )?;
        for (m, mse) in self.mse_per_modality.iter().enumerate() {
            writeln!(f, "  modality {m}: mse {mse:.6e}")?;
        }
        if let Some(rho) = self.rho {
            writeln!(f, "  rho {rho:.4}")?;
        }
        if let (Some(lin), Some(db)) = (self.nmse_linear, self.nmse_db()) {
            writeln!(f, "  nmse {lin:.6e} ({db:.2} dB)")?;
        }
        Ok(())
    }
}
