//! CSI pre-processing (slot average, delay-domain truncation, real/imag split)
//! and its inverse.
//!
//! Transform conventions, all unitary (scaled by `1/sqrt(N)`):
//! - subcarrier -> delay uses the `exp(+j 2π f n / N)` kernel, so a path at
//!   delay `τ` lands in bin `τ / T_delay` for channels written as
//!   `exp(-j 2π f Δf τ)`;
//! - transmit antenna -> angle uses the `exp(-j 2π x a / N)` kernel.
//!
//! Decimation to `N_delay` rows rescales by `sqrt(N_delay / N_sc)` so that the
//! decimated channel keeps the amplitude of the original; reconstruction undoes
//! it with `sqrt(N_sc / N_delay)`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Complex channel estimate laid out `[N_sc, N_sym, N_rx, N_tx]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEstimate {
    data: Vec<Complex64>,
    dims: [usize; 4],
    pub subcarrier_spacing: f64,
    pub slot: usize,
}

impl ChannelEstimate {
    pub fn new(dims: [usize; 4], data: Vec<Complex64>, subcarrier_spacing: f64) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) || n != data.len() {
            return Err(Error::Dimension {
                op: "channel_estimate",
                axis: "element count".into(),
                expected: n,
                actual: data.len(),
            });
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite { op: "channel_estimate" });
        }
        Ok(Self {
            data,
            dims,
            subcarrier_spacing,
            slot: 0,
        })
    }

    pub fn zeros(dims: [usize; 4], subcarrier_spacing: f64) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); dims.iter().product()],
            dims,
            subcarrier_spacing,
            slot: 0,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n_sc(&self) -> usize {
        self.dims[0]
    }
    pub fn n_sym(&self) -> usize {
        self.dims[1]
    }
    pub fn n_rx(&self) -> usize {
        self.dims[2]
    }
    pub fn n_tx(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    fn offset(&self, sc: usize, sym: usize, rx: usize, tx: usize) -> usize {
        ((sc * self.dims[1] + sym) * self.dims[2] + rx) * self.dims[3] + tx
    }

    pub fn get(&self, sc: usize, sym: usize, rx: usize, tx: usize) -> Complex64 {
        self.data[self.offset(sc, sym, rx, tx)]
    }

    pub fn set(&mut self, sc: usize, sym: usize, rx: usize, tx: usize, v: Complex64) {
        let o = self.offset(sc, sym, rx, tx);
        self.data[o] = v;
    }

    /// Mean over the symbol axis: `[N_sc, 1, N_rx, N_tx]`.
    pub fn slot_average(&self) -> Self {
        let [n_sc, n_sym, n_rx, n_tx] = self.dims;
        let inner = n_rx * n_tx;
        let mut out = vec![Complex64::new(0.0, 0.0); n_sc * inner];
        for f in 0..n_sc {
            let dst = &mut out[f * inner..(f + 1) * inner];
            for t in 0..n_sym {
                let base = (f * n_sym + t) * inner;
                for (d, s) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= n_sym as f64;
            }
        }
        Self {
            data: out,
            dims: [n_sc, 1, n_rx, n_tx],
            subcarrier_spacing: self.subcarrier_spacing,
            slot: self.slot,
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// One receiver's decimated channel as real `[2, N_delay, N_tx]` (re, im).
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedCsi {
    data: Vec<f64>,
    n_delay: usize,
    n_tx: usize,
}

impl PreprocessedCsi {
    pub fn new(n_delay: usize, n_tx: usize, data: Vec<f64>) -> Result<Self> {
        if n_delay == 0 || !n_delay.is_multiple_of(2) {
            return Err(Error::contract(format!("N_delay must be even and positive, got {n_delay}")));
        }
        if data.len() != 2 * n_delay * n_tx {
            return Err(Error::Dimension {
                op: "preprocessed_csi",
                axis: "element count".into(),
                expected: 2 * n_delay * n_tx,
                actual: data.len(),
            });
        }
        Ok(Self { data, n_delay, n_tx })
    }

    fn from_complex(n_delay: usize, n_tx: usize, values: &[Complex64]) -> Self {
        let plane = n_delay * n_tx;
        let mut data = vec![0.0; 2 * plane];
        for (i, c) in values.iter().enumerate() {
            data[i] = c.re;
            data[plane + i] = c.im;
        }
        Self { data, n_delay, n_tx }
    }

    fn to_complex(&self) -> Vec<Complex64> {
        let plane = self.n_delay * self.n_tx;
        (0..plane)
            .map(|i| Complex64::new(self.data[i], self.data[plane + i]))
            .collect()
    }

    pub fn n_delay(&self) -> usize {
        self.n_delay
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn shape(&self) -> [usize; 3] {
        [2, self.n_delay, self.n_tx]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor<F: Element>(&self) -> Tensor<F> {
        Tensor::new(self.shape().to_vec(), self.data.iter().map(|&v| F::from_f64(v)).collect())
            .expect("preprocessed shape")
    }

    pub fn from_tensor<F: Element>(t: &Tensor<F>) -> Result<Self> {
        match *t.shape() {
            [2, n_delay, n_tx] => Self::new(n_delay, n_tx, t.data().iter().map(|v| v.to_f64()).collect()),
            _ => Err(Error::Shape {
                op: "preprocessed_csi",
                lhs: vec![2, 0, 0],
                rhs: t.shape().to_vec(),
            }),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Even number of delay samples covering ten times the RMS delay spread.
///
/// `T_delay = 1 / (N_sc F_ss)`, spread in samples `s = τ_rms / T_delay`,
/// result `2 round(10 s / 2)` clamped to `[2, N_sc]`.
pub fn delay_truncation_length(tau_rms: f64, n_sc: usize, subcarrier_spacing: f64) -> usize {
    let t_delay = 1.0 / (n_sc as f64 * subcarrier_spacing);
    let spread = tau_rms / t_delay;
    let raw = 2.0 * (10.0 * spread / 2.0).round();
    let ceiling = (n_sc - n_sc % 2).max(2);
    if raw.is_finite() {
        (raw.max(2.0) as usize).min(ceiling)
    } else {
        ceiling
    }
}

/// Planned transforms for one `(N_sc, N_delay, N_tx)` configuration.
pub struct CsiTransform {
    n_sc: usize,
    n_delay: usize,
    n_tx: usize,
    sc_fwd: Arc<dyn Fft<f64>>,
    sc_inv: Arc<dyn Fft<f64>>,
    delay_fwd: Arc<dyn Fft<f64>>,
    delay_inv: Arc<dyn Fft<f64>>,
    tx_fwd: Arc<dyn Fft<f64>>,
    tx_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CsiTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CsiTransform")
            .field("n_sc", &self.n_sc)
            .field("n_delay", &self.n_delay)
            .field("n_tx", &self.n_tx)
            .finish()
    }
}

/// Unitary 1-D transform along `axis` (0 = rows, 1 = columns) of a row-major matrix.
fn transform_axis(buf: &mut [Complex64], rows: usize, cols: usize, axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let n = if axis == 0 { rows } else { cols };
    let scale = 1.0 / (n as f64).sqrt();
    if axis == 1 {
        for row in buf.chunks_mut(cols) {
            fft.process(row);
            row.iter_mut().for_each(|v| *v *= scale);
        }
    } else {
        let mut line = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                line[r] = buf[r * cols + c];
            }
            fft.process(&mut line);
            for r in 0..rows {
                buf[r * cols + c] = line[r] * scale;
            }
        }
    }
}

impl CsiTransform {
    pub fn new(n_sc: usize, n_delay: usize, n_tx: usize) -> Result<Self> {
        if n_delay == 0 || !n_delay.is_multiple_of(2) || n_delay > n_sc {
            return Err(Error::contract(format!(
                "N_delay must be even and within [2, N_sc={n_sc}], got {n_delay}"
            )));
        }
        if n_tx == 0 {
            return Err(Error::contract("N_tx must be positive"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_sc,
            n_delay,
            n_tx,
            sc_fwd: planner.plan_fft(n_sc, FftDirection::Forward),
            sc_inv: planner.plan_fft(n_sc, FftDirection::Inverse),
            delay_fwd: planner.plan_fft(n_delay, FftDirection::Forward),
            delay_inv: planner.plan_fft(n_delay, FftDirection::Inverse),
            tx_fwd: planner.plan_fft(n_tx, FftDirection::Forward),
            tx_inv: planner.plan_fft(n_tx, FftDirection::Inverse),
        })
    }

    pub fn n_delay(&self) -> usize {
        self.n_delay
    }

    /// Frequency-spatial `[N_sc, N_tx]` to delay-angle, in place.
    pub fn to_delay_angle(&self, buf: &mut [Complex64]) {
        transform_axis(buf, self.n_sc, self.n_tx, 0, &self.sc_inv);
        transform_axis(buf, self.n_sc, self.n_tx, 1, &self.tx_fwd);
    }

    /// Inverse of [`Self::to_delay_angle`].
    pub fn from_delay_angle(&self, buf: &mut [Complex64]) {
        transform_axis(buf, self.n_sc, self.n_tx, 0, &self.sc_fwd);
        transform_axis(buf, self.n_sc, self.n_tx, 1, &self.tx_inv);
    }

    pub fn preprocess(&self, h: &ChannelEstimate) -> Result<Vec<PreprocessedCsi>> {
        let [n_sc, _, n_rx, n_tx] = h.dims();
        if n_sc != self.n_sc || n_tx != self.n_tx {
            return Err(Error::Shape {
                op: "preprocess",
                lhs: vec![self.n_sc, 0, 0, self.n_tx],
                rhs: h.dims().to_vec(),
            });
        }
        let avg = h.slot_average();
        let amp = (self.n_delay as f64 / self.n_sc as f64).sqrt();
        let mut out = Vec::with_capacity(n_rx);
        let mut buf = vec![Complex64::new(0.0, 0.0); n_sc * n_tx];
        for rx in 0..n_rx {
            for f in 0..n_sc {
                for tx in 0..n_tx {
                    buf[f * n_tx + tx] = avg.get(f, 0, rx, tx);
                }
            }
            self.to_delay_angle(&mut buf);
            let mut kept = buf[..self.n_delay * n_tx].to_vec();
            transform_axis(&mut kept, self.n_delay, n_tx, 0, &self.delay_fwd);
            transform_axis(&mut kept, self.n_delay, n_tx, 1, &self.tx_inv);
            kept.iter_mut().for_each(|v| *v *= amp);
            out.push(PreprocessedCsi::from_complex(self.n_delay, n_tx, &kept));
        }
        Ok(out)
    }

    /// Rebuilds `[N_sc, N_sym, N_rx, N_tx]` from per-receiver arrays,
    /// repeating the slot average on every symbol.
    pub fn postprocess(&self, parts: &[PreprocessedCsi], n_sym: usize, subcarrier_spacing: f64) -> Result<ChannelEstimate> {
        if parts.is_empty() || n_sym == 0 {
            return Err(Error::contract("postprocess needs at least one receiver and symbol"));
        }
        let n_rx = parts.len();
        for p in parts {
            if p.n_delay != self.n_delay || p.n_tx != self.n_tx {
                return Err(Error::Shape {
                    op: "postprocess",
                    lhs: vec![2, self.n_delay, self.n_tx],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let amp = (self.n_sc as f64 / self.n_delay as f64).sqrt();
        let mut h = ChannelEstimate::zeros([self.n_sc, n_sym, n_rx, self.n_tx], subcarrier_spacing);
        let mut full = vec![Complex64::new(0.0, 0.0); self.n_sc * self.n_tx];
        for (rx, part) in parts.iter().enumerate() {
            let mut kept = part.to_complex();
            transform_axis(&mut kept, self.n_delay, self.n_tx, 0, &self.delay_inv);
            transform_axis(&mut kept, self.n_delay, self.n_tx, 1, &self.tx_fwd);
            full.fill(Complex64::new(0.0, 0.0));
            full[..kept.len()].copy_from_slice(&kept);
            self.from_delay_angle(&mut full);
            for f in 0..self.n_sc {
                for tx in 0..self.n_tx {
                    let v = full[f * self.n_tx + tx] * amp;
                    for t in 0..n_sym {
                        h.set(f, t, rx, tx, v);
                    }
                }
            }
        }
        Ok(h)
    }
}

pub fn preprocess(h: &ChannelEstimate, n_delay: usize) -> Result<Vec<PreprocessedCsi>> {
    CsiTransform::new(h.n_sc(), n_delay, h.n_tx())?.preprocess(h)
}

pub fn postprocess(parts: &[PreprocessedCsi], n_sc: usize, n_sym: usize) -> Result<ChannelEstimate> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("postprocess needs at least one receiver"))?;
    CsiTransform::new(n_sc, first.n_delay(), first.n_tx())?.postprocess(parts, n_sym, 15e3)
}
