//! Shared codebook, mean-distance multimodal quantization, EMA codebook
//! learning and the training objective.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;

/// The `k x d` embedding table plus its exponential-moving-average state.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<F> {
    embeddings: Tensor<F>,
    cluster_size: Tensor<F>,
    embed_sum: Tensor<F>,
    decay: f64,
    laplace_eps: f64,
}

impl<F: Element> Codebook<F> {
    /// Rows drawn uniformly from `[-1/k, 1/k]`; the running sums start at the rows.
    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::contract(format!("codebook needs k, d >= 1 (got {k}, {d})")));
        }
        let bound = 1.0 / k as f64;
        let embeddings = Tensor::from_fn(vec![k, d], |_| F::from_f64(rng.random_range(-bound..=bound)));
        Ok(Self {
            embed_sum: embeddings.clone(),
            cluster_size: Tensor::zeros(vec![k]),
            embeddings,
            decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
        })
    }

    /// A codebook with fixed rows and fresh EMA state.
    pub fn from_embeddings(embeddings: Tensor<F>) -> Result<Self> {
        if embeddings.ndim() != 2 {
            return Err(Error::Dimension {
                op: "codebook",
                axis: "rank".into(),
                expected: 2,
                actual: embeddings.ndim(),
            });
        }
        let k = embeddings.shape()[0];
        Ok(Self {
            embed_sum: embeddings.clone(),
            cluster_size: Tensor::zeros(vec![k]),
            embeddings,
            decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
        })
    }

    pub fn from_parts(
        embeddings: Tensor<F>,
        cluster_size: Tensor<F>,
        embed_sum: Tensor<F>,
        decay: f64,
        laplace_eps: f64,
    ) -> Result<Self> {
        let mut cb = Self::from_embeddings(embeddings)?;
        let k = cb.k();
        if cluster_size.shape() != [k] {
            return Err(Error::Shape {
                op: "codebook",
                lhs: vec![k],
                rhs: cluster_size.shape().to_vec(),
            });
        }
        cb.embeddings.ensure_same_shape(&embed_sum, "codebook")?;
        if cluster_size.data().iter().any(|&v| v < F::zero()) {
            return Err(Error::contract("negative EMA cluster size"));
        }
        cb.cluster_size = cluster_size;
        cb.embed_sum = embed_sum;
        cb.with_decay(decay, laplace_eps)
    }

    pub fn with_decay(mut self, decay: f64, laplace_eps: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) || laplace_eps <= 0.0 {
            return Err(Error::contract(format!(
                "EMA decay must lie in (0, 1) and epsilon be positive (got {decay}, {laplace_eps})"
            )));
        }
        self.decay = decay;
        self.laplace_eps = laplace_eps;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn laplace_eps(&self) -> f64 {
        self.laplace_eps
    }

    pub fn embeddings(&self) -> &Tensor<F> {
        &self.embeddings
    }

    pub fn cluster_size(&self) -> &Tensor<F> {
        &self.cluster_size
    }

    pub fn embed_sum(&self) -> &Tensor<F> {
        &self.embed_sum
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.d();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    /// Squared distances from each row of `vectors [n, d]` to every code, `[n, k]`.
    fn distances(&self, vectors: &[F], n: usize) -> Vec<F> {
        let (k, d) = (self.k(), self.d());
        let z = ArrayView2::from_shape((n, d), vectors).expect("vector rows");
        let e = ArrayView2::from_shape((k, d), self.embeddings.data()).expect("codebook rows");
        let mut out = vec![F::zero(); n * k];
        {
            let mut dots = ArrayViewMut2::from_shape((n, k), &mut out[..]).expect("distance matrix");
            general_mat_mul(F::from_f64(-2.0), &z, &e.t(), F::zero(), &mut dots);
        }
        let code_norms: Vec<F> = (0..k).map(|j| self.row(j).iter().map(|&v| v * v).sum()).collect();
        for (row, zi) in out.chunks_mut(k).zip(vectors.chunks(d)) {
            let zn: F = zi.iter().map(|&v| v * v).sum();
            for (v, &en) in row.iter_mut().zip(&code_norms) {
                *v = zn + *v + en;
            }
        }
        out
    }

    /// Overwrites rows from an EMA step on `vectors [n, d]` assigned to `indices`.
    ///
    /// `N_i <- λ N_i + (1-λ) count_i`, `m_i <- λ m_i + (1-λ) Σ assigned`,
    /// `e_i <- m_i / Ñ_i` with the Laplace-smoothed
    /// `Ñ_i = (N_i + ε) / (Σ N + k ε) · Σ N`.
    pub fn ema_update(&mut self, vectors: &[F], indices: &[usize]) -> Result<()> {
        let (k, d) = (self.k(), self.d());
        if vectors.len() != indices.len() * d {
            return Err(Error::Dimension {
                op: "ema_update",
                axis: "vector rows".into(),
                expected: indices.len() * d,
                actual: vectors.len(),
            });
        }
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (&i, v) in indices.iter().zip(vectors.chunks(d)) {
            if i >= k {
                return Err(Error::contract(format!("code index {i} out of range for k={k}")));
            }
            counts[i] += 1.0;
            for (s, &x) in sums[i * d..(i + 1) * d].iter_mut().zip(v) {
                *s += x.to_f64();
            }
        }
        let lam = self.decay;
        for (n, c) in self.cluster_size.data_mut().iter_mut().zip(&counts) {
            *n = F::from_f64(lam * n.to_f64() + (1.0 - lam) * c);
        }
        for (m, s) in self.embed_sum.data_mut().iter_mut().zip(&sums) {
            *m = F::from_f64(lam * m.to_f64() + (1.0 - lam) * s);
        }
        let total: f64 = self.cluster_size.data().iter().map(|v| v.to_f64()).sum();
        if total <= 0.0 {
            return Ok(());
        }
        let eps = self.laplace_eps;
        for i in 0..k {
            let smoothed = (self.cluster_size.data()[i].to_f64() + eps) / (total + k as f64 * eps) * total;
            for c in 0..d {
                let m = self.embed_sum.data()[i * d + c].to_f64();
                self.embeddings.data_mut()[i * d + c] = F::from_f64(m / smoothed);
            }
        }
        Ok(())
    }
}

/// Output of a quantization pass over `[B, d, h, w]` encoder maps.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult<F> {
    /// Code index per latent position, row-major over `(B, h, w)`.
    pub indices: Vec<usize>,
    pub grid: [usize; 3],
    /// Selected rows laid out as `[B, d, h, w]`.
    pub quantized: Tensor<F>,
    /// Mean squared distance to the selected code, per position.
    pub distances: Vec<F>,
    /// Squared distance from each modality's vector to the selected code.
    pub modality_distances: Vec<Vec<F>>,
}

/// `[B, d, h, w]` to position-major rows `[B*h*w, d]`.
pub fn to_rows<F: Element>(t: &Tensor<F>) -> Result<Vec<F>> {
    let [b, d, h, w] = t.dims4("to_rows")?;
    let plane = h * w;
    let mut rows = vec![F::zero(); b * plane * d];
    for n in 0..b {
        let src = &t.data()[n * d * plane..(n + 1) * d * plane];
        let dst = &mut rows[n * plane * d..(n + 1) * plane * d];
        for c in 0..d {
            for p in 0..plane {
                dst[p * d + c] = src[c * plane + p];
            }
        }
    }
    Ok(rows)
}

/// Lays codebook rows for `indices` out as a `[B, d, h, w]` tensor.
pub fn gather_codes<F: Element>(codebook: &Codebook<F>, indices: &[usize], grid: [usize; 3]) -> Result<Tensor<F>> {
    let [b, h, w] = grid;
    let (k, d) = (codebook.k(), codebook.d());
    let plane = h * w;
    if indices.len() != b * plane {
        return Err(Error::Dimension {
            op: "gather_codes",
            axis: "index count".into(),
            expected: b * plane,
            actual: indices.len(),
        });
    }
    let mut out = vec![F::zero(); b * d * plane];
    for (pos, &idx) in indices.iter().enumerate() {
        if idx >= k {
            return Err(Error::contract(format!("code index {idx} out of range for k={k}")));
        }
        let (n, p) = (pos / plane, pos % plane);
        for (c, &v) in codebook.row(idx).iter().enumerate() {
            out[(n * d + c) * plane + p] = v;
        }
    }
    Tensor::new(vec![b, d, h, w], out)
}

fn argmin_rows<F: Element>(dist: &[F], k: usize) -> Vec<usize> {
    dist.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                // strict comparison keeps the lowest index on ties
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Nearest-code lookup for a single encoder map, as in a plain VQ-VAE.
pub fn quantize<F: Element>(encoder_output: &Tensor<F>, codebook: &Codebook<F>) -> Result<QuantizeResult<F>> {
    quantize_multimodal(&[encoder_output], codebook)
}

/// Picks, per latent position, the code minimising the mean over modalities
/// of the squared Euclidean distance. All modalities share the result.
pub fn quantize_multimodal<F: Element>(
    encoder_outputs: &[&Tensor<F>],
    codebook: &Codebook<F>,
) -> Result<QuantizeResult<F>> {
    let first = encoder_outputs
        .first()
        .ok_or_else(|| Error::contract("quantize_multimodal needs at least one modality"))?;
    let [b, d, h, w] = first.dims4("quantize_multimodal")?;
    if d != codebook.d() {
        return Err(Error::Dimension {
            op: "quantize_multimodal",
            axis: "latent channels vs codebook dimension".into(),
            expected: codebook.d(),
            actual: d,
        });
    }
    for z in &encoder_outputs[1..] {
        first.ensure_same_shape(z, "quantize_multimodal")?;
    }
    let n = b * h * w;
    let k = codebook.k();
    let per_modality: Vec<Vec<F>> = encoder_outputs
        .iter()
        .map(|z| Ok(codebook.distances(&to_rows(z)?, n)))
        .collect::<Result<_>>()?;
    let m = F::from_f64(encoder_outputs.len() as f64);
    let mut mean = per_modality[0].clone();
    for other in &per_modality[1..] {
        for (a, &b) in mean.iter_mut().zip(other) {
            *a = *a + b;
        }
    }
    for v in &mut mean {
        *v = *v / m;
    }
    let indices = argmin_rows(&mean, k);
    let clamp = |v: F| if v < F::zero() { F::zero() } else { v };
    let distances = indices.iter().enumerate().map(|(p, &j)| clamp(mean[p * k + j])).collect();
    let modality_distances = per_modality
        .iter()
        .map(|dist| indices.iter().enumerate().map(|(p, &j)| clamp(dist[p * k + j])).collect())
        .collect();
    let grid = [b, h, w];
    let quantized = gather_codes(codebook, &indices, grid)?;
    Ok(QuantizeResult {
        indices,
        grid,
        quantized,
        distances,
        modality_distances,
    })
}

/// Per-position mean of the modality vectors: the point whose squared
/// distance to a code, averaged over modalities, is minimised by the same code.
pub fn fused_rows<F: Element>(encoder_outputs: &[&Tensor<F>]) -> Result<Vec<F>> {
    let mut acc = to_rows(encoder_outputs[0])?;
    for z in &encoder_outputs[1..] {
        for (a, b) in acc.iter_mut().zip(to_rows(z)?) {
            *a = *a + b;
        }
    }
    let m = F::from_f64(encoder_outputs.len() as f64);
    for v in &mut acc {
        *v = *v / m;
    }
    Ok(acc)
}

/// Graph node whose value is `quantized` and whose gradient flows to
/// `encoder_output` unchanged; the codebook sees no gradient.
pub fn straight_through<F: Element>(graph: &mut Graph<F>, quantized: &Tensor<F>, encoder_output: NodeId) -> Result<NodeId> {
    graph.straight_through(quantized.clone(), encoder_output)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub beta: f64,
}

/// Node handles of the objective inside a training graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub commitment: NodeId,
    pub beta: f64,
}

impl LossNodes {
    pub fn breakdown<F: Element>(&self, graph: &Graph<F>) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            total: graph.value(self.total).item()?.to_f64(),
            reconstruction: graph.value(self.reconstruction).item()?.to_f64(),
            commitment: graph.value(self.commitment).item()?.to_f64(),
            beta: self.beta,
        })
    }
}

fn mean_sq_diff<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.ensure_same_shape(b, "total_loss")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

fn check_counts(recon: usize, targets: usize, enc: usize) -> Result<()> {
    if recon == 0 || recon != targets || recon != enc {
        return Err(Error::contract(format!(
            "modality count mismatch: {recon} reconstructions, {targets} targets, {enc} encoder outputs"
        )));
    }
    Ok(())
}

/// `L = mean_m MSE(x̂_m, x_m) + β · mean_m mean((z_m - sg(e))²)`, evaluated on plain values.
pub fn total_loss<F: Element>(
    reconstructions: &[&Tensor<F>],
    targets: &[&Tensor<F>],
    encoder_outputs: &[&Tensor<F>],
    quantized: &Tensor<F>,
    beta: f64,
) -> Result<LossBreakdown> {
    check_counts(reconstructions.len(), targets.len(), encoder_outputs.len())?;
    let m = reconstructions.len() as f64;
    let mut reconstruction = 0.0;
    for (r, t) in reconstructions.iter().zip(targets) {
        reconstruction += mean_sq_diff(r, t)?;
    }
    let mut commitment = 0.0;
    for z in encoder_outputs {
        commitment += mean_sq_diff(z, quantized)?;
    }
    let (reconstruction, commitment) = (reconstruction / m, commitment / m);
    Ok(LossBreakdown {
        total: reconstruction + beta * commitment,
        reconstruction,
        commitment,
        beta,
    })
}

/// Builds the same objective inside `graph` so it can be differentiated.
pub fn total_loss_graph<F: Element>(
    graph: &mut Graph<F>,
    reconstructions: &[NodeId],
    targets: &[&Tensor<F>],
    encoder_outputs: &[NodeId],
    quantized: &Tensor<F>,
    beta: f64,
) -> Result<LossNodes> {
    check_counts(reconstructions.len(), targets.len(), encoder_outputs.len())?;
    let inv_m = F::from_f64(1.0 / reconstructions.len() as f64);
    let mut rec = None;
    for (&r, t) in reconstructions.iter().zip(targets) {
        let term = graph.mse(r, t)?;
        rec = Some(match rec {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    let mut com = None;
    for &z in encoder_outputs {
        let term = graph.mse(z, quantized)?;
        com = Some(match com {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    let reconstruction = graph.scale(rec.expect("non-empty"), inv_m)?;
    let commitment = graph.scale(com.expect("non-empty"), inv_m)?;
    let weighted = graph.scale(commitment, F::from_f64(beta))?;
    let total = graph.add(reconstruction, weighted)?;
    Ok(LossNodes {
        total,
        reconstruction,
        commitment,
        beta,
    })
}

/// `exp(H)` of the empirical code-usage distribution.
pub fn perplexity(indices: &[usize], k: usize) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i.min(k - 1)] += 1;
    }
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(vectors: &[&[f64]]) -> Tensor<f64> {
        // one batch element, 1 x n positions
        let d = vectors[0].len();
        let n = vectors.len();
        Tensor::from_fn(vec![1, d, 1, n], |i| vectors[i % n][i / n])
    }

    fn table(rows: &[&[f64]]) -> Codebook<f64> {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_embeddings(Tensor::new(vec![rows.len(), d], data).unwrap()).unwrap()
    }

    #[test]
    fn exact_match_selects_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::<f64>::random(8, 4, &mut rng).unwrap();
        let z = map(&[cb.row(3)]);
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, [3]);
        assert_eq!(q.quantized.data(), cb.row(3));
    }

    #[test]
    fn two_modality_mean_distance() {
        let cb = table(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let a = map(&[&[0.9, 0.1]]);
        let b = map(&[&[0.2, 0.8]]);
        let q = quantize_multimodal(&[&a, &b], &cb).unwrap();
        // brute force: mean over modalities of squared distances
        let brute: Vec<f64> = (0..3)
            .map(|j| {
                let e = cb.row(j);
                let da: f64 = [0.9, 0.1].iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = [0.2, 0.8].iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
                (da + db) / 2.0
            })
            .collect();
        for (got, want) in brute.iter().zip([0.75, 0.65, 0.85]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(q.indices, [1]);
        assert_eq!(q.quantized.data(), [1.0, 0.0]);
        assert!((q.distances[0] - 0.65).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = table(&[&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]]);
        let z = map(&[&[0.5, 0.0]]);
        assert_eq!(quantize(&z, &cb).unwrap().indices, [0]);
        let cb = table(&[&[3.0, 3.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let z = map(&[&[0.0, 0.0]]);
        assert_eq!(quantize(&z, &cb).unwrap().indices, [1]);
    }

    #[test]
    fn errors() {
        let cb = table(&[&[0.0, 0.0]]);
        assert!(quantize_multimodal::<f64>(&[], &cb).is_err());
        let z = map(&[&[0.0, 0.0, 0.0]]);
        assert!(quantize(&z, &cb).is_err());
        let a = map(&[&[0.0, 0.0]]);
        let b = map(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(quantize_multimodal(&[&a, &b], &cb).is_err());
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let mut store = ParamStore::<f64>::new();
        let enc = store.add("z", Tensor::from_fn(vec![1, 2, 1, 2], |i| i as f64 * 0.3));
        let cb = table(&[&[5.0, -5.0], &[7.0, 1.0]]);
        let mut g = Graph::new();
        let z = g.param(&store, enc).unwrap();
        let q = quantize(g.value(z), &cb).unwrap();
        let st = straight_through(&mut g, &q.quantized, z).unwrap();
        assert_eq!(g.value(st), &q.quantized);
        let loss = g.sum(st).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad(enc).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ema_decay_only_for_unassigned_rows() {
        let mut cb = table(&[&[1.0, 1.0], &[2.0, 2.0]]);
        cb.ema_update(&[4.0, 4.0], &[1]).unwrap();
        let before_n = cb.cluster_size().data()[0];
        let before_m = cb.embed_sum().data()[0];
        cb.ema_update(&[4.0, 4.0], &[1]).unwrap();
        assert!((cb.cluster_size().data()[0] - 0.99 * before_n).abs() < 1e-15);
        assert!((cb.embed_sum().data()[0] - 0.99 * before_m).abs() < 1e-15);
    }

    #[test]
    fn ema_identical_batch_fixed_point() {
        let mut cb = table(&[&[0.0, 0.0], &[0.1, 0.1], &[-1.0, 2.0]]);
        let target = [0.7, -0.4];
        let batch: Vec<f64> = target.iter().cycle().take(2 * 16).copied().collect();
        for _ in 0..3000 {
            cb.ema_update(&batch, &[1; 16]).unwrap();
        }
        // fixed point of m/N with Laplace smoothing, computed directly
        let n = cb.cluster_size().data().iter().sum::<f64>();
        let ni = cb.cluster_size().data()[1];
        let smooth = (ni + 1e-5) / (n + 3.0 * 1e-5) * n;
        let oracle = [16.0 * 0.7 / 16.0 * ni / smooth, 16.0 * -0.4 / 16.0 * ni / smooth];
        for c in 0..2 {
            assert!((cb.row(1)[c] - target[c]).abs() < 1e-4);
            assert!((cb.row(1)[c] - oracle[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn loss_closed_form() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let xh = x.map(|v| v + 0.1);
        let e = Tensor::<f64>::full(vec![1, 3, 1, 1], 0.5);
        let z = e.map(|v| v + 0.2);
        let l = total_loss(&[&xh], &[&x], &[&z], &e, 0.25).unwrap();
        assert!((l.total - 0.02).abs() < 1e-12, "{l:?}");
        let l0 = total_loss(&[&xh], &[&x], &[&z], &e, 0.0).unwrap();
        assert_eq!(l0.total, l0.reconstruction);
        let perfect = total_loss(&[&x], &[&x], &[&e], &e, 0.25).unwrap();
        assert_eq!(perfect.total, 0.0);
        assert!(total_loss(&[&x, &x], &[&x], &[&z], &e, 0.25).is_err());
    }

    #[test]
    fn graph_loss_matches_plain() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(vec![2, 1, 2, 2], |i| (i as f64).cos());
        let xh = Tensor::from_fn(vec![2, 1, 2, 2], |i| (i as f64).sin());
        let q = Tensor::from_fn(vec![2, 3, 1, 1], |i| i as f64 * 0.1);
        let z = Tensor::from_fn(vec![2, 3, 1, 1], |i| i as f64 * 0.13);
        let (rn, zn) = (g.input(xh.clone()).unwrap(), g.input(z.clone()).unwrap());
        let nodes = total_loss_graph(&mut g, &[rn, rn], &[&x, &x], &[zn, zn], &q, 0.25).unwrap();
        let via_graph = nodes.breakdown(&g).unwrap();
        let plain = total_loss(&[&xh, &xh], &[&x, &x], &[&z, &z], &q, 0.25).unwrap();
        assert!((via_graph.total - plain.total).abs() < 1e-12);
        assert!((via_graph.total - (via_graph.reconstruction + 0.25 * via_graph.commitment)).abs() <= 1e-6 * via_graph.total);
    }

    #[test]
    fn perplexity_bounds() {
        assert!((perplexity(&[0, 1, 2, 3], 4) - 4.0).abs() < 1e-12);
        assert!((perplexity(&[2, 2, 2], 4) - 1.0).abs() < 1e-12);
    }
}
