//! Training loop, evaluation and the compress/decompress codec.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::channel::{self, ChannelConfig};
use crate::csi::{CsiTransform, PreprocessedCsi};
use crate::data::{self, CodeBitstream, CsiSplit, MultimodalSet};
use crate::error::{Error, Result};
use crate::metrics::{self, ChannelScores, EvalReport};
use crate::models::{Experiment, ModelSpec, MultimodalVqVae, LATENT_CHANNELS};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{DType, Element, Tensor};
use crate::vq::{self, LossBreakdown};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub experiment: Experiment,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub k: usize,
    pub latent_channels: usize,
    pub latent: (usize, usize),
    pub seed: u64,
    /// Save a periodic checkpoint every this many epochs (0: best only).
    pub checkpoint_every: usize,
    pub dtype: DType,
    pub decay: f64,
}

impl TrainConfig {
    pub fn for_experiment(experiment: Experiment) -> Self {
        let spec = ModelSpec::for_experiment(experiment);
        Self {
            experiment,
            beta: 0.25,
            lr: 1e-4,
            batch: 64,
            epochs: if experiment == Experiment::CsiFeedback { 1000 } else { 500 },
            k: 512,
            latent_channels: LATENT_CHANNELS,
            latent: spec.latent,
            seed: 0,
            checkpoint_every: 0,
            dtype: DType::F32,
            decay: vq::DEFAULT_DECAY,
        }
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch == 0 {
            problems.push("batch must be at least 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if !(1..=65536).contains(&self.k) {
            problems.push(format!("k must lie in 1..=65536, got {}", self.k));
        }
        if self.latent_channels == 0 {
            problems.push("latent channels must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            problems.push(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if self.experiment == Experiment::CsiFeedback && !crate::models::CSI_LATENTS.contains(&self.latent) {
            problems.push(format!(
                "unsupported latent {}x{}; supported: 28x8, 8x8, 4x8, 4x4, 2x2",
                self.latent.0, self.latent.1
            ));
        }
        if self.experiment != Experiment::CsiFeedback && self.latent != ModelSpec::for_experiment(self.experiment).latent {
            let (h, w) = ModelSpec::for_experiment(self.experiment).latent;
            problems.push(format!("{} supports only latent {h}x{w}", self.experiment));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Architecture for data whose modalities have the given `[C, H, W]`.
    pub fn model_spec(&self, inputs: &[[usize; 3]]) -> Result<ModelSpec> {
        let mut spec = match self.experiment {
            Experiment::CsiFeedback => {
                let [_, n_delay, n_tx] = inputs.first().copied().ok_or_else(|| Error::data("dataset has no modalities"))?;
                let base = ModelSpec::csi_feedback(inputs.len(), n_delay, n_tx);
                ModelSpec::variant_encoder(&base, self.latent)?
            }
            other => ModelSpec::for_experiment(other),
        };
        spec.inputs = inputs.to_vec();
        spec.latent_channels = self.latent_channels;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_entries(&self) -> Vec<(String, String)> {
        vec![
            ("experiment".into(), self.experiment.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("k".into(), self.k.to_string()),
            ("latent_channels".into(), self.latent_channels.to_string()),
            ("latent".into(), format!("{}x{}", self.latent.0, self.latent.1)),
            ("seed".into(), self.seed.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("dtype".into(), self.dtype.name().into()),
            ("decay".into(), self.decay.to_string()),
        ]
    }

    /// Applies `key=value` overrides on top of `self`; all parse failures are reported together.
    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (key, value) in entries {
            let bad = |what: &str| format!("{key}: cannot parse `{value}` as {what}");
            match key.as_str() {
                "experiment" => match value.parse() {
                    Ok(v) => self.experiment = v,
                    Err(e) => problems.push(e.to_string()),
                },
                "beta" => value.parse().map(|v| self.beta = v).unwrap_or_else(|_| problems.push(bad("a number"))),
                "lr" => value.parse().map(|v| self.lr = v).unwrap_or_else(|_| problems.push(bad("a number"))),
                "decay" => value.parse().map(|v| self.decay = v).unwrap_or_else(|_| problems.push(bad("a number"))),
                "batch" => value.parse().map(|v| self.batch = v).unwrap_or_else(|_| problems.push(bad("an integer"))),
                "epochs" => value.parse().map(|v| self.epochs = v).unwrap_or_else(|_| problems.push(bad("an integer"))),
                "k" => value.parse().map(|v| self.k = v).unwrap_or_else(|_| problems.push(bad("an integer"))),
                "latent_channels" | "d" => value.parse().map(|v| self.latent_channels = v).unwrap_or_else(|_| problems.push(bad("an integer"))),
                "seed" => value.parse().map(|v| self.seed = v).unwrap_or_else(|_| problems.push(bad("an integer"))),
                "checkpoint_every" => value.parse().map(|v| self.checkpoint_every = v).unwrap_or_else(|_| problems.push(bad("an integer"))),
                "dtype" => value.parse().map(|v| self.dtype = v).unwrap_or_else(|e: Error| problems.push(e.to_string())),
                "latent" => match parse_latent(value) {
                    Some(v) => self.latent = v,
                    None => problems.push(bad("HxW")),
                },
                _ => problems.push(format!("unknown training option `{key}`")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub fn parse_latent(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub perplexity: f64,
    pub val_reconstruction: Option<f64>,
    pub seconds: f64,
}

// wall time is not part of the trajectory
impl PartialEq for EpochLog {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.total == o.total
            && self.reconstruction == o.reconstruction
            && self.commitment == o.commitment
            && self.perplexity == o.perplexity
            && self.val_reconstruction == o.val_reconstruction
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,total,reconstruction,commitment,perplexity,val_reconstruction,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let val = e.val_reconstruction.map(|v| format!("{v:.8e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.8e},{:.8e},{:.8e},{:.4},{},{:.3}",
                e.epoch, e.total, e.reconstruction, e.commitment, e.perplexity, val, e.seconds
            );
        }
        s
    }
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {:>4}  loss {:.6}  recon {:.6}  commit {:.6}  perplexity {:.1}",
            self.epoch, self.total, self.reconstruction, self.commitment, self.perplexity
        )?;
        if let Some(v) = self.val_reconstruction {
            write!(f, "  val_recon {v:.6}")?;
        }
        write!(f, "  ({:.1}s)", self.seconds)
    }
}

/// Where the training loop reports to; every method has a no-op default.
pub trait TrainObserver<F> {
    fn epoch_end(&mut self, _log: &EpochLog) -> Result<()> {
        Ok(())
    }
    /// Called with the model whenever validation improves. When training
    /// later aborts, the last model passed here is the last good one.
    fn new_best(&mut self, _epoch: usize, _model: &MultimodalVqVae<F>) -> Result<()> {
        Ok(())
    }
    fn periodic(&mut self, _epoch: usize, _model: &MultimodalVqVae<F>) -> Result<()> {
        Ok(())
    }
}

pub struct Silent;
impl<F> TrainObserver<F> for Silent {}

pub struct TrainOutcome<F> {
    /// Model at the epoch with the lowest validation reconstruction loss.
    pub best: MultimodalVqVae<F>,
    pub best_epoch: usize,
    pub last: MultimodalVqVae<F>,
    pub log: TrainLog,
}

/// One optimiser step and one codebook update on `batch`.
pub fn train_step<F: Element>(
    model: &mut MultimodalVqVae<F>,
    adam: &mut Adam<F>,
    batch: &[Tensor<F>],
    beta: f64,
) -> Result<(LossBreakdown, Vec<usize>)> {
    let m = model.modalities();
    if batch.len() != m {
        return Err(Error::contract(format!("batch has {} modalities, model {m}", batch.len())));
    }
    model.params_mut().zero_grad();
    let mut g = Graph::new();
    let mut z = Vec::with_capacity(m);
    for (i, x) in batch.iter().enumerate() {
        let node = g.input(x.clone())?;
        z.push(model.encode_node(&mut g, i, node)?);
    }
    let z_values: Vec<&Tensor<F>> = z.iter().map(|&n| g.value(n)).collect();
    let q = vq::quantize_multimodal(&z_values, &model.codebook)?;
    let fused = vq::fused_rows(&z_values)?;
    let mut recon = Vec::with_capacity(m);
    for (i, &zi) in z.iter().enumerate() {
        let st = g.straight_through(q.quantized.clone(), zi)?;
        recon.push(model.decode_node(&mut g, i, st)?);
    }
    let targets: Vec<&Tensor<F>> = batch.iter().collect();
    let loss = vq::total_loss_graph(&mut g, &recon, &targets, &z, &q.quantized, beta)?;
    let breakdown = loss.breakdown(&g)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NumericAbort(format!("training loss became {}", breakdown.total)));
    }
    g.backward(loss.total, model.params_mut())?;
    adam.step(model.params_mut())?;
    model.codebook.ema_update(&fused, &q.indices)?;
    Ok((breakdown, q.indices))
}

fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect()
}

/// Indices, reconstructions and encoder outputs for `inputs`, without side effects.
pub struct Reconstruction<F> {
    pub indices: Vec<usize>,
    pub encoded: Vec<Tensor<F>>,
    pub quantized: Tensor<F>,
    pub outputs: Vec<Tensor<F>>,
}

pub fn reconstruct<F: Element>(model: &MultimodalVqVae<F>, inputs: &[Tensor<F>]) -> Result<Reconstruction<F>> {
    if inputs.len() != model.modalities() {
        return Err(Error::contract(format!("{} inputs for {} modalities", inputs.len(), model.modalities())));
    }
    let encoded: Vec<Tensor<F>> = inputs.iter().enumerate().map(|(m, x)| model.encode(m, x)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor<F>> = encoded.iter().collect();
    let q = vq::quantize_multimodal(&refs, &model.codebook)?;
    let outputs = (0..model.modalities()).map(|m| model.decode(m, &q.quantized)).collect::<Result<_>>()?;
    Ok(Reconstruction {
        indices: q.indices,
        encoded,
        quantized: q.quantized,
        outputs,
    })
}

/// Mean loss terms over `set`, sample-weighted, with a fixed reduction order.
pub fn evaluate_loss<F: Element>(model: &MultimodalVqVae<F>, set: &MultimodalSet<F>, batch: usize, beta: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    let ranges = batch_ranges(set.len(), batch.max(1));
    let parts: Vec<(usize, LossBreakdown, Vec<f64>)> = ranges
        .par_iter()
        .map(|r| {
            let idx: Vec<usize> = r.clone().collect();
            let inputs = set.batch(&idx)?;
            let rec = reconstruct(model, &inputs)?;
            let o: Vec<&Tensor<F>> = rec.outputs.iter().collect();
            let t: Vec<&Tensor<F>> = inputs.iter().collect();
            let e: Vec<&Tensor<F>> = rec.encoded.iter().collect();
            let lb = vq::total_loss(&o, &t, &e, &rec.quantized, beta)?;
            let per = rec
                .outputs
                .iter()
                .zip(&inputs)
                .map(|(a, b)| {
                    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum();
                    s / a.len() as f64
                })
                .collect();
            Ok((idx.len(), lb, per))
        })
        .collect::<Result<_>>()?;
    let n = set.len() as f64;
    let mut acc = LossBreakdown {
        total: 0.0,
        reconstruction: 0.0,
        commitment: 0.0,
        beta,
    };
    let mut per_modality = vec![0.0; set.modality_count()];
    for (count, lb, per) in parts {
        let w = count as f64 / n;
        acc.total += lb.total * w;
        acc.reconstruction += lb.reconstruction * w;
        acc.commitment += lb.commitment * w;
        for (a, p) in per_modality.iter_mut().zip(per) {
            *a += p * w;
        }
    }
    Ok((acc, per_modality))
}

/// Trains a freshly built model on `train`, validating on `val` after every epoch.
pub fn train<F: Element>(
    config: &TrainConfig,
    train: &MultimodalSet<F>,
    val: Option<&MultimodalSet<F>>,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let spec = config.model_spec(&train.sample_shapes())?;
    let mut model = MultimodalVqVae::<F>::build(spec, config.k, config.seed)?;
    model.codebook = model.codebook.clone().with_decay(config.decay, model.codebook.laplace_eps())?;
    if let Some(v) = val {
        if v.sample_shapes() != train.sample_shapes() {
            return Err(Error::data("validation set shapes differ from the training set"));
        }
    }
    train_model(config, &mut model, train, val, observer)
}

/// Continues training `model` in place; see [`train`].
pub fn train_model<F: Element>(
    config: &TrainConfig,
    model: &mut MultimodalVqVae<F>,
    train: &MultimodalSet<F>,
    val: Option<&MultimodalSet<F>>,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    if train.modality_count() != model.modalities() {
        return Err(Error::data(format!(
            "dataset has {} modalities, model expects {}",
            train.modality_count(),
            model.modalities()
        )));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, MultimodalVqVae<F>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut data::derived_rng(config.seed, 1 << 32 | epoch as u64));
        let (mut total, mut rec, mut com) = (0.0, 0.0, 0.0);
        let mut used = Vec::with_capacity(train.len() * model.spec().latent.0 * model.spec().latent.1);
        for r in batch_ranges(order.len(), config.batch) {
            let batch = train.batch(&order[r.clone()])?;
            let (lb, idx) = train_step(model, &mut adam, &batch, config.beta)?;
            let w = r.len() as f64 / order.len() as f64;
            total += lb.total * w;
            rec += lb.reconstruction * w;
            com += lb.commitment * w;
            used.extend(idx);
        }
        let val_reconstruction = match val {
            Some(v) if !v.is_empty() => Some(evaluate_loss(model, v, config.batch, config.beta)?.0.reconstruction),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            total,
            reconstruction: rec,
            commitment: com,
            perplexity: vq::perplexity(&used, model.codebook.k()),
            val_reconstruction,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&entry)?;
        let score = val_reconstruction.unwrap_or(rec);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            observer.new_best(epoch, model)?;
            best = Some((score, epoch, model.clone()));
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            observer.periodic(epoch, model)?;
        }
        log.epochs.push(entry);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model.clone(),
        log,
    })
}

fn input_bits(spec: &ModelSpec) -> Vec<u64> {
    spec.inputs
        .iter()
        .map(|&[c, h, w]| match spec.experiment {
            Experiment::CsiFeedback => metrics::csi_bits(h, w),
            _ => metrics::image_bits(c, h, w),
        })
        .collect()
}

/// Compression rate of `spec` with `k` codes; NaN when `k < 2`.
pub fn model_gamma(spec: &ModelSpec, k: usize) -> f64 {
    metrics::compression_rate(&input_bits(spec), spec.latent.0, spec.latent.1, k).unwrap_or(f64::NAN)
}

/// Compression rate counting the per-sample normalisation scale (one 32-bit
/// float) as feedback payload. Image experiments carry no scale.
pub fn strict_gamma(spec: &ModelSpec, k: usize) -> f64 {
    let side = if spec.experiment == Experiment::CsiFeedback { 32 } else { 0 };
    metrics::compression_rate_with_side_info(&input_bits(spec), spec.latent.0, spec.latent.1, k, side).unwrap_or(f64::NAN)
}

fn empty_report<F: Element>(model: &MultimodalVqVae<F>, label: &str, samples: usize) -> EvalReport {
    EvalReport {
        label: label.to_string(),
        experiment: model.spec().experiment.to_string(),
        latent: model.spec().latent,
        k: model.codebook.k(),
        mse_per_modality: Vec::new(),
        rho: None,
        nmse_linear: None,
        gamma: model_gamma(model.spec(), model.codebook.k()),
        samples,
    }
}

/// Per-modality reconstruction MSE on `set`.
pub fn evaluate<F: Element>(model: &MultimodalVqVae<F>, set: &MultimodalSet<F>, label: &str) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let (_, per) = evaluate_loss(model, set, 64, 0.0)?;
    let mut report = empty_report(model, label, set.len());
    report.mse_per_modality = per;
    Ok(report)
}

/// Runs realisations through preprocessing, the codec and postprocessing and
/// scores the result against each realisation's slot-averaged channel.
///
/// The per-modality MSE is measured on the normalised model inputs.
pub fn evaluate_csi<F: Element>(
    model: &MultimodalVqVae<F>,
    config: &ChannelConfig,
    transform: &CsiTransform,
    realizations: &[usize],
    label: &str,
) -> Result<EvalReport> {
    if realizations.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let m = model.modalities();
    if m != config.n_rx {
        return Err(Error::data(format!("model has {m} modalities, channel has {} receivers", config.n_rx)));
    }
    let chunks: Vec<&[usize]> = realizations.chunks(64).collect();
    let parts: Vec<(ChannelScores, Vec<f64>)> = chunks
        .par_iter()
        .map(|chunk| {
            let prepared: Vec<(crate::csi::ChannelEstimate, Vec<Vec<f64>>, f64)> = chunk
                .iter()
                .map(|&i| {
                    let h = channel::generate_realization(config, i)?;
                    let (norm, scale) = data::normalize_sample(&transform.preprocess(&h)?);
                    Ok((h.slot_average(), norm, scale))
                })
                .collect::<Result<_>>()?;
            let shape = [2, transform.n_delay(), config.n_tx];
            let inputs: Vec<Tensor<F>> = (0..m)
                .map(|rx| {
                    let data = prepared.iter().flat_map(|(_, p, _)| p[rx].iter().map(|&v| F::from_f64(v))).collect();
                    Tensor::new(vec![chunk.len(), shape[0], shape[1], shape[2]], data)
                })
                .collect::<Result<_>>()?;
            let rec = reconstruct(model, &inputs)?;
            let mut scores = ChannelScores::default();
            let mut sq = vec![0.0; m];
            let plane = shape.iter().product::<usize>();
            for (s, (truth, _, scale)) in prepared.iter().enumerate() {
                let parts: Vec<PreprocessedCsi> = rec
                    .outputs
                    .iter()
                    .map(|t| PreprocessedCsi::new(shape[1], shape[2], t.data()[s * plane..(s + 1) * plane].iter().map(|v| v.to_f64() * scale).collect()))
                    .collect::<Result<_>>()?;
                let estimate = transform.postprocess(&parts, 1, config.subcarrier_spacing)?;
                scores.add(truth, &estimate)?;
            }
            for (rx, acc) in sq.iter_mut().enumerate() {
                *acc = rec.outputs[rx]
                    .data()
                    .iter()
                    .zip(inputs[rx].data())
                    .map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2))
                    .sum::<f64>();
            }
            Ok((scores, sq))
        })
        .collect::<Result<_>>()?;
    let mut scores = ChannelScores::default();
    let mut sq = vec![0.0; m];
    for (s, p) in parts {
        scores.merge(&s);
        for (a, b) in sq.iter_mut().zip(p) {
            *a += b;
        }
    }
    let per_len = (realizations.len() * 2 * transform.n_delay() * config.n_tx) as f64;
    let mut report = empty_report(model, label, realizations.len());
    report.mse_per_modality = sq.iter().map(|v| v / per_len).collect();
    report.rho = Some(scores.rho());
    report.nmse_linear = Some(scores.nmse_linear());
    Ok(report)
}

/// CSI evaluation over one stored split.
pub fn evaluate_csi_split<F: Element>(
    model: &MultimodalVqVae<F>,
    dataset: &data::CsiDataset,
    split: &CsiSplit,
    label: &str,
) -> Result<EvalReport> {
    evaluate_csi(model, &dataset.config, &dataset.transform()?, &split.realizations, label)
}

/// Trains and evaluates each config in turn; a failing config is reported
/// in place and the sweep moves on.
pub fn sweep<F: Element, D>(
    items: &[(String, TrainConfig)],
    data: &D,
    mut run: impl FnMut(&str, &TrainConfig, &D) -> Result<EvalReport>,
) -> (String, Vec<Result<EvalReport>>) {
    let results: Vec<Result<EvalReport>> = items.iter().map(|(label, cfg)| run(label, cfg, data)).collect();
    let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
    for r in results.iter().flatten() {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    (csv, results)
}

/// Train on the dataset's train split, select on val, report on test.
pub fn run_csi<F: Element>(
    label: &str,
    config: &TrainConfig,
    dataset: &data::CsiDataset,
    observer: &mut dyn TrainObserver<F>,
) -> Result<(TrainOutcome<F>, EvalReport)> {
    let train_set = dataset.train.to_set::<F>()?;
    let val_set = dataset.val.to_set::<F>()?;
    let outcome = train(config, &train_set, Some(&val_set), observer)?;
    let report = evaluate_csi_split(&outcome.best, dataset, &dataset.test, label)?;
    Ok((outcome, report))
}

/// Encodes `inputs` (one `[N, C, H, W]` tensor per modality) into a bitstream.
pub fn compress<F: Element>(model: &MultimodalVqVae<F>, inputs: &[Tensor<F>], scales: Option<Vec<f64>>) -> Result<CodeBitstream> {
    let rec = reconstruct(model, inputs)?;
    let n = inputs[0].shape()[0];
    let per = model.spec().latent.0 * model.spec().latent.1;
    if let Some(s) = &scales {
        if s.len() != n {
            return Err(Error::data(format!("{} scales for {n} samples", s.len())));
        }
    }
    Ok(CodeBitstream {
        experiment: model.spec().experiment,
        k: model.codebook.k(),
        d: model.codebook.d(),
        latent: model.spec().latent,
        modalities: model.modalities(),
        scales,
        samples: rec.indices.chunks(per).map(<[usize]>::to_vec).collect(),
    })
}

/// Decodes a bitstream into one `[N, C, H, W]` reconstruction per modality.
pub fn decompress<F: Element>(model: &MultimodalVqVae<F>, stream: &CodeBitstream) -> Result<Vec<Tensor<F>>> {
    let spec = model.spec();
    if stream.experiment != spec.experiment
        || stream.k != model.codebook.k()
        || stream.d != model.codebook.d()
        || stream.latent != spec.latent
        || stream.modalities != model.modalities()
    {
        return Err(Error::data(format!(
            "bitstream ({} k={} d={} latent {}x{} M={}) does not match the checkpoint ({} k={} d={} latent {}x{} M={})",
            stream.experiment,
            stream.k,
            stream.d,
            stream.latent.0,
            stream.latent.1,
            stream.modalities,
            spec.experiment,
            model.codebook.k(),
            model.codebook.d(),
            spec.latent.0,
            spec.latent.1,
            model.modalities()
        )));
    }
    if stream.samples.is_empty() {
        return Err(Error::data("bitstream holds no samples"));
    }
    let indices: Vec<usize> = stream.samples.concat();
    let q = vq::gather_codes(&model.codebook, &indices, [stream.samples.len(), spec.latent.0, spec.latent.1])?;
    (0..model.modalities()).map(|m| model.decode(m, &q)).collect()
}
