//! `mmvq`: dataset generation, training, the compress/decompress codec pair
//! and report emission.

mod manifest;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmvq::channel::ChannelConfig;
use mmvq::data::{self, CodeBitstream, CsiDataset, Manifest, SplitSets};
use mmvq::metrics::EvalReport;
use mmvq::models::{load_checkpoint, save_checkpoint, MultimodalVqVae};
use mmvq::tensor::{load_tensor, read_container, save_tensor};
use mmvq::trainer::{self, EpochLog, TrainConfig, TrainObserver};
use mmvq::{DType, Element, Error, Experiment, Result, Tensor};

use manifest::RunManifest;
use report::{CHECKPOINT_FILE, REPORT_FILE};

#[derive(Parser)]
#[command(name = "mmvq", version, about = "Multimodal vector-quantized codec and CSI feedback toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate channel realisations and store the preprocessed dataset.
    GenChannel(GenChannelArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Train one model per latent/codebook combination.
    Sweep(SweepArgs),
    /// Encode model inputs into a code bitstream.
    Compress(CompressArgs),
    /// Decode a code bitstream back into model outputs.
    Decompress(DecompressArgs),
    /// Collect run reports into tables and sample panels.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenChannelArgs {
    /// key=value channel parameters (tau_rms, max_doppler, resource_blocks, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7500)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// key=value training options; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSI dataset directory, image directory, or `synthetic[:per_class]`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    force: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
    /// Count the per-sample CSI scale in the reported compression rate.
    #[arg(long)]
    strict_budget: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Latent grid as HxW.
    #[arg(long)]
    latent: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "csi_feedback")]
    experiment: String,
    /// Comma-separated latent grids.
    #[arg(long, default_value = "8x8")]
    latents: String,
    /// Comma-separated codebook sizes.
    #[arg(long, default_value = "512")]
    ks: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// CSI dataset directory or a tensor file `[N, M, C, H, W]`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split to read from a dataset directory.
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-sample scales `[N]` to carry with a tensor-file input.
    #[arg(long)]
    scales: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Tensor file `[N, M, C, H, W]`; scales, if carried, go to `<out>.scales.mvqt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sample panels per run.
    #[arg(long, default_value_t = 2)]
    samples: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MMVQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("MMVQ_THREADS must be a positive integer, got `{raw}`")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(vec![format!("cannot configure {n} worker threads: {e}")]))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenChannel(a) => gen_channel(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Report(a) => report(a),
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(vec![format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )]));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<Manifest> {
    match path {
        Some(p) => Manifest::read(p).map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", p.display())])),
        None => Ok(Manifest::default()),
    }
}

fn gen_channel(a: GenChannelArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let mut config = data::channel_config_from_manifest(&file, ChannelConfig::default())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    prepare_out_dir(&a.out, a.force)?;
    let mut run = RunManifest::start("gen-channel");
    if let Some(p) = &a.config {
        run.path("config_file", p);
    }
    run.path("out", &a.out);
    let dataset = CsiDataset::generate(&config, a.n)?;
    println!(
        "{} realizations, input [2, {}, {}] per receiver, split {}/{}/{}",
        dataset.len(),
        dataset.n_delay,
        config.n_tx,
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );
    dataset.save(&a.out, run.finish())
}

/// Resolved training request: config file entries, then flags.
fn resolve_config(
    flags: &TrainFlags,
    experiment: Option<&str>,
    k: Option<usize>,
    latent: Option<&str>,
) -> Result<(TrainConfig, String)> {
    let file = read_config(flags.config.as_deref())?;
    let mut entries: Vec<(String, String)> = file.entries.iter().filter(|(key, _)| key != "data").cloned().collect();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            entries.push((key.to_string(), v));
        }
    };
    push("experiment", experiment.map(str::to_string));
    push("k", k.map(|v| v.to_string()));
    push("latent", latent.map(str::to_string));
    push("epochs", flags.epochs.map(|v| v.to_string()));
    push("batch", flags.batch.map(|v| v.to_string()));
    push("lr", flags.lr.map(|v| v.to_string()));
    push("beta", flags.beta.map(|v| v.to_string()));
    push("seed", flags.seed.map(|v| v.to_string()));
    push("dtype", flags.dtype.clone());
    push("checkpoint_every", flags.checkpoint_every.map(|v| v.to_string()));

    let mut problems = Vec::new();
    let experiment = match entries.iter().rev().find(|(key, _)| key == "experiment") {
        Some((_, v)) => v.parse::<Experiment>().map_err(|e| problems.push(e.to_string())).ok(),
        None => {
            problems.push("no experiment given (--experiment or `experiment=` in the config)".into());
            None
        }
    };
    let mut config = TrainConfig::for_experiment(experiment.unwrap_or(Experiment::CsiFeedback));
    if let Err(Error::Config(p)) = config.apply(&entries) {
        problems.extend(p.into_iter().filter(|p| !p.starts_with("unknown experiment")));
    }
    if let Err(Error::Config(p)) = config.validate() {
        problems.extend(p);
    }
    let data = flags.data.clone().or_else(|| file.get("data").map(str::to_string));
    if data.is_none() {
        problems.push("no data source given (--data or `data=` in the config)".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    Ok((config, data.expect("checked")))
}

/// `synthetic[:per_class]` or an image directory.
pub(crate) fn load_images(experiment: Experiment, source: &str, seed: u64) -> Result<SplitSets<f32>> {
    if let Some(rest) = source.strip_prefix("synthetic") {
        if experiment != Experiment::MnistSvhn {
            return Err(Error::Config(vec![format!("synthetic data is only available for mnist_svhn, not {experiment}")]));
        }
        let per_class = match rest.strip_prefix(':') {
            Some(n) => n.parse().map_err(|_| Error::Config(vec![format!("bad synthetic size `{n}`")]))?,
            None if rest.is_empty() => 25,
            None => return Err(Error::Config(vec![format!("bad data source `{source}`")])),
        };
        return data::synthetic_digit_pairs(per_class, seed);
    }
    data::load_image_experiment(experiment, Path::new(source), seed)
}

struct CliObserver<'a> {
    out: &'a Path,
    quiet: bool,
    meta: Vec<(String, String)>,
}

impl CliObserver<'_> {
    fn save<F: Element>(&self, file: &str, epoch: usize, model: &MultimodalVqVae<F>) -> Result<()> {
        let mut meta = self.meta.clone();
        meta.push(("epoch".into(), epoch.to_string()));
        save_checkpoint(&self.out.join(file), model, &meta)
    }
}

impl<F: Element> TrainObserver<F> for CliObserver<'_> {
    fn epoch_end(&mut self, log: &EpochLog) -> Result<()> {
        if !self.quiet {
            println!("{log}");
        }
        Ok(())
    }

    fn new_best(&mut self, epoch: usize, model: &MultimodalVqVae<F>) -> Result<()> {
        self.save(CHECKPOINT_FILE, epoch, model)
    }

    fn periodic(&mut self, epoch: usize, model: &MultimodalVqVae<F>) -> Result<()> {
        self.save(&format!("epoch{epoch:05}.ckpt"), epoch, model)
    }
}

enum Loaded {
    Csi(Box<CsiDataset>),
    Images(SplitSets<f32>),
}

impl Loaded {
    fn inputs(&self) -> Vec<[usize; 3]> {
        match self {
            Loaded::Csi(ds) => ds.train.modalities.iter().map(|t| [t.shape()[1], t.shape()[2], t.shape()[3]]).collect(),
            Loaded::Images(sets) => sets.train.sample_shapes(),
        }
    }
}

fn load_data(config: &TrainConfig, source: &str) -> Result<Loaded> {
    Ok(match config.experiment {
        Experiment::CsiFeedback => Loaded::Csi(Box::new(CsiDataset::load(Path::new(source))?)),
        other => Loaded::Images(load_images(other, source, config.seed)?),
    })
}

fn train_typed<F: Element>(label: &str, config: &TrainConfig, data: &Loaded, observer: &mut CliObserver) -> Result<(trainer::TrainOutcome<F>, EvalReport)> {
    match data {
        Loaded::Csi(ds) => trainer::run_csi::<F>(label, config, ds, observer),
        Loaded::Images(sets) => {
            let train = sets.train.cast::<F>();
            let val = sets.val.cast::<F>();
            let outcome = trainer::train(config, &train, Some(&val), observer)?;
            let report = trainer::evaluate(&outcome.best, &sets.test.cast::<F>(), label)?;
            Ok((outcome, report))
        }
    }
}

fn train_one(label: &str, config: &TrainConfig, source: &str, data: &Loaded, out: &Path, flags: &TrainFlags, command: &str) -> Result<EvalReport> {
    let mut run = RunManifest::start(command);
    for (key, value) in config.to_entries() {
        run.set(&key, value);
    }
    run.set("data", source);
    run.path("out", out);
    run.set("label", label);
    run.set("strict_budget", flags.strict_budget);
    let mut observer = CliObserver {
        out,
        quiet: flags.quiet,
        meta: run.entries.entries.clone(),
    };
    let (outcome, mut report, log) = match config.dtype {
        DType::F32 => {
            let (o, r) = train_typed::<f32>(label, config, data, &mut observer)?;
            observer.save("last.ckpt", config.epochs, &o.last)?;
            let log = o.log.to_csv();
            (o.best_epoch, r, log)
        }
        DType::F64 => {
            let (o, r) = train_typed::<f64>(label, config, data, &mut observer)?;
            observer.save("last.ckpt", config.epochs, &o.last)?;
            let log = o.log.to_csv();
            (o.best_epoch, r, log)
        }
    };
    if flags.strict_budget {
        report.gamma = trainer::strict_gamma(&config.model_spec(&data.inputs())?, config.k);
    }
    fs::write(out.join("train_log.csv"), log)?;
    fs::write(out.join(REPORT_FILE), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    run.set("best_epoch", outcome);
    run.write_into(out)?;
    print!("{report}");
    Ok(report)
}

fn train(a: TrainArgs) -> Result<()> {
    let (config, source) = resolve_config(&a.flags, a.experiment.as_deref(), a.k, a.latent.as_deref())?;
    prepare_out_dir(&a.out, a.flags.force)?;
    let data = load_data(&config, &source)?;
    let label = a.out.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
    train_one(&label, &config, &source, &data, &a.out, &a.flags, "train").map(|_| ())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut problems = Vec::new();
    let latents: Vec<(usize, usize)> = a
        .latents
        .split(',')
        .filter_map(|s| trainer::parse_latent(s).or_else(|| {
            problems.push(format!("bad latent `{s}`"));
            None
        }))
        .collect();
    let ks: Vec<usize> = a
        .ks
        .split(',')
        .filter_map(|s| s.trim().parse().map_err(|_| problems.push(format!("bad k `{s}`"))).ok())
        .collect();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (base, source) = resolve_config(&a.flags, Some(&a.experiment), None, None)?;
    let mut items = Vec::new();
    for &latent in &latents {
        for &k in &ks {
            let config = TrainConfig { latent, k, ..base.clone() };
            config.validate()?;
            items.push((format!("latent{}x{}_k{k}", latent.0, latent.1), config));
        }
    }
    prepare_out_dir(&a.out, a.flags.force)?;
    let data = load_data(&base, &source)?;
    let (csv, results) = trainer::sweep::<f32, Loaded>(&items, &data, |label, config, data| {
        let dir = a.out.join(label);
        fs::create_dir_all(&dir)?;
        println!("== {label}");
        train_one(label, config, &source, data, &dir, &a.flags, "sweep")
    });
    fs::write(a.out.join("sweep.csv"), csv)?;
    let mut run = RunManifest::start("sweep");
    run.set("latents", &a.latents);
    run.set("ks", &a.ks);
    run.set("data", &source);
    run.write_into(&a.out)?;
    let mut first_err = None;
    for ((label, _), r) in items.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("{label} failed: {e}");
            first_err.get_or_insert(e);
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = data::read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64 * 1024)]).into_owned();
    Ok(text
        .lines()
        .find_map(|l| l.strip_prefix("dtype="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(DType::F32))
}

/// Splits a `[N, M, C, H, W]` (or `[N, C, H, W]` for one modality) tensor per modality.
fn split_modalities<F: Element>(t: Tensor<F>, modalities: usize) -> Result<Vec<Tensor<F>>> {
    let shape = t.shape().to_vec();
    match shape.len() {
        4 if modalities == 1 => Ok(vec![t]),
        5 if shape[1] == modalities => {
            let (n, plane) = (shape[0], shape[2] * shape[3] * shape[4]);
            Ok((0..modalities)
                .map(|m| {
                    let mut data = Vec::with_capacity(n * plane);
                    for i in 0..n {
                        let at = (i * modalities + m) * plane;
                        data.extend_from_slice(&t.data()[at..at + plane]);
                    }
                    Tensor::new(vec![n, shape[2], shape[3], shape[4]], data)
                })
                .collect::<Result<_>>()?)
        }
        _ => Err(Error::data(format!("input tensor {shape:?} does not hold {modalities} modalities"))),
    }
}

fn join_modalities<F: Element>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    let s = parts[0].shape().to_vec();
    let (n, plane) = (s[0], s[1] * s[2] * s[3]);
    let mut data = Vec::with_capacity(n * plane * parts.len());
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(&p.data()[i * plane..(i + 1) * plane]);
        }
    }
    Tensor::new(vec![n, parts.len(), s[1], s[2], s[3]], data)
}

fn compress(a: CompressArgs) -> Result<()> {
    match checkpoint_dtype(&a.ckpt)? {
        DType::F32 => compress_typed::<f32>(&a),
        DType::F64 => compress_typed::<f64>(&a),
    }
}

fn compress_typed<F: Element>(a: &CompressArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<F>(&a.ckpt)?;
    let m = model.modalities();
    let (mut inputs, mut scales) = if a.input.is_dir() {
        let ds = CsiDataset::load(&a.input)?;
        if model.spec().experiment != Experiment::CsiFeedback {
            return Err(Error::data(format!("checkpoint is a {} model, input is a CSI dataset", model.spec().experiment)));
        }
        let split = match a.split.as_str() {
            "train" => &ds.train,
            "val" => &ds.val,
            "test" => &ds.test,
            other => return Err(Error::Config(vec![format!("unknown split `{other}` (train, val or test)")])),
        };
        (split.modalities.iter().map(|t| t.cast::<F>()).collect::<Vec<_>>(), Some(split.scales.clone()))
    } else {
        let t = read_container(data::read_bytes(&a.input)?.as_slice())?.into_tensor::<F>();
        let scales = a.scales.as_ref().map(|p| load_tensor::<f64>(p).map(Tensor::into_data)).transpose()?;
        (split_modalities(t, m)?, scales)
    };
    if let Some(limit) = a.limit {
        let n = inputs[0].shape()[0].min(limit);
        inputs = inputs.iter().map(|t| t.slice_outer(0..n)).collect::<Result<_>>()?;
        scales = scales.map(|s| s[..n].to_vec());
    }
    let stream = trainer::compress(&model, &inputs, scales)?;
    let bytes = stream.to_bytes()?;
    fs::write(&a.out, &bytes)?;
    println!(
        "{} samples, {} index bytes per sample, {} bytes total",
        stream.samples.len(),
        stream.sample_payload_bytes(),
        bytes.len()
    );
    let mut run = RunManifest::start("compress");
    run.path("ckpt", &a.ckpt);
    run.path("in", &a.input);
    run.path("out", &a.out);
    run.set("split", &a.split);
    run.write_beside(&a.out)
}

fn decompress(a: DecompressArgs) -> Result<()> {
    match checkpoint_dtype(&a.ckpt)? {
        DType::F32 => decompress_typed::<f32>(&a),
        DType::F64 => decompress_typed::<f64>(&a),
    }
}

fn decompress_typed<F: Element>(a: &DecompressArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<F>(&a.ckpt)?;
    let stream = CodeBitstream::from_bytes(&data::read_bytes(&a.input)?)?;
    let outputs = trainer::decompress(&model, &stream)?;
    save_tensor(&a.out, &join_modalities(&outputs)?)?;
    if let Some(s) = &stream.scales {
        let mut name = a.out.as_os_str().to_owned();
        name.push(".scales.mvqt");
        save_tensor(PathBuf::from(name), &Tensor::new(vec![s.len()], s.clone())?)?;
    }
    println!("{} samples reconstructed", stream.samples.len());
    let mut run = RunManifest::start("decompress");
    run.path("ckpt", &a.ckpt);
    run.path("in", &a.input);
    run.path("out", &a.out);
    run.write_beside(&a.out)
}

fn report(a: ReportArgs) -> Result<()> {
    let runs = report::find_runs(&a.runs)?;
    fs::create_dir_all(&a.out)?;
    let mut reports = Vec::new();
    let mut panels = 0;
    for run in &runs {
        let rows = report::read_reports(run)?;
        if a.samples > 0 && run.join(CHECKPOINT_FILE).is_file() {
            let label = rows.first().map(|r| r.label.clone()).unwrap_or_else(|| "run".into());
            panels += report::write_panels(run, &label, a.samples, &a.out)?.len();
        }
        reports.extend(rows);
    }
    report::write_tables(&reports, &a.out)?;
    println!("{} reports from {} runs, {panels} sample panels", reports.len(), runs.len());
    let mut run = RunManifest::start("report");
    run.set("runs", runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>().join(";"));
    run.path("out", &a.out);
    run.write_into(&a.out)
}
