//! Tables and sample panels for finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use mmvq::data::{self, CsiDataset, Manifest, MANIFEST_FILE};
use mmvq::metrics::EvalReport;
use mmvq::models::load_checkpoint;
use mmvq::trainer::reconstruct;
use mmvq::{Error, Experiment, Result, Tensor};

pub const REPORT_FILE: &str = "report.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Run directories under each root: the root itself if it holds a report,
/// otherwise its immediate subdirectories that do.
pub fn find_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for root in roots {
        if root.join(REPORT_FILE).is_file() {
            runs.push(root.clone());
            continue;
        }
        let entries = fs::read_dir(root).map_err(|e| Error::data(format!("cannot read {}: {e}", root.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(REPORT_FILE).is_file())
            .collect();
        found.sort();
        runs.extend(found);
    }
    if runs.is_empty() {
        return Err(Error::data(format!(
            "no evaluation reports ({REPORT_FILE}) found under {}",
            roots.iter().map(|r| r.display().to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(runs)
}

pub fn read_reports(run: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(run.join(REPORT_FILE))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(EvalReport::from_csv_row)
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `reports.csv` plus the three trade-off tables.
pub fn write_tables(reports: &[EvalReport], out: &Path) -> Result<()> {
    let mut all = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        all.push_str(&r.csv_row());
        all.push('\n');
    }
    fs::write(out.join("reports.csv"), all)?;

    let mut by_gamma: Vec<&EvalReport> = reports.iter().collect();
    by_gamma.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    let mut rho = String::from("gamma,rho,label\n");
    let mut nmse = String::from("gamma,nmse_db,label\n");
    for r in &by_gamma {
        rho.push_str(&format!("{:.2},{},{}\n", r.gamma, fmt_opt(r.rho), r.label));
        nmse.push_str(&format!("{:.2},{},{}\n", r.gamma, fmt_opt(r.nmse_db()), r.label));
    }
    fs::write(out.join("gamma_rho.csv"), rho)?;
    fs::write(out.join("gamma_nmse.csv"), nmse)?;

    let mut by_k: Vec<&EvalReport> = reports.iter().collect();
    by_k.sort_by_key(|r| (r.k, r.latent));
    let mut k = String::from("k,latent,rho,nmse_db,mean_mse,label\n");
    for r in by_k {
        k.push_str(&format!(
            "{},{}x{},{},{},{:.8e},{}\n",
            r.k,
            r.latent.0,
            r.latent.1,
            fmt_opt(r.rho),
            fmt_opt(r.nmse_db()),
            r.mean_mse(),
            r.label
        ));
    }
    fs::write(out.join("k_metrics.csv"), k)?;
    Ok(())
}

/// Row-major grayscale canvas assembled from tiles.
struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        // mid-grey background separates tiles
        Self {
            width,
            height,
            pixels: vec![0.5; width * height],
        }
    }

    /// Draws `values` (`h x w`, mapped from `[lo, hi]`) at `(x, y)`, each value `zoom`-times enlarged.
    #[allow(clippy::too_many_arguments)]
    fn tile(&mut self, x: usize, y: usize, values: &[f64], h: usize, w: usize, lo: f64, hi: f64, zoom: usize) {
        let span = if hi > lo { hi - lo } else { 1.0 };
        for r in 0..h * zoom {
            for c in 0..w * zoom {
                let v = (values[(r / zoom) * w + c / zoom] - lo) / span;
                self.pixels[(y + r) * self.width + x + c] = v;
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        data::write_pgm(&mut f, self.width, self.height, &self.pixels)
    }
}

const GAP: usize = 2;

/// CSI sample: true (left) and reconstructed (right) 2x2 grids, rows per
/// receiver, columns real then imaginary, on the truth's symmetric range.
fn csi_panel(truth: &[Vec<f64>], recon: &[Vec<f64>], n_delay: usize, n_tx: usize) -> Canvas {
    const ZOOM: usize = 6;
    let (th, tw) = (n_delay * ZOOM, n_tx * ZOOM);
    let m = truth.len();
    let grid_w = 2 * tw + GAP;
    let mut canvas = Canvas::new(2 * grid_w + 4 * GAP, m * th + (m - 1) * GAP);
    let amp = truth.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let plane = n_delay * n_tx;
    for (side, arrays) in [truth, recon].into_iter().enumerate() {
        let x0 = side * (grid_w + 4 * GAP);
        for (rx, a) in arrays.iter().enumerate() {
            for part in 0..2 {
                canvas.tile(x0 + part * (tw + GAP), rx * (th + GAP), &a[part * plane..(part + 1) * plane], n_delay, n_tx, -amp, amp, ZOOM);
            }
        }
    }
    canvas
}

/// Image sample: one row per modality, true left and reconstructed right;
/// colour channels are averaged.
fn image_panel(truth: &[Vec<f64>], recon: &[Vec<f64>], shapes: &[[usize; 3]]) -> Canvas {
    const ZOOM: usize = 2;
    let width = shapes.iter().map(|s| s[2]).max().unwrap_or(1) * ZOOM;
    let heights: Vec<usize> = shapes.iter().map(|s| s[1] * ZOOM).collect();
    let mut canvas = Canvas::new(2 * width + GAP, heights.iter().sum::<usize>() + GAP * (shapes.len() - 1));
    let mut y = 0;
    for (m, &[c, h, w]) in shapes.iter().enumerate() {
        let gray = |v: &[f64]| -> Vec<f64> { (0..h * w).map(|p| (0..c).map(|ch| v[ch * h * w + p]).sum::<f64>() / c as f64).collect() };
        let t = gray(&truth[m]);
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        canvas.tile(0, y, &t, h, w, lo, hi, ZOOM);
        canvas.tile(width + GAP, y, &gray(&recon[m]), h, w, lo, hi, ZOOM);
        y += heights[m] + GAP;
    }
    canvas
}

fn sample_rows(t: &Tensor<f32>, i: usize) -> Vec<f64> {
    let per = t.len() / t.shape()[0];
    t.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect()
}

/// Writes `<label>_sample<i>.pgm` for the first `samples` test samples of `run`.
pub fn write_panels(run: &Path, label: &str, samples: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::read(&run.join(MANIFEST_FILE))?;
    let (model, _) = load_checkpoint::<f32>(&run.join(CHECKPOINT_FILE))?;
    let source = manifest.require("data")?;
    let seed: u64 = manifest.parsed("seed")?;
    let experiment = model.spec().experiment;
    let test = match experiment {
        Experiment::CsiFeedback => CsiDataset::load(Path::new(source))?.test.to_set::<f32>()?,
        other => crate::load_images(other, source, seed)?.test,
    };
    let n = samples.min(test.len());
    let idx: Vec<usize> = (0..n).collect();
    let inputs = test.batch(&idx)?;
    let rec = reconstruct(&model, &inputs)?;
    let shapes = test.sample_shapes();
    let mut written = Vec::new();
    for i in 0..n {
        let truth: Vec<Vec<f64>> = inputs.iter().map(|t| sample_rows(t, i)).collect();
        let recon: Vec<Vec<f64>> = rec.outputs.iter().map(|t| sample_rows(t, i)).collect();
        let canvas = match experiment {
            Experiment::CsiFeedback => csi_panel(&truth, &recon, shapes[0][1], shapes[0][2]),
            _ => image_panel(&truth, &recon, &shapes),
        };
        let path = out.join(format!("{label}_sample{i}.pgm"));
        canvas.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
