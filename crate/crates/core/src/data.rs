//! Datasets and on-disk formats: paired image sets, raster ingestion, the
//! CSI dataset layout and the packed code-index bitstream.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{self, ChannelConfig, Split};
use crate::csi::{self, CsiTransform, PreprocessedCsi};
use crate::error::{Error, Result};
use crate::metrics::index_bits;
use crate::models::{parse_kv, Experiment};
use crate::tensor::{self, Element, Tensor};

/// Aligned per-modality tensors `[N, C, H, W]` sharing sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSet<F> {
    modalities: Vec<Tensor<F>>,
    pub labels: Option<Vec<u8>>,
}

impl<F: Element> MultimodalSet<F> {
    pub fn new(modalities: Vec<Tensor<F>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let first = modalities.first().ok_or_else(|| Error::data("dataset has no modalities"))?;
        let n = first.dims4("dataset")?[0];
        for t in &modalities {
            let got = t.dims4("dataset")?[0];
            if got != n {
                return Err(Error::Dimension {
                    op: "dataset",
                    axis: "sample count across modalities".into(),
                    expected: n,
                    actual: got,
                });
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::data(format!("{} labels for {n} samples", l.len())));
            }
        }
        Ok(Self { modalities, labels })
    }

    pub fn len(&self) -> usize {
        self.modalities[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality(&self, m: usize) -> &Tensor<F> {
        &self.modalities[m]
    }

    /// `[C, H, W]` of each modality.
    pub fn sample_shapes(&self) -> Vec<[usize; 3]> {
        self.modalities
            .iter()
            .map(|t| {
                let s = t.shape();
                [s[1], s[2], s[3]]
            })
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor<F>>> {
        self.modalities.iter().map(|t| t.gather_outer(indices)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.batch(indices)?,
            self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        )
    }

    pub fn cast<G: Element>(&self) -> MultimodalSet<G> {
        MultimodalSet {
            modalities: self.modalities.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Two examples of the same class drawn from different sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairedSample {
    pub a: usize,
    pub b: usize,
    pub label: u8,
    pub pair_id: usize,
}

/// Pairs every example of `labels_a` with `per_example` same-class examples
/// of `labels_b`.
///
/// Partners are taken round-robin from a shuffled per-class list, so each
/// `b` example is used equally often (exactly `per_example` times when both
/// sides hold the same number of examples of a class) and one `a` never gets
/// the same partner twice while `per_example` does not exceed the class size.
pub fn pair_datasets<R: Rng + ?Sized>(
    labels_a: &[u8],
    labels_b: &[u8],
    per_example: usize,
    rng: &mut R,
) -> Result<Vec<PairedSample>> {
    let mut by_class_b: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels_b.iter().enumerate() {
        by_class_b.entry(l).or_default().push(i);
    }
    let mut by_class_a: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels_a.iter().enumerate() {
        by_class_a.entry(l).or_default().push(i);
    }
    for class in by_class_a.keys().chain(by_class_b.keys()) {
        if !by_class_a.contains_key(class) || !by_class_b.contains_key(class) {
            return Err(Error::data(format!("class {class} has no examples in one of the two sets")));
        }
    }
    let mut pairs = Vec::with_capacity(labels_a.len() * per_example);
    for (&class, members_a) in &by_class_a {
        let mut pool = by_class_b[&class].clone();
        pool.shuffle(rng);
        let mut cursor = 0;
        for &a in members_a {
            let first = pairs.len();
            for _ in 0..per_example {
                if cursor == pool.len() {
                    pool.shuffle(rng);
                    cursor = 0;
                    // partners already given to `a` go to the back of the new cycle
                    let taken: Vec<usize> = pairs[first..].iter().map(|p: &PairedSample| p.b).collect();
                    let (fresh, used): (Vec<usize>, Vec<usize>) = pool.iter().partition(|b| !taken.contains(b));
                    pool = fresh.into_iter().chain(used).collect();
                }
                pairs.push(PairedSample {
                    a,
                    b: pool[cursor],
                    label: class,
                    pair_id: pairs.len(),
                });
                cursor += 1;
            }
        }
    }
    pairs.shuffle(rng);
    for (i, p) in pairs.iter_mut().enumerate() {
        p.pair_id = i;
    }
    Ok(pairs)
}

/// Gathers `pairs` into a two-modality set.
pub fn paired_set<F: Element>(a: &Tensor<F>, b: &Tensor<F>, pairs: &[PairedSample]) -> Result<MultimodalSet<F>> {
    let ia: Vec<usize> = pairs.iter().map(|p| p.a).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.b).collect();
    MultimodalSet::new(
        vec![a.gather_outer(&ia)?, b.gather_outer(&ib)?],
        Some(pairs.iter().map(|p| p.label).collect()),
    )
}

//  aaa
// f   b
//  ggg
// e   c
//  ddd
const SEGMENTS: [&str; 10] = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"];

fn fill_rect(canvas: &mut [f32], size: usize, x0: i32, y0: i32, x1: i32, y1: i32) {
    for y in y0.max(0)..y1.min(size as i32) {
        for x in x0.max(0)..x1.min(size as i32) {
            canvas[y as usize * size + x as usize] = 1.0;
        }
    }
}

/// Binary mask of a segment-style glyph for `digit` with random placement.
fn glyph<R: Rng + ?Sized>(digit: u8, size: usize, rng: &mut R) -> Vec<f32> {
    let mut mask = vec![0.0f32; size * size];
    let s = size as i32;
    let w = rng.random_range(s * 5 / 16..=s * 7 / 16);
    let h = rng.random_range(s * 9 / 16..=s * 11 / 16);
    let t = rng.random_range(2..=3);
    let x0 = rng.random_range(2..=(s - w - 2).max(2));
    let y0 = rng.random_range(2..=(s - h - 2).max(2));
    let (x1, y1, ym) = (x0 + w, y0 + h, y0 + h / 2);
    for seg in SEGMENTS[digit as usize].chars() {
        match seg {
            'a' => fill_rect(&mut mask, size, x0, y0, x1, y0 + t),
            'b' => fill_rect(&mut mask, size, x1 - t, y0, x1, ym + 1),
            'c' => fill_rect(&mut mask, size, x1 - t, ym, x1, y1),
            'd' => fill_rect(&mut mask, size, x0, y1 - t, x1, y1),
            'e' => fill_rect(&mut mask, size, x0, ym, x0 + t, y1),
            'f' => fill_rect(&mut mask, size, x0, y0, x0 + t, ym + 1),
            _ => fill_rect(&mut mask, size, x0, ym - t / 2, x1, ym - t / 2 + t),
        }
    }
    mask
}

/// Labelled 32x32 digit images in `[0, 1]`, `per_class` of each class.
///
/// With one channel the glyph is bright on black with light noise; with
/// three channels it sits on a random colour background in a random
/// foreground colour with heavier noise.
pub fn synthetic_digits<R: Rng + ?Sized>(per_class: usize, channels: usize, rng: &mut R) -> Result<(Tensor<f32>, Vec<u8>)> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(vec![format!("synthetic digits have 1 or 3 channels, not {channels}")]));
    }
    const SIZE: usize = 32;
    let plane = SIZE * SIZE;
    let n = per_class * 10;
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % 10) as u8;
        let mask = glyph(digit, SIZE, rng);
        let noise = if channels == 1 { 0.05 } else { 0.12 };
        let (bg, fg): (Vec<f32>, Vec<f32>) = if channels == 1 {
            (vec![0.0], vec![1.0])
        } else {
            let bg: Vec<f32> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            // keep the glyph distinguishable from its background
            let fg = bg.iter().map(|&b| if b > 0.5 { rng.random_range(0.0..0.3) } else { rng.random_range(0.7..1.0) }).collect();
            (bg, fg)
        };
        for c in 0..channels {
            for &m in &mask {
                let v = bg[c] + (fg[c] - bg[c]) * m + rng.random_range(-noise..noise);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(digit);
    }
    Ok((Tensor::new(vec![n, channels, SIZE, SIZE], data)?, labels))
}

/// Subtracts the dataset mean; returns it.
pub fn mean_center(t: &mut Tensor<f32>) -> f32 {
    let mean = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64) as f32;
    t.data_mut().iter_mut().for_each(|v| *v -= mean);
    mean
}

/// Raster files loaded as one tensor.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    /// `[N, C, H, W]`, scaled to `[0, 1]` then mean-centred.
    pub images: Tensor<f32>,
    pub mean: f32,
    pub files: Vec<PathBuf>,
    /// From a numeric parent directory name (`<dir>/<label>/<file>`), if any.
    pub labels: Vec<Option<u8>>,
}

impl ImageDataset {
    /// Plain-text provenance: one `index<TAB>label<TAB>path` line per image.
    pub fn manifest(&self) -> String {
        let shape = self.images.shape();
        let mut s = format!("images={}\nshape={}x{}x{}\nmean={}\n", shape[0], shape[1], shape[2], shape[3], self.mean);
        for (i, (f, l)) in self.files.iter().zip(&self.labels).enumerate() {
            let label = l.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{i}\t{label}\t{}\n", f.display()));
        }
        s
    }
}

fn is_raster(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "pgm" | "ppm" | "pnm" | "bmp")
    )
}

fn collect_rasters(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_rasters(&path, out)?;
        } else if is_raster(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads one raster as `[C, H, W]` in `[0, 1]`, bilinearly resized.
pub fn load_raster(path: &Path, target: [usize; 3]) -> Result<Vec<f32>> {
    let [c, h, w] = target;
    let img = image::open(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let (w32, h32) = (w as u32, h as u32);
    let resize = |needs: bool, img: image::DynamicImage| {
        if needs {
            img.resize_exact(w32, h32, FilterType::Triangle)
        } else {
            img
        }
    };
    let needs = img.width() != w32 || img.height() != h32;
    let out: Vec<f32> = match c {
        1 => {
            let g = resize(needs, image::DynamicImage::ImageLuma16(img.to_luma16())).to_luma16();
            g.pixels().map(|p| p.0[0] as f32 / 65535.0).collect()
        }
        3 => {
            let rgb = resize(needs, image::DynamicImage::ImageRgb16(img.to_rgb16())).to_rgb16();
            let mut planar = vec![0.0; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    planar[ch * h * w + i] = p.0[ch] as f32 / 65535.0;
                }
            }
            planar
        }
        other => return Err(Error::Config(vec![format!("images have 1 or 3 channels, not {other}")])),
    };
    if out.len() != c * h * w {
        return Err(Error::data(format!("{} has the wrong size after resizing", path.display())));
    }
    Ok(out)
}

/// Every raster under `dir` (recursively, sorted by path) as `target`-shaped tensors.
pub fn ingest_images(dir: &Path, target: [usize; 3]) -> Result<ImageDataset> {
    let mut files = Vec::new();
    collect_rasters(dir, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no raster files under {}", dir.display())));
    }
    let per: Vec<Vec<f32>> = files.par_iter().map(|f| load_raster(f, target)).collect::<Result<_>>()?;
    let labels = files
        .iter()
        .map(|f| f.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).and_then(|n| n.parse().ok()))
        .collect();
    let mut images = Tensor::new(vec![files.len(), target[0], target[1], target[2]], per.concat())?;
    let mean = mean_center(&mut images);
    Ok(ImageDataset { images, mean, files, labels })
}

/// Train, validation and test sets of one experiment.
#[derive(Clone, Debug)]
pub struct SplitSets<F> {
    pub train: MultimodalSet<F>,
    pub val: MultimodalSet<F>,
    pub test: MultimodalSet<F>,
}

pub const PAIRS_PER_EXAMPLE: usize = 20;

fn seeded_split(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, 7));
    let split = Split::sixty_twenty_twenty(n);
    [
        order[split.train].to_vec(),
        order[split.val].to_vec(),
        order[split.test].to_vec(),
    ]
}

/// 60/20/20 within every class, so each split sees every class that has
/// at least five examples.
fn stratified_split(labels: &[u8], seed: u64) -> [Vec<usize>; 3] {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut rng = derived_rng(seed, 8);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let split = Split::sixty_twenty_twenty(members.len());
        out[0].extend_from_slice(&members[split.train]);
        out[1].extend_from_slice(&members[split.val]);
        out[2].extend_from_slice(&members[split.test]);
    }
    out
}

fn pair_split(a: &Tensor<f32>, la: &[u8], b: &Tensor<f32>, lb: &[u8], seed: u64, stream: u64) -> Result<MultimodalSet<f32>> {
    let pairs = pair_datasets(la, lb, PAIRS_PER_EXAMPLE, &mut derived_rng(seed, stream))?;
    paired_set(a, b, &pairs)
}

/// Synthetic digit pairs: a one-channel and a three-channel rendering of the
/// same class, `per_class` source examples per class in the training split
/// (a third of that in validation and test), each paired 20 times.
pub fn synthetic_digit_pairs(per_class: usize, seed: u64) -> Result<SplitSets<f32>> {
    if per_class == 0 {
        return Err(Error::Config(vec!["synthetic per-class count must be positive".into()]));
    }
    let held_out = per_class.div_ceil(3);
    let mut out = Vec::new();
    let mut means = None;
    for (i, n) in [per_class, held_out, held_out].into_iter().enumerate() {
        let mut rng = derived_rng(seed, 100 + i as u64);
        let (mut a, la) = synthetic_digits(n, 1, &mut rng)?;
        let (mut b, lb) = synthetic_digits(n, 3, &mut rng)?;
        let (ma, mb) = *means.get_or_insert_with(|| {
            let mean = |t: &Tensor<f32>| (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64) as f32;
            (mean(&a), mean(&b))
        });
        a.data_mut().iter_mut().for_each(|v| *v -= ma);
        b.data_mut().iter_mut().for_each(|v| *v -= mb);
        out.push(pair_split(&a, &la, &b, &lb, seed, 200 + i as u64)?);
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(SplitSets { train, val, test })
}

/// Loads an image experiment from `dir`, which holds one subdirectory per
/// modality (taken in name order).
///
/// For `mnist_svhn` each modality directory must sort its images into
/// numeric class folders; examples are split 60/20/20 and paired by class
/// within each split. Otherwise the n-th image of every modality forms one
/// sample and samples are split 60/20/20.
pub fn load_image_experiment(experiment: Experiment, dir: &Path, seed: u64) -> Result<SplitSets<f32>> {
    let spec = crate::models::ModelSpec::for_experiment(experiment);
    let mut modality_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    modality_dirs.sort();
    match experiment {
        Experiment::CsiFeedback => Err(Error::contract("CSI data is not an image experiment")),
        Experiment::MnistSvhn => {
            if modality_dirs.len() != 2 {
                return Err(Error::data(format!("{} needs exactly two modality directories", dir.display())));
            }
            let sets: Vec<ImageDataset> = modality_dirs
                .iter()
                .zip(&spec.inputs)
                .map(|(d, &shape)| ingest_images(d, shape))
                .collect::<Result<_>>()?;
            let labels: Vec<Vec<u8>> = sets
                .iter()
                .map(|s| {
                    s.labels
                        .iter()
                        .zip(&s.files)
                        .map(|(l, f)| l.ok_or_else(|| Error::data(format!("{} is not inside a class directory", f.display()))))
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            let split_a = stratified_split(&labels[0], seed);
            let split_b = stratified_split(&labels[1], seed ^ 1);
            let mut out = Vec::new();
            for (i, (ia, ib)) in split_a.iter().zip(&split_b).enumerate() {
                let a = sets[0].images.gather_outer(ia)?;
                let b = sets[1].images.gather_outer(ib)?;
                let la: Vec<u8> = ia.iter().map(|&j| labels[0][j]).collect();
                let lb: Vec<u8> = ib.iter().map(|&j| labels[1][j]).collect();
                out.push(pair_split(&a, &la, &b, &lb, seed, 200 + i as u64)?);
            }
            let test = out.pop().expect("three splits");
            let val = out.pop().expect("three splits");
            let train = out.pop().expect("three splits");
            Ok(SplitSets { train, val, test })
        }
        Experiment::WifiCsi => {
            if modality_dirs.is_empty() {
                return Err(Error::data(format!("{} has no modality directories", dir.display())));
            }
            let shape = spec.inputs[0];
            let sets: Vec<ImageDataset> = modality_dirs.iter().map(|d| ingest_images(d, shape)).collect::<Result<_>>()?;
            let n = sets[0].files.len();
            if let Some(bad) = sets.iter().find(|s| s.files.len() != n) {
                return Err(Error::data(format!("modality directories disagree on image count ({} vs {n})", bad.files.len())));
            }
            let labels: Option<Vec<u8>> = sets[0].labels.iter().copied().collect();
            let full = MultimodalSet::new(sets.into_iter().map(|s| s.images).collect(), labels)?;
            let [train, val, test] = seeded_split(n, seed);
            Ok(SplitSets {
                train: full.subset(&train)?,
                val: full.subset(&val)?,
                test: full.subset(&test)?,
            })
        }
    }
}

/// Packs `indices` at `ceil(log2 k)` bits each, most significant bit first,
/// zero-padded to a byte boundary.
pub fn pack_indices(indices: &[usize], k: usize) -> Result<Vec<u8>> {
    let bits = index_bits(k) as usize;
    let mut out = vec![0u8; (indices.len() * bits).div_ceil(8)];
    let mut pos = 0;
    for &idx in indices {
        if idx >= k {
            return Err(Error::contract(format!("index {idx} out of range for k={k}")));
        }
        for b in (0..bits).rev() {
            if (idx >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], count: usize, k: usize) -> Result<Vec<usize>> {
    let bits = index_bits(k) as usize;
    let need = (count * bits).div_ceil(8);
    if bytes.len() < need {
        return Err(Error::format(format!("truncated index payload: {} of {need} bytes", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0;
    for _ in 0..count {
        let mut v = 0usize;
        for _ in 0..bits {
            v = (v << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1) as usize;
            pos += 1;
        }
        if v >= k {
            return Err(Error::format(format!("decoded index {v} out of range for k={k}")));
        }
        out.push(v);
    }
    Ok(out)
}

pub const BITSTREAM_MAGIC: &[u8; 4] = b"MVQC";
pub const BITSTREAM_VERSION: u8 = 1;

fn experiment_code(e: Experiment) -> u8 {
    match e {
        Experiment::MnistSvhn => 0,
        Experiment::WifiCsi => 1,
        Experiment::CsiFeedback => 2,
    }
}

fn experiment_from_code(c: u8) -> Result<Experiment> {
    Experiment::ALL
        .into_iter()
        .find(|&e| experiment_code(e) == c)
        .ok_or_else(|| Error::format(format!("unknown experiment code {c}")))
}

/// Transmitted code indices for a batch of samples.
///
/// Layout (big-endian): magic `MVQC`, version u8, experiment u8, k u32,
/// d u32, h_e u32, w_e u32, modality count u8, flags u8 (bit 0: scales
/// present), sample count u32, then one f64 scale per sample when flagged,
/// then each sample's packed indices padded to whole bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBitstream {
    pub experiment: Experiment,
    pub k: usize,
    pub d: usize,
    pub latent: (usize, usize),
    pub modalities: usize,
    pub scales: Option<Vec<f64>>,
    /// Row-major `(h_e, w_e)` indices, one vector per sample.
    pub samples: Vec<Vec<usize>>,
}

impl CodeBitstream {
    pub fn sample_payload_bytes(&self) -> usize {
        (self.latent.0 * self.latent.1 * index_bits(self.k) as usize).div_ceil(8)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let per = self.latent.0 * self.latent.1;
        if let Some(s) = &self.scales {
            if s.len() != self.samples.len() {
                return Err(Error::contract("one scale per sample required"));
            }
        }
        let mut out = Vec::with_capacity(28 + self.samples.len() * (self.sample_payload_bytes() + 8));
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.push(experiment_code(self.experiment));
        for v in [self.k, self.d, self.latent.0, self.latent.1] {
            out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::contract("header field exceeds u32"))?.to_be_bytes());
        }
        out.push(u8::try_from(self.modalities).map_err(|_| Error::contract("too many modalities"))?);
        out.push(self.scales.is_some() as u8);
        out.extend_from_slice(&(self.samples.len() as u32).to_be_bytes());
        for s in self.scales.iter().flatten() {
            out.extend_from_slice(&s.to_be_bytes());
        }
        for sample in &self.samples {
            if sample.len() != per {
                return Err(Error::Dimension {
                    op: "bitstream",
                    axis: "indices per sample".into(),
                    expected: per,
                    actual: sample.len(),
                });
            }
            out.extend(pack_indices(sample, self.k)?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::format("truncated bitstream"));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        if take(4)? != BITSTREAM_MAGIC {
            return Err(Error::format("not a code bitstream (bad magic)"));
        }
        let version = take(1)?[0];
        if version != BITSTREAM_VERSION {
            return Err(Error::format(format!("unsupported bitstream version {version}")));
        }
        let experiment = experiment_from_code(take(1)?[0])?;
        let mut u32s = [0usize; 4];
        for v in &mut u32s {
            *v = u32::from_be_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        let [k, d, h, w] = u32s;
        if k == 0 {
            return Err(Error::format("bitstream declares k=0"));
        }
        let modalities = take(1)?[0] as usize;
        let flags = take(1)?[0];
        let n = u32::from_be_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let scales = if flags & 1 == 1 {
            Some(
                (0..n)
                    .map(|_| Ok(f64::from_be_bytes(take(8)?.try_into().expect("8 bytes"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let per_bytes = (h * w * index_bits(k) as usize).div_ceil(8);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(unpack_indices(take(per_bytes)?, h * w, k)?);
        }
        if !r.is_empty() {
            return Err(Error::format(format!("{} trailing bytes after bitstream payload", r.len())));
        }
        Ok(Self {
            experiment,
            k,
            d,
            latent: (h, w),
            modalities,
            scales,
            samples,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Ordered `key=value` text file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn parse(text: &str) -> Self {
        Self { entries: parse_kv(text) }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::format(format!("manifest lacks `{key}`")))
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::format(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn channel_config_to_manifest(c: &ChannelConfig, m: &mut Manifest) {
    m.set("tau_rms", c.tau_rms);
    m.set("max_doppler", c.max_doppler);
    m.set("resource_blocks", c.resource_blocks);
    m.set("subcarrier_spacing", c.subcarrier_spacing);
    m.set("n_sym", c.n_sym);
    m.set("n_tx", c.n_tx);
    m.set("n_rx", c.n_rx);
    m.set("taps", c.taps);
    m.set("seed", c.seed);
}

/// Reads any channel keys present in `m` over `base`; bad values are all reported together.
pub fn channel_config_from_manifest(m: &Manifest, base: ChannelConfig) -> Result<ChannelConfig> {
    let mut c = base;
    let mut problems = Vec::new();
    macro_rules! field {
        ($key:literal, $dst:expr) => {
            if let Some(raw) = m.get($key) {
                match raw.parse() {
                    Ok(v) => $dst = v,
                    Err(_) => problems.push(format!("{}: cannot parse `{raw}`", $key)),
                }
            }
        };
    }
    field!("tau_rms", c.tau_rms);
    field!("max_doppler", c.max_doppler);
    field!("resource_blocks", c.resource_blocks);
    field!("subcarrier_spacing", c.subcarrier_spacing);
    field!("n_sym", c.n_sym);
    field!("n_tx", c.n_tx);
    field!("n_rx", c.n_rx);
    field!("taps", c.taps);
    field!("seed", c.seed);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    c.validate()?;
    Ok(c)
}

/// Preprocessed, normalised samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSplit {
    /// One `[N, 2, N_delay, N_tx]` tensor per receiver.
    pub modalities: Vec<Tensor<f64>>,
    /// Factor that restores each sample's original amplitude.
    pub scales: Vec<f64>,
    /// Realisation index of each sample (its truth can be regenerated).
    pub realizations: Vec<usize>,
}

impl CsiSplit {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn to_set<F: Element>(&self) -> Result<MultimodalSet<F>> {
        MultimodalSet::new(self.modalities.iter().map(Tensor::cast).collect(), None)
    }

    /// Sample `i` with its scale restored, one array per receiver.
    pub fn restored(&self, i: usize) -> Result<Vec<PreprocessedCsi>> {
        self.modalities
            .iter()
            .map(|t| {
                let [_, c, h, w] = t.dims4("restored")?;
                PreprocessedCsi::from_tensor(&t.slice_outer(i..i + 1)?.scale(self.scales[i]).reshape(vec![c, h, w])?)
            })
            .collect()
    }
}

/// Per-sample normalisation: divides every receiver array by the largest
/// absolute entry across receivers, returning the divisor (1 for all-zero).
pub fn normalize_sample(parts: &[PreprocessedCsi]) -> (Vec<Vec<f64>>, f64) {
    let peak = parts.iter().map(PreprocessedCsi::max_abs).fold(0.0, f64::max);
    let scale = if peak > 0.0 { peak } else { 1.0 };
    (parts.iter().map(|p| p.data().iter().map(|v| v / scale).collect()).collect(), scale)
}

fn build_split(config: &ChannelConfig, transform: &CsiTransform, range: std::ops::Range<usize>) -> Result<CsiSplit> {
    let n_rx = config.n_rx;
    let per: Vec<(Vec<Vec<f64>>, f64)> = range
        .clone()
        .into_par_iter()
        .map(|i| {
            let h = channel::generate_realization(config, i)?;
            Ok(normalize_sample(&transform.preprocess(&h)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len();
    let shape = [2, transform.n_delay(), config.n_tx];
    let mut modalities = Vec::with_capacity(n_rx);
    for rx in 0..n_rx {
        let data: Vec<f64> = per.iter().flat_map(|(parts, _)| parts[rx].iter().copied()).collect();
        modalities.push(Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?);
    }
    Ok(CsiSplit {
        modalities,
        scales: per.iter().map(|(_, s)| *s).collect(),
        realizations: range.collect(),
    })
}

/// Simulated CSI feedback dataset, split 60/20/20 by realisation index.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiDataset {
    pub config: ChannelConfig,
    pub n_delay: usize,
    pub train: CsiSplit,
    pub val: CsiSplit,
    pub test: CsiSplit,
}

impl CsiDataset {
    pub fn generate(config: &ChannelConfig, n: usize) -> Result<Self> {
        config.validate()?;
        if n < 5 {
            return Err(Error::Config(vec![format!("need at least 5 realizations for a 60/20/20 split, got {n}")]));
        }
        let n_delay = csi::delay_truncation_length(config.tau_rms, config.n_sc(), config.subcarrier_spacing);
        let transform = CsiTransform::new(config.n_sc(), n_delay, config.n_tx)?;
        let split = Split::sixty_twenty_twenty(n);
        Ok(Self {
            config: config.clone(),
            n_delay,
            train: build_split(config, &transform, split.train)?,
            val: build_split(config, &transform, split.val)?,
            test: build_split(config, &transform, split.test)?,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transform(&self) -> Result<CsiTransform> {
        CsiTransform::new(self.config.n_sc(), self.n_delay, self.config.n_tx)
    }

    pub fn splits(&self) -> [(&'static str, &CsiSplit); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    /// Channel parameters and layout as manifest entries.
    pub fn describe(&self, m: &mut Manifest) {
        m.set("kind", "csi_dataset");
        channel_config_to_manifest(&self.config, m);
        m.set("n_delay", self.n_delay);
        m.set("realizations", self.len());
        for (name, s) in self.splits() {
            m.set(&format!("{name}_samples"), s.len());
        }
    }

    /// Writes `manifest.txt` (`run` entries followed by the dataset
    /// description), plus `<split>.mvqt` (`[N, M, 2, N_delay, N_tx]`)
    /// and `<split>.meta.mvqt` (`[N, 2]` of realisation index and scale).
    pub fn save(&self, dir: &Path, run: &Manifest) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = run.clone();
        self.describe(&mut m);
        m.write(&dir.join(MANIFEST_FILE))?;
        for (name, split) in self.splits() {
            let n = split.len();
            let m_count = split.modalities.len();
            let plane = 2 * self.n_delay * self.config.n_tx;
            let mut data = vec![0.0; n * m_count * plane];
            for (rx, t) in split.modalities.iter().enumerate() {
                for i in 0..n {
                    let dst = (i * m_count + rx) * plane;
                    data[dst..dst + plane].copy_from_slice(&t.data()[i * plane..(i + 1) * plane]);
                }
            }
            let samples = Tensor::new(vec![n, m_count, 2, self.n_delay, self.config.n_tx], data)?;
            tensor::save_tensor(dir.join(format!("{name}.mvqt")), &samples)?;
            let meta: Vec<f64> = split.realizations.iter().zip(&split.scales).flat_map(|(&r, &s)| [r as f64, s]).collect();
            let meta = Tensor::new(vec![n, 2], meta)?;
            tensor::save_tensor(dir.join(format!("{name}.meta.mvqt")), &meta)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join(MANIFEST_FILE))
            .map_err(|e| Error::data(format!("{} is not a CSI dataset directory: {e}", dir.display())))?;
        if m.get("kind") != Some("csi_dataset") {
            return Err(Error::data(format!("{} does not hold a CSI dataset", dir.display())));
        }
        let config = channel_config_from_manifest(&m, ChannelConfig::default())?;
        let n_delay: usize = m.parsed("n_delay")?;
        let load_split = |name: &str| -> Result<CsiSplit> {
            let samples: Tensor<f64> = tensor::load_tensor(dir.join(format!("{name}.mvqt")))?;
            let meta: Tensor<f64> = tensor::load_tensor(dir.join(format!("{name}.meta.mvqt")))?;
            let s = samples.shape().to_vec();
            if s.len() != 5 || s[2] != 2 || s[3] != n_delay || s[4] != config.n_tx || s[1] != config.n_rx {
                return Err(Error::data(format!("{name}.mvqt has shape {s:?}, inconsistent with the manifest")));
            }
            let rows: Vec<[f64; 2]> = meta.data().chunks(2).map(|c| [c[0], c[1]]).collect();
            let n = rows.len();
            if n != s[0] {
                return Err(Error::data(format!("{name}: {} samples but {n} metadata rows", s[0])));
            }
            let plane = 2 * n_delay * config.n_tx;
            let modalities = (0..s[1])
                .map(|rx| {
                    let mut data = Vec::with_capacity(n * plane);
                    for i in 0..n {
                        let src = (i * s[1] + rx) * plane;
                        data.extend_from_slice(&samples.data()[src..src + plane]);
                    }
                    Tensor::new(vec![n, 2, n_delay, config.n_tx], data)
                })
                .collect::<Result<_>>()?;
            Ok(CsiSplit {
                modalities,
                scales: rows.iter().map(|r| r[1]).collect(),
                realizations: rows.iter().map(|r| r[0] as usize).collect(),
            })
        };
        let (train, val, test) = (load_split("train")?, load_split("val")?, load_split("test")?);
        Ok(Self {
            config,
            n_delay,
            train,
            val,
            test,
        })
    }
}

/// Writes a binary PGM (`P5`) from values in `[0, 1]`.
pub fn write_pgm(w: &mut impl Write, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::contract("pgm pixel count mismatch"));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Deterministic per-purpose RNG derived from a master seed.
pub fn derived_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pairing_toy_counts() {
        let mut rng = derived_rng(0, 0);
        let pairs = pair_datasets(&[0], &[0], 1, &mut rng).unwrap();
        assert_eq!(pairs, vec![PairedSample { a: 0, b: 0, label: 0, pair_id: 0 }]);

        let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let pairs = pair_datasets(&labels, &labels, 2, &mut rng).unwrap();
        assert_eq!(pairs.len(), 20);
        let mut uses_a = [0; 10];
        let mut uses_b = [0; 10];
        for p in &pairs {
            assert_eq!(labels[p.a], p.label);
            assert_eq!(labels[p.b], p.label);
            uses_a[p.a] += 1;
            uses_b[p.b] += 1;
        }
        assert_eq!(uses_a, [2; 10]);
        assert_eq!(uses_b, [2; 10]);
        // no repeated partner for the same a
        for a in 0..10 {
            let mut bs: Vec<usize> = pairs.iter().filter(|p| p.a == a).map(|p| p.b).collect();
            bs.sort();
            bs.dedup();
            assert_eq!(bs.len(), 2);
        }
    }

    #[test]
    fn pairing_is_seeded_and_rejects_missing_class() {
        let a = [0, 1, 2, 0, 1, 2];
        let b = [2, 1, 0, 0, 1, 2];
        let p1 = pair_datasets(&a, &b, 20, &mut derived_rng(5, 0)).unwrap();
        let p2 = pair_datasets(&a, &b, 20, &mut derived_rng(5, 0)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.len(), 120);
        let err = pair_datasets(&[0, 3], &[0], 1, &mut derived_rng(0, 0)).unwrap_err();
        assert!(err.to_string().contains("class 3"));
    }

    #[test]
    fn synthetic_digits_are_labelled_and_bounded() {
        let (imgs, labels) = synthetic_digits(3, 3, &mut derived_rng(1, 0)).unwrap();
        assert_eq!(imgs.shape(), [30, 3, 32, 32]);
        assert_eq!(labels[..10], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert!(imgs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (mnist, _) = synthetic_digits(1, 1, &mut derived_rng(1, 0)).unwrap();
        // "1" lights fewer pixels than "8"
        let lit = |i: usize| mnist.data()[i * 1024..(i + 1) * 1024].iter().filter(|&&v| v > 0.5).count();
        assert!(lit(1) < lit(8));
    }

    #[test]
    fn bitstream_sizes() {
        assert_eq!(pack_indices(&[511; 64], 512).unwrap().len(), 72);
        assert_eq!(pack_indices(&[0; 64], 2).unwrap(), vec![0u8; 8]);
        assert_eq!(pack_indices(&[1, 0, 3], 4).unwrap(), vec![0b0100_1100]);
        assert!(pack_indices(&[4], 4).is_err());
    }

    #[test]
    fn bitstream_rejects_corruption() {
        let s = CodeBitstream {
            experiment: Experiment::CsiFeedback,
            k: 512,
            d: 128,
            latent: (8, 8),
            modalities: 2,
            scales: Some(vec![0.5, 2.0]),
            samples: vec![vec![3; 64], vec![500; 64]],
        };
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), 28 + 16 + 144);
        assert_eq!(CodeBitstream::from_bytes(&bytes).unwrap(), s);
        let err = CodeBitstream::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CodeBitstream::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    }

    proptest! {
        #[test]
        fn indices_round_trip(k in 2usize..=512, raw in proptest::collection::vec(any::<u32>(), 1..200)) {
            let idx: Vec<usize> = raw.iter().map(|&v| v as usize % k).collect();
            let packed = pack_indices(&idx, k).unwrap();
            prop_assert_eq!(packed.len(), (idx.len() * index_bits(k) as usize).div_ceil(8));
            prop_assert_eq!(unpack_indices(&packed, idx.len(), k).unwrap(), idx);
        }
    }

    #[test]
    fn csi_dataset_splits_and_storage() {
        let cfg = ChannelConfig { resource_blocks: 4, n_sym: 2, ..ChannelConfig::default() };
        let ds = CsiDataset::generate(&cfg, 10).unwrap();
        assert_eq!([ds.train.len(), ds.val.len(), ds.test.len()], [6, 2, 2]);
        for (_, s) in ds.splits() {
            for t in &s.modalities {
                assert!(t.max_abs() <= 1.0 + 1e-12);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &Manifest::default()).unwrap();
        assert_eq!(CsiDataset::load(dir.path()).unwrap(), ds);
        // splits share no sample
        use std::collections::HashSet;
        let hashes = |s: &CsiSplit| -> HashSet<Vec<u64>> {
            (0..s.len()).map(|i| s.modalities.iter().flat_map(|t| t.slice_outer(i..i + 1).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()).collect()
        };
        let (a, b, c) = (hashes(&ds.train), hashes(&ds.val), hashes(&ds.test));
        assert_eq!(a.len() + b.len() + c.len(), 10);
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        // restored sample equals fresh preprocessing
        let h = channel::generate_realization(&cfg, ds.test.realizations[1]).unwrap();
        let fresh = ds.transform().unwrap().preprocess(&h).unwrap();
        let restored = ds.test.restored(1).unwrap();
        for (a, b) in fresh.iter().zip(&restored) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raster_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("3");
        fs::create_dir(&class).unwrap();
        image::GrayImage::from_pixel(640, 480, image::Luma([200])).save(class.join("big.png")).unwrap();
        let mut small = image::GrayImage::new(4, 4);
        for (i, p) in small.pixels_mut().enumerate() {
            p.0[0] = (i * 16) as u8;
        }
        small.save(dir.path().join("small.png")).unwrap();

        let big = load_raster(&class.join("big.png"), [1, 224, 224]).unwrap();
        assert_eq!(big.len(), 224 * 224);
        assert!(big.iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-4));
        let same = load_raster(&dir.path().join("small.png"), [1, 4, 4]).unwrap();
        for (i, v) in same.iter().enumerate() {
            assert!((v - (i * 16) as f32 / 255.0).abs() < 1e-6);
        }

        let ds = ingest_images(dir.path(), [1, 8, 8]).unwrap();
        assert_eq!(ds.images.shape(), [2, 1, 8, 8]);
        assert_eq!(ds.labels, vec![Some(3), None]);
        assert!(ds.images.data().iter().map(|&v| v as f64).sum::<f64>().abs() < 1e-3);
        assert!(ds.manifest().contains("big.png"));
    }

    #[test]
    fn synthetic_pairs_are_label_consistent() {
        let sets = synthetic_digit_pairs(3, 9).unwrap();
        assert_eq!(sets.train.len(), 3 * 10 * PAIRS_PER_EXAMPLE);
        assert_eq!(sets.val.len(), 10 * PAIRS_PER_EXAMPLE);
        assert_eq!(sets.train.sample_shapes(), vec![[1, 32, 32], [3, 32, 32]]);
        let again = synthetic_digit_pairs(3, 9).unwrap();
        assert_eq!(sets.train, again.train);
    }

    #[test]
    fn image_experiment_directories() {
        let dir = tempfile::tempdir().unwrap();
        for (m, channels) in [("a_mnist", 1u8), ("b_svhn", 3)] {
            for class in 0..2 {
                let d = dir.path().join(m).join(class.to_string());
                fs::create_dir_all(&d).unwrap();
                for i in 0..5 {
                    let v = (class * 100 + i * 10) as u8;
                    if channels == 1 {
                        image::GrayImage::from_pixel(28, 28, image::Luma([v])).save(d.join(format!("{i}.png"))).unwrap();
                    } else {
                        image::RgbImage::from_pixel(32, 32, image::Rgb([v, v, 0])).save(d.join(format!("{i}.png"))).unwrap();
                    }
                }
            }
        }
        let sets = load_image_experiment(Experiment::MnistSvhn, dir.path(), 0).unwrap();
        // 10 examples per modality -> 6 / 2 / 2 per split, 20 partners each
        assert_eq!(sets.train.len(), 6 * PAIRS_PER_EXAMPLE);
        assert_eq!(sets.test.len(), 2 * PAIRS_PER_EXAMPLE);
        assert_eq!(sets.train.sample_shapes(), vec![[1, 32, 32], [3, 32, 32]]);
    }
}
