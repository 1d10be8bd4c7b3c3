//! Deterministic synthetic datasets: a Gaussian-mixture classification
//! task with confusable class pairs, and rectangle segmentation grids for
//! the channel-wise loss. Everything is a pure function of (args, seed).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DATA_MAGIC: &[u8; 8] = b"BDDDATA1";

/// C-class Gaussian mixture over D-dimensional features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// How far the means of pair (2k, 2k+1) are pulled toward each other;
    /// 0 leaves them apart, 1 collapses them.
    pub overlap: f64,
    /// Scale applied to the unit mean directions.
    pub separation: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            classes: 10,
            dim: 16,
            n_per_class: 150,
            overlap: 0.5,
            separation: 7.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationDataset {
    /// Row-major [N, D].
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub dim: usize,
    pub class_count: usize,
    pub seed: u64,
}

impl ClassificationDataset {
    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Feature tensor for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut feats = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), self.dim], feats).unwrap(),
            labels,
        )
    }

    fn subset(&self, indices: &[usize]) -> ClassificationDataset {
        let (feats, labels): (Vec<&[f64]>, Vec<usize>) = indices
            .iter()
            .map(|&i| (self.feature_row(i), self.labels[i]))
            .unzip();
        ClassificationDataset {
            features: feats.concat(),
            labels,
            n: indices.len(),
            dim: self.dim,
            class_count: self.class_count,
            seed: self.seed,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class means for the mixture: scaled random unit directions with pairs
/// (2k, 2k+1) pulled together by `overlap`.
pub fn mixture_means(spec: &MixtureSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            unit_vector(&mut rng, spec.dim)
                .into_iter()
                .map(|x| x * spec.separation)
                .collect()
        })
        .collect();
    let mut k = 0;
    while k + 1 < spec.classes {
        for d in 0..spec.dim {
            let (a, b) = (means[k][d], means[k + 1][d]);
            means[k][d] = a + 0.5 * spec.overlap * (b - a);
            means[k + 1][d] = b + 0.5 * spec.overlap * (a - b);
        }
        k += 2;
    }
    means
}

/// Unit-variance isotropic noise around pair-confusable class means.
pub fn gen_gaussian_mixture(spec: &MixtureSpec) -> Result<ClassificationDataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    if spec.dim < 2 {
        return Err(Error::invalid("dim", "need at least 2"));
    }
    if spec.n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.overlap) {
        return Err(Error::invalid("overlap", "must be in [0, 1]"));
    }
    let means = mixture_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.n_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + noise);
            }
            labels.push(c);
        }
    }
    Ok(ClassificationDataset {
        features,
        labels,
        n,
        dim: spec.dim,
        class_count: spec.classes,
        seed: spec.seed,
    })
}

/// Segmentation grids: background plus 1–3 axis-aligned rectangles.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SegGridSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub n: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SegGridSpec {
    fn default() -> Self {
        SegGridSpec {
            classes: 4,
            height: 16,
            width: 16,
            n: 400,
            feature_dim: 8,
            separation: 3.0,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationGridDataset {
    /// Row-major [N, D, H, W].
    pub features: Vec<f64>,
    /// Row-major [N, H, W].
    pub labels: Vec<usize>,
    pub n: usize,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub seed: u64,
}

impl SegmentationGridDataset {
    pub fn grid_features(&self, i: usize) -> &[f64] {
        let sz = self.feature_dim * self.height * self.width;
        &self.features[i * sz..(i + 1) * sz]
    }

    pub fn grid_labels(&self, i: usize) -> &[usize] {
        let sz = self.height * self.width;
        &self.labels[i * sz..(i + 1) * sz]
    }

    /// Feature tensor [len, D, H, W] and flattened per-pixel labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for &i in indices {
            feats.extend_from_slice(self.grid_features(i));
            labels.extend_from_slice(self.grid_labels(i));
        }
        (
            Tensor::from_vec(
                &[indices.len(), self.feature_dim, self.height, self.width],
                feats,
            )
            .unwrap(),
            labels,
        )
    }

    fn subset(&self, indices: &[usize]) -> SegmentationGridDataset {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for &i in indices {
            features.extend_from_slice(self.grid_features(i));
            labels.extend_from_slice(self.grid_labels(i));
        }
        SegmentationGridDataset {
            features,
            labels,
            n: indices.len(),
            ..self.clone()
        }
    }
}

/// Per-class feature means for the grid task.
pub fn grid_class_means(spec: &SegGridSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0xA24B_AED4_963E_E407));
    (0..spec.classes)
        .map(|_| {
            unit_vector(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|x| x * spec.separation)
                .collect()
        })
        .collect()
}

fn validate_grid_spec(spec: &SegGridSpec) -> Result<()> {
    if spec.classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    if spec.height < 4 || spec.width < 4 {
        return Err(Error::invalid("grid", "height and width must be >= 4"));
    }
    if spec.n == 0 || spec.feature_dim == 0 {
        return Err(Error::invalid("n", "n and feature_dim must be positive"));
    }
    Ok(())
}

fn fill_grid_features(
    labels: &[usize],
    means: &[Vec<f64>],
    spec: &SegGridSpec,
    rng: &mut ChaCha8Rng,
    features: &mut Vec<f64>,
) {
    let (h, w) = (spec.height, spec.width);
    for d in 0..spec.feature_dim {
        for cell in 0..h * w {
            let m = means[labels[cell]][d];
            let noise: f64 = rng.sample(StandardNormal);
            features.push(m + noise);
        }
    }
}

/// Random rectangle grids; at least one background row survives so every
/// sample carries >= 2 distinct classes.
pub fn gen_segmentation_grids(spec: &SegGridSpec) -> Result<SegmentationGridDataset> {
    validate_grid_spec(spec)?;
    let means = grid_class_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let mut features = Vec::with_capacity(spec.n * spec.feature_dim * h * w);
    let mut labels = Vec::with_capacity(spec.n * h * w);
    for _ in 0..spec.n {
        let mut grid = vec![0usize; h * w];
        let rects = rng.gen_range(1..=3);
        for _ in 0..rects {
            let class = rng.gen_range(1..spec.classes);
            let rh = rng.gen_range(2..h);
            let rw = rng.gen_range(2..=w);
            // top row stays background, keeping two classes per sample
            let y0 = rng.gen_range(1..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    grid[y * w + x] = class;
                }
            }
        }
        fill_grid_features(&grid, &means, spec, &mut rng, &mut features);
        labels.extend_from_slice(&grid);
    }
    Ok(SegmentationGridDataset {
        features,
        labels,
        n: spec.n,
        feature_dim: spec.feature_dim,
        height: h,
        width: w,
        class_count: spec.classes,
        seed: spec.seed,
    })
}

/// Degenerate grid covered entirely by one class; used to pin the label
/// layout in tests.
pub fn gen_uniform_grid(spec: &SegGridSpec, class: usize) -> Result<SegmentationGridDataset> {
    validate_grid_spec(spec)?;
    if class >= spec.classes {
        return Err(Error::invalid("class", "out of range"));
    }
    let means = grid_class_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let grid = vec![class; h * w];
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..spec.n {
        fill_grid_features(&grid, &means, spec, &mut rng, &mut features);
        labels.extend_from_slice(&grid);
    }
    Ok(SegmentationGridDataset {
        features,
        labels,
        n: spec.n,
        feature_dim: spec.feature_dim,
        height: h,
        width: w,
        class_count: spec.classes,
        seed: spec.seed,
    })
}

/// Seeded, per-class stratified split indices: disjoint and exhaustive.
pub fn stratified_split_indices(
    labels: &[usize],
    class_count: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("fraction", "must be in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut idx in per_class {
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64) * fraction).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Stratified train/val split of a classification dataset.
pub fn train_val_split(
    ds: &ClassificationDataset,
    fraction: f64,
    seed: u64,
) -> Result<(ClassificationDataset, ClassificationDataset)> {
    let (train, val) = stratified_split_indices(&ds.labels, ds.class_count, fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Seeded (unstratified) split of segmentation grids by sample.
pub fn seg_train_val_split(
    ds: &SegmentationGridDataset,
    fraction: f64,
    seed: u64,
) -> Result<(SegmentationGridDataset, SegmentationGridDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("fraction", "must be in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..ds.n).collect();
    idx.shuffle(&mut rng);
    let n_train = ((ds.n as f64) * fraction).round() as usize;
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut val: Vec<usize> = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Binary dump with header (kind, dims, class count, seed); round-trips
/// bit-exactly.
pub fn save_classification(path: &Path, ds: &ClassificationDataset) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(DATA_MAGIC)?;
    f.write_all(&[0u8])?;
    for v in [ds.n, ds.dim, ds.class_count] {
        f.write_all(&(v as u64).to_le_bytes())?;
    }
    f.write_all(&ds.seed.to_le_bytes())?;
    for &y in &ds.labels {
        f.write_all(&(y as u32).to_le_bytes())?;
    }
    for &v in &ds.features {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_classification(path: &Path) -> Result<ClassificationDataset> {
    let malformed = |m: String| Error::Malformed {
        path: path.display().to_string(),
        message: m,
    };
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 9];
    f.read_exact(&mut magic)?;
    if &magic[..8] != DATA_MAGIC || magic[8] != 0 {
        return Err(malformed("bad magic or kind".into()));
    }
    let n = read_u64(&mut f)? as usize;
    let dim = read_u64(&mut f)? as usize;
    let class_count = read_u64(&mut f)? as usize;
    let seed = read_u64(&mut f)?;
    let mut labels = Vec::with_capacity(n);
    let mut buf4 = [0u8; 4];
    for _ in 0..n {
        f.read_exact(&mut buf4)?;
        let y = u32::from_le_bytes(buf4) as usize;
        if y >= class_count {
            return Err(malformed(format!("label {y} out of range")));
        }
        labels.push(y);
    }
    let mut buf = vec![0u8; n * dim * 8];
    f.read_exact(&mut buf)?;
    let features = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ClassificationDataset {
        features,
        labels,
        n,
        dim,
        class_count,
        seed,
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
