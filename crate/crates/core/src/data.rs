//! Synthetic glyph dataset and the four data-augmentation mechanisms.
//!
//! Ten procedurally drawn glyph classes (bars, crosses, rings, checkers)
//! stand in for a real image corpus. Everything is a pure function of
//! (seed, size, split); per-sample rng substreams are keyed by sample index
//! so parallel generation stays reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::model::{INPUT_DIM, INPUT_H, INPUT_W, NUM_CLASSES};
use crate::tensor::Tensor;

pub const NOISE_AMPLITUDE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled image set with pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the rows at `indices` into a fresh (B, 1, H, W) batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * INPUT_DIM);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend_from_slice(&d[i * INPUT_DIM..(i + 1) * INPUT_DIM]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_parts(vec![indices.len(), 1, INPUT_H, INPUT_W], out),
            labels,
        )
    }
}

/// Per-row probability distributions over the 10 classes.
#[derive(Debug, Clone)]
pub struct SoftLabels {
    pub probs: Tensor,
}

impl SoftLabels {
    pub fn from_hard(labels: &[usize]) -> SoftLabels {
        let mut data = vec![0.0; labels.len() * NUM_CLASSES];
        for (i, &y) in labels.iter().enumerate() {
            data[i * NUM_CLASSES + y] = 1.0;
        }
        SoftLabels {
            probs: Tensor::from_parts(vec![labels.len(), NUM_CLASSES], data),
        }
    }

    /// Simplex invariant: rows sum to 1 within 1e-9, entries non-negative.
    pub fn is_valid(&self) -> bool {
        let d = self.probs.data();
        d.chunks_exact(NUM_CLASSES).all(|row| {
            row.iter().all(|&v| v >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMechanism {
    None,
    Mu,
    Cm,
    Co,
    Ls,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub mechanism: AugmentMechanism,
    pub tau: u32,
}

/// Concrete magnitude parameter realised by an augmentation at level tau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentParam {
    /// Per-sample application probability (MU, CM) or smoothing mass (LS).
    Probability(f64),
    /// Cutout box side.
    MaskSide(usize),
    Identity,
}

/// Maps the magnitude level tau in [1, 5] to the mechanism's concrete
/// parameter: MU/CM p = 0.1 + 0.2 (tau-1), LS p = 0.1 tau, CO side in
/// {4, 6, 8, 10, 12}.
pub fn tau_to_params(mechanism: AugmentMechanism, tau: u32) -> Result<AugmentParam, DataError> {
    if !(1..=5).contains(&tau) {
        return Err(DataError::TauOutOfRange(tau));
    }
    Ok(match mechanism {
        AugmentMechanism::None => AugmentParam::Identity,
        AugmentMechanism::Mu | AugmentMechanism::Cm => {
            AugmentParam::Probability(0.1 + 0.2 * (tau - 1) as f64)
        }
        AugmentMechanism::Ls => AugmentParam::Probability(0.1 * tau as f64),
        AugmentMechanism::Co => AugmentParam::MaskSide(2 + 2 * tau as usize),
    })
}

pub(crate) fn mix_seed(seed: u64, tag: u64, idx: u64) -> u64 {
    // splitmix64 over the packed key
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(idx.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn sample_rng(seed: u64, tag: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag, idx))
}

const GLYPH_HI: f64 = 0.67;
const GLYPH_LO: f64 = 0.33;

fn draw_glyph(class: usize, dy: isize, dx: isize) -> [f64; INPUT_DIM] {
    let mut img = [GLYPH_LO; INPUT_DIM];
    let h = INPUT_H as isize;
    let w = INPUT_W as isize;
    for i in 0..h {
        for j in 0..w {
            // glyph coordinates before the per-sample shift
            let gi = i - dy;
            let gj = j - dx;
            if gi < 0 || gi >= h || gj < 0 || gj >= w {
                continue;
            }
            let on = match class {
                0 => (7..=8).contains(&gi) && (2..14).contains(&gj),
                1 => (7..=8).contains(&gj) && (2..14).contains(&gi),
                2 => (gi - gj).abs() <= 1,
                3 => (gi + gj - 15).abs() <= 1,
                4 => {
                    ((7..=8).contains(&gi) && (2..14).contains(&gj))
                        || ((7..=8).contains(&gj) && (2..14).contains(&gi))
                }
                5 => (gi - gj).abs() <= 1 || (gi + gj - 15).abs() <= 1,
                6 => {
                    let r = (((gi as f64 - 7.5).powi(2) + (gj as f64 - 7.5).powi(2)) as f64).sqrt();
                    (r - 5.5).abs() <= 1.0
                }
                7 => {
                    let r = (((gi as f64 - 7.5).powi(2) + (gj as f64 - 7.5).powi(2)) as f64).sqrt();
                    r <= 3.5
                }
                8 => ((gi / 2) + (gj / 2)) % 2 == 0,
                _ => ((gi / 4) + (gj / 4)) % 2 == 1,
            };
            if on {
                img[(i * w + j) as usize] = GLYPH_HI;
            }
        }
    }
    img
}

fn generate_split(seed: u64, n: usize, split: Split) -> Dataset {
    let tag = match split {
        Split::Train => 0x7261_u64,
        Split::Test => 0x7465_u64,
    };
    let mut data = Vec::with_capacity(n * INPUT_DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mut rng = sample_rng(seed, tag, i as u64);
        let dy = rng.gen_range(-2..=2);
        let dx = rng.gen_range(-2..=2);
        let mut img = draw_glyph(class, dy, dx);
        for v in img.iter_mut() {
            *v = (*v + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&img);
        labels.push(class);
    }
    Dataset {
        images: Tensor::from_parts(vec![n, 1, INPUT_H, INPUT_W], data),
        labels,
        split,
    }
}

/// Deterministic class-balanced train/test glyph sets with disjoint seed
/// streams. Sizes must be multiples of 10 and at least 100 (train).
pub fn glyphset_generate(
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(Dataset, Dataset), DataError> {
    if n_train < NUM_CLASSES * NUM_CLASSES {
        return Err(DataError::TooSmall(n_train, NUM_CLASSES * NUM_CLASSES));
    }
    if n_train % NUM_CLASSES != 0 || n_test % NUM_CLASSES != 0 {
        return Err(DataError::TooSmall(n_test.min(n_train), NUM_CLASSES));
    }
    Ok((
        generate_split(seed, n_train, Split::Train),
        generate_split(seed, n_test, Split::Test),
    ))
}

/// Mixup: each sample independently with probability p becomes the convex
/// combination b x_i + (1-b) x_j with matching label mix, b ~ Uniform(0,1)
/// (Beta(1,1)), partner j uniform over the batch.
pub fn mixup(
    images: &Tensor,
    labels: &SoftLabels,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, SoftLabels), DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::BadProbability(p));
    }
    let n = images.shape()[0];
    if n == 0 {
        return Err(DataError::EmptyBatch);
    }
    let mut out = images.clone();
    let mut probs = labels.probs.clone();
    for i in 0..n {
        if rng.gen::<f64>() >= p {
            continue;
        }
        let j = rng.gen_range(0..n);
        let b: f64 = rng.gen();
        mix_rows(out.data_mut(), images.data(), i, j, INPUT_DIM, b);
        mix_rows(probs.data_mut(), labels.probs.data(), i, j, NUM_CLASSES, b);
    }
    Ok((out, SoftLabels { probs }))
}

fn mix_rows(dst: &mut [f64], src: &[f64], i: usize, j: usize, stride: usize, b: f64) {
    for k in 0..stride {
        dst[i * stride + k] = b * src[i * stride + k] + (1.0 - b) * src[j * stride + k];
    }
}

/// Cutmix: with probability p per sample, paste a square patch from a random
/// partner; the label mixes by the actually pasted area fraction.
pub fn cutmix(
    images: &Tensor,
    labels: &SoftLabels,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, SoftLabels), DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::BadProbability(p));
    }
    let n = images.shape()[0];
    if n == 0 {
        return Err(DataError::EmptyBatch);
    }
    let mut out = images.clone();
    let mut probs = labels.probs.clone();
    for i in 0..n {
        if rng.gen::<f64>() >= p {
            continue;
        }
        let j = rng.gen_range(0..n);
        let b: f64 = rng.gen();
        let side = ((INPUT_H as f64) * (1.0 - b).sqrt()).round() as isize;
        let cy = rng.gen_range(0..INPUT_H) as isize;
        let cx = rng.gen_range(0..INPUT_W) as isize;
        let y0 = (cy - side / 2).max(0) as usize;
        let y1 = ((cy - side / 2 + side).max(0) as usize).min(INPUT_H);
        let x0 = (cx - side / 2).max(0) as usize;
        let x1 = ((cx - side / 2 + side).max(0) as usize).min(INPUT_W);
        let mut area = 0usize;
        let src = images.data();
        let dst = out.data_mut();
        for y in y0..y1 {
            for x in x0..x1 {
                let off = y * INPUT_W + x;
                dst[i * INPUT_DIM + off] = src[j * INPUT_DIM + off];
                area += 1;
            }
        }
        let lam = 1.0 - area as f64 / INPUT_DIM as f64;
        mix_rows(probs.data_mut(), labels.probs.data(), i, j, NUM_CLASSES, lam);
    }
    Ok((out, SoftLabels { probs }))
}

/// Cutout: zero the intersection of an M x M box at a uniform random center
/// with each image. Labels are untouched.
pub fn cutout(images: &Tensor, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = images.shape()[0];
    let mut out = images.clone();
    let half = m as isize / 2;
    for i in 0..n {
        let cy = rng.gen_range(0..INPUT_H) as isize;
        let cx = rng.gen_range(0..INPUT_W) as isize;
        let y0 = (cy - half).max(0) as usize;
        let y1 = ((cy - half + m as isize).max(0) as usize).min(INPUT_H);
        let x0 = (cx - half).max(0) as usize;
        let x1 = ((cx - half + m as isize).max(0) as usize).min(INPUT_W);
        let d = out.data_mut();
        for y in y0..y1 {
            for x in x0..x1 {
                d[i * INPUT_DIM + y * INPUT_W + x] = 0.0;
            }
        }
    }
    out
}

/// Label smoothing: ground truth keeps 1-p, the rest share p/(m-1).
pub fn label_smooth(labels: &[usize], p: f64) -> Result<SoftLabels, DataError> {
    if !(0.0..1.0).contains(&p) {
        return Err(DataError::BadProbability(p));
    }
    let off = p / (NUM_CLASSES - 1) as f64;
    let mut data = vec![off; labels.len() * NUM_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        data[i * NUM_CLASSES + y] = 1.0 - p;
    }
    Ok(SoftLabels {
        probs: Tensor::from_parts(vec![labels.len(), NUM_CLASSES], data),
    })
}

/// Applies the configured augmentation to one batch.
pub fn augment_batch(
    cfg: AugmentConfig,
    images: &Tensor,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, SoftLabels), DataError> {
    let hard = SoftLabels::from_hard(labels);
    match tau_to_params(cfg.mechanism, cfg.tau.max(1))? {
        AugmentParam::Identity => Ok((images.clone(), hard)),
        AugmentParam::Probability(p) => match cfg.mechanism {
            AugmentMechanism::Mu => mixup(images, &hard, p, rng),
            AugmentMechanism::Cm => cutmix(images, &hard, p, rng),
            AugmentMechanism::Ls => Ok((images.clone(), label_smooth(labels, p)?)),
            _ => unreachable!(),
        },
        AugmentParam::MaskSide(m) => Ok((cutout(images, m, rng), hard)),
    }
}

/// Reads a big-endian IDX image/label pair (28 x 28), center-crops to 24 x 24
/// and nearest-neighbor resamples to 16 x 16. Optional alternative to the
/// synthetic generator; no downloading is performed.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset, DataError> {
    let img_bytes = std::fs::read(images_path)?;
    let lab_bytes = std::fs::read(labels_path)?;
    let be32 = |b: &[u8], at: usize| -> Result<u32, DataError> {
        b.get(at..at + 4)
            .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
            .ok_or_else(|| DataError::Idx("truncated header".into()))
    };
    if be32(&img_bytes, 0)? != 0x0000_0803 {
        return Err(DataError::Idx("bad image magic".into()));
    }
    if be32(&lab_bytes, 0)? != 0x0000_0801 {
        return Err(DataError::Idx("bad label magic".into()));
    }
    let n = be32(&img_bytes, 4)? as usize;
    let rows = be32(&img_bytes, 8)? as usize;
    let cols = be32(&img_bytes, 12)? as usize;
    if rows != 28 || cols != 28 {
        return Err(DataError::Idx(format!("expected 28x28 images, got {rows}x{cols}")));
    }
    if be32(&lab_bytes, 4)? as usize != n {
        return Err(DataError::Idx("image/label count mismatch".into()));
    }
    let pix = img_bytes
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| DataError::Idx("truncated image data".into()))?;
    let labs = lab_bytes
        .get(8..8 + n)
        .ok_or_else(|| DataError::Idx("truncated label data".into()))?;
    let crop = 24usize;
    let off = (rows - crop) / 2;
    let mut data = Vec::with_capacity(n * INPUT_DIM);
    for s in 0..n {
        for i in 0..INPUT_H {
            let si = off + i * crop / INPUT_H;
            for j in 0..INPUT_W {
                let sj = off + j * crop / INPUT_W;
                data.push(pix[s * rows * cols + si * cols + sj] as f64 / 255.0);
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, 1, INPUT_H, INPUT_W], data),
        labels: labs.iter().map(|&b| b as usize).collect(),
        split: Split::Train,
    })
}
