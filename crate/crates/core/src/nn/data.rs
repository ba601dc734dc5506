//! Datasets: IDX (MNIST layout), TNSR image/label pairs, and built-in
//! synthetic generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[count, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per: usize = self.images.shape()[1..].iter().product();
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&data[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((
            Tensor::new(shape, out)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Shuffled mini-batch index lists for one epoch; deterministic in
    /// `(seed, epoch)`. A trailing partial batch is dropped.
    pub fn epoch_batches(&self, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx.chunks_exact(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at, "truncated IDX header"))
}

/// Parses an IDX `u8` image file (magic `0x00000803`) into `[count, 1, H, W]`
/// scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::format(0, format!("IDX image magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * h * w {
        return Err(Error::format(
            16,
            format!(
                "expected {} pixel bytes, found {}",
                n * h * w,
                payload.len()
            ),
        ));
    }
    Tensor::new(
        vec![n, 1, h, w],
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::format(0, format!("IDX label magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            8,
            format!("expected {n} labels, found {}", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    Dataset::new(
        parse_idx_images(&std::fs::read(images)?)?,
        parse_idx_labels(&std::fs::read(labels)?)?,
    )
}

/// Images as a rank-4 TNSR file and labels as a rank-1 TNSR file of class ids.
pub fn load_tnsr(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = read_tnsr(std::fs::File::open(images)?)?;
    let y = read_tnsr(std::fs::File::open(labels)?)?;
    let labels = y
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format(0, format!("label {v} is not a class id")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(x, labels)
}

/// Parameters of the stroke-glyph generator: each class is a fixed set of
/// line strokes; samples are shifted, jittered and noise-perturbed renderings
/// on an exact-zero background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphSpec {
    pub classes: usize,
    pub size: usize,
    pub strokes: usize,
    pub max_shift: i32,
    pub noise: f64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            classes: 10,
            size: 16,
            strokes: 3,
            max_shift: 2,
            noise: 0.08,
        }
    }
}

type Segment = ((f64, f64), (f64, f64));

fn seg_dist(p: (f64, f64), s: &Segment) -> f64 {
    let ((ax, ay), (bx, by)) = *s;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// MNIST-class synthetic digits: `(train, test)` with `[count, 1, size, size]` images.
pub fn synthetic_glyphs(
    spec: &GlyphSpec,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = 3.0;
    let hi = spec.size as f64 - 4.0;
    let templates: Vec<Vec<Segment>> = (0..spec.classes)
        .map(|_| {
            (0..spec.strokes)
                .map(|_| {
                    (
                        (rng.random_range(lo..hi), rng.random_range(lo..hi)),
                        (rng.random_range(lo..hi), rng.random_range(lo..hi)),
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Parameter(e.to_string()))?;
    let size = spec.size;
    let render = |count: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(count * size * size);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.random_range(0..spec.classes);
            let sx = rng.random_range(-spec.max_shift..=spec.max_shift) as f64;
            let sy = rng.random_range(-spec.max_shift..=spec.max_shift) as f64;
            let gain: f64 = rng.random_range(0.7..1.0);
            let segs: Vec<Segment> = templates[class]
                .iter()
                .map(|&((ax, ay), (bx, by))| {
                    let mut j = || rng.random_range(-0.7..0.7);
                    (
                        (ax + sx + j(), ay + sy + j()),
                        (bx + sx + j(), by + sy + j()),
                    )
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let d = segs
                        .iter()
                        .map(|s| seg_dist((x as f64, y as f64), s))
                        .fold(f64::INFINITY, f64::min);
                    let ink = (1.2 - d).clamp(0.0, 1.0) * gain;
                    let v = if ink > 0.0 {
                        (ink + noise.sample(rng)).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    pixels.push(v as f32);
                }
            }
            labels.push(class);
        }
        let mut ds = Dataset::new(Tensor::new(vec![count, 1, size, size], pixels)?, labels)?;
        ds.classes = spec.classes;
        Ok(ds)
    };
    let train_ds = render(train, &mut rng)?;
    let test_ds = render(test, &mut rng)?;
    Ok((train_ds, test_ds))
}

/// Two linearly separable classes: `±pattern` plus small noise on `[1, 8, 8]`.
pub fn separable_two_class(count: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut pixels = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..2usize);
        let sign = if class == 0 { 1.0 } else { -1.0 };
        let scale = rng.random_range(0.5f32..1.5);
        for &p in &pattern {
            pixels.push(sign * scale * p + rng.random_range(-0.1f32..0.1));
        }
        labels.push(class);
    }
    let mut ds = Dataset::new(Tensor::new(vec![count, 1, 8, 8], pixels)?, labels)?;
    ds.classes = 2;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(x[1], 1.0);
        assert!((x[2] - 0.2).abs() < 1e-6);
        let lab = [0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
        assert!(matches!(
            parse_idx_labels(&img),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(parse_idx_images(&img[..20]).is_err());
    }

    #[test]
    fn glyphs_are_deterministic_and_sparse() {
        let spec = GlyphSpec::default();
        let (a, t) = synthetic_glyphs(&spec, 200, 50, 3).unwrap();
        let (b, _) = synthetic_glyphs(&spec, 200, 50, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[200, 1, 16, 16]);
        assert_eq!(t.len(), 50);
        assert_eq!(a.classes, 10);
        let r = a.images.nonzero_ratio().unwrap();
        assert!(r > 0.05 && r < 0.6, "nonzero ratio {r}");
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let ds = separable_two_class(100, 1).unwrap();
        let batches = ds.epoch_batches(32, 7, 0);
        assert_eq!(batches.len(), 3);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 96);
        assert_ne!(ds.epoch_batches(32, 7, 1), batches);
        assert_eq!(ds.epoch_batches(32, 7, 0), batches);
        let (x, y) = ds.gather(&batches[0]).unwrap();
        assert_eq!(x.shape(), &[32, 1, 8, 8]);
        assert_eq!(y.len(), 32);
    }
}
