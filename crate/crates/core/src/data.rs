//! Synthetic embryo-like segmentation data.
//!
//! Each sample is a randomly placed and oriented ellipse made of an outer
//! ring (class 1), an inner ring (class 2), an interior (class 3) and an
//! off-center blob (class 4) on a background (class 0). Images render every
//! class at its own base intensity plus Gaussian texture, clamped to `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::channel::GaussianStream;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "ZP", "TE", "BL", "ICM"];
pub const MIN_SIZE: usize = 16;
pub const TEXTURE_SIGMA: f64 = 0.05;
pub const BACKGROUND_INTENSITY: f64 = 0.1;
const BASE_INTENSITY: [f64; NUM_CLASSES] = [BACKGROUND_INTENSITY, 0.8, 0.55, 0.3, 0.95];
pub const TRAIN_FRACTION: f64 = 0.85;
pub const MAX_ROTATION_DEG: f64 = 35.0;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// A square grayscale image with its label map, both row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub size: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![1, 1, self.size, self.size], self.image.iter().map(|&v| T::lit(v)).collect()).unwrap()
    }

    /// `1×C×H×W` one-hot encoding of the mask.
    pub fn one_hot<T: Scalar>(&self, num_classes: usize) -> Tensor<T> {
        let hw = self.size * self.size;
        let mut t = Tensor::zeros(&[1, num_classes, self.size, self.size]);
        for (p, &l) in self.mask.iter().enumerate() {
            t.data_mut()[l as usize * hw + p] = T::one();
        }
        t
    }
}

/// Stacks samples into an image batch and a one-hot target batch.
pub fn make_batch<T: Scalar>(samples: &[&Sample], num_classes: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if samples.is_empty() {
        return Err(Error::Empty("make_batch"));
    }
    let images: Vec<_> = samples.iter().map(|s| s.image_tensor::<T>()).collect();
    let targets: Vec<_> = samples.iter().map(|s| s.one_hot::<T>(num_classes)).collect();
    Ok((
        Tensor::concat_batch(&images.iter().collect::<Vec<_>>())?,
        Tensor::concat_batch(&targets.iter().collect::<Vec<_>>())?,
    ))
}

struct Figure {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    zp_inner: f64,
    te_inner: f64,
    icm: (f64, f64),
    icm_radius: f64,
}

impl Figure {
    fn draw(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let phi = rng.gen_range(0.0..std::f64::consts::PI);
        let psi = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let zp_inner = rng.gen_range(0.76..0.84);
        let te_inner = zp_inner - rng.gen_range(0.16..0.22);
        let icm_dist = rng.gen_range(0.25..0.4);
        Figure {
            cx: c + rng.gen_range(-0.08..0.08) * s,
            cy: c + rng.gen_range(-0.08..0.08) * s,
            a: rng.gen_range(0.3..0.42) * s,
            b: rng.gen_range(0.3..0.42) * s,
            cos: phi.cos(),
            sin: phi.sin(),
            zp_inner,
            te_inner,
            icm: (icm_dist * psi.cos(), icm_dist * psi.sin()),
            icm_radius: rng.gen_range(0.2..0.3),
        }
    }

    fn label(&self, x: f64, y: f64) -> u8 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (self.cos * dx + self.sin * dy) / self.a;
        let v = (-self.sin * dx + self.cos * dy) / self.b;
        let rho = (u * u + v * v).sqrt();
        if rho > 1.0 {
            0
        } else if rho > self.zp_inner {
            1
        } else if ((u - self.icm.0).powi(2) + (v - self.icm.1).powi(2)).sqrt() <= self.icm_radius {
            4
        } else if rho > self.te_inner {
            2
        } else {
            3
        }
    }
}

/// `n_samples` images of `size × size`, a pure function of its arguments.
pub fn generate_dataset(seed: u64, n_samples: usize, size: usize) -> Result<Vec<Sample>> {
    if size < MIN_SIZE {
        return Err(Error::invalid("generate_dataset", format!("size {size} is too small, need at least {MIN_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texture = GaussianStream::with_stream(seed, 1);
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let fig = Figure::draw(&mut rng, size);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                mask.push(fig.label(x as f64, y as f64));
            }
        }
        let image = mask
            .iter()
            .map(|&l| (BASE_INTENSITY[l as usize] + TEXTURE_SIGMA * texture.next_standard()).clamp(0.0, 1.0))
            .collect();
        out.push(Sample { size, image, mask });
    }
    Ok(out)
}

/// Fraction of background pixels over a set of samples.
pub fn background_fraction(samples: &[Sample]) -> f64 {
    let total: usize = samples.iter().map(|s| s.mask.len()).sum();
    let bg: usize = samples.iter().map(|s| s.mask.iter().filter(|&&l| l == 0).count()).sum();
    bg as f64 / total as f64
}

/// One client's data, split into training and validation parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(train, val)` sizes: `train = round(0.85·m)`, with at least one validation sample.
pub fn split_sizes(m: usize) -> Result<(usize, usize)> {
    if m < 2 {
        return Err(Error::invalid("split_sizes", format!("{m} samples cannot be split into train and validation")));
    }
    let train = ((TRAIN_FRACTION * m as f64).round() as usize).min(m - 1);
    Ok((train, m - train))
}

/// Shuffles `samples` with `seed` and hands out contiguous runs of `counts[i]` samples.
pub fn partition(samples: &[Sample], counts: &[usize], seed: u64) -> Result<Vec<Vec<Sample>>> {
    let need: usize = counts.iter().sum();
    if need > samples.len() {
        return Err(Error::invalid("partition", format!("{need} samples requested, {} available", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok(counts
        .iter()
        .map(|&m| {
            let part = order[start..start + m].iter().map(|&i| samples[i].clone()).collect();
            start += m;
            part
        })
        .collect())
}

/// Partitions and splits every client's share into training and validation.
pub fn client_datasets(samples: &[Sample], counts: &[usize], seed: u64) -> Result<Vec<ClientData>> {
    partition(samples, counts, seed)?
        .into_iter()
        .map(|mut part| {
            let (train, _) = split_sizes(part.len())?;
            let val = part.split_off(train);
            Ok(ClientData { train: part, val })
        })
        .collect()
}

/// Flips, then a nearest-neighbour rotation by `angle_deg` about the image center.
///
/// Pixels that rotate in from outside the frame become background.
pub fn augment_with(sample: &Sample, hflip: bool, vflip: bool, angle_deg: f64) -> Sample {
    let n = sample.size;
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = Sample { size: n, image: vec![BACKGROUND_INTENSITY; n * n], mask: vec![0; n * n] };
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = (cos * dx + sin * dy + c).round();
            let sy = (-sin * dx + cos * dy + c).round();
            if sx < 0.0 || sy < 0.0 || sx >= n as f64 || sy >= n as f64 {
                continue;
            }
            let (mut sx, mut sy) = (sx as usize, sy as usize);
            if hflip {
                sx = n - 1 - sx;
            }
            if vflip {
                sy = n - 1 - sy;
            }
            out.image[y * n + x] = sample.image[sy * n + sx];
            out.mask[y * n + x] = sample.mask[sy * n + sx];
        }
    }
    out
}

/// Random horizontal and vertical flips (each with probability 1/2) and a
/// rotation drawn uniformly from ±35°.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    augment_with(sample, hflip, vflip, angle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub size: usize,
    pub num_classes: usize,
    /// Each file holds `size²` little-endian f64 pixels followed by `size²` label bytes.
    pub files: Vec<String>,
}

/// Writes one binary file per sample plus `manifest.json` into `dir`.
pub fn dump_dataset(dir: &Path, samples: &[Sample]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let size = samples.first().map_or(0, |s| s.size);
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.bin");
        let mut bytes = Vec::with_capacity(s.image.len() * 9);
        for v in &s.image {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&s.mask);
        fs::write(dir.join(&name), bytes)?;
        files.push(name);
    }
    let manifest = DatasetManifest { format_version: DATASET_FORMAT_VERSION, size, num_classes: NUM_CLASSES, files };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let hw = manifest.size * manifest.size;
    manifest
        .files
        .iter()
        .map(|name| {
            let bytes = fs::read(dir.join(name))?;
            if bytes.len() != hw * 9 {
                return Err(Error::invalid(
                    "load_dataset",
                    format!("{name} has {} bytes, expected {}", bytes.len(), hw * 9),
                ));
            }
            let image = bytes[..hw * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Sample { size: manifest.size, image, mask: bytes[hw * 8..].to_vec() })
        })
        .collect()
}
