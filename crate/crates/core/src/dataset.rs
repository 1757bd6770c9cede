//! Evaluation datasets: MNIST in IDX format and a seeded synthetic anomaly set.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::WeightNibble;
use crate::error::{Error, Result};
use crate::model::{Placement, QuantLayer, QuantModel, Task};
use crate::nmcu::{Activation, LayerDescriptor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Pre-quantized int8 samples with labels (class ids, or 1 = anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<Vec<i8>>,
    pub labels: Vec<u32>,
    pub input_scale: f64,
    pub input_zero_point: i32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.input_zero_point) as f64 * self.input_scale
    }

    /// Indices `[start, end)` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            dim: self.dim,
            samples: Vec::new(),
            labels: Vec::new(),
            input_scale: self.input_scale,
            input_zero_point: self.input_zero_point,
        }
    }
}

/// Map a pixel in [0, 255] to int8: `clamp(round((p / 255) / scale) + zp)`.
pub fn quantize_pixel(p: u8, input_scale: f64, input_zero_point: i32) -> i8 {
    let q = (p as f64 / 255.0 / input_scale).round() + input_zero_point as f64;
    q.clamp(-128.0, 127.0) as i8
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Dataset(format!("{what}: truncated header")))
}

/// Parse IDX image and label buffers.
pub fn parse_mnist_idx(
    images: &[u8],
    labels: &[u8],
    limit: usize,
    input_scale: f64,
    input_zero_point: i32,
) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!("images: bad magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!("labels: bad magic {magic:#010x}")));
    }
    let n_images = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(Error::Dataset(format!("{n_images} images but {n_labels} labels")));
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n_images * dim {
        return Err(Error::Dataset(format!(
            "images: truncated, {} bytes for {n_images} images of {dim}",
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::Dataset("labels: truncated".into()));
    }
    let n = limit.min(n_images);
    let samples = pixels
        .chunks_exact(dim.max(1))
        .take(n)
        .map(|img| img.iter().map(|&p| quantize_pixel(p, input_scale, input_zero_point)).collect())
        .collect();
    Ok(Dataset {
        dim,
        samples,
        labels: label_bytes[..n].iter().map(|&l| l as u32).collect(),
        input_scale,
        input_zero_point,
    })
}

pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: usize,
    input_scale: f64,
    input_zero_point: i32,
) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    parse_mnist_idx(&images, &labels, limit, input_scale, input_zero_point)
}

/// Serialize a dataset of raw pixels back into IDX buffers.
pub fn write_idx(images: &[Vec<u8>], labels: &[u8], rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows, cols] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    images.iter().for_each(|i| img.extend_from_slice(i));
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Shape of the synthetic anomaly task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    pub latent: usize,
    pub normals: usize,
    pub anomalies: usize,
    pub noise: f64,
    pub anomaly_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dim: 32,
            latent: 4,
            normals: 400,
            anomalies: 100,
            noise: 0.05,
            anomaly_noise: 0.08,
            seed: 2024,
        }
    }
}

const SYNTH_RANGE: f64 = 4.0;

fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Symmetric per-channel 4-bit quantization of a real dense layer.
fn quantize_dense(
    w: &[Vec<f64>],
    in_scale: f64,
    in_zp: i32,
    out_scale: f64,
    out_zp: i32,
    placement: Placement,
) -> QuantLayer {
    let out_dim = w.len();
    let in_dim = w[0].len();
    let mut weights = Vec::with_capacity(in_dim * out_dim);
    let mut scales = Vec::with_capacity(out_dim);
    for row in w {
        let w_scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12) / 7.0;
        weights.extend(
            row.iter()
                .map(|v| WeightNibble::new((v / w_scale).round().clamp(-8.0, 7.0) as i32).unwrap()),
        );
        scales.push(in_scale * w_scale / out_scale);
    }
    QuantLayer {
        desc: LayerDescriptor {
            in_dim,
            out_dim,
            weight_base_row: 0,
            bias: vec![0; out_dim],
            input_zero_point: in_zp,
            output_zero_point: out_zp,
            requant_scale: scales,
            activation: Activation::None,
        },
        weights,
        input_scale: in_scale,
        output_scale: Some(out_scale),
        placement,
    }
}

/// Seeded anomaly-detection task: normal samples lie near a random
/// low-dimensional subspace, anomalies carry isotropic off-subspace energy.
/// Returns a two-layer linear autoencoder and the labelled dataset.
pub fn synthetic_anomaly_task(spec: &SynthSpec) -> (QuantModel, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = orthonormal_basis(&mut rng, spec.dim, spec.latent);
    let x_scale = SYNTH_RANGE / 127.0;

    let mut samples = Vec::with_capacity(spec.normals + spec.anomalies);
    let mut labels = Vec::with_capacity(samples.capacity());
    for i in 0..spec.normals + spec.anomalies {
        let anomaly = i >= spec.normals;
        let sigma = if anomaly { spec.anomaly_noise } else { spec.noise };
        let z: Vec<f64> = (0..spec.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x: Vec<i8> = (0..spec.dim)
            .map(|d| {
                let clean: f64 = basis.iter().zip(&z).map(|(b, zk)| b[d] * zk).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                ((clean + sigma * noise) / x_scale).round().clamp(-127.0, 127.0) as i8
            })
            .collect();
        samples.push(x);
        labels.push(anomaly as u32);
    }
    // interleave normals and anomalies
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let samples: Vec<_> = order.iter().map(|&i| samples[i].clone()).collect();
    let labels: Vec<_> = order.iter().map(|&i| labels[i]).collect();

    let h_scale = SYNTH_RANGE / 127.0;
    let decoder: Vec<Vec<f64>> = (0..spec.dim).map(|d| basis.iter().map(|b| b[d]).collect()).collect();
    let layers = vec![
        quantize_dense(&basis, x_scale, 0, h_scale, 0, Placement::Macro),
        quantize_dense(&decoder, h_scale, 0, x_scale, 0, Placement::Macro),
    ];
    let model = QuantModel::new(format!("synth-ae-{}-{}", spec.dim, spec.latent), Task::Reconstruct, layers)
        .expect("synthetic autoencoder is valid");
    let data = Dataset {
        dim: spec.dim,
        samples,
        labels,
        input_scale: x_scale,
        input_zero_point: 0,
    };
    (model, data)
}
