//! Synthetic "anatomy" generator: fully labeled images of geometric
//! structures, plus each client's partially labeled view where labels it
//! does not annotate collapse to background.
//!
//! Every image contains one instance of every global label; the
//! structures a client never annotates remain visible in its images.
//! Generation is a pure function of (rng state, config) and is
//! byte-identical across runs and thread counts.

use crate::error::{Error, Result};
use crate::registry::{ClientId, LabelRegistry};
use crate::rng::RngState;
use crate::tensor::{LabelMap, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const NOISE_SIGMA: f64 = 0.05;
pub const BACKGROUND_MEAN: f64 = 0.10;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// One image with its full annotation and, once assigned to a client,
/// the client-visible annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub full_labels: LabelMap,
    pub client_labels: Option<LabelMap>,
}

/// A client's train/test data; `n_train` is the FedAvg weight.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeFamily {
    Disk,
    Rect,
    Ellipse,
    Ring,
    Bar,
}

const FAMILIES: [ShapeFamily; 5] = [
    ShapeFamily::Disk,
    ShapeFamily::Rect,
    ShapeFamily::Ellipse,
    ShapeFamily::Ring,
    ShapeFamily::Bar,
];

/// Canonical structure centers as fractions of the image extent.
const CANONICAL: [(f64, f64); 8] = [
    (0.27, 0.27),
    (0.27, 0.73),
    (0.52, 0.50),
    (0.76, 0.27),
    (0.76, 0.73),
    (0.27, 0.50),
    (0.76, 0.50),
    (0.52, 0.25),
];

fn family_for(label_idx: usize) -> ShapeFamily {
    FAMILIES[label_idx % FAMILIES.len()]
}

/// Mean intensity of a label's structure; labels are spaced closely
/// enough that pixel noise keeps them from being trivially separable.
pub fn label_intensity(label_idx: usize) -> f64 {
    0.30 + 0.12 * label_idx as f64
}

fn covers(family: ShapeFamily, dx: f64, dy: f64, scale: f64) -> bool {
    match family {
        ShapeFamily::Disk => dx * dx + dy * dy <= (6.8 * scale).powi(2),
        ShapeFamily::Rect => dx.abs() <= 5.9 * scale && dy.abs() <= 5.9 * scale,
        ShapeFamily::Ellipse => {
            let a = 8.6 * scale;
            let b = 5.4 * scale;
            (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
        }
        ShapeFamily::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= (8.6 * scale).powi(2) && r2 >= (5.2 * scale).powi(2)
        }
        ShapeFamily::Bar => dx.abs() <= 13.5 * scale && dy.abs() <= 2.7 * scale,
    }
}

fn paint_shape(
    labels: &mut LabelMap,
    family: ShapeFamily,
    center: (f64, f64),
    scale: f64,
    value: u32,
) -> bool {
    let h = labels.height();
    let w = labels.width();
    let reach = (14.0 * scale).ceil() as isize + 1;
    let cy = center.0.round() as isize;
    let cx = center.1.round() as isize;
    let mut touched = Vec::new();
    for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
        for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
            let dy = y as f64 - center.0;
            let dx = x as f64 - center.1;
            if covers(family, dx, dy, scale) {
                if labels.get(y as usize, x as usize) != 0 {
                    // overlap with an already painted structure: roll back
                    for &(ry, rx) in &touched {
                        labels.set(ry, rx, 0);
                    }
                    return false;
                }
                labels.set(y as usize, x as usize, value);
                touched.push((y as usize, x as usize));
            }
        }
    }
    !touched.is_empty()
}

/// Generates `n_images` fully labeled samples. Each image holds one
/// instance of every global label at its canonical position with
/// per-image jitter of at most 10% of the image size; structures are
/// placed without overlap by reject-and-resample.
pub fn make_world(
    rng: RngState,
    n_images: usize,
    image_size: usize,
    registry: &LabelRegistry,
) -> Result<Vec<Sample>> {
    if image_size < 32 {
        return Err(Error::InvalidArgument(format!(
            "image_size {image_size} below minimum 32"
        )));
    }
    let n_labels = registry.global_labels().len();
    if n_labels > 8 {
        return Err(Error::InvalidArgument(format!(
            "at most 8 global labels supported, got {n_labels}"
        )));
    }
    let scale = image_size as f64 / 64.0;
    let jitter_max = (0.06 * image_size as f64).floor();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let mut samples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut r = rng.derive(i as u64).rng();
        let mut labels = LabelMap::zeros(image_size, image_size);
        for li in 0..n_labels {
            let (fy, fx) = CANONICAL[li];
            let base = (fy * image_size as f64, fx * image_size as f64);
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let jy = r.gen_range(-jitter_max..=jitter_max);
                let jx = r.gen_range(-jitter_max..=jitter_max);
                let center = (base.0 + jy, base.1 + jx);
                if paint_shape(&mut labels, family_for(li), center, scale, (li + 1) as u32) {
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Data(format!(
                    "cannot place structure for label '{}' without overlap after {MAX_PLACEMENT_ATTEMPTS} resamples",
                    registry.global_labels()[li]
                )));
            }
        }
        let mut image = Tensor::<f32>::zeros(&[1, image_size, image_size]);
        for (p, v) in image.data_mut().iter_mut().enumerate() {
            let lab = labels.pixels()[p];
            let mean = if lab == 0 {
                BACKGROUND_MEAN
            } else {
                label_intensity(lab as usize - 1)
            };
            let val = (mean + noise.sample(&mut r)).clamp(0.0, 1.0);
            *v = val as f32;
        }
        samples.push(Sample {
            image,
            full_labels: labels,
            client_labels: None,
        });
    }
    Ok(samples)
}

/// Fills `client_labels`: labels outside the client set collapse to
/// background, the image is untouched.
pub fn mask_labels(sample: &Sample, client_set: &[String], registry: &LabelRegistry) -> Result<Sample> {
    if client_set.is_empty() {
        return Err(Error::InvalidArgument("empty client label set".into()));
    }
    let mut keep = vec![false; registry.num_global_channels()];
    for label in client_set {
        keep[registry.global_channel(label)?] = true;
    }
    let masked: Vec<u32> = sample
        .full_labels
        .pixels()
        .iter()
        .map(|&v| if keep.get(v as usize).copied().unwrap_or(false) { v } else { 0 })
        .collect();
    Ok(Sample {
        image: sample.image.clone(),
        full_labels: sample.full_labels.clone(),
        client_labels: Some(LabelMap::from_vec(
            sample.full_labels.height(),
            sample.full_labels.width(),
            masked,
        )?),
    })
}

/// Deterministic shuffled split with |train| = floor(fraction * n).
pub fn split_train_test(
    samples: Vec<Sample>,
    fraction: f64,
    rng: RngState,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} outside (0,1)"
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng.rng();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (fraction * n as f64).floor() as usize;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let train = order[..n_train]
        .iter()
        .map(|&i| slots[i].take().expect("unique index"))
        .collect();
    let test = order[n_train..]
        .iter()
        .map(|&i| slots[i].take().expect("unique index"))
        .collect();
    Ok((train, test))
}
