//! Photometric augmentation applied to target regions only, plus the
//! whole-image variant used as the ablation comparator.
//!
//! Background pixels are untouched by construction in the local variant:
//! transforms run on extracted crops which are then written back inside
//! their boxes.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::imaging::{BBoxHBB, ImageTensor};

/// Parameter ranges for the four transform kinds. The defaults keep the
/// targets recognizable while visibly degrading them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub darken_gain: [f64; 2],
    pub brighten_gain: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub rain_streaks: [usize; 2],
    pub rain_length: [f64; 2],
    pub rain_angle_deg: [f64; 2],
    pub rain_alpha: f64,
    pub rain_value: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            darken_gain: [0.5, 0.8],
            brighten_gain: [1.2, 1.5],
            blur_sigma: [1.0, 2.0],
            rain_streaks: [5, 20],
            rain_length: [10.0, 30.0],
            rain_angle_deg: [60.0, 80.0],
            rain_alpha: 0.3,
            rain_value: 0.9,
        }
    }
}

/// One sampled transform, self-contained enough to apply deterministically.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    Darken { gain: f64 },
    Brighten { gain: f64 },
    Rain { streaks: usize, seed: u64 },
    Blur { sigma: f64 },
}

/// Uniform choice over the four kinds with per-kind parameters sampled
/// from their configured ranges.
pub fn sample_transform(rng: &mut ChaCha12Rng, params: &AugmentParams) -> AugmentOp {
    match rng.random_range(0..4u8) {
        0 => AugmentOp::Darken {
            gain: rng.random_range(params.darken_gain[0]..=params.darken_gain[1]),
        },
        1 => AugmentOp::Brighten {
            gain: rng.random_range(params.brighten_gain[0]..=params.brighten_gain[1]),
        },
        2 => AugmentOp::Rain {
            streaks: rng.random_range(params.rain_streaks[0]..=params.rain_streaks[1]),
            seed: rng.random::<u64>(),
        },
        _ => AugmentOp::Blur {
            sigma: rng.random_range(params.blur_sigma[0]..=params.blur_sigma[1]),
        },
    }
}

/// Applies an op to a crop, returning a same-shape crop in [0,1].
pub fn apply_op(op: &AugmentOp, crop: &Array3<f64>, params: &AugmentParams) -> Array3<f64> {
    match *op {
        AugmentOp::Darken { gain } | AugmentOp::Brighten { gain } => gain_kernel(crop, gain),
        AugmentOp::Blur { sigma } => blur_kernel(crop, sigma),
        AugmentOp::Rain { streaks, seed } => rain_kernel(crop, streaks, seed, params),
    }
}

/// Darkening and brightening: `clamp(gain · x)`.
pub fn gain_kernel(crop: &Array3<f64>, gain: f64) -> Array3<f64> {
    crop.mapv(|v| (v * gain).clamp(0.0, 1.0))
}

/// Gaussian blur with reflect padding; kernel half-width is `ceil(3σ)`.
pub fn blur_kernel(crop: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let (h, w, _) = crop.dim();
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for k in -r..=r {
        kernel.push((-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        // reflect without repeating the edge sample; degenerate axes repeat
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        i = i.rem_euclid(period);
        if i >= n {
            i = period - i;
        }
        i as usize
    };
    // horizontal pass
    let mut tmp = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let jj = reflect(j as i64 + ki as i64 - r, w);
                    acc += kv * crop[[i, jj, c]];
                }
                tmp[[i, j, c]] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let ii = reflect(i as i64 + ki as i64 - r, h);
                    acc += kv * tmp[[ii, j, c]];
                }
                out[[i, j, c]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Simulated rainfall: bright streak segments alpha-composited onto the
/// crop. Zero streaks is the identity.
pub fn rain_kernel(
    crop: &Array3<f64>,
    streaks: usize,
    seed: u64,
    params: &AugmentParams,
) -> Array3<f64> {
    let (h, w, _) = crop.dim();
    let mut out = crop.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..streaks {
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0.0..h as f64);
        let len = rng.random_range(params.rain_length[0]..=params.rain_length[1]);
        let angle =
            rng.random_range(params.rain_angle_deg[0]..=params.rain_angle_deg[1]).to_radians();
        let dir_x = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let (dx, dy) = (angle.cos() * dir_x, angle.sin());
        let steps = (len / 0.5).ceil() as usize;
        let mut last: Option<(usize, usize)> = None;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let x = x0 + t * dx;
            let y = y0 + t * dy;
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (i, j) = (y as usize, x as usize);
            if i >= h || j >= w || last == Some((i, j)) {
                continue;
            }
            last = Some((i, j));
            for c in 0..3 {
                let v = out[[i, j, c]];
                out[[i, j, c]] =
                    ((1.0 - params.rain_alpha) * v + params.rain_alpha * params.rain_value)
                        .clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Crops extracted from an image, one per annotated box in order.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub regions: Vec<(BBoxHBB, Array3<f64>)>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Extracts each box's pixels under the same pixel-center rasterization
/// used by mask construction, so write-backs land exactly on mask support.
pub fn extract_regions(image: &ImageTensor, annotation: &Annotation) -> RegionSet {
    let mut regions = Vec::with_capacity(annotation.boxes.len());
    for b in &annotation.boxes {
        let (r0, r1) = b.row_span(image.height());
        let (c0, c1) = b.col_span(image.width());
        if r0 >= r1 || c0 >= c1 {
            continue;
        }
        let crop = image
            .pixels()
            .slice(ndarray::s![r0..r1, c0..c1, ..])
            .to_owned();
        regions.push((*b, crop));
    }
    RegionSet { regions }
}

/// Eqs.-(2..4)-style localized augmentation: each target region gets an
/// independently sampled transform; background pixels are bit-identical
/// to the input. Overlapping regions resolve in box order, later wins.
pub fn apply_local_augmentation(
    image: &ImageTensor,
    annotation: &Annotation,
    rng: &mut ChaCha12Rng,
    params: &AugmentParams,
) -> ImageTensor {
    let regions = extract_regions(image, annotation);
    let mut out = image.clone();
    for (b, crop) in &regions.regions {
        let op = sample_transform(rng, params);
        let transformed = apply_op(&op, crop, params);
        let (r0, r1) = b.row_span(out.height());
        let (c0, c1) = b.col_span(out.width());
        out.pixels_mut()
            .slice_mut(ndarray::s![r0..r1, c0..c1, ..])
            .assign(&transformed);
    }
    out
}

/// Ablation comparator: one sampled transform applied to the whole image.
pub fn apply_global_augmentation(
    image: &ImageTensor,
    rng: &mut ChaCha12Rng,
    params: &AugmentParams,
) -> ImageTensor {
    let op = sample_transform(rng, params);
    ImageTensor::from_valid(apply_op(&op, image.pixels(), params))
}
