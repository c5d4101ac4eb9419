//! Canonical image, patch and mask types plus the masked compositing
//! primitive every other module builds on.
//!
//! Pixels live in `[0,1]` as `f64`; conversion to and from 8-bit happens
//! only at file I/O.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Dimension};

use crate::error::{Error, Result};

/// H×W×3 float image with all values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Wraps a pixel array, validating shape and the `[0,1]` invariant.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Dimension(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Validation("image has zero area".into()));
        }
        for &v in pixels.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "pixel value {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { pixels })
    }

    /// Builds an image filled with a constant value.
    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// Internal constructor for operations that guarantee the invariants
    /// themselves (kernels that clamp, compositing of valid inputs).
    pub(crate) fn from_valid(pixels: Array3<f64>) -> Self {
        debug_assert!(pixels
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Self { pixels }
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    /// Reads an 8-bit PNG or JPEG and maps samples to `[0,1]` by `/255`.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = Array3::zeros((h, w, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[y as usize, x as usize, c]] = f64::from(p.0[c]) / 255.0;
            }
        }
        ImageTensor::new(pixels)
    }

    /// Writes an 8-bit image, quantizing with round-half-up on `v*255`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w, _) = self.pixels.dim();
        let mut buf = Vec::with_capacity(h * w * 3);
        for row in self.pixels.outer_iter() {
            for px in row.outer_iter() {
                for c in 0..3 {
                    buf.push(quantize_half_up(px[c]));
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from dimensions");
        img.save(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Round-half-up quantization of a unit-interval value to a byte.
pub fn quantize_half_up(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Strictly binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<u8>,
}

impl BinaryMask {
    /// Validates that every entry is 0 or 1.
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Validation(
                "mask entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            values: Array2::from_elem((height, width), 1),
        }
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    /// Number of set pixels.
    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Square learnable patch, side × side × 3, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: Array3<f64>,
}

pub const DEFAULT_PATCH_SIDE: usize = 64;

impl Patch {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (s0, s1, c) = pixels.dim();
        if s0 != s1 {
            return Err(Error::Dimension(format!(
                "patch must be square, got {s0}x{s1}"
            )));
        }
        if c != 3 {
            return Err(Error::Dimension(format!(
                "patch must have 3 channels, got {c}"
            )));
        }
        if s0 == 0 {
            return Err(Error::Validation("patch side must be positive".into()));
        }
        if pixels
            .iter()
            .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::Validation("patch values outside [0,1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub(crate) fn from_valid(pixels: Array3<f64>) -> Self {
        Self { pixels }
    }

    /// Writes the patch as an 8-bit PNG preview.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        ImageTensor::from_valid(self.pixels.clone()).write(path)
    }
}

/// Horizontal (axis-aligned) bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBoxHBB {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBoxHBB {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("box coordinates must be finite".into()));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Validation(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x < self.x_max && self.y_min <= y && y < self.y_max
    }

    /// Rasterized row range `[start, end)` under the pixel-center rule:
    /// row `i` is inside iff `y_min <= i + 0.5 < y_max`.
    pub fn row_span(&self, height: usize) -> (usize, usize) {
        span(self.y_min, self.y_max, height)
    }

    /// Rasterized column range `[start, end)` under the pixel-center rule.
    pub fn col_span(&self, width: usize) -> (usize, usize) {
        span(self.x_min, self.x_max, width)
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }
}

fn span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    (start.min(end), end)
}

/// Masked composite `base ⊙ (1−M) + overlay ⊙ M`, evaluated as an exact
/// per-pixel select so the identity and replacement cases are bit-exact.
pub fn composite(
    base: &ImageTensor,
    overlay: &ImageTensor,
    mask: &BinaryMask,
) -> Result<ImageTensor> {
    if base.height() != overlay.height()
        || base.width() != overlay.width()
        || base.height() != mask.height()
        || base.width() != mask.width()
    {
        return Err(Error::Dimension(format!(
            "composite shapes differ: base {}x{}, overlay {}x{}, mask {}x{}",
            base.height(),
            base.width(),
            overlay.height(),
            overlay.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut out = base.pixels.clone();
    for ((i, j), &m) in mask.values.indexed_iter() {
        if m == 1 {
            for c in 0..3 {
                out[[i, j, c]] = overlay.pixels[[i, j, c]];
            }
        }
    }
    Ok(ImageTensor::from_valid(out))
}

/// Maps every element into `[0,1]`. Idempotent; NaN is rejected.
pub fn clamp_unit<D: Dimension>(x: &ndarray::Array<f64, D>) -> Result<ndarray::Array<f64, D>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("clamp_unit received NaN".into()));
    }
    Ok(x.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Dynamic-dimension variant used by the autodiff tape.
pub(crate) fn clamp_unit_dyn(x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("clamp_unit received NaN".into()));
    }
    Ok(x.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Union-of-boxes rasterization: pixel `(i,j)` is set iff its center
/// `(j+0.5, i+0.5)` lies inside any box.
pub fn mask_from_boxes(boxes: &[BBoxHBB], height: usize, width: usize) -> Result<BinaryMask> {
    let mut values = Array2::<u8>::zeros((height, width));
    for b in boxes {
        if !b.within(height, width) {
            return Err(Error::Validation(format!(
                "box ({},{},{},{}) outside {width}x{height} image",
                b.x_min, b.y_min, b.x_max, b.y_max
            )));
        }
        let (r0, r1) = b.row_span(height);
        let (c0, c1) = b.col_span(width);
        for i in r0..r1 {
            for j in c0..c1 {
                values[[i, j]] = 1;
            }
        }
    }
    Ok(BinaryMask { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn composite_mask_zero_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let base = random_image(&mut rng, 9, 7);
        let overlay = random_image(&mut rng, 9, 7);
        let out = composite(&base, &overlay, &BinaryMask::zeros(9, 7)).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn composite_mask_one_is_replacement() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let base = random_image(&mut rng, 5, 5);
        let overlay = random_image(&mut rng, 5, 5);
        let out = composite(&base, &overlay, &BinaryMask::ones(5, 5)).unwrap();
        assert_eq!(out, overlay);
    }

    #[test]
    fn composite_half_mask_selects_per_pixel() {
        // base all 0.2, overlay all 0.8, left half masked -> left 0.8, right 0.2
        let base = ImageTensor::filled(4, 6, 0.2).unwrap();
        let overlay = ImageTensor::filled(4, 6, 0.8).unwrap();
        let mut m = Array2::<u8>::zeros((4, 6));
        for i in 0..4 {
            for j in 0..3 {
                m[[i, j]] = 1;
            }
        }
        let out = composite(&base, &overlay, &BinaryMask::new(m).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let want = if j < 3 { 0.8 } else { 0.2 };
                for c in 0..3 {
                    assert_eq!(out.pixels()[[i, j, c]], want);
                }
            }
        }
    }

    #[test]
    fn composite_shape_mismatch_is_dimension_error() {
        let base = ImageTensor::filled(4, 4, 0.1).unwrap();
        let overlay = ImageTensor::filled(4, 5, 0.1).unwrap();
        let err = composite(&base, &overlay, &BinaryMask::zeros(4, 4)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn mask_rejects_non_binary() {
        let mut m = Array2::<u8>::zeros((2, 2));
        m[[0, 0]] = 2;
        assert!(matches!(
            BinaryMask::new(m),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn clamp_unit_cases() {
        let x = ndarray::arr1(&[0.5, 1.7, -0.3]);
        let y = clamp_unit(&x).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[0.5, 1.0, 0.0]);
        // idempotent
        assert_eq!(clamp_unit(&y).unwrap(), y);
        let nan = ndarray::arr1(&[f64::NAN]);
        assert!(matches!(clamp_unit(&nan), Err(Error::Validation(_))));
    }

    #[test]
    fn mask_from_boxes_empty_and_full() {
        let empty = mask_from_boxes(&[], 8, 8).unwrap();
        assert_eq!(empty.popcount(), 0);
        let full_box = BBoxHBB::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let full = mask_from_boxes(&[full_box], 8, 8).unwrap();
        assert_eq!(full.popcount(), 64);
    }

    #[test]
    fn mask_from_boxes_outside_image_rejected() {
        let b = BBoxHBB::new(2.0, 2.0, 11.0, 5.0).unwrap();
        assert!(matches!(
            mask_from_boxes(&[b], 10, 10),
            Err(Error::Validation(_))
        ));
    }

    /// Brute-force per-pixel membership oracle for the union of boxes.
    fn union_popcount_oracle(boxes: &[BBoxHBB], h: usize, w: usize) -> usize {
        let mut n = 0;
        for i in 0..h {
            for j in 0..w {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                if boxes.iter().any(|b| b.contains_point(x, y)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn mask_from_boxes_matches_membership_oracle() {
        let boxes = [
            BBoxHBB::new(1.0, 1.0, 6.0, 5.0).unwrap(),
            BBoxHBB::new(4.0, 3.0, 9.0, 8.0).unwrap(),
        ];
        let mask = mask_from_boxes(&boxes, 10, 10).unwrap();
        assert_eq!(mask.popcount(), union_popcount_oracle(&boxes, 10, 10));
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 12, 9);
        img.write(&path).unwrap();
        let back = ImageTensor::read(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
            let q = f64::from(quantize_half_up(*a)) / 255.0;
            assert!((q - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize_half_up(0.0), 0);
        assert_eq!(quantize_half_up(1.0), 255);
        // 127.5/255 should round up to 128
        assert_eq!(quantize_half_up(127.5 / 255.0), 128);
    }

    proptest! {
        #[test]
        fn composite_identity_and_replacement_bit_exact(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let h = rng.random_range(1..12usize);
            let w = rng.random_range(1..12usize);
            let base = random_image(&mut rng, h, w);
            let overlay = random_image(&mut rng, h, w);
            prop_assert_eq!(
                composite(&base, &overlay, &BinaryMask::zeros(h, w)).unwrap(),
                base.clone()
            );
            prop_assert_eq!(
                composite(&base, &overlay, &BinaryMask::ones(h, w)).unwrap(),
                overlay
            );
        }

        #[test]
        fn mask_from_boxes_idempotent_and_matches_oracle(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let h = 12usize;
            let w = 12usize;
            let n = rng.random_range(0..4usize);
            let boxes: Vec<BBoxHBB> = (0..n)
                .map(|_| {
                    let x0 = rng.random_range(0.0..9.0);
                    let y0 = rng.random_range(0.0..9.0);
                    let x1 = rng.random_range(x0 + 0.5..12.0);
                    let y1 = rng.random_range(y0 + 0.5..12.0);
                    BBoxHBB::new(x0, y0, x1, y1).unwrap()
                })
                .collect();
            let m1 = mask_from_boxes(&boxes, h, w).unwrap();
            let m2 = mask_from_boxes(&boxes, h, w).unwrap();
            prop_assert_eq!(&m1, &m2);
            prop_assert_eq!(m1.popcount(), union_popcount_oracle(&boxes, h, w));
        }

        #[test]
        fn composite_linear_in_overlay_on_mask_support(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (h, w) = (6usize, 6usize);
            let base = random_image(&mut rng, h, w);
            let e1 = random_image(&mut rng, h, w);
            let e2 = random_image(&mut rng, h, w);
            let (a, b) = (0.3, 0.4);
            let mut mv = Array2::<u8>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    mv[[i, j] ] = u8::from(rng.random::<bool>());
                }
            }
            let mask = BinaryMask::new(mv).unwrap();
            let combo = ImageTensor::new(
                e1.pixels().mapv(|v| a * v) + e2.pixels().mapv(|v| b * v),
            )
            .unwrap();
            let lhs = composite(&base, &combo, &mask).unwrap();
            let r1 = composite(&base, &e1, &mask).unwrap();
            let r2 = composite(&base, &e2, &mask).unwrap();
            for ((i, j), &m) in mask.values().indexed_iter() {
                if m == 1 {
                    for c in 0..3 {
                        let want = a * r1.pixels()[[i, j, c]] + b * r2.pixels()[[i, j, c]];
                        prop_assert!((lhs.pixels()[[i, j, c]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
