//! Environmental adaptation: scene-intensity matching of the patch and
//! affine placement onto each target box.
//!
//! Scene matching runs before the affine transform. Placement scales the
//! patch so its placed area is `size_ratio × box_area`, rotates it with
//! bilinear resampling, and drops it at the (offset) box center on an
//! integer-aligned canvas; the binary footprint keeps Eq.-1-style masking.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gather_forward, BilinearMap, NodeId, Tape, TapSet};
use crate::dataset::Annotation;
use crate::error::{Error, Result};
use crate::imaging::{BBoxHBB, BinaryMask, ImageTensor, Patch};

/// Contrast/brightness/noise ranges for scene-intensity matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub contrast_range: [f64; 2],
    pub brightness_range: [f64; 2],
    pub noise_amplitude: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            contrast_range: [0.8, 1.2],
            brightness_range: [-0.1, 0.1],
            noise_amplitude: 0.05,
        }
    }
}

impl SceneParams {
    /// Identity parameters: contrast 1, brightness 0, no noise.
    pub fn neutral() -> Self {
        Self {
            contrast_range: [1.0, 1.0],
            brightness_range: [0.0, 0.0],
            noise_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.contrast_range[0] <= 0.0 || self.contrast_range[0] > self.contrast_range[1] {
            return Err(Error::Validation(format!(
                "bad contrast range {:?}",
                self.contrast_range
            )));
        }
        if self.brightness_range[0] > self.brightness_range[1] {
            return Err(Error::Validation(format!(
                "bad brightness range {:?}",
                self.brightness_range
            )));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::Validation("negative noise amplitude".into()));
        }
        Ok(())
    }
}

/// Patch placement knobs: placed area as a fraction of the box area,
/// center offset as a fraction of box extent, rotation range in degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementParams {
    pub size_ratio: f64,
    pub offset_range: f64,
    pub rotation_range_deg: f64,
}

impl Default for PlacementParams {
    fn default() -> Self {
        Self {
            size_ratio: 0.12,
            offset_range: 0.1,
            rotation_range_deg: 20.0,
        }
    }
}

impl PlacementParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.size_ratio) || self.size_ratio == 0.0 {
            return Err(Error::Validation(format!(
                "size_ratio must be in (0,1), got {}",
                self.size_ratio
            )));
        }
        if self.offset_range < 0.0 {
            return Err(Error::Validation("offset_range must be >= 0".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_range_deg) {
            return Err(Error::Validation(
                "rotation_range_deg must be in [0,180]".into(),
            ));
        }
        Ok(())
    }
}

/// Concrete per-instance scene randomness.
#[derive(Debug, Clone)]
pub struct SceneDraw {
    pub contrast: f64,
    pub brightness: f64,
    pub noise: Option<ndarray::Array3<f64>>,
}

impl SceneDraw {
    pub fn neutral() -> Self {
        Self {
            contrast: 1.0,
            brightness: 0.0,
            noise: None,
        }
    }

    /// Draw order: contrast, brightness, then the per-pixel noise field.
    pub fn sample(params: &SceneParams, rng: &mut ChaCha12Rng, side: usize) -> Self {
        let contrast = rng.random_range(params.contrast_range[0]..=params.contrast_range[1]);
        let brightness =
            rng.random_range(params.brightness_range[0]..=params.brightness_range[1]);
        let noise = (params.noise_amplitude > 0.0).then(|| {
            let a = params.noise_amplitude;
            ndarray::Array3::from_shape_fn((side, side, 3), |_| rng.random_range(-a..=a))
        });
        Self {
            contrast,
            brightness,
            noise,
        }
    }
}

/// Concrete per-instance placement randomness.
#[derive(Debug, Clone, Copy)]
pub struct PlacementDraw {
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl PlacementDraw {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    /// Draw order: rotation, x offset, y offset.
    pub fn sample(params: &PlacementParams, rng: &mut ChaCha12Rng) -> Self {
        let r = params.rotation_range_deg.to_radians();
        let theta = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let o = params.offset_range;
        let (dx, dy) = if o > 0.0 {
            (rng.random_range(-o..=o), rng.random_range(-o..=o))
        } else {
            (0.0, 0.0)
        };
        Self { theta, dx, dy }
    }
}

/// Scene-intensity matching `clamp(P·c + b + n)` with freshly drawn
/// factors; differentiable with respect to the patch in the traced form.
pub fn scene_match(patch: &Patch, params: &SceneParams, rng: &mut ChaCha12Rng) -> Result<Patch> {
    params.validate()?;
    let draw = SceneDraw::sample(params, rng, patch.side());
    Ok(scene_match_with(patch, &draw))
}

/// Deterministic scene matching with explicit draws.
pub fn scene_match_with(patch: &Patch, draw: &SceneDraw) -> Patch {
    let mut px = patch.pixels().mapv(|v| v * draw.contrast + draw.brightness);
    if let Some(n) = &draw.noise {
        px += n;
    }
    Patch::from_valid(px.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Traced scene matching on a tape.
pub fn scene_match_traced(tape: &mut Tape, patch: NodeId, draw: &SceneDraw) -> NodeId {
    let scaled = tape.scale(patch, draw.contrast);
    let shifted = tape.add_scalar(scaled, draw.brightness);
    let noised = match &draw.noise {
        Some(n) => {
            let nc = tape.constant(n.clone().into_dyn());
            tape.add(shifted, nc)
        }
        None => shifted,
    };
    tape.clamp01(noised)
}

/// Rasterized placement: where the transformed patch lands and how each
/// canvas pixel samples the patch.
#[derive(Debug, Clone)]
pub struct PlacementGeometry {
    pub origin_y: i64,
    pub origin_x: i64,
    pub map: BilinearMap,
    pub footprint: Array2<u8>,
    pub placed_side: usize,
}

/// Builds the canvas geometry for one placement. The placed square side is
/// `floor(sqrt(size_ratio · box_area))`; the footprint keeps pixels whose
/// in-bounds bilinear coverage exceeds 0.5, and tap weights are normalized
/// by that coverage so edge pixels keep patch-level intensity.
pub fn build_placement_geometry(
    patch_side: usize,
    bbox: &BBoxHBB,
    draw: &PlacementDraw,
    size_ratio: f64,
    img_h: usize,
    img_w: usize,
) -> Result<PlacementGeometry> {
    let placed = (size_ratio * bbox.area()).sqrt().floor();
    if placed < 1.0 {
        return Err(Error::Placement(format!(
            "box {:.1}x{:.1} too small for size ratio {size_ratio}",
            bbox.width(),
            bbox.height()
        )));
    }
    let s = placed as usize;
    let (cx, cy) = bbox.center();
    let center_x = cx + draw.dx * bbox.width();
    let center_y = cy + draw.dy * bbox.height();
    let (sin_t, cos_t) = draw.theta.sin_cos();
    let ext = s as f64 * (cos_t.abs() + sin_t.abs());
    let c = (ext - 1e-9).ceil().max(1.0) as usize;
    let origin_x = (center_x - c as f64 / 2.0).round() as i64;
    let origin_y = (center_y - c as f64 / 2.0).round() as i64;
    let scale = patch_side as f64 / s as f64;

    let mut taps = vec![TapSet::default(); c * c];
    let mut footprint = Array2::<u8>::zeros((c, c));
    let mut any_visible = false;
    let half = c as f64 / 2.0;
    let side_f = patch_side as f64;
    for i in 0..c {
        for j in 0..c {
            let px = j as f64 + 0.5 - half;
            let py = i as f64 + 0.5 - half;
            // inverse-rotate into the placed-patch frame
            let qx = cos_t * px + sin_t * py;
            let qy = -sin_t * px + cos_t * py;
            let u = (qx + s as f64 / 2.0) * scale - 0.5;
            let v = (qy + s as f64 / 2.0) * scale - 0.5;
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let mut ts = TapSet::default();
            let mut cov = 0.0;
            for (uu, wu) in [(u0, 1.0 - fu), (u0 + 1.0, fu)] {
                for (vv, wv) in [(v0, 1.0 - fv), (v0 + 1.0, fv)] {
                    let wgt = wu * wv;
                    if wgt <= 0.0 {
                        continue;
                    }
                    if uu < 0.0 || vv < 0.0 || uu >= side_f || vv >= side_f {
                        continue;
                    }
                    ts.idx[ts.n as usize] = vv as u32 * patch_side as u32 + uu as u32;
                    ts.w[ts.n as usize] = wgt;
                    ts.n += 1;
                    cov += wgt;
                }
            }
            if cov > 0.5 {
                for t in 0..ts.n as usize {
                    ts.w[t] /= cov;
                }
                taps[i * c + j] = ts;
                footprint[[i, j]] = 1;
                let (yy, xx) = (origin_y + i as i64, origin_x + j as i64);
                if yy >= 0 && xx >= 0 && yy < img_h as i64 && xx < img_w as i64 {
                    any_visible = true;
                }
            }
        }
    }
    if !any_visible {
        return Err(Error::Placement(
            "patch footprint entirely outside image".into(),
        ));
    }
    Ok(PlacementGeometry {
        origin_y,
        origin_x,
        map: BilinearMap {
            out_h: c,
            out_w: c,
            source_side: patch_side,
            taps,
        },
        footprint,
        placed_side: s,
    })
}

impl PlacementGeometry {
    /// Footprint lifted to a full-image binary mask; off-image pixels drop.
    pub fn image_mask(&self, img_h: usize, img_w: usize) -> BinaryMask {
        let mut m = Array2::<u8>::zeros((img_h, img_w));
        for ((i, j), &f) in self.footprint.indexed_iter() {
            if f != 1 {
                continue;
            }
            let (y, x) = (self.origin_y + i as i64, self.origin_x + j as i64);
            if y >= 0 && x >= 0 && y < img_h as i64 && x < img_w as i64 {
                m[[y as usize, x as usize]] = 1;
            }
        }
        BinaryMask::new(m).expect("binary by construction")
    }
}

/// Scales, rotates and composites one scene-matched patch instance onto a
/// target box. Returns the composited image and the footprint mask.
pub fn place_patch(
    image: &ImageTensor,
    patch: &Patch,
    bbox: &BBoxHBB,
    placement: &PlacementParams,
    rng: &mut ChaCha12Rng,
) -> Result<(ImageTensor, BinaryMask)> {
    placement.validate()?;
    let draw = PlacementDraw::sample(placement, rng);
    place_patch_with(image, patch, bbox, placement.size_ratio, &draw)
}

/// Deterministic placement with explicit draws.
pub fn place_patch_with(
    image: &ImageTensor,
    patch: &Patch,
    bbox: &BBoxHBB,
    size_ratio: f64,
    draw: &PlacementDraw,
) -> Result<(ImageTensor, BinaryMask)> {
    let (h, w) = (image.height(), image.width());
    let geom = build_placement_geometry(patch.side(), bbox, draw, size_ratio, h, w)?;
    let canvas = gather_forward(patch.pixels(), &geom.map);
    let mut out = image.pixels().clone();
    for ((i, j), &f) in geom.footprint.indexed_iter() {
        if f != 1 {
            continue;
        }
        let (y, x) = (geom.origin_y + i as i64, geom.origin_x + j as i64);
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            continue;
        }
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = canvas[[i, j, ch]];
        }
    }
    Ok((ImageTensor::from_valid(out), geom.image_mask(h, w)))
}

/// Per-box randomness for one image's worth of placements.
#[derive(Debug, Clone)]
pub struct BoxDraws {
    pub scene: SceneDraw,
    pub placement: PlacementDraw,
}

/// Traced pipeline for one image: per box, scene-match the patch node,
/// gather through the placement geometry and overwrite the footprint.
/// Later placements win on overlap. Returns the composited image node.
pub fn apply_patch_traced(
    tape: &mut Tape,
    image_node: NodeId,
    patch_node: NodeId,
    patch_side: usize,
    boxes: &[BBoxHBB],
    size_ratio: f64,
    draws: &[BoxDraws],
    img_h: usize,
    img_w: usize,
) -> Result<(NodeId, Vec<PlacementGeometry>)> {
    assert_eq!(boxes.len(), draws.len());
    let mut current = image_node;
    let mut geoms = Vec::with_capacity(boxes.len());
    for (bbox, d) in boxes.iter().zip(draws) {
        let matched = scene_match_traced(tape, patch_node, &d.scene);
        let geom =
            build_placement_geometry(patch_side, bbox, &d.placement, size_ratio, img_h, img_w)?;
        let canvas = tape.bilinear_gather(matched, &geom.map);
        current = tape.composite_region(current, canvas, geom.origin_y, geom.origin_x, &geom.footprint);
        geoms.push(geom);
    }
    Ok((current, geoms))
}

/// Plain per-image orchestration: one independently scene-matched,
/// transformed instance of the same patch per annotated box. Draw order
/// per box: scene (contrast, brightness, noise), then placement.
pub fn apply_patch_to_all_targets(
    image: &ImageTensor,
    patch: &Patch,
    annotation: &Annotation,
    placement: &PlacementParams,
    scene: &SceneParams,
    rng: &mut ChaCha12Rng,
) -> Result<ImageTensor> {
    placement.validate()?;
    scene.validate()?;
    let draws: Vec<BoxDraws> = annotation
        .boxes
        .iter()
        .map(|_| BoxDraws {
            scene: SceneDraw::sample(scene, rng, patch.side()),
            placement: PlacementDraw::sample(placement, rng),
        })
        .collect();
    let mut tape = Tape::new();
    let img_node = tape.constant(image.pixels().clone().into_dyn());
    let patch_node = tape.constant(patch.pixels().clone().into_dyn());
    let (out, _) = apply_patch_traced(
        &mut tape,
        img_node,
        patch_node,
        patch.side(),
        &annotation.boxes,
        placement.size_ratio,
        &draws,
        image.height(),
        image.width(),
    )?;
    let pixels = tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("image tensor");
    Ok(ImageTensor::from_valid(pixels))
}
