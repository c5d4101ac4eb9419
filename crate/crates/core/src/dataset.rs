//! Dataset ingestion: annotation parsing, letterbox preprocessing,
//! small-object filtering and a synthetic scene generator that stands in
//! for real imagery at desk scale.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBoxHBB, ImageTensor};
use crate::rng::substream;

pub const SHIP_CLASS_ID: u32 = 0;
pub const DEFAULT_AREA_THRESHOLD: f64 = 0.0005;
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Ground-truth boxes for one image of the single "ship" class.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub boxes: Vec<BBoxHBB>,
    pub class_id: u32,
}

/// Forward mapping applied by [`letterbox_resize`], enough to invert it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxRecord {
    pub scale: f64,
    pub pad_left: usize,
    pub pad_top: usize,
    pub original_size: (usize, usize),
}

impl LetterboxRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            scale: 1.0,
            pad_left: 0,
            pad_top: 0,
            original_size: (height, width),
        }
    }

    pub fn map_box(&self, b: &BBoxHBB) -> BBoxHBB {
        BBoxHBB {
            x_min: b.x_min * self.scale + self.pad_left as f64,
            y_min: b.y_min * self.scale + self.pad_top as f64,
            x_max: b.x_max * self.scale + self.pad_left as f64,
            y_max: b.y_max * self.scale + self.pad_top as f64,
        }
    }

    pub fn unmap_box(&self, b: &BBoxHBB) -> BBoxHBB {
        BBoxHBB {
            x_min: (b.x_min - self.pad_left as f64) / self.scale,
            y_min: (b.y_min - self.pad_top as f64) / self.scale,
            x_max: (b.x_max - self.pad_left as f64) / self.scale,
            y_max: (b.y_max - self.pad_top as f64) / self.scale,
        }
    }
}

/// On-disk annotation schema: a top-level list of image entries with
/// boxes in original-image pixel coordinates.
#[derive(Debug, Serialize, Deserialize)]
struct RawEntry {
    image: String,
    boxes: Vec<[f64; 4]>,
}

/// Parses the annotation JSON, validating every box.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<RawEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::with_capacity(raw.len());
    for entry in raw {
        let mut boxes = Vec::with_capacity(entry.boxes.len());
        for (i, b) in entry.boxes.iter().enumerate() {
            let bb = BBoxHBB::new(b[0], b[1], b[2], b[3]).map_err(|e| {
                Error::Parse(format!("entry '{}', box {i}: {e}", entry.image))
            })?;
            boxes.push(bb);
        }
        out.push(Annotation {
            image_id: entry.image,
            boxes,
            class_id: SHIP_CLASS_ID,
        });
    }
    Ok(out)
}

/// Writes annotations in the same schema [`parse_annotations`] reads.
pub fn save_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let raw: Vec<RawEntry> = annotations
        .iter()
        .map(|a| RawEntry {
            image: a.image_id.clone(),
            boxes: a
                .boxes
                .iter()
                .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                .collect(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&raw).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

/// Aspect-preserving resize onto a `target`×`target` canvas with mid-gray
/// (0.5) padding; boxes are mapped by the same scale and offset.
pub fn letterbox_resize(
    image: &ImageTensor,
    boxes: &[BBoxHBB],
    target: usize,
) -> Result<(ImageTensor, Vec<BBoxHBB>, LetterboxRecord)> {
    if target == 0 {
        return Err(Error::Validation("letterbox target must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::Validation("degenerate zero-area image".into()));
    }
    let scale = target as f64 / h.max(w) as f64;
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, target);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, target);
    let pad_top = (target - new_h) / 2;
    let pad_left = (target - new_w) / 2;

    let resized = if new_h == h && new_w == w {
        image.pixels().clone()
    } else {
        bilinear_resize(image.pixels(), new_h, new_w)
    };
    let mut canvas = Array3::from_elem((target, target, 3), 0.5);
    canvas
        .slice_mut(ndarray::s![
            pad_top..pad_top + new_h,
            pad_left..pad_left + new_w,
            ..
        ])
        .assign(&resized);

    let record = LetterboxRecord {
        scale,
        pad_left,
        pad_top,
        original_size: (h, w),
    };
    let mapped = boxes.iter().map(|b| record.map_box(b)).collect();
    Ok((ImageTensor::from_valid(canvas), mapped, record))
}

/// Bilinear resample of an (H,W,3) array to (new_h, new_w, 3).
fn bilinear_resize(src: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (h, w, _) = src.dim();
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    Array3::from_shape_fn((new_h, new_w, 3), |(i, j, c)| {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let top = src[[y0, x0, c]] * (1.0 - dx) + src[[y0, x1, c]] * dx;
        let bot = src[[y1, x0, c]] * (1.0 - dx) + src[[y1, x1, c]] * dx;
        (top * (1.0 - dy) + bot * dy).clamp(0.0, 1.0)
    })
}

/// Drops boxes whose area is strictly below `threshold` of the image area;
/// images left with no boxes are removed entirely.
pub fn filter_small_objects(
    annotations: Vec<Annotation>,
    image_areas: &HashMap<String, f64>,
    threshold: f64,
) -> Vec<Annotation> {
    annotations
        .into_iter()
        .filter_map(|mut a| {
            let Some(&area) = image_areas.get(&a.image_id) else {
                return None;
            };
            a.boxes.retain(|b| b.area() / area >= threshold);
            (!a.boxes.is_empty()).then_some(a)
        })
        .collect()
}

/// Synthetic "sea" scene: dark noisy background with bright, elongated,
/// non-overlapping ship rectangles.
pub fn generate_synthetic_scene(
    rng: &mut ChaCha12Rng,
    size: usize,
    n_ships: std::ops::RangeInclusive<usize>,
) -> Result<(ImageTensor, Annotation)> {
    if size < 64 {
        return Err(Error::Validation(format!(
            "scene size must be >= 64, got {size}"
        )));
    }
    let count = rng.random_range(n_ships);
    let base: f64 = rng.random_range(0.10..=0.25);
    let mut pixels = Array3::from_shape_fn((size, size, 3), |(_, _, _)| {
        (base + rng.random_range(-0.02..=0.02)).clamp(0.0, 1.0)
    });

    let margin = 4usize;
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new(); // (y0, x0, y1, x1)
    let mut boxes = Vec::new();
    for _ in 0..count {
        let mut ok = false;
        for _attempt in 0..200 {
            let len = rng.random_range((size / 5).max(12)..=(size / 3));
            let aspect = rng.random_range(2.0..=6.0);
            let thick = ((len as f64 / aspect).round() as usize).max(3);
            let (sh, sw) = if rng.random::<bool>() {
                (thick, len)
            } else {
                (len, thick)
            };
            if sh + 2 * margin >= size || sw + 2 * margin >= size {
                continue;
            }
            let y0 = rng.random_range(margin..=size - margin - sh);
            let x0 = rng.random_range(margin..=size - margin - sw);
            let (y1, x1) = (y0 + sh, x0 + sw);
            let gap = 3usize;
            let overlaps = placed.iter().any(|&(py0, px0, py1, px1)| {
                y0 < py1 + gap && py0 < y1 + gap && x0 < px1 + gap && px0 < x1 + gap
            });
            if overlaps {
                continue;
            }
            let hull: f64 = rng.random_range(0.60..=0.85);
            for i in y0..y1 {
                for j in x0..x1 {
                    let mut v = hull + rng.random_range(-0.05..=0.05);
                    // darker deck stripe down the long axis
                    let along_rows = sw >= sh;
                    let centered = if along_rows {
                        i >= y0 + sh / 3 && i < y1 - sh / 3
                    } else {
                        j >= x0 + sw / 3 && j < x1 - sw / 3
                    };
                    if centered {
                        v *= 0.8;
                    }
                    for c in 0..3 {
                        pixels[[i, j, c]] = v.clamp(0.0, 1.0);
                    }
                }
            }
            placed.push((y0, x0, y1, x1));
            boxes.push(BBoxHBB::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place ship {} of {count} without overlap",
                placed.len() + 1
            )));
        }
    }
    Ok((
        ImageTensor::from_valid(pixels),
        Annotation {
            image_id: String::new(),
            boxes,
            class_id: SHIP_CLASS_ID,
        },
    ))
}

/// One preprocessed sample: letterboxed image plus boxes in canvas coords.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageTensor,
    pub annotation: Annotation,
    pub letterbox: LetterboxRecord,
}

/// A uniformly preprocessed dataset; every image is `input_size` square.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_size: usize,
}

impl Dataset {
    /// Loads images + `annotations.json` from a directory, filters small
    /// objects on original-image area, then letterboxes everything to
    /// `input_size`.
    pub fn load(dir: impl AsRef<Path>, input_size: usize, area_threshold: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let ann_path = dir.join(ANNOTATION_FILE);
        if !ann_path.exists() {
            return Err(Error::Ingestion(format!(
                "missing {} in {}",
                ANNOTATION_FILE,
                dir.display()
            )));
        }
        let annotations = parse_annotations(&ann_path)?;
        let mut images: Vec<(String, ImageTensor)> = Vec::with_capacity(annotations.len());
        let mut areas = HashMap::new();
        for a in &annotations {
            let img_path = dir.join(&a.image_id);
            if !img_path.exists() {
                return Err(Error::Ingestion(format!(
                    "annotation references missing image file {}",
                    img_path.display()
                )));
            }
            let img = ImageTensor::read(&img_path)?;
            areas.insert(a.image_id.clone(), (img.height() * img.width()) as f64);
            images.push((a.image_id.clone(), img));
        }
        let kept = filter_small_objects(annotations, &areas, area_threshold);
        let by_id: HashMap<String, ImageTensor> = images.into_iter().collect();
        let mut samples = Vec::with_capacity(kept.len());
        for a in kept {
            let img = &by_id[&a.image_id];
            let (canvas, boxes, record) = letterbox_resize(img, &a.boxes, input_size)?;
            samples.push(Sample {
                image: canvas,
                annotation: Annotation {
                    image_id: a.image_id,
                    boxes,
                    class_id: a.class_id,
                },
                letterbox: record,
            });
        }
        Ok(Self {
            samples,
            input_size,
        })
    }

    /// Generates `count` synthetic scenes in memory; images are already
    /// square so the letterbox record is the identity.
    pub fn synthesize(
        count: usize,
        size: usize,
        ships: std::ops::RangeInclusive<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = substream(seed, "synth", &[i as u64]);
            let (image, mut annotation) = generate_synthetic_scene(&mut rng, size, ships.clone())?;
            annotation.image_id = format!("scene_{i:05}.png");
            samples.push(Sample {
                image,
                annotation,
                letterbox: LetterboxRecord::identity(size, size),
            });
        }
        Ok(Self {
            samples,
            input_size: size,
        })
    }

    /// Writes PNGs plus `annotations.json` (boxes in original coords).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.samples {
            s.image.write(dir.join(&s.annotation.image_id))?;
        }
        let annotations: Vec<Annotation> = self
            .samples
            .iter()
            .map(|s| Annotation {
                image_id: s.annotation.image_id.clone(),
                boxes: s
                    .annotation
                    .boxes
                    .iter()
                    .map(|b| s.letterbox.unmap_box(b))
                    .collect(),
                class_id: s.annotation.class_id,
            })
            .collect();
        save_annotations(dir.join(ANNOTATION_FILE), &annotations)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn parse_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.json");

        std::fs::write(&path, "[]").unwrap();
        assert!(parse_annotations(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            r#"[{"image": "a.png", "boxes": [[10.0, 10.0, 50.0, 50.0]]}]"#,
        )
        .unwrap();
        let anns = parse_annotations(&path).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].image_id, "a.png");
        assert_eq!(anns[0].boxes[0], BBoxHBB::new(10.0, 10.0, 50.0, 50.0).unwrap());
        assert_eq!(anns[0].class_id, SHIP_CLASS_ID);

        // serialize -> parse round trip
        let p2 = dir.path().join("rt.json");
        save_annotations(&p2, &anns).unwrap();
        assert_eq!(parse_annotations(&p2).unwrap(), anns);

        // inverted box is a parse error naming the entry
        std::fs::write(
            &path,
            r#"[{"image": "bad.png", "boxes": [[60.0, 10.0, 50.0, 50.0]]}]"#,
        )
        .unwrap();
        let err = parse_annotations(&path).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("bad.png"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn letterbox_identity_for_square_target_sized_input() {
        let img = ImageTensor::filled(640, 640, 0.3).unwrap();
        let b = BBoxHBB::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let (out, boxes, rec) = letterbox_resize(&img, &[b], 640).unwrap();
        assert_eq!(out, img);
        assert_eq!(boxes[0], b);
        assert_eq!(rec.scale, 1.0);
        assert_eq!((rec.pad_left, rec.pad_top), (0, 0));
    }

    #[test]
    fn letterbox_pads_narrow_image_and_shifts_boxes() {
        // 640 tall, 320 wide: scale 1, pad_left 160
        let img = ImageTensor::filled(640, 320, 0.2).unwrap();
        let b = BBoxHBB::new(0.0, 0.0, 320.0, 640.0).unwrap();
        let (out, boxes, rec) = letterbox_resize(&img, &[b], 640).unwrap();
        assert_eq!(rec.scale, 1.0);
        assert_eq!(rec.pad_left, 160);
        assert_eq!(rec.pad_top, 0);
        assert_eq!(boxes[0], BBoxHBB::new(160.0, 0.0, 480.0, 640.0).unwrap());
        // padding is exactly mid-gray
        assert_eq!(out.pixels()[[0, 0, 0]], 0.5);
        assert_eq!(out.pixels()[[639, 159, 2]], 0.5);
        assert_eq!(out.pixels()[[0, 160, 0]], 0.2);
    }

    #[test]
    fn letterbox_downscales_large_image_with_gray_rows() {
        // 900 tall x 1500 wide -> scale 640/1500, pad rows top/bottom
        let img = ImageTensor::filled(900, 1500, 0.7).unwrap();
        let (out, _, rec) = letterbox_resize(&img, &[], 640).unwrap();
        assert!((rec.scale - 640.0 / 1500.0).abs() < 1e-12);
        let new_h = (900.0 * rec.scale).round() as usize;
        assert_eq!(rec.pad_top, (640 - new_h) / 2);
        for j in 0..640 {
            assert_eq!(out.pixels()[[0, j, 0]], 0.5);
            assert_eq!(out.pixels()[[639, j, 1]], 0.5);
        }
        assert_eq!(out.pixels()[[320, 320, 0]], 0.7);
    }

    #[test]
    fn letterbox_rejects_zero_target() {
        let img = ImageTensor::filled(10, 10, 0.1).unwrap();
        assert!(matches!(
            letterbox_resize(&img, &[], 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn filter_small_objects_respects_strict_threshold() {
        let areas: HashMap<String, f64> = [("a".to_string(), 10000.0)].into();
        // exactly 0.05% of 10000 = 5.0 -> kept; below -> removed
        let exact = BBoxHBB::new(0.0, 0.0, 2.5, 2.0).unwrap(); // area 5
        let tiny = BBoxHBB::new(0.0, 0.0, 1.0, 1.0).unwrap(); // area 1
        let big = BBoxHBB::new(0.0, 0.0, 50.0, 50.0).unwrap();
        let anns = vec![Annotation {
            image_id: "a".into(),
            boxes: vec![exact, tiny, big],
            class_id: 0,
        }];
        let kept = filter_small_objects(anns, &areas, DEFAULT_AREA_THRESHOLD);
        assert_eq!(kept[0].boxes, vec![exact, big]);

        // image whose boxes all vanish is dropped
        let anns = vec![Annotation {
            image_id: "a".into(),
            boxes: vec![tiny],
            class_id: 0,
        }];
        assert!(filter_small_objects(anns, &areas, DEFAULT_AREA_THRESHOLD).is_empty());
    }

    #[test]
    fn synthetic_scene_is_deterministic_and_valid() {
        let mut r1 = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut r2 = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let (i1, a1) = generate_synthetic_scene(&mut r1, 96, 2..=2).unwrap();
        let (i2, a2) = generate_synthetic_scene(&mut r2, 96, 2..=2).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(a1, a2);
        assert_eq!(a1.boxes.len(), 2);

        let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let (img, ann) = generate_synthetic_scene(&mut r, 96, 0..=0).unwrap();
        assert!(ann.boxes.is_empty());
        assert_eq!(img.height(), 96);
    }

    #[test]
    fn synthetic_scenes_have_inbounds_nonoverlapping_ships() {
        for seed in 0..500u64 {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let (_, ann) = generate_synthetic_scene(&mut rng, 96, 1..=3).unwrap();
            for (i, a) in ann.boxes.iter().enumerate() {
                assert!(a.within(96, 96), "seed {seed}: box out of bounds");
                for b in ann.boxes.iter().skip(i + 1) {
                    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
                    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
                    assert_eq!(ix * iy, 0.0, "seed {seed}: boxes overlap");
                }
            }
        }
    }

    #[test]
    fn dataset_synthesize_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthesize(4, 96, 1..=2, 7).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), 96, DEFAULT_AREA_THRESHOLD).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ds.samples.iter().zip(back.samples.iter()) {
            assert_eq!(a.annotation.boxes, b.annotation.boxes);
            // pixels only differ by 8-bit quantization
            for (x, y) in a.image.pixels().iter().zip(b.image.pixels().iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn dataset_load_missing_image_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(ANNOTATION_FILE),
            r#"[{"image": "ghost.png", "boxes": [[1.0,1.0,5.0,5.0]]}]"#,
        )
        .unwrap();
        let err = Dataset::load(dir.path(), 96, DEFAULT_AREA_THRESHOLD).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    proptest! {
        #[test]
        fn letterbox_box_mapping_round_trips(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let h = rng.random_range(50..400usize);
            let w = rng.random_range(50..400usize);
            let rec = {
                let img = ImageTensor::filled(h, w, 0.4).unwrap();
                letterbox_resize(&img, &[], 160).unwrap().2
            };
            let x0 = rng.random_range(0.0..w as f64 - 2.0);
            let y0 = rng.random_range(0.0..h as f64 - 2.0);
            let b = BBoxHBB::new(
                x0,
                y0,
                rng.random_range(x0 + 1.0..w as f64),
                rng.random_range(y0 + 1.0..h as f64),
            )
            .unwrap();
            let fwd = rec.map_box(&b);
            let back = rec.unmap_box(&fwd);
            prop_assert!((back.x_min - b.x_min).abs() < 0.5);
            prop_assert!((back.y_min - b.y_min).abs() < 0.5);
            prop_assert!((back.x_max - b.x_max).abs() < 0.5);
            prop_assert!((back.y_max - b.y_max).abs() < 0.5);
        }

        #[test]
        fn surviving_boxes_meet_threshold(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let area = 256.0 * 256.0;
            let areas: HashMap<String, f64> = [("img".to_string(), area)].into();
            let n = rng.random_range(1..6usize);
            let boxes: Vec<BBoxHBB> = (0..n)
                .map(|_| {
                    let x0 = rng.random_range(0.0..200.0);
                    let y0 = rng.random_range(0.0..200.0);
                    let bw = rng.random_range(0.5..50.0);
                    let bh = rng.random_range(0.5..50.0);
                    BBoxHBB::new(x0, y0, x0 + bw, y0 + bh).unwrap()
                })
                .collect();
            let anns = vec![Annotation { image_id: "img".into(), boxes, class_id: 0 }];
            for a in filter_small_objects(anns, &areas, DEFAULT_AREA_THRESHOLD) {
                for b in &a.boxes {
                    prop_assert!(b.area() / area >= DEFAULT_AREA_THRESHOLD);
                }
            }
        }
    }
}
