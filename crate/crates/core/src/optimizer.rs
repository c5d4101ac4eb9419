//! The patch attack loop: augment → scene-match and place the patch on
//! every target → run the frozen detector → combine the three losses →
//! adaptive-moment step on patch pixels only, clamped to [0,1].

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, ArrayD, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    apply_patch_traced, BoxDraws, PlacementDraw, PlacementParams, SceneDraw, SceneParams,
};
use crate::augment::{apply_global_augmentation, apply_local_augmentation, AugmentParams};
use crate::autodiff::{Adam, Tape};
use crate::dataset::Dataset;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::imaging::Patch;
use crate::losses::{nps_node, tv_node, LossWeights, PrintableSet};
use crate::rng::{concerns, substream};

/// Which augmentation arm the training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationMode {
    None,
    Global,
    Local,
}

impl AugmentationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            other => Err(Error::Validation(format!(
                "unknown augmentation mode '{other}' (expected none, global or local)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Global => "global",
            Self::Local => "local",
        }
    }
}

/// Optimizer selector; adaptive-moment descent is the only kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

/// Every hyperparameter of one attack run; the JSON config file mirrors
/// this struct field for field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub patch_side: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    pub placement: PlacementParams,
    pub scene: SceneParams,
    pub augmentation: AugmentationMode,
    pub augment_params: AugmentParams,
    pub seed: u64,
    pub batch_size: usize,
    /// Confidence floor for the detection-loss max during training.
    pub train_confidence_floor: f64,
    /// Optional palette file; the built-in set is used when absent.
    pub printable_colors: Option<std::path::PathBuf>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            patch_side: 64,
            epochs: 200,
            learning_rate: 0.03,
            optimizer: OptimizerKind::Adam,
            loss_weights: LossWeights::default(),
            placement: PlacementParams::default(),
            scene: SceneParams::default(),
            augmentation: AugmentationMode::Local,
            augment_params: AugmentParams::default(),
            seed: 0,
            batch_size: 8,
            train_confidence_floor: 0.0,
            printable_colors: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side < 8 {
            return Err(Error::Validation(format!(
                "patch_side must be >= 8, got {}",
                self.patch_side
            )));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Validation("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_confidence_floor) {
            return Err(Error::Validation(
                "train_confidence_floor must be in [0,1]".into(),
            ));
        }
        self.loss_weights.validate()?;
        self.placement.validate()?;
        self.scene.validate()?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_palette(&self) -> Result<PrintableSet> {
        match &self.printable_colors {
            Some(p) => PrintableSet::load(p),
            None => Ok(PrintableSet::default()),
        }
    }
}

/// Grayscale initialization: per-pixel gray in [0.3, 0.7] replicated
/// across channels, then treated as RGB.
pub fn init_patch(side: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Result<Patch> {
    if side < 8 {
        return Err(Error::Validation(format!(
            "patch side must be >= 8, got {side}"
        )));
    }
    let mut px = Array3::zeros((side, side, 3));
    for i in 0..side {
        for j in 0..side {
            let g = rng.random_range(0.3..=0.7);
            for c in 0..3 {
                px[[i, j, c]] = g;
            }
        }
    }
    Patch::new(px)
}

/// Occlusion baseline: i.i.d. uniform RGB noise.
pub fn make_random_patch(side: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Result<Patch> {
    if side < 8 {
        return Err(Error::Validation(format!(
            "patch side must be >= 8, got {side}"
        )));
    }
    Patch::new(Array3::from_shape_fn((side, side, 3), |_| rng.random()))
}

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub det_loss: f64,
    pub tv_loss: f64,
    pub nps_loss: f64,
    pub total_loss: f64,
}

/// Training log with one row per epoch.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("epoch,det_loss,tv_loss,nps_loss,total_loss\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.det_loss, e.tv_loss, e.nps_loss, e.total_loss
            ));
        }
        std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Optimizes a patch against a frozen detector. Returns the final patch
/// and the per-epoch loss log; the detector is hash-checked to be
/// bit-identical before and after.
pub fn train_patch(
    config: &AttackConfig,
    dataset: &Dataset,
    detector: &dyn DetectorModel,
) -> Result<(Patch, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if dataset.input_size != detector.input_size() {
        return Err(Error::Validation(format!(
            "dataset images are {} but detector expects {}",
            dataset.input_size,
            detector.input_size()
        )));
    }
    let palette = config.load_palette()?;
    let hash_before = detector.params_hash();

    let mut init_rng = substream(config.seed, concerns::INIT, &[]);
    let mut patch = init_patch(config.patch_side, &mut init_rng)?;
    let mut adam = Adam::new(config.learning_rate, &[config.patch_side, config.patch_side, 3]);
    let w = &config.loss_weights;
    let mut log = TrainingLog::default();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut order_rng = substream(config.seed, concerns::ORDER, &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut det_sum = 0.0;
        let mut tv_sum = 0.0;
        let mut nps_sum = 0.0;
        let mut n_steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grad = ArrayD::<f64>::zeros(patch.pixels().shape().to_vec());
            let mut det_batch = 0.0;
            for &idx in batch {
                let sample = &dataset.samples[idx];
                let (e, s) = (epoch as u64, idx as u64);

                // step 1: the only step that differs across ablation arms
                let image = match config.augmentation {
                    AugmentationMode::None => sample.image.clone(),
                    AugmentationMode::Global => {
                        let mut rng = substream(config.seed, concerns::AUGMENT, &[e, s]);
                        apply_global_augmentation(
                            &sample.image,
                            &mut rng,
                            &config.augment_params,
                        )
                    }
                    AugmentationMode::Local => {
                        let mut rng = substream(config.seed, concerns::AUGMENT, &[e, s]);
                        apply_local_augmentation(
                            &sample.image,
                            &sample.annotation,
                            &mut rng,
                            &config.augment_params,
                        )
                    }
                };

                // steps 2-3: place the current patch on every box, detect
                let draws: Vec<BoxDraws> = (0..sample.annotation.boxes.len())
                    .map(|b| {
                        let mut scene_rng =
                            substream(config.seed, concerns::SCENE, &[e, s, b as u64]);
                        let mut place_rng =
                            substream(config.seed, concerns::PLACEMENT, &[e, s, b as u64]);
                        BoxDraws {
                            scene: SceneDraw::sample(
                                &config.scene,
                                &mut scene_rng,
                                config.patch_side,
                            ),
                            placement: PlacementDraw::sample(
                                &config.placement,
                                &mut place_rng,
                            ),
                        }
                    })
                    .collect();
                let mut tape = Tape::new();
                let img_node = tape.constant(image.pixels().clone().into_dyn());
                let patch_node = tape.leaf(patch.pixels().clone().into_dyn());
                let (attacked, _) = apply_patch_traced(
                    &mut tape,
                    img_node,
                    patch_node,
                    config.patch_side,
                    &sample.annotation.boxes,
                    config.placement.size_ratio,
                    &draws,
                    dataset.input_size,
                    dataset.input_size,
                )?;
                let traced = detector.trace_confidences(&mut tape, attacked)?;

                // step 4: detection term, max confidence above the floor
                let max_conf = tape.max_all(traced.confidences);
                let det_value = tape.scalar(max_conf);
                if !det_value.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite detection loss at epoch {epoch}, image {idx}"
                    )));
                }
                det_batch += det_value;
                if det_value >= config.train_confidence_floor {
                    let grads = tape.backward(max_conf);
                    if let Some(g) = grads.get(patch_node) {
                        grad += g;
                    }
                }
            }

            // regularizers depend on the patch alone, once per step
            let mut reg_tape = Tape::new();
            let patch_node = reg_tape.leaf(patch.pixels().clone().into_dyn());
            let tv = tv_node(&mut reg_tape, patch_node)?;
            let nps = nps_node(&mut reg_tape, patch_node, &palette)?;
            let reg = reg_tape.weighted_sum(&[(w.beta, tv), (w.gamma, nps)]);
            let tv_value = reg_tape.scalar(tv);
            let nps_value = reg_tape.scalar(nps);
            let reg_grads = reg_tape.backward(reg);

            let det_mean = det_batch / batch.len() as f64;
            let total = w.alpha * det_mean + w.beta * tv_value + w.gamma * nps_value;
            if !total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite total loss at epoch {epoch}"
                )));
            }

            // step 5: one adaptive-moment step on patch pixels only
            grad.mapv_inplace(|v| v * w.alpha / batch.len() as f64);
            if let Some(g) = reg_grads.get(patch_node) {
                grad += g;
            }
            let mut pixels = patch.pixels().clone().into_dyn();
            adam.step(&mut pixels, &grad);
            // step 6: clamp to the valid pixel domain
            let clamped = pixels.mapv(|v| v.clamp(0.0, 1.0));
            patch = Patch::new(clamped.into_dimensionality::<Ix3>().unwrap())?;

            det_sum += det_mean;
            tv_sum += tv_value;
            nps_sum += nps_value;
            n_steps += 1;
        }

        let det_mean = det_sum / n_steps as f64;
        let tv_mean = tv_sum / n_steps as f64;
        let nps_mean = nps_sum / n_steps as f64;
        log.epochs.push(EpochStats {
            epoch,
            det_loss: det_mean,
            tv_loss: tv_mean,
            nps_loss: nps_mean,
            total_loss: w.alpha * det_mean + w.beta * tv_mean + w.gamma * nps_mean,
        });
    }

    let hash_after = detector.params_hash();
    if hash_before != hash_after {
        return Err(Error::Contract(
            "detector parameters changed during patch training".into(),
        ));
    }
    Ok((patch, log))
}

const SIDECAR_MAGIC: &[u8; 8] = b"APATCHv1";

/// Writes the lossless float sidecar: 8-byte magic, u32 side, then
/// side*side*3 little-endian f32 values row-major RGB.
pub fn save_patch_sidecar(patch: &Patch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(SIDECAR_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(patch.side() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(patch.pixels().len() * 4);
    for &v in patch.pixels().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a float sidecar written by [`save_patch_sidecar`].
pub fn load_patch_sidecar(path: impl AsRef<Path>) -> Result<Patch> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..8] != SIDECAR_MAGIC {
        return Err(Error::Format(format!(
            "bad patch sidecar magic in {}",
            path.display()
        )));
    }
    let side = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let expect = 12 + side * side * 3 * 4;
    if buf.len() != expect {
        return Err(Error::Format(format!(
            "patch sidecar {} has {} bytes, expected {expect}",
            path.display(),
            buf.len()
        )));
    }
    let mut vals = Vec::with_capacity(side * side * 3);
    for chunk in buf[12..].chunks_exact(4) {
        vals.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Patch::new(
        Array3::from_shape_vec((side, side, 3), vals)
            .map_err(|e| Error::Format(e.to_string()))?,
    )
}
