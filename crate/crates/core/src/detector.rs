//! The detector abstraction and the built-in trainable toy detector: a
//! small convolutional net with a single-scale grid head predicting
//! per-cell objectness and box offsets for the one "ship" class.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid_scalar, Adam, NodeId, Tape};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::compute_iou;
use crate::imaging::{BBoxHBB, ImageTensor};
use crate::rng::substream;

/// Cell size in pixels of the single-scale grid head.
pub const GRID_STRIDE: usize = 8;

/// One predicted box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBoxHBB,
    pub confidence: f64,
}

/// Confidences traced on a tape: gradients of every entry flow back to
/// the input image node. `boxes` holds the decoded box per grid cell in
/// row-major order, matching the flattened confidence tensor.
pub struct TracedDetections {
    pub confidences: NodeId,
    pub boxes: Vec<BBoxHBB>,
}

/// Behavior contract every victim model implements.
pub trait DetectorModel: Sync {
    fn input_size(&self) -> usize;
    fn confidence_floor(&self) -> f64;
    fn set_confidence_floor(&mut self, floor: f64);
    /// Deterministic inference: per-image detections above the floor,
    /// non-maximum suppressed.
    fn detect(&self, images: &[ImageTensor]) -> Vec<Vec<Detection>>;
    /// Traces the confidence map of one image on the tape so the attack
    /// can differentiate through it.
    fn trace_confidences(&self, tape: &mut Tape, image_hwc: NodeId) -> Result<TracedDetections>;
    /// Content hash of all parameters; used to prove the model is frozen.
    fn params_hash(&self) -> String;
}

/// Width variants mirroring a small/medium model-size axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    N,
    S,
    M,
}

impl Variant {
    pub fn width_multiplier(&self) -> f64 {
        match self {
            Variant::N => 0.25,
            Variant::S => 0.5,
            Variant::M => 1.0,
        }
    }

    /// Trunk channel widths; the base (M) trunk is [16, 32, 64].
    pub fn channels(&self) -> [usize; 3] {
        let m = self.width_multiplier();
        [
            ((16.0 * m) as usize).max(1),
            ((32.0 * m) as usize).max(1),
            ((64.0 * m) as usize).max(1),
        ]
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n" => Ok(Variant::N),
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            other => Err(Error::Validation(format!(
                "unknown detector variant '{other}' (expected n, s or m)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::N => "n",
            Variant::S => "s",
            Variant::M => "m",
        }
    }
}

/// One convolution layer with weights flattened to (Cout, Cin·k·k).
#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Array2<f64>,
    bias: Array1<f64>,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn init(
        rng: &mut ChaCha12Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let weight =
            Array2::from_shape_fn((cout, cin * kernel * kernel), |_| {
                rng.random_range(-limit..=limit)
            });
        Self {
            weight,
            bias: Array1::zeros(cout),
            cin,
            kernel,
            stride,
            pad,
        }
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Small convolutional single-class detector: three stride-2 conv blocks
/// and a 1×1 head emitting per-cell `[tx, ty, tw, th, obj]` logits.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub variant: Variant,
    input_size: usize,
    confidence_floor: f64,
    nms_iou: f64,
    layers: Vec<ConvLayer>,
}

pub const HEAD_CHANNELS: usize = 5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.25;

impl ToyDetector {
    pub fn new(variant: Variant, input_size: usize, seed: u64) -> Result<Self> {
        if input_size % GRID_STRIDE != 0 || input_size < 4 * GRID_STRIDE {
            return Err(Error::Validation(format!(
                "input size must be a multiple of {GRID_STRIDE} and at least {}",
                4 * GRID_STRIDE
            )));
        }
        let ch = variant.channels();
        let mut rng = substream(seed, "detector-init", &[]);
        // three stride-2 blocks, one stride-1 block to widen the receptive
        // field past the longest target, then the 1x1 grid head
        let mut layers = vec![
            ConvLayer::init(&mut rng, 3, ch[0], 3, 2, 1),
            ConvLayer::init(&mut rng, ch[0], ch[1], 3, 2, 1),
            ConvLayer::init(&mut rng, ch[1], ch[2], 3, 2, 1),
            ConvLayer::init(&mut rng, ch[2], ch[2], 3, 1, 1),
            ConvLayer::init(&mut rng, ch[2], HEAD_CHANNELS, 1, 1, 0),
        ];
        // start objectness pessimistic so early training is not FP-flooded
        layers.last_mut().unwrap().bias[4] = -2.0;
        Ok(Self {
            variant,
            input_size,
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
            nms_iou: DEFAULT_NMS_IOU,
            layers,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / GRID_STRIDE
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::n_params).sum()
    }

    /// Traces the trunk and head; returns the (5,G,G) logits node.
    fn trace_head(&self, tape: &mut Tape, image_hwc: NodeId, train: bool) -> NodeId {
        let chw = tape.hwc_to_chw(image_hwc);
        let mut x = tape.add_scalar(chw, -0.5);
        for (li, layer) in self.layers.iter().enumerate() {
            let (w, b) = if train {
                (
                    tape.leaf(layer.weight.clone().into_dyn()),
                    tape.leaf(layer.bias.clone().into_dyn()),
                )
            } else {
                (
                    tape.constant(layer.weight.clone().into_dyn()),
                    tape.constant(layer.bias.clone().into_dyn()),
                )
            };
            x = tape.conv2d(x, w, b, layer.cin, layer.kernel, layer.stride, layer.pad);
            if li + 1 < self.layers.len() {
                x = tape.leaky_relu(x, 0.1);
            }
        }
        x
    }

    /// Trace variant used by detector training: returns the logits node
    /// plus the weight/bias leaf ids in layer order.
    fn trace_head_trainable(
        &self,
        tape: &mut Tape,
        image_hwc: NodeId,
    ) -> (NodeId, Vec<(NodeId, NodeId)>) {
        let chw = tape.hwc_to_chw(image_hwc);
        let mut x = tape.add_scalar(chw, -0.5);
        let mut params = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone().into_dyn());
            let b = tape.leaf(layer.bias.clone().into_dyn());
            params.push((w, b));
            x = tape.conv2d(x, w, b, layer.cin, layer.kernel, layer.stride, layer.pad);
            if li + 1 < self.layers.len() {
                x = tape.leaky_relu(x, 0.1);
            }
        }
        (x, params)
    }

    /// Raw head logits (5,G,G) for one image, no gradient tracking.
    pub fn forward_grid(&self, image: &ImageTensor) -> Array3<f64> {
        let mut tape = Tape::new();
        let img = tape.constant(image.pixels().clone().into_dyn());
        let head = self.trace_head(&mut tape, img, false);
        tape.value(head)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("head logits")
    }

    /// Decodes one cell's logits into an image-space box. The center can
    /// reach half a cell beyond the cell bounds so every positive cell can
    /// express the true object center.
    fn decode_cell(&self, head: &Array3<f64>, i: usize, j: usize) -> (BBoxHBB, f64) {
        let size = self.input_size as f64;
        let stride = GRID_STRIDE as f64;
        let bx = (j as f64 + 2.0 * sigmoid_scalar(head[[0, i, j]]) - 0.5) * stride;
        let by = (i as f64 + 2.0 * sigmoid_scalar(head[[1, i, j]]) - 0.5) * stride;
        let bw = sigmoid_scalar(head[[2, i, j]]) * size;
        let bh = sigmoid_scalar(head[[3, i, j]]) * size;
        let conf = sigmoid_scalar(head[[4, i, j]]);
        let x_min = (bx - bw / 2.0).clamp(0.0, size - 1.0);
        let y_min = (by - bh / 2.0).clamp(0.0, size - 1.0);
        let x_max = (bx + bw / 2.0).clamp(x_min + 1e-6, size);
        let y_max = (by + bh / 2.0).clamp(y_min + 1e-6, size);
        (
            BBoxHBB {
                x_min,
                y_min,
                x_max,
                y_max,
            },
            conf,
        )
    }

    fn decode(&self, head: &Array3<f64>, floor: f64) -> Vec<Detection> {
        let g = self.grid_size();
        let mut dets = Vec::new();
        for i in 0..g {
            for j in 0..g {
                let (bbox, confidence) = self.decode_cell(head, i, j);
                if confidence >= floor {
                    dets.push(Detection { bbox, confidence });
                }
            }
        }
        nms(dets, self.nms_iou)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
        w(CHECKPOINT_MAGIC)?;
        w(&(match self.variant {
            Variant::N => 0u32,
            Variant::S => 1,
            Variant::M => 2,
        })
        .to_le_bytes())?;
        w(&(self.input_size as u32).to_le_bytes())?;
        w(&self.confidence_floor.to_le_bytes())?;
        w(&self.nms_iou.to_le_bytes())?;
        w(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            for v in [
                layer.weight.nrows(),
                layer.cin,
                layer.kernel,
                layer.stride,
                layer.pad,
            ] {
                w(&(v as u32).to_le_bytes())?;
            }
            for x in layer.weight.iter().chain(layer.bias.iter()) {
                w(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Format(format!(
                    "truncated detector checkpoint {}",
                    path.display()
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad detector checkpoint magic in {}",
                path.display()
            )));
        }
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let variant = match read_u32(&mut pos)? {
            0 => Variant::N,
            1 => Variant::S,
            2 => Variant::M,
            v => return Err(Error::Format(format!("unknown variant tag {v}"))),
        };
        let input_size = read_u32(&mut pos)? as usize;
        let confidence_floor = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let nms_iou = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let n_layers = read_u32(&mut pos)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let cout = read_u32(&mut pos)? as usize;
            let cin = read_u32(&mut pos)? as usize;
            let kernel = read_u32(&mut pos)? as usize;
            let stride = read_u32(&mut pos)? as usize;
            let pad = read_u32(&mut pos)? as usize;
            let wlen = cout * cin * kernel * kernel;
            let mut weight = Vec::with_capacity(wlen);
            for _ in 0..wlen {
                weight.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let mut bias = Vec::with_capacity(cout);
            for _ in 0..cout {
                bias.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            layers.push(ConvLayer {
                weight: Array2::from_shape_vec((cout, cin * kernel * kernel), weight)
                    .map_err(|e| Error::Format(e.to_string()))?,
                bias: Array1::from_vec(bias),
                cin,
                kernel,
                stride,
                pad,
            });
        }
        Ok(Self {
            variant,
            input_size,
            confidence_floor,
            nms_iou,
            layers,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TOYDET1\0";

impl DetectorModel for ToyDetector {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn confidence_floor(&self) -> f64 {
        self.confidence_floor
    }

    fn set_confidence_floor(&mut self, floor: f64) {
        self.confidence_floor = floor;
    }

    fn detect(&self, images: &[ImageTensor]) -> Vec<Vec<Detection>> {
        images
            .iter()
            .map(|img| {
                assert_eq!(
                    (img.height(), img.width()),
                    (self.input_size, self.input_size),
                    "detector input size mismatch"
                );
                let head = self.forward_grid(img);
                self.decode(&head, self.confidence_floor)
            })
            .collect()
    }

    fn trace_confidences(&self, tape: &mut Tape, image_hwc: NodeId) -> Result<TracedDetections> {
        let shape = tape.value(image_hwc).shape().to_vec();
        if shape != [self.input_size, self.input_size, 3] {
            return Err(Error::Contract(format!(
                "traced image shape {shape:?} does not match detector input {0}x{0}x3",
                self.input_size
            )));
        }
        let head = self.trace_head(tape, image_hwc, false);
        let obj_logits = tape.slice_channels(head, 4, 5);
        let confidences = tape.sigmoid(obj_logits);
        let head_vals = tape
            .value(head)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("head logits");
        let g = self.grid_size();
        let mut boxes = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                boxes.push(self.decode_cell(&head_vals, i, j).0);
            }
        }
        Ok(TracedDetections { confidences, boxes })
    }

    fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Greedy non-maximum suppression with a canonical ordering so results do
/// not depend on input order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.bbox.y_min.partial_cmp(&b.bbox.y_min).unwrap())
            .then(a.bbox.x_min.partial_cmp(&b.bbox.x_min).unwrap())
            .then(a.bbox.y_max.partial_cmp(&b.bbox.y_max).unwrap())
            .then(a.bbox.x_max.partial_cmp(&b.bbox.x_max).unwrap())
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| compute_iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detector supervision targets for one image.
struct GridTargets {
    obj: ArrayD<f64>,
    boxes: ArrayD<f64>,
    box_mask: ArrayD<f64>,
}

/// Every cell whose center lies inside a box is a positive (plus the cell
/// holding the box center, so thin boxes always have one). Each positive
/// regresses the full box; the center offset target is expressed in the
/// extended `2σ-0.5` range of [`ToyDetector::decode_cell`].
fn build_targets(annotation_boxes: &[BBoxHBB], input_size: usize) -> GridTargets {
    let g = input_size / GRID_STRIDE;
    let stride = GRID_STRIDE as f64;
    let mut obj = ndarray::Array2::<f64>::zeros((g, g));
    let mut boxes = Array3::<f64>::zeros((4, g, g));
    let mut box_mask = Array3::<f64>::zeros((4, g, g));
    // targets live in logit space so the regression keeps healthy
    // gradients even for thin boxes near the sigmoid tails
    let logit = |t: f64| {
        let t = t.clamp(0.02, 0.98);
        (t / (1.0 - t)).ln()
    };
    for b in annotation_boxes {
        let (cx, cy) = b.center();
        let mut assign = |i: usize, j: usize| {
            obj[[i, j]] = 1.0;
            boxes[[0, i, j]] = logit(((cx / stride - j as f64 + 0.5) / 2.0).clamp(0.0, 1.0));
            boxes[[1, i, j]] = logit(((cy / stride - i as f64 + 0.5) / 2.0).clamp(0.0, 1.0));
            boxes[[2, i, j]] = logit((b.width() / input_size as f64).clamp(0.0, 1.0));
            boxes[[3, i, j]] = logit((b.height() / input_size as f64).clamp(0.0, 1.0));
            for c in 0..4 {
                box_mask[[c, i, j]] = 1.0;
            }
        };
        for i in 0..g {
            for j in 0..g {
                let (px, py) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                if b.contains_point(px, py) {
                    assign(i, j);
                }
            }
        }
        let jc = ((cx / stride) as usize).min(g - 1);
        let ic = ((cy / stride) as usize).min(g - 1);
        assign(ic, jc);
    }
    GridTargets {
        obj: obj.into_dyn().insert_axis(ndarray::Axis(0)),
        boxes: boxes.into_dyn(),
        box_mask: box_mask.into_dyn(),
    }
}

/// Hyperparameters of the supervised detector training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub pos_weight: f64,
    pub box_weight: f64,
    pub ap_floor: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 0,
            pos_weight: 8.0,
            box_weight: 5.0,
            ap_floor: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectorEpochStats {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains a toy detector on the synthetic dataset and verifies it reaches
/// the AP floor on the held-out split.
pub fn train_toy_detector(
    train: &Dataset,
    holdout: &Dataset,
    variant: Variant,
    config: &DetectorTrainConfig,
) -> Result<(ToyDetector, Vec<DetectorEpochStats>)> {
    if train.len() < 2 {
        return Err(Error::Validation(
            "detector training needs at least 2 images".into(),
        ));
    }
    let mut det = ToyDetector::new(variant, train.input_size, config.seed)?;
    let mut optims: Vec<(Adam, Adam)> = det
        .layers
        .iter()
        .map(|l| {
            (
                Adam::new(config.learning_rate, l.weight.shape()),
                Adam::new(config.learning_rate, l.bias.shape()),
            )
        })
        .collect();

    let targets: Vec<GridTargets> = train
        .samples
        .iter()
        .map(|s| build_targets(&s.annotation.boxes, train.input_size))
        .collect();

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut order_rng = substream(config.seed, "detector-order", &[epoch as u64]);
        shuffle(&mut order, &mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad_acc: Vec<(ArrayD<f64>, ArrayD<f64>)> = det
                .layers
                .iter()
                .map(|l| {
                    (
                        ArrayD::zeros(l.weight.shape().to_vec()),
                        ArrayD::zeros(l.bias.shape().to_vec()),
                    )
                })
                .collect();
            for &idx in batch {
                let sample = &train.samples[idx];
                let t = &targets[idx];
                let mut tape = Tape::new();
                let img = tape.constant(sample.image.pixels().clone().into_dyn());
                let (head, params) = det.trace_head_trainable(&mut tape, img);
                let obj_logits = tape.slice_channels(head, 4, 5);
                let box_logits = tape.slice_channels(head, 0, 4);
                let obj_loss = tape.bce_with_logits(obj_logits, &t.obj, config.pos_weight);
                let box_loss = tape.weighted_sq_err(box_logits, &t.boxes, &t.box_mask);
                let loss =
                    tape.weighted_sum(&[(1.0, obj_loss), (config.box_weight, box_loss)]);
                epoch_loss += tape.scalar(loss);
                let grads = tape.backward(loss);
                for (li, (w, b)) in params.iter().enumerate() {
                    if let Some(g) = grads.get(*w) {
                        grad_acc[li].0 += g;
                    }
                    if let Some(g) = grads.get(*b) {
                        grad_acc[li].1 += g;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (li, layer) in det.layers.iter_mut().enumerate() {
                let gw = grad_acc[li].0.mapv(|v| v * scale);
                let gb = grad_acc[li].1.mapv(|v| v * scale);
                let mut wd = layer.weight.clone().into_dyn();
                optims[li].0.step(&mut wd, &gw);
                layer.weight = wd.into_dimensionality().unwrap();
                let mut bd = layer.bias.clone().into_dyn();
                optims[li].1.step(&mut bd, &gb);
                layer.bias = bd.into_dimensionality().unwrap();
            }
        }
        log.push(DetectorEpochStats {
            epoch,
            loss: epoch_loss / train.len() as f64,
        });
    }

    let ap = holdout_ap(&det, holdout);
    if ap < config.ap_floor {
        return Err(Error::Training(format!(
            "toy-{} reached AP@0.5 {ap:.3} on the held-out split, below the {:.2} floor \
             (final epoch loss {:.4})",
            variant.as_str(),
            config.ap_floor,
            log.last().map(|s| s.loss).unwrap_or(f64::NAN)
        )));
    }
    Ok((det, log))
}

/// AP@0.5 of a detector over a dataset, at a permissive confidence floor.
pub fn holdout_ap(det: &ToyDetector, holdout: &Dataset) -> f64 {
    let mut eval_det = det.clone();
    eval_det.set_confidence_floor(0.05);
    let images: Vec<ImageTensor> = holdout.samples.iter().map(|s| s.image.clone()).collect();
    let dets = eval_det.detect(&images);
    let per_image: Vec<(Vec<Detection>, Vec<BBoxHBB>)> = dets
        .into_iter()
        .zip(holdout.samples.iter())
        .map(|(d, s)| (d, s.annotation.boxes.clone()))
        .collect();
    crate::eval::average_precision(&per_image, 0.5)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
