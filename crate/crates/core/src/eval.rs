//! Evaluation harness: IoU matching, average precision, recall, attack
//! success rate, paired patch evaluation and the transferability matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{apply_patch_to_all_targets, PlacementParams, SceneParams};
use crate::dataset::Dataset;
use crate::detector::{Detection, DetectorModel};
use crate::error::{Error, Result};
use crate::imaging::{BBoxHBB, Patch};
use crate::rng::{concerns, substream};
use crate::workers::par_map_ordered;

/// Intersection over union of two boxes.
pub fn compute_iou(a: &BBoxHBB, b: &BBoxHBB) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Outcome of matching one image's predictions against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// (prediction index, ground-truth index, IoU) in original input indices.
    pub matched: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn matched_gt_indices(&self) -> Vec<usize> {
        self.matched.iter().map(|&(_, g, _)| g).collect()
    }
}

/// Canonical prediction ordering: confidence descending, then box
/// coordinates, so matching never depends on input order.
fn canonical_order(preds: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.confidence
            .partial_cmp(&pa.confidence)
            .unwrap()
            .then(pa.bbox.y_min.partial_cmp(&pb.bbox.y_min).unwrap())
            .then(pa.bbox.x_min.partial_cmp(&pb.bbox.x_min).unwrap())
            .then(pa.bbox.y_max.partial_cmp(&pb.bbox.y_max).unwrap())
            .then(pa.bbox.x_max.partial_cmp(&pb.bbox.x_max).unwrap())
    });
    idx
}

/// Greedy confidence-ordered matching: predictions below `conf_thresh`
/// are discarded; each remaining prediction claims the unmatched ground
/// truth with the highest IoU >= `iou_thresh`, ties to the lower index.
pub fn match_detections(
    preds: &[Detection],
    gts: &[BBoxHBB],
    iou_thresh: f64,
    conf_thresh: f64,
) -> MatchResult {
    let mut gt_taken = vec![false; gts.len()];
    let mut matched = Vec::new();
    let mut false_positives = 0usize;
    for &pi in &canonical_order(preds) {
        let p = &preds[pi];
        if p.confidence < conf_thresh {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = compute_iou(&p.bbox, gt);
            if iou < iou_thresh {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bi)) => iou > bi,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                gt_taken[gi] = true;
                matched.push((pi, gi, iou));
            }
            None => false_positives += 1,
        }
    }
    let true_positives = matched.len();
    MatchResult {
        true_positives,
        false_positives,
        false_negatives: gts.len() - true_positives,
        matched,
    }
}

/// All-points-interpolated average precision over the dataset-level
/// precision/recall staircase swept by confidence.
pub fn average_precision(per_image: &[(Vec<Detection>, Vec<BBoxHBB>)], iou_thresh: f64) -> f64 {
    let total_gt: usize = per_image.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    // label every prediction TP/FP via greedy matching at conf floor 0
    let mut labeled: Vec<(f64, bool)> = Vec::new();
    for (preds, gts) in per_image {
        let m = match_detections(preds, gts, iou_thresh, 0.0);
        let mut is_tp = vec![false; preds.len()];
        for &(pi, _, _) in &m.matched {
            is_tp[pi] = true;
        }
        for (p, tp) in preds.iter().zip(is_tp) {
            labeled.push((p.confidence, tp));
        }
    }
    if labeled.is_empty() {
        return 0.0;
    }
    labeled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(labeled.len()); // (recall, precision)
    let mut tp = 0usize;
    for (k, &(_, is_tp)) in labeled.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    integrate_pr_staircase(&points)
}

/// Area under the precision envelope of a recall-sorted staircase.
pub fn integrate_pr_staircase(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let mut envelope = vec![0.0; n];
    let mut running = 0.0f64;
    for k in (0..n).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (points[k].0 - prev_recall) * envelope[k];
        prev_recall = points[k].0;
    }
    ap
}

/// `TP / (TP + FN)` at the fixed confidence threshold.
pub fn recall(matches: &[MatchResult]) -> Result<f64> {
    let tp: usize = matches.iter().map(|m| m.true_positives).sum();
    let fn_: usize = matches.iter().map(|m| m.false_negatives).sum();
    if tp + fn_ == 0 {
        return Err(Error::Validation(
            "recall undefined: no ground-truth objects".into(),
        ));
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// Object-level suppression rate: among ground truths detected in the
/// clean pass, the fraction no longer detected in the attacked pass.
pub fn attack_success_rate(clean: &[MatchResult], attacked: &[MatchResult]) -> f64 {
    assert_eq!(
        clean.len(),
        attacked.len(),
        "clean and attacked passes must cover the same images"
    );
    let mut clean_detected = 0usize;
    let mut suppressed = 0usize;
    for (c, a) in clean.iter().zip(attacked) {
        let attacked_gts = a.matched_gt_indices();
        for gi in c.matched_gt_indices() {
            clean_detected += 1;
            if !attacked_gts.contains(&gi) {
                suppressed += 1;
            }
        }
    }
    if clean_detected == 0 {
        0.0
    } else {
        suppressed as f64 / clean_detected as f64
    }
}

/// Evaluation knobs; placement draws come from a dedicated seed so the
/// clean/attacked and cross-arm comparisons are paired.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub iou_thresh: f64,
    pub conf_thresh: f64,
    pub eval_seed: u64,
    pub placement: PlacementParams,
    pub scene: SceneParams,
    pub workers: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            conf_thresh: 0.25,
            eval_seed: 0,
            placement: PlacementParams::default(),
            // the patch is measured as-is at evaluation time
            scene: SceneParams::neutral(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub image_id: String,
    pub clean_detected: usize,
    pub suppressed: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Dataset-level report: AP and recall of the attacked pass, plus the
/// clean-vs-attacked suppression rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub recall: f64,
    pub asr: f64,
    pub per_image: Vec<PerImageMetrics>,
}

impl MetricsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from(
            "image_id,clean_detected,suppressed,true_positives,false_positives,false_negatives\n",
        );
        for r in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.image_id,
                r.clean_detected,
                r.suppressed,
                r.true_positives,
                r.false_positives,
                r.false_negatives
            ));
        }
        out.push_str(&format!("TOTAL ap={} recall={} asr={},,,,,\n", self.ap, self.recall, self.asr));
        std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Evaluates one patch (or the clean baseline when `patch` is `None`)
/// against a detector over a dataset. Placement draws are derived from
/// `(eval_seed, image index, box index)` so every candidate patch sees
/// identical geometry.
pub fn evaluate_patch(
    dataset: &Dataset,
    detector: &dyn DetectorModel,
    patch: Option<&Patch>,
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Validation("evaluation dataset is empty".into()));
    }
    if dataset.input_size != detector.input_size() {
        return Err(Error::Validation(format!(
            "dataset images are {} but detector expects {}",
            dataset.input_size,
            detector.input_size()
        )));
    }
    protocol.placement.validate()?;
    protocol.scene.validate()?;

    struct ImageOutcome {
        clean: MatchResult,
        attacked: MatchResult,
    }
    let outcomes: Vec<Result<ImageOutcome>> =
        par_map_ordered(&dataset.samples, protocol.workers, |idx, sample| {
            let gts = &sample.annotation.boxes;
            let clean_dets = detector.detect(std::slice::from_ref(&sample.image));
            let clean = match_detections(
                &clean_dets[0],
                gts,
                protocol.iou_thresh,
                protocol.conf_thresh,
            );
            let attacked = match patch {
                None => clean.clone(),
                Some(p) => {
                    let mut rng =
                        substream(protocol.eval_seed, concerns::EVAL, &[idx as u64]);
                    let attacked_img = apply_patch_to_all_targets(
                        &sample.image,
                        p,
                        &sample.annotation,
                        &protocol.placement,
                        &protocol.scene,
                        &mut rng,
                    )?;
                    let dets = detector.detect(std::slice::from_ref(&attacked_img));
                    match_detections(&dets[0], gts, protocol.iou_thresh, protocol.conf_thresh)
                }
            };
            Ok(ImageOutcome { clean, attacked })
        });
    let outcomes: Vec<ImageOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    // AP needs raw detections of the attacked pass; reuse the same draws.
    let attacked_for_ap: Vec<(Vec<Detection>, Vec<BBoxHBB>)> =
        par_map_ordered(&dataset.samples, protocol.workers, |idx, sample| {
            let dets = match patch {
                None => detector.detect(std::slice::from_ref(&sample.image)),
                Some(p) => {
                    let mut rng =
                        substream(protocol.eval_seed, concerns::EVAL, &[idx as u64]);
                    let attacked_img = apply_patch_to_all_targets(
                        &sample.image,
                        p,
                        &sample.annotation,
                        &protocol.placement,
                        &protocol.scene,
                        &mut rng,
                    )
                    .expect("placement succeeded in the first pass");
                    detector.detect(std::slice::from_ref(&attacked_img))
                }
            };
            (
                dets.into_iter().next().unwrap(),
                sample.annotation.boxes.clone(),
            )
        });

    let clean_matches: Vec<MatchResult> = outcomes.iter().map(|o| o.clean.clone()).collect();
    let attacked_matches: Vec<MatchResult> =
        outcomes.iter().map(|o| o.attacked.clone()).collect();
    let ap = average_precision(&attacked_for_ap, protocol.iou_thresh);
    let recall = recall(&attacked_matches)?;
    let asr = attack_success_rate(&clean_matches, &attacked_matches);
    let per_image = outcomes
        .iter()
        .zip(&dataset.samples)
        .map(|(o, s)| {
            let attacked_gts = o.attacked.matched_gt_indices();
            let clean_gts = o.clean.matched_gt_indices();
            PerImageMetrics {
                image_id: s.annotation.image_id.clone(),
                clean_detected: clean_gts.len(),
                suppressed: clean_gts
                    .iter()
                    .filter(|g| !attacked_gts.contains(g))
                    .count(),
                true_positives: o.attacked.true_positives,
                false_positives: o.attacked.false_positives,
                false_negatives: o.attacked.false_negatives,
            }
        })
        .collect();
    Ok(MetricsReport {
        ap,
        recall,
        asr,
        per_image,
    })
}

/// ASR of every (source patch, target detector) pair under a shared
/// evaluation seed.
#[derive(Debug, Clone, Serialize)]
pub struct TransferMatrix {
    pub patch_names: Vec<String>,
    pub detector_names: Vec<String>,
    pub asr: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("source_patch");
        for d in &self.detector_names {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for (name, row) in self.patch_names.iter().zip(&self.asr) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Evaluates every patch against every detector.
pub fn transfer_matrix(
    patches: &[(String, Patch)],
    detectors: &[(String, &dyn DetectorModel)],
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<TransferMatrix> {
    if detectors.len() < 2 {
        return Err(Error::Validation(
            "transfer evaluation needs at least 2 detectors".into(),
        ));
    }
    let mut asr = Vec::with_capacity(patches.len());
    for (_, patch) in patches {
        let mut row = Vec::with_capacity(detectors.len());
        for (_, det) in detectors {
            let report = evaluate_patch(dataset, *det, Some(patch), protocol)?;
            row.push(report.asr);
        }
        asr.push(row);
    }
    Ok(TransferMatrix {
        patch_names: patches.iter().map(|(n, _)| n.clone()).collect(),
        detector_names: detectors.iter().map(|(n, _)| n.clone()).collect(),
        asr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBoxHBB {
        BBoxHBB::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BBoxHBB, c: f64) -> Detection {
        Detection {
            bbox: b,
            confidence: c,
        }
    }

    #[test]
    fn iou_closed_forms() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(compute_iou(&a, &a), 1.0);
        let disjoint = bx(20.0, 20.0, 30.0, 30.0);
        assert_eq!(compute_iou(&a, &disjoint), 0.0);
        // (0,0,10,10) vs (0,5,10,15) -> 50/150 = 1/3
        let b = bx(0.0, 5.0, 10.0, 15.0);
        assert!((compute_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_basic_cases() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let m = match_detections(&[det(bx(0.5, 0.5, 10.0, 10.0), 0.9)], &gt, 0.5, 0.25);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 0, 0));

        let m = match_detections(&[], &[bx(0.0, 0.0, 5.0, 5.0), bx(10.0, 10.0, 20.0, 20.0)], 0.5, 0.25);
        assert_eq!(m.false_negatives, 2);

        // two predictions on one gt: higher confidence wins, other is FP
        let m = match_detections(
            &[
                det(bx(0.0, 0.0, 10.0, 10.0), 0.6),
                det(bx(0.2, 0.2, 10.0, 10.0), 0.8),
            ],
            &gt,
            0.5,
            0.25,
        );
        assert_eq!((m.true_positives, m.false_positives), (1, 1));
        assert_eq!(m.matched[0].0, 1, "higher-confidence pred matches");

        // sub-threshold confidence is discarded entirely
        let m = match_detections(&[det(bx(0.0, 0.0, 10.0, 10.0), 0.1)], &gt, 0.5, 0.25);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 0, 1));
    }

    /// Brute-force assignment oracle: maximize TP count over all injective
    /// assignments of predictions (conf >= thresh) to gts with IoU >= thresh,
    /// restricted to greedy-confidence semantics via exhaustive recursion on
    /// the confidence-sorted prefix.
    fn greedy_oracle(preds: &[Detection], gts: &[BBoxHBB], iou_t: f64, conf_t: f64) -> (usize, usize) {
        let order = canonical_order(preds);
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        let mut fp = 0;
        for &pi in &order {
            if preds[pi].confidence < conf_t {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = compute_iou(&preds[pi].bbox, g);
                if iou >= iou_t && best.map_or(true, |(_, bi)| iou > bi) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                tp += 1;
            } else {
                fp += 1;
            }
        }
        (tp, fp)
    }

    #[test]
    fn ap_trivial_cases() {
        // every GT matched by a perfect-confidence pred, no FPs -> 1.0
        let per_image = vec![(
            vec![det(bx(0.0, 0.0, 10.0, 10.0), 1.0)],
            vec![bx(0.0, 0.0, 10.0, 10.0)],
        )];
        assert_eq!(average_precision(&per_image, 0.5), 1.0);
        // zero predictions -> 0.0
        let per_image = vec![(vec![], vec![bx(0.0, 0.0, 10.0, 10.0)])];
        assert_eq!(average_precision(&per_image, 0.5), 0.0);
    }

    /// Exhaustive-cutoff oracle: re-match at every distinct confidence and
    /// integrate the same PR staircase.
    fn ap_oracle(per_image: &[(Vec<Detection>, Vec<BBoxHBB>)], iou_thresh: f64) -> f64 {
        let total_gt: usize = per_image.iter().map(|(_, g)| g.len()).sum();
        if total_gt == 0 {
            return 0.0;
        }
        let mut cutoffs: Vec<f64> = per_image
            .iter()
            .flat_map(|(p, _)| p.iter().map(|d| d.confidence))
            .collect();
        if cutoffs.is_empty() {
            return 0.0;
        }
        cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut points = Vec::with_capacity(cutoffs.len());
        for &t in &cutoffs {
            let mut tp = 0usize;
            let mut fp = 0usize;
            for (preds, gts) in per_image {
                let m = match_detections(preds, gts, iou_thresh, t);
                tp += m.true_positives;
                fp += m.false_positives;
            }
            points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        integrate_pr_staircase(&points)
    }

    fn random_instance(
        rng: &mut ChaCha12Rng,
    ) -> Vec<(Vec<Detection>, Vec<BBoxHBB>)> {
        let n_images = rng.random_range(1..=5usize);
        (0..n_images)
            .map(|_| {
                let n_gt = rng.random_range(0..=4usize);
                let gts: Vec<BBoxHBB> = (0..n_gt)
                    .map(|_| {
                        let x0 = rng.random_range(0.0..80.0);
                        let y0 = rng.random_range(0.0..80.0);
                        bx(
                            x0,
                            y0,
                            x0 + rng.random_range(5.0..20.0),
                            y0 + rng.random_range(5.0..20.0),
                        )
                    })
                    .collect();
                let n_pred = rng.random_range(0..=4usize);
                let preds: Vec<Detection> = (0..n_pred)
                    .map(|_| {
                        // half the predictions jitter a gt, half are noise
                        let b = if !gts.is_empty() && rng.random::<bool>() {
                            let g = &gts[rng.random_range(0..gts.len())];
                            let dx = rng.random_range(-3.0..3.0);
                            let dy = rng.random_range(-3.0..3.0);
                            bx(
                                (g.x_min + dx).max(0.0),
                                (g.y_min + dy).max(0.0),
                                g.x_max + dx,
                                g.y_max + dy,
                            )
                        } else {
                            let x0 = rng.random_range(0.0..80.0);
                            let y0 = rng.random_range(0.0..80.0);
                            bx(
                                x0,
                                y0,
                                x0 + rng.random_range(5.0..20.0),
                                y0 + rng.random_range(5.0..20.0),
                            )
                        };
                        det(b, rng.random::<f64>())
                    })
                    .collect();
                (preds, gts)
            })
            .collect()
    }

    #[test]
    fn ap_equals_exhaustive_cutoff_oracle_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut nontrivial = 0;
        for _ in 0..200 {
            let inst = random_instance(&mut rng);
            let got = average_precision(&inst, 0.5);
            let want = ap_oracle(&inst, 0.5);
            assert_eq!(got, want, "instance {inst:?}");
            if got > 0.0 {
                nontrivial += 1;
            }
        }
        assert!(nontrivial > 50, "oracle comparison exercised real curves");
    }

    #[test]
    fn match_matches_greedy_oracle_on_small_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..300 {
            let inst = random_instance(&mut rng);
            for (preds, gts) in inst {
                let m = match_detections(&preds, &gts, 0.5, 0.25);
                let (tp, fp) = greedy_oracle(&preds, &gts, 0.5, 0.25);
                assert_eq!((m.true_positives, m.false_positives), (tp, fp));
            }
        }
    }

    #[test]
    fn recall_cases() {
        let m_all = MatchResult {
            true_positives: 10,
            false_positives: 0,
            false_negatives: 0,
            matched: vec![],
        };
        assert_eq!(recall(&[m_all]).unwrap(), 1.0);
        let m_none = MatchResult {
            true_positives: 0,
            false_positives: 2,
            false_negatives: 10,
            matched: vec![],
        };
        assert_eq!(recall(&[m_none]).unwrap(), 0.0);
        let m_part = MatchResult {
            true_positives: 7,
            false_positives: 1,
            false_negatives: 3,
            matched: vec![],
        };
        assert_eq!(recall(&[m_part]).unwrap(), 0.7);
        let empty = MatchResult {
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
            matched: vec![],
        };
        assert!(recall(&[empty]).is_err());
    }

    #[test]
    fn asr_definition_cases() {
        let clean = MatchResult {
            true_positives: 2,
            false_positives: 0,
            false_negatives: 0,
            matched: vec![(0, 0, 0.9), (1, 1, 0.8)],
        };
        // identical attacked pass -> 0.0
        assert_eq!(attack_success_rate(&[clean.clone()], &[clean.clone()]), 0.0);
        // everything suppressed -> 1.0
        let gone = MatchResult {
            true_positives: 0,
            false_positives: 0,
            false_negatives: 2,
            matched: vec![],
        };
        assert_eq!(attack_success_rate(&[clean.clone()], &[gone]), 1.0);
        // 3 of 10 suppressed -> 0.3
        let clean10 = MatchResult {
            true_positives: 10,
            false_positives: 0,
            false_negatives: 0,
            matched: (0..10).map(|i| (i, i, 0.9)).collect(),
        };
        let seven = MatchResult {
            true_positives: 7,
            false_positives: 0,
            false_negatives: 3,
            matched: (0..7).map(|i| (i, i, 0.9)).collect(),
        };
        assert_eq!(attack_success_rate(&[clean10], &[seven]), 0.3);
        // empty clean-detected set -> 0.0
        let nothing = MatchResult {
            true_positives: 0,
            false_positives: 0,
            false_negatives: 1,
            matched: vec![],
        };
        assert_eq!(attack_success_rate(&[nothing.clone()], &[nothing]), 0.0);
    }

    proptest! {
        #[test]
        fn matching_invariant_to_prediction_order(seed in 0u64..300) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng);
            for (mut preds, gts) in inst {
                let before = match_detections(&preds, &gts, 0.5, 0.25);
                // deterministic shuffle
                for i in (1..preds.len()).rev() {
                    let j = rng.random_range(0..=i);
                    preds.swap(i, j);
                }
                let after = match_detections(&preds, &gts, 0.5, 0.25);
                prop_assert_eq!(
                    (before.true_positives, before.false_positives, before.false_negatives),
                    (after.true_positives, after.false_positives, after.false_negatives)
                );
                let g_before: std::collections::BTreeSet<usize> =
                    before.matched_gt_indices().into_iter().collect();
                let g_after: std::collections::BTreeSet<usize> =
                    after.matched_gt_indices().into_iter().collect();
                prop_assert_eq!(g_before, g_after);
            }
        }

        #[test]
        fn asr_monotone_under_detection_removal(seed in 0u64..300) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng);
            for (preds, gts) in inst {
                if preds.is_empty() || gts.is_empty() {
                    continue;
                }
                // clean pass detects everything perfectly
                let clean_preds: Vec<Detection> =
                    gts.iter().map(|g| det(*g, 0.99)).collect();
                let clean = match_detections(&clean_preds, &gts, 0.5, 0.25);
                let attacked_full = match_detections(&preds, &gts, 0.5, 0.25);
                let base = attack_success_rate(
                    std::slice::from_ref(&clean),
                    std::slice::from_ref(&attacked_full),
                );
                for drop in 0..preds.len() {
                    let mut fewer = preds.clone();
                    fewer.remove(drop);
                    let attacked_less = match_detections(&fewer, &gts, 0.5, 0.25);
                    let asr = attack_success_rate(
                        std::slice::from_ref(&clean),
                        std::slice::from_ref(&attacked_less),
                    );
                    prop_assert!(asr + 1e-12 >= base,
                        "removing a detection decreased ASR: {} -> {}", base, asr);
                }
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng);
            let ap = average_precision(&inst, 0.5);
            prop_assert!((0.0..=1.0).contains(&ap));
            let matches: Vec<MatchResult> = inst
                .iter()
                .map(|(p, g)| match_detections(p, g, 0.5, 0.25))
                .collect();
            if matches.iter().any(|m| m.true_positives + m.false_negatives > 0) {
                let r = recall(&matches).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
            }
            let asr = attack_success_rate(&matches, &matches);
            prop_assert_eq!(asr, 0.0);
        }
    }
}
