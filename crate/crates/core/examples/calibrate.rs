//! Scratch calibration runs for detector training and attack dynamics.

use advpatch::dataset::Dataset;
use advpatch::detector::{holdout_ap, train_toy_detector, DetectorTrainConfig, Variant};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("detector");
    match mode {
        "detector" => calibrate_detector(&args[2..]),
        other => eprintln!("unknown mode {other}"),
    }
}

fn calibrate_detector(args: &[String]) {
    let size: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(64);
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let variant = match args.get(4).map(String::as_str) {
        Some("s") => Variant::S,
        Some("m") => Variant::M,
        _ => Variant::N,
    };
    let train = Dataset::synthesize(n_train, size, 1..=2, 100).unwrap();
    let holdout = Dataset::synthesize(16, size, 1..=2, 101).unwrap();
    let box_weight: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let pos_weight: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let cfg = DetectorTrainConfig {
        epochs,
        learning_rate: lr,
        ap_floor: 0.0,
        box_weight,
        pos_weight,
        ..DetectorTrainConfig::default()
    };
    let t = Instant::now();
    let (det, log) = train_toy_detector(&train, &holdout, variant, &cfg).unwrap();
    let dt = t.elapsed().as_secs_f64();
    let ap = holdout_ap(&det, &holdout);
    for s in log.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:3}  loss {:.4}", s.epoch, s.loss);
    }
    // inspect the first two holdout images
    use advpatch::autodiff::sigmoid_scalar;
    use advpatch::detector::DetectorModel;
    let mut d = det.clone();
    d.set_confidence_floor(0.05);
    for s in holdout.samples.iter().take(2) {
        let dets = d.detect(std::slice::from_ref(&s.image));
        println!("gt boxes:");
        for b in &s.annotation.boxes {
            println!("  ({:.0},{:.0},{:.0},{:.0})", b.x_min, b.y_min, b.x_max, b.y_max);
        }
        println!("confidence grid (x10, clipped to 9):");
        let head = det.forward_grid(&s.image);
        let g = size / 8;
        for i in 0..g {
            let row: String = (0..g)
                .map(|j| {
                    let c = sigmoid_scalar(head[[4, i, j]]);
                    char::from_digit(((c * 10.0) as u32).min(9), 10).unwrap()
                })
                .collect();
            println!("  {row}");
        }
        println!("detections:");
        for det in dets[0].iter().take(6) {
            let b = det.bbox;
            println!(
                "  conf {:.3} ({:.1},{:.1},{:.1},{:.1})",
                det.confidence, b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
    }
    println!(
        "variant {:?} size {size} train {n_train} epochs {epochs} lr {lr}: AP {ap:.4} in {dt:.1}s ({:.0} ms/epoch)",
        variant,
        dt * 1000.0 / epochs as f64
    );
}
