//! Picks a model threshold by maximizing F2 on scored validation data, then
//! prints the ROC curve summary.

use tinychirp::audio_io::Label;
use tinychirp::metrics::{auc, optimize_threshold, roc_curve, ThresholdMetrics};
use tinychirp::rng::SplitMix64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = SplitMix64::new(2024);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..200 {
        let target = rng.bernoulli(0.3);
        let centre = if target { 0.7 } else { 0.3 };
        scores.push((centre + rng.uniform(-0.35, 0.35)).clamp(0.0, 1.0));
        labels.push(if target { Label::Target } else { Label::NonTarget });
    }

    let choice = optimize_threshold(&scores, &labels, 2.0)?;
    let m = choice.metrics;
    println!(
        "t* = {:.3}: precision {:.3}, recall {:.3}, F2 {:.3}, accuracy {:.3}",
        choice.t_star, m.precision, m.recall, m.fbeta, m.accuracy
    );
    for t in [0.3, 0.5, 0.7] {
        let m = ThresholdMetrics::at(&scores, &labels, t, 2.0)?;
        println!("t = {t:.1}: precision {:.3}, recall {:.3}, F2 {:.3}", m.precision, m.recall, m.fbeta);
    }

    let roc = roc_curve(&scores, &labels)?;
    println!("ROC: {} points, AUC {:.4}", roc.points.len(), auc(&roc));
    Ok(())
}
