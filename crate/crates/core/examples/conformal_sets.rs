// Split conformal prediction with APS sets on a trained linear classifier.

use cmrm::conformal::{aps_score, apss, calibrate, coverage, predict_set};
use cmrm::data::{
    generate_gaussian_blobs, split, standardize, SplitTag, SynthSpec, DEFAULT_FRACTIONS,
};
use cmrm::rng::{substream, Stream};
use cmrm::trainer::{predict_proba, train, TrainConfig};
use cmrm::{Architecture, ModelParams};

pub fn run_example() -> cmrm::Result<(f64, f64)> {
    let mut ds = generate_gaussian_blobs(&SynthSpec {
        num_classes: 3,
        dim: 2,
        per_class_count: 300,
        class_separation: 2.0,
        seed: 4,
    })?;
    split(&mut ds, DEFAULT_FRACTIONS, 4)?;
    standardize(&mut ds)?;

    let init = ModelParams::init(Architecture::Linear, 2, 3, &mut substream(4, Stream::Init))?;
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 64,
        seed: 4,
        ..Default::default()
    };
    let (params, _) = train(init, &ds, &cfg)?;

    let probs_of = |tag| {
        let rows = ds.indices(tag);
        let labels: Vec<usize> = rows.iter().map(|&i| ds.clean_labels[i]).collect();
        predict_proba(&params, &ds.features.select_rows(&rows)).map(|p| (p, labels))
    };
    let (cal_probs, cal_labels) = probs_of(SplitTag::Cal)?;
    let scores = cal_probs
        .iter()
        .zip(&cal_labels)
        .map(|(p, &y)| aps_score(p, y))
        .collect::<cmrm::Result<Vec<_>>>()?;
    let calib = calibrate(&scores, 0.9)?;

    let (test_probs, test_labels) = probs_of(SplitTag::Test)?;
    let sets: Vec<_> = test_probs.iter().map(|p| predict_set(p, &calib)).collect();
    let cov = coverage(&sets, &test_labels)?;
    let size = apss(&sets, None)?;
    println!(
        "qhat {:.3}  coverage {:.3}  mean set size {:.3}",
        calib.qhat, cov, size
    );
    Ok((cov, size))
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
