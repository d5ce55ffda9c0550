// Class-conditional thresholds of the binary variant, first on a fixed
// sample and then over training on a noisy binary task.

use cmrm::cmrm::{binary_thresholds, BinaryCmrmConfig};
use cmrm::config::ExperimentConfig;

const CONFIG: &str = r#"
seed = 2

[data.synth]
num_classes = 2
dim = 4
per_class_count = 200
class_separation = 2.0

[noise]
kind = "binary_flip"
rate = 0.2

[model]
architecture = "linear"

[train]
epochs = 10
batch_size = 64
learning_rate = 0.01

[cmrm]
kind = "binary"
alpha_pos = 0.2
alpha_neg = 0.2
lambda_pos = 0.7
lambda_neg = 0.2
"#;

pub fn run_example() -> cmrm::Result<Vec<(f64, f64)>> {
    let cfg = BinaryCmrmConfig {
        alpha_pos: 0.25,
        alpha_neg: 0.25,
        lambda_pos: 1.0,
        lambda_neg: 1.0,
    };
    let p1 = [0.1, 0.2, 0.3, 0.9, 0.4, 0.6, 0.8, 0.95];
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    let t = binary_thresholds(&p1, &labels, &cfg)?;
    println!("fixed sample: tau_neg {} tau_pos {}", t.tau_neg, t.tau_pos);

    let run = cmrm::cli::run_experiment(&ExperimentConfig::from_toml_str(CONFIG)?)?;
    let mut path = Vec::new();
    for r in &run.records {
        let (neg, pos) = (r.tau_neg.unwrap_or(f64::NAN), r.tau_pos.unwrap_or(f64::NAN));
        println!(
            "epoch {:>2}: tau_neg {neg:.3} tau_pos {pos:.3} val_auroc {:?}",
            r.epoch, r.val_auroc
        );
        path.push((neg, pos));
    }
    println!(
        "test AUROC {:?}, FPR {:?}, FNR {:?}",
        run.test.auroc, run.test.fpr, run.test.fnr
    );
    Ok(path)
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
