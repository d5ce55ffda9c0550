// Train the same MLP with plain cross-entropy and with CE + CMRM on noisy
// synthetic blobs, then compare clean test accuracy.

use cmrm::config::ExperimentConfig;

const CONFIG: &str = r#"
seed = 1

[data.synth]
num_classes = 4
dim = 6
per_class_count = 150
class_separation = 2.5

[noise]
kind = "symmetric"
rate = 0.3

[model]
architecture = "two_layer_mlp"
hidden = 16

[train]
epochs = 15
batch_size = 64

[output]
margins = false
"#;

pub fn run_example() -> cmrm::Result<(f64, f64)> {
    let baseline = ExperimentConfig::from_toml_str(CONFIG)?;
    let with_cmrm = baseline.with_cmrm_point(0.2, 0.15);

    let ce = cmrm::cli::run_experiment(&baseline)?;
    let cmrm_run = cmrm::cli::run_experiment(&with_cmrm)?;

    println!("CE        test accuracy {:.3}", ce.test.accuracy);
    println!("CE + CMRM test accuracy {:.3}", cmrm_run.test.accuracy);
    if let Some(last) = cmrm_run.records.last() {
        println!(
            "final batch threshold {:.3}, filtered-noise ratio {:?}",
            last.tau.unwrap_or(f64::NAN),
            last.filter_noise_ratio
        );
    }
    Ok((ce.test.accuracy, cmrm_run.test.accuracy))
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
