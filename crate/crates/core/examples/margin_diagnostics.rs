// Margin distribution of clean versus corrupted training samples after a
// CMRM run, and the density of the margins at the conformal threshold.

use cmrm::config::ExperimentConfig;
use cmrm::metrics::margin_histogram;
use cmrm::trainer::train_margins;
use cmrm::verify::density_at_threshold;

const CONFIG: &str = r#"
seed = 3

[data.synth]
num_classes = 3
dim = 4
per_class_count = 200
class_separation = 3.0

[noise]
kind = "circular"
rate = 0.2

[model]
architecture = "two_layer_mlp"
hidden = 16

[train]
epochs = 15
batch_size = 64

[cmrm]
kind = "multiclass"
alpha = 0.15
lambda = 0.1
"#;

pub fn run_example() -> cmrm::Result<(f64, f64)> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let run = cmrm::cli::run_experiment(&cfg)?;
    let (margins, mask) = train_margins(&run.params, &run.dataset)?;

    let mean = |noisy: bool| {
        let v: Vec<f64> = margins
            .iter()
            .zip(&mask.flipped)
            .filter(|(_, &f)| f == noisy)
            .map(|(m, _)| *m)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (clean_mean, noisy_mean) = (mean(false), mean(true));
    println!("mean margin: clean {clean_mean:.3}, corrupted {noisy_mean:.3}");

    let hist = margin_histogram(&margins, &mask, 10)?;
    for (i, (c, n)) in hist.clean_counts.iter().zip(&hist.noisy_counts).enumerate() {
        println!(
            "[{:+.2}, {:+.2}) clean {c:>4} noisy {n:>4}",
            hist.bin_edges[i],
            hist.bin_edges[i + 1]
        );
    }
    let (tau, density) = density_at_threshold(&margins, 0.15)?;
    println!("tau_hat {tau:.3}, KDE density there {density:.3}");
    println!(
        "final filtered-noise ratio {:?}",
        run.records.last().and_then(|r| r.filter_noise_ratio)
    );
    Ok((clean_mean, noisy_mean))
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
