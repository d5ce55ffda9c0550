// A small lambda x alpha grid over two seeds, selected by validation
// accuracy. Runs execute on two worker threads; row order is fixed.

use cmrm::cli::{run_sweep, write_sweep_csv};
use cmrm::config::ExperimentConfig;

const CONFIG: &str = r#"
[data.synth]
num_classes = 3
dim = 4
per_class_count = 100
class_separation = 2.0

[noise]
kind = "symmetric"
rate = 0.3

[model]
architecture = "linear"

[train]
epochs = 8
batch_size = 32

[cmrm]
kind = "multiclass"

[output]
margins = false

[sweep]
lambdas = [0.05, 0.25]
alphas = [0.05, 0.25]
seeds = [0, 1]
"#;

pub fn run_example() -> cmrm::Result<usize> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let summary = run_sweep(&cfg, 2, None)?;
    let mut out = Vec::new();
    write_sweep_csv(&summary, &mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(summary.rows.len())
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
