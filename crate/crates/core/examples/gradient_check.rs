// Backpropagated gradients against central differences.

use cmrm::cmrm::CmrmConfig;
use cmrm::losses::BaseLossSpec;
use cmrm::rng::{substream, Stream};
use cmrm::verify::{grad_check, Objective, GRAD_CHECK_STEP};
use cmrm::{Architecture, Matrix, ModelParams};

pub fn run_example() -> cmrm::Result<f64> {
    let mut rng = substream(5, Stream::Verify);
    let params = ModelParams::init(Architecture::TwoLayerMlp { hidden: 6 }, 3, 4, &mut rng)?;
    let x = Matrix::from_rows(&[
        [0.3, -1.2, 0.8],
        [1.1, 0.4, -0.5],
        [-0.7, 0.9, 1.4],
        [0.2, 0.1, -1.0],
        [-1.3, -0.6, 0.5],
    ])?;
    let y = [0, 1, 2, 3, 1];

    let objectives = [
        Objective::Base(BaseLossSpec::Ce),
        Objective::Base(BaseLossSpec::Focal { gamma: 2.0 }),
        Objective::Base(BaseLossSpec::Gce { q: 0.7 }),
        Objective::WithCmrm(
            BaseLossSpec::Ce,
            CmrmConfig {
                lambda: 0.5,
                ..Default::default()
            },
        ),
    ];
    let mut worst: f64 = 0.0;
    for o in &objectives {
        let r = grad_check(&params, &x, &y, o, GRAD_CHECK_STEP)?;
        println!(
            "{o:?}: {} params, max relative error {:.2e}",
            r.num_params, r.max_relative_error
        );
        worst = worst.max(r.max_relative_error);
    }
    Ok(worst)
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
