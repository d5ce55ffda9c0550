use cmrm::verify::{dkw_check, quantile_concentration, Distribution};

pub fn run_example() -> cmrm::Result<f64> {
    let report = quantile_concentration(Distribution::StdNormal, 0.15, &[32, 128, 512], 400, 9)?;
    for ((s, med), p95) in report
        .batch_sizes
        .iter()
        .zip(&report.median_error)
        .zip(&report.p95_error)
    {
        println!("s = {s:>4}: median |tau_hat - tau| {med:.4}, p95 {p95:.4}");
    }
    println!("fitted decay exponent {:.3}", report.decay_exponent);

    let dkw = dkw_check(Distribution::Beta { a: 2.0, b: 5.0 }, &[100], 400, 0.05, 9)?;
    println!(
        "DKW exceedance {:.4} (tolerance {:.4})",
        dkw.exceedance[0], dkw.tolerance
    );
    Ok(report.decay_exponent)
}

#[allow(dead_code)]
fn main() -> cmrm::Result<()> {
    run_example().map(|_| ())
}
