//! Every example in examples/ must run to completion.

mod quickstart_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/quickstart.rs"
    ));
}

mod noise_injection_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/noise_injection.rs"
    ));
}

mod conformal_sets_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/conformal_sets.rs"
    ));
}

mod binary_thresholds_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/binary_thresholds.rs"
    ));
}

mod quantile_concentration_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/quantile_concentration.rs"
    ));
}

mod gradient_check_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/gradient_check.rs"
    ));
}

mod margin_diagnostics_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/margin_diagnostics.rs"
    ));
}

mod sweep_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/sweep.rs"));
}

#[test]
fn quickstart_runs() {
    let (ce, with_cmrm) = quickstart_example::run_example().expect("quickstart should run");
    assert!(ce > 0.5 && with_cmrm > 0.5);
}

#[test]
fn noise_injection_runs() {
    let counts = noise_injection_example::run_example().expect("noise example should run");
    assert!(counts.iter().all(|(_, n)| *n == 200));
}

#[test]
fn conformal_sets_runs() {
    let (cov, size) = conformal_sets_example::run_example().expect("conformal example should run");
    assert!(cov > 0.8);
    assert!((1.0..=3.0).contains(&size));
}

#[test]
fn binary_thresholds_runs() {
    let path = binary_thresholds_example::run_example().expect("binary example should run");
    assert_eq!(path.len(), 10);
}

#[test]
fn quantile_concentration_runs() {
    let exponent =
        quantile_concentration_example::run_example().expect("quantile example should run");
    assert!(exponent < 0.0);
}

#[test]
fn gradient_check_runs() {
    let worst = gradient_check_example::run_example().expect("gradient example should run");
    assert!(worst <= cmrm::verify::GRAD_CHECK_TOLERANCE);
}

#[test]
fn margin_diagnostics_runs() {
    let (clean, noisy) =
        margin_diagnostics_example::run_example().expect("margin example should run");
    assert!(clean > noisy);
}

#[test]
fn sweep_runs() {
    assert_eq!(
        sweep_example::run_example().expect("sweep example should run"),
        8
    );
}
