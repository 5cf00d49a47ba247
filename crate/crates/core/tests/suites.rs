use graphmix_core::verify::{run_suite, Suite};

fn check(suite: Suite) {
    let start = std::time::Instant::now();
    let report = run_suite(suite, 20_240_601).unwrap();
    println!("{report} ({:.1?})", start.elapsed());
    assert!(report.passed, "{report}");
}

#[test]
fn grad_suite_passes() {
    check(Suite::Grad);
}

#[test]
fn monotone_suite_passes() {
    check(Suite::Monotone);
}

#[test]
fn igm_suite_passes() {
    check(Suite::Igm);
}

#[test]
fn masks_suite_passes() {
    check(Suite::Masks);
}

#[test]
fn vdn_suite_passes() {
    check(Suite::Vdn);
}
