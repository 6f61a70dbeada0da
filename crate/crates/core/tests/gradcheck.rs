use dewarp_core::checks::{self, CheckOutcome};

fn report(outcomes: &[CheckOutcome]) {
    for o in outcomes {
        println!(
            "{:<24} rel_err {:.3e} (tol {:.0e}, {} probes, {:.2}s) worst input {} idx {} a {:e} n {:e} flips {}",
            o.name, o.report.max_rel_err, o.tolerance, o.report.probes, o.seconds, o.report.worst_input, o.report.worst_index, o.report.analytic, o.report.numeric, o.report.branch_flips
        );
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| &o.name).collect();
    assert!(failed.is_empty(), "gradient checks failed: {failed:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    report(&checks::op_suite().unwrap());
}

#[test]
fn fusion_and_toy_model_match_finite_differences() {
    report(&checks::model_suite().unwrap());
}
