use swt_tensor::suite::run_op_suite;

#[test]
fn every_op_passes_finite_differences() {
    for seed in [0, 1] {
        let reports = run_op_suite(seed, 1e-4).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:#?}");
        let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
