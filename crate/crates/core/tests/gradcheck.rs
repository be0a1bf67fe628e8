use ihq::gradcheck::{cases, run_all, Precision};

#[test]
fn every_case_passes_in_both_precisions() {
    for precision in [Precision::F32, Precision::F64] {
        for r in run_all(precision).unwrap() {
            println!("{:>24} {} err={:.3e} tol={:.0e}", r.name, r.precision, r.max_rel_error, r.tolerance);
            assert!(r.passed, "{} failed at {}: {:.3e}", r.name, r.precision, r.max_rel_error);
        }
    }
}

#[test]
fn other_seeds_also_pass() {
    for seed in [1u64, 2] {
        for case in cases(seed, 2) {
            let r = case.check(Precision::F64).unwrap();
            assert!(r.passed, "seed {seed}: {} err {:.3e}", r.name, r.max_rel_error);
        }
    }
}
