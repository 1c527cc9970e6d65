use tcl_core::gradcheck::{check_all, check_loss, LossKind};

#[test]
fn every_loss_matches_central_differences_above_rounding() {
    let reports = check_all(20, 0, None).unwrap();
    assert_eq!(reports.len(), LossKind::ALL.len());
    for r in &reports {
        println!("{r}");
    }
    for r in &reports {
        assert!(r.coordinates > 20, "{} compared only {} coordinates", r.loss.name(), r.coordinates);
        assert!(r.passed_above_noise(), "{r}");
    }
}

#[test]
fn single_term_losses_meet_the_plain_relative_bound() {
    for kind in [LossKind::InfoNce, LossKind::Src, LossKind::Tar] {
        let r = check_loss(kind, 20, 0, false).unwrap();
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn other_seeds_pass_too() {
    for seed in 1..4 {
        for r in check_all(20, seed, None).unwrap() {
            assert!(r.passed_above_noise(), "seed {seed}: {r}");
        }
    }
}

#[test]
fn a_flipped_gradient_is_reported_for_that_loss_only() {
    let reports = check_all(20, 0, Some(LossKind::St)).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed_above_noise()).map(|r| r.loss.name()).collect();
    assert_eq!(failed, vec!["loss_st"]);
    let flipped = check_loss(LossKind::Icdl, 3, 9, true).unwrap();
    assert!(!flipped.passed() && !flipped.passed_above_noise());
}
