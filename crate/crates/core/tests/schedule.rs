use cmc_core::train::lr_schedule;
use std::f64::consts::PI;

#[test]
fn warmup_reaches_base_exactly() {
    assert_eq!(lr_schedule(9, 0.1, 10, 500).unwrap(), 0.1);
    assert_eq!(lr_schedule(2, 0.1, 3, 30).unwrap(), 0.1);
}

#[test]
fn spot_values() {
    let (base, w, e) = (0.1, 10usize, 500usize);
    for (epoch, want) in [(0, 0.01), (4, 0.05), (10, 0.1), (255, 0.05)] {
        let got = lr_schedule(epoch, base, w, e).unwrap();
        assert!((got - want).abs() < 1e-9, "epoch {epoch}: {got}");
    }
    let last = lr_schedule(499, base, w, e).unwrap();
    let want = 0.5 * base * (1.0 + (PI * 489.0 / 490.0).cos());
    assert!((last - want).abs() < 1e-9);
}

#[test]
fn non_increasing_after_warmup() {
    for (w, e) in [(10, 500), (3, 30), (1, 25), (0, 5)] {
        let mut prev = f64::INFINITY;
        for epoch in w..e {
            let lr = lr_schedule(epoch, 0.1, w, e).unwrap();
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(lr_schedule(0, 0.1, 10, 10).is_err());
    assert!(lr_schedule(10, 0.1, 2, 10).is_err());
}
