use deepcl_wasm_demo::{loss_comparison, make_scene, weight_curve};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn weight_curve_matches_sigmoid() {
    let tau = 0.2;
    let flat = weight_curve(tau, 5).unwrap();
    assert_eq!(flat.len(), 15);
    for row in flat.chunks(3) {
        let (d, unchanged, changed) = (row[0], row[1], row[2]);
        assert!((changed - sigmoid(d / tau)).abs() < 1e-12);
        assert!((unchanged + changed - 1.0).abs() < 1e-12);
    }
    assert_eq!(flat[0], -1.0);
    assert_eq!(flat[12], 1.0);
    assert!(weight_curve(0.0, 5).is_err());
}

#[test]
fn scene_bytes_are_rgba() {
    let s = make_scene(3, 32, 1.0, 1.0, 0, 0.0).unwrap();
    assert_eq!(s.size(), 32);
    for bytes in [s.t1(), s.t2(), s.mask()] {
        assert_eq!(bytes.len(), 32 * 32 * 4);
        assert!(bytes.chunks(4).all(|p| p[3] == 255));
    }
    let white = s.mask().chunks(4).filter(|p| p[0] == 255).count();
    assert!((white as f64 / 1024.0 - s.changed_fraction()).abs() < 1e-12);
    assert!(s.changed_fraction() > 0.0);
    assert_eq!((s.shift_x(), s.shift_y()), (0, 0));

    let quiet = make_scene(3, 32, 0.0, 1.0, 0, 0.0).unwrap();
    assert_eq!(quiet.changed_fraction(), 0.0);
    assert_eq!(quiet.t1(), quiet.t2());
    assert!(make_scene(3, 4, 0.3, 1.0, 0, 0.0).is_err());
}

#[test]
fn loss_comparison_matches_closed_forms() {
    let (tau, margin) = (0.5, 1.0);
    for changed in [false, true] {
        let flat = loss_comparison(changed, tau, margin, 9).unwrap();
        assert_eq!(flat.len(), 45);
        for row in flat.chunks(5) {
            let c = row[0];
            let s = sigmoid(c / tau);
            let (hsac, hsac_grad) = if changed {
                (-(1.0 - s).ln(), s / tau)
            } else {
                (-s.ln(), (1.0 - s) / tau)
            };
            assert!((row[1] - hsac).abs() < 1e-12, "{row:?}");
            assert!((row[2] - hsac_grad).abs() < 1e-12, "{row:?}");
            let d = 1.0 - c;
            let con = if changed { (margin - d).max(0.0) } else { d };
            assert!((row[3] - con).abs() < 1e-12, "{row:?}");
        }
    }
}

#[test]
fn contrastive_gradient_ignores_hardness() {
    // unchanged pairs: the contrastive gradient is the same everywhere while
    // the hard sample-aware one grows as the pair gets more dissimilar
    let flat = loss_comparison(false, 0.2, 1.0, 3).unwrap();
    let rows: Vec<&[f64]> = flat.chunks(5).collect();
    assert_eq!(rows[0][4], rows[2][4]);
    assert!(rows[0][2] > 10.0 * rows[2][2]);
}
