mod common;

use common::*;
use localtrans::homography::{dlt, rect_corners, CornerOffsets, Homography};
use proptest::prelude::*;

#[test]
fn dlt_recovers_thousand_random_quads() {
    let e = dlt_round_trips(1000, 11);
    assert!(e <= 1e-8, "worst corner residual {e:e}");
}

#[test]
fn group_laws_hold() {
    let (assoc, inv, ident) = group_laws(200, 12);
    assert!(assoc <= 1e-9, "associativity {assoc:e}");
    assert!(inv <= 1e-10, "inverse {inv:e}");
    assert_eq!(ident, 0.0);
}

#[test]
fn integer_translations_compose_exactly() {
    assert!(translation_warps_compose_exactly(13));
}

proptest! {
    #[test]
    fn offsets_round_trip_through_matrix(o in proptest::array::uniform8(-20.0f64..20.0)) {
        let base = rect_corners(64, 64);
        let co = CornerOffsets { base, offsets: std::array::from_fn(|i| [o[2 * i], o[2 * i + 1]]) };
        prop_assume!(co.is_convex());
        let h = co.to_homography().unwrap();
        let back = CornerOffsets::from_homography(&h, base).unwrap();
        for i in 0..4 {
            prop_assert!((back.offsets[i][0] - co.offsets[i][0]).abs() < 1e-8);
            prop_assert!((back.offsets[i][1] - co.offsets[i][1]).abs() < 1e-8);
        }
    }

    #[test]
    fn translation_dlt_is_translation(dx in -30.0f64..30.0, dy in -30.0f64..30.0) {
        let src = rect_corners(32, 32);
        let dst = src.map(|p| [p[0] + dx, p[1] + dy]);
        let h = dlt(&src, &dst).unwrap();
        let t = Homography::translation(dx, dy);
        for (a, b) in h.matrix().iter().flatten().zip(t.matrix().iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
