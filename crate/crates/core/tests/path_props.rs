//! Property tests for the path-space primitives.

use proptest::prelude::*;

use pdp_core::path::CadlagPath;

/// Random piecewise-linear path with up to two jumps on [0, 2].
fn arb_path() -> impl Strategy<Value = CadlagPath<f64>> {
    let seg = prop::collection::vec(-5.0f64..5.0, 2..5);
    let jumps = prop::collection::vec((0.05f64..1.9, -5.0f64..5.0), 0..3);
    (seg, jumps).prop_map(|(values, mut jumps)| {
        let n = values.len();
        let nodes: Vec<(f64, Vec<f64>)> = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| (2.0 * i as f64 / (n - 1) as f64, vec![v]))
            .collect();
        let mut path = CadlagPath::from_nodes(&nodes).unwrap();
        jumps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (t, e) in jumps {
            path = path.concat(t, &[e]).unwrap();
        }
        path
    })
}

proptest! {
    #[test]
    fn concat_overwrites(x in arb_path(), s in 0.0f64..1.8, e1 in -4.0f64..4.0, e2 in -4.0f64..4.0) {
        let twice = x.concat(s, &[e1]).unwrap().concat(s, &[e2]).unwrap();
        let once = x.concat(s, &[e2]).unwrap();
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn concat_is_frozen_at_mark(x in arb_path(), s in 0.0f64..1.8, e in -4.0f64..4.0) {
        let c = x.concat(s, &[e]).unwrap();
        for k in 0..5 {
            let t = s + k as f64;
            prop_assert_eq!(c.eval(t).unwrap(), vec![e]);
        }
    }

    #[test]
    fn stop_is_idempotent_and_non_anticipating(x in arb_path(), t in 0.0f64..1.9) {
        let st = x.stop(t).unwrap();
        prop_assert_eq!(st.stop(t).unwrap(), st.clone());
        // Values before t agree with the original path (up to one rounding
        // of the interpolated node inserted at t).
        for k in 0..8 {
            let r = t * k as f64 / 8.0;
            let (a, b) = (st.eval(r).unwrap()[0], x.eval(r).unwrap()[0]);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // Frozen at x(t) afterwards.
        prop_assert_eq!(st.eval(t + 1.0).unwrap(), x.eval(t).unwrap());
    }

    #[test]
    fn metric_is_a_pseudo_metric(
        x in arb_path(), y in arb_path(), z in arb_path(),
        t in 0.0f64..1.9, s in 0.0f64..1.9, r in 0.0f64..1.9,
    ) {
        let dxy = CadlagPath::pseudo_metric(t, &x, s, &y).unwrap();
        let dyx = CadlagPath::pseudo_metric(s, &y, t, &x).unwrap();
        prop_assert!((dxy - dyx).abs() <= 1e-12);
        prop_assert!(dxy >= 0.0);
        // Triangle inequality through (r, z).
        let dxz = CadlagPath::pseudo_metric(t, &x, r, &z).unwrap();
        let dzy = CadlagPath::pseudo_metric(r, &z, s, &y).unwrap();
        prop_assert!(dxy <= dxz + dzy + 1e-12);
        // Identity on the stopped path.
        let dstop = CadlagPath::pseudo_metric(t, &x, t, &x.stop(t).unwrap()).unwrap();
        prop_assert_eq!(dstop, 0.0);
    }

    #[test]
    fn sup_dist_monotone_in_horizon(x in arb_path(), y in arb_path(), s in 0.1f64..1.9) {
        let d_early = x.sup_dist(&y, s * 0.5).unwrap();
        let d_late = x.sup_dist(&y, s).unwrap();
        prop_assert!(d_early <= d_late + 1e-15);
    }

    #[test]
    fn csv_round_trip(x in arb_path()) {
        let text = x.to_csv();
        let back: CadlagPath<f64> = CadlagPath::from_csv(&text).unwrap();
        prop_assert_eq!(back.to_csv(), text);
    }
}
