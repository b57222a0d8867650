use bendlens::eval::psnr;
use bendlens::fiber::{apply_normalization, forward_measure, range_normalize, MatrixView};
use bendlens::tensor::softmax_in_place;
use proptest::prelude::*;

proptest! {
    #[test]
    fn normalized_channels_span_unit_interval(ax in prop::collection::vec(0.0f64..50.0, 2..40), s in 1.0f64..20.0) {
        let m = ax.len();
        let n = apply_normalization(&ax, s, &vec![2.0; m], &vec![0.5; m]).unwrap();
        prop_assert_eq!(n.y.len(), 2 * m);
        prop_assert!(n.y.iter().all(|v| (0.0..=1.0).contains(v)));
        if !n.degenerate {
            for ch in n.y.chunks(m) {
                prop_assert_eq!(ch.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
                prop_assert_eq!(ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
            }
        }
    }

    #[test]
    fn range_normalize_ignores_affine_changes(v in prop::collection::vec(-5.0f64..5.0, 2..30), a in 0.5f64..4.0, b in -3.0f64..3.0) {
        let shifted: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        match (range_normalize(&v), range_normalize(&shifted)) {
            (Some(p), Some(q)) => for (x, y) in p.iter().zip(&q) { prop_assert!((x - y).abs() < 1e-9) },
            (None, None) => {}
            _ => prop_assert!(false, "degeneracy changed under an affine map"),
        }
    }

    #[test]
    fn projection_is_nonnegative_for_nonnegative_inputs(
        a in prop::collection::vec(0.0f64..3.0, 12),
        x in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let view = MatrixView::new(3, 4, &a).unwrap();
        let m = forward_measure(view, &x, 0.0).unwrap();
        prop_assert!(m.ax.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn psnr_is_symmetric(x in prop::collection::vec(0.0f64..1.0, 1..30), d in 0.01f64..0.5) {
        let y: Vec<f64> = x.iter().map(|v| v + d).collect();
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn softmax_is_a_distribution(mut v in prop::collection::vec(-300.0f64..300.0, 1..12)) {
        softmax_in_place(&mut v);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(v.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
}
