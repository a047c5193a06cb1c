use proptest::prelude::*;
use refmatch_core::{iou, soft_iou, Grid, RleMask, SoftMask};

fn grid() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(0u8..=1, h * w))
    })
}

fn pair() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<u8>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(0u8..=1, h * w),
            prop::collection::vec(0u8..=1, h * w),
        )
    })
}

fn rle(h: usize, w: usize, cells: Vec<u8>) -> RleMask {
    RleMask::encode(&Grid::from_column_major(h, w, cells).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rle_round_trip((h, w, cells) in grid()) {
        let g = Grid::from_column_major(h, w, cells).unwrap();
        let m = RleMask::encode(&g).unwrap();
        prop_assert_eq!(m.counts().iter().map(|&c| c as usize).sum::<usize>(), h * w);
        prop_assert_eq!(m.area() as usize, g.count_ones());
        prop_assert_eq!(m.decode(), g);
        let again = RleMask::new(h, w, m.counts().to_vec()).unwrap();
        prop_assert_eq!(again, m);
    }

    #[test]
    fn iou_is_symmetric_and_counts_pixels((h, w, a, b) in pair()) {
        let inter = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x == 1 || **y == 1).count();
        let (ma, mb) = (rle(h, w, a), rle(h, w, b));
        prop_assert_eq!(ma.intersection_area(&mb).unwrap() as usize, inter);
        prop_assert_eq!(ma.union(&mb).unwrap().area() as usize, union);
        let ab = iou(&ma, &mb).unwrap();
        prop_assert_eq!(ab, iou(&mb, &ma).unwrap());
        let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(ab, expected);
    }

    #[test]
    fn soft_iou_agrees_with_iou_on_binary((h, w, a, b) in pair()) {
        let (ma, mb) = (rle(h, w, a), rle(h, w, b));
        let soft = SoftMask::from_rle(&ma);
        prop_assert!((soft_iou(&soft, &mb).unwrap() - iou(&ma, &mb).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn malformed_counts_are_diagnosed() {
    for (h, w, counts) in [
        (2, 2, vec![1, 2]),
        (2, 2, vec![1, 2, 2]),
        (2, 2, vec![0, 0, 4]),
        (2, 2, vec![1, 0, 3]),
    ] {
        let err = RleMask::new(h, w, counts.clone()).unwrap_err();
        assert_eq!(err.kind(), "decode", "{counts:?}");
        assert!(!err.to_string().is_empty());
    }
    let err = serde_json::from_str::<RleMask>(r#"{"size":[3,3],"counts":[2,2]}"#).unwrap_err();
    assert!(err.to_string().contains("sum"), "{err}");
}
