mod common;

use proptest::prelude::*;

use common::*;
use tadnet::eval::{average_precision, evaluate};
use tadnet::geometry::{decode, encode, iou_1d, match_anchors, AnchorSpec, Segment};
use tadnet::infer::nms;
use tadnet::parallel::Exec;

fn segment() -> impl Strategy<Value = Segment> {
    (-2.0f64..3.0, 1e-3f64..2.0).prop_map(|(c, w)| Segment::new(c, w).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in segment(), b in segment()) {
        let x = iou_1d(&a, &b);
        prop_assert_eq!(x, iou_1d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou_1d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_inverts_encode(a in segment(), g in segment(), alpha1 in 0.05f64..1.0, alpha2 in 0.05f64..1.0) {
        let spec = AnchorSpec { alpha1, alpha2, ..AnchorSpec::default() };
        let anchor = tadnet::geometry::Anchor { layer: 0, cell: 0, ratio: 1.0, center: a.center, width: a.width };
        let (dc, dw) = encode(&anchor, &g, &spec).unwrap();
        let back = decode(&anchor, dc, dw, &spec);
        prop_assert!((back.center - g.center).abs() <= 1e-12 * (1.0 + g.center.abs()));
        prop_assert!((back.width - g.width).abs() <= 1e-12 * (1.0 + g.width));
    }

    #[test]
    fn iou_matches_cell_counting(s1 in 0i64..63, l1 in 1i64..64, s2 in 0i64..63, l2 in 1i64..64) {
        let a = Cells { start: s1, end: (s1 + l1).min(GRID) };
        let b = Cells { start: s2, end: (s2 + l2).min(GRID) };
        prop_assert_eq!(iou_1d(&a.segment(), &b.segment()), brute_iou(a, b));
    }
}

#[test]
fn matching_agrees_with_brute_force() {
    let mut r = rng(11);
    for _ in 0..500 {
        let anchors = grid_anchors(&mut r, 12);
        let n_gt = rand::Rng::random_range(&mut r, 0..5);
        let gts: Vec<(Cells, usize)> = (0..n_gt)
            .map(|_| (Cells::random(&mut r), rand::Rng::random_range(&mut r, 1..4)))
            .collect();
        let threshold = [0.3, 0.5, 0.7][rand::Rng::random_range(&mut r, 0..3)];
        let a: Vec<_> = anchors.iter().map(|(a, _)| *a).collect();
        let g: Vec<_> = gts.iter().map(|&(c, k)| (c.segment(), k)).collect();
        let got = match_anchors(&a, &g, threshold);
        let cells: Vec<Cells> = anchors.iter().map(|(_, c)| *c).collect();
        let want = brute_match(&cells, &gts, threshold);
        for (m, w) in got.iter().zip(&want) {
            assert_eq!((m.label, m.gt_index), *w);
        }
    }
}

#[test]
fn nms_agrees_with_brute_force() {
    let mut r = rng(12);
    for _ in 0..500 {
        let n = rand::Rng::random_range(&mut r, 0..15);
        let dets: Vec<CellDetection> = (0..n).map(|_| CellDetection::random(&mut r, 2, 2)).collect();
        let threshold = [0.0, 0.2, 0.5, 0.9][rand::Rng::random_range(&mut r, 0..4)];
        let plain: Vec<_> = dets.iter().map(CellDetection::detection).collect();
        let want: Vec<_> = brute_nms(&dets, threshold).into_iter().map(|i| plain[i].clone()).collect();
        assert_eq!(nms(&plain, threshold), want);
    }
}

#[test]
fn average_precision_agrees_with_brute_force() {
    let mut r = rng(13);
    for _ in 0..300 {
        let n = rand::Rng::random_range(&mut r, 1..12);
        let (dets, truths) = eval_instance(&mut r, n);
        let d: Vec<_> = dets.iter().map(CellDetection::detection).collect();
        let g: Vec<_> = truths.iter().map(CellTruth::annotation).collect();
        for class in 1..=3 {
            for t in TABLE_THRESHOLDS {
                let got = average_precision(&d, &g, class, t);
                let want = brute_ap(&dets, &truths, class, t);
                match (got, want) {
                    (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
        let res = evaluate(&d, &g, &TABLE_THRESHOLDS, Exec::default());
        assert_eq!(res.thresholds, TABLE_THRESHOLDS);
    }
}
