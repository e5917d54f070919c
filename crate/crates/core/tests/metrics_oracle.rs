use coseg::metrics::{majority_baseline, ConfusionMatrix};
use coseg::rng::SplitMix64;
use proptest::prelude::*;

/// Per-category tp/fp/fn counted straight from the maps.
fn direct_counts(pred: &[u8], label: &[u8], n: usize, ignore: Option<usize>) -> Vec<(u64, u64, u64)> {
    (0..n)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &t) in pred.iter().zip(label) {
                if Some(t as usize) == ignore {
                    continue;
                }
                let (p, t) = (p as usize, t as usize);
                if p == c && t == c {
                    tp += 1;
                } else if p == c {
                    fp += 1;
                } else if t == c {
                    fn_ += 1;
                }
            }
            (tp, fp, fn_)
        })
        .collect()
}

fn random_map(len: usize, n: usize, rng: &mut SplitMix64) -> Vec<u8> {
    (0..len).map(|_| rng.range(0, n - 1) as u8).collect()
}

#[test]
fn hundred_random_pairs_match_direct_counting() {
    let mut rng = SplitMix64::new(2024);
    for _ in 0..100 {
        let n = rng.range(2, 6);
        let label = random_map(32 * 32, n, &mut rng);
        // bias predictions toward the truth so scores are not all near chance
        let pred: Vec<u8> = label
            .iter()
            .map(|&t| {
                if rng.next_f64() < 0.6 {
                    t
                } else {
                    rng.range(0, n - 1) as u8
                }
            })
            .collect();
        let ignore = if rng.next_f64() < 0.3 {
            Some(rng.range(0, n - 1))
        } else {
            None
        };
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(&pred, &label, ignore).unwrap();
        let m = cm.summarize().unwrap();

        let counts = direct_counts(&pred, &label, n, ignore);
        let scored = label.iter().filter(|&&t| Some(t as usize) != ignore).count() as u64;
        assert_eq!(cm.total(), scored);
        let correct = pred
            .iter()
            .zip(&label)
            .filter(|(p, t)| p == t && Some(**t as usize) != ignore)
            .count() as u64;
        assert!((m.oa - correct as f64 / scored as f64).abs() <= 1e-12);

        let (mut iou_sum, mut f1_sum, mut seen) = (0.0, 0.0, 0);
        for (c, &(tp, fp, fn_)) in counts.iter().enumerate() {
            assert_eq!(cm.get(c, c), tp);
            let col: u64 = (0..n).map(|i| cm.get(i, c)).sum();
            let row: u64 = (0..n).map(|j| cm.get(c, j)).sum();
            assert_eq!(col - tp, fp);
            assert_eq!(row - tp, fn_);
            if tp + fp + fn_ == 0 {
                assert_eq!(m.per_class[c].iou, None);
                continue;
            }
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            assert!((m.per_class[c].iou.unwrap() - iou).abs() <= 1e-12);
            assert!((m.per_class[c].f1.unwrap() - f1).abs() <= 1e-12);
            iou_sum += iou;
            f1_sum += f1;
            seen += 1;
        }
        assert!((m.miou - iou_sum / seen as f64).abs() <= 1e-12);
        assert!((m.mf1 - f1_sum / seen as f64).abs() <= 1e-12);
    }
}

#[test]
fn worked_matrix_values() {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
    let m = cm.summarize().unwrap();
    assert!((m.miou - 0.6).abs() <= 1e-12);
    assert!((m.oa - 0.75).abs() <= 1e-12);
    assert!((m.mf1 - 0.75).abs() <= 1e-12);
}

#[test]
fn accumulate_edge_cases() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1, 2], &[0, 1, 2], None).unwrap();
    assert_eq!(cm.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
    let before = cm.clone();
    cm.accumulate(&[2, 2], &[1, 1], Some(1)).unwrap();
    assert_eq!(cm, before);
    assert!(cm.accumulate(&[3, 0], &[0, 0], None).is_err());
    assert!(cm.accumulate(&[0, 0], &[0, 5], None).is_err());
    assert!(cm.accumulate(&[0], &[0, 0], None).is_err());
    assert_eq!(cm, before);
    assert!(ConfusionMatrix::new(2).summarize().is_err());
    assert!(cm.merge(&ConfusionMatrix::new(2)).is_err());
}

#[test]
fn majority_prediction_baseline() {
    let m = majority_baseline(&[10, 30, 60]).unwrap();
    assert!((m.oa - 0.6).abs() <= 1e-12);
    assert!((m.miou - 0.6 / 3.0).abs() <= 1e-12);
}

#[test]
fn serializes_absent_categories_as_null() {
    let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 0, 0, 1, 0, 1]).unwrap();
    let json = serde_json::to_value(cm.summarize().unwrap()).unwrap();
    assert!(json["per_class"][1]["iou"].is_null());
    assert!(json["per_class"][0]["iou"].is_number());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shards_merge_like_concatenation(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..300), cut in 0.0f64..1.0,
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let label: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let k = (pairs.len() as f64 * cut) as usize;
        let mut whole = ConfusionMatrix::new(4);
        whole.accumulate(&pred, &label, Some(3)).unwrap();
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&pred[..k], &label[..k], Some(3)).unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&pred[k..], &label[k..], Some(3)).unwrap();
        let mut ba = b.clone();
        ba.merge(&a).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(&a, &whole);
        prop_assert_eq!(&ba, &whole);
    }

    #[test]
    fn iou_never_exceeds_f1(counts in prop::collection::vec(0u64..50, 9)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let m = ConfusionMatrix::from_counts(3, counts).unwrap().summarize().unwrap();
        for c in m.per_class {
            if let (Some(iou), Some(f1)) = (c.iou, c.f1) {
                prop_assert!((0.0..=1.0).contains(&iou) && iou <= f1 && f1 <= 1.0);
                prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn accuracy_ignores_category_relabeling(
        pairs in prop::collection::vec((0u8..3, 0u8..3), 1..200), perm_seed in any::<u64>(),
    ) {
        let mut perm = [0u8, 1, 2];
        SplitMix64::new(perm_seed).shuffle(&mut perm);
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let label: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let pred2: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let label2: Vec<u8> = label.iter().map(|&v| perm[v as usize]).collect();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&pred, &label, None).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&pred2, &label2, None).unwrap();
        let (ma, mb) = (a.summarize().unwrap(), b.summarize().unwrap());
        prop_assert_eq!(ma.oa, mb.oa);
        prop_assert!((ma.miou - mb.miou).abs() <= 1e-12);
    }
}
