use proptest::prelude::*;

use ggnet::bd::boundary_gt;
use ggnet::checkpoint::{decode, encode, Payload, Record};
use ggnet::data::{apply_augmentation, kfold_split, Augmentation, SegSample};
use ggnet::metrics::{hausdorff, overlap_metrics};
use ggnet::tensor::Tensor;
use ggnet::BinaryMask;

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        let m = move || prop::collection::vec(any::<bool>(), h * w).prop_map(move |b| BinaryMask::new(h, w, b).unwrap());
        (m(), m())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn folds_are_balanced(n in 1usize..200, k in 1usize..12) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, 3).unwrap();
        let mut sizes = vec![0usize; k];
        for f in folds {
            sizes[f] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn overlap_ratios_are_bounded_and_consistent((p, g) in mask_pair(12)) {
        let m = overlap_metrics(&p, &g).unwrap();
        for v in [m.dice, m.jaccard, m.accuracy, m.recall, m.precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.jaccard <= m.dice);
        prop_assert!((m.dice - 2.0 * m.jaccard / (1.0 + m.jaccard)).abs() < 1e-12);
        let swapped = overlap_metrics(&g, &p).unwrap();
        prop_assert_eq!(m.dice, swapped.dice);
        prop_assert_eq!(m.recall, swapped.precision);
    }

    #[test]
    fn hausdorff_is_symmetric_and_zero_on_self((p, g) in mask_pair(12)) {
        match (hausdorff(&p, &g), hausdorff(&g, &p)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => prop_assert!(p.is_empty() || g.is_empty()),
            _ => prop_assert!(false, "definedness differs by argument order"),
        }
        if !p.is_empty() {
            prop_assert_eq!(hausdorff(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn boundary_is_inside_mask_and_idempotent(m in mask_strategy(12)) {
        let b = boundary_gt(&m);
        for (r, c) in b.points() {
            prop_assert!(m.get(r, c));
        }
        prop_assert_eq!(b.is_empty(), m.is_empty());
        // A one-pixel-thick set is its own boundary.
        prop_assert_eq!(boundary_gt(&b), b);
    }

    #[test]
    fn augmentation_moves_image_and_mask_together(m in mask_strategy(10), flip in any::<bool>(), turns in 0u8..4) {
        let (h, w) = m.dims();
        let image = Tensor::new(&[1, h, w], m.to_values()).unwrap();
        let s = SegSample::new("p", image, m.clone());
        let out = apply_augmentation(&s, Augmentation { flip, quarter_turns: turns });
        prop_assert_eq!(out.image.data(), &out.mask.to_values()[..]);
        prop_assert_eq!(out.mask.count(), m.count());
        prop_assert_eq!(out.boundary, boundary_gt(&out.mask));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..80.0, seed in any::<u64>()) {
        let mut x = seed | 1;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                ((x >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
            })
            .collect();
        let s = Tensor::new(&[rows, cols], data).unwrap().softmax(1).unwrap();
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn checkpoint_records_round_trip(
        values in prop::collection::vec(any::<f64>(), 0..20),
        counters in prop::collection::vec(any::<u64>(), 1..4),
        text in "[a-z {}\":,]{0,40}",
    ) {
        let records = vec![
            Record { name: "f".into(), shape: vec![values.len()], payload: Payload::F64(values.clone()) },
            Record { name: "u".into(), shape: vec![counters.len()], payload: Payload::U64(counters) },
            Record { name: "t".into(), shape: vec![text.len()], payload: Payload::Text(text) },
        ];
        let back = decode(&encode(&records)).unwrap();
        prop_assert_eq!(back.len(), 3);
        // Compare bit patterns so NaN payloads count as equal.
        match (&back[0].payload, &records[0].payload) {
            (Payload::F64(a), Payload::F64(b)) => {
                prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
            _ => prop_assert!(false),
        }
        prop_assert_eq!(&back[1..], &records[1..]);
    }
}
