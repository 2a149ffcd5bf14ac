use proptest::prelude::*;

use xvfl::dataset::{
    build_vertical, partition_dims, round_count, split_alignment, SplitSpec, SENTINEL,
};
use xvfl::experiments::{summarize, Method, ResultRow};
use xvfl::losses::ClientSet;
use xvfl::models::{avg_embeddings, merge_partial};
use xvfl::numkit::Matrix;
use xvfl::optim::{run, NoisyQuadratic, OptimizerConfig, PageConfig, SgdConfig};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// `⌊overlap·n⌋`, robust to products a few ulps under an integer.
fn aligned_target(overlap: f64, n: usize) -> usize {
    (overlap * n as f64 + 1e-9).floor() as usize
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn merge_case() -> impl Strategy<Value = (Matrix, Matrix, Vec<bool>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        (
            matrix(r, c),
            matrix(r, c),
            prop::collection::vec(any::<bool>(), r * c),
        )
    })
}

proptest! {
    #[test]
    fn merge_identity_and_full_overwrite((o, r, _) in merge_case()) {
        let n = o.data().len();
        prop_assert_eq!(bits(&merge_partial(&o, &r, &vec![false; n]).unwrap()), bits(&o));
        prop_assert_eq!(bits(&merge_partial(&o, &r, &vec![true; n]).unwrap()), bits(&r));
    }

    #[test]
    fn merge_takes_masked_entries_from_reconstruction((o, r, m) in merge_case()) {
        let merged = merge_partial(&o, &r, &m).unwrap();
        for (j, &masked) in m.iter().enumerate() {
            let want = if masked { r.data()[j] } else { o.data()[j] };
            prop_assert_eq!(merged.data()[j].to_bits(), want.to_bits());
        }
        let again = merge_partial(&merged, &r, &m).unwrap();
        prop_assert_eq!(bits(&again), bits(&merged));
    }

    #[test]
    fn masks_have_exact_cardinality(
        n in 4usize..40,
        m in 2usize..12,
        overlap in 0.0f64..1.0,
        rate_idx in 0usize..7,
        seed in any::<u64>(),
    ) {
        let rate = xvfl::experiments::DEFAULT_MISSING_RATES[rate_idx];
        let x = Matrix::from_vec(n, m, (0..n * m).map(|v| 1.0 + v as f64).collect()).unwrap();
        let labels = (0..n).map(|s| s % 2).collect();
        let split = SplitSpec { overlap_ratio: overlap, missing_rate: rate, imbalance: None, seed };
        let data = build_vertical(&x, labels, 2, &[0.5, 0.5], &split).unwrap();
        prop_assert_eq!(data.aligned_count(), aligned_target(overlap, n));
        for s in 0..n {
            for i in 0..2 {
                let d = data.blocks[i].cols();
                let count = data.masked_count(i, s);
                match data.owner[s] {
                    None => prop_assert_eq!(count, 0),
                    Some(o) if o == i => prop_assert_eq!(count, 0),
                    Some(_) => prop_assert_eq!(count, round_count(rate * d as f64)),
                }
                for (j, &masked) in data.mask_row(i, s).iter().enumerate() {
                    if masked {
                        prop_assert_eq!(data.blocks[i].get(s, j), SENTINEL);
                    }
                }
            }
        }
    }

    #[test]
    fn alignment_plan_counts(n in 1usize..200, k in 2usize..5, overlap in 0.0f64..=1.0, seed in any::<u64>()) {
        let plan = split_alignment(n, k, overlap, seed).unwrap();
        prop_assert_eq!(plan.aligned_count(), aligned_target(overlap, n));
        let owned: usize = (0..k).map(|i| plan.owned_by(i)).sum();
        prop_assert_eq!(owned + plan.aligned_count(), n);
        let counts: Vec<usize> = (0..k).map(|i| plan.owned_by(i)).collect();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn partition_covers_every_feature(m in 4usize..64, k in 1usize..5) {
        let fractions = vec![1.0 / k as f64; k];
        match partition_dims(m, &fractions) {
            Ok(dims) => {
                prop_assert_eq!(dims.iter().sum::<usize>(), m);
                prop_assert!(dims.iter().all(|&d| d >= 1));
                if m % k == 0 {
                    prop_assert!(dims.iter().all(|&d| d == m / k));
                }
            }
            Err(e) => {
                prop_assert!(m % k != 0, "even split of {} over {} rejected", m, k);
                prop_assert!(matches!(e, xvfl::Error::Config(_)));
            }
        }
    }

    #[test]
    fn client_set_matches_a_sorted_index_list(mut clients in prop::collection::vec(0usize..64, 0..10)) {
        let s = ClientSet::from_clients(clients.iter().copied());
        clients.sort_unstable();
        clients.dedup();
        prop_assert_eq!(s.iter().collect::<Vec<_>>(), clients.clone());
        prop_assert_eq!(s.len(), clients.len());
        for &c in &clients {
            prop_assert!(s.contains(c));
            prop_assert_eq!(s.without(c).len(), clients.len() - 1);
        }
        prop_assert!(s.minus(s).is_empty());
    }

    #[test]
    fn embedding_mean_ignores_order(a in matrix(3, 4), b in matrix(3, 4), c in matrix(3, 4)) {
        let x = avg_embeddings(&[&a, &b, &c]).unwrap();
        let y = avg_embeddings(&[&c, &a, &b]).unwrap();
        for (u, v) in x.data().iter().zip(y.data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn page_with_p_one_follows_sgd(seed in any::<u64>(), batch in 1usize..8) {
        let q = NoisyQuadratic::log_spaced(4, -0.5, 1.0, 0.05);
        let theta0 = vec![1.0; 4];
        let sgd = run(&q, &OptimizerConfig::Sgd(SgdConfig { eta: 0.2, batch }), &theta0, 30, seed, |_, _, _| Ok(())).unwrap();
        let page = OptimizerConfig::Page(PageConfig { eta: 0.2, p: 1.0, b: batch, b_prime: 1 });
        let page = run(&q, &page, &theta0, 30, seed, |_, _, _| Ok(())).unwrap();
        prop_assert_eq!(sgd.theta, page.theta);
    }

    #[test]
    fn summary_means_recompute_from_rows(values in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let rows: Vec<ResultRow> = values
            .iter()
            .enumerate()
            .map(|(s, &v)| ResultRow {
                sweep: "missing".into(),
                method: Method::Xvfl,
                seed: s as u64,
                missing_rate: 0.5,
                overlap_ratio: 0.4,
                imbalance: String::new(),
                lambda1: None,
                lambda2: None,
                client: None,
                metric: "independent".into(),
                value: v,
                config_hash: "h".into(),
            })
            .collect();
        let summary = summarize(&rows).unwrap();
        prop_assert_eq!(summary.groups.len(), 1);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((summary.groups[0].mean - mean).abs() <= 1e-12);
        prop_assert_eq!(summary.groups[0].count, values.len());
    }
}
