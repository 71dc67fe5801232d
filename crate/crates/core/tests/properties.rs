use ndarray::Array2;
use proptest::prelude::*;

use textcnn::corpus::{read_corpus, seeded_permutation, write_corpus};
use textcnn::hexfloat;
use textcnn::interpret::{activation_ranges, binarize, useful_filters};
use textcnn::model::{forward, phrase_count};
use textcnn::stats::{pearson, percentile};
use textcnn::{Corpus, ModelParams, Sample};

fn sample_strategy(d: usize) -> impl Strategy<Value = (Vec<String>, Vec<f32>, u8)> {
    (1usize..10).prop_flat_map(move |u| {
        (
            prop::collection::vec("[a-z]{1,6}|审查|é", u),
            prop::collection::vec(-1e6f32..1e6, u * d),
            0u8..2,
        )
    })
}

proptest! {
    #[test]
    fn hexfloat_round_trips(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(!v.is_nan());
        let back = hexfloat::parse(&hexfloat::format(v)).unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }

    #[test]
    fn permutation_is_a_bijection(n in 0usize..300, seed in any::<u64>()) {
        let mut p = seeded_permutation(n, seed);
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn correlation_is_bounded(xs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        let r = pearson(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn percentiles_are_monotone(mut xs in prop::collection::vec(-1e3f64..1e3, 1..50), q in 0.0f64..1.0) {
        let lo = percentile(&xs, q);
        let hi = percentile(&xs, (q + 0.1).min(1.0));
        xs.sort_by(f64::total_cmp);
        prop_assert!(lo <= hi);
        prop_assert!(xs[0] <= lo && hi <= xs[xs.len() - 1]);
    }

    #[test]
    fn useful_mask_follows_ranges(vals in prop::collection::vec(0.0f64..1.0, 12), t in 0.0f64..1.0) {
        let a = Array2::from_shape_vec((4, 3), vals).unwrap();
        let ranges = activation_ranges(&a);
        for (r, u) in ranges.iter().zip(useful_filters(&a, t)) {
            prop_assert_eq!(u, *r >= t - 1e-12);
        }
        let z = binarize(&a);
        prop_assert!(z.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn activations_stay_in_unit_interval(
        seed in any::<u64>(),
        u in 1usize..9,
        k in 1usize..6,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::glorot(3, &[k], 2, &mut rng);
        let s = Sample {
            id: 0,
            tokens: (0..u).map(|i| format!("t{i}")).collect(),
            embeddings: Array2::from_shape_fn((u, 3), |_| rng.random_range(-5.0f32..5.0)),
            outcome: 0,
            raw_text: None,
        };
        let tr = forward(&p, &s).unwrap();
        prop_assert_eq!(tr.layers[0].activations.nrows(), phrase_count(u, k));
        prop_assert!(tr.pooled.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!((0.0..=1.0).contains(&tr.prediction));
    }

    #[test]
    fn embt_round_trip_is_byte_identical(rows in prop::collection::vec(sample_strategy(3), 1..8)) {
        let samples: Vec<Sample> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (tokens, emb, outcome))| Sample {
                id: i as u64,
                embeddings: Array2::from_shape_vec((tokens.len(), 3), emb).unwrap(),
                tokens,
                outcome,
                raw_text: None,
            })
            .collect();
        let corpus = Corpus::new(samples, 3, 16, "prop").unwrap();
        let mut first = Vec::new();
        write_corpus(&corpus, &mut first).unwrap();
        let back = read_corpus(first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_corpus(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }
}
