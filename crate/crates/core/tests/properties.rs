use nalgebra::DMatrix;
use proptest::prelude::*;

use resformer::data::synthetic::{generate_synthetic, SentenceKind, SyntheticTaskSpec};
use resformer::data::{parse_jsonl, split, to_jsonl, Corpus, SentenceRecord, Vocab};
use resformer::model::checkpoint::{decode, encode, CheckpointData};
use resformer::numerics::matrix::{apply_sparsity, gaussian_matrix};
use resformer::numerics::ops::{layer_norm, softmax};
use resformer::numerics::spectral::power_iteration;
use resformer::numerics::{Activation, Matrix, Rng};
use resformer::params::ParamStore;
use resformer::reservoir::{InitMode, Reservoir, ReservoirConfig};

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn reservoir(size: usize, input_dim: usize, alpha: f64, rho: f64, sparsity: f64, seed: u64) -> Reservoir<f64> {
    let config = ReservoirConfig {
        size,
        input_dim,
        leaky_alpha: alpha,
        spectral_radius: rho,
        sparsity,
        input_scaling: 0.5,
        readout_dim: 4,
        readout_activation: Activation::Relu,
        seed,
        weight_stddev: 1.0,
    };
    Reservoir::build(config, &mut ParamStore::new(), "r").unwrap()
}

fn dense_radius(m: &Matrix<f64>) -> f64 {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    d.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -500.0f64..500.0,
    ) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centres_and_scales(v in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        prop_assume!(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64 > 1e-3);
        let y = layer_norm(&v, &vec![1.0; n], &vec![0.0; n], 1e-5).unwrap();
        let m = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn states_stay_in_the_unit_box(
        alpha in 0.0f64..=1.0,
        rho in 0.1f64..1.5,
        seed in any::<u64>(),
        inputs in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..40),
    ) {
        let r = reservoir(12, 3, alpha, rho, 0.3, seed);
        let mut s = r.init_state(InitMode::SeededRandom, &mut Rng::new(seed, 1));
        for u in &inputs {
            s = r.step(&s, u).unwrap();
            prop_assert!(s.x.iter().all(|x| x.is_finite() && x.abs() <= 1.0));
        }
        prop_assert_eq!(s.step_count, inputs.len());
    }

    #[test]
    fn contractive_reservoirs_forget_their_start(
        alpha in 0.45f64..=1.0,
        rho in 0.5f64..=0.9,
        seed in any::<u64>(),
    ) {
        let r = reservoir(20, 2, alpha, rho, 0.5, seed);
        let mut a = r.init_state(InitMode::SeededRandom, &mut Rng::new(seed, 1));
        let mut b = r.init_state(InitMode::SeededRandom, &mut Rng::new(seed, 2));
        let mut drive = Rng::new(seed, 3);
        for _ in 0..300 {
            let u = [drive.uniform_range(-1.0, 1.0), drive.uniform_range(-1.0, 1.0)];
            a = r.step(&a, &u).unwrap();
            b = r.step(&b, &u).unwrap();
        }
        let gap: f64 = a.x.iter().zip(&b.x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(gap < 1e-6, "state gap {gap}");
    }

    #[test]
    fn power_iteration_agrees_with_dense_eigensolver(
        n in 2usize..24,
        sparsity in 0.0f64..0.7,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed, 0);
        let dense: Matrix<f64> = gaussian_matrix(&mut rng, n, n, 0.0, 1.0).unwrap();
        let m = apply_sparsity(&mut rng, &dense, sparsity).unwrap();
        let exact = dense_radius(&m);
        prop_assume!(exact > 1e-6);
        let est = power_iteration(&m, 1e-12, 20_000).unwrap();
        prop_assert!(est.converged);
        prop_assert!((est.radius - exact).abs() <= 1e-6 * exact, "{} vs {}", est.radius, exact);
    }

    #[test]
    fn constructed_recurrent_matrix_has_the_configured_radius(
        size in 10usize..60,
        rho in 0.5f64..1.2,
        sparsity in 0.0f64..0.8,
        seed in any::<u64>(),
    ) {
        let r = reservoir(size, 2, 0.5, rho, sparsity, seed);
        let got = dense_radius(r.recurrent());
        prop_assert!((got - rho).abs() <= 1e-6 * rho, "{got} vs {rho}");
    }
}

fn corpus_strategy() -> impl Strategy<Value = Vec<Corpus>> {
    let sentence = ("[ -~]{0,30}", prop::sample::select(vec!["none", "red", "blue", "x y"]));
    prop::collection::vec(prop::collection::vec(sentence, 1..6), 1..5).prop_map(|corpora| {
        corpora
            .into_iter()
            .enumerate()
            .map(|(c, sentences)| {
                let id = format!("c{c}");
                Corpus {
                    sentences: sentences
                        .into_iter()
                        .enumerate()
                        .map(|(i, (text, label))| SentenceRecord {
                            corpus_id: id.clone(),
                            index: i,
                            text,
                            label: label.to_string(),
                        })
                        .collect(),
                    id,
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn jsonl_round_trips(corpora in corpus_strategy()) {
        let text = to_jsonl(&corpora);
        prop_assert_eq!(parse_jsonl(&text).unwrap(), corpora);
    }

    #[test]
    fn vocabulary_text_round_trips(corpora in corpus_strategy(), min_count in 1usize..3) {
        let v = Vocab::build(&corpora, min_count);
        prop_assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn split_partitions_whole_corpora(n in 3usize..30, seed in any::<u64>()) {
        let corpora: Vec<Corpus> = (0..n)
            .map(|c| Corpus {
                id: format!("c{c}"),
                sentences: vec![SentenceRecord { corpus_id: format!("c{c}"), index: 0, text: "a".into(), label: "l".into() }],
            })
            .collect();
        let (tr, va, te) = split(&corpora, [0.6, 0.2, 0.2], seed).unwrap();
        let mut ids: Vec<String> = tr.iter().chain(&va).chain(&te).map(|c| c.id.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn synthetic_corpora_obey_the_task_rules(
        seed in any::<u64>(),
        gap in 1usize..12,
        classes in 2usize..6,
        len in 20usize..60,
    ) {
        let spec = SyntheticTaskSpec {
            num_corpora: 3,
            sentences_per_corpus: len,
            marker_gap: gap,
            num_classes: classes,
            distractor_vocab: 30,
            seed,
        };
        let data = generate_synthetic(&spec).unwrap();
        for (corpus, kinds) in data.corpora.iter().zip(&data.trace) {
            prop_assert_eq!(corpus.sentences.len(), len);
            let mut last_marker: Option<(usize, usize)> = None;
            let mut first_query_after_marker = true;
            for (i, (s, k)) in corpus.sentences.iter().zip(kinds).enumerate() {
                prop_assert_eq!(s.index, i);
                match *k {
                    SentenceKind::Marker { class } => {
                        prop_assert!(class < classes);
                        prop_assert_eq!(&s.label, &data.labels[class + 1]);
                        last_marker = Some((class, i));
                        first_query_after_marker = true;
                    }
                    SentenceKind::Query { class, marker_index } => {
                        prop_assert_eq!(Some((class, marker_index)), last_marker);
                        prop_assert_eq!(&s.label, &data.labels[class + 1]);
                        if first_query_after_marker {
                            prop_assert!(i - marker_index > gap);
                        }
                        first_query_after_marker = false;
                    }
                    SentenceKind::Distractor => prop_assert_eq!(s.label.as_str(), "none"),
                }
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_reject_any_flip(
        values in prop::collection::vec(-1e6f64..1e6, 1..20),
        flip in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let data = CheckpointData {
            tensors: vec![("w".to_string(), Matrix::from_vec(1, values.len(), values).unwrap())],
            metadata: serde_json::json!({ "k": 1 }),
        };
        let bytes = encode(&data);
        let back: CheckpointData<f64> = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes.clone());
        let mut bad = bytes;
        let i = flip.index(bad.len());
        bad[i] ^= 1 << bit;
        prop_assert!(decode::<f64>(&bad).is_err());
    }
}
