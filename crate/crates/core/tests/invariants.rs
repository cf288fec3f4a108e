mod common;

use std::collections::HashSet;

use depcause::corpus::{
    build_adjacency, parse_conllu, read_jsonl_str, split_dataset, write_conllu, write_jsonl_string, AdjacencyOptions,
    AnnotatedSentence, Label, SplitRatios,
};
use depcause::eval::{token_prf, Prediction};
use depcause::tensor::gradcheck::finite_diff_check;
use depcause::tensor::{Graph, Tensor};
use depcause::train::{EarlyStopping, StopDecision};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(seed: u64, size: usize) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|i| common::random_sentence(i, 10, &mut rng)).collect()
}

fn noisy_predictions(golds: &[AnnotatedSentence], seed: u64) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    golds
        .iter()
        .map(|s| {
            let labels = s
                .gold_labels()
                .into_iter()
                .map(|l| if rng.random_bool(0.2) { Label::ALL[rng.random_range(0..4)] } else { l })
                .collect();
            Prediction::from_labels(labels)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn micro_f1_ignores_corpus_order(seed in any::<u64>(), size in 1usize..30) {
        let golds = corpus(seed, size);
        let preds = noisy_predictions(&golds, seed ^ 1);
        let before = token_prf(&preds, &golds).unwrap();
        let mut order: Vec<usize> = (0..size).collect();
        order.reverse();
        order.rotate_left(seed as usize % size);
        let golds2: Vec<_> = order.iter().map(|&i| golds[i].clone()).collect();
        let preds2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let after = token_prf(&preds2, &golds2).unwrap();
        prop_assert_eq!(before.micro.f1, after.micro.f1);
        prop_assert_eq!(before.exact_matches, after.exact_matches);
    }

    #[test]
    fn exact_match_has_no_errors(seed in any::<u64>()) {
        let golds = corpus(seed, 1);
        let preds = noisy_predictions(&golds, seed);
        let report = token_prf(&preds, &golds).unwrap();
        if report.exact_matches == 1 {
            prop_assert_eq!(report.micro.fp + report.micro.fn_, 0);
        } else {
            prop_assert!(report.micro.fp + report.micro.fn_ > 0);
        }
    }

    #[test]
    fn adjacency_is_symmetric_tree_neighbourhood(seed in any::<u64>(), extra in 0usize..4) {
        let s = &corpus(seed, 1)[0];
        let m = s.len() + 2 + extra;
        let adj = build_adjacency(s, m, AdjacencyOptions::default()).unwrap();
        prop_assert!(adj.is_symmetric());
        for p in 0..m {
            prop_assert_eq!(adj.neighbors(p), common::padded_neighbours(s, p, m));
        }
        prop_assert_eq!(adj.edge_count(), 2 * (s.len() - 1));
    }

    #[test]
    fn jsonl_and_conllu_round_trip(seed in any::<u64>(), size in 1usize..12) {
        let sentences = corpus(seed, size);
        let from_jsonl = read_jsonl_str(&write_jsonl_string(&sentences), true).unwrap();
        prop_assert_eq!(&from_jsonl, &sentences);
        let from_conllu = parse_conllu(&write_conllu(&sentences)).unwrap().sentences;
        prop_assert_eq!(&from_conllu, &sentences);
    }

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), size in 10usize..200) {
        let sentences = corpus(seed, size);
        let split = split_dataset(sentences.clone(), SplitRatios::default(), seed).unwrap();
        let mut ids: Vec<_> = split.train.iter().chain(&split.test).chain(&split.validation).map(|s| s.id.clone()).collect();
        prop_assert_eq!(ids.len(), size);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), size);
        prop_assert!(split.train.len() >= split.test.len());
        prop_assert!(split.test.len() >= split.validation.len());
    }

    #[test]
    fn early_stopping_keeps_the_minimum(losses in prop::collection::vec(0.0f64..10.0, 1..60), tol in 1usize..8) {
        let mut stop = EarlyStopping::new(tol);
        let mut seen = Vec::new();
        let mut stale = 0;
        for (epoch, &loss) in losses.iter().enumerate() {
            seen.push(loss);
            match stop.observe(epoch, loss) {
                StopDecision::Improved => stale = 0,
                StopDecision::Continue => stale += 1,
                StopDecision::Stop => {
                    stale += 1;
                    prop_assert_eq!(stale, tol);
                    break;
                }
            }
        }
        prop_assert!(seen.iter().all(|&l| stop.best() <= l));
        prop_assert_eq!(seen[stop.best_epoch()], stop.best());
    }

    #[test]
    fn masked_softmax_rows(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = Tensor::uniform(&[rows, cols], 30.0, &mut rng);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
        for r in 0..rows {
            mask[r * cols + rng.random_range(0..cols)] = true;
        }
        let mut g = Graph::new();
        let s = g.constant(scores);
        let a = g.masked_softmax(s, &mask).unwrap();
        let a = g.value(a);
        for r in 0..rows {
            let sum: f64 = a.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(a.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn autodiff_matches_finite_differences(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![Tensor::uniform(&[m, k], 1.0, &mut rng), Tensor::uniform(&[k, n], 1.0, &mut rng)];
        let names = vec!["a".to_string(), "b".to_string()];
        let mask = vec![true; m * n];
        let report = finite_diff_check(
            |g: &mut Graph<'_>, v| {
                let p = g.matmul(v[0], v[1])?;
                let h = g.gelu(p, false);
                let s = g.masked_softmax(h, &mask)?;
                let l = g.mul(s, h)?;
                Ok(g.sum(l))
            },
            &names,
            &mut params,
            1e-5,
            1e-5,
        )
        .unwrap();
        prop_assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    use depcause::embed::Vocabulary;
    use depcause::model::{DepBert, ModelConfig};

    let sentences = corpus(3, 6);
    let vocab = Vocabulary::build(&sentences, 1, 16).unwrap();
    let config = ModelConfig {
        d_model: 16,
        left_layers: 1,
        right_layers: 2,
        max_len: 16,
        ..ModelConfig::default()
    };
    let model = DepBert::new(config, vocab, 1).unwrap();
    let refs: Vec<_> = sentences.iter().collect();
    let (_, grads) = model.loss_and_grads(&model.batch(&refs).unwrap()).unwrap();
    let names: HashSet<_> = model
        .params()
        .iter()
        .zip(&grads)
        .filter(|(_, g)| g.data().iter().all(|&x| x == 0.0))
        .map(|((name, _), _)| name.to_string())
        .collect();
    assert!(names.is_empty(), "no gradient reaches {names:?}");
}
