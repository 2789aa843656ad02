use kamg::corpus::{Corpus, Document, Label, LabelCatalog, Split};
use kamg::evalmetrics::{assign_buckets, evaluate, rank_labels, recall_at_k, rprecision_at_k, CandidateScope, Metric};
use kamg::labelgraphs::{merge_graphs, normalize, GraphKind, LabelGraph};
use kamg::numerics::{softmax, Matrix};
use kamg::oracles::{brute_force_metric, brute_force_rank};
use kamg::textpipe::{label_embedding, tokenize, EmbeddingTable, IdfTable, Vocab};
use proptest::prelude::*;

fn symmetric_graph(n: usize, weights: &[f64], density: &[bool]) -> LabelGraph {
    let mut a = Matrix::identity(n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if density[k % density.len()] {
                let w = weights[k % weights.len()];
                a.set(i, j, w);
                a.set(j, i, w);
            }
            k += 1;
        }
    }
    LabelGraph::new(GraphKind::Similarity, a).unwrap()
}

fn graph_strategy(max_n: usize) -> impl Strategy<Value = LabelGraph> {
    (1..=max_n).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0.01f64..20.0, 1..64),
            prop::collection::vec(any::<bool>(), 1..64),
        )
            .prop_map(|(n, w, d)| symmetric_graph(n, &w, &d))
    })
}

/// Largest eigenvalue magnitude by power iteration on a symmetric matrix.
fn spectral_radius(m: &Matrix, iters: usize) -> f64 {
    let n = m.rows();
    let mut v = Matrix::from_vec(n, 1, (0..n).map(|i| 1.0 + i as f64 * 0.01).collect()).unwrap();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = m.matmul(&v).unwrap();
        let norm = w.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.frobenius_norm();
        v = w.map(|x| x / norm);
    }
    lambda
}

fn permutation(n: usize, keys: &[u32]) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.sort_by_key(|&i| (keys[i % keys.len()], i));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let p = softmax(&xs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graphs_are_symmetric_with_positive_degree(g in graph_strategy(12)) {
        let a = g.adjacency();
        for i in 0..g.len() {
            prop_assert!(a.get(i, i) >= 1.0);
            prop_assert!(a.row(i).iter().sum::<f64>() > 0.0);
            for j in 0..g.len() {
                prop_assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        let n = normalize(&g).unwrap();
        for i in 0..g.len() {
            for j in 0..g.len() {
                prop_assert!((n.matrix().get(i, j) - n.matrix().get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merging_a_graph_with_itself_is_neutral(g in graph_strategy(12)) {
        let merged = merge_graphs(&g, &g).unwrap();
        let a = normalize(&g).unwrap();
        let b = normalize(&merged).unwrap();
        prop_assert!(a.matrix().max_abs_diff(b.matrix()) <= 1e-12);
    }

    #[test]
    fn normalized_spectral_radius_at_most_one(g in graph_strategy(50)) {
        let n = normalize(&g).unwrap();
        prop_assert!(spectral_radius(n.matrix(), 300) <= 1.0 + 1e-9);
    }

    #[test]
    fn normalization_commutes_with_relabeling(g in graph_strategy(10), keys in prop::collection::vec(any::<u32>(), 10)) {
        let perm = permutation(g.len(), &keys);
        let left = normalize(&g.permuted(&perm).unwrap()).unwrap();
        let right = normalize(&g).unwrap();
        for i in 0..g.len() {
            for j in 0..g.len() {
                prop_assert!((left.matrix().get(i, j) - right.matrix().get(perm[i], perm[j])).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn metrics_match_brute_force(
        scores in prop::collection::vec(0u8..4, 1..10),
        gold_mask in prop::collection::vec(any::<bool>(), 10),
        k in 1usize..12,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let all: Vec<usize> = (0..n).collect();
        let gold: Vec<usize> = (0..n).filter(|&i| gold_mask[i]).collect();
        let ranked = rank_labels(&scores, &all).unwrap();
        for (pos, &l) in ranked.iter().enumerate() {
            prop_assert_eq!(brute_force_rank(&scores, &all, l), pos);
        }
        prop_assume!(!gold.is_empty());
        for m in Metric::ALL {
            prop_assert_eq!(m.compute(&ranked, &gold, k).unwrap(), brute_force_metric(m, &scores, &all, &gold, k));
        }
        if gold.len() <= k {
            prop_assert_eq!(recall_at_k(&ranked, &gold, k).unwrap(), rprecision_at_k(&ranked, &gold, k).unwrap());
        }
        let a = recall_at_k(&ranked, &gold, k).unwrap();
        let b = recall_at_k(&ranked, &gold, k + 1).unwrap();
        prop_assert!(a <= b && (0.0..=1.0).contains(&a));
    }

    #[test]
    fn metrics_invariant_under_relabeling(
        scores in prop::collection::vec(0.0f64..1.0, 2..10),
        gold_mask in prop::collection::vec(any::<bool>(), 10),
        freq in prop::collection::vec(0usize..8, 10),
        keys in prop::collection::vec(any::<u32>(), 10),
    ) {
        let n = scores.len();
        let gold: Vec<usize> = (0..n).filter(|&i| gold_mask[i]).collect();
        prop_assume!(!gold.is_empty());
        let buckets = assign_buckets(&freq[..n], 3).unwrap();
        let report = evaluate(&[scores.clone()], &[gold.clone()], &buckets, &[1, 3], CandidateScope::WithinBucket).unwrap();

        let perm = permutation(n, &keys);
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let p_scores: Vec<f64> = perm.iter().map(|&o| scores[o]).collect();
        let p_gold: Vec<usize> = gold.iter().map(|&o| inverse[o]).collect();
        let p_freq: Vec<usize> = perm.iter().map(|&o| freq[o]).collect();
        let p_buckets = assign_buckets(&p_freq, 3).unwrap();
        let p_report = evaluate(&[p_scores], &[p_gold], &p_buckets, &[1, 3], CandidateScope::WithinBucket).unwrap();
        // Continuous scores: exact ties have probability zero.
        prop_assert_eq!(report.records, p_report.records);
    }

    #[test]
    fn label_embedding_is_convex_and_order_free(
        desc in prop::collection::vec(0usize..6, 1..12),
        keys in prop::collection::vec(any::<u32>(), 12),
    ) {
        let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
        let tokens: Vec<String> = desc.iter().map(|&i| words[i].to_string()).collect();
        let others = vec![vec!["alpha".to_string()], vec!["beta".to_string(), "gamma".to_string()]];
        let mut all = others.clone();
        all.push(tokens.clone());
        let vocab = Vocab::build(all.iter(), 1);
        let rows: Vec<Vec<f64>> = (0..vocab.len()).map(|i| vec![i as f64, (i * i) as f64 % 7.0, 1.0]).collect();
        let table = EmbeddingTable::from_parts(Matrix::from_rows(&rows).unwrap(), vec![true; vocab.len()]).unwrap();
        let idf = IdfTable::compute(all.iter()).unwrap();
        let e = label_embedding(&tokens, &vocab, &table, &idf);
        prop_assert!(!e.uncovered);
        // Third coordinate is 1 in every row: weights sum to one.
        prop_assert!((e.vector[2] - 1.0).abs() < 1e-12);
        let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
        let lo = ids.iter().map(|&i| table.row(i)[0]).fold(f64::INFINITY, f64::min);
        let hi = ids.iter().map(|&i| table.row(i)[0]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e.vector[0] >= lo - 1e-12 && e.vector[0] <= hi + 1e-12);

        let perm = permutation(tokens.len(), &keys);
        let shuffled: Vec<String> = perm.iter().map(|&i| tokens[i].clone()).collect();
        let f = label_embedding(&shuffled, &vocab, &table, &idf);
        prop_assert_eq!(e.vector, f.vector);
    }

    #[test]
    fn vocab_ignores_document_order(
        docs in prop::collection::vec(prop::collection::vec("[a-e]{1,3}", 1..6), 1..8),
        keys in prop::collection::vec(any::<u32>(), 8),
    ) {
        let perm = permutation(docs.len(), &keys);
        let shuffled: Vec<Vec<String>> = perm.iter().map(|&i| docs[i].clone()).collect();
        let a = Vocab::build(docs.iter(), 1);
        let b = Vocab::build(shuffled.iter(), 1);
        prop_assert_eq!(a.tokens(), b.tokens());
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn corpus_round_trip(
        texts in prop::collection::vec("[a-z ]{1,30}", 1..8),
        label_sets in prop::collection::vec(prop::collection::btree_set(0usize..4, 0..3), 8),
        splits in prop::collection::vec(0usize..3, 8),
    ) {
        let catalog = LabelCatalog::new(
            (0..4)
                .map(|i| Label { code: format!("c{i}"), description: format!("label {i}"), unseen: false })
                .collect(),
        )
        .unwrap();
        let documents: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: format!("d{i}"),
                text: t.clone(),
                tokens: tokenize(t),
                labels: label_sets[i].iter().copied().collect(),
                split: [Split::Train, Split::Dev, Split::Test][splits[i]],
            })
            .collect();
        let corpus = Corpus { catalog: catalog.clone(), documents };
        let back = Corpus::parse(&corpus.to_jsonl(), catalog).unwrap();
        prop_assert_eq!(back.documents, corpus.documents);
    }
}
