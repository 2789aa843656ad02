use kamg::corpus::Split;
use kamg::error::Error;
use kamg::evalmetrics::{assign_buckets, evaluate, CandidateScope, Group, Metric};
use kamg::labelgraphs::GraphKind;
use kamg::model::{FusionMode, KamgModel, LabelContext, ModelConfig};
use kamg::numerics::{Matrix, Rng};
use kamg::pipeline::{prepare, PrepareOptions, PreparedData};
use kamg::synthetic::{generate_synthetic, SyntheticSpec};
use kamg::trainer::{score_documents, train, Checkpoint, TrainConfig};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        frequent_labels: 8,
        few_labels: 3,
        zero_labels: 3,
        groups: 2,
        train_docs: 200,
        dev_docs: 30,
        test_docs: 30,
        tokens_per_doc: 12,
        embed_dim: 8,
        seed,
        ..Default::default()
    }
}

fn small_data(seed: u64) -> PreparedData {
    let syn = generate_synthetic(&small_spec(seed)).unwrap();
    let opts = PrepareOptions {
        sim_k: 3,
        seed,
        ..Default::default()
    };
    prepare(&syn.corpus, &syn.taxonomy, &syn.vectors, &opts).unwrap()
}

fn small_model(graphs: &[GraphKind], fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        filters: 8,
        kernel: 3,
        gcn_hidden: 6,
        gcn_out: 6,
        fusion_dim: 6,
        graphs: graphs.to_vec(),
        fusion,
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed,
        ..Default::default()
    }
}

const GS: [GraphKind; 2] = [GraphKind::Hierarchy, GraphKind::Similarity];

#[test]
fn separable_corpus_is_learned() {
    let spec = SyntheticSpec::separable(4);
    let syn = generate_synthetic(&spec).unwrap();
    let data = prepare(&syn.corpus, &syn.taxonomy, &syn.vectors, &PrepareOptions::default()).unwrap();
    let cfg = ModelConfig {
        embed_dim: spec.embed_dim,
        filters: 16,
        kernel: 3,
        gcn_hidden: 8,
        gcn_out: 8,
        fusion_dim: 8,
        graphs: vec![GraphKind::Hierarchy],
        fusion: FusionMode::PostGcn,
    };
    let tc = TrainConfig {
        epochs: 20,
        learning_rate: 0.005,
        dev_k: 1,
        seed: 4,
        ..Default::default()
    };
    let out = train(&data, &cfg, &tc).unwrap();
    assert_eq!(out.history.best_dev_metric(), Some(1.0), "{:?}", out.history);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let data = small_data(1);
    let cfg = small_model(&GS, FusionMode::PostGcn);
    let out = train(&data, &cfg, &quick(1)).unwrap();
    let ckpt = Checkpoint::capture(&out.model, &data);
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    back.validate(&cfg, &data).unwrap();
    let model = back.into_model().unwrap();
    let docs = data.split(Split::Test);
    assert_eq!(
        score_documents(&model, &out.context, &data, docs).unwrap(),
        score_documents(&out.model, &out.context, &data, docs).unwrap()
    );

    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));

    let other = small_model(&GS[..1], FusionMode::PostGcn);
    assert!(matches!(ckpt.validate(&other, &data), Err(Error::Config(_))));

    let foreign = small_data(2);
    assert!(matches!(ckpt.validate(&cfg, &foreign), Err(Error::Integrity(_))));
}

#[test]
fn unseen_label_in_training_is_rejected() {
    let mut data = small_data(1);
    let unseen = (0..data.catalog.len()).find(|&l| data.catalog.is_unseen(l)).unwrap();
    data.train[0].labels.push(unseen);
    let result = train(&data, &small_model(&GS, FusionMode::PostGcn), &quick(1));
    assert!(matches!(result, Err(Error::Contract(_))));
}

#[test]
fn same_seed_same_parameters() {
    let data = small_data(3);
    let cfg = small_model(&GS, FusionMode::PreGcnMerge);
    let a = train(&data, &cfg, &quick(9)).unwrap();
    let b = train(&data, &cfg, &quick(9)).unwrap();
    assert_eq!(Checkpoint::capture(&a.model, &data).to_bytes(), Checkpoint::capture(&b.model, &data).to_bytes());
    assert_eq!(a.history.to_jsonl(), b.history.to_jsonl());
    let c = train(&data, &cfg, &quick(10)).unwrap();
    assert_ne!(a.model.params(), c.model.params());
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let data = small_data(1);
    let cfg = small_model(&GS, FusionMode::PostGcn);
    let out = train(&data, &cfg, &TrainConfig { epochs: 0, seed: 5, ..Default::default() }).unwrap();
    let init = KamgModel::new(cfg, &mut Rng::new(5).fork(0)).unwrap();
    assert_eq!(out.model.params(), init.params());
    assert!(out.history.epochs.is_empty());
}

/// Relabeling the catalog (embeddings and graphs together) permutes the
/// scores and leaves the metrics unchanged.
#[test]
fn scores_follow_label_permutation() {
    let data = small_data(2);
    let gsc = [GraphKind::Hierarchy, GraphKind::Similarity, GraphKind::Cooccurrence];
    for fusion in [FusionMode::PostGcn, FusionMode::PreGcnMerge] {
        let cfg = small_model(&gsc, fusion);
        let model = KamgModel::new(cfg.clone(), &mut Rng::new(8)).unwrap();
        let n = data.catalog.len();
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(99).shuffle(&mut perm);

        let ctx = LabelContext::new(&cfg, data.label_embeddings.clone(), &data.graphs).unwrap();
        let rows: Vec<&[f64]> = perm.iter().map(|&o| data.label_embeddings.row(o)).collect();
        let emb = Matrix::from_rows(&rows).unwrap();
        let graphs: Vec<_> = data.graphs.iter().map(|g| g.permuted(&perm).unwrap()).collect();
        let pctx = LabelContext::new(&cfg, emb, &graphs).unwrap();

        let docs: Vec<&[usize]> = data.test.iter().map(|d| d.tokens.as_slice()).collect();
        let s = model.predict_many(&ctx, &data.embeddings, docs.iter().copied()).unwrap();
        let ps = model.predict_many(&pctx, &data.embeddings, docs.iter().copied()).unwrap();
        for (a, b) in s.iter().zip(&ps) {
            for (new, &old) in perm.iter().enumerate() {
                assert!((b[new] - a[old]).abs() < 1e-12, "{fusion}");
            }
        }

        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let gold: Vec<Vec<usize>> = data.test.iter().map(|d| d.labels.clone()).collect();
        let pgold: Vec<Vec<usize>> = gold.iter().map(|g| g.iter().map(|&l| inverse[l]).collect()).collect();
        let mut freq = vec![0; n];
        for d in &data.train {
            for &l in &d.labels {
                freq[l] += 1;
            }
        }
        let pfreq: Vec<usize> = perm.iter().map(|&o| freq[o]).collect();
        let pbuckets = assign_buckets(&pfreq, data.buckets.few_threshold()).unwrap();
        let r = evaluate(&s, &gold, &data.buckets, &[1, 5], CandidateScope::WithinBucket).unwrap();
        let pr = evaluate(&ps, &pgold, &pbuckets, &[1, 5], CandidateScope::WithinBucket).unwrap();
        for g in [Group::Frequent, Group::Few, Group::Zero, Group::Overall] {
            let a = r.get(g, Metric::Recall, 5).unwrap();
            let b = pr.get(g, Metric::Recall, 5).unwrap();
            assert!((a - b).abs() < 1e-12, "{fusion} {g:?}");
        }
    }
}
