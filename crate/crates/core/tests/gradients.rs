use kamg::labelgraphs::GraphKind;
use kamg::model::{FusionMode, KamgModel};
use kamg::numerics::{analytic_grads, finite_difference_check, Matrix, DEFAULT_FD_EPS};
use kamg::oracles::{gradient_suite, toy_problem};

const GSC: [GraphKind; 3] = [GraphKind::Hierarchy, GraphKind::Similarity, GraphKind::Cooccurrence];

#[test]
fn full_suite_within_tolerance() {
    let report = gradient_suite(7).unwrap();
    for case in &report.cases {
        assert!(case.max_rel_error < 1e-4, "{}: {:e}", case.name, case.max_rel_error);
        assert!(case.coordinates > 0, "{}", case.name);
    }
}

#[test]
fn pre_merge_with_two_graphs() {
    let toy = toy_problem(FusionMode::PreGcnMerge, &GSC[..2], 5).unwrap();
    let r = finite_difference_check(&toy.params, DEFAULT_FD_EPS, |t, s| toy.loss(t, s, None)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

/// The unseen label never appears as gold, yet its score still moves the GCN
/// weights through its graph neighbours.
#[test]
fn unseen_label_reaches_graph_weights() {
    for fusion in [FusionMode::PostGcn, FusionMode::PreGcnMerge] {
        let toy = toy_problem(fusion, &GSC, 3).unwrap();
        let model = KamgModel::from_params(toy.config.clone(), toy.params.clone()).unwrap();
        let unseen_score = |tape: &mut kamg::numerics::Tape, store: &kamg::numerics::ParamStore| {
            let m = KamgModel::from_params(toy.config.clone(), store.clone())?;
            let c = m.label_classifiers(tape, &toy.context)?;
            let probs = m.document_probs(tape, &toy.context, c, &toy.docs[0].0, &toy.embeddings, None)?;
            let shape = tape.value(probs).clone();
            let mut mask = Matrix::zeros(shape.rows(), shape.cols());
            mask.data_mut()[3] = 1.0;
            let mask = tape.constant(mask);
            let picked = tape.mul(probs, mask)?;
            tape.sum(picked)
        };
        let grads = analytic_grads(&toy.params, &unseen_score).unwrap();
        let path = model.graph_path_params();
        assert!(!path.is_empty());
        let norm: f64 = path.iter().map(|&id| grads.get(id).frobenius_norm()).sum();
        assert!(norm > 1e-8, "{fusion}: graph-path gradient {norm:e}");

        let r = finite_difference_check(&toy.params, DEFAULT_FD_EPS, unseen_score).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn no_graph_model_has_no_graph_path() {
    let toy = toy_problem(FusionMode::None, &[], 1).unwrap();
    let model = KamgModel::from_params(toy.config.clone(), toy.params.clone()).unwrap();
    assert!(model.graph_path_params().is_empty());
}
