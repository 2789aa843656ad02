//! Independent reference checks: brute-force ranking metrics and
//! finite-difference gradient checks. Backs the `oracle-check` command.

use std::time::Instant;

use crate::error::Result;
use crate::evalmetrics::{
    assign_buckets, evaluate, ndcg_at_k, precision_at_k, rank_labels, recall_at_k, rprecision_at_k, Bucket,
    CandidateScope, Group, Metric,
};
use crate::labelgraphs::{GraphKind, LabelGraph};
use crate::model::{FusionMode, KamgModel, LabelContext, ModelConfig};
use crate::numerics::{finite_difference_check, Matrix, NodeId, ParamStore, Rng, Tape, DEFAULT_FD_EPS};
use crate::textpipe::EmbeddingTable;

/// Position of `label` in the ranking of `candidates`: the number of
/// candidates that beat it on score, or tie and have a smaller id.
pub fn brute_force_rank(scores: &[f64], candidates: &[usize], label: usize) -> usize {
    candidates
        .iter()
        .filter(|&&c| scores[c] > scores[label] || (scores[c] == scores[label] && c < label))
        .count()
}

/// Gold labels with rank below `k`, as a set-arithmetic count.
fn brute_force_hits(scores: &[f64], candidates: &[usize], gold: &[usize], k: usize) -> usize {
    let mut g = gold.to_vec();
    g.sort_unstable();
    g.dedup();
    g.iter()
        .filter(|&&l| candidates.contains(&l) && brute_force_rank(scores, candidates, l) < k)
        .count()
}

fn distinct(gold: &[usize]) -> usize {
    let mut g = gold.to_vec();
    g.sort_unstable();
    g.dedup();
    g.len()
}

/// Reference value of `metric` for one document.
pub fn brute_force_metric(metric: Metric, scores: &[f64], candidates: &[usize], gold: &[usize], k: usize) -> f64 {
    let hits = brute_force_hits(scores, candidates, gold, k) as f64;
    let g = distinct(gold);
    match metric {
        Metric::Recall => hits / g as f64,
        Metric::Precision => hits / k as f64,
        Metric::RPrecision => hits / k.min(g) as f64,
        Metric::Ndcg => {
            // Walk positions in rank order so the sum matches term by term.
            let mut dcg = 0.0;
            for pos in 0..k.min(candidates.len()) {
                let at = candidates
                    .iter()
                    .copied()
                    .find(|&c| brute_force_rank(scores, candidates, c) == pos)
                    .expect("every position is occupied");
                if gold.contains(&at) {
                    dcg += 1.0 / ((pos + 2) as f64).log2();
                }
            }
            let mut idcg = 0.0;
            for pos in 0..k.min(g) {
                idcg += 1.0 / ((pos + 2) as f64).log2();
            }
            dcg / idcg
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricOracleReport {
    pub trials: usize,
    /// Individual comparisons made.
    pub checks: usize,
    pub mismatches: Vec<String>,
    /// Cells where `|gold| ≤ K` but RP@K differed from R@K.
    pub identity_violations: usize,
    pub seconds: f64,
}

impl MetricOracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.identity_violations == 0
    }
}

/// Random small instances with many exact score ties.
struct Instance {
    scores: Vec<Vec<f64>>,
    gold: Vec<Vec<usize>>,
    freq: Vec<usize>,
    ks: Vec<usize>,
}

fn random_instance(rng: &mut Rng) -> Instance {
    let labels = 1 + rng.index(10);
    let docs = 1 + rng.index(10);
    let levels = 1 + rng.index(5);
    let scores = (0..docs)
        .map(|_| (0..labels).map(|_| rng.index(levels) as f64 / levels as f64).collect())
        .collect();
    let gold = (0..docs)
        .map(|_| (0..labels).filter(|_| rng.bernoulli(0.3)).collect())
        .collect();
    let freq = (0..labels).map(|_| rng.index(9)).collect();
    let mut ks: Vec<usize> = (0..1 + rng.index(3)).map(|_| 1 + rng.index(12)).collect();
    ks.sort_unstable();
    ks.dedup();
    Instance { scores, gold, freq, ks }
}

/// Compares every metric, per document and through bucketed evaluation,
/// against the brute-force references on `trials` random instances.
pub fn metric_oracle_suite(trials: usize, seed: u64) -> Result<MetricOracleReport> {
    let started = Instant::now();
    let mut rng = Rng::new(seed);
    let mut report = MetricOracleReport {
        trials,
        ..Default::default()
    };
    let mismatch = |report: &mut MetricOracleReport, what: String| {
        if report.mismatches.len() < 20 {
            report.mismatches.push(what);
        }
    };

    for trial in 0..trials {
        let inst = random_instance(&mut rng);
        let labels = inst.freq.len();
        let threshold = 1 + rng.index(4);
        let buckets = assign_buckets(&inst.freq, threshold)?;
        let all: Vec<usize> = (0..labels).collect();

        for (s, g) in inst.scores.iter().zip(&inst.gold) {
            let ranked = rank_labels(s, &all)?;
            for (pos, &l) in ranked.iter().enumerate() {
                report.checks += 1;
                if brute_force_rank(s, &all, l) != pos {
                    mismatch(&mut report, format!("trial {trial}: rank of label {l}"));
                }
            }
            if g.is_empty() {
                continue;
            }
            for &k in &inst.ks {
                let values = [
                    (Metric::Recall, recall_at_k(&ranked, g, k)?),
                    (Metric::Precision, precision_at_k(&ranked, g, k)?),
                    (Metric::RPrecision, rprecision_at_k(&ranked, g, k)?),
                    (Metric::Ndcg, ndcg_at_k(&ranked, g, k)?),
                ];
                for (m, v) in values {
                    report.checks += 1;
                    let want = brute_force_metric(m, s, &all, g, k);
                    if v != want {
                        mismatch(&mut report, format!("trial {trial}: {m}@{k} = {v}, reference {want}"));
                    }
                }
                if distinct(g) <= k && values[0].1 != values[2].1 {
                    report.identity_violations += 1;
                }
            }
        }

        for scope in [CandidateScope::WithinBucket, CandidateScope::AllLabels] {
            let got = evaluate(&inst.scores, &inst.gold, &buckets, &inst.ks, scope)?;
            for group in Group::ALL {
                let (candidates, bucket) = match (group.bucket(), scope) {
                    (Some(b), CandidateScope::WithinBucket) => (buckets.labels_in(b), Some(b)),
                    (b, _) => (all.clone(), b),
                };
                for &k in &inst.ks {
                    for m in Metric::ALL {
                        let mut sum = 0.0;
                        let mut n = 0usize;
                        for (s, g) in inst.scores.iter().zip(&inst.gold) {
                            let g: Vec<usize> = g
                                .iter()
                                .copied()
                                .filter(|&l| bucket.map_or(true, |b: Bucket| buckets.bucket(l) == b))
                                .collect();
                            if g.is_empty() || candidates.is_empty() {
                                continue;
                            }
                            sum += brute_force_metric(m, s, &candidates, &g, k);
                            n += 1;
                        }
                        let want = (n > 0).then(|| sum / n as f64);
                        report.checks += 1;
                        let have = got.get(group, m, k);
                        if have != want || got.n_docs(group) != n {
                            mismatch(
                                &mut report,
                                format!("trial {trial}: {group} {m}@{k} ({scope:?}) = {have:?}, reference {want:?}"),
                            );
                        }
                    }
                }
            }
        }
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradientReport {
    pub cases: Vec<GradCase>,
    pub seconds: f64,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        !self.cases.is_empty() && self.max_rel_error() < tolerance
    }
}

/// Uniform entries in `±[0.1, 1]`, away from the ReLU kink.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.uniform(0.1, 1.0);
            if rng.bernoulli(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<NodeId>>;

/// Reduces `x` to a scalar through a fixed random weighting, so every
/// output coordinate gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: NodeId, weights: &Matrix) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn primitive_cases(rng: &mut Rng) -> Result<Vec<(String, ParamStore, Build)>> {
    let mut cases: Vec<(String, ParamStore, Build)> = Vec::new();
    let mut two = |name: &str, a: Matrix, b: Matrix, out: (usize, usize), rng: &mut Rng, op: fn(&mut Tape, NodeId, NodeId) -> Result<NodeId>| -> Result<()> {
        let mut ps = ParamStore::new();
        let ia = ps.add("a", a)?;
        let ib = ps.add("b", b)?;
        let w = random(out.0, out.1, rng);
        let build: Build = Box::new(move |t, s| {
            let a = t.param(s, ia);
            let b = t.param(s, ib);
            let y = op(t, a, b)?;
            weighted_sum(t, y, &w)
        });
        cases.push((name.to_string(), ps, build));
        Ok(())
    };
    two("matmul", random(3, 4, rng), random(4, 2, rng), (3, 2), rng, |t, a, b| t.matmul(a, b))?;
    two("matmul_nt", random(3, 4, rng), random(2, 4, rng), (3, 2), rng, |t, a, b| t.matmul_nt(a, b))?;
    two("add", random(3, 2, rng), random(3, 2, rng), (3, 2), rng, |t, a, b| t.add(a, b))?;
    two("sub", random(3, 2, rng), random(3, 2, rng), (3, 2), rng, |t, a, b| t.sub(a, b))?;
    two("mul", random(3, 2, rng), random(3, 2, rng), (3, 2), rng, |t, a, b| t.mul(a, b))?;
    two("add_row", random(3, 4, rng), random(1, 4, rng), (3, 4), rng, |t, a, b| t.add_row(a, b))?;
    two("row_dot", random(4, 3, rng), random(4, 3, rng), (4, 1), rng, |t, a, b| t.row_dot(a, b))?;
    two("concat_cols", random(3, 2, rng), random(3, 3, rng), (3, 5), rng, |t, a, b| t.concat_cols(&[a, b]))?;

    let mut one = |name: &str, a: Matrix, out: (usize, usize), rng: &mut Rng, op: fn(&mut Tape, NodeId) -> Result<NodeId>| -> Result<()> {
        let mut ps = ParamStore::new();
        let ia = ps.add("a", a)?;
        let w = random(out.0, out.1, rng);
        let build: Build = Box::new(move |t, s| {
            let a = t.param(s, ia);
            let y = op(t, a)?;
            weighted_sum(t, y, &w)
        });
        cases.push((name.to_string(), ps, build));
        Ok(())
    };
    one("transpose", random(3, 2, rng), (2, 3), rng, |t, a| t.transpose(a))?;
    one("scale", random(3, 2, rng), (3, 2), rng, |t, a| t.scale(a, -1.7))?;
    one("tanh", random(3, 3, rng), (3, 3), rng, |t, a| t.tanh(a))?;
    let relu_in = away_from_zero(3, 3, rng);
    one("relu", relu_in, (3, 3), rng, |t, a| t.relu(a))?;
    one("sigmoid", random(3, 3, rng), (3, 3), rng, |t, a| t.sigmoid(a))?;
    one("softmax_rows", random(3, 4, rng).map(|x| 3.0 * x), (3, 4), rng, |t, a| t.softmax_rows(a))?;
    one("select_rows", random(4, 2, rng), (3, 2), rng, |t, a| t.select_rows(a, &[2, 0, 2]))?;
    one("mean", random(3, 2, rng), (1, 1), rng, |t, a| t.mean(a))?;
    one("sum", random(3, 2, rng), (1, 1), rng, |t, a| t.sum(a))?;

    let mut ps = ParamStore::new();
    let ia = ps.add("logits", random(5, 1, rng))?;
    let targets = Matrix::from_vec(5, 1, vec![1.0, 0.0, 0.0, 1.0, 0.0])?;
    cases.push((
        "bce".into(),
        ps,
        Box::new(move |t, s| {
            let a = t.param(s, ia);
            let p = t.sigmoid(a)?;
            t.bce(p, targets.clone())
        }),
    ));
    Ok(cases)
}

/// Four labels (the last unseen), six tokens, two documents.
pub struct ToyProblem {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub context: LabelContext,
    pub embeddings: EmbeddingTable,
    pub docs: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn toy_problem(fusion: FusionMode, graphs: &[GraphKind], seed: u64) -> Result<ToyProblem> {
    let mut rng = Rng::new(seed);
    let config = ModelConfig {
        embed_dim: 3,
        filters: 4,
        kernel: 2,
        gcn_hidden: 3,
        gcn_out: 3,
        fusion_dim: 3,
        graphs: graphs.to_vec(),
        fusion,
    };
    let model = KamgModel::new(config.clone(), &mut rng)?;
    // Non-zero biases so their gradients are exercised away from the
    // symmetric starting point.
    let mut params = model.params().clone();
    for id in params.ids().collect::<Vec<_>>() {
        if params.name(id).ends_with(".b0") || params.name(id).ends_with(".b4") || params.name(id).ends_with(".b") {
            let m = params.get(id);
            let (r, c) = (m.rows(), m.cols());
            *params.get_mut(id) = random(r, c, &mut rng).map(|x| 0.3 * x);
        }
    }
    let embeddings = EmbeddingTable::from_parts(random(6, 3, &mut rng), vec![true; 6])?;
    let labels = random(4, 3, &mut rng);
    let hierarchy = Matrix::from_rows(&[
        vec![1.0, 1.0, 0.0, 0.0],
        vec![1.0, 1.0, 1.0, 1.0],
        vec![0.0, 1.0, 1.0, 0.0],
        vec![0.0, 1.0, 0.0, 1.0],
    ])?;
    let similarity = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.6, 0.8],
        vec![0.0, 1.0, 0.5, 0.0],
        vec![0.6, 0.5, 1.0, 0.0],
        vec![0.8, 0.0, 0.0, 1.0],
    ])?;
    let cooc = Matrix::from_rows(&[
        vec![1.0, 2.0, 1.0, 0.0],
        vec![2.0, 1.0, 0.0, 0.0],
        vec![1.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ])?;
    let all = [
        LabelGraph::new(GraphKind::Hierarchy, hierarchy)?,
        LabelGraph::new(GraphKind::Similarity, similarity)?,
        LabelGraph::new(GraphKind::Cooccurrence, cooc)?,
    ];
    let context = LabelContext::new(&config, labels, &all)?;
    Ok(ToyProblem {
        config,
        params,
        context,
        embeddings,
        docs: vec![(vec![2, 3, 4, 1, 5], vec![0, 2]), (vec![5, 0, 3], vec![1])],
    })
}

impl ToyProblem {
    /// Mean loss over both documents, optionally under a fixed dropout mask.
    pub fn loss(&self, tape: &mut Tape, params: &ParamStore, dropout_seed: Option<u64>) -> Result<NodeId> {
        let model = KamgModel::from_params(self.config.clone(), params.clone())?;
        let docs = self.docs.iter().map(|(t, g)| (t.as_slice(), g.as_slice()));
        match dropout_seed {
            None => model.batch_loss(tape, &self.context, &self.embeddings, docs, None),
            Some(seed) => {
                let mut rng = Rng::new(seed);
                model.batch_loss(tape, &self.context, &self.embeddings, docs, Some((0.7, &mut rng)))
            }
        }
    }
}

/// Finite-difference checks of every tape primitive and of the full model
/// loss on the toy problem under each fusion mode.
pub fn gradient_suite(seed: u64) -> Result<GradientReport> {
    let started = Instant::now();
    let mut rng = Rng::new(seed);
    let mut report = GradientReport::default();
    for (name, params, build) in primitive_cases(&mut rng)? {
        let r = finite_difference_check(&params, DEFAULT_FD_EPS, |t, s| build(t, s))?;
        report.cases.push(GradCase {
            name,
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
        });
    }
    let gsc = [GraphKind::Hierarchy, GraphKind::Similarity, GraphKind::Cooccurrence];
    let end_to_end = [
        ("kamg post {g,s,c}", FusionMode::PostGcn, &gsc[..], None),
        ("kamg pre {g,s,c}", FusionMode::PreGcnMerge, &gsc[..], None),
        ("kamg post {g}", FusionMode::PostGcn, &gsc[..1], None),
        ("kamg no graphs", FusionMode::None, &gsc[..0], None),
        ("kamg post {g,s,c} dropout", FusionMode::PostGcn, &gsc[..], Some(11)),
    ];
    for (name, fusion, graphs, dropout) in end_to_end {
        let toy = toy_problem(fusion, graphs, seed ^ 0x5eed)?;
        let r = finite_difference_check(&toy.params, DEFAULT_FD_EPS, |t, s| toy.loss(t, s, dropout))?;
        report.cases.push(GradCase {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
        });
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_ndcg_example() {
        // gold {a,b}, ranking [b, x, a]
        let scores = [0.1, 0.9, 0.5];
        let v = brute_force_metric(Metric::Ndcg, &scores, &[0, 1, 2], &[0, 1], 3);
        assert!((v - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-15);
    }

    #[test]
    fn brute_force_rank_breaks_ties_by_id() {
        let scores = [0.5, 0.5, 0.9];
        assert_eq!(brute_force_rank(&scores, &[0, 1, 2], 2), 0);
        assert_eq!(brute_force_rank(&scores, &[0, 1, 2], 0), 1);
        assert_eq!(brute_force_rank(&scores, &[0, 1, 2], 1), 2);
    }

    #[test]
    fn small_metric_suite_passes() {
        let r = metric_oracle_suite(50, 3).unwrap();
        assert!(r.passed(), "{:?}", r.mismatches);
        assert!(r.checks > 500);
    }
}
