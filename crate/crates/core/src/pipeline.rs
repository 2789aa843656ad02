//! Turns a corpus, taxonomy and word vectors into everything a training run
//! consumes: vocabulary, frozen embeddings, label vectors, the three label
//! graphs and frequency buckets.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelCatalog, Split};
use crate::error::{Error, Result};
use crate::evalmetrics::{assign_buckets, BucketAssignment};
use crate::labelgraphs::{
    build_cooccurrence_graph, build_hierarchy_graph, build_similarity_graph, GraphKind, LabelGraph, Taxonomy,
};
use crate::numerics::{Matrix, Rng};
use crate::textpipe::{embedding_table, label_embedding, EmbeddingTable, IdfTable, Vocab, WordVectors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub min_count: usize,
    /// Neighbours per label in the similarity graph.
    pub sim_k: usize,
    /// Minimum cosine for a similarity edge.
    pub sim_tau: f64,
    pub few_threshold: usize,
    /// Documents are truncated to this many tokens.
    pub max_len: usize,
    /// Seed for fallback embedding rows.
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            min_count: 1,
            sim_k: 10,
            sim_tau: 0.3,
            few_threshold: 5,
            max_len: 2500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDoc {
    pub id: String,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub catalog: LabelCatalog,
    pub vocab: Vocab,
    pub embeddings: EmbeddingTable,
    /// Row `l` is the TF-IDF weighted description embedding of label `l`.
    pub label_embeddings: Matrix,
    /// Labels whose description had no pretrained token (zero vector).
    pub uncovered_labels: Vec<usize>,
    /// Hierarchy, similarity and co-occurrence graphs, in that order.
    pub graphs: Vec<LabelGraph>,
    pub buckets: BucketAssignment,
    pub train: Vec<EncodedDoc>,
    pub dev: Vec<EncodedDoc>,
    pub test: Vec<EncodedDoc>,
}

impl PreparedData {
    pub fn graph(&self, kind: GraphKind) -> Option<&LabelGraph> {
        self.graphs.iter().find(|g| g.kind() == kind)
    }

    pub fn split(&self, split: Split) -> &[EncodedDoc] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn label_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.label_embeddings.rows())
            .map(|l| self.label_embeddings.row(l).to_vec())
            .collect()
    }
}

pub fn prepare(
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    vectors: &WordVectors,
    opts: &PrepareOptions,
) -> Result<PreparedData> {
    corpus.check_train_labels()?;
    let catalog = &corpus.catalog;
    if catalog.is_empty() {
        return Err(Error::Input("label catalog is empty".into()));
    }

    let mut vocab_source: Vec<&[String]> = corpus
        .split(Split::Train)
        .map(|d| d.tokens.as_slice())
        .collect();
    vocab_source.extend(catalog.descriptions().iter().map(Vec::as_slice));
    let vocab = Vocab::build(vocab_source, opts.min_count);

    let mut rng = Rng::new(opts.seed).fork(3);
    let embeddings = embedding_table(vectors, &vocab, &mut rng)?;
    let idf = IdfTable::compute(catalog.descriptions())?;

    let d = embeddings.dim();
    let mut label_embeddings = Matrix::zeros(catalog.len(), d);
    let mut uncovered_labels = Vec::new();
    for l in 0..catalog.len() {
        let e = label_embedding(catalog.description_tokens(l), &vocab, &embeddings, &idf);
        if e.uncovered {
            uncovered_labels.push(l);
        }
        label_embeddings.row_mut(l).copy_from_slice(&e.vector);
    }

    let train_labels: Vec<Vec<usize>> = corpus.split(Split::Train).map(|d| d.labels.clone()).collect();
    let vecs: Vec<Vec<f64>> = (0..catalog.len())
        .map(|l| label_embeddings.row(l).to_vec())
        .collect();
    let sim_k = opts.sim_k.min(catalog.len().saturating_sub(1)).max(1);
    let graphs = vec![
        build_hierarchy_graph(taxonomy, catalog)?,
        if catalog.len() > 1 {
            build_similarity_graph(&vecs, sim_k, opts.sim_tau)?
        } else {
            LabelGraph::new(GraphKind::Similarity, Matrix::identity(1))?
        },
        build_cooccurrence_graph(&train_labels, catalog)?,
    ];
    let buckets = assign_buckets(&corpus.train_label_frequency(), opts.few_threshold)?;

    let encode = |split: Split| -> Result<Vec<EncodedDoc>> {
        corpus
            .split(split)
            .map(|d| {
                if d.tokens.is_empty() {
                    return Err(Error::Input(format!("document {:?} has no tokens", d.id)));
                }
                let take = d.tokens.len().min(opts.max_len.max(1));
                Ok(EncodedDoc {
                    id: d.id.clone(),
                    tokens: vocab.encode(&d.tokens[..take]),
                    labels: d.labels.clone(),
                })
            })
            .collect()
    };
    let train = encode(Split::Train)?;
    let dev = encode(Split::Dev)?;
    let test = encode(Split::Test)?;

    Ok(PreparedData {
        catalog: catalog.clone(),
        vocab,
        embeddings,
        label_embeddings,
        uncovered_labels,
        graphs,
        buckets,
        train,
        dev,
        test,
    })
}
