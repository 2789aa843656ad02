//! Synthetic multi-label corpora with a controlled zero-shot structure.
//!
//! Every label owns a set of topic words. Frequent labels hang off internal
//! group nodes of the taxonomy; few-shot and unseen labels are children of a
//! frequent label and borrow part of their parent's words. Word vectors
//! cluster around per-label centroids, so descriptions of related labels end
//! up close in embedding space.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Label, LabelCatalog, Split};
use crate::error::{Error, Result};
use crate::labelgraphs::Taxonomy;
use crate::numerics::Rng;
use crate::textpipe::{tokenize, WordVectors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub frequent_labels: usize,
    pub few_labels: usize,
    pub zero_labels: usize,
    /// Train occurrences of a few-shot label are drawn from `1..=few_max`.
    pub few_max: usize,
    pub groups: usize,
    pub words_per_label: usize,
    /// Fraction of a child label's words taken from its parent.
    pub parent_overlap: f64,
    /// Fraction of a child label's words taken from a frequent label in
    /// another group. Only description similarity reveals this link.
    pub related_overlap: f64,
    /// Probability that a child is filed under a wrong frequent parent in
    /// the taxonomy file. Its words still come from the true parent.
    pub taxonomy_noise: f64,
    pub noise_vocab: usize,
    /// Probability that a document token is a noise word.
    pub noise_rate: f64,
    pub tokens_per_doc: usize,
    /// Probability that a document carries a second, related label.
    pub second_label_rate: f64,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub embed_dim: usize,
    /// Weight of the parent centroid in a child label's centroid.
    pub centroid_inheritance: f64,
    /// Spread of word vectors around their label centroid.
    pub embed_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            frequent_labels: 30,
            few_labels: 10,
            zero_labels: 10,
            few_max: 5,
            groups: 6,
            words_per_label: 6,
            parent_overlap: 0.5,
            related_overlap: 0.0,
            taxonomy_noise: 0.0,
            noise_vocab: 200,
            noise_rate: 0.3,
            tokens_per_doc: 24,
            second_label_rate: 0.3,
            train_docs: 2000,
            dev_docs: 200,
            test_docs: 400,
            embed_dim: 16,
            centroid_inheritance: 0.5,
            embed_noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Noise-free, one label per document, disjoint topics, no unseen labels.
    pub fn separable(seed: u64) -> Self {
        SyntheticSpec {
            frequent_labels: 12,
            few_labels: 0,
            zero_labels: 0,
            groups: 3,
            parent_overlap: 0.0,
            related_overlap: 0.0,
            noise_rate: 0.0,
            second_label_rate: 0.0,
            train_docs: 360,
            dev_docs: 60,
            test_docs: 60,
            tokens_per_doc: 12,
            seed,
            ..Default::default()
        }
    }

    pub fn label_count(&self) -> usize {
        self.frequent_labels + self.few_labels + self.zero_labels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.frequent_labels == 0 {
            return bad("at least one frequent label is required".into());
        }
        if self.zero_labels > 0 && !(self.parent_overlap > 0.0) && !(self.centroid_inheritance > 0.0) {
            return bad("unseen labels would share nothing with any seen label".into());
        }
        if self.groups == 0 || self.groups > self.frequent_labels {
            return bad(format!("groups must be in 1..={}", self.frequent_labels));
        }
        if self.few_max == 0 {
            return bad("few_max must be at least 1".into());
        }
        if self.words_per_label == 0 || self.tokens_per_doc == 0 || self.embed_dim == 0 {
            return bad("words_per_label, tokens_per_doc and embed_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.parent_overlap)
            || !(0.0..=1.0).contains(&self.noise_rate)
            || !(0.0..=1.0).contains(&self.second_label_rate)
            || !(0.0..=1.0).contains(&self.centroid_inheritance)
            || !(0.0..=1.0).contains(&self.related_overlap)
            || !(0.0..=1.0).contains(&self.taxonomy_noise)
            || self.parent_overlap + self.related_overlap > 1.0
        {
            return bad("rates and fractions must lie in [0, 1]".into());
        }
        if self.noise_rate > 0.0 && self.noise_vocab == 0 {
            return bad("noise_rate > 0 needs a noise vocabulary".into());
        }
        let few_docs = self.few_labels * self.few_max;
        let needed = few_docs + self.frequent_labels * (self.few_max + 1);
        if self.train_docs < needed {
            return bad(format!(
                "{} train documents cannot keep every frequent label above {} occurrences (need {needed})",
                self.train_docs, self.few_max
            ));
        }
        if self.dev_docs == 0 || self.test_docs == 0 {
            return bad("dev and test splits must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub taxonomy: Taxonomy,
    pub vectors: WordVectors,
    /// Seen parent of each label, `None` for frequent labels.
    pub parents: Vec<Option<usize>>,
    /// Frequent label outside the parent's group that a child borrows from.
    pub related: Vec<Option<usize>>,
    pub topic_words: Vec<Vec<String>>,
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    normalized((0..dim).map(|_| rng.normal()).collect())
}

/// Generates a corpus, its taxonomy and word vectors; deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut rng_struct = root.fork(10);
    let mut rng_embed = root.fork(11);
    let mut rng_docs = root.fork(12);

    let nf = spec.frequent_labels;
    let n_few = spec.few_labels;
    let n = spec.label_count();
    let few_range = nf..nf + n_few;
    let is_zero = |l: usize| l >= nf + n_few;

    // Frequent labels are spread round-robin over groups; children pick a
    // frequent parent uniformly.
    let group_of: Vec<usize> = (0..nf).map(|l| l % spec.groups).collect();
    let parents: Vec<Option<usize>> = (0..n)
        .map(|l| if l < nf { None } else { Some(rng_struct.index(nf)) })
        .collect();

    let related: Vec<Option<usize>> = parents
        .iter()
        .map(|p| {
            let p = (*p)?;
            if spec.related_overlap == 0.0 {
                return None;
            }
            let others: Vec<usize> = (0..nf).filter(|&m| group_of[m] != group_of[p]).collect();
            (!others.is_empty()).then(|| others[rng_struct.index(others.len())])
        })
        .collect();

    let own_word = |l: usize, j: usize| format!("t{l}x{j}");
    let share = |f: f64| ((spec.words_per_label as f64) * f).round() as usize;
    let mut topic_words: Vec<Vec<String>> = Vec::with_capacity(n);
    for l in 0..n {
        let words = match parents[l] {
            None => (0..spec.words_per_label).map(|j| own_word(l, j)).collect(),
            Some(p) => {
                let from_parent = share(spec.parent_overlap).min(spec.words_per_label);
                let mut w: Vec<String> = rng_struct
                    .sample_indices(spec.words_per_label, from_parent)
                    .into_iter()
                    .map(|j| own_word(p, j))
                    .collect();
                if let Some(r) = related[l] {
                    let from_related = share(spec.related_overlap).min(spec.words_per_label - w.len());
                    w.extend(
                        rng_struct
                            .sample_indices(spec.words_per_label, from_related)
                            .into_iter()
                            .map(|j| own_word(r, j)),
                    );
                }
                let borrowed = w.len();
                w.extend((borrowed..spec.words_per_label).map(|j| own_word(l, j)));
                w
            }
        };
        topic_words.push(words);
    }

    let mut labels = Vec::with_capacity(n);
    for l in 0..n {
        let code = if l < nf {
            format!("F{l:03}")
        } else if few_range.contains(&l) {
            format!("R{l:03}")
        } else {
            format!("Z{l:03}")
        };
        labels.push(Label {
            code,
            description: topic_words[l].join(" "),
            unseen: is_zero(l),
        });
    }
    let catalog = LabelCatalog::new(labels)?;

    let mut edges = Vec::new();
    for l in 0..n {
        let child = catalog.label(l).code.clone();
        let parent = match parents[l] {
            None => format!("G{}", group_of[l]),
            Some(p) => {
                let mut filed = p;
                if nf > 1 && rng_struct.bernoulli(spec.taxonomy_noise) {
                    while filed == p {
                        filed = rng_struct.index(nf);
                    }
                }
                catalog.label(filed).code.clone()
            }
        };
        edges.push((child, parent));
    }
    let taxonomy = Taxonomy { edges };

    // Word vectors: label centroids, children inheriting part of the parent's.
    let d = spec.embed_dim;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n);
    for l in 0..n {
        let fresh = random_unit(&mut rng_embed, d);
        let c = match parents[l] {
            None => fresh,
            Some(p) => {
                let a = spec.centroid_inheritance;
                normalized(
                    centroids[p]
                        .iter()
                        .zip(&fresh)
                        .map(|(pc, f)| a * pc + (1.0 - a) * f)
                        .collect(),
                )
            }
        };
        centroids.push(c);
    }
    let spread = spec.embed_noise / (d as f64).sqrt();
    let mut entries = Vec::new();
    for l in 0..n {
        for j in 0..spec.words_per_label {
            let word = own_word(l, j);
            if !topic_words[l].contains(&word) {
                continue;
            }
            let v = centroids[l].iter().map(|c| c + spread * rng_embed.normal()).collect();
            entries.push((word, v));
        }
    }
    let noise_word = |j: usize| format!("n{j}");
    for j in 0..spec.noise_vocab {
        entries.push((noise_word(j), random_unit(&mut rng_embed, d)));
    }
    let vectors = WordVectors { dim: d, entries };

    // Train label plan: few-shot labels get an exact count, frequent labels
    // cycle over the remaining documents.
    let mut plan: Vec<usize> = Vec::with_capacity(spec.train_docs);
    for l in few_range.clone() {
        let count = 1 + rng_docs.index(spec.few_max);
        plan.extend(std::iter::repeat(l).take(count));
    }
    let mut cycle = 0;
    while plan.len() < spec.train_docs {
        plan.push(cycle % nf);
        cycle += 1;
    }
    rng_docs.shuffle(&mut plan);

    let make_doc = |rng: &mut Rng, primary: usize, split: Split, index: usize| -> Document {
        let mut doc_labels = vec![primary];
        if rng.bernoulli(spec.second_label_rate) {
            // Related codes co-occur: a child with its parent, a frequent
            // label with another member of its group.
            let second = match parents[primary] {
                Some(p) => Some(p),
                None => {
                    let mates: Vec<usize> = (0..nf)
                        .filter(|&m| m != primary && group_of[m] == group_of[primary])
                        .collect();
                    (!mates.is_empty()).then(|| mates[rng.index(mates.len())])
                }
            };
            doc_labels.extend(second);
        }
        let words: Vec<String> = (0..spec.tokens_per_doc)
            .map(|_| {
                if rng.bernoulli(spec.noise_rate) {
                    noise_word(rng.index(spec.noise_vocab))
                } else {
                    let l = doc_labels[rng.index(doc_labels.len())];
                    topic_words[l][rng.index(topic_words[l].len())].clone()
                }
            })
            .collect();
        doc_labels.sort_unstable();
        let text = words.join(" ");
        Document {
            id: format!("{split}-{index:05}"),
            tokens: tokenize(&text),
            text,
            labels: doc_labels,
            split,
        }
    };

    let mut documents = Vec::with_capacity(spec.train_docs + spec.dev_docs + spec.test_docs);
    for (i, &primary) in plan.iter().enumerate() {
        documents.push(make_doc(&mut rng_docs, primary, Split::Train, i));
    }
    // Held-out splits cycle over every label so each bucket is represented.
    for (split, count) in [(Split::Dev, spec.dev_docs), (Split::Test, spec.test_docs)] {
        let mut primaries: Vec<usize> = (0..count).map(|i| i % n).collect();
        rng_docs.shuffle(&mut primaries);
        for (i, primary) in primaries.into_iter().enumerate() {
            documents.push(make_doc(&mut rng_docs, primary, split, i));
        }
    }

    let corpus = Corpus { catalog, documents };
    corpus.check_train_labels()?;
    let freq = corpus.train_label_frequency();
    assert!(
        (0..n).filter(|&l| is_zero(l)).all(|l| freq[l] == 0),
        "synthetic train split contains an unseen label"
    );
    Ok(SyntheticData {
        corpus,
        taxonomy,
        vectors,
        parents,
        related,
        topic_words,
    })
}
