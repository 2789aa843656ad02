//! Tokenization, vocabulary, word embeddings, and TF-IDF weighted label
//! embeddings built from label descriptions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{glorot_uniform_init, Matrix, Rng};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    counts: Vec<usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_count` times. Ids are assigned by
    /// descending frequency, ties broken lexicographically, after the
    /// reserved padding and unknown ids.
    pub fn build<D, T>(corpus: D, min_count: usize) -> Vocab
    where
        D: IntoIterator<Item = T>,
        T: AsRef<[String]>,
    {
        let min_count = min_count.max(1);
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        let docs: Vec<T> = corpus.into_iter().collect();
        for doc in &docs {
            for tok in doc.as_ref() {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Vocab {
            index: HashMap::new(),
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            counts: vec![0, 0],
        };
        vocab.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        vocab.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for (tok, count) in kept {
            vocab.index.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
            vocab.counts.push(count);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content hash over the ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Word vectors indexed by vocabulary id.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Matrix,
    pretrained: Vec<bool>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.rows.row(id)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    /// Whether the row for `id` came from the pretrained file.
    pub fn is_pretrained(&self, id: usize) -> bool {
        self.pretrained[id]
    }

    pub fn coverage(&self) -> usize {
        self.pretrained.iter().filter(|&&p| p).count()
    }

    /// Builds a table directly from rows; `pretrained[i]` flags row `i`.
    pub fn from_parts(rows: Matrix, pretrained: Vec<bool>) -> Result<Self> {
        if pretrained.len() != rows.rows() {
            return Err(dim_err!(
                "{} coverage flags for {} rows",
                pretrained.len(),
                rows.rows()
            ));
        }
        if !rows.is_finite() {
            return Err(Error::Numeric("embedding rows must be finite".into()));
        }
        Ok(EmbeddingTable {
            dim: rows.cols(),
            rows,
            pretrained,
        })
    }
}

/// Parsed contents of a word-vector text file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

/// Parses the whitespace-delimited word-vector format: an optional
/// `count dim` header, then `token v1 … vd` per line.
pub fn parse_word_vectors(text: &str, dim: usize) -> Result<WordVectors> {
    let mut out = WordVectors {
        dim,
        entries: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            let header_dim: usize = fields[1].parse().unwrap_or(0);
            if header_dim != dim {
                return Err(dim_err!("embedding header declares dim {header_dim}, expected {dim}"));
            }
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected a token and {dim} values, found {} values", fields.len() - 1),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("bad value {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.entries.push((fields[0].to_string(), values));
    }
    Ok(out)
}

/// Serializes word vectors with a header, single spaces and `\n` endings.
/// Values use the shortest representation that parses back bit-exactly.
pub fn format_word_vectors(vectors: &WordVectors) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", vectors.entries.len(), vectors.dim);
    for (tok, vals) in &vectors.entries {
        s.push_str(tok);
        for v in vals {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

/// Maps pretrained vectors onto `vocab`. Tokens the file does not cover get
/// Glorot-initialized rows and are flagged as fallback; padding is zero.
pub fn embedding_table(vectors: &WordVectors, vocab: &Vocab, rng: &mut Rng) -> Result<EmbeddingTable> {
    let d = vectors.dim;
    let mut rows = glorot_uniform_init(vocab.len(), d, rng)?;
    let mut pretrained = vec![false; vocab.len()];
    rows.row_mut(PAD_ID).fill(0.0);
    for (tok, vals) in &vectors.entries {
        if vals.len() != d {
            return Err(dim_err!("vector for {tok:?} has {} values, expected {d}", vals.len()));
        }
        if let Some(id) = vocab.get(tok) {
            if id == PAD_ID {
                continue;
            }
            rows.row_mut(id).copy_from_slice(vals);
            pretrained[id] = true;
        }
    }
    EmbeddingTable::from_parts(rows, pretrained)
}

pub fn load_embeddings(path: &Path, vocab: &Vocab, dim: usize, rng: &mut Rng) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vectors = parse_word_vectors(&text, dim)?;
    embedding_table(&vectors, vocab, rng)
}

/// Smoothed inverse document frequency over a description corpus.
#[derive(Clone, Debug)]
pub struct IdfTable {
    n_docs: usize,
    weights: HashMap<String, f64>,
}

impl IdfTable {
    /// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`.
    pub fn compute<D, T>(descriptions: D) -> Result<Self>
    where
        D: IntoIterator<Item = T>,
        T: AsRef<[String]>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0;
        for desc in descriptions {
            n += 1;
            let mut seen: Vec<&String> = desc.as_ref().iter().collect();
            seen.sort();
            seen.dedup();
            for t in seen {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        if n == 0 {
            return Err(Error::Input("idf needs at least one description".into()));
        }
        let weights = df
            .into_iter()
            .map(|(t, c)| (t, smoothed_idf(n, c)))
            .collect();
        Ok(IdfTable { n_docs: n, weights })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn idf(&self, token: &str) -> f64 {
        self.weights
            .get(token)
            .copied()
            .unwrap_or_else(|| smoothed_idf(self.n_docs, 0))
    }
}

fn smoothed_idf(n: usize, df: usize) -> f64 {
    ((1.0 + n as f64) / (1.0 + df as f64)).ln() + 1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedding {
    pub vector: Vec<f64>,
    /// Set when no description token had a pretrained vector.
    pub uncovered: bool,
}

/// TF-IDF weighted average of pretrained vectors of a description's tokens.
/// Tokens without pretrained coverage are left out of the average.
pub fn label_embedding(
    description: &[String],
    vocab: &Vocab,
    table: &EmbeddingTable,
    idf: &IdfTable,
) -> LabelEmbedding {
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in description {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let mut acc = vec![0.0; table.dim()];
    let mut total = 0.0;
    for (tok, count) in tf {
        let Some(id) = vocab.get(tok) else { continue };
        if !table.is_pretrained(id) {
            continue;
        }
        let w = count as f64 * idf.idf(tok);
        for (a, e) in acc.iter_mut().zip(table.row(id)) {
            *a += w * e;
        }
        total += w;
    }
    if total == 0.0 {
        return LabelEmbedding {
            vector: acc,
            uncovered: true,
        };
    }
    for a in &mut acc {
        *a /= total;
    }
    LabelEmbedding {
        vector: acc,
        uncovered: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Acute kidney failure"), toks(&["acute", "kidney", "failure"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("ICD-9-CM, v2"), toks(&["icd", "9", "cm", "v2"]));
    }

    #[test]
    fn vocab_ordering_and_threshold() {
        let corpus = vec![toks(&["a", "b"]), toks(&["a"])];
        let v = Vocab::build(&corpus, 1);
        assert_eq!(v.get(PAD_TOKEN), Some(0));
        assert_eq!(v.get(UNK_TOKEN), Some(1));
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), Some(3));

        let v = Vocab::build(&corpus, 2);
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), UNK_ID);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocab::build(vec![toks(&["zeta", "alpha", "mu"])], 1);
        assert_eq!(v.tokens()[2..], toks(&["alpha", "mu", "zeta"])[..]);
        let w = Vocab::build(vec![toks(&["mu"]), toks(&["zeta", "alpha"])], 1);
        assert_eq!(v, w);
    }

    fn vocab_ab() -> Vocab {
        Vocab::build(vec![toks(&["a", "a", "b", "c"])], 1)
    }

    #[test]
    fn table_copies_pretrained_and_flags_fallback() {
        let vocab = vocab_ab();
        let wv = parse_word_vectors("a 1.0 0.0\n", 2).unwrap();
        let t = embedding_table(&wv, &vocab, &mut Rng::new(0)).unwrap();
        let a = vocab.id("a");
        assert_eq!(t.row(a), &[1.0, 0.0]);
        assert!(t.is_pretrained(a));
        assert!(!t.is_pretrained(vocab.id("b")));
        assert_eq!(t.row(PAD_ID), &[0.0, 0.0]);
    }

    #[test]
    fn short_line_is_parse_error_with_line() {
        let mut text = String::from("2 3\nx 1 2 3\n");
        text.push_str("y 1 2\n");
        match parse_word_vectors(&text, 3) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_word_vectors("5 200\n", 199), Err(Error::Dimension(_))));
    }

    #[test]
    fn idf_formula() {
        let idf = IdfTable::compute(vec![toks(&["x", "y"]), toks(&["x"])]).unwrap();
        assert_eq!(idf.idf("x"), 1.0);
        assert!((idf.idf("y") - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-15);
        assert!((idf.idf("y") - 1.40546).abs() < 1e-5);
        assert!((idf.idf("never") - (3.0f64.ln() + 1.0)).abs() < 1e-15);
        assert!(IdfTable::compute(Vec::<Vec<String>>::new()).is_err());
    }

    #[test]
    fn idf_counts_documents_not_occurrences() {
        let idf = IdfTable::compute(vec![toks(&["x", "x", "x"]), toks(&["y"])]).unwrap();
        assert_eq!(idf.idf("x"), idf.idf("y"));
    }

    fn table_ab(a: [f64; 2], b: [f64; 2]) -> (Vocab, EmbeddingTable) {
        let vocab = vocab_ab();
        let mut wv = WordVectors { dim: 2, entries: Vec::new() };
        wv.entries.push(("a".into(), a.to_vec()));
        wv.entries.push(("b".into(), b.to_vec()));
        let t = embedding_table(&wv, &vocab, &mut Rng::new(1)).unwrap();
        (vocab, t)
    }

    #[test]
    fn single_token_description_is_its_vector() {
        let (vocab, table) = table_ab([0.3, -0.2], [1.0, 1.0]);
        let idf = IdfTable::compute(vec![toks(&["a"]), toks(&["b"])]).unwrap();
        let e = label_embedding(&toks(&["a"]), &vocab, &table, &idf);
        assert_eq!(e.vector, vec![0.3, -0.2]);
        assert!(!e.uncovered);
    }

    #[test]
    fn equal_weights_average() {
        let (vocab, table) = table_ab([1.0, 0.0], [0.0, 1.0]);
        let idf = IdfTable::compute(vec![toks(&["a", "b"])]).unwrap();
        let e = label_embedding(&toks(&["b", "a"]), &vocab, &table, &idf);
        assert_eq!(e.vector, vec![0.5, 0.5]);
    }

    #[test]
    fn weighted_mean_matches_brute_force() {
        let (vocab, table) = table_ab([2.0, -1.0], [0.5, 4.0]);
        // descriptions: ["a","a","b"], ["b"], ["c"] ⇒ N=3, df(a)=1, df(b)=2
        let descs = vec![toks(&["a", "a", "b"]), toks(&["b"]), toks(&["c"])];
        let idf = IdfTable::compute(&descs).unwrap();
        let e = label_embedding(&descs[0], &vocab, &table, &idf);

        let idf_a = (4.0f64 / 2.0).ln() + 1.0;
        let idf_b = (4.0f64 / 3.0).ln() + 1.0;
        let (wa, wb) = (2.0 * idf_a, 1.0 * idf_b);
        let expect = [
            (wa * 2.0 + wb * 0.5) / (wa + wb),
            (wa * -1.0 + wb * 4.0) / (wa + wb),
        ];
        for (x, y) in e.vector.iter().zip(expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn uncovered_description_is_zero_with_flag() {
        let (vocab, table) = table_ab([1.0, 0.0], [0.0, 1.0]);
        let idf = IdfTable::compute(vec![toks(&["c"])]).unwrap();
        let e = label_embedding(&toks(&["c", "zzz"]), &vocab, &table, &idf);
        assert!(e.uncovered);
        assert_eq!(e.vector, vec![0.0, 0.0]);
    }

    #[test]
    fn word_vector_round_trip_is_bit_exact() {
        let mut rng = Rng::new(4);
        let mut wv = WordVectors { dim: 3, entries: Vec::new() };
        for i in 0..10 {
            let vals = (0..3).map(|_| rng.normal() * 1e3_f64.powi(i % 3 - 1)).collect();
            wv.entries.push((format!("w{i}"), vals));
        }
        let text = format_word_vectors(&wv);
        let back = parse_word_vectors(&text, 3).unwrap();
        assert_eq!(back, wv);
        assert!(text.lines().skip(1).all(|l| !l.contains("  ")));
    }
}
