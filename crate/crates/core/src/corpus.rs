//! Documents, label catalogs and their line-delimited JSON file formats.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textpipe::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub code: String,
    pub description: String,
    /// Held out of training: no train document may carry this label.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unseen: bool,
}

/// Ordered label set. A label's position is its id everywhere: graph rows,
/// embedding rows, score vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelCatalog {
    labels: Vec<Label>,
    descriptions: Vec<Vec<String>>,
    by_code: HashMap<String, usize>,
}

impl LabelCatalog {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        let mut by_code = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if by_code.insert(l.code.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate label code {:?}", l.code)));
            }
        }
        let descriptions = labels.iter().map(|l| tokenize(&l.description)).collect();
        Ok(LabelCatalog {
            labels,
            descriptions,
            by_code,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> &Label {
        &self.labels[id]
    }

    pub fn id(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    pub fn description_tokens(&self, id: usize) -> &[String] {
        &self.descriptions[id]
    }

    pub fn descriptions(&self) -> &[Vec<String>] {
        &self.descriptions
    }

    pub fn is_unseen(&self, id: usize) -> bool {
        self.labels[id].unseen
    }

    /// Reorders labels so that new id `i` is old id `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        LabelCatalog::new(perm.iter().map(|&i| self.labels[i].clone()).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One JSON object per line: `{"code", "description", "unseen"?}`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: Label = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            labels.push(l);
        }
        LabelCatalog::new(labels)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.labels {
            s.push_str(&serde_json::to_string(l).expect("label serializes"));
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    /// Sorted, deduplicated catalog ids.
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    text: String,
    labels: Vec<String>,
    split: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub catalog: LabelCatalog,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Training-set frequency of every catalog label.
    pub fn train_label_frequency(&self) -> Vec<usize> {
        let mut freq = vec![0; self.catalog.len()];
        for d in self.split(Split::Train) {
            for &l in &d.labels {
                freq[l] += 1;
            }
        }
        freq
    }

    /// Fails if any training document carries a label marked unseen.
    pub fn check_train_labels(&self) -> Result<()> {
        let mut offenders = BTreeMap::new();
        for d in self.split(Split::Train) {
            for &l in &d.labels {
                if self.catalog.is_unseen(l) {
                    offenders
                        .entry(self.catalog.label(l).code.clone())
                        .or_insert_with(|| d.id.clone());
                }
            }
        }
        if offenders.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = offenders
            .into_iter()
            .map(|(code, doc)| format!("{code} (doc {doc})"))
            .collect();
        Err(Error::Contract(format!(
            "unseen labels in training documents: {}",
            list.join(", ")
        )))
    }

    pub fn load(path: &Path, catalog: LabelCatalog) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, catalog)
    }

    /// Parses one document record per line:
    /// `{"id": str, "text": str, "labels": [code…], "split": "train"|"dev"|"test"}`.
    pub fn parse(text: &str, catalog: LabelCatalog) -> Result<Self> {
        let mut documents = Vec::new();
        let mut ids = HashSet::new();
        let mut unknown = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocumentRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let split: Split = rec.split.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("unknown split {:?}", rec.split),
            })?;
            if !ids.insert(rec.id.clone()) {
                return Err(Error::Input(format!("duplicate document id {:?}", rec.id)));
            }
            let mut labels = Vec::with_capacity(rec.labels.len());
            for code in &rec.labels {
                match catalog.id(code) {
                    Some(l) => labels.push(l),
                    None => {
                        unknown.entry(code.clone()).or_insert(line_no);
                    }
                }
            }
            labels.sort_unstable();
            labels.dedup();
            documents.push(Document {
                tokens: tokenize(&rec.text),
                id: rec.id,
                text: rec.text,
                labels,
                split,
            });
        }
        if !unknown.is_empty() {
            let list: Vec<String> = unknown
                .into_iter()
                .map(|(c, l)| format!("{c} (line {l})"))
                .collect();
            return Err(Error::Input(format!("unknown label codes: {}", list.join(", "))));
        }
        Ok(Corpus { catalog, documents })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for d in &self.documents {
            let rec = DocumentRecord {
                id: d.id.clone(),
                text: d.text.clone(),
                labels: d
                    .labels
                    .iter()
                    .map(|&l| self.catalog.label(l).code.clone())
                    .collect(),
                split: d.split.to_string(),
            };
            s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> LabelCatalog {
        LabelCatalog::parse(
            "{\"code\":\"c1\",\"description\":\"acute kidney failure\"}\n\
             {\"code\":\"c2\",\"description\":\"heart\",\"unseen\":true}\n",
        )
        .unwrap()
    }

    #[test]
    fn one_document() {
        let c = Corpus::parse(
            r#"{"id":"d1","text":"Kidney failed.","labels":["c1"],"split":"train"}"#,
            catalog(),
        )
        .unwrap();
        assert_eq!(c.documents.len(), 1);
        assert_eq!(c.documents[0].tokens, vec!["kidney", "failed"]);
        assert_eq!(c.documents[0].labels, vec![0]);
        assert!(c.catalog.is_unseen(1));
    }

    #[test]
    fn duplicate_id_named() {
        let text = "{\"id\":\"d1\",\"text\":\"a\",\"labels\":[],\"split\":\"dev\"}\n\
                    {\"id\":\"d1\",\"text\":\"b\",\"labels\":[],\"split\":\"dev\"}\n";
        let err = Corpus::parse(text, catalog()).unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");
    }

    #[test]
    fn unknown_codes_listed() {
        let text = "{\"id\":\"d1\",\"text\":\"a\",\"labels\":[\"zz\",\"c1\",\"yy\"],\"split\":\"dev\"}";
        let err = Corpus::parse(text, catalog()).unwrap_err().to_string();
        assert!(err.contains("zz") && err.contains("yy"), "{err}");
    }

    #[test]
    fn bad_split_and_malformed_lines_report_line() {
        let text = "\n{\"id\":\"d1\",\"text\":\"a\",\"labels\":[],\"split\":\"holdout\"}";
        assert!(matches!(Corpus::parse(text, catalog()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Corpus::parse("{oops", catalog()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unseen_label_in_train_is_flagged() {
        let c = Corpus::parse(
            r#"{"id":"d1","text":"x","labels":["c2"],"split":"train"}"#,
            catalog(),
        )
        .unwrap();
        assert!(matches!(c.check_train_labels(), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_codes_rejected() {
        let l = Label {
            code: "x".into(),
            description: String::new(),
            unseen: false,
        };
        assert!(LabelCatalog::new(vec![l.clone(), l]).is_err());
    }
}
