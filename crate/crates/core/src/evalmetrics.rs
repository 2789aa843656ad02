//! Frequency buckets and ranking metrics (R@K, P@K, RP@K, nDCG@K) reported
//! per bucket and overall.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Frequent,
    Few,
    Zero,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Frequent, Bucket::Few, Bucket::Zero];
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Frequent => "frequent",
            Bucket::Few => "few",
            Bucket::Zero => "zero",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketAssignment {
    buckets: Vec<Bucket>,
    few_threshold: usize,
}

impl BucketAssignment {
    pub fn bucket(&self, label: usize) -> Bucket {
        self.buckets[label]
    }

    pub fn few_threshold(&self) -> usize {
        self.few_threshold
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn labels_in(&self, bucket: Bucket) -> Vec<usize> {
        (0..self.buckets.len())
            .filter(|&l| self.buckets[l] == bucket)
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for b in &self.buckets {
            c[*b as usize] += 1;
        }
        c
    }
}

/// Zero training occurrences → zero; `1..=threshold` → few; above → frequent.
pub fn assign_buckets(train_freq: &[usize], few_threshold: usize) -> Result<BucketAssignment> {
    if few_threshold == 0 {
        return Err(Error::Config("few-shot threshold must be at least 1".into()));
    }
    let buckets = train_freq
        .iter()
        .map(|&f| match f {
            0 => Bucket::Zero,
            f if f <= few_threshold => Bucket::Few,
            _ => Bucket::Frequent,
        })
        .collect();
    Ok(BucketAssignment {
        buckets,
        few_threshold,
    })
}

/// Candidates sorted by descending score, ties by ascending label id.
pub fn rank_labels(scores: &[f64], candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("ranking needs at least one candidate".into()));
    }
    for &c in candidates {
        let s = *scores
            .get(c)
            .ok_or_else(|| Error::Input(format!("candidate {c} has no score")))?;
        if s.is_nan() {
            return Err(Error::Numeric(format!("score of label {c} is NaN")));
        }
    }
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ranked)
}

fn hits(ranked: &[usize], gold: &[usize], k: usize) -> Result<usize> {
    if gold.is_empty() {
        return Err(Error::Contract("metric over an empty gold set".into()));
    }
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    let gold: HashSet<usize> = gold.iter().copied().collect();
    Ok(ranked.iter().take(k).filter(|l| gold.contains(l)).count())
}

fn gold_size(gold: &[usize]) -> usize {
    gold.iter().collect::<HashSet<_>>().len()
}

/// `|gold ∩ top-K| / |gold|`
pub fn recall_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    Ok(hits(ranked, gold, k)? as f64 / gold_size(gold) as f64)
}

/// `|gold ∩ top-K| / K`
pub fn precision_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    Ok(hits(ranked, gold, k)? as f64 / k as f64)
}

/// `|gold ∩ top-K| / min(K, |gold|)`
pub fn rprecision_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    Ok(hits(ranked, gold, k)? as f64 / k.min(gold_size(gold)) as f64)
}

/// Binary-relevance nDCG with `1 / log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    hits(ranked, gold, k)?;
    let set: HashSet<usize> = gold.iter().copied().collect();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, l)| set.contains(l))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(set.len()))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "R")]
    Recall,
    #[serde(rename = "P")]
    Precision,
    #[serde(rename = "RP")]
    RPrecision,
    #[serde(rename = "nDCG")]
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Recall, Metric::Precision, Metric::RPrecision, Metric::Ndcg];

    pub fn compute(self, ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
        match self {
            Metric::Recall => recall_at_k(ranked, gold, k),
            Metric::Precision => precision_at_k(ranked, gold, k),
            Metric::RPrecision => rprecision_at_k(ranked, gold, k),
            Metric::Ndcg => ndcg_at_k(ranked, gold, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Recall => "R",
            Metric::Precision => "P",
            Metric::RPrecision => "RP",
            Metric::Ndcg => "nDCG",
        })
    }
}

/// Row of a report: one bucket, or every label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Frequent,
    Few,
    Zero,
    Overall,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Frequent, Group::Few, Group::Zero, Group::Overall];

    pub fn bucket(self) -> Option<Bucket> {
        match self {
            Group::Frequent => Some(Bucket::Frequent),
            Group::Few => Some(Bucket::Few),
            Group::Zero => Some(Bucket::Zero),
            Group::Overall => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bucket() {
            Some(b) => b.fmt(f),
            None => f.write_str("overall"),
        }
    }
}

/// Which labels compete in a bucket's ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateScope {
    /// Only labels of the bucket itself.
    #[default]
    WithinBucket,
    /// Every label; gold is still restricted to the bucket.
    AllLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub bucket: Group,
    pub metric: Metric,
    #[serde(rename = "K")]
    pub k: usize,
    /// Absent when no document contributes to the cell.
    pub value: Option<f64>,
    pub n_docs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub scope: CandidateScope,
    pub records: Vec<MetricRecord>,
}

impl MetricsReport {
    pub fn get(&self, group: Group, metric: Metric, k: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.bucket == group && r.metric == metric && r.k == k)
            .and_then(|r| r.value)
    }

    pub fn n_docs(&self, group: Group) -> usize {
        self.records
            .iter()
            .find(|r| r.bucket == group)
            .map_or(0, |r| r.n_docs)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<MetricRecord>(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        let mut ks: Vec<usize> = records.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        Ok(MetricsReport {
            ks,
            scope: CandidateScope::default(),
            records,
        })
    }

    /// Aligned text table: one row per group, one column per (metric, K).
    pub fn to_table(&self) -> String {
        let mut cols = Vec::new();
        for &k in &self.ks {
            for m in Metric::ALL {
                cols.push((m, k));
            }
        }
        let mut s = String::new();
        let _ = write!(s, "{:<10}{:>7}", "bucket", "docs");
        for (m, k) in &cols {
            let _ = write!(s, "{:>10}", format!("{m}@{k}"));
        }
        s.push('\n');
        for g in Group::ALL {
            let _ = write!(s, "{:<10}{:>7}", g.to_string(), self.n_docs(g));
            for &(m, k) in &cols {
                match self.get(g, m, k) {
                    Some(v) => {
                        let _ = write!(s, "{v:>10.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Bucketed, document-averaged ranking metrics.
///
/// For a bucket, only documents with at least one gold label in the bucket
/// count, their gold set is cut down to the bucket, and (with the default
/// scope) only the bucket's labels are ranked. The overall row ranks every
/// label for every document with nonempty gold.
pub fn evaluate(
    scores: &[Vec<f64>],
    gold: &[Vec<usize>],
    buckets: &BucketAssignment,
    ks: &[usize],
    scope: CandidateScope,
) -> Result<MetricsReport> {
    if scores.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} score rows for {} gold sets",
            scores.len(),
            gold.len()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("invalid K list {ks:?}")));
    }
    let all: Vec<usize> = (0..buckets.len()).collect();
    let mut records = Vec::new();
    for group in Group::ALL {
        let candidates = match (group.bucket(), scope) {
            (Some(b), CandidateScope::WithinBucket) => buckets.labels_in(b),
            _ => all.clone(),
        };
        let mut sums = vec![[0.0f64; 4]; ks.len()];
        let mut n_docs = 0usize;
        if !candidates.is_empty() {
            for (s, g) in scores.iter().zip(gold) {
                if s.len() != buckets.len() {
                    return Err(Error::Dimension(format!(
                        "{} scores for {} labels",
                        s.len(),
                        buckets.len()
                    )));
                }
                let g: Vec<usize> = match group.bucket() {
                    Some(b) => g.iter().copied().filter(|&l| buckets.bucket(l) == b).collect(),
                    None => g.clone(),
                };
                if g.is_empty() {
                    continue;
                }
                let ranked = rank_labels(s, &candidates)?;
                for (ki, &k) in ks.iter().enumerate() {
                    for (mi, m) in Metric::ALL.iter().enumerate() {
                        sums[ki][mi] += m.compute(&ranked, &g, k)?;
                    }
                }
                n_docs += 1;
            }
        }
        for (ki, &k) in ks.iter().enumerate() {
            for (mi, &m) in Metric::ALL.iter().enumerate() {
                records.push(MetricRecord {
                    bucket: group,
                    metric: m,
                    k,
                    value: (n_docs > 0).then(|| sums[ki][mi] / n_docs as f64),
                    n_docs,
                });
            }
        }
    }
    Ok(MetricsReport {
        ks: ks.to_vec(),
        scope,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 0;
    const B: usize = 1;
    const X: usize = 2;

    #[test]
    fn buckets_by_frequency() {
        let b = assign_buckets(&[0, 3, 9, 5], 5).unwrap();
        assert_eq!(b.bucket(0), Bucket::Zero);
        assert_eq!(b.bucket(1), Bucket::Few);
        assert_eq!(b.bucket(2), Bucket::Frequent);
        assert_eq!(b.bucket(3), Bucket::Few);
        assert_eq!(b.counts(), [1, 2, 1]);
        assert!(assign_buckets(&[1], 0).is_err());
        let all_freq = assign_buckets(&[7, 8], 5).unwrap();
        assert!(all_freq.labels_in(Bucket::Zero).is_empty());
    }

    #[test]
    fn ranking_order_and_ties() {
        assert_eq!(rank_labels(&[0.9, 0.1], &[0, 1]).unwrap(), vec![0, 1]);
        assert_eq!(rank_labels(&[0.5, 0.5, 0.5], &[2, 0, 1]).unwrap(), vec![0, 1, 2]);
        assert_eq!(rank_labels(&[0.1, 0.7], &[1]).unwrap(), vec![1]);
        assert!(rank_labels(&[f64::NAN, 0.1], &[0, 1]).is_err());
        assert!(rank_labels(&[0.1], &[]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[A, B], &[A], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[B, X, A], &[A, B], 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[B, X, A], &[A, B], 10).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&[A], &[], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[A, B], &[A], 1).unwrap(), 1.0);
        assert!((precision_at_k(&[B, X, A], &[A, B], 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&[X, B], &[A], 2).unwrap(), 0.0);
    }

    #[test]
    fn rprecision_examples() {
        assert_eq!(
            rprecision_at_k(&[B, X, A], &[A, B], 3).unwrap(),
            recall_at_k(&[B, X, A], &[A, B], 3).unwrap()
        );
        let gold: Vec<usize> = (0..15).collect();
        // six gold labels, then four misses in the top ten
        let mut ranked: Vec<usize> = (0..6).collect();
        ranked.extend(100..104);
        ranked.extend(6..15);
        assert_eq!(rprecision_at_k(&ranked, &gold, 10).unwrap(), 0.6);
        assert_eq!(rprecision_at_k(&[A, B, X], &[A, B], 2).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[A, B], &[A], 3).unwrap(), 1.0);
        let v = ndcg_at_k(&[B, X, A], &[A, B], 3).unwrap();
        let expect = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.9197).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[X, B], &[A], 2).unwrap(), 0.0);
    }

    #[test]
    fn single_zero_shot_doc() {
        let buckets = assign_buckets(&[10, 0, 0], 5).unwrap();
        let r = evaluate(&[vec![0.9, 0.8, 0.1]], &[vec![1]], &buckets, &[1], CandidateScope::WithinBucket)
            .unwrap();
        assert_eq!(r.get(Group::Zero, Metric::Recall, 1), Some(1.0));
        assert_eq!(r.get(Group::Overall, Metric::Recall, 1), Some(0.0));
        assert_eq!(r.get(Group::Few, Metric::Recall, 1), None);
        assert_eq!(r.n_docs(Group::Few), 0);
        let all = evaluate(&[vec![0.9, 0.8, 0.1]], &[vec![1]], &buckets, &[1], CandidateScope::AllLabels)
            .unwrap();
        assert_eq!(all.get(Group::Zero, Metric::Recall, 1), Some(0.0));
    }

    #[test]
    fn report_serialization() {
        let buckets = assign_buckets(&[10, 2, 0], 5).unwrap();
        let r = evaluate(&[vec![0.2, 0.1, 0.3]], &[vec![0]], &buckets, &[1, 2], CandidateScope::WithinBucket)
            .unwrap();
        let text = r.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"K\":1"));
        assert!(text.contains("\"value\":null"));
        let back = MetricsReport::from_jsonl(&text).unwrap();
        assert_eq!(back.records, r.records);
        let table = r.to_table();
        assert!(table.contains("nDCG@2") && table.lines().count() == 5);
    }
}
