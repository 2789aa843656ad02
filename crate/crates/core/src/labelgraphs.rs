//! Label graphs over the full catalog (seen and unseen labels): taxonomy
//! hierarchy, description similarity and training co-occurrence, plus the
//! merge used by the single-GCN baseline and symmetric normalization.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LabelCatalog;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{cosine, Matrix};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Hierarchy,
    Similarity,
    Cooccurrence,
    Merged,
}

impl GraphKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Hierarchy => "hierarchy",
            GraphKind::Similarity => "similarity",
            GraphKind::Cooccurrence => "cooccurrence",
            GraphKind::Merged => "merged",
        }
    }

    /// Single-letter tag used on the command line and in reports.
    pub fn letter(self) -> char {
        match self {
            GraphKind::Hierarchy => 'g',
            GraphKind::Similarity => 's',
            GraphKind::Cooccurrence => 'c',
            GraphKind::Merged => 'm',
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" | "hierarchy" => Ok(GraphKind::Hierarchy),
            "s" | "similarity" => Ok(GraphKind::Similarity),
            "c" | "cooccurrence" => Ok(GraphKind::Cooccurrence),
            "m" | "merged" => Ok(GraphKind::Merged),
            other => Err(Error::Input(format!("unknown graph kind {other:?}"))),
        }
    }
}

/// Symmetric, nonnegative adjacency over catalog order with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGraph {
    kind: GraphKind,
    adjacency: Matrix,
}

impl LabelGraph {
    /// Validates and wraps an adjacency matrix. Self-loops must already be
    /// present (diagonal ≥ 1).
    pub fn new(kind: GraphKind, adjacency: Matrix) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(dim_err!("adjacency must be square, got {}x{}", n, adjacency.cols()));
        }
        for i in 0..n {
            if adjacency.get(i, i) < 1.0 {
                return Err(Error::Contract(format!("label {i} lacks a self-loop")));
            }
            for j in 0..n {
                let (a, b) = (adjacency.get(i, j), adjacency.get(j, i));
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::Contract(format!("bad weight {a} at ({i},{j})")));
                }
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::Contract(format!("asymmetric at ({i},{j}): {a} vs {b}")));
                }
            }
        }
        Ok(LabelGraph { kind, adjacency })
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.rows() == 0
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency.get(i, j)
    }

    /// Number of undirected off-diagonal edges.
    pub fn edge_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency.get(i, j) > 0.0)
            .count()
    }

    /// Largest off-diagonal weight, zero for an edgeless graph.
    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.len();
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m = m.max(self.adjacency.get(i, j));
                }
            }
        }
        m
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<LabelGraph> {
        let n = self.len();
        if perm.len() != n {
            return Err(dim_err!("permutation of {} for {n} labels", perm.len()));
        }
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, self.adjacency.get(perm[i], perm[j]));
            }
        }
        LabelGraph::new(self.kind, a)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_str().as_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in self.adjacency.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Text triple format: header `labels L kind K`, then `i\tj\tweight` for
    /// every nonzero entry with `i ≤ j`.
    pub fn to_text(&self) -> String {
        let n = self.len();
        let mut s = format!("labels {n} kind {}\n", self.kind);
        for i in 0..n {
            for j in i..n {
                let w = self.adjacency.get(i, j);
                if w != 0.0 {
                    let _ = writeln!(s, "{i}\t{j}\t{w:?}");
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<LabelGraph> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "labels" || h[2] != "kind" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected `labels L kind K`, got {header:?}"),
            });
        }
        let n: usize = h[1].parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("bad label count {:?}", h[1]),
        })?;
        let kind: GraphKind = h[3].parse()?;
        let mut a = Matrix::zeros(n, n);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", f.len())));
            }
            let r: usize = f[0].parse().map_err(|_| bad(format!("bad row {:?}", f[0])))?;
            let c: usize = f[1].parse().map_err(|_| bad(format!("bad col {:?}", f[1])))?;
            let w: f64 = f[2].parse().map_err(|_| bad(format!("bad weight {:?}", f[2])))?;
            if r >= n || c >= n {
                return Err(bad(format!("index out of range for {n} labels")));
            }
            a.set(r, c, w);
            a.set(c, r, w);
        }
        LabelGraph::new(kind, a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<LabelGraph> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LabelGraph::from_text(&text)
    }
}

/// `D^{-1/2} A D^{-1/2}` of a label graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGraph {
    kind: GraphKind,
    matrix: Matrix,
}

impl NormalizedGraph {
    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

pub fn normalize(graph: &LabelGraph) -> Result<NormalizedGraph> {
    let a = graph.adjacency();
    let n = a.rows();
    let mut degree = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = a.row(i).iter().sum();
        if d <= 0.0 {
            return Err(Error::Contract(format!("label {i} has zero degree")));
        }
        degree.push(d);
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = a.get(i, j);
            if w != 0.0 {
                m.set(i, j, w / (degree[i] * degree[j]).sqrt());
            }
        }
    }
    Ok(NormalizedGraph {
        kind: graph.kind(),
        matrix: m,
    })
}

/// Parent-child edges of a class taxonomy, keyed by code.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Taxonomy {
    pub edges: Vec<(String, String)>,
}

impl Taxonomy {
    /// One `child<TAB>parent` edge per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Taxonomy> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim_end_matches('\r');
            if t.trim().is_empty() || t.trim_start().starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split('\t').collect();
            if f.len() != 2 || f[0].is_empty() || f[1].is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `child<TAB>parent`, got {t:?}"),
                });
            }
            edges.push((f[0].to_string(), f[1].to_string()));
        }
        Ok(Taxonomy { edges })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# child\tparent\n");
        for (c, p) in &self.edges {
            let _ = writeln!(s, "{c}\t{p}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Taxonomy> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Taxonomy::parse(&text)
    }
}

/// Hierarchy graph projected onto catalog labels.
///
/// Taxonomy ids that are not catalog labels but act as parents are internal
/// nodes. Internal nodes are removed and their neighbours joined pairwise, so
/// two labels end up adjacent exactly when the taxonomy connects them by a
/// path whose interior is made of internal nodes only. An id that is neither
/// a catalog label nor anyone's parent is rejected.
pub fn build_hierarchy_graph(taxonomy: &Taxonomy, catalog: &LabelCatalog) -> Result<LabelGraph> {
    let parents: HashSet<&str> = taxonomy.edges.iter().map(|(_, p)| p.as_str()).collect();
    let mut unknown = BTreeSet::new();
    for (c, _) in &taxonomy.edges {
        if catalog.id(c).is_none() && !parents.contains(c.as_str()) {
            unknown.insert(c.clone());
        }
    }
    if !unknown.is_empty() {
        let list: Vec<String> = unknown.into_iter().collect();
        return Err(Error::Input(format!("taxonomy references unknown ids: {}", list.join(", "))));
    }

    let n = catalog.len();
    let mut internal: HashMap<&str, usize> = HashMap::new();
    let mut pairs = Vec::with_capacity(taxonomy.edges.len());
    for (c, p) in &taxonomy.edges {
        let mut ends = [0usize; 2];
        for (slot, id) in ends.iter_mut().zip([c.as_str(), p.as_str()]) {
            *slot = match catalog.id(id) {
                Some(l) => l,
                None => {
                    let next = n + internal.len();
                    *internal.entry(id).or_insert(next)
                }
            };
        }
        pairs.push((ends[0], ends[1]));
    }
    let total = n + internal.len();
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); total];
    for &(a, b) in &pairs {
        if a != b {
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
    }

    let mut adj = Matrix::identity(n);
    let mut seen = vec![usize::MAX; total];
    for start in 0..n {
        // BFS that only continues through internal nodes.
        let mut queue = VecDeque::from([start]);
        seen[start] = start;
        while let Some(v) = queue.pop_front() {
            for &w in &neighbours[v] {
                if seen[w] == start {
                    continue;
                }
                seen[w] = start;
                if w < n {
                    adj.set(start, w, 1.0);
                    adj.set(w, start, 1.0);
                } else {
                    queue.push_back(w);
                }
            }
        }
    }
    LabelGraph::new(GraphKind::Hierarchy, adj)
}

/// Top-`k` cosine neighbours per label with similarity at least `tau`,
/// weighted by cosine and symmetrized by taking the larger direction.
/// Zero vectors only get their self-loop.
pub fn build_similarity_graph(vectors: &[Vec<f64>], k: usize, tau: f64) -> Result<LabelGraph> {
    let n = vectors.len();
    if k == 0 || k >= n {
        return Err(Error::Input(format!("neighbour count k={k} must be in [1, {n})")));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(dim_err!("label vectors of dims {dim} and {}", v.len()));
    }
    let zero: Vec<bool> = vectors.iter().map(|v| v.iter().all(|&x| x == 0.0)).collect();
    let mut adj = Matrix::identity(n);
    for i in 0..n {
        if zero[i] {
            continue;
        }
        let mut cands: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i && !zero[j])
            .map(|j| (j, cosine(&vectors[i], &vectors[j])))
            .filter(|&(_, c)| c >= tau && c > 0.0)
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, c) in cands.iter().take(k) {
            let w = c.min(1.0);
            if w > adj.get(i, j) {
                adj.set(i, j, w);
                adj.set(j, i, w);
            }
        }
    }
    LabelGraph::new(GraphKind::Similarity, adj)
}

/// Pair counts over training documents' label sets. Unseen labels may not
/// appear; their rows keep only the self-loop.
pub fn build_cooccurrence_graph(train_labels: &[Vec<usize>], catalog: &LabelCatalog) -> Result<LabelGraph> {
    let n = catalog.len();
    let mut adj = Matrix::identity(n);
    for (d, labels) in train_labels.iter().enumerate() {
        let mut set: Vec<usize> = labels.clone();
        set.sort_unstable();
        set.dedup();
        for &l in &set {
            if l >= n {
                return Err(Error::Input(format!("label id {l} out of range in training doc {d}")));
            }
            if catalog.is_unseen(l) {
                return Err(Error::Contract(format!(
                    "training doc {d} carries unseen label {}",
                    catalog.label(l).code
                )));
            }
        }
        for (x, &i) in set.iter().enumerate() {
            for &j in &set[x + 1..] {
                adj.set(i, j, adj.get(i, j) + 1.0);
                adj.set(j, i, adj.get(j, i) + 1.0);
            }
        }
    }
    LabelGraph::new(GraphKind::Cooccurrence, adj)
}

/// Single graph for the pre-GCN fusion baseline.
///
/// Each input is divided by its largest off-diagonal weight, the results are
/// combined by elementwise maximum, and the combination is scaled up so its
/// smallest diagonal entry is 1. A graph merged with itself comes back
/// unchanged up to rounding.
pub fn merge_graphs(a: &LabelGraph, b: &LabelGraph) -> Result<LabelGraph> {
    merge_all(&[a, b])
}

pub fn merge_all(graphs: &[&LabelGraph]) -> Result<LabelGraph> {
    let first = graphs.first().ok_or_else(|| Error::Input("merge of zero graphs".into()))?;
    let n = first.len();
    if let Some(g) = graphs.iter().find(|g| g.len() != n) {
        return Err(dim_err!("merge of graphs over {n} and {} labels", g.len()));
    }
    let mut out = Matrix::zeros(n, n);
    for g in graphs {
        let m = g.max_off_diagonal();
        let scale = if m > 0.0 { 1.0 / m } else { 1.0 };
        for (o, &w) in out.data_mut().iter_mut().zip(g.adjacency().data()) {
            *o = o.max(w * scale);
        }
    }
    let min_diag = (0..n).map(|i| out.get(i, i)).fold(f64::INFINITY, f64::min);
    if n > 0 && min_diag < 1.0 {
        let up = 1.0 / min_diag;
        for v in out.data_mut() {
            *v *= up;
        }
        // Guard against rounding leaving a diagonal at 1 - ulp.
        for i in 0..n {
            if out.get(i, i) < 1.0 {
                out.set(i, i, 1.0);
            }
        }
    }
    LabelGraph::new(GraphKind::Merged, out)
}

#[derive(Clone, Debug, Serialize)]
pub struct GraphStats {
    pub kind: GraphKind,
    pub labels: usize,
    pub edges: usize,
    pub isolated: usize,
    pub max_weight: f64,
}

pub fn graph_stats(g: &LabelGraph) -> GraphStats {
    let n = g.len();
    let isolated = (0..n)
        .filter(|&i| (0..n).all(|j| i == j || g.weight(i, j) == 0.0))
        .count();
    GraphStats {
        kind: g.kind(),
        labels: n,
        edges: g.edge_count(),
        isolated,
        max_weight: g.max_off_diagonal(),
    }
}
