//! Corpus-level word graph.
//!
//! Vertices are vocabulary words. Two words are joined when either is among
//! the other's `k` nearest neighbors by embedding cosine similarity. The
//! graph's normalized Laplacian `L = I - D^{-1/2} A D^{-1/2}` and its rescaled
//! form `(2 / lambda_max) L - I` drive the Chebyshev convolutions. Each
//! document becomes a signal on the vertices: the count of each word.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{GinError, Result};
use crate::exec::Exec;
use crate::linalg::{
    self, power_iteration_lambda_max, LambdaMax, SparseSym, POWER_DEFAULT_MAX_ITERS,
    POWER_DEFAULT_TOL,
};

pub type ClassId = usize;

pub const DEFAULT_K: usize = 8;

/// Ordered word list with a reverse index. Words are unique and there are at
/// least two of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        if words.len() != freqs.len() {
            return Err(GinError::dim(
                "vocabulary frequencies",
                words.len(),
                freqs.len(),
            ));
        }
        if words.len() < 2 {
            return Err(GinError::Data(format!(
                "vocabulary needs at least 2 words, got {}",
                words.len()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(GinError::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary {
            words,
            freqs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Vocabulary restricted to the given positions, in that order.
    pub fn select(&self, keep: &[usize]) -> Result<Vocabulary> {
        Vocabulary::new(
            keep.iter().map(|&i| self.words[i].clone()).collect(),
            keep.iter().map(|&i| self.freqs[i]).collect(),
        )
    }

    /// Word at old position `v` moves to `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Vocabulary> {
        linalg::check_permutation(perm, self.len())?;
        let mut words = vec![String::new(); self.len()];
        let mut freqs = vec![0; self.len()];
        for (v, &p) in perm.iter().enumerate() {
            words[p] = self.words[v].clone();
            freqs[p] = self.freqs[v];
        }
        Vocabulary::new(words, freqs)
    }
}

/// Most frequent words of a tokenized corpus.
///
/// Words must occur in at least `min_doc_freq` documents. The result is in
/// descending corpus frequency, ties broken lexicographically.
pub fn build_vocabulary<D: AsRef<[S]>, S: AsRef<str>>(
    corpus: &[D],
    max_words: usize,
    min_doc_freq: usize,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(GinError::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut freq: HashMap<&str, (u64, usize)> = HashMap::new();
    for doc in corpus {
        let mut seen = BTreeSet::new();
        for tok in doc.as_ref() {
            let tok = tok.as_ref();
            let e = freq.entry(tok).or_insert((0, 0));
            e.0 += 1;
            if seen.insert(tok) {
                e.1 += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = freq
        .into_iter()
        .filter(|&(_, (_, df))| df >= min_doc_freq)
        .map(|(w, (f, _))| (w, f))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_words);
    if ranked.is_empty() {
        return Err(GinError::Data(format!(
            "no word occurs in at least {min_doc_freq} documents"
        )));
    }
    Vocabulary::new(
        ranked.iter().map(|(w, _)| w.to_string()).collect(),
        ranked.iter().map(|&(_, f)| f).collect(),
    )
}

/// Pretrained word vectors as loaded from a word2vec text file.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub words: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl WordVectors {
    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect()
    }
}

/// Embeddings aligned with a vocabulary: row `i` belongs to word `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(GinError::dim(format!("embedding {i}"), dim, v.len()));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(GinError::Data(format!(
                    "embedding {i} is all zeros; cosine similarity is undefined"
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GinError::Data(format!(
                    "embedding {i} has non-finite values"
                )));
            }
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    /// Aligns pretrained vectors with `vocab`. Words without a vector are
    /// dropped from the vocabulary; their names are returned.
    pub fn align(
        vocab: &Vocabulary,
        wv: &WordVectors,
    ) -> Result<(Vocabulary, EmbeddingTable, Vec<String>)> {
        let lookup = wv.lookup();
        let mut keep = Vec::new();
        let mut vectors = Vec::new();
        let mut dropped = Vec::new();
        for (i, w) in vocab.words().iter().enumerate() {
            match lookup.get(w.as_str()) {
                Some(&j) => {
                    keep.push(i);
                    vectors.push(wv.vectors[j].clone());
                }
                None => dropped.push(w.clone()),
            }
        }
        if !dropped.is_empty() {
            log::warn!(
                "{} vocabulary words have no embedding and were dropped",
                dropped.len()
            );
        }
        let vocab = vocab.select(&keep)?;
        Ok((vocab, EmbeddingTable::new(wv.dim, vectors)?, dropped))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

/// k-NN graph over embeddings with OR-symmetrization and 0/1 weights.
///
/// A vertex is never its own neighbor. Neighbors are ranked by descending
/// cosine similarity, ties going to the lower vertex index.
pub fn knn_adjacency(emb: &EmbeddingTable, k: usize, exec: Exec) -> Result<SparseSym> {
    let n = emb.len();
    if k == 0 || k >= n {
        return Err(GinError::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            n.saturating_sub(1)
        )));
    }
    let unit: Vec<Vec<f64>> = emb
        .vectors()
        .iter()
        .map(|v| {
            let norm = linalg::norm(v);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let neighbors: Vec<Vec<usize>> = exec.map_range(n, |i| {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (linalg::dot(&unit[i], &unit[j]), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        sims.truncate(k);
        sims.into_iter().map(|(_, j)| j).collect()
    });
    let edges: BTreeSet<(usize, usize)> = neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i.min(j), i.max(j))))
        .collect();
    SparseSym::from_entries(n, edges.into_iter().map(|(i, j)| (i, j, 1.0)))
}

/// `I - D^{-1/2} A D^{-1/2}`, with `D^{-1/2}` set to 0 for isolated vertices.
pub fn normalized_laplacian(a: &SparseSym) -> SparseSym {
    let inv_sqrt: Vec<f64> = a
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let n = a.n();
    let entries = (0..n).map(|i| (i, i, 1.0)).chain(
        a.upper_entries()
            .map(|(i, j, v)| (i, j, -(v * (inv_sqrt[i] * inv_sqrt[j])))),
    );
    SparseSym::from_entries(n, entries).expect("indices come from a valid matrix")
}

/// `(2 / lambda_max) L - I`.
pub fn scale_laplacian(l: &SparseSym, lambda_max: f64) -> Result<SparseSym> {
    if lambda_max <= 0.0 || !lambda_max.is_finite() {
        return Err(GinError::InvalidArgument(format!(
            "lambda_max must be positive and finite, got {lambda_max}"
        )));
    }
    Ok(l.affine(2.0 / lambda_max, -1.0))
}

/// Fixed vocabulary graph shared by every document of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TextGraph {
    vocab: Vocabulary,
    k: usize,
    adjacency: SparseSym,
    laplacian: SparseSym,
    scaled_laplacian: SparseSym,
    lambda_max: LambdaMax,
}

impl TextGraph {
    pub fn build(vocab: Vocabulary, emb: &EmbeddingTable, k: usize, exec: Exec) -> Result<Self> {
        if emb.len() != vocab.len() {
            return Err(GinError::dim(
                "embedding table rows",
                vocab.len(),
                emb.len(),
            ));
        }
        let adjacency = knn_adjacency(emb, k, exec)?;
        TextGraph::from_adjacency(vocab, k, adjacency)
    }

    /// Rebuilds the Laplacians from a stored adjacency; `lambda_max` is
    /// re-estimated by power iteration.
    pub fn from_adjacency(vocab: Vocabulary, k: usize, adjacency: SparseSym) -> Result<Self> {
        let laplacian = normalized_laplacian(&adjacency);
        let lambda_max =
            power_iteration_lambda_max(&laplacian, POWER_DEFAULT_MAX_ITERS, POWER_DEFAULT_TOL);
        Self::assemble(vocab, k, adjacency, laplacian, lambda_max)
    }

    /// Like [`TextGraph::from_adjacency`] with a caller-supplied `lambda_max`.
    pub fn with_lambda_max(
        vocab: Vocabulary,
        k: usize,
        adjacency: SparseSym,
        lambda_max: f64,
    ) -> Result<Self> {
        let laplacian = normalized_laplacian(&adjacency);
        let lambda = LambdaMax {
            value: lambda_max,
            converged: true,
            iterations: 0,
        };
        Self::assemble(vocab, k, adjacency, laplacian, lambda)
    }

    fn assemble(
        vocab: Vocabulary,
        k: usize,
        adjacency: SparseSym,
        laplacian: SparseSym,
        lambda_max: LambdaMax,
    ) -> Result<Self> {
        if adjacency.n() != vocab.len() {
            return Err(GinError::dim("graph vertices", vocab.len(), adjacency.n()));
        }
        for i in 0..adjacency.n() {
            if adjacency.get(i, i) != 0.0 {
                return Err(GinError::Data(format!("adjacency has a self-loop at {i}")));
            }
        }
        let scaled_laplacian = scale_laplacian(&laplacian, lambda_max.value)?;
        Ok(TextGraph {
            vocab,
            k,
            adjacency,
            laplacian,
            scaled_laplacian,
            lambda_max,
        })
    }

    /// Relabels vertex `v` as `perm[v]`, keeping `lambda_max` unchanged.
    pub fn permuted(&self, perm: &[usize]) -> Result<TextGraph> {
        TextGraph::with_lambda_max(
            self.vocab.permuted(perm)?,
            self.k,
            self.adjacency.permuted(perm)?,
            self.lambda_max.value,
        )
    }

    pub fn n(&self) -> usize {
        self.vocab.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn adjacency(&self) -> &SparseSym {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &SparseSym {
        &self.laplacian
    }

    pub fn scaled_laplacian(&self) -> &SparseSym {
        &self.scaled_laplacian
    }

    pub fn lambda_max(&self) -> LambdaMax {
        self.lambda_max
    }

    /// Undirected edges `(i, j)` with `i < j`, ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .upper_entries()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, _)| (i, j))
            .collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| self.adjacency.row(i).count())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Raw word counts.
    #[default]
    Counts,
    /// Counts divided by the number of in-vocabulary tokens.
    Normalized,
}

/// A document as a sparse non-negative signal on the graph vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub doc_id: String,
    pub label: ClassId,
    n: usize,
    features: Vec<(usize, f64)>,
}

impl TextSample {
    pub fn new(
        doc_id: String,
        label: ClassId,
        n: usize,
        features: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let mut features: Vec<(usize, f64)> =
            features.into_iter().filter(|&(_, v)| v != 0.0).collect();
        features.sort_by_key(|&(i, _)| i);
        if features.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GinError::Data(format!("{doc_id}: duplicate feature index")));
        }
        if let Some(&(i, _)) = features.iter().find(|&&(i, _)| i >= n) {
            return Err(GinError::dim(format!("{doc_id}: feature index {i}"), n, i));
        }
        if features.iter().any(|&(_, v)| v <= 0.0 || !v.is_finite()) {
            return Err(GinError::Data(format!(
                "{doc_id}: features must be non-negative"
            )));
        }
        if features.is_empty() {
            return Err(GinError::Data(format!("{doc_id}: no nonzero features")));
        }
        Ok(TextSample {
            doc_id,
            label,
            n,
            features,
        })
    }

    pub fn from_dense(doc_id: String, label: ClassId, dense: &[f64]) -> Result<Self> {
        let feats = dense.iter().copied().enumerate().collect();
        TextSample::new(doc_id, label, dense.len(), feats)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sparse(&self) -> &[(usize, f64)] {
        &self.features
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for &(i, v) in &self.features {
            d[i] = v;
        }
        d
    }

    /// Same document on a relabeled vertex set.
    pub fn permuted(&self, perm: &[usize]) -> Result<TextSample> {
        linalg::check_permutation(perm, self.n)?;
        TextSample::new(
            self.doc_id.clone(),
            self.label,
            self.n,
            self.features.iter().map(|&(i, v)| (perm[i], v)).collect(),
        )
    }
}

/// Bag-of-words vector of `doc` over `vocab`. Out-of-vocabulary tokens are
/// ignored; a document with no in-vocabulary token is an error.
pub fn vectorize_text<S: AsRef<str>>(
    doc_id: &str,
    label: ClassId,
    doc: &[S],
    vocab: &Vocabulary,
    mode: FeatureMode,
) -> Result<TextSample> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    let mut total = 0usize;
    for tok in doc {
        if let Some(i) = vocab.position(tok.as_ref()) {
            *counts.entry(i).or_insert(0.0) += 1.0;
            total += 1;
        }
    }
    if total == 0 {
        return Err(GinError::Data(format!(
            "document {doc_id} has no in-vocabulary tokens"
        )));
    }
    let scale = match mode {
        FeatureMode::Counts => 1.0,
        FeatureMode::Normalized => 1.0 / total as f64,
    };
    TextSample::new(
        doc_id.to_string(),
        label,
        vocab.len(),
        counts.into_iter().map(|(i, c)| (i, c * scale)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dense_eigh;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn vocab_of(words: &[&str]) -> Vocabulary {
        Vocabulary::new(toks(words), vec![1; words.len()]).unwrap()
    }

    fn random_embeddings(n: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
        let v = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        EmbeddingTable::new(dim, v).unwrap()
    }

    #[test]
    fn vocabulary_frequency_then_lexicographic() {
        let corpus = vec![toks(&["a", "b", "a"]), toks(&["b", "c"])];
        let v = build_vocabulary(&corpus, 2, 1).unwrap();
        assert_eq!(v.words(), &["a", "b"]);
        assert_eq!(v.freqs(), &[2, 2]);
    }

    #[test]
    fn vocabulary_edge_cases() {
        let corpus = vec![toks(&["a", "b", "a"]), toks(&["b", "c"])];
        let all = build_vocabulary(&corpus, 100, 1).unwrap();
        assert_eq!(all.words(), &["a", "b", "c"]);
        assert!(build_vocabulary(&corpus, 10, 3).is_err());
        let empty: Vec<Vec<String>> = vec![];
        assert!(build_vocabulary(&empty, 10, 1).is_err());
        assert!(Vocabulary::new(toks(&["x", "x"]), vec![1, 1]).is_err());
    }

    #[test]
    fn knn_hand_example() {
        let emb =
            EmbeddingTable::new(2, vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]).unwrap();
        let a = knn_adjacency(&emb, 1, Exec::default()).unwrap();
        let g = TextGraph::from_adjacency(vocab_of(&["x", "y", "z"]), 1, a).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_complete_when_k_is_n_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = random_embeddings(6, 4, &mut rng);
        let a = knn_adjacency(&emb, 5, Exec::default()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn knn_identical_vectors_are_mutual_neighbors() {
        let emb = EmbeddingTable::new(
            3,
            vec![
                vec![0.2, 0.9, -0.4],
                vec![1.0, 0.5, 0.3],
                vec![-0.7, 0.1, 0.8],
                vec![1.0, 0.5, 0.3],
                vec![0.3, -0.9, 0.2],
            ],
        )
        .unwrap();
        let a = knn_adjacency(&emb, 1, Exec::default()).unwrap();
        assert_eq!(a.get(1, 3), 1.0);
        // Brute-force: every other vertex's single nearest neighbor.
        let unit = |v: &Vec<f64>| {
            let n = linalg::norm(v);
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        for i in 0..5 {
            let ui = unit(&emb.vectors()[i]);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for j in 0..5 {
                if j != i {
                    let s = linalg::dot(&ui, &unit(&emb.vectors()[j]));
                    if s > best.0 {
                        best = (s, j);
                    }
                }
            }
            assert_eq!(a.get(i, best.1), 1.0);
        }
    }

    #[test]
    fn knn_rejects_bad_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = random_embeddings(4, 3, &mut rng);
        assert!(knn_adjacency(&emb, 0, Exec::default()).is_err());
        assert!(knn_adjacency(&emb, 4, Exec::default()).is_err());
    }

    #[test]
    fn zero_embedding_rejected() {
        assert!(EmbeddingTable::new(2, vec![vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let edge = SparseSym::from_entries(2, [(0, 1, 1.0)]).unwrap();
        let l = normalized_laplacian(&edge).to_dense();
        assert_eq!(l.values(), &[1.0, -1.0, -1.0, 1.0]);

        let empty = SparseSym::zeros(4);
        assert_eq!(normalized_laplacian(&empty), SparseSym::identity(4));

        let tri = SparseSym::from_entries(3, [(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let l = normalized_laplacian(&tri);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { -0.5 };
                assert!((l.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_vertex_gets_unit_row() {
        let a = SparseSym::from_entries(3, [(0, 1, 1.0)]).unwrap();
        let l = normalized_laplacian(&a);
        assert_eq!(l.row(2).collect::<Vec<_>>(), vec![(2, 1.0)]);
    }

    #[test]
    fn scale_examples() {
        let l = SparseSym::from_entries(2, [(0, 0, 1.0), (1, 1, 1.0), (0, 1, -1.0)]).unwrap();
        let s = scale_laplacian(&l, 2.0).unwrap().to_dense();
        assert_eq!(s.values(), &[0.0, -1.0, -1.0, 0.0]);
        assert_eq!(
            scale_laplacian(&SparseSym::identity(3), 2.0).unwrap(),
            SparseSym::zeros(3)
        );
        assert_eq!(
            scale_laplacian(&SparseSym::identity(3), 1.0).unwrap(),
            SparseSym::identity(3)
        );
        assert!(scale_laplacian(&l, 0.0).is_err());
        assert!(scale_laplacian(&l, -1.0).is_err());
    }

    #[test]
    fn vectorize_examples() {
        let v = vocab_of(&["a", "b", "c"]);
        let t = vectorize_text("d", 0, &["a", "a", "b"], &v, FeatureMode::Counts).unwrap();
        assert_eq!(t.dense(), vec![2.0, 1.0, 0.0]);
        let t =
            vectorize_text("d", 0, &["a", "a", "b", "zz"], &v, FeatureMode::Normalized).unwrap();
        assert_eq!(t.dense(), vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert!(vectorize_text("d", 0, &["q", "r"], &v, FeatureMode::Counts).is_err());
        let none: [&str; 0] = [];
        assert!(vectorize_text("d", 0, &none, &v, FeatureMode::Counts).is_err());
    }

    #[test]
    fn align_drops_missing_words() {
        let v = vocab_of(&["a", "b", "c"]);
        let wv = WordVectors {
            dim: 2,
            words: toks(&["c", "a"]),
            vectors: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        };
        let (v2, emb, dropped) = EmbeddingTable::align(&v, &wv).unwrap();
        assert_eq!(v2.words(), &["a", "c"]);
        assert_eq!(emb.vectors(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(dropped, vec!["b".to_string()]);
    }

    #[test]
    fn random_graph_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(4..=32);
            let k = rng.random_range(1..n.min(9));
            let emb = random_embeddings(n, 5, &mut rng);
            let vocab =
                Vocabulary::new((0..n).map(|i| format!("w{i}")).collect(), vec![1; n]).unwrap();
            let g = TextGraph::build(vocab, &emb, k, Exec::default()).unwrap();
            assert!(g.degrees().iter().all(|&d| d >= k));

            // L (D^{1/2} 1) = 0 for graphs without isolated vertices.
            let sqrt_deg: Vec<f64> = g.degrees().iter().map(|&d| (d as f64).sqrt()).collect();
            let r = linalg::spmv(g.laplacian(), &sqrt_deg).unwrap();
            assert!(r.iter().all(|x| x.abs() < 1e-10));

            let e = dense_eigh(&g.laplacian().to_dense()).unwrap();
            assert!(e
                .values
                .iter()
                .all(|&l| (-1e-10..=2.0 + 1e-10).contains(&l)));
            let lm = g.lambda_max();
            let top = e.values[n - 1];
            if lm.converged {
                assert!(lm.value <= top + 1e-12);
                assert!((lm.value - top).abs() < 1e-6 * top);
            } else {
                assert_eq!(lm.value, 2.0);
            }
            let scaled = dense_eigh(&g.scaled_laplacian().to_dense()).unwrap();
            assert!(scaled
                .values
                .iter()
                .all(|&l| (-1.0 - 1e-9..=1.0 + 1e-6).contains(&l)));

            // Undo the rescaling.
            let back = g
                .scaled_laplacian()
                .affine(g.lambda_max().value / 2.0, g.lambda_max().value / 2.0);
            assert!(back.to_dense().max_abs_diff(&g.laplacian().to_dense()) < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn knn_scale_invariant_and_symmetric(
            seed in 0u64..10_000,
            scale in 0.01f64..100.0,
            k in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = random_embeddings(10, 4, &mut rng);
            let scaled = EmbeddingTable::new(
                4,
                emb.vectors().iter().map(|v| v.iter().map(|x| x * scale).collect()).collect(),
            ).unwrap();
            let a = knn_adjacency(&emb, k, Exec::default()).unwrap();
            let b = knn_adjacency(&scaled, k, Exec::default()).unwrap();
            prop_assert_eq!(&a, &b);
            for i in 0..10 {
                prop_assert_eq!(a.get(i, i), 0.0);
                for (j, v) in a.row(i) {
                    prop_assert_eq!(a.get(j, i), v);
                }
            }
        }
    }
}
