//! File formats, corpus loading and the synthetic corpus generator.
//!
//! All textual formats are line oriented, UTF-8, `\n` terminated. Numbers use
//! [`g9`] except checkpoint tensors, which use [`exact`]. See `FORMATS.md`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GinError, Result};
use crate::linalg::SparseSym;
use crate::model::{GinModel, ImageSample, ModelConfig, ModelDims, ScoreMode};
use crate::numfmt::{exact, g9};
use crate::text_graph::{ClassId, TextGraph, Vocabulary, WordVectors};

const CHECKPOINT_MAGIC: &str = "gin-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GinError::io(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GinError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| GinError::io(path, e))
}

/// Non-empty lines with 1-based line numbers. Blank lines are rejected so a
/// truncated or hand-edited file cannot silently lose records.
fn records<'a>(
    path: &'a Path,
    text: &'a str,
) -> impl Iterator<Item = Result<(usize, &'a str)>> + 'a {
    text.lines().enumerate().map(move |(i, line)| {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            Err(GinError::parse(path, i + 1, "empty line"))
        } else {
            Ok((i + 1, line))
        }
    })
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| GinError::parse(path, line, format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(GinError::parse(
            path,
            line,
            format!("non-finite value {s:?}"),
        ));
    }
    Ok(v)
}

fn parse_usize(path: &Path, line: usize, s: &str, what: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| {
        GinError::parse(
            path,
            line,
            format!("{what} is not a non-negative integer: {s:?}"),
        )
    })
}

fn tab_fields<'a>(path: &Path, line: usize, s: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = s.split('\t').collect();
    if f.len() != n {
        return Err(GinError::parse(
            path,
            line,
            format!("expected {n} tab-separated fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

// ---------------------------------------------------------------- embeddings

/// word2vec text format: `N dim`, then `word v1 ... vdim` per line.
pub fn load_word_vectors(path: &Path) -> Result<WordVectors> {
    let text = read_file(path)?;
    let mut lines = records(path, &text);
    let (ln, header) = lines
        .next()
        .ok_or_else(|| GinError::parse(path, 1, "missing \"N dim\" header"))??;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 2 {
        return Err(GinError::parse(path, ln, "header must be \"N dim\""));
    }
    let count = parse_usize(path, ln, h[0], "word count")?;
    let dim = parse_usize(path, ln, h[1], "dimension")?;
    if dim == 0 {
        return Err(GinError::parse(path, ln, "dimension must be >= 1"));
    }
    let mut words = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    let mut seen = HashMap::new();
    for rec in lines {
        let (ln, line) = rec?;
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-blank line");
        let v = parts
            .map(|s| parse_f64(path, ln, s))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != dim {
            return Err(GinError::parse(
                path,
                ln,
                format!("word {word:?} has {} values, expected {dim}", v.len()),
            ));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(GinError::parse(
                path,
                ln,
                format!("word {word:?} has an all-zero vector"),
            ));
        }
        if let Some(first) = seen.insert(word.to_string(), ln) {
            return Err(GinError::parse(
                path,
                ln,
                format!("word {word:?} already defined on line {first}"),
            ));
        }
        words.push(word.to_string());
        vectors.push(v);
    }
    if words.len() != count {
        return Err(GinError::parse(
            path,
            1,
            format!("header declares {count} words, file has {}", words.len()),
        ));
    }
    Ok(WordVectors {
        dim,
        words,
        vectors,
    })
}

pub fn format_word_vectors(wv: &WordVectors) -> String {
    let mut s = format!("{} {}\n", wv.words.len(), wv.dim);
    for (w, v) in wv.words.iter().zip(&wv.vectors) {
        s.push_str(w);
        for x in v {
            s.push(' ');
            s.push_str(&g9(*x));
        }
        s.push('\n');
    }
    s
}

pub fn write_word_vectors(path: &Path, wv: &WordVectors) -> Result<()> {
    write_file(path, &format_word_vectors(wv))
}

// ---------------------------------------------------------------- vocabulary

/// `word<TAB>frequency` per line, in rank order.
pub fn format_vocabulary(v: &Vocabulary) -> String {
    let mut s = String::new();
    for (w, f) in v.words().iter().zip(v.freqs()) {
        writeln!(s, "{w}\t{f}").expect("write to string");
    }
    s
}

pub fn write_vocabulary(path: &Path, v: &Vocabulary) -> Result<()> {
    write_file(path, &format_vocabulary(v))
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = read_file(path)?;
    let mut words = Vec::new();
    let mut freqs = Vec::new();
    for rec in records(path, &text) {
        let (ln, line) = rec?;
        let f = tab_fields(path, ln, line, 2)?;
        if f[0].is_empty() || f[0].contains(char::is_whitespace) {
            return Err(GinError::parse(
                path,
                ln,
                format!("invalid word {:?}", f[0]),
            ));
        }
        let freq = f[1]
            .parse::<u64>()
            .map_err(|_| GinError::parse(path, ln, format!("invalid frequency {:?}", f[1])))?;
        words.push(f[0].to_string());
        freqs.push(freq);
    }
    Vocabulary::new(words, freqs).map_err(|e| GinError::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- graph

/// Header `n k lambda_max`, then `i j` per undirected edge (`i < j`, ascending).
pub fn format_graph(g: &TextGraph) -> String {
    let mut s = format!("{} {} {}\n", g.n(), g.k(), g9(g.lambda_max().value));
    for (i, j) in g.edges() {
        writeln!(s, "{i} {j}").expect("write to string");
    }
    s
}

pub fn write_graph(path: &Path, g: &TextGraph) -> Result<()> {
    write_file(path, &format_graph(g))
}

/// Loads the edge list for `vocab` and rebuilds both Laplacians. The stored
/// `lambda_max` is informational; it is re-estimated from the adjacency.
pub fn load_graph(path: &Path, vocab: Vocabulary) -> Result<TextGraph> {
    let text = read_file(path)?;
    let mut lines = records(path, &text);
    let (ln, header) = lines
        .next()
        .ok_or_else(|| GinError::parse(path, 1, "missing \"n k lambda_max\" header"))??;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(GinError::parse(
            path,
            ln,
            "header must be \"n k lambda_max\"",
        ));
    }
    let n = parse_usize(path, ln, h[0], "n")?;
    let k = parse_usize(path, ln, h[1], "k")?;
    parse_f64(path, ln, h[2])?;
    if n != vocab.len() {
        return Err(GinError::parse(
            path,
            ln,
            format!(
                "graph has {n} vertices but the vocabulary has {} words",
                vocab.len()
            ),
        ));
    }
    let mut edges = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for rec in lines {
        let (ln, line) = rec?;
        let p: Vec<&str> = line.split_whitespace().collect();
        if p.len() != 2 {
            return Err(GinError::parse(path, ln, "edge line must be \"i j\""));
        }
        let i = parse_usize(path, ln, p[0], "vertex")?;
        let j = parse_usize(path, ln, p[1], "vertex")?;
        if i >= j || j >= n {
            return Err(GinError::parse(
                path,
                ln,
                format!("edge ({i}, {j}) needs i < j < {n}"),
            ));
        }
        if prev.is_some_and(|p| p >= (i, j)) {
            return Err(GinError::parse(
                path,
                ln,
                "edges must be unique and ascending",
            ));
        }
        prev = Some((i, j));
        edges.push((i, j, 1.0));
    }
    TextGraph::from_adjacency(vocab, k, SparseSym::from_entries(n, edges)?)
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(GinError::InvalidArgument(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

/// A tokenized document before vectorization.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub doc_id: String,
    pub label: ClassId,
    pub tokens: Vec<String>,
}

/// Paths of the files making up a corpus. Relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub texts: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
    pub embeddings: PathBuf,
    pub splits: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let mut m: CorpusManifest = toml::from_str(&text)
            .map_err(|e| GinError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut m.texts,
            &mut m.images,
            &mut m.labels,
            &mut m.embeddings,
            &mut m.splits,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    /// Standard file names inside `dir`, relative to the manifest.
    pub fn standard() -> Self {
        CorpusManifest {
            texts: "texts.tsv".into(),
            images: "images.tsv".into(),
            labels: "labels.txt".into(),
            embeddings: "embeddings.txt".into(),
            splits: "splits.tsv".into(),
        }
    }
}

/// Aligned text-image pairs with class names, splits and word vectors.
/// Text `i` and image `i` need not share an index; they share an id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub texts: Vec<TextRecord>,
    pub images: Vec<ImageSample>,
    pub splits: BTreeMap<String, Split>,
    pub embeddings: WordVectors,
}

impl Corpus {
    /// Indices of the texts and of the images assigned to `split`.
    pub fn split_indices(&self, split: Split) -> (Vec<usize>, Vec<usize>) {
        let t = (0..self.texts.len())
            .filter(|&i| self.splits.get(&self.texts[i].doc_id) == Some(&split))
            .collect();
        let m = (0..self.images.len())
            .filter(|&i| self.splits.get(&self.images[i].img_id) == Some(&split))
            .collect();
        (t, m)
    }

    pub fn images_in(&self, split: Split) -> Vec<ImageSample> {
        let (_, idx) = self.split_indices(split);
        idx.into_iter().map(|i| self.images[i].clone()).collect()
    }

    pub fn texts_in(&self, split: Split) -> Vec<&TextRecord> {
        let (idx, _) = self.split_indices(split);
        idx.into_iter().map(|i| &self.texts[i]).collect()
    }

    /// Checks id pairing, label agreement and split coverage.
    pub fn validate(&self) -> Result<()> {
        let nclass = self.class_names.len();
        let mut text_ids: BTreeMap<&str, ClassId> = BTreeMap::new();
        for t in &self.texts {
            if t.label >= nclass {
                return Err(GinError::Data(format!(
                    "text {} has unknown label {}",
                    t.doc_id, t.label
                )));
            }
            if text_ids.insert(&t.doc_id, t.label).is_some() {
                return Err(GinError::Data(format!("duplicate text id {}", t.doc_id)));
            }
        }
        let mut image_ids = BTreeSet::new();
        for img in &self.images {
            if img.label >= nclass {
                return Err(GinError::Data(format!(
                    "image {} has unknown label {}",
                    img.img_id, img.label
                )));
            }
            if !image_ids.insert(img.img_id.as_str()) {
                return Err(GinError::Data(format!("duplicate image id {}", img.img_id)));
            }
            match text_ids.get(img.img_id.as_str()) {
                None => {
                    return Err(GinError::Data(format!(
                        "image {} has no text with the same id",
                        img.img_id
                    )))
                }
                Some(&l) if l != img.label => {
                    return Err(GinError::Data(format!(
                        "pair {} has text label {} but image label {}",
                        img.img_id, self.class_names[l], self.class_names[img.label]
                    )))
                }
                _ => {}
            }
        }
        if let Some(t) = self
            .texts
            .iter()
            .find(|t| !image_ids.contains(t.doc_id.as_str()))
        {
            return Err(GinError::Data(format!(
                "text {} has no image with the same id",
                t.doc_id
            )));
        }
        if let Some(id) = self
            .splits
            .keys()
            .find(|id| !text_ids.contains_key(id.as_str()))
        {
            return Err(GinError::Data(format!(
                "split assignment for unknown pair id {id}"
            )));
        }
        if let Some(t) = self
            .texts
            .iter()
            .find(|t| !self.splits.contains_key(&t.doc_id))
        {
            return Err(GinError::Data(format!(
                "pair {} has no split assignment",
                t.doc_id
            )));
        }
        if let Some(img) = self.images.first() {
            let d = img.features.len();
            if let Some(bad) = self.images.iter().find(|i| i.features.len() != d) {
                return Err(GinError::dim(
                    format!("image {} features", bad.img_id),
                    d,
                    bad.features.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn image_dim(&self) -> usize {
        self.images.first().map_or(0, |i| i.features.len())
    }
}

fn check_id(path: &Path, line: usize, id: &str) -> Result<()> {
    if id.is_empty() || id.contains(char::is_whitespace) {
        return Err(GinError::parse(path, line, format!("invalid id {id:?}")));
    }
    Ok(())
}

fn class_lookup(
    path: &Path,
    line: usize,
    classes: &HashMap<&str, ClassId>,
    name: &str,
) -> Result<ClassId> {
    classes
        .get(name)
        .copied()
        .ok_or_else(|| GinError::parse(path, line, format!("unknown label {name:?}")))
}

fn class_map(class_names: &[String]) -> HashMap<&str, ClassId> {
    class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect()
}

/// One class name per line; line order defines the class index.
pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    let text = read_file(path)?;
    let mut names: Vec<String> = Vec::new();
    for rec in records(path, &text) {
        let (ln, line) = rec?;
        let name = line.trim();
        if name.contains(char::is_whitespace) {
            return Err(GinError::parse(
                path,
                ln,
                format!("class name {name:?} contains whitespace"),
            ));
        }
        if names.iter().any(|n| n == name) {
            return Err(GinError::parse(
                path,
                ln,
                format!("duplicate class {name:?}"),
            ));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(GinError::parse(path, 1, "no classes"));
    }
    Ok(names)
}

pub fn format_labels(class_names: &[String]) -> String {
    class_names.iter().map(|c| format!("{c}\n")).collect()
}

/// `doc_id<TAB>label<TAB>space-separated tokens`.
pub fn load_texts(path: &Path, class_names: &[String]) -> Result<Vec<TextRecord>> {
    let text = read_file(path)?;
    let classes = class_map(class_names);
    let mut out = Vec::new();
    for rec in records(path, &text) {
        let (ln, line) = rec?;
        let f = tab_fields(path, ln, line, 3)?;
        check_id(path, ln, f[0])?;
        out.push(TextRecord {
            doc_id: f[0].to_string(),
            label: class_lookup(path, ln, &classes, f[1])?,
            tokens: f[2].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

/// Token lists of a texts file, without label validation.
pub fn load_token_lists(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_file(path)?;
    records(path, &text)
        .map(|rec| {
            let (ln, line) = rec?;
            let f = tab_fields(path, ln, line, 3)?;
            check_id(path, ln, f[0])?;
            Ok(f[2].split_whitespace().map(str::to_string).collect())
        })
        .collect()
}

pub fn format_texts(texts: &[TextRecord], class_names: &[String]) -> String {
    let mut s = String::new();
    for t in texts {
        writeln!(
            s,
            "{}\t{}\t{}",
            t.doc_id,
            class_names[t.label],
            t.tokens.join(" ")
        )
        .expect("write to string");
    }
    s
}

/// `img_id<TAB>label<TAB>comma-separated decimals`; the first row fixes the
/// dimensionality.
pub fn load_images(path: &Path, class_names: &[String]) -> Result<Vec<ImageSample>> {
    let text = read_file(path)?;
    let classes = class_map(class_names);
    let mut out: Vec<ImageSample> = Vec::new();
    for rec in records(path, &text) {
        let (ln, line) = rec?;
        let f = tab_fields(path, ln, line, 3)?;
        check_id(path, ln, f[0])?;
        let features = f[2]
            .split(',')
            .map(|s| parse_f64(path, ln, s))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = out.first() {
            if features.len() != first.features.len() {
                return Err(GinError::parse(
                    path,
                    ln,
                    format!(
                        "image {} has {} features, expected {}",
                        f[0],
                        features.len(),
                        first.features.len()
                    ),
                ));
            }
        }
        out.push(ImageSample {
            img_id: f[0].to_string(),
            label: class_lookup(path, ln, &classes, f[1])?,
            features,
        });
    }
    Ok(out)
}

pub fn format_images(images: &[ImageSample], class_names: &[String]) -> String {
    let mut s = String::new();
    for img in images {
        let feats: Vec<String> = img.features.iter().map(|&x| g9(x)).collect();
        writeln!(
            s,
            "{}\t{}\t{}",
            img.img_id,
            class_names[img.label],
            feats.join(",")
        )
        .expect("write to string");
    }
    s
}

/// `pair_id<TAB>train|test`.
pub fn load_splits(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = read_file(path)?;
    let mut out = BTreeMap::new();
    for rec in records(path, &text) {
        let (ln, line) = rec?;
        let f = tab_fields(path, ln, line, 2)?;
        check_id(path, ln, f[0])?;
        let split = f[1]
            .parse()
            .map_err(|e: GinError| GinError::parse(path, ln, e.to_string()))?;
        if out.insert(f[0].to_string(), split).is_some() {
            return Err(GinError::parse(
                path,
                ln,
                format!("pair {} assigned twice", f[0]),
            ));
        }
    }
    Ok(out)
}

/// Split file lines in the order pairs appear in `texts`.
pub fn format_splits(texts: &[TextRecord], splits: &BTreeMap<String, Split>) -> String {
    let mut s = String::new();
    for t in texts {
        if let Some(sp) = splits.get(&t.doc_id) {
            writeln!(s, "{}\t{}", t.doc_id, sp.as_str()).expect("write to string");
        }
    }
    s
}

pub fn load_corpus(manifest: &CorpusManifest) -> Result<Corpus> {
    let class_names = load_labels(&manifest.labels)?;
    let corpus = Corpus {
        texts: load_texts(&manifest.texts, &class_names)?,
        images: load_images(&manifest.images, &class_names)?,
        splits: load_splits(&manifest.splits)?,
        embeddings: load_word_vectors(&manifest.embeddings)?,
        class_names,
    };
    corpus.validate()?;
    let train = corpus
        .splits
        .values()
        .filter(|&&s| s == Split::Train)
        .count();
    log::info!(
        "loaded {} classes, {} pairs ({} train, {} test), {} word vectors of dim {}",
        corpus.class_names.len(),
        corpus.texts.len(),
        train,
        corpus.splits.len() - train,
        corpus.embeddings.words.len(),
        corpus.embeddings.dim
    );
    Ok(corpus)
}

/// Writes every corpus file plus `manifest.toml` into `dir`; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let m = CorpusManifest::standard();
    write_file(&dir.join(&m.labels), &format_labels(&corpus.class_names))?;
    write_file(
        &dir.join(&m.texts),
        &format_texts(&corpus.texts, &corpus.class_names),
    )?;
    write_file(
        &dir.join(&m.images),
        &format_images(&corpus.images, &corpus.class_names),
    )?;
    write_file(
        &dir.join(&m.splits),
        &format_splits(&corpus.texts, &corpus.splits),
    )?;
    write_word_vectors(&dir.join(&m.embeddings), &corpus.embeddings)?;
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&m).map_err(|e| GinError::Config(e.to_string()))?;
    write_file(&path, &text)?;
    Ok(path)
}

// ---------------------------------------------------------------- checkpoint

pub fn format_checkpoint(model: &GinModel) -> String {
    let c = &model.config;
    let d = &model.dims;
    let hidden = if c.image_hidden.is_empty() {
        "-".to_string()
    } else {
        c.image_hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\ndtype f64\n");
    for (key, value) in [
        ("cheb_order", c.cheb_order.to_string()),
        ("conv1_channels", c.conv1_channels.to_string()),
        ("conv2_channels", c.conv2_channels.to_string()),
        ("common_dim", c.common_dim.to_string()),
        ("dropout", exact(c.dropout)),
        ("score_mode", c.score_mode.as_str().to_string()),
        ("image_hidden", hidden),
        ("init_seed", c.init_seed.to_string()),
    ] {
        writeln!(s, "config {key} {value}").expect("write to string");
    }
    for (key, value) in [
        ("vocab_size", d.vocab_size),
        ("image_dim", d.image_dim),
        ("graph_k", d.graph_k),
    ] {
        writeln!(s, "dims {key} {value}").expect("write to string");
    }
    for p in model.params() {
        let shape: Vec<String> = p.shape.iter().map(|x| x.to_string()).collect();
        writeln!(s, "tensor {} {}", p.name, shape.join("x")).expect("write to string");
        let values: Vec<String> = p.data.iter().map(|&x| exact(x)).collect();
        s.push_str(&values.join(" "));
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

pub fn save_checkpoint(path: &Path, model: &GinModel) -> Result<()> {
    write_file(path, &format_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<GinModel> {
    let text = read_file(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let bad = |ln: usize, msg: String| GinError::parse(path, ln, msg);
    let expect = |ln: usize, want: &str| -> Result<()> {
        match lines.get(ln - 1) {
            Some(&l) if l == want => Ok(()),
            Some(l) => Err(bad(ln, format!("expected {want:?}, found {l:?}"))),
            None => Err(bad(ln, format!("expected {want:?}, file ended"))),
        }
    };
    expect(1, &format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"))?;
    expect(2, "dtype f64")?;

    let mut config = ModelConfig::default();
    let mut dims = ModelDims {
        vocab_size: 0,
        image_dim: 0,
        graph_k: 0,
    };
    let mut seen = BTreeSet::new();
    let mut ln = 3;
    while let Some(line) = lines.get(ln - 1) {
        let p: Vec<&str> = line.split(' ').collect();
        if p.len() != 3 || !(p[0] == "config" || p[0] == "dims") {
            break;
        }
        let int = |s: &str| -> Result<usize> { parse_usize(path, ln, s, p[1]) };
        match (p[0], p[1]) {
            ("config", "cheb_order") => config.cheb_order = int(p[2])?,
            ("config", "conv1_channels") => config.conv1_channels = int(p[2])?,
            ("config", "conv2_channels") => config.conv2_channels = int(p[2])?,
            ("config", "common_dim") => config.common_dim = int(p[2])?,
            ("config", "dropout") => config.dropout = parse_f64(path, ln, p[2])?,
            ("config", "score_mode") => {
                config.score_mode = match p[2] {
                    "hadamard" => ScoreMode::Hadamard,
                    "scalar" => ScoreMode::Scalar,
                    other => return Err(bad(ln, format!("unknown score_mode {other:?}"))),
                }
            }
            ("config", "image_hidden") => {
                config.image_hidden = if p[2] == "-" {
                    Vec::new()
                } else {
                    p[2].split(',').map(int).collect::<Result<_>>()?
                }
            }
            ("config", "init_seed") => {
                config.init_seed = p[2]
                    .parse()
                    .map_err(|_| bad(ln, format!("invalid init_seed {:?}", p[2])))?
            }
            ("dims", "vocab_size") => dims.vocab_size = int(p[2])?,
            ("dims", "image_dim") => dims.image_dim = int(p[2])?,
            ("dims", "graph_k") => dims.graph_k = int(p[2])?,
            (sec, key) => return Err(bad(ln, format!("unknown {sec} key {key:?}"))),
        }
        if !seen.insert((p[0], p[1])) {
            return Err(bad(ln, format!("{} {} given twice", p[0], p[1])));
        }
        ln += 1;
    }
    if seen.len() != 11 {
        return Err(bad(
            ln,
            format!("incomplete config block ({} of 11 keys)", seen.len()),
        ));
    }

    let mut model = GinModel::zeros(&config, dims).map_err(|e| bad(ln, e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|p| (p.name, p.shape))
        .collect();
    for ((name, shape), dest) in expected.iter().zip(model.params_mut()) {
        let header = lines
            .get(ln - 1)
            .ok_or_else(|| bad(ln, format!("missing tensor {name}")))?;
        let h: Vec<&str> = header.split(' ').collect();
        if h.len() != 3 || h[0] != "tensor" {
            return Err(bad(
                ln,
                format!("expected tensor header for {name}, found {header:?}"),
            ));
        }
        if h[1] != name {
            return Err(bad(ln, format!("expected tensor {name}, found {}", h[1])));
        }
        let want: Vec<String> = shape.iter().map(|x| x.to_string()).collect();
        if h[2] != want.join("x") {
            return Err(bad(
                ln,
                format!(
                    "tensor {name} has shape {}, config implies {}",
                    h[2],
                    want.join("x")
                ),
            ));
        }
        let data_ln = ln + 1;
        let data = lines.get(data_ln - 1).copied().unwrap_or("");
        let values: Vec<f64> = if data.is_empty() {
            Vec::new()
        } else {
            data.split(' ')
                .map(|s| parse_f64(path, data_ln, s))
                .collect::<Result<_>>()?
        };
        if values.len() != dest.len() {
            return Err(bad(
                data_ln,
                format!(
                    "tensor {name} has {} values, expected {}",
                    values.len(),
                    dest.len()
                ),
            ));
        }
        *dest = values;
        ln += 2;
    }
    expect(ln, "end")?;
    if lines.len() > ln {
        return Err(bad(ln + 1, "trailing data after end".into()));
    }
    Ok(model)
}

// ---------------------------------------------------------------- synthetic

/// Parameters of the clustered synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub texts_per_class: usize,
    pub images_per_class: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub image_dim: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Tokens per document.
    pub doc_len: usize,
    /// Fraction of each class's pairs assigned to the training split.
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 3,
            texts_per_class: 100,
            images_per_class: 100,
            vocab_size: 60,
            embed_dim: 16,
            image_dim: 32,
            noise_level: 0.1,
            seed: 1,
            doc_len: 20,
            train_fraction: 0.7,
        }
    }
}

/// Spread of word vectors around their class center.
const WORD_SPREAD: f64 = 0.1;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("texts_per_class", self.texts_per_class),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("image_dim", self.image_dim),
            ("doc_len", self.doc_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GinError::Config(format!("synthetic.{name} must be >= 1")));
        }
        if self.vocab_size < self.num_classes {
            return Err(GinError::Config(format!(
                "synthetic.vocab_size ({}) must be >= num_classes ({})",
                self.vocab_size, self.num_classes
            )));
        }
        if self.texts_per_class != self.images_per_class {
            return Err(GinError::Config(format!(
                "texts and images come in pairs: texts_per_class ({}) != images_per_class ({})",
                self.texts_per_class, self.images_per_class
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(GinError::Config(
                "synthetic.noise_level must be >= 0".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(GinError::Config(
                "synthetic.train_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Rounds to what the text formats store, so generated data survives a
/// write/load cycle unchanged.
fn stored(x: f64) -> f64 {
    g9(x).parse().expect("g9 output parses")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Clustered corpus. Word `w` belongs to class `w % num_classes` and its
/// vector sits near that class's embedding center. A class-`c` document
/// draws each token from class-`c` words, or with probability
/// `min(noise_level, 1)` from the whole vocabulary. A class-`c` image is the
/// class's image center plus `noise_level`-scaled Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nc = spec.num_classes;
    let embed_centers: Vec<Vec<f64>> = (0..nc)
        .map(|_| gaussian(&mut rng, spec.embed_dim))
        .collect();
    let image_centers: Vec<Vec<f64>> = (0..nc)
        .map(|_| gaussian(&mut rng, spec.image_dim))
        .collect();

    let width = (spec.vocab_size - 1).to_string().len();
    let words: Vec<String> = (0..spec.vocab_size)
        .map(|w| format!("w{w:0width$}"))
        .collect();
    let vectors: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|w| {
            let jitter = gaussian(&mut rng, spec.embed_dim);
            embed_centers[w % nc]
                .iter()
                .zip(jitter)
                .map(|(c, j)| stored(c + WORD_SPREAD * j))
                .collect()
        })
        .collect();
    let class_words: Vec<Vec<usize>> = (0..nc)
        .map(|c| (c..spec.vocab_size).step_by(nc).collect())
        .collect();

    let class_names: Vec<String> = (0..nc).map(|c| format!("class{c}")).collect();
    let per = spec.texts_per_class;
    let id_width = (per - 1).to_string().len();
    let noise_p = spec.noise_level.min(1.0);
    let mut texts = Vec::with_capacity(nc * per);
    let mut images = Vec::with_capacity(nc * per);
    let mut splits = BTreeMap::new();
    for c in 0..nc {
        let mut order: Vec<usize> = (0..per).collect();
        order.shuffle(&mut rng);
        let n_train = ((per as f64 * spec.train_fraction).round() as usize).clamp(1, per);
        let mut split_of = vec![Split::Test; per];
        for &i in &order[..n_train] {
            split_of[i] = Split::Train;
        }
        for (i, split) in split_of.into_iter().enumerate() {
            let id = format!("c{c}_{i:0id_width$}");
            let tokens = (0..spec.doc_len)
                .map(|_| {
                    let w = if rng.random::<f64>() < noise_p {
                        rng.random_range(0..spec.vocab_size)
                    } else {
                        let own = &class_words[c];
                        own[rng.random_range(0..own.len())]
                    };
                    words[w].clone()
                })
                .collect();
            let noise = gaussian(&mut rng, spec.image_dim);
            let features = image_centers[c]
                .iter()
                .zip(noise)
                .map(|(m, z)| stored(m + spec.noise_level * z))
                .collect();
            texts.push(TextRecord {
                doc_id: id.clone(),
                label: c,
                tokens,
            });
            images.push(ImageSample {
                img_id: id.clone(),
                label: c,
                features,
            });
            splits.insert(id, split);
        }
    }
    let corpus = Corpus {
        class_names,
        texts,
        images,
        splits,
        embeddings: WordVectors {
            dim: spec.embed_dim,
            words,
            vectors,
        },
    };
    corpus.validate()?;
    Ok(corpus)
}
