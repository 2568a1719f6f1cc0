//! End-to-end glue: corpus -> vocabulary -> graph -> features -> training
//! and evaluation. Shared by the command-line tool and the test suites.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data_io::{
    load_corpus, load_graph, load_vocabulary, save_checkpoint, write_file, write_graph,
    write_vocabulary, Corpus, CorpusManifest, Split, TextRecord,
};
use crate::error::{GinError, Result};
use crate::eval::{evaluate_both, score_all, EvalReport};
use crate::exec::Exec;
use crate::loss::LossBreakdown;
use crate::model::{GinModel, ImageSample};
use crate::numfmt::g9;
use crate::text_graph::{
    build_vocabulary, vectorize_text, EmbeddingTable, FeatureMode, TextGraph, TextSample,
    Vocabulary, WordVectors,
};
use crate::trainer::{build_pair_pool, progress_line, train, ProgressSink, TrainOutcome};

/// Vocabulary from the training split's documents.
pub fn training_vocabulary(
    corpus: &Corpus,
    max_words: usize,
    min_doc_freq: usize,
) -> Result<Vocabulary> {
    let docs: Vec<&Vec<String>> = corpus
        .texts_in(Split::Train)
        .into_iter()
        .map(|t| &t.tokens)
        .collect();
    build_vocabulary(&docs, max_words, min_doc_freq)
}

/// Aligns `vocab` with the word vectors (dropping words without one) and
/// builds the k-NN graph. Returns the dropped words too. A `k` of at least
/// the aligned vocabulary size gives the complete graph.
pub fn build_text_graph(
    vocab: &Vocabulary,
    wv: &WordVectors,
    k: usize,
    exec: Exec,
) -> Result<(TextGraph, Vec<String>)> {
    let (aligned, emb, dropped) = EmbeddingTable::align(vocab, wv)?;
    let n = aligned.len();
    if n < 2 {
        return Err(GinError::Data(format!(
            "need at least 2 vocabulary words with embeddings, have {n}"
        )));
    }
    let k = if k >= n {
        log::warn!(
            "k = {k} >= {n} vertices; building the complete graph (k = {})",
            n - 1
        );
        n - 1
    } else {
        k
    };
    Ok((TextGraph::build(aligned, &emb, k, exec)?, dropped))
}

pub fn vectorize_all(
    records: &[&TextRecord],
    vocab: &Vocabulary,
    mode: FeatureMode,
) -> Result<Vec<TextSample>> {
    records
        .iter()
        .map(|t| vectorize_text(&t.doc_id, t.label, &t.tokens, vocab, mode))
        .collect()
}

/// Graph and per-split feature vectors ready for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: TextGraph,
    pub dropped_words: Vec<String>,
    pub train_texts: Vec<TextSample>,
    pub train_images: Vec<ImageSample>,
    pub test_texts: Vec<TextSample>,
    pub test_images: Vec<ImageSample>,
}

/// Uses the vocabulary and graph files from `cfg.paths` when given,
/// otherwise builds them from the corpus.
pub fn prepare(corpus: &Corpus, cfg: &RunConfig, exec: Exec) -> Result<Prepared> {
    let (graph, dropped_words) = match (&cfg.paths.vocab, &cfg.paths.graph) {
        (Some(v), Some(g)) => (load_graph(g, load_vocabulary(v)?)?, Vec::new()),
        (Some(v), None) => {
            build_text_graph(&load_vocabulary(v)?, &corpus.embeddings, cfg.graph.k, exec)?
        }
        (None, None) => {
            let vocab = training_vocabulary(corpus, cfg.vocab.max_words, cfg.vocab.min_doc_freq)?;
            build_text_graph(&vocab, &corpus.embeddings, cfg.graph.k, exec)?
        }
        (None, Some(_)) => {
            return Err(GinError::Config("paths.graph needs paths.vocab".into()));
        }
    };
    let mode = cfg.vocab.feature_mode;
    Ok(Prepared {
        train_texts: vectorize_all(&corpus.texts_in(Split::Train), graph.vocab(), mode)?,
        test_texts: vectorize_all(&corpus.texts_in(Split::Test), graph.vocab(), mode)?,
        train_images: corpus.images_in(Split::Train),
        test_images: corpus.images_in(Split::Test),
        graph,
        dropped_words,
    })
}

/// Writes each batch record to the loss log and snapshots the model every
/// `every` epochs.
struct RunSink {
    log: BufWriter<File>,
    log_path: PathBuf,
    ckpt_dir: PathBuf,
    every: usize,
}

impl ProgressSink for RunSink {
    fn on_batch(&mut self, epoch: usize, batch: usize, loss: &LossBreakdown) -> Result<()> {
        writeln!(self.log, "{}", progress_line(epoch, batch, loss))
            .map_err(|e| GinError::io(&self.log_path, e))
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &GinModel) -> Result<()> {
        if self.every > 0 && (epoch + 1).is_multiple_of(self.every) {
            save_checkpoint(
                &self.ckpt_dir.join(format!("epoch-{:04}.ckpt", epoch + 1)),
                model,
            )?;
        }
        Ok(())
    }
}

/// Files written by [`run_training`], all inside the output directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub config: PathBuf,
    pub vocab: PathBuf,
    pub graph: PathBuf,
    pub loss_log: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        RunArtifacts {
            out_dir: dir.to_path_buf(),
            config: dir.join("config.toml"),
            vocab: dir.join("vocab.tsv"),
            graph: dir.join("graph.txt"),
            loss_log: dir.join("loss.log"),
            checkpoint: dir.join("model.ckpt"),
        }
    }
}

pub struct TrainedRun {
    pub artifacts: RunArtifacts,
    pub prepared: Prepared,
    pub outcome: TrainOutcome,
}

/// Loads the corpus named by `cfg.paths.manifest`, trains, and writes the
/// effective config, vocabulary, graph, loss log and final checkpoint.
pub fn run_training(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let manifest = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| GinError::Config("paths.manifest is required for training".into()))?;
    let corpus = load_corpus(&CorpusManifest::load(manifest)?)?;
    let exec = cfg.runtime.exec();
    let prepared = prepare(&corpus, cfg, exec)?;
    if !prepared.dropped_words.is_empty() {
        log::warn!(
            "{} vocabulary words dropped for lack of an embedding",
            prepared.dropped_words.len()
        );
    }

    let art = RunArtifacts::in_dir(&cfg.paths.out_dir);
    write_file(&art.config, &cfg.to_toml())?;
    write_vocabulary(&art.vocab, prepared.graph.vocab())?;
    write_graph(&art.graph, &prepared.graph)?;

    let pool = build_pair_pool(
        &prepared.train_texts,
        &prepared.train_images,
        cfg.train.total_pos,
        cfg.train.total_neg,
        cfg.train.seed,
    )?;
    let image_dim = corpus.image_dim();
    let model = GinModel::for_graph(&cfg.model, &prepared.graph, image_dim)?;
    let log_file = File::create(&art.loss_log).map_err(|e| GinError::io(&art.loss_log, e))?;
    let mut sink = RunSink {
        log: BufWriter::new(log_file),
        log_path: art.loss_log.clone(),
        ckpt_dir: art.out_dir.join("checkpoints"),
        every: cfg.train.checkpoint_every,
    };
    let outcome = train(
        model,
        &prepared.graph,
        &prepared.train_texts,
        &prepared.train_images,
        &pool,
        &cfg.train,
        &cfg.loss,
        exec,
        &mut sink,
    )?;
    sink.log
        .flush()
        .map_err(|e| GinError::io(&art.loss_log, e))?;
    save_checkpoint(&art.checkpoint, &outcome.model)?;
    Ok(TrainedRun {
        artifacts: art,
        prepared,
        outcome,
    })
}

/// Checks that a checkpoint fits the graph and image dimensionality.
pub fn check_model_fits(model: &GinModel, graph: &TextGraph, image_dim: usize) -> Result<()> {
    if model.dims.vocab_size != graph.n() {
        return Err(GinError::Data(format!(
            "checkpoint expects {} graph vertices, graph has {}",
            model.dims.vocab_size,
            graph.n()
        )));
    }
    if model.dims.image_dim != image_dim {
        return Err(GinError::Data(format!(
            "checkpoint expects {}-dimensional image features, corpus has {}",
            model.dims.image_dim, image_dim
        )));
    }
    Ok(())
}

/// Evaluates both retrieval directions on one split.
pub fn evaluate_split(
    model: &GinModel,
    graph: &TextGraph,
    corpus: &Corpus,
    split: Split,
    mode: FeatureMode,
    exec: Exec,
) -> Result<(EvalReport, EvalReport, Vec<TextSample>, Vec<ImageSample>)> {
    check_model_fits(model, graph, corpus.image_dim())?;
    let texts = vectorize_all(&corpus.texts_in(split), graph.vocab(), mode)?;
    let images = corpus.images_in(split);
    let sm = score_all(model, graph, &texts, &images, exec)?;
    let (t2i, i2t) = evaluate_both(&sm, exec)?;
    Ok((t2i, i2t, texts, images))
}

/// `direction map queries excluded` block followed by a
/// `direction query_id ap` block, tab separated.
pub fn format_eval_report(reports: &[&EvalReport], query_ids: &[&[String]]) -> String {
    let mut s = String::from("direction\tmap\tqueries\texcluded\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.direction,
            g9(r.map),
            r.per_query_ap.len(),
            r.excluded
        ));
    }
    s.push_str("direction\tquery_id\tap\n");
    for (r, ids) in reports.iter().zip(query_ids) {
        for &(q, ap) in &r.per_query_ap {
            s.push_str(&format!("{}\t{}\t{}\n", r.direction, ids[q], g9(ap)));
        }
    }
    s
}

/// `recall<TAB>precision` per rank cutoff, with a header line.
pub fn format_pr_curve(r: &EvalReport) -> String {
    let mut s = String::from("recall\tprecision\n");
    for &(rec, prec) in &r.pr_points {
        s.push_str(&format!("{}\t{}\n", g9(rec), g9(prec)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, write_corpus, SyntheticSpec};

    fn tiny_run(dir: &Path) -> RunConfig {
        let spec = SyntheticSpec {
            texts_per_class: 8,
            images_per_class: 8,
            vocab_size: 15,
            embed_dim: 4,
            image_dim: 5,
            ..SyntheticSpec::default()
        };
        let manifest =
            write_corpus(&dir.join("corpus"), &generate_synthetic(&spec).unwrap()).unwrap();
        let mut cfg = RunConfig::desk_scale();
        cfg.paths.manifest = Some(manifest);
        cfg.paths.out_dir = dir.join("out");
        cfg.graph.k = 3;
        cfg.model.conv1_channels = 2;
        cfg.model.conv2_channels = 2;
        cfg.model.common_dim = 4;
        cfg.train.batch_size = 8;
        cfg.train.q1 = 4;
        cfg.train.q2 = 4;
        cfg.train.total_pos = 16;
        cfg.train.total_neg = 16;
        cfg.train.epochs = 2;
        cfg.train.checkpoint_every = 1;
        cfg
    }

    #[test]
    fn training_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let run = run_training(&cfg).unwrap();
        let a = &run.artifacts;
        for p in [&a.config, &a.vocab, &a.graph, &a.loss_log, &a.checkpoint] {
            assert!(p.exists(), "{}", p.display());
        }
        assert!(a.out_dir.join("checkpoints/epoch-0002.ckpt").exists());
        let log = std::fs::read_to_string(&a.loss_log).unwrap();
        assert_eq!(log.lines().count(), 2 * 4);
        assert!(log.lines().all(|l| l.split(' ').count() == 8));
        assert_eq!(
            RunConfig::from_toml(&std::fs::read_to_string(&a.config).unwrap()).unwrap(),
            cfg
        );
        // Loading the written vocabulary and graph reproduces the features.
        let mut reuse = cfg.clone();
        reuse.paths.vocab = Some(a.vocab.clone());
        reuse.paths.graph = Some(a.graph.clone());
        reuse.paths.out_dir = dir.path().join("out2");
        let again = run_training(&reuse).unwrap();
        assert_eq!(again.prepared.graph, run.prepared.graph);
        assert_eq!(again.outcome.model, run.outcome.model);
    }

    #[test]
    fn zero_learning_rate_keeps_the_initial_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run(dir.path());
        cfg.train.learning_rate = 0.0;
        let run = run_training(&cfg).unwrap();
        let init = GinModel::for_graph(&cfg.model, &run.prepared.graph, 5).unwrap();
        assert_eq!(run.outcome.model, init);
    }

    #[test]
    fn report_formats() {
        use crate::eval::{Direction, ScoreMatrix};
        let sm = ScoreMatrix::new(vec![0.9, 0.1, 0.2, 0.8], vec![0, 1], vec![0, 1]).unwrap();
        let (a, b) = evaluate_both(&sm, Exec::SEQUENTIAL).unwrap();
        assert_eq!(a.direction, Direction::TextToImage);
        let ids: Vec<String> = vec!["x".into(), "y".into()];
        let text = format_eval_report(&[&a, &b], &[&ids, &ids]);
        assert_eq!(
            text,
            "direction\tmap\tqueries\texcluded\ntext_to_image\t1\t2\t0\nimage_to_text\t1\t2\t0\n\
             direction\tquery_id\tap\ntext_to_image\tx\t1\ntext_to_image\ty\t1\n\
             image_to_text\tx\t1\nimage_to_text\ty\t1\n"
        );
        assert_eq!(format_pr_curve(&a), "recall\tprecision\n1\t1\n1\t1\n");
    }
}
