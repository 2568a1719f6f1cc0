//! The `gin` command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, CONFIG_ENV};
use crate::data_io::{
    generate_synthetic, load_checkpoint, load_corpus, load_graph, load_token_lists,
    load_vocabulary, load_word_vectors, write_corpus, write_file, write_graph, write_vocabulary,
    CorpusManifest, Split,
};
use crate::error::{GinError, Result};
use crate::eval::{Direction, ScoreMatrix};
use crate::exec::{ExecMode, Strategy};
use crate::gradcheck::run_gradcheck;
use crate::model::Pass;
use crate::numfmt::g9;
use crate::pipeline::{
    build_text_graph, check_model_fits, evaluate_split, format_eval_report, format_pr_curve,
    run_training, vectorize_all,
};
use crate::text_graph::{build_vocabulary, DEFAULT_K};

#[derive(Debug, Parser)]
#[command(
    name = "gin",
    version,
    about = "Graph-convolutional text/image retrieval"
)]
pub struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary TSV from a texts file.
    Vocab(VocabArgs),
    /// Build the k-NN word graph for a vocabulary.
    Graph(GraphArgs),
    /// Train a model; writes config, vocabulary, graph, loss log and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split in both retrieval directions.
    Eval(EvalArgs),
    /// Rank the other modality's items for one query.
    Query(QueryArgs),
    /// Write a clustered synthetic corpus and a matching run config.
    Synth(SynthArgs),
    /// Finite-difference check of every parameter gradient on a tiny model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Texts file (`doc_id<TAB>label<TAB>tokens`).
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub max_words: usize,
    #[arg(long, default_value_t = 1)]
    pub min_doc_freq: usize,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// word2vec text file.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Receives `graph.txt` and the aligned `vocab.tsv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub runtime: RuntimeArgs,
}

#[derive(Debug, Args, Default)]
pub struct RuntimeArgs {
    /// Unordered parallel accumulation (not bit-reproducible).
    #[arg(long)]
    pub fast: bool,
    /// Run on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
    /// Worker threads (0: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl RuntimeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.fast {
            cfg.runtime.mode = ExecMode::Fast;
        }
        if self.sequential {
            cfg.runtime.strategy = Strategy::Sequential;
        }
        if let Some(w) = self.workers {
            cfg.runtime.workers = w;
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run config (TOML). Defaults to the file named by GIN_CONFIG.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load_or(&self, fallback: impl FnOnce() -> Result<RunConfig>) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => fallback(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub runtime: RuntimeArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report directory (default: the checkpoint's directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFiles,
    #[command(flatten)]
    pub runtime: RuntimeArgs,
}

/// Files of a training run that evaluation needs besides the checkpoint.
#[derive(Debug, Args)]
pub struct RunFiles {
    /// Vocabulary (default: `vocab.tsv` next to the checkpoint).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Graph (default: `graph.txt` next to the checkpoint).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Run config for feature mode and runtime (default: `config.toml`
    /// next to the checkpoint, if present).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl RunFiles {
    fn resolve(&self, checkpoint: &Path) -> Result<(PathBuf, PathBuf, RunConfig)> {
        let dir = checkpoint.parent().unwrap_or(Path::new(""));
        let vocab = self.vocab.clone().unwrap_or_else(|| dir.join("vocab.tsv"));
        let graph = self.graph.clone().unwrap_or_else(|| dir.join("graph.txt"));
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if dir.join("config.toml").exists() => RunConfig::load(&dir.join("config.toml"))?,
            None => RunConfig::default(),
        };
        Ok((vocab, graph, cfg))
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pair id of the query item.
    #[arg(long)]
    pub id: String,
    /// `text_to_image` (t2i) or `image_to_text` (i2t).
    #[arg(long, default_value = "text_to_image")]
    pub direction: String,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Split the candidates come from.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub run: RunFiles,
    #[command(flatten)]
    pub runtime: RuntimeArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Run config whose `[synthetic]` section describes the corpus.
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Run config: `[gradcheck]` sizes the problem, `[loss]` the objective.
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn init_workers(cfg: &RunConfig) {
    #[cfg(feature = "parallel")]
    if cfg.runtime.workers > 0 {
        // Only the first call in a process can size the global pool.
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.runtime.workers)
            .build_global()
        {
            log::debug!("worker pool already initialized: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cfg;
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

/// Runs one parsed command, writing user-facing output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut say = |line: String| -> Result<()> {
        writeln!(out, "{line}").map_err(|e| GinError::io("<stdout>", e))
    };
    match cli.command {
        Command::Vocab(a) => {
            let docs = load_token_lists(&a.texts)?;
            let vocab = build_vocabulary(&docs, a.max_words, a.min_doc_freq)?;
            write_vocabulary(&a.out, &vocab)?;
            say(format!(
                "{} words from {} documents -> {}",
                vocab.len(),
                docs.len(),
                a.out.display()
            ))
        }
        Command::Graph(a) => {
            let mut cfg = RunConfig::default();
            cfg.graph.k = a.k;
            a.runtime.apply(&mut cfg);
            cfg.validate()?;
            init_workers(&cfg);
            let vocab = load_vocabulary(&a.vocab)?;
            let wv = load_word_vectors(&a.embeddings)?;
            let (graph, dropped) = build_text_graph(&vocab, &wv, a.k, cfg.runtime.exec())?;
            if !dropped.is_empty() {
                eprintln!(
                    "warning: dropped {} vocabulary words without an embedding",
                    dropped.len()
                );
            }
            write_graph(&a.out_dir.join("graph.txt"), &graph)?;
            write_vocabulary(&a.out_dir.join("vocab.tsv"), graph.vocab())?;
            let lm = graph.lambda_max();
            say(format!(
                "{} vertices, {} edges, lambda_max {}{} -> {}",
                graph.n(),
                graph.edges().len(),
                g9(lm.value),
                if lm.converged { "" } else { " (fallback)" },
                a.out_dir.display()
            ))
        }
        Command::Train(a) => {
            let mut cfg = a.config.load_or(|| Ok(RunConfig::default()))?;
            if let Some(m) = a.manifest {
                cfg.paths.manifest = Some(m);
            }
            if let Some(d) = a.out_dir {
                cfg.paths.out_dir = d;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            a.runtime.apply(&mut cfg);
            cfg.validate()?;
            init_workers(&cfg);
            let run = run_training(&cfg)?;
            let last = run.outcome.epoch_loss.last().copied().unwrap_or(f64::NAN);
            say(format!(
                "trained {} steps, final epoch loss {} -> {}",
                run.outcome.steps,
                g9(last),
                run.artifacts.checkpoint.display()
            ))
        }
        Command::Eval(a) => {
            let split = parse_split(&a.split)?;
            let (vocab_path, graph_path, mut cfg) = a.run.resolve(&a.checkpoint)?;
            a.runtime.apply(&mut cfg);
            init_workers(&cfg);
            let model = load_checkpoint(&a.checkpoint)?;
            let graph = load_graph(&graph_path, load_vocabulary(&vocab_path)?)?;
            let corpus = load_corpus(&CorpusManifest::load(&a.manifest)?)?;
            let exec = cfg.runtime.exec();
            let (t2i, i2t, texts, images) =
                evaluate_split(&model, &graph, &corpus, split, cfg.vocab.feature_mode, exec)?;
            let text_ids: Vec<String> = texts.iter().map(|t| t.doc_id.clone()).collect();
            let image_ids: Vec<String> = images.iter().map(|i| i.img_id.clone()).collect();
            let out_dir = a
                .out_dir
                .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new("")).to_path_buf());
            let name = split.as_str();
            write_file(
                &out_dir.join(format!("eval_{name}.tsv")),
                &format_eval_report(&[&t2i, &i2t], &[&text_ids, &image_ids]),
            )?;
            for r in [&t2i, &i2t] {
                write_file(
                    &out_dir.join(format!("pr_{name}_{}.tsv", r.direction)),
                    &format_pr_curve(r),
                )?;
            }
            write_file(
                &out_dir.join(format!("eval_{name}.toml")),
                &format!(
                    "checkpoint = {:?}\nmanifest = {:?}\nvocab = {:?}\ngraph = {:?}\nsplit = {:?}\n\n{}",
                    a.checkpoint.display().to_string(),
                    a.manifest.display().to_string(),
                    vocab_path.display().to_string(),
                    graph_path.display().to_string(),
                    name,
                    cfg.to_toml()
                ),
            )?;
            for r in [&t2i, &i2t] {
                say(format!("{}\t{}", r.direction, g9(r.map)))?;
            }
            Ok(())
        }
        Command::Query(a) => {
            let split = parse_split(&a.split)?;
            let direction: Direction = a.direction.parse()?;
            let (vocab_path, graph_path, mut cfg) = a.run.resolve(&a.checkpoint)?;
            a.runtime.apply(&mut cfg);
            init_workers(&cfg);
            let model = load_checkpoint(&a.checkpoint)?;
            let graph = load_graph(&graph_path, load_vocabulary(&vocab_path)?)?;
            let corpus = load_corpus(&CorpusManifest::load(&a.manifest)?)?;
            check_model_fits(&model, &graph, corpus.image_dim())?;
            let mode = cfg.vocab.feature_mode;
            let exec = cfg.runtime.exec();
            let (ids, labels, scores): (Vec<String>, Vec<usize>, Vec<f64>) = match direction {
                Direction::TextToImage => {
                    let q = corpus
                        .texts
                        .iter()
                        .find(|t| t.doc_id == a.id)
                        .ok_or_else(|| GinError::Data(format!("unknown text id {:?}", a.id)))?;
                    let ft = model.text_forward(
                        &graph,
                        &vectorize_all(&[q], graph.vocab(), mode)?[0],
                        Pass::Inference,
                    )?;
                    let cands = corpus.images_in(split);
                    let scores: Vec<f64> = exec
                        .map(&cands, |c| {
                            model
                                .image_forward(c)
                                .and_then(|fi| model.score_pair(&ft, &fi))
                        })
                        .into_iter()
                        .collect::<Result<_>>()?;
                    (
                        cands.iter().map(|c| c.img_id.clone()).collect(),
                        cands.iter().map(|c| c.label).collect(),
                        scores,
                    )
                }
                Direction::ImageToText => {
                    let q = corpus
                        .images
                        .iter()
                        .find(|i| i.img_id == a.id)
                        .ok_or_else(|| GinError::Data(format!("unknown image id {:?}", a.id)))?;
                    let fi = model.image_forward(q)?;
                    let cands = vectorize_all(&corpus.texts_in(split), graph.vocab(), mode)?;
                    let scores: Vec<f64> = exec
                        .map(&cands, |c| {
                            model
                                .text_forward(&graph, c, Pass::Inference)
                                .and_then(|ft| model.score_pair(&ft, &fi))
                        })
                        .into_iter()
                        .collect::<Result<_>>()?;
                    (
                        cands.iter().map(|c| c.doc_id.clone()).collect(),
                        cands.iter().map(|c| c.label).collect(),
                        scores,
                    )
                }
            };
            if ids.is_empty() {
                return Err(GinError::Data(format!(
                    "split {} has no candidates",
                    split.as_str()
                )));
            }
            let sm = ScoreMatrix::new(scores, vec![0], labels.clone())?;
            for (rank, c) in sm.ranking(0).into_iter().take(a.top).enumerate() {
                say(format!(
                    "{}\t{}\t{}\t{}",
                    rank + 1,
                    ids[c],
                    corpus.class_names[labels[c]],
                    g9(sm.get(0, c))
                ))?;
            }
            Ok(())
        }
        Command::Synth(a) => {
            let mut cfg = a.config.load_or(|| Ok(RunConfig::desk_scale()))?;
            if let Some(s) = a.seed {
                cfg.synthetic.seed = s;
            }
            if let Some(n) = a.noise_level {
                cfg.synthetic.noise_level = n;
            }
            cfg.synthetic.validate()?;
            let corpus = generate_synthetic(&cfg.synthetic)?;
            let manifest = write_corpus(&a.out_dir, &corpus)?;
            cfg.paths.manifest = Some("manifest.toml".into());
            cfg.paths.out_dir = "run".into();
            cfg.paths.vocab = None;
            cfg.paths.graph = None;
            write_file(&a.out_dir.join("run.toml"), &cfg.to_toml())?;
            say(format!(
                "{} pairs in {} classes -> {}",
                corpus.texts.len(),
                corpus.class_names.len(),
                manifest.display()
            ))
        }
        Command::GradCheck(a) => {
            let cfg = a.config.load_or(|| Ok(RunConfig::default()))?;
            cfg.loss.validate()?;
            let report = run_gradcheck(&cfg.gradcheck, &cfg.loss)?;
            for line in report.lines(a.tolerance) {
                say(line)?;
            }
            if report.passes(a.tolerance) {
                say(format!("PASS worst relative error {}", g9(report.worst())))
            } else {
                say(format!("FAIL worst relative error {}", g9(report.worst())))?;
                Err(GinError::Numeric(format!(
                    "gradient check failed at tolerance {}",
                    g9(a.tolerance)
                )))
            }
        }
    }
}
