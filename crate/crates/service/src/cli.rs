//! Command-line verbs. Each one returns a JSON value plus a human rendering;
//! `main` picks one based on `--json`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use datr_core::autodiff::sha256;
use datr_core::data::{generate_synthetic_corpus, validate_corpus, Corpus};
use datr_core::evaluation::{
    ablation_rows, ablation_suite, evaluate, grouped_split, train_seed_run, ModelKey, Split, RECALL_KS,
};
use datr_core::model::{Datr, FusionMode};
use datr_core::retrieval::EmbeddingIndex;
use datr_core::training::{build_vocab, train_stage1, train_stage2, ContrastiveLoss, TrainReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{router, AppState, Snapshot};
use crate::config::{DatrConfig, PORT_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "datr", version, about = "Dialogue-aware two-stage text-to-video retrieval")]
pub struct Cli {
    /// Seed for every randomized step of the verb.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus by source into train and test video sets.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the text and video encoders contrastively.
    TrainStage1 {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        loss: Option<ContrastiveLoss>,
        /// Also write the training report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train fusion and re-ranker on top of a Stage-I checkpoint.
    TrainStage2 {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed videos into an index file.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one side of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Side::Test)]
        side: Side,
    },
    /// Rank every test video for each test dialogue and report metrics.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prebuilt index; built from the test videos when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage2: Option<Switch>,
        #[arg(long)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train every ablation variant per seed and tabulate them.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated seeds; `--seed` alone runs a single seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Serve multi-turn search sessions over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, env = PORT_ENV)]
        port: Option<u16>,
    },
    /// Check a corpus directory and optionally a checkpoint/index pair.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Result of a verb.
#[derive(Debug)]
pub struct Output {
    pub json: Value,
    pub text: String,
    /// Nonzero when the verb ran but found problems (e.g. validation).
    pub exit_code: i32,
}

impl Output {
    fn ok(json: Value, text: String) -> Self {
        Self { json, text, exit_code: 0 }
    }

    pub fn render(&self, as_json: bool) -> String {
        if as_json {
            let mut s = serde_json::to_string_pretty(&self.json).expect("output serializes");
            s.push('\n');
            s
        } else {
            self.text.clone()
        }
    }
}

/// On-disk split: the seed it was drawn with plus both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    #[serde(flatten)]
    pub split: Split,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.display().to_string(), e)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// SHA-256 over every file below `dir`, visited in sorted path order, hashing
/// each relative path followed by its contents.
pub fn tree_digest(dir: &Path) -> CliResult<(usize, String)> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut all = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        all.extend_from_slice(rel.to_string_lossy().as_bytes());
        all.push(0);
        all.extend(std::fs::read(f).map_err(io_err(f))?);
    }
    Ok((files.len(), hex::encode(sha256(&all))))
}

pub fn load_split(path: &Path) -> CliResult<SplitFile> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn split_sides(data: &DataArgs) -> CliResult<(Corpus, Corpus)> {
    let corpus = Corpus::load(&data.corpus)?;
    let split = load_split(&data.split)?.split;
    let known: BTreeSet<&str> = corpus.videos().iter().map(|v| v.video_id.as_str()).collect();
    if let Some(id) = split.train.iter().chain(&split.test).find(|id| !known.contains(id.as_str())) {
        return Err(CliError::Usage(format!("split names video {id} that the corpus lacks")));
    }
    Ok((corpus.subset(&split.train), corpus.subset(&split.test)))
}

fn report_text(report: &TrainReport, out: &Path) -> String {
    let mut s = format!(
        "{:?}: {} epochs, {} steps, loss {:.4} -> {:.4}",
        report.stage,
        report.epochs,
        report.steps,
        report.initial_loss,
        report.final_loss()
    );
    if let (Some(a), Some(b)) = (report.heldout_curve.first(), report.heldout_curve.last()) {
        let _ = write!(s, ", held-out {a:.4} -> {b:.4}");
    }
    if let (Some(a), Some(b)) = (report.score_gap_curve.first(), report.score_gap_curve.last()) {
        let _ = write!(s, ", score gap {a:.4} -> {b:.4}");
    }
    let _ = writeln!(
        s,
        ", tau {:.4}, {:.1}s\nwrote {}",
        report.final_tau,
        report.wall_clock_secs,
        out.display()
    );
    s
}

fn metrics_text(result: &datr_core::evaluation::EvalResult) -> String {
    let mut s = format!("{}  ({} queries", result.config, result.n_queries);
    if result.skipped > 0 {
        let _ = write!(s, ", {} skipped", result.skipped);
    }
    s.push_str(")\n");
    for k in RECALL_KS {
        let _ = write!(s, "R@{k} {:.1}  ", 100.0 * result.recall(k));
    }
    let _ = writeln!(s, "MedR {:.1}  MeanR {:.2}", result.med_rank, result.mean_rank);
    s
}

/// Runs one verb to completion.
pub fn run(cli: &Cli) -> CliResult<Output> {
    let mut config = DatrConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match &cli.command {
        Command::GenCorpus { out } => {
            if let Some(s) = seed {
                config.synthetic.seed = s;
            }
            let generated = generate_synthetic_corpus(&config.synthetic)?;
            generated.write(out)?;
            let (files, digest) = tree_digest(out)?;
            let c = &generated.corpus;
            let json = json!({
                "dir": out,
                "seed": config.synthetic.seed,
                "videos": c.videos().len(),
                "triplets": c.triplets().len(),
                "sources": c.sources().len(),
                "files": files,
                "sha256": digest,
            });
            let text = format!(
                "wrote {} videos, {} triplets, {} sources to {} ({files} files, sha256 {digest})\n",
                c.videos().len(),
                c.triplets().len(),
                c.sources().len(),
                out.display()
            );
            Ok(Output::ok(json, text))
        }
        Command::Split { corpus, out } => {
            let seed = seed.unwrap_or(0);
            let c = Corpus::load(corpus)?;
            let split = grouped_split(&c, seed)?;
            let test_sources: BTreeSet<&str> = c
                .videos()
                .iter()
                .filter(|v| split.test.contains(&v.video_id))
                .map(|v| v.source_id.as_str())
                .collect();
            let fraction = split.test.len() as f64 / c.videos().len() as f64;
            let json = json!({
                "seed": seed,
                "train_videos": split.train.len(),
                "test_videos": split.test.len(),
                "test_fraction": fraction,
                "test_sources": test_sources,
                "out": out,
            });
            let text = format!(
                "train {} / test {} videos ({:.1}% test; sources {})\nwrote {}\n",
                split.train.len(),
                split.test.len(),
                100.0 * fraction,
                test_sources.iter().copied().collect::<Vec<_>>().join(", "),
                out.display()
            );
            write_json(out, &SplitFile { seed, split })?;
            Ok(Output::ok(json, text))
        }
        Command::TrainStage1 {
            data,
            out,
            epochs,
            loss,
            report,
        } => {
            let (train, test) = split_sides(data)?;
            let mut tc = config.stage1.clone();
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            if let Some(l) = loss {
                tc.loss = *l;
            }
            let mut model = Datr::new(config.model.clone(), build_vocab(&train), tc.seed)?;
            let heldout = (test.triplets().len() >= 2).then_some(&test);
            let rep = train_stage1(&mut model, &train, heldout, &tc)?;
            write_file(out, &model.to_checkpoint().to_bytes())?;
            if let Some(path) = report {
                write_json(path, &rep)?;
            }
            let mut json = serde_json::to_value(&rep)?;
            json["checkpoint"] = json!(out);
            json["checkpoint_sha256"] = json!(hex::encode(model.digest()));
            Ok(Output::ok(json, report_text(&rep, out)))
        }
        Command::TrainStage2 {
            data,
            init,
            out,
            epochs,
            fusion,
            report,
        } => {
            let (train, _) = split_sides(data)?;
            let mut tc = config.stage2.clone();
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            if let Some(f) = fusion {
                tc.fusion = *f;
            }
            let mut model = Datr::load(init)?;
            let rep = train_stage2(&mut model, &train, &tc)?;
            write_file(out, &model.to_checkpoint().to_bytes())?;
            if let Some(path) = report {
                write_json(path, &rep)?;
            }
            let mut json = serde_json::to_value(&rep)?;
            json["checkpoint"] = json!(out);
            json["checkpoint_sha256"] = json!(hex::encode(model.digest()));
            Ok(Output::ok(json, report_text(&rep, out)))
        }
        Command::BuildIndex {
            corpus,
            checkpoint,
            out,
            split,
            side,
        } => {
            let c = Corpus::load(corpus)?;
            let c = match split {
                None => c,
                Some(path) => {
                    let s = load_split(path)?.split;
                    match side {
                        Side::Train => c.subset(&s.train),
                        Side::Test => c.subset(&s.test),
                        Side::All => c,
                    }
                }
            };
            let model = Datr::load(checkpoint)?;
            let index = EmbeddingIndex::build(c.videos(), &model)?;
            let bytes = index.to_bytes();
            write_file(out, &bytes)?;
            let json = json!({
                "videos": index.len(),
                "dim": index.dim(),
                "checkpoint_sha256": hex::encode(index.checkpoint_digest()),
                "index_sha256": hex::encode(sha256(&bytes)),
                "out": out,
            });
            let text = format!(
                "indexed {} videos at d = {}\nwrote {}\n",
                index.len(),
                index.dim(),
                out.display()
            );
            Ok(Output::ok(json, text))
        }
        Command::Evaluate {
            data,
            checkpoint,
            index,
            stage2,
            fusion,
            k,
        } => {
            let (_, test) = split_sides(data)?;
            let model = Datr::load(checkpoint)?;
            let idx = match index {
                Some(path) => {
                    let idx = EmbeddingIndex::load(path)?;
                    if idx.checkpoint_digest() != &model.digest() {
                        return Err(CliError::Usage(format!(
                            "{} was built from a different checkpoint",
                            path.display()
                        )));
                    }
                    idx
                }
                None => EmbeddingIndex::build(test.videos(), &model)?,
            };
            let mut pc = config.pipeline;
            if let Some(s) = stage2 {
                pc.stage2 = *s == Switch::On;
            }
            if let Some(f) = fusion {
                pc.fusion = *f;
            }
            if let Some(k) = k {
                pc.k = *k;
            }
            let result = evaluate(&model, &idx, test.triplets(), &pc)?;
            let text = metrics_text(&result);
            Ok(Output::ok(serde_json::to_value(&result)?, text))
        }
        Command::Ablate { corpus, seeds } => {
            let seeds: Vec<u64> = match (seeds.is_empty(), seed) {
                (false, _) => seeds.clone(),
                (true, Some(s)) => vec![s],
                (true, None) => config.ablation.seeds.clone(),
            };
            let c = Corpus::load(corpus)?;
            let rows = ablation_rows();
            let keys: BTreeSet<ModelKey> = rows.iter().map(|r| r.model).collect();
            let keys: Vec<ModelKey> = keys.into_iter().collect();
            let runs = seeds
                .iter()
                .map(|&s| train_seed_run(&c, s, &config.model, &config.stage1, &config.stage2, &keys))
                .collect::<datr_core::Result<Vec<_>>>()?;
            let table = ablation_suite(&runs, &rows, &config.pipeline)?;
            let text = table.to_text();
            Ok(Output::ok(serde_json::to_value(&table)?, text))
        }
        Command::Serve {
            checkpoint,
            index,
            corpus,
            port,
        } => {
            let mut sc = config.service.clone();
            if let Some(p) = checkpoint {
                sc.checkpoint_path = p.clone();
            }
            if let Some(p) = index {
                sc.index_path = p.clone();
            }
            if let Some(p) = corpus {
                sc.corpus_dir = Some(p.clone());
            }
            if let Some(p) = port {
                sc.port = *p;
            }
            sc.validate()?;
            let snapshot = Snapshot::load(&sc)?;
            serve(sc, snapshot)?;
            Ok(Output::ok(json!({ "status": "stopped" }), "stopped\n".into()))
        }
        Command::Validate {
            corpus,
            checkpoint,
            index,
        } => validate(corpus, checkpoint.as_deref(), index.as_deref()),
    }
}

fn validate(corpus: &Path, checkpoint: Option<&Path>, index: Option<&Path>) -> CliResult<Output> {
    let report = validate_corpus(corpus);
    let mut problems: Vec<String> = report
        .violations
        .iter()
        .map(|v| format!("{:?} {}: {}", v.kind, v.path, v.detail))
        .collect();
    let model = checkpoint.map(Datr::load).transpose();
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            problems.push(format!("checkpoint: {e}"));
            None
        }
    };
    if let Some(path) = index {
        match EmbeddingIndex::load(path) {
            Err(e) => problems.push(format!("index: {e}")),
            Ok(idx) => {
                if let Some(m) = &model {
                    if idx.checkpoint_digest() != &m.digest() {
                        problems.push(format!("index: {} was built from a different checkpoint", path.display()));
                    }
                    if idx.dim() != m.config().d {
                        problems.push(format!("index: dimension {} but model d = {}", idx.dim(), m.config().d));
                    }
                }
            }
        }
    }
    let mut text = format!(
        "{} videos, {} triplets, {} sources",
        report.videos, report.triplets, report.sources
    );
    if let Some((t, d)) = report.frame_shape {
        let _ = write!(text, ", frames {t}x{d}");
    }
    text.push('\n');
    for p in &problems {
        let _ = writeln!(text, "  {p}");
    }
    let _ = writeln!(
        text,
        "{}",
        if problems.is_empty() { "ok" } else { "problems found" }
    );
    let json = json!({
        "corpus": report,
        "problems": problems,
        "ok": problems.is_empty(),
    });
    Ok(Output {
        json,
        text,
        exit_code: if problems.is_empty() { 0 } else { 1 },
    })
}

fn serve(config: crate::config::ServiceConfig, snapshot: Snapshot) -> CliResult<()> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io("tokio runtime".into(), e))?;
    runtime.block_on(async move {
        let addr = std::net::SocketAddr::from(([0, 0, 0, 0], config.port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Io(addr.to_string(), e))?;
        eprintln!("listening on http://{addr}");
        let app = router(AppState::new(config, Some(snapshot)));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Io(addr.to_string(), e))
    })
}
