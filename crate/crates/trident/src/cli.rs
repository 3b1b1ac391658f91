//! `trident` command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use trident_core::aux::TextProvider;
use trident_core::data::Phase;
use trident_core::error::Error as CoreError;
use trident_core::vocab::Composition;

use crate::checkpoint;
use crate::config::{ProviderKind, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{read_store, write_embeddings};
use crate::io::{load_aux_cache, load_manifest, read_json, save_aux_cache, to_json, write_json};
use crate::pipeline;
use crate::providers::{ChatProvider, StubEmbeddingProvider, StubTextProvider};

#[derive(Debug, Parser)]
#[command(name = "trident", version, about = "Compositional zero-shot learning: data, training, evaluation and retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic manifest, pair files and TRIF1 feature store.
    Synth(SynthArgs),
    /// Generate auxiliary attributes for every seen composition.
    GenAux(GenAuxArgs),
    /// Write a TRIE1 embedding file for the vocabulary.
    EmbedWords(EmbedArgs),
    /// Train a model and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a phase and write the bias-sweep metrics.
    Eval(EvalArgs),
    /// Rank compositions for an image, or images for a composition.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest (JSON Lines); pair files are read from the same directory.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// TRIF1 feature store.
    #[arg(long, value_name = "PATH")]
    pub features: Option<PathBuf>,
    /// Auxiliary attribute cache (JSON).
    #[arg(long, value_name = "PATH")]
    pub aux: Option<PathBuf>,
    /// TRIE1 word embedding file.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenAuxArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Concurrent provider requests.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Overrides the configured number of epochs.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Disable a component (repeatable): condition_masks, faa, word_expanding,
    /// attribute_smoothing, disentangle_losses, ortho.
    #[arg(long, value_name = "NAME")]
    pub ablate: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Resume even if the checkpoint's model configuration differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PHASE", default_value = "test")]
    pub phase: Phase,
    #[arg(long, value_name = "N")]
    pub topk: Option<usize>,
    /// Components the checkpoint was trained without (repeatable).
    #[arg(long, value_name = "NAME")]
    pub ablate: Vec<String>,
    /// Load the checkpoint even if its model configuration differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PHASE", default_value = "test")]
    pub phase: Phase,
    /// Image id: rank the phase's compositions.
    #[arg(long, value_name = "ID", conflicts_with = "query_text", required_unless_present = "query_text")]
    pub query_image: Option<String>,
    /// "attribute object": rank the phase's images.
    #[arg(long, value_name = "TEXT")]
    pub query_text: Option<String>,
    #[arg(long, value_name = "N", default_value_t = 5)]
    pub top_n: usize,
    #[arg(long, value_name = "NAME")]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_to(argv, &mut std::io::stdout().lock())
}

/// [`run`] with the command's result written to `stdout`.
pub fn run_to<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(text) => {
            let _ = stdout.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(o) = &common.out {
        c.out = o.clone();
    }
    Ok(c)
}

fn ablate(c: &mut RunConfig, names: &[String]) -> Result<()> {
    for n in names {
        c.model.ablations.disable(n)?;
    }
    c.validate()
}

struct Paths {
    manifest: PathBuf,
    features: PathBuf,
    aux: PathBuf,
    embeddings: PathBuf,
}

/// Flag, then configuration, then a file next to the manifest.
fn paths(c: &RunConfig, d: &DataArgs) -> Paths {
    let manifest = d.manifest.clone().or_else(|| c.data.manifest.clone()).unwrap_or_else(|| c.out.join("manifest.jsonl"));
    let dir = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    let pick = |flag: &Option<PathBuf>, conf: &Option<PathBuf>, name: &str| flag.clone().or_else(|| conf.clone()).unwrap_or_else(|| dir.join(name));
    Paths {
        features: pick(&d.features, &c.data.features, "features.trif"),
        aux: pick(&d.aux, &c.data.aux, "aux.json"),
        embeddings: pick(&d.embeddings, &c.data.embeddings, "embeddings.trie"),
        manifest,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn text_provider(c: &RunConfig, kind: ProviderKind) -> Result<Option<Box<dyn TextProvider + Sync>>> {
    Ok(match kind {
        ProviderKind::None => None,
        ProviderKind::Stub => {
            let fixtures = match &c.provider.fixtures {
                Some(p) => read_json(p)?,
                None => Default::default(),
            };
            Some(Box::new(StubTextProvider::with_fixtures(fixtures)))
        }
        ProviderKind::Live => Some(Box::new(ChatProvider::from_env(&c.provider.model).map_err(Error::Usage)?)),
    })
}

fn dispatch(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(a) => {
            let mut c = load_config(&a.common)?;
            c.synthetic.seed = c.seed;
            let (out, _) = pipeline::synth(&c.synthetic, &c.out)?;
            Ok(to_json(&out))
        }
        Command::GenAux(a) => {
            let mut c = load_config(&a.common)?;
            if let Some(w) = a.workers {
                c.provider.workers = w;
            }
            c.validate()?;
            let p = paths(&c, &a.data);
            require(&p.manifest, "manifest")?;
            let split = load_manifest(&p.manifest)?;
            let t = c.model.aux_count;
            let mut cache = load_aux_cache(&p.aux, t)?;
            let provider = text_provider(&c, a.provider.unwrap_or(c.provider.kind))?;
            let result =
                pipeline::gen_aux(&mut cache, split.seen_pairs(), provider.as_deref(), t, c.provider.max_retries, c.provider.workers);
            // Keep whatever succeeded, even on failure.
            save_aux_cache(&p.aux, &cache)?;
            let report = result?;
            Ok(to_json(&serde_json::json!({ "aux": p.aux, "cached": report.cached, "generated": report.generated })))
        }
        Command::EmbedWords(a) => {
            let c = load_config(&a.common)?;
            c.validate()?;
            let p = paths(&c, &a.data);
            require(&p.manifest, "manifest")?;
            let split = load_manifest(&p.manifest)?;
            let cache = load_aux_cache(&p.aux, c.model.aux_count)?;
            let vocab = pipeline::vocabulary_for(&split, &cache, c.model.aux_count)?;
            let dim = c.model.word_embedding_dim;
            let table = match a.provider.unwrap_or(ProviderKind::Stub) {
                ProviderKind::Stub => pipeline::embed_words(&vocab, &StubEmbeddingProvider { seed: c.seed, dim }, dim)?,
                other => {
                    return Err(Error::Usage(format!(
                        "no {other:?} embedding provider is built in; produce a TRIE1 file externally and pass --embeddings"
                    )))
                }
            };
            write_embeddings(&p.embeddings, vocab.words(), &table.rows)?;
            Ok(to_json(&serde_json::json!({ "embeddings": p.embeddings, "words": vocab.len(), "dim": dim })))
        }
        Command::Train(a) => {
            let mut c = load_config(&a.common)?;
            if let Some(e) = a.epochs {
                c.train.epochs = e;
                c.train.decay_epochs.retain(|&m| m < e);
            }
            ablate(&mut c, &a.ablate)?;
            let p = paths(&c, &a.data);
            for (path, what) in [(&p.manifest, "manifest"), (&p.features, "feature store"), (&p.embeddings, "embedding file")] {
                require(path, what)?;
            }
            let split = load_manifest(&p.manifest)?;
            let store = read_store(&p.features)?;
            pipeline::check_store(&store, &c.model)?;
            let mut state = match &a.resume {
                Some(ck) => {
                    require(ck, "checkpoint")?;
                    checkpoint::load(ck, Some(&c.model), a.force)?
                }
                None => {
                    let cache = load_aux_cache(&p.aux, c.model.aux_count)?;
                    let vocab = pipeline::vocabulary_for(&split, &cache, c.model.aux_count)?;
                    let table = pipeline::load_table(&p.embeddings, &vocab, c.model.word_embedding_dim)?;
                    pipeline::init_state(&c.model, vocab, table, c.seed)?
                }
            };
            write_json(&c.out.join("config.json"), &c)?;
            let logs = pipeline::train_run(&mut state, &split, &store, &c.train, &c.out)?;
            Ok(to_json(&serde_json::json!({
                "checkpoint": c.out.join("checkpoint.tric"),
                "epochs": state.epoch,
                "final_loss": logs.last().map(|l| l.loss),
            })))
        }
        Command::Eval(a) => {
            let mut c = load_config(&a.common)?;
            if let Some(k) = a.topk {
                c.topk = k;
            }
            ablate(&mut c, &a.ablate)?;
            let p = paths(&c, &a.data);
            let ck = a.checkpoint.clone().or_else(|| c.data.checkpoint.clone()).unwrap_or_else(|| c.out.join("checkpoint.tric"));
            for (path, what) in [(&ck, "checkpoint"), (&p.manifest, "manifest"), (&p.features, "feature store")] {
                require(path, what)?;
            }
            let expected = a.common.config.as_ref().map(|_| &c.model);
            let state = checkpoint::load(&ck, expected, a.force)?;
            let split = load_manifest(&p.manifest)?;
            let store = read_store(&p.features)?;
            pipeline::check_store(&store, &state.model.config)?;
            let report = pipeline::evaluate(&state.model, &split, &store, a.phase, c.topk)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            let json = to_json(&report);
            crate::formats::write_file(&c.out.join(format!("metrics_{}.json", a.phase.split())), json.as_bytes())?;
            Ok(json)
        }
        Command::Retrieve(a) => {
            let c = load_config(&a.common)?;
            let mut c = c;
            ablate(&mut c, &a.ablate)?;
            let p = paths(&c, &a.data);
            let ck = a.checkpoint.clone().or_else(|| c.data.checkpoint.clone()).unwrap_or_else(|| c.out.join("checkpoint.tric"));
            for (path, what) in [(&ck, "checkpoint"), (&p.manifest, "manifest"), (&p.features, "feature store")] {
                require(path, what)?;
            }
            let expected = a.common.config.as_ref().map(|_| &c.model);
            let state = checkpoint::load(&ck, expected, a.force)?;
            let split = load_manifest(&p.manifest)?;
            let store = read_store(&p.features)?;
            pipeline::check_store(&store, &state.model.config)?;
            if let Some(id) = &a.query_image {
                Ok(to_json(&pipeline::retrieve_text(&state.model, &split, &store, a.phase, id, a.top_n)?))
            } else {
                let text = a.query_text.as_deref().unwrap_or_default();
                let comp = match text.split_once(' ') {
                    Some((attr, obj)) if !attr.is_empty() && !obj.trim().is_empty() => Composition::new(attr, obj.trim()),
                    _ => return Err(CoreError::Config(format!("--query-text {text:?} is not \"attribute object\"")).into()),
                };
                Ok(to_json(&pipeline::retrieve_image(&state.model, &split, &store, a.phase, &comp, a.top_n)?))
            }
        }
    }
}
