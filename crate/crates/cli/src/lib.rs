//! Command-line wiring for corpus preparation, training, evaluation and
//! retrieval. `run` is the whole program; `main` only maps its result to an
//! exit code.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use xmrr::corpus::{
    build_vocabulary, encode_recipe, parse_recipe_corpus, write_recipe_corpus, TokenizedRecipe,
    Vocabulary,
};
use xmrr::diffcore::Tensor;
use xmrr::encoders::ModelParams;
use xmrr::retrieval::{
    embed_components, embed_images, embed_recipes, evaluate, hallucinate_component, top_k,
    write_embeddings, Direction, EmbeddingRecord, MissingPolicy, MissingSpec,
};
use xmrr::synthetic::{generate_toy_corpus, ToyConfig};
use xmrr::trainer::{load_checkpoint, save_checkpoint, CheckpointState, TrainConfig, Trainer};
use xmrr::{Component, ComponentSet};

/// Environment variable that overrides the seeds of a config file.
pub const SEED_ENV: &str = "XMRR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub min_freq: usize,
    pub max_vocab: usize,
    /// Paths are resolved against the directory holding the config file.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            min_freq: 5,
            max_vocab: 30_000,
            train: None,
            val: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ranking_size: usize,
    pub groups: usize,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ranking_size: 1000,
            groups: 10,
            seed: 0,
            direction: Direction::ImageToRecipe,
        }
    }
}

/// A complete run description: corpus limits, training and evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses a config file and makes its relative corpus paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.corpus.train, &mut cfg.corpus.val]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if any.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = env_seed()? {
            self.train.seed = seed;
            self.eval.seed = seed;
        }
        Ok(())
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            Ok(Some(v.trim().parse().with_context(|| {
                format!("{SEED_ENV}={v:?} is not an integer")
            })?))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "xmrr",
    version,
    about = "Recipe/image joint embeddings: training, evaluation and retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary file from a recipe corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write a checkpoint plus a per-epoch history CSV.
    Train(TrainArgs),
    /// Grouped retrieval evaluation; prints a JSON report.
    Evaluate(EvaluateArgs),
    /// Dump recipe or image embeddings as JSONL.
    Embed(EmbedArgs),
    /// Dump hallucinated embeddings for recipe components that are missing.
    Hallucinate(HallucinateArgs),
    /// Top-K recipes for one image feature vector.
    Rank(RankArgs),
    /// Write the seeded synthetic toy corpus.
    GenerateToy(GenerateToyArgs),
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    /// Run config supplying the corpus path and vocabulary limits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recipe corpus (JSONL); overrides the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Expected image feature length; defaults to the config's model.
    #[arg(long)]
    pub image_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; the history goes to `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Use this vocabulary instead of building one from the training split.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct MissingArgs {
    /// Components withheld from every recipe, e.g. `title,instructions`.
    #[arg(long, value_delimiter = ',')]
    pub missing: Vec<Component>,
    /// How withheld or absent components are filled in.
    #[arg(long, default_value = "empty")]
    pub policy: MissingPolicy,
}

impl MissingArgs {
    fn spec(&self) -> MissingSpec {
        MissingSpec {
            missing: self.missing.iter().copied().collect::<ComponentSet>(),
            policy: self.policy,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Paired recipes (JSONL); unpaired lines are skipped.
    #[arg(long)]
    pub data: PathBuf,
    /// Run config supplying defaults for the evaluation protocol.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ranking group size.
    #[arg(long = "N", alias = "ranking-size")]
    pub n: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub direction: Option<Direction>,
    #[command(flatten)]
    pub missing: MissingArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Recipe,
    Image,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "recipe")]
    pub modality: Modality,
    #[command(flatten)]
    pub missing: MissingArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HallucinateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also treat these components as missing in every recipe.
    #[arg(long, value_delimiter = ',')]
    pub missing: Vec<Component>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON file holding the image feature: a bare array or an object with
    /// an `image_feature` field.
    #[arg(long)]
    pub query_image: PathBuf,
    /// Candidate recipes (JSONL).
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct GenerateToyArgs {
    /// Output directory; receives train.jsonl and val.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Error chain on one line, skipping causes already quoted by their parent.
pub fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.ends_with(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Hallucinate(a) => hallucinate(a),
        Command::Rank(a) => rank(a),
        Command::GenerateToy(a) => generate_toy(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let data = a
        .data
        .or(cfg.corpus.train)
        .context("no corpus given: pass --data or a config with corpus.train")?;
    let records = parse_recipe_corpus(&data, a.image_dim.unwrap_or(cfg.train.model.image_dim))?;
    let vocab = build_vocabulary(
        &records,
        a.min_freq.unwrap_or(cfg.corpus.min_freq),
        a.max_vocab.unwrap_or(cfg.corpus.max_vocab),
    );
    vocab.save(&a.out)?;
    log::info!(
        "{} tokens from {} records -> {}",
        vocab.len(),
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn tokenize(vocab: &Vocabulary, path: &Path, cfg: &TrainConfig) -> Result<Vec<TokenizedRecipe>> {
    let records = parse_recipe_corpus(path, cfg.model.image_dim)?;
    let lim = cfg.model.limits();
    Ok(records
        .iter()
        .map(|r| encode_recipe(vocab, r, lim))
        .collect())
}

/// Path of the history CSV written next to a checkpoint.
pub fn history_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply_env()?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    let train_path = a
        .train
        .or(cfg.corpus.train.clone())
        .context("no training corpus: pass --train or set corpus.train")?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let records = parse_recipe_corpus(&train_path, cfg.train.model.image_dim)?;
            build_vocabulary(&records, cfg.corpus.min_freq, cfg.corpus.max_vocab)
        }
    };
    let train = tokenize(&vocab, &train_path, &cfg.train)?;
    let val = match a.val.or(cfg.corpus.val.clone()) {
        Some(p) => tokenize(&vocab, &p, &cfg.train)?,
        None => Vec::new(),
    };
    log::info!(
        "training on {} records ({} paired), {} validation records, vocabulary {}",
        train.len(),
        train.iter().filter(|r| r.is_paired()).count(),
        val.len(),
        vocab.len()
    );
    let mut trainer = Trainer::new(cfg.train.clone(), vocab.len(), &train, &val)?;
    let mut history = csv::Writer::from_path(history_path(&a.out))
        .with_context(|| format!("creating {}", history_path(&a.out).display()))?;
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        history.serialize(rec)?;
        history.flush()?;
    }
    let state = trainer.checkpoint(vocab);
    save_checkpoint(&state, &a.out)?;
    let done = trainer.epoch();
    match trainer.best_score() {
        Some((e, r1)) => log::info!(
            "{done} epochs; best val R@1 {r1:.4} at epoch {e} -> {}",
            a.out.display()
        ),
        None => log::info!("{done} epochs -> {}", a.out.display()),
    }
    Ok(())
}

fn load(path: &Path) -> Result<CheckpointState> {
    load_checkpoint(path).context("loading checkpoint")
}

fn read_data(state: &CheckpointState, path: &Path) -> Result<Vec<TokenizedRecipe>> {
    tokenize(&state.vocabulary, path, &state.config)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut eval = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalSection::default(),
    };
    if let Some(seed) = env_seed()? {
        eval.seed = seed;
    }
    let state = load(&a.ckpt)?;
    let data = read_data(&state, &a.data)?;
    let paired: Vec<&TokenizedRecipe> = data.iter().filter(|r| r.is_paired()).collect();
    if paired.len() < data.len() {
        log::warn!("skipping {} unpaired records", data.len() - paired.len());
    }
    let report = evaluate(
        &state.params,
        &paired,
        a.n.unwrap_or(eval.ranking_size),
        a.groups.unwrap_or(eval.groups),
        a.seed.unwrap_or(eval.seed),
        a.direction.unwrap_or(eval.direction),
        a.missing.spec(),
    )?;
    let mut out = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn records(ids: impl Iterator<Item = String>, m: &Tensor<f32>) -> Vec<EmbeddingRecord> {
    ids.enumerate()
        .map(|(i, id)| EmbeddingRecord {
            id,
            vector: m.row(i).to_vec(),
        })
        .collect()
}

fn embed(a: EmbedArgs) -> Result<()> {
    let state = load(&a.ckpt)?;
    let data = read_data(&state, &a.data)?;
    let refs: Vec<&TokenizedRecipe> = match a.modality {
        Modality::Recipe => data.iter().collect(),
        Modality::Image => data.iter().filter(|r| r.is_paired()).collect(),
    };
    let m = match a.modality {
        Modality::Recipe => embed_recipes(&state.params, &refs, a.missing.spec())?,
        Modality::Image => embed_images(&state.params, &refs)?,
    };
    let mut out = output(a.out.as_deref())?;
    write_embeddings(&mut out, &records(refs.iter().map(|r| r.id.clone()), &m))?;
    out.flush()?;
    Ok(())
}

/// One line of the hallucination dump.
#[derive(Debug, Serialize, Deserialize)]
pub struct HallucinatedRecord {
    pub id: String,
    pub component: Component,
    pub sources: Vec<Component>,
    pub vector: Vec<f32>,
}

fn hallucinate(a: HallucinateArgs) -> Result<()> {
    let state = load(&a.ckpt)?;
    let params: &ModelParams<f32> = &state.params;
    let data = read_data(&state, &a.data)?;
    let refs: Vec<&TokenizedRecipe> = data.iter().collect();
    let withheld: ComponentSet = a.missing.iter().copied().collect();
    let spec = MissingSpec {
        missing: withheld,
        policy: MissingPolicy::EmptyVector,
    };
    let enabled = params.config().components.set();
    let mut out = output(a.out.as_deref())?;
    let mut count = 0usize;
    for (r, comps) in refs.iter().zip(embed_components(params, &refs, spec)?) {
        for c in enabled.iter().filter(|&c| !comps.present.contains(c)) {
            match hallucinate_component(&comps, params, c) {
                Ok(vector) => {
                    let rec = HallucinatedRecord {
                        id: r.id.clone(),
                        component: c,
                        sources: comps.present.iter().collect(),
                        vector,
                    };
                    serde_json::to_writer(&mut out, &rec)?;
                    writeln!(out)?;
                    count += 1;
                }
                Err(e) => log::warn!("{}: {e}", r.id),
            }
        }
    }
    out.flush()?;
    log::info!("{count} hallucinated components");
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QueryFeature {
    Bare(Vec<f32>),
    Object { image_feature: Vec<f32> },
}

fn rank(a: RankArgs) -> Result<()> {
    let state = load(&a.ckpt)?;
    let file = File::open(&a.query_image)
        .with_context(|| format!("opening {}", a.query_image.display()))?;
    let feature = match serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", a.query_image.display()))?
    {
        QueryFeature::Bare(v) | QueryFeature::Object { image_feature: v } => v,
    };
    let query = state.params.encode_image(&feature)?;
    let data = read_data(&state, &a.candidates)?;
    let refs: Vec<&TokenizedRecipe> = data.iter().collect();
    let cands = embed_recipes(&state.params, &refs, MissingSpec::default())?;
    let mut out = output(None)?;
    for (j, score) in top_k(&query, &cands, a.k) {
        writeln!(out, "{}\t{score:.6}", refs[j].id)?;
    }
    out.flush()?;
    Ok(())
}

fn generate_toy(a: GenerateToyArgs) -> Result<()> {
    let mut cfg = ToyConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let toy = generate_toy_corpus(&cfg);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_recipe_corpus(a.out.join("train.jsonl"), &toy.train)?;
    write_recipe_corpus(a.out.join("val.jsonl"), &toy.val)?;
    log::info!(
        "{} train and {} val records -> {}",
        toy.train.len(),
        toy.val.len(),
        a.out.display()
    );
    Ok(())
}
