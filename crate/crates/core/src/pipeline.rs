//! File-based pipeline stages.
//!
//! Each stage reads the artifacts of earlier stages from
//! `<out_dir>/<task_id>/`, validates them, and writes its own outputs there
//! under fixed names (see [`artifacts`]). Configuration comes from a TOML
//! file whose values can be overridden by `SCRIPTWEAVE_*` environment
//! variables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    generate_negatives, path_level_losses, sequence_representation, ContrastiveBatch, LossConfig,
    NegativeGenConfig, NegativeMethod,
};
use crate::corpus::{
    build_step_library, corpus_statistics, linear_step_orders, CandidateDoc, CorpusStats,
    IdentitySimplifier, RawSequenceRecord, SequenceKind, StepId, StepLibrary, TaskSpec,
};
use crate::decoder::{
    constrained_beam_search, constrained_beam_search_from, DecodeConfig, DecodedPath, PrefixTrie,
};
use crate::error::{Error, Result};
use crate::evalharness::{
    baseline_predict, build_eval_splits, completion_metrics, model_predict, next_step_metrics,
    BaselineKind, MetricsReport, MetricsRow, Predictions, DEFAULT_TRAIN_FRACTION,
};
use crate::graphgen::{
    classify_relations, export_graph, induce_graph, GraphFormat, GraphScript,
    DEFAULT_PRUNE_THRESHOLD,
};
use crate::grounding::{
    accept_asr_video, ground_record, match_task_documents, prune_unused_steps, GroundedSequence,
    GroundingConfig, HttpEmbeddingProvider, SimilarityProvider, TfIdfProvider,
};
use crate::pathmodel::{train_path_model, PathModel, PathModelConfig, StepPredictor};

/// Prefix of environment variables that override config values.
pub const ENV_PREFIX: &str = "SCRIPTWEAVE_";

/// Fixed artifact file names inside a task's output directory.
pub mod artifacts {
    pub const LIBRARY: &str = "library.json";
    pub const LINEAR: &str = "linear.json";
    pub const GROUNDED_LIBRARY: &str = "library.grounded.json";
    pub const GROUNDED_LINEAR: &str = "linear.grounded.json";
    pub const GROUNDED: &str = "grounded.jsonl";
    pub const GROUNDING_SUMMARY: &str = "grounding.json";
    pub const STATS: &str = "stats.json";
    pub const MODEL: &str = "model.json";
    pub const LOSSES: &str = "losses.jsonl";
    pub const PATHS: &str = "paths.jsonl";
    pub const GRAPH_JSON: &str = "graph.json";
    pub const GRAPH_DOT: &str = "graph.dot";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const METRICS_TXT: &str = "metrics.txt";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// JSON-Lines of task specs.
    pub tasks: PathBuf,
    /// JSON-Lines of candidate documents `{title, steps}`.
    pub docs: PathBuf,
    /// JSON-Lines of raw sequence records.
    pub corpus: PathBuf,
}

fn default_prune_threshold() -> f64 {
    DEFAULT_PRUNE_THRESHOLD
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

fn default_frequency_threshold() -> u32 {
    10
}

fn default_embedding_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every random choice in the pipeline. Required.
    pub rng_seed: u64,
    pub data: DataPaths,
    #[serde(default = "default_prune_threshold")]
    pub prune_threshold: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_frequency_threshold")]
    pub frequency_threshold: u32,
    /// Curriculum epoch used when drawing negatives for the loss report.
    #[serde(default)]
    pub curriculum_epoch: u32,
    /// Base URL of an embedding service; TF-IDF is used when absent.
    #[serde(default)]
    pub embedding_url: Option<String>,
    #[serde(default = "default_embedding_timeout")]
    pub embedding_timeout_secs: u64,
    #[serde(default)]
    pub grounding: GroundingConfig,
    #[serde(default)]
    pub pathmodel: PathModelConfig,
    #[serde(default)]
    pub negatives: NegativeGenConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<String> = key.split("__").map(str::to_ascii_lowercase).collect();
    if parts.iter().any(String::is_empty) {
        return Err(Error::BadConfig(format!(
            "malformed override key {ENV_PREFIX}{key}"
        )));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut current = table;
    for section in sections {
        let entry = current
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            Error::BadConfig(format!(
                "override {ENV_PREFIX}{key}: {section} is not a section"
            ))
        })?;
    }
    current.insert(last.clone(), override_value(raw));
    Ok(())
}

impl PipelineConfig {
    /// Parses config text, applying `SCRIPTWEAVE_*` overrides from `env`.
    ///
    /// `SCRIPTWEAVE_RNG_SEED=7` sets a top-level key and
    /// `SCRIPTWEAVE_DECODE__BEAM_WIDTH=10` a key inside `[decode]`. Relative
    /// data paths are resolved against `base_dir`. The negatives seed
    /// follows `rng_seed` unless set explicitly.
    pub fn from_toml_str<I>(text: &str, base_dir: &Path, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        overrides.sort();
        for (key, value) in &overrides {
            apply_override(&mut table, key, value)?;
        }
        let explicit_negative_seed = table
            .get("negatives")
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key("rng_seed"));
        let mut cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::BadConfig(e.to_string()))?;
        if !explicit_negative_seed {
            cfg.negatives.rng_seed = cfg.rng_seed;
        }
        for path in [
            &mut cfg.data.tasks,
            &mut cfg.data.docs,
            &mut cfg.data.corpus,
        ] {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file with overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base, std::env::vars())
    }

    /// Replaces the pipeline seed, and with it the negatives seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self.negatives.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grounding.validate()?;
        self.pathmodel.validate()?;
        self.negatives.validate()?;
        self.losses.validate()?;
        self.decode.validate()?;
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::BadConfig(format!(
                "prune_threshold must lie in [0, 1), got {}",
                self.prune_threshold
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::BadConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        for path in [&self.data.tasks, &self.data.docs, &self.data.corpus] {
            if !path.is_file() {
                return Err(Error::BadConfig(format!(
                    "data file {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Library,
    Ground,
    Stats,
    Train,
    Losses,
    Decode,
    Graph,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Library,
        Stage::Ground,
        Stage::Stats,
        Stage::Train,
        Stage::Losses,
        Stage::Decode,
        Stage::Graph,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Library => "library",
            Stage::Ground => "ground",
            Stage::Stats => "stats",
            Stage::Train => "train",
            Stage::Losses => "losses",
            Stage::Decode => "decode",
            Stage::Graph => "graph",
            Stage::Eval => "eval",
        }
    }

    /// Artifacts the stage writes.
    pub fn outputs(self) -> &'static [&'static str] {
        use artifacts::*;
        match self {
            Stage::Library => &[LIBRARY, LINEAR],
            Stage::Ground => &[
                GROUNDED_LIBRARY,
                GROUNDED_LINEAR,
                GROUNDED,
                GROUNDING_SUMMARY,
            ],
            Stage::Stats => &[STATS],
            Stage::Train => &[MODEL],
            Stage::Losses => &[LOSSES],
            Stage::Decode => &[PATHS],
            Stage::Graph => &[GRAPH_JSON, GRAPH_DOT],
            Stage::Eval => &[METRICS_JSON, METRICS_TXT],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage {s:?}")))
    }
}

/// Document step orders mapped onto library ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOrders {
    pub task_id: String,
    pub orders: Vec<Vec<StepId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub task_id: String,
    pub records: usize,
    pub grounded: usize,
    /// Narration videos whose title was too far from the task name.
    pub rejected_titles: usize,
    /// Records in which nothing grounded.
    pub empty: usize,
    /// Items or pieces that matched no step, summed over grounded records.
    pub dropped_items: usize,
    pub library_steps: usize,
    pub library_steps_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub method: NegativeMethod,
    pub steps: Vec<StepId>,
}

/// Loss report for one observed sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub video_id: String,
    pub epoch: u32,
    /// Best model decode sharing the observed first step.
    pub generated: Vec<StepId>,
    pub negatives: Vec<NegativeRecord>,
    pub path_contrastive: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub task_id: String,
    pub steps: Vec<StepId>,
    pub logprob: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        context: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_artifact(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_text(path)
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| Error::Json {
                context: format!("{} line {}", path.display(), i + 1),
                source,
            })
        })
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(path, &read_text(path)?)
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_artifact(path)?).map_err(json_err(path))
}

fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(path, &read_artifact(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(json_err(path))?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn check_orders(orders: &LinearOrders, library: &StepLibrary) -> Result<()> {
    for id in orders.orders.iter().flatten() {
        if !library.contains(*id) {
            return Err(Error::UnknownStep(*id));
        }
    }
    Ok(())
}

/// Runs stages for tasks, reading and writing under one output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    out_dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out_dir: impl Into<PathBuf>) -> Self {
        Pipeline {
            config,
            out_dir: out_dir.into(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn task_dir(&self, task_id: &str) -> PathBuf {
        self.out_dir.join(task_id)
    }

    pub fn artifact(&self, task_id: &str, name: &str) -> PathBuf {
        self.task_dir(task_id).join(name)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let tasks: Vec<TaskSpec> = read_jsonl(&self.config.data.tasks)?;
        let mut ids = BTreeSet::new();
        for task in &tasks {
            task.validate()?;
            if !ids.insert(task.task_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate task id {}",
                    task.task_id
                )));
            }
        }
        Ok(tasks)
    }

    pub fn task(&self, task_id: &str) -> Result<TaskSpec> {
        self.tasks()?
            .into_iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Invalid(format!("unknown task {task_id:?}")))
    }

    fn provider(&self, fit_texts: &[String]) -> Result<Box<dyn SimilarityProvider>> {
        Ok(match &self.config.embedding_url {
            Some(url) => Box::new(HttpEmbeddingProvider::new(
                url,
                Duration::from_secs(self.config.embedding_timeout_secs),
            )?),
            None => Box::new(TfIdfProvider::fit(fit_texts)),
        })
    }

    fn prepare_dir(&self, task_id: &str) -> Result<PathBuf> {
        let dir = self.task_dir(task_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    pub fn run(&self, stage: Stage, task_id: &str) -> Result<()> {
        match stage {
            Stage::Library => self.library(task_id).map(drop),
            Stage::Ground => self.ground(task_id).map(drop),
            Stage::Stats => self.stats(task_id).map(drop),
            Stage::Train => self.train(task_id).map(drop),
            Stage::Losses => self.losses(task_id).map(drop),
            Stage::Decode => self.decode(task_id).map(drop),
            Stage::Graph => self.graph(task_id).map(drop),
            Stage::Eval => self.eval(task_id).map(drop),
        }
    }

    /// Runs every stage in order.
    pub fn run_all(&self, task_id: &str) -> Result<()> {
        Stage::ALL
            .into_iter()
            .try_for_each(|s| self.run(s, task_id))
    }

    /// Matches documents to the task, builds the step library and maps each
    /// matched document's step order onto it.
    pub fn library(&self, task_id: &str) -> Result<StepLibrary> {
        let task = self.task(task_id)?;
        let docs: Vec<CandidateDoc> = read_jsonl(&self.config.data.docs)?;
        let mut fit: Vec<String> = docs.iter().map(|d| d.title.clone()).collect();
        fit.push(task.task_name.clone());
        let provider = self.provider(&fit)?;
        let cfg = &self.config.grounding;
        let ranked = match_task_documents(&task, &docs, provider.as_ref(), cfg)?;
        let library = build_step_library(&task, &ranked, cfg.top_m_docs, &IdentitySimplifier)?;
        library.validate()?;
        let matched: Vec<CandidateDoc> = ranked.into_iter().map(|r| r.doc).collect();
        let linear = LinearOrders {
            task_id: task.task_id.clone(),
            orders: linear_step_orders(&library, &matched, &IdentitySimplifier),
        };
        let dir = self.prepare_dir(task_id)?;
        write_json(&dir.join(artifacts::LIBRARY), &library)?;
        write_json(&dir.join(artifacts::LINEAR), &linear)?;
        Ok(library)
    }

    fn load_library(&self, task_id: &str, name: &str) -> Result<StepLibrary> {
        let library: StepLibrary = load_json(&self.artifact(task_id, name))?;
        library.validate()?;
        if library.task_id != task_id {
            return Err(Error::Invalid(format!(
                "library belongs to task {}, expected {task_id}",
                library.task_id
            )));
        }
        Ok(library)
    }

    fn load_orders(
        &self,
        task_id: &str,
        name: &str,
        library: &StepLibrary,
    ) -> Result<LinearOrders> {
        let orders: LinearOrders = load_json(&self.artifact(task_id, name))?;
        check_orders(&orders, library)?;
        Ok(orders)
    }

    /// Grounds every corpus record of the task onto the library.
    pub fn ground(&self, task_id: &str) -> Result<GroundingSummary> {
        let task = self.task(task_id)?;
        let library = self.load_library(task_id, artifacts::LIBRARY)?;
        let linear = self.load_orders(task_id, artifacts::LINEAR, &library)?;
        let records: Vec<RawSequenceRecord> = read_jsonl(&self.config.data.corpus)?;
        let records: Vec<RawSequenceRecord> = records
            .into_iter()
            .filter(|r| r.task_id == task_id)
            .collect();
        for r in &records {
            r.validate()?;
        }
        let mut fit: Vec<String> = library
            .steps
            .iter()
            .map(|s| s.normalized_text.clone())
            .collect();
        fit.push(task.task_name.clone());
        for r in &records {
            fit.extend(r.title.iter().cloned());
            fit.extend(r.items.iter().map(|i| i.text.clone()));
        }
        let provider = self.provider(&fit)?;
        let cfg = &self.config.grounding;

        let mut summary = GroundingSummary {
            task_id: task_id.to_string(),
            records: records.len(),
            grounded: 0,
            rejected_titles: 0,
            empty: 0,
            dropped_items: 0,
            library_steps: library.len(),
            library_steps_used: 0,
        };
        let mut grounded = Vec::new();
        for record in &records {
            if record.kind == SequenceKind::Asr {
                if let Some(title) = &record.title {
                    if !accept_asr_video(title, &task, provider.as_ref(), cfg)? {
                        summary.rejected_titles += 1;
                        continue;
                    }
                }
            }
            match ground_record(record, &library, provider.as_ref(), cfg) {
                Ok(seq) => grounded.push(seq),
                Err(Error::EmptySequence) => summary.empty += 1,
                Err(e) => return Err(e),
            }
        }
        if grounded.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (library, grounded, linear) = if cfg.prune_unused_steps {
            let (pruned, seqs, remap) = prune_unused_steps(&library, &grounded);
            let orders = linear
                .orders
                .iter()
                .map(|o| o.iter().filter_map(|id| remap[id.index()]).collect())
                .collect();
            (
                pruned,
                seqs,
                LinearOrders {
                    task_id: linear.task_id,
                    orders,
                },
            )
        } else {
            (library, grounded, linear)
        };
        summary.grounded = grounded.len();
        summary.dropped_items = grounded.iter().map(|s| s.dropped).sum();
        summary.library_steps_used = grounded
            .iter()
            .flat_map(|s| s.step_ids.iter())
            .collect::<BTreeSet<_>>()
            .len();

        let dir = self.prepare_dir(task_id)?;
        write_json(&dir.join(artifacts::GROUNDED_LIBRARY), &library)?;
        write_json(&dir.join(artifacts::GROUNDED_LINEAR), &linear)?;
        write_jsonl(&dir.join(artifacts::GROUNDED), &grounded)?;
        write_json(&dir.join(artifacts::GROUNDING_SUMMARY), &summary)?;
        Ok(summary)
    }

    fn load_grounded(&self, task_id: &str) -> Result<(StepLibrary, Vec<GroundedSequence>)> {
        let library = self.load_library(task_id, artifacts::GROUNDED_LIBRARY)?;
        let seqs: Vec<GroundedSequence> = load_jsonl(&self.artifact(task_id, artifacts::GROUNDED))?;
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for s in &seqs {
            s.validate(&library)?;
        }
        Ok((library, seqs))
    }

    fn load_model(&self, task_id: &str, library: &StepLibrary) -> Result<PathModel> {
        let model =
            PathModel::from_json(&read_artifact(&self.artifact(task_id, artifacts::MODEL))?)?;
        if model.num_steps() != library.len() {
            return Err(Error::LengthMismatch {
                expected: library.len(),
                actual: model.num_steps(),
            });
        }
        Ok(model)
    }

    pub fn stats(&self, task_id: &str) -> Result<CorpusStats> {
        let (_, seqs) = self.load_grounded(task_id)?;
        let stats = corpus_statistics(&seqs, self.config.frequency_threshold)?;
        write_json(&self.artifact(task_id, artifacts::STATS), &stats)?;
        Ok(stats)
    }

    pub fn train(&self, task_id: &str) -> Result<PathModel> {
        let (library, seqs) = self.load_grounded(task_id)?;
        let model = train_path_model(&seqs, &library, &self.config.pathmodel)?;
        let mut text = model.to_json();
        text.push('\n');
        write_text(&self.artifact(task_id, artifacts::MODEL), &text)?;
        Ok(model)
    }

    /// Contrastive, cross-entropy and total loss for every observed sequence,
    /// with negatives drawn at the configured curriculum epoch.
    pub fn losses(&self, task_id: &str) -> Result<Vec<LossRecord>> {
        let (library, seqs) = self.load_grounded(task_id)?;
        let model = self.load_model(task_id, &library)?;
        let trie = PrefixTrie::build(&library)?;
        let texts: Vec<String> = library
            .steps
            .iter()
            .map(|s| s.normalized_text.clone())
            .collect();
        let provider = self.provider(&texts)?;
        let valid: HashSet<Vec<StepId>> = seqs.iter().map(|s| s.step_ids.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.negatives.rng_seed);
        let epoch = self.config.curriculum_epoch;
        let mut generated_for: BTreeMap<StepId, Vec<StepId>> = BTreeMap::new();

        let mut rows = Vec::with_capacity(seqs.len());
        for seq in &seqs {
            let positive = &seq.step_ids;
            let generated = match generated_for.get(&positive[0]) {
                Some(g) => g.clone(),
                None => {
                    let best = constrained_beam_search_from(
                        &model,
                        &trie,
                        &positive[..1],
                        &self.config.decode,
                    )?;
                    let g = best[0].steps.clone();
                    generated_for.insert(positive[0], g.clone());
                    g
                }
            };
            let negatives = generate_negatives(
                positive,
                epoch,
                &library,
                &valid,
                &self.config.negatives,
                &mut rng,
            )?;
            let represent =
                |ids: &[StepId]| sequence_representation(ids, &library, provider.as_ref());
            let batch = ContrastiveBatch {
                z_g: represent(&generated)?,
                z_p: represent(positive)?,
                z_n: negatives
                    .iter()
                    .map(|(_, n)| represent(n))
                    .collect::<Result<_>>()?,
            };
            let losses =
                path_level_losses(&batch, model.sequence_nll(positive)?, &self.config.losses)?;
            rows.push(LossRecord {
                video_id: seq.video_id.clone(),
                epoch,
                generated,
                negatives: negatives
                    .into_iter()
                    .map(|(method, steps)| NegativeRecord { method, steps })
                    .collect(),
                path_contrastive: losses.path_contrastive,
                cross_entropy: losses.cross_entropy,
                total: losses.total,
            });
        }
        write_jsonl(&self.artifact(task_id, artifacts::LOSSES), &rows)?;
        Ok(rows)
    }

    pub fn decode(&self, task_id: &str) -> Result<Vec<DecodedPath>> {
        let (library, _) = self.load_grounded(task_id)?;
        let model = self.load_model(task_id, &library)?;
        let trie = PrefixTrie::build(&library)?;
        let paths = constrained_beam_search(&model, &trie, &self.config.decode)?;
        let rows: Vec<PathRecord> = paths
            .iter()
            .map(|p| PathRecord {
                task_id: task_id.to_string(),
                steps: p.steps.clone(),
                logprob: p.logprob,
            })
            .collect();
        write_jsonl(&self.artifact(task_id, artifacts::PATHS), &rows)?;
        Ok(paths)
    }

    pub fn graph(&self, task_id: &str) -> Result<GraphScript> {
        let library = self.load_library(task_id, artifacts::GROUNDED_LIBRARY)?;
        let rows: Vec<PathRecord> = load_jsonl(&self.artifact(task_id, artifacts::PATHS))?;
        for row in &rows {
            if row.task_id != task_id {
                return Err(Error::Invalid(format!(
                    "decoded path for task {}",
                    row.task_id
                )));
            }
            if let Some(bad) = row.steps.iter().find(|id| !library.contains(**id)) {
                return Err(Error::UnknownStep(*bad));
            }
        }
        let paths: Vec<&[StepId]> = rows.iter().map(|r| r.steps.as_slice()).collect();
        let graph = classify_relations(induce_graph(task_id, &paths, self.config.prune_threshold)?)
            .with_labels(&library);
        let dir = self.task_dir(task_id);
        write_text(&dir.join(artifacts::GRAPH_JSON), &(graph.to_json() + "\n"))?;
        write_text(
            &dir.join(artifacts::GRAPH_DOT),
            &export_graph(&graph, GraphFormat::Dot),
        )?;
        Ok(graph)
    }

    /// Splits the grounded sequences, trains on the training part and scores
    /// the model against the random and document-order baselines.
    pub fn eval(&self, task_id: &str) -> Result<MetricsReport> {
        let (library, seqs) = self.load_grounded(task_id)?;
        let linear = self.load_orders(task_id, artifacts::GROUNDED_LINEAR, &library)?;
        let seed = self.config.rng_seed;
        let split = build_eval_splits(&seqs, self.config.train_fraction, seed)?;
        let model = train_path_model(&split.train, &library, &self.config.pathmodel)?;
        let trie = PrefixTrie::build(&library)?;

        let score = |system: &str, p: Predictions| -> Result<MetricsRow> {
            Ok(MetricsRow {
                system: system.to_string(),
                next_step: next_step_metrics(&p.next, &split)?,
                completion: completion_metrics(&p.completions, &split)?,
            })
        };
        let rows = vec![
            score(
                "random",
                baseline_predict(BaselineKind::Random, &split, library.len(), None, seed)?,
            )?,
            score(
                "linear",
                baseline_predict(
                    BaselineKind::Linear,
                    &split,
                    library.len(),
                    Some(&linear.orders),
                    seed,
                )?,
            )?,
            score(
                "model",
                model_predict(&model, &trie, &split, &self.config.decode)?,
            )?,
        ];
        let report = MetricsReport {
            task_id: task_id.to_string(),
            train_sequences: split.train.len(),
            test_examples: split.test_examples.len(),
            rows,
        };
        let dir = self.task_dir(task_id);
        write_json(&dir.join(artifacts::METRICS_JSON), &report)?;
        write_text(&dir.join(artifacts::METRICS_TXT), &report.to_table())?;
        Ok(report)
    }
}
