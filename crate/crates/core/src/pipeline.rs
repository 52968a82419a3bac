//! End-to-end commands over a run directory.
//!
//! Layout under the run root:
//!
//! ```text
//! world/   stage{1,2}_{train,validation,test}.jsonl, stars.json, manifest.tsv
//! lm/      tokenizer.txt, lm.tlm1, pretrain_report.json
//! cf/      cf_n{n}_stage{s}.cfp1 + .json sidecar
//! eval/    {label}_{dataset}.json, {label}_{dataset}.audit.jsonl
//! tables/  concepts_n{n}.cflt + .json sidecar
//! report/  comparison.json, comparison.txt
//! ```
//!
//! Every command also writes the effective `config.toml` and a
//! `provenance_{command}.json` into the directory it produces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_bytes, sha256_hex};
use crate::conceptformer::{self, CfShape, ConceptFormerParams};
use crate::corpus::{
    self, generate_toy_world, read_bites, read_manifest, render_stage1, render_stage2, split_subjects,
    Bite, Split, WorldConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, compare_report, Comparison, EvalInputs, EvalOptions, EvalReport, VectorSource};
use crate::graph_store::{self, StarGraph, StarGraphs};
use crate::lookup_store::{self, TableSidecar};
use crate::prompting::{textify, LabelEmbeddings, PromptMode};
use crate::toy_lm::{self, io as lm_io, LmConfig, LmParams, PretrainConfig, PretrainReport, Tokenizer};
use crate::training::{self, StageData, StageReport, TrainConfig, TrainContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    #[serde(flatten)]
    pub world: WorldConfig,
    /// Train, validation and test shares of the subjects.
    pub split: [f64; 3],
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub max_token_chars: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            max_token_chars: toy_lm::tokenizer::DEFAULT_MAX_TOKEN_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    #[serde(flatten)]
    pub train: PretrainConfig,
    /// Share of the train-split subjects whose sentences the LM reads.
    pub subject_fraction: f64,
    /// Rendering stages whose sentences enter the corpus.
    pub stages: Vec<u8>,
    /// Sentences per subject rewritten with the subject mention expanded
    /// into its textified neighborhood.
    pub textified_per_subject: usize,
    /// Sentences per subject rewritten with the subject mention followed by
    /// a bare list of its objects.
    pub listed_per_subject: usize,
    /// Further sentences of the same subject appended to each expanded
    /// one, drawn from facts whose objects it lists.
    pub followups: usize,
    /// Subjects of a separately generated world that appear only in
    /// expanded sentences, so their facts can be read from context alone.
    pub pseudo_subjects: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            train: PretrainConfig::default(),
            subject_fraction: 1.0,
            stages: vec![1, 2],
            textified_per_subject: 2,
            listed_per_subject: 2,
            followups: 8,
            pseudo_subjects: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfSection {
    pub n_vectors: usize,
    pub hidden: usize,
    pub slope: f64,
    pub skip_stage1: bool,
}

impl Default for CfSection {
    fn default() -> Self {
        Self {
            n_vectors: 5,
            hidden: 128,
            slope: 0.01,
            skip_stage1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    #[serde(flatten)]
    pub options: EvalOptions,
    /// Rendering stage of the evaluated bites.
    pub stage: u8,
    pub split: Split,
    /// Checkpoint stage used in cf mode.
    pub checkpoint_stage: u8,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            options: EvalOptions::default(),
            stage: 2,
            split: Split::Test,
            checkpoint_stage: 2,
        }
    }
}

fn default_stage_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: crate::optim::AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        max_epochs,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub tokenizer: TokenizerSection,
    pub lm: LmConfig,
    pub pretrain: PretrainSection,
    pub cf: CfSection,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20240611,
            world: WorldSection::default(),
            tokenizer: TokenizerSection::default(),
            lm: LmConfig::default(),
            pretrain: PretrainSection::default(),
            cf: CfSection::default(),
            stage1: default_stage_config(16),
            stage2: default_stage_config(16),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.world.validate()?;
        self.lm.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.tokenizer.vocab_size > self.lm.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer vocab_size {} exceeds LM vocab_size {}",
                self.tokenizer.vocab_size, self.lm.vocab_size
            )));
        }
        let f = self.pretrain.subject_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("subject_fraction {f} outside (0, 1]")));
        }
        if self.pretrain.stages.iter().any(|s| !(1..=2).contains(s)) || self.pretrain.stages.is_empty() {
            return Err(Error::Config("pretrain.stages must list stages 1 and/or 2".into()));
        }
        if !(1..=2).contains(&self.eval.stage) || !(1..=2).contains(&self.eval.checkpoint_stage) {
            return Err(Error::Config("eval stages must be 1 or 2".into()));
        }
        if self.cf.n_vectors == 0 || self.cf.hidden == 0 {
            return Err(Error::Config("cf.n_vectors and cf.hidden must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sub-seed for one named random stream of a run.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut bytes = master.to_le_bytes().to_vec();
    bytes.extend_from_slice(stream.as_bytes());
    let h = sha256_bytes(&bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world")
    }
    pub fn lm(&self) -> PathBuf {
        self.root.join("lm")
    }
    pub fn cf(&self) -> PathBuf {
        self.root.join("cf")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn bites(&self, stage: u8, split: Split) -> PathBuf {
        self.world().join(format!("stage{stage}_{}.jsonl", split.name()))
    }
    pub fn stars(&self) -> PathBuf {
        self.world().join("stars.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.world().join("manifest.tsv")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.lm().join("tokenizer.txt")
    }
    pub fn lm_params(&self) -> PathBuf {
        self.lm().join("lm.tlm1")
    }
    pub fn table(&self, n: usize) -> PathBuf {
        self.tables().join(format!("concepts_n{n}.cflt"))
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Echoes the config and records hashes of the named inputs and outputs.
fn finish_command(
    dir: &Path,
    command: &str,
    args: &[String],
    cfg: &RunConfig,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let hash_all = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((name, file_sha256(p)?))
            })
            .collect()
    };
    let record = ProvenanceRecord {
        command: command.to_string(),
        args: args.to_vec(),
        seed: cfg.seed,
        config_sha256: cfg.sha256(),
        inputs: hash_all(inputs)?,
        outputs: hash_all(outputs)?,
    };
    write_json(&dir.join(format!("provenance_{command}.json")), &record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub subjects: usize,
    pub values: usize,
    pub facts: usize,
    pub split_subjects: BTreeMap<String, usize>,
    pub bites: BTreeMap<String, usize>,
}

pub fn gen_world(cfg: &RunConfig, dirs: &RunDirs, args: &[String]) -> Result<WorldSummary> {
    cfg.validate()?;
    let dir = dirs.world();
    mkdir(&dir)?;
    let world_seed = derive_seed(cfg.seed, "world");
    log::info!("gen-world: world seed {world_seed}");
    let world = generate_toy_world(&cfg.world.world, world_seed)?;
    let [rt, rv, rs] = cfg.world.split;
    let manifest = split_subjects(
        world.subjects.iter().map(|e| e.qid.as_str()),
        (rt, rv, rs),
        derive_seed(cfg.seed, "split"),
    )?;
    let stage1 = render_stage1(&world);
    let stage2 = render_stage2(&world, derive_seed(cfg.seed, "stage2"))?;
    let mut outputs = Vec::new();
    let mut bites = BTreeMap::new();
    for (stage, all) in [(1u8, &stage1), (2u8, &stage2)] {
        let split = corpus::apply_manifest(all, &manifest);
        for (which, list) in [
            (Split::Train, &split.train),
            (Split::Validation, &split.validation),
            (Split::Test, &split.test),
        ] {
            let path = dirs.bites(stage, which);
            corpus::write_bites(&path, list)?;
            bites.insert(format!("stage{stage}_{}", which.name()), list.len());
            outputs.push(path);
        }
    }
    graph_store::save_star_graphs(&corpus::export_star_graphs(&world), dirs.stars())?;
    corpus::write_manifest(dirs.manifest(), &manifest)?;
    outputs.push(dirs.stars());
    outputs.push(dirs.manifest());
    let mut split_subjects = BTreeMap::new();
    for s in manifest.values() {
        *split_subjects.entry(s.name().to_string()).or_insert(0) += 1;
    }
    let summary = WorldSummary {
        subjects: world.subjects.len(),
        values: world.values.len(),
        facts: world.facts.len(),
        split_subjects,
        bites,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish_command(&dir, "gen-world", args, cfg, &[], &outs)?;
    Ok(summary)
}

/// Sentences the LM is pretrained on (train-split subjects only) and the
/// tokenizer fitted to the plain ones. Textified variants are sized to the
/// context with that tokenizer.
pub fn pretraining_corpus(cfg: &RunConfig, dirs: &RunDirs, stars: &StarGraphs) -> Result<(Vec<String>, Tokenizer)> {
    let manifest = read_manifest(dirs.manifest())?;
    let mut subjects: Vec<&str> = manifest
        .iter()
        .filter(|(_, s)| **s == Split::Train)
        .map(|(q, _)| q.as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "lm-subjects"));
    subjects.shuffle(&mut rng);
    let keep = ((cfg.pretrain.subject_fraction * subjects.len() as f64).round() as usize).max(1);
    let chosen: std::collections::BTreeSet<&str> = subjects[..keep.min(subjects.len())].iter().copied().collect();

    let mut texts = Vec::new();
    let mut by_subject: BTreeMap<&str, Vec<Bite>> = BTreeMap::new();
    let mut stage_bites = Vec::new();
    for &stage in &cfg.pretrain.stages {
        stage_bites.push(read_bites(dirs.bites(stage, Split::Train))?);
    }
    for list in &stage_bites {
        for b in list {
            if chosen.contains(b.subject.qid.as_str()) {
                texts.push(b.text.clone());
                by_subject.entry(chosen.get(b.subject.qid.as_str()).expect("chosen")).or_default().push(b.clone());
            }
        }
    }
    let tokenizer = Tokenizer::build(&texts, cfg.tokenizer.vocab_size, cfg.tokenizer.max_token_chars)?;
    texts.extend(expanded_corpus(cfg, "lm", &by_subject, stars, &tokenizer));
    if cfg.pretrain.pseudo_subjects > 0 {
        let world_cfg = WorldConfig {
            subjects: cfg.pretrain.pseudo_subjects,
            ..cfg.world.world.clone()
        };
        let world = generate_toy_world(&world_cfg, derive_seed(cfg.seed, "lm-pseudo-world"))?;
        let mut bites = render_stage1(&world);
        bites.extend(render_stage2(&world, derive_seed(cfg.seed, "lm-pseudo-stage2"))?);
        let pseudo_stars = corpus::export_star_graphs(&world);
        let mut pseudo: BTreeMap<&str, Vec<Bite>> = BTreeMap::new();
        for b in &bites {
            pseudo.entry(b.subject.qid.as_str()).or_default().push(b.clone());
        }
        texts.extend(expanded_corpus(cfg, "lm-pseudo", &pseudo, &pseudo_stars, &tokenizer));
    }
    Ok((fit_texts(texts, &tokenizer, cfg.lm.context), tokenizer))
}

fn expanded_corpus(
    cfg: &RunConfig,
    stream: &str,
    by_subject: &BTreeMap<&str, Vec<Bite>>,
    stars: &StarGraphs,
    tokenizer: &Tokenizer,
) -> Vec<String> {
    let styles: [(&str, usize, fn(&StarGraph, usize) -> String); 2] = [
        ("textified", cfg.pretrain.textified_per_subject, textify),
        ("listed", cfg.pretrain.listed_per_subject, list_objects),
    ];
    let mut out = Vec::new();
    for (style, per_subject, render) in styles {
        if per_subject > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{stream}-{style}")));
            out.extend(expanded_texts(
                by_subject,
                stars,
                tokenizer,
                cfg.lm.context - 1,
                per_subject,
                cfg.pretrain.followups,
                &mut rng,
                render,
            ));
        }
    }
    out
}

/// The subject label followed by the labels of its top neighbors.
fn list_objects(star: &StarGraph, count: usize) -> String {
    let mut s = star.center.label.clone();
    for nb in star.top_neighbors(count) {
        s.push_str(", ");
        s.push_str(&nb.entity.label);
    }
    s
}

/// Rewrites sampled sentences of each subject with the subject mention
/// expanded by `render`, then appends other sentences of the subject whose
/// facts the expansion lists. Every text stays within `budget` tokens.
#[allow(clippy::too_many_arguments)]
fn expanded_texts(
    by_subject: &BTreeMap<&str, Vec<Bite>>,
    stars: &StarGraphs,
    tokenizer: &Tokenizer,
    budget: usize,
    per_subject: usize,
    followups: usize,
    rng: &mut ChaCha8Rng,
    render: fn(&StarGraph, usize) -> String,
) -> Vec<String> {
    // the expansion takes at most half the budget when followups need room
    let cap = if followups > 0 { budget / 2 } else { budget };
    let len = |s: &str| tokenizer.encode(s).len();
    let mut out = Vec::new();
    for (qid, list) in by_subject {
        let Some(star) = stars.get(*qid) else { continue };
        for b in list.choose_multiple(rng, per_subject) {
            let before = corpus::char_slice(&b.text, 0, b.subject.start);
            let after = corpus::char_slice(&b.text, b.subject.end, b.text.chars().count());
            let mut count = star.degree();
            let mut text = loop {
                let t = format!("{before}{}{after}", render(star, count));
                if len(&t) <= cap || count <= 1 {
                    break t;
                }
                count -= 1;
            };
            if followups > 0 {
                let listed: std::collections::BTreeSet<(&str, &str)> = star
                    .top_neighbors(count)
                    .iter()
                    .map(|nb| (nb.predicate.pid.as_str(), nb.entity.qid.as_str()))
                    .collect();
                let pool: Vec<&Bite> = list
                    .iter()
                    .filter(|o| {
                        o.object.qid != b.object.qid
                            && listed.contains(&(o.predicate.pid.as_str(), o.object.qid.as_str()))
                    })
                    .collect();
                let mut used = len(&text);
                let mut added = 0;
                for o in pool.choose_multiple(rng, pool.len()) {
                    let extra = format!(" {}", o.text);
                    let n = len(&extra);
                    if used + n <= budget {
                        text.push_str(&extra);
                        used += n;
                        added += 1;
                        if added == followups {
                            break;
                        }
                    }
                }
            }
            out.push(text);
        }
    }
    out
}

fn fit_texts(texts: Vec<String>, tokenizer: &Tokenizer, context: usize) -> Vec<String> {
    let before = texts.len();
    let kept: Vec<String> = texts
        .into_iter()
        .filter(|t| tokenizer.encode(t).len() < context)
        .collect();
    if kept.len() < before {
        log::warn!("dropped {} pretraining texts longer than the context", before - kept.len());
    }
    kept
}

pub fn pretrain_lm(cfg: &RunConfig, dirs: &RunDirs, args: &[String]) -> Result<PretrainReport> {
    cfg.validate()?;
    let dir = dirs.lm();
    mkdir(&dir)?;
    let stars = graph_store::load_star_graphs(dirs.stars())?;
    let (texts, tokenizer) = pretraining_corpus(cfg, dirs, &stars)?;
    tokenizer.save(dirs.tokenizer())?;
    let seed = derive_seed(cfg.seed, "lm");
    log::info!("pretrain-lm: {} texts, seed {seed}", texts.len());
    let (params, report) = toy_lm::pretrain_base_lm(&cfg.lm, &cfg.pretrain.train, &tokenizer, &texts, seed)?;
    let fp = lm_io::save(&params, dirs.lm_params())?;
    debug_assert_eq!(fp, report.fingerprint);
    write_json(&dir.join("pretrain_report.json"), &report)?;
    let inputs = [dirs.manifest(), dirs.stars()];
    finish_command(
        &dir,
        "pretrain-lm",
        args,
        cfg,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &[dirs.tokenizer().as_path(), dirs.lm_params().as_path()],
    )?;
    Ok(report)
}

/// Frozen LM, tokenizer, star graphs and label embeddings of a run.
pub struct Loaded {
    pub lm: LmParams<f32>,
    pub lm_fingerprint: String,
    pub tokenizer: Tokenizer,
    pub stars: StarGraphs,
    pub labels: LabelEmbeddings,
}

pub fn load_frozen(dirs: &RunDirs) -> Result<Loaded> {
    let (lm, lm_fingerprint) = lm_io::load(dirs.lm_params())?;
    let tokenizer = Tokenizer::load(dirs.tokenizer())?;
    let stars = graph_store::load_star_graphs(dirs.stars())?;
    let labels = LabelEmbeddings::for_stars(&lm, &tokenizer, stars.values())?;
    Ok(Loaded {
        lm,
        lm_fingerprint,
        tokenizer,
        stars,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub n: usize,
    pub stage: u8,
    pub shape: CfShape,
    pub init_seed: u64,
    pub resumed_from: Option<String>,
    pub lm_fingerprint: String,
    pub cf_fingerprint: String,
    pub report: StageReport,
}

pub fn read_checkpoint_sidecar(dirs: &RunDirs, n: usize, stage: u8) -> Result<CheckpointSidecar> {
    let path = training::checkpoint_path(dirs.cf(), n, stage).with_extension("json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint and checks it against its sidecar and the LM.
pub fn load_checkpoint(dirs: &RunDirs, n: usize, stage: u8, lm_fingerprint: &str) -> Result<(ConceptFormerParams<f32>, String)> {
    let path = training::checkpoint_path(dirs.cf(), n, stage);
    let (cf, fp) = conceptformer::load(&path)?;
    let side = read_checkpoint_sidecar(dirs, n, stage)?;
    if side.cf_fingerprint != fp {
        return Err(Error::Fingerprint {
            what: format!("checkpoint {}", path.display()),
            expected: side.cf_fingerprint,
            found: fp,
        });
    }
    if side.lm_fingerprint != lm_fingerprint {
        return Err(Error::Fingerprint {
            what: format!("LM used to train {}", path.display()),
            expected: side.lm_fingerprint,
            found: lm_fingerprint.to_string(),
        });
    }
    Ok((cf, fp))
}

/// Trains one stage (`Some(s)`) or both stages (`None`) for `n` vectors.
/// Stage 2 alone resumes from the stage-1 checkpoint unless stage 1 is
/// skipped by configuration.
pub fn train_cf(
    cfg: &RunConfig,
    dirs: &RunDirs,
    n: usize,
    stage: Option<u8>,
    args: &[String],
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("n_vectors must be at least 1".into()));
    }
    let dir = dirs.cf();
    mkdir(&dir)?;
    let loaded = load_frozen(dirs)?;
    let shape = CfShape {
        dim_i: loaded.lm.dim(),
        dim_o: loaded.lm.dim(),
        n,
        hidden: cfg.cf.hidden,
        slope: cfg.cf.slope,
    };
    let init_seed = derive_seed(cfg.seed, &format!("cf-init-{n}"));
    let ctx = TrainContext {
        lm: &loaded.lm,
        tokenizer: &loaded.tokenizer,
        stars: &loaded.stars,
        labels: &loaded.labels,
    };
    let stages: Vec<u8> = match stage {
        Some(s @ (1 | 2)) => vec![s],
        Some(s) => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        None if cfg.cf.skip_stage1 => vec![2],
        None => vec![1, 2],
    };
    let mut reports = Vec::new();
    let mut current: Option<(ConceptFormerParams<f32>, String)> = None;
    let mut inputs = vec![dirs.lm_params(), dirs.tokenizer(), dirs.stars()];
    let mut outputs = Vec::new();
    for s in stages {
        let (init, resumed_from) = match (s, current.take()) {
            (_, Some((cf, fp))) => (cf, Some(fp)),
            (1, None) => (ConceptFormerParams::<f32>::init(&shape, init_seed)?, None),
            (_, None) if cfg.cf.skip_stage1 => (ConceptFormerParams::<f32>::init(&shape, init_seed)?, None),
            (_, None) => {
                let (cf, fp) = load_checkpoint(dirs, n, 1, &loaded.lm_fingerprint)?;
                inputs.push(training::checkpoint_path(dirs.cf(), n, 1));
                (cf, Some(fp))
            }
        };
        let mut tc = if s == 1 { cfg.stage1.clone() } else { cfg.stage2.clone() };
        tc.seed = derive_seed(cfg.seed, &format!("cf-train-{n}-stage{s}"));
        let train = read_bites(dirs.bites(s, Split::Train))?;
        let validation = read_bites(dirs.bites(s, Split::Validation))?;
        let data = StageData {
            train: &train,
            validation: &validation,
        };
        let (cf, report) = ctx.run_stage(s, init, data, &tc)?;
        let fp = conceptformer::fingerprint(&cf);
        let sidecar = CheckpointSidecar {
            n,
            stage: s,
            shape: shape.clone(),
            init_seed,
            resumed_from,
            lm_fingerprint: loaded.lm_fingerprint.clone(),
            cf_fingerprint: fp.clone(),
            report: report.clone(),
        };
        training::save_checkpoint(&dir, &cf, s, &sidecar)?;
        outputs.push(training::checkpoint_path(&dir, n, s));
        reports.push(report);
        current = Some((cf, fp));
    }
    let lm_after = file_sha256(&dirs.lm_params())?;
    if lm_after != loaded.lm_fingerprint {
        return Err(Error::Fingerprint {
            what: "LM params file after training".into(),
            expected: loaded.lm_fingerprint,
            found: lm_after,
        });
    }
    finish_command(
        &dir,
        &format!("train-cf-n{n}"),
        args,
        cfg,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
    )?;
    Ok(reports)
}

pub fn dataset_name(cfg: &RunConfig) -> String {
    format!("stage{}_{}", cfg.eval.stage, cfg.eval.split.name())
}

/// Evaluates one mode on the configured dataset and writes the report.
pub fn eval(
    cfg: &RunConfig,
    dirs: &RunDirs,
    mode: PromptMode,
    n: Option<usize>,
    table: Option<&Path>,
    args: &[String],
) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = dirs.eval();
    mkdir(&dir)?;
    let loaded = load_frozen(dirs)?;
    let bites_path = dirs.bites(cfg.eval.stage, cfg.eval.split);
    let bites = read_bites(&bites_path)?;
    let name = dataset_name(cfg);
    let inputs = EvalInputs {
        lm: &loaded.lm,
        tokenizer: &loaded.tokenizer,
        stars: &loaded.stars,
    };
    let mut input_paths = vec![dirs.lm_params(), dirs.tokenizer(), dirs.stars(), bites_path.clone()];
    let n = n.unwrap_or(cfg.cf.n_vectors);
    let stage = cfg.eval.checkpoint_stage;
    let live;
    let tbl;
    let source = match (mode, table) {
        (PromptMode::Cf, Some(path)) => {
            let (t, _) = lookup_store::load_table(path)?;
            let (_, cf_fp) = load_checkpoint(dirs, n, stage, &loaded.lm_fingerprint)?;
            t.check_provenance(&cf_fp, &loaded.lm_fingerprint)?;
            input_paths.push(path.to_path_buf());
            tbl = t;
            Some(VectorSource::Table(&tbl))
        }
        (PromptMode::Cf, None) => {
            live = load_checkpoint(dirs, n, stage, &loaded.lm_fingerprint)?.0;
            input_paths.push(training::checkpoint_path(dirs.cf(), n, stage));
            Some(VectorSource::Live {
                cf: &live,
                labels: &loaded.labels,
                top_m: cfg.stage2.top_m,
            })
        }
        _ => None,
    };
    let (report, audit) = evaluation::evaluate(mode, (&name, &bites), &inputs, source, &cfg.eval.options)?;
    let stem = format!("{}_{name}", report.label);
    let report_path = dir.join(format!("{stem}.json"));
    let audit_path = dir.join(format!("{stem}.audit.jsonl"));
    write_text(&report_path, &report.to_json()?)?;
    evaluation::write_audit(&audit_path, &audit)?;
    log::info!("\n{}", report.text_table());
    finish_command(
        &dir,
        &format!("eval-{stem}"),
        args,
        cfg,
        &input_paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &[report_path.as_path(), audit_path.as_path()],
    )?;
    Ok(report)
}

pub fn build_table(cfg: &RunConfig, dirs: &RunDirs, n: usize, args: &[String]) -> Result<TableSidecar> {
    cfg.validate()?;
    let dir = dirs.tables();
    mkdir(&dir)?;
    let loaded = load_frozen(dirs)?;
    let stage = cfg.eval.checkpoint_stage;
    let (cf, _) = load_checkpoint(dirs, n, stage, &loaded.lm_fingerprint)?;
    let top_m = cfg.stage2.top_m;
    let (table, excluded) = lookup_store::build_table(&loaded.stars, &cf, &loaded.lm, &loaded.labels, top_m)?;
    let path = dirs.table(n);
    let sidecar = lookup_store::write_table(&path, &table, &excluded, top_m)?;
    let ckpt = training::checkpoint_path(dirs.cf(), n, stage);
    finish_command(
        &dir,
        &format!("build-table-n{n}"),
        args,
        cfg,
        &[dirs.lm_params().as_path(), dirs.stars().as_path(), ckpt.as_path()],
        &[path.as_path()],
    )?;
    Ok(sidecar)
}

/// Merges every report of the configured dataset: baseline, rag, then cf
/// runs by ascending vector count.
pub fn report(cfg: &RunConfig, dirs: &RunDirs, args: &[String]) -> Result<Comparison> {
    cfg.validate()?;
    let name = dataset_name(cfg);
    let suffix = format!("_{name}.json");
    let eval_dir = dirs.eval();
    let mut reports = Vec::new();
    let mut inputs = Vec::new();
    let entries = std::fs::read_dir(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().is_some_and(|f| {
                let f = f.to_string_lossy();
                f.ends_with(&suffix) && !f.starts_with("provenance_")
            })
        })
        .collect();
    paths.sort();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let r: EvalReport = serde_json::from_str(&text)?;
        if !r.is_monotone() {
            return Err(Error::Invalid(format!("report {} has non-monotone hit rates", p.display())));
        }
        reports.push(r);
        inputs.push(p.clone());
    }
    reports.sort_by_key(|r| (r.mode, r.n_vectors));
    let cmp = compare_report(&reports)?;
    let dir = dirs.report();
    mkdir(&dir)?;
    write_json(&dir.join("comparison.json"), &cmp)?;
    let mut text = cmp.text();
    for r in &reports {
        text.push('\n');
        text.push_str(&r.text_table());
    }
    write_text(&dir.join("comparison.txt"), &text)?;
    finish_command(
        &dir,
        "report",
        args,
        cfg,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &[dir.join("comparison.json").as_path()],
    )?;
    Ok(cmp)
}
