//! Deterministic closed toy world and the sentence datasets rendered from it.
//!
//! Subjects and objects are disjoint populations: every object comes from a
//! fixed value pool and is drawn uniformly per (subject, predicate), so no
//! surface feature of a subject predicts its objects. Labels are built from
//! a syllable inventory so entity names segment into several tokens.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{EntityRef, Neighbor, PredicateRef, StarGraph, StarGraphs};

/// Maximum bite length in characters.
pub const MAX_BITE_CHARS: usize = 512;

const SYLLABLES: [&str; 108] = [
    "ka", "lo", "mi", "ren", "tas", "vo", "ne", "dri", "sol", "bar", "qui", "zen", "fa", "gor",
    "li", "mun", "pe", "rox", "sa", "tur", "vel", "wy", "xa", "yor", "zu", "hal", "jin", "kor",
    "nav", "os", "pri", "rim", "sev", "tol", "ul", "vex", "bel", "cas", "dun", "el", "fim", "gal",
    "hes", "ik", "jor", "kel", "lum", "mar", "nim", "or", "pal", "quo", "ras", "sim", "tev", "un",
    "var", "wol", "xen", "yal", "zor", "bri", "cor", "dal", "ern", "fel", "gri", "hom", "ist",
    "jal", "ket", "lor", "mav", "nor", "ob", "pim", "rul", "sen", "tam", "ur", "ves", "wen",
    "yun", "zal", "bo", "cu", "di", "fo", "gu", "ha", "je", "ko", "lu", "ma", "nu", "pa", "ri",
    "so", "tu", "va", "we", "ye", "zi", "ab", "cel", "dov", "eth", "gim",
];

/// (label, sentence phrase) for every predicate the generator can use.
const PREDICATE_TABLE: [(&str, &str); 30] = [
    ("facial hair", "wore a"),
    ("place of birth", "was born in"),
    ("employer", "worked for"),
    ("spouse", "was married to"),
    ("instrument", "played the"),
    ("award received", "received the"),
    ("educated at", "studied at"),
    ("residence", "lived in"),
    ("member of", "was a member of"),
    ("favorite food", "liked to eat"),
    ("owned by", "was owned by"),
    ("sibling", "grew up with"),
    ("pet", "kept a pet named"),
    ("language spoken", "spoke"),
    ("genre", "wrote in the style of"),
    ("place of death", "died in"),
    ("founder of", "founded"),
    ("student of", "learned from"),
    ("vehicle", "drove a"),
    ("religion", "followed"),
    ("notable work", "is known for"),
    ("teacher of", "taught"),
    ("rival", "competed against"),
    ("sport", "practiced"),
    ("patron", "was supported by"),
    ("hobby", "enjoyed"),
    ("ally", "sided with"),
    ("mentor", "was trained by"),
    ("home port", "sailed from"),
    ("emblem", "carried the sign of"),
];

const STAGE2_PREFIXES: [&str; 12] = [
    "In the old records",
    "According to the archive",
    "Long ago",
    "As the story goes",
    "In a later account",
    "By most reports",
    "During the winter season",
    "Years after the war",
    "In the village chronicle",
    "As neighbors recall",
    "Within the family letters",
    "At the height of the season",
];

const STAGE2_FILLERS: [&str; 8] = [
    "",
    "reportedly",
    "once",
    "famously",
    "later",
    "quietly",
    "often",
    "for a while",
];

const STAGE2_SUFFIXES: [&str; 8] = [
    "",
    " after many years",
    " in the end",
    " for a long time",
    " according to friends",
    " without much fuss",
    " as expected",
    " to the surprise of many",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub subjects: usize,
    pub value_pool: usize,
    pub predicates: usize,
    pub min_degree: usize,
    pub max_degree: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            subjects: 620,
            value_pool: 100,
            predicates: 24,
            min_degree: 3,
            max_degree: 20,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects < 10 {
            return bad(format!("subjects must be >= 10, got {}", self.subjects));
        }
        if self.value_pool < 20 {
            return bad(format!("value_pool must be >= 20, got {}", self.value_pool));
        }
        if self.predicates < 3 || self.predicates > PREDICATE_TABLE.len() {
            return bad(format!(
                "predicates must be in 3..={}, got {}",
                PREDICATE_TABLE.len(),
                self.predicates
            ));
        }
        if self.min_degree < 1 || self.min_degree > self.max_degree || self.max_degree > 100 {
            return bad(format!(
                "need 1 <= min_degree <= max_degree <= 100, got {}..{}",
                self.min_degree, self.max_degree
            ));
        }
        if self.max_degree > self.predicates * self.value_pool {
            return bad(format!(
                "max_degree {} exceeds the {} distinct (predicate, object) pairs",
                self.max_degree,
                self.predicates * self.value_pool
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub pid: String,
    pub label: String,
    pub phrase: String,
}

impl Predicate {
    pub fn as_ref(&self) -> PredicateRef {
        PredicateRef {
            pid: self.pid.clone(),
            label: self.label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub pid: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub subjects: Vec<EntityRef>,
    pub values: Vec<EntityRef>,
    pub predicates: Vec<Predicate>,
    pub facts: Vec<Fact>,
}

impl ToyWorld {
    pub fn entities(&self) -> impl Iterator<Item = &EntityRef> {
        self.subjects.iter().chain(&self.values)
    }

    pub fn entity_index(&self) -> BTreeMap<&str, &EntityRef> {
        self.entities().map(|e| (e.qid.as_str(), e)).collect()
    }

    pub fn predicate_index(&self) -> BTreeMap<&str, &Predicate> {
        self.predicates.iter().map(|p| (p.pid.as_str(), p)).collect()
    }

    pub fn facts_of<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a Fact> + 'a {
        self.facts.iter().filter(move |f| f.subject == subject)
    }
}

fn make_label<R: Rng>(rng: &mut R, lead: Option<&str>) -> String {
    let count = rng.gen_range(2..=4);
    let mut label = lead.unwrap_or_default().to_string();
    for _ in usize::from(lead.is_some())..count {
        label.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
    }
    let mut chars = label.chars();
    let first = chars.next().expect("non-empty label").to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains('.') {
        return Err(Error::Config(format!(
            "label {label:?} is empty or contains the sentence delimiter"
        )));
    }
    Ok(())
}

pub fn generate_toy_world(config: &WorldConfig, seed: u64) -> Result<ToyWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut seen = HashSet::new();
    let mut fresh_label = |rng: &mut ChaCha8Rng, lead: Option<&str>| loop {
        let l = make_label(rng, lead);
        if seen.insert(l.clone()) {
            return l;
        }
    };

    let mut subjects = Vec::with_capacity(config.subjects);
    for i in 0..config.subjects {
        let label = fresh_label(&mut rng, None);
        subjects.push(EntityRef {
            qid: format!("Q{}", i + 1),
            label,
            pagerank: rng.gen_range(0.001..1.0),
        });
    }
    // Values lead with distinct syllables (cycling once the inventory runs
    // out) so their first tokens do not collapse onto a few shared prefixes.
    let mut leads: Vec<&str> = SYLLABLES.to_vec();
    leads.shuffle(&mut rng);
    let mut values = Vec::with_capacity(config.value_pool);
    for i in 0..config.value_pool {
        let label = fresh_label(&mut rng, Some(leads[i % leads.len()]));
        values.push(EntityRef {
            qid: format!("Q{}", config.subjects + i + 1),
            label,
            pagerank: rng.gen_range(0.001..1.0),
        });
    }
    for e in subjects.iter().chain(&values) {
        check_label(&e.label)?;
    }

    let predicates: Vec<Predicate> = PREDICATE_TABLE[..config.predicates]
        .iter()
        .enumerate()
        .map(|(i, (label, phrase))| Predicate {
            pid: format!("P{}", i + 1),
            label: label.to_string(),
            phrase: phrase.to_string(),
        })
        .collect();

    let mut facts = Vec::new();
    for s in &subjects {
        let degree = rng.gen_range(config.min_degree..=config.max_degree);
        let mut pairs: Vec<(usize, usize)> = if degree <= predicates.len() {
            let mut idx: Vec<usize> = (0..predicates.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(degree);
            idx.sort_unstable();
            idx.into_iter()
                .map(|p| (p, rng.gen_range(0..values.len())))
                .collect()
        } else {
            let mut chosen = BTreeSet::new();
            while chosen.len() < degree {
                let p = rng.gen_range(0..predicates.len());
                let o = rng.gen_range(0..values.len());
                chosen.insert((p, o));
            }
            chosen.into_iter().collect()
        };
        pairs.sort_unstable();
        for (p, o) in pairs {
            facts.push(Fact {
                subject: s.qid.clone(),
                pid: predicates[p].pid.clone(),
                object: values[o].qid.clone(),
            });
        }
    }

    Ok(ToyWorld {
        config: config.clone(),
        seed,
        subjects,
        values,
        predicates,
        facts,
    })
}

/// A labelled mention inside a bite. Offsets count characters, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mention {
    pub qid: String,
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bite {
    pub text: String,
    pub subject: Mention,
    pub object: Mention,
    pub predicate: PredicateRef,
}

/// Characters `start..end` of `text`.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut idx = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b0 = idx.nth(start).unwrap_or(text.len());
    let b1 = if end > start {
        idx.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b0
    };
    &text[b0..b1]
}

impl Bite {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let len = self.text.chars().count();
        if len > MAX_BITE_CHARS {
            return Err(format!("text has {len} characters, limit {MAX_BITE_CHARS}"));
        }
        for (role, m) in [("subject", &self.subject), ("object", &self.object)] {
            if m.start >= m.end || m.end > len {
                return Err(format!("{role} span {}..{} out of range", m.start, m.end));
            }
            let found = char_slice(&self.text, m.start, m.end);
            if found != m.label {
                return Err(format!("{role} span holds {found:?}, expected {:?}", m.label));
            }
        }
        if self.subject.end > self.object.start {
            return Err("subject span does not precede object span".into());
        }
        Ok(())
    }

    /// True when the text before the object ends a sentence.
    pub fn object_starts_sentence(&self) -> bool {
        let before = char_slice(&self.text, 0, self.object.start).trim_end();
        before.is_empty() || before.ends_with(['.', '!', '?'])
    }
}

fn mention(e: &EntityRef, start: usize) -> Mention {
    Mention {
        qid: e.qid.clone(),
        label: e.label.clone(),
        start,
        end: start + e.label.chars().count(),
    }
}

struct Resolved<'a> {
    subject: &'a EntityRef,
    object: &'a EntityRef,
    predicate: &'a Predicate,
}

fn resolve_facts(world: &ToyWorld) -> Vec<Resolved<'_>> {
    let entities = world.entity_index();
    let predicates = world.predicate_index();
    world
        .facts
        .iter()
        .map(|f| Resolved {
            subject: entities[f.subject.as_str()],
            object: entities[f.object.as_str()],
            predicate: predicates[f.pid.as_str()],
        })
        .collect()
}

/// Assembles `{lead}{subject} {middle}{object}{tail}` and the two spans.
fn assemble(lead: &str, r: &Resolved<'_>, middle: &str, tail: &str) -> Bite {
    let mut text = String::from(lead);
    let s_start = text.chars().count();
    text.push_str(&r.subject.label);
    text.push(' ');
    text.push_str(middle);
    let o_start = text.chars().count();
    text.push_str(&r.object.label);
    text.push_str(tail);
    Bite {
        text,
        subject: mention(r.subject, s_start),
        object: mention(r.object, o_start),
        predicate: r.predicate.as_ref(),
    }
}

/// One triple-style sentence per fact: `"{subject} {phrase} {object}."`.
pub fn render_stage1(world: &ToyWorld) -> Vec<Bite> {
    resolve_facts(world)
        .iter()
        .map(|r| assemble("", r, &format!("{} ", r.predicate.phrase), "."))
        .collect()
}

/// One contextual sentence per fact with seeded prefix, filler and suffix.
pub fn render_stage2(world: &ToyWorld, seed: u64) -> Result<Vec<Bite>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(world.facts.len());
    for r in resolve_facts(world) {
        let mut attempt = 0;
        loop {
            let prefix = STAGE2_PREFIXES[rng.gen_range(0..STAGE2_PREFIXES.len())];
            // Later attempts restrict the filler pool to the empty filler.
            let filler = if attempt == 0 {
                STAGE2_FILLERS[rng.gen_range(0..STAGE2_FILLERS.len())]
            } else {
                ""
            };
            let suffix = STAGE2_SUFFIXES[rng.gen_range(0..STAGE2_SUFFIXES.len())];
            let middle = if filler.is_empty() {
                format!("{} ", r.predicate.phrase)
            } else {
                format!("{filler} {} ", r.predicate.phrase)
            };
            let bite = assemble(&format!("{prefix}, "), &r, &middle, &format!("{suffix}."));
            if bite.text.chars().count() <= MAX_BITE_CHARS {
                out.push(bite);
                break;
            }
            attempt += 1;
            if attempt >= 10 {
                return Err(Error::Invalid(format!(
                    "cannot fit a stage-2 sentence for {} under {MAX_BITE_CHARS} characters",
                    r.subject.qid
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// qid → split assignment.
pub type SplitManifest = BTreeMap<String, Split>;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBites {
    pub train: Vec<Bite>,
    pub validation: Vec<Bite>,
    pub test: Vec<Bite>,
    pub manifest: SplitManifest,
}

/// Seeded shuffle of the distinct subject qids followed by a contiguous cut.
pub fn split_subjects<'a>(
    qids: impl IntoIterator<Item = &'a str>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let unique: BTreeSet<&str> = qids.into_iter().collect();
    let mut subjects: Vec<&str> = unique.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = subjects.len();
    let n_train = (rt * total as f64).round() as usize;
    let n_val = ((rv * total as f64).round() as usize).min(total.saturating_sub(n_train));
    let n_test = total - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {total} subjects leaves an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut manifest = SplitManifest::new();
    for (i, q) in subjects.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
        manifest.insert(q.to_string(), split);
    }
    Ok(manifest)
}

/// Routes each bite to its subject's split; bites of unknown subjects are dropped.
pub fn apply_manifest(bites: &[Bite], manifest: &SplitManifest) -> SplitBites {
    let mut out = SplitBites {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        manifest: manifest.clone(),
    };
    for b in bites {
        match manifest.get(&b.subject.qid) {
            Some(Split::Train) => out.train.push(b.clone()),
            Some(Split::Validation) => out.validation.push(b.clone()),
            Some(Split::Test) => out.test.push(b.clone()),
            None => {}
        }
    }
    out
}

pub fn split_by_subject(bites: &[Bite], ratios: (f64, f64, f64), seed: u64) -> Result<SplitBites> {
    let manifest = split_subjects(bites.iter().map(|b| b.subject.qid.as_str()), ratios, seed)?;
    Ok(apply_manifest(bites, &manifest))
}

/// One star graph per subject; every fact becomes one neighbor pair and the
/// neighbor pagerank is the value entity's generated score.
pub fn export_star_graphs(world: &ToyWorld) -> StarGraphs {
    let entities = world.entity_index();
    let predicates = world.predicate_index();
    let mut by_subject: BTreeMap<&str, Vec<Neighbor>> = BTreeMap::new();
    for s in &world.subjects {
        by_subject.insert(&s.qid, Vec::new());
    }
    for f in &world.facts {
        let neighbor = Neighbor {
            predicate: predicates[f.pid.as_str()].as_ref(),
            entity: entities[f.object.as_str()].clone(),
        };
        by_subject.entry(&f.subject).or_default().push(neighbor);
    }
    by_subject
        .into_iter()
        .map(|(qid, neighbors)| {
            let center = entities[qid].clone();
            (qid.to_string(), StarGraph::new(center, neighbors))
        })
        .collect()
}

pub fn write_bites(path: impl AsRef<Path>, bites: &[Bite]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for b in bites {
        out.push_str(&serde_json::to_string(b)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_bites(path: impl AsRef<Path>) -> Result<Vec<Bite>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bite: Bite = serde_json::from_str(&line).map_err(|e| Error::Parse {
            index,
            message: e.to_string(),
        })?;
        bite.validate()
            .map_err(|message| Error::Parse { index, message })?;
        if bite.object_starts_sentence() {
            log::warn!("{}: bite {index} starts a new sentence at the object", path.display());
        }
        out.push(bite);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &SplitManifest) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (qid, split) in manifest {
        writeln!(f, "{qid}\t{split}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = SplitManifest::new();
    for (index, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let (qid, split) = line.split_once('\t').ok_or_else(|| Error::Parse {
            index,
            message: "expected qid<TAB>split".into(),
        })?;
        let split = Split::parse(split).ok_or_else(|| Error::Parse {
            index,
            message: format!("unknown split {split:?}"),
        })?;
        if manifest.insert(qid.to_string(), split).is_some() {
            return Err(Error::Parse {
                index,
                message: format!("qid {qid} listed twice"),
            });
        }
    }
    Ok(manifest)
}
