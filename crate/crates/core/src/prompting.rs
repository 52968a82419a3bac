//! Model inputs for the three evaluation modes: bare prefix, prefix with
//! concept vectors spliced in after the subject, and prefix with the subject
//! mention expanded into a textified neighbor list.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conceptformer::{ConceptFormerParams, EmbeddedSubgraph};
use crate::corpus::{char_slice, Bite};
use crate::error::{Error, Result};
use crate::graph_store::StarGraph;
use crate::tensor::Matrix;
use crate::toy_lm::{embed_labels, LmParams, Tokenizer, BOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Baseline,
    Rag,
    Cf,
}

impl PromptMode {
    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Baseline => "baseline",
            PromptMode::Rag => "rag",
            PromptMode::Cf => "cf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(PromptMode::Baseline),
            "rag" => Some(PromptMode::Rag),
            "cf" => Some(PromptMode::Cf),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ledger {
    pub hard_tokens: usize,
    pub soft_vectors: usize,
}

/// Why a record produced no prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptyPrefix,
    EmptyTarget,
    MissingStar,
    ContextOverflow,
    Segmentation,
}

impl SkipReason {
    pub fn name(&self) -> &'static str {
        match self {
            SkipReason::EmptyPrefix => "empty_prefix",
            SkipReason::EmptyTarget => "empty_target",
            SkipReason::MissingStar => "missing_star",
            SkipReason::ContextOverflow => "context_overflow",
            SkipReason::Segmentation => "segmentation",
        }
    }
}

/// A prompt ready for teacher-forced scoring.
///
/// The input sequence is `ids[..insert_at]`, then the soft vectors, then
/// `ids[insert_at..]`, then every target but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub mode: PromptMode,
    pub center: String,
    pub ids: Vec<u32>,
    pub insert_at: usize,
    pub soft: Option<Matrix<f32>>,
    pub targets: Vec<u32>,
    /// Set when a concept-vector prompt fell back to the bare prefix.
    pub downgraded: bool,
}

impl AssembledPrompt {
    pub fn soft_count(&self) -> usize {
        self.soft.as_ref().map_or(0, |s| s.rows)
    }

    pub fn ledger(&self) -> Ledger {
        Ledger {
            hard_tokens: self.ids.len(),
            soft_vectors: self.soft_count(),
        }
    }

    /// Positions fed to the model.
    pub fn input_len(&self) -> usize {
        self.ids.len() + self.soft_count() + self.targets.len() - 1
    }

    /// Rows whose logits predict each target, in target order.
    pub fn target_rows(&self) -> Vec<usize> {
        let first = self.ids.len() + self.soft_count() - 1;
        (first..first + self.targets.len()).collect()
    }

    /// Input embedding sequence.
    pub fn input_rows(&self, lm: &LmParams<f32>) -> Result<Matrix<f32>> {
        let context = lm.config.context;
        if self.input_len() > context {
            return Err(Error::ContextOverflow {
                required: self.input_len(),
                actual: context,
            });
        }
        let dim = lm.dim();
        let mut x = Matrix::zeros(0, dim);
        let head = lm.embedding_rows(&self.ids[..self.insert_at])?;
        x.data.extend_from_slice(&head.data);
        x.rows += head.rows;
        if let Some(soft) = &self.soft {
            if soft.cols != dim {
                return Err(Error::WidthMismatch {
                    expected: dim,
                    actual: soft.cols,
                });
            }
            x.data.extend_from_slice(&soft.data);
            x.rows += soft.rows;
        }
        let mut tail = self.ids[self.insert_at..].to_vec();
        tail.extend_from_slice(&self.targets[..self.targets.len() - 1]);
        let tail = lm.embedding_rows(&tail)?;
        x.data.extend_from_slice(&tail.data);
        x.rows += tail.rows;
        Ok(x)
    }

    /// Same prompt with the soft vectors removed.
    pub fn without_soft(&self) -> AssembledPrompt {
        AssembledPrompt {
            mode: PromptMode::Baseline,
            soft: None,
            insert_at: self.ids.len(),
            downgraded: false,
            ..self.clone()
        }
    }
}

/// Text before the object, trailing whitespace trimmed.
pub fn truncated_prefix(bite: &Bite) -> &str {
    char_slice(&bite.text, 0, bite.object.start).trim_end()
}

/// Ids of the object label as it appears in context, with its leading space.
pub fn target_ids(tokenizer: &Tokenizer, bite: &Bite) -> Vec<u32> {
    let before = char_slice(&bite.text, 0, bite.object.start);
    let spaced = before.ends_with(' ');
    let form = if spaced {
        format!(" {}", bite.object.label)
    } else {
        bite.object.label.clone()
    };
    tokenizer.encode(&form)
}

fn check_fits(prompt: &AssembledPrompt, context: usize) -> std::result::Result<(), SkipReason> {
    if prompt.input_len() > context {
        Err(SkipReason::ContextOverflow)
    } else {
        Ok(())
    }
}

/// `[BOS] + ids(prefix)` with the object label as targets.
pub fn build_baseline(
    bite: &Bite,
    tokenizer: &Tokenizer,
    context: usize,
) -> std::result::Result<AssembledPrompt, SkipReason> {
    let prefix = truncated_prefix(bite);
    if prefix.is_empty() {
        return Err(SkipReason::EmptyPrefix);
    }
    let targets = target_ids(tokenizer, bite);
    if targets.is_empty() {
        return Err(SkipReason::EmptyTarget);
    }
    let mut ids = vec![BOS_ID];
    ids.extend(tokenizer.encode(prefix));
    let prompt = AssembledPrompt {
        mode: PromptMode::Baseline,
        center: bite.subject.qid.clone(),
        insert_at: ids.len(),
        ids,
        soft: None,
        targets,
        downgraded: false,
    };
    check_fits(&prompt, context)?;
    Ok(prompt)
}

/// Token count of `[BOS] + ids(text[..subject.end])`, i.e. the index right
/// after the subject's last token.
fn subject_end_index(
    bite: &Bite,
    tokenizer: &Tokenizer,
    ids: &[u32],
) -> std::result::Result<usize, SkipReason> {
    let mut head = vec![BOS_ID];
    head.extend(tokenizer.encode(char_slice(&bite.text, 0, bite.subject.end)));
    if ids.len() < head.len() || ids[..head.len()] != head[..] {
        return Err(SkipReason::Segmentation);
    }
    Ok(head.len())
}

/// Baseline prompt with an insertion point after the subject, without soft
/// vectors yet. Training fills them per step.
pub fn injection_skeleton(
    bite: &Bite,
    tokenizer: &Tokenizer,
    context: usize,
    n: usize,
) -> std::result::Result<AssembledPrompt, SkipReason> {
    let mut prompt = build_baseline(bite, tokenizer, context)?;
    prompt.insert_at = subject_end_index(bite, tokenizer, &prompt.ids)?;
    prompt.mode = PromptMode::Cf;
    if prompt.input_len() + n > context {
        return Err(SkipReason::ContextOverflow);
    }
    Ok(prompt)
}

/// Splices `vectors` after the subject; a missing matrix (isolated subject)
/// downgrades to the bare prefix.
pub fn build_injected(
    bite: &Bite,
    tokenizer: &Tokenizer,
    context: usize,
    vectors: Option<Matrix<f32>>,
) -> std::result::Result<AssembledPrompt, SkipReason> {
    let Some(vectors) = vectors else {
        log::debug!("{}: no concept vectors, using the bare prefix", bite.subject.qid);
        let mut p = build_baseline(bite, tokenizer, context)?;
        p.mode = PromptMode::Cf;
        p.downgraded = true;
        return Ok(p);
    };
    let mut prompt = injection_skeleton(bite, tokenizer, context, vectors.rows)?;
    prompt.soft = Some(vectors);
    Ok(prompt)
}

/// `"{subject}, {p1} {o1}, {p2} {o2}, ..."` over the given neighbors.
pub fn textify(star: &StarGraph, count: usize) -> String {
    let mut s = star.center.label.clone();
    for nb in star.top_neighbors(count) {
        s.push_str(", ");
        s.push_str(&nb.predicate.label);
        s.push(' ');
        s.push_str(&nb.entity.label);
    }
    s
}

/// Replaces the subject mention with its textified neighborhood, dropping
/// the lowest-ranked neighbors until the prompt fits the context.
pub fn build_rag(
    bite: &Bite,
    star: &StarGraph,
    tokenizer: &Tokenizer,
    context: usize,
    top_m: usize,
) -> std::result::Result<AssembledPrompt, SkipReason> {
    let base = build_baseline(bite, tokenizer, context)?;
    let prefix = truncated_prefix(bite);
    let before = char_slice(prefix, 0, bite.subject.start);
    let after = char_slice(prefix, bite.subject.end, prefix.chars().count());
    let mut count = top_m.min(star.degree());
    loop {
        let text = format!("{before}{}{after}", textify(star, count));
        let mut ids = vec![BOS_ID];
        ids.extend(tokenizer.encode(&text));
        let prompt = AssembledPrompt {
            mode: PromptMode::Rag,
            insert_at: ids.len(),
            ids,
            ..base.clone()
        };
        if check_fits(&prompt, context).is_ok() {
            return Ok(prompt);
        }
        if count <= 1 {
            return Err(SkipReason::ContextOverflow);
        }
        count -= 1;
    }
}

/// Label embeddings for every entity and predicate label the prompts need.
#[derive(Debug, Clone, Default)]
pub struct LabelEmbeddings {
    pub dim: usize,
    map: BTreeMap<String, Vec<f32>>,
}

impl LabelEmbeddings {
    pub fn build<'a>(
        lm: &LmParams<f32>,
        tokenizer: &Tokenizer,
        labels: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut unique: Vec<&str> = labels.into_iter().collect();
        unique.sort_unstable();
        unique.dedup();
        let vectors = embed_labels(lm, tokenizer, &unique)?;
        Ok(Self {
            dim: lm.dim(),
            map: unique.into_iter().map(String::from).zip(vectors).collect(),
        })
    }

    /// Every center, neighbor and predicate label of `stars`.
    pub fn for_stars<'a>(
        lm: &LmParams<f32>,
        tokenizer: &Tokenizer,
        stars: impl IntoIterator<Item = &'a StarGraph>,
    ) -> Result<Self> {
        let mut labels = Vec::new();
        for s in stars {
            labels.push(s.center.label.as_str());
            for nb in &s.neighbors {
                labels.push(nb.entity.label.as_str());
                labels.push(nb.predicate.label.as_str());
            }
        }
        Self::build(lm, tokenizer, labels)
    }

    pub fn get(&self, label: &str) -> Result<&[f32]> {
        self.map
            .get(label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("no embedding for label {label:?}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// C, N and E for the top `top_m` neighbors; `None` for an isolated center.
pub fn embed_subgraph(
    star: &StarGraph,
    labels: &LabelEmbeddings,
    top_m: usize,
) -> Result<Option<EmbeddedSubgraph<f32>>> {
    let neighbors = star.top_neighbors(top_m);
    if neighbors.is_empty() {
        return Ok(None);
    }
    let mut n = Matrix::zeros(0, labels.dim);
    let mut e = Matrix::zeros(0, labels.dim);
    for nb in neighbors {
        n.push_row(labels.get(&nb.entity.label)?);
        e.push_row(labels.get(&nb.predicate.label)?);
    }
    Ok(Some(EmbeddedSubgraph {
        center: labels.get(&star.center.label)?.to_vec(),
        neighbors: n,
        edges: e,
    }))
}

/// Live concept vectors for one star, `None` when it has no neighbors.
pub fn concept_vectors(
    cf: &ConceptFormerParams<f32>,
    star: &StarGraph,
    labels: &LabelEmbeddings,
    top_m: usize,
) -> Result<Option<Matrix<f32>>> {
    match embed_subgraph(star, labels, top_m)? {
        Some(g) => Ok(Some(cf.forward(&g)?.vectors)),
        None => Ok(None),
    }
}

/// One line of the prompt dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub mode: PromptMode,
    pub center: String,
    pub insertion_index: usize,
    pub ledger: Ledger,
    pub target_ids: Vec<u32>,
    pub downgraded: bool,
}

impl From<&AssembledPrompt> for PromptRecord {
    fn from(p: &AssembledPrompt) -> Self {
        PromptRecord {
            mode: p.mode,
            center: p.center.clone(),
            insertion_index: p.insert_at,
            ledger: p.ledger(),
            target_ids: p.targets.clone(),
            downgraded: p.downgraded,
        }
    }
}

pub fn write_prompt_dump(path: impl AsRef<Path>, prompts: &[AssembledPrompt]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in prompts {
        serde_json::to_writer(&mut w, &PromptRecord::from(p))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
