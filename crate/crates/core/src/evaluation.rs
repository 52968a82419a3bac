//! Hit@k under teacher forcing with multi-token max-rank semantics, dataset
//! evaluation in the three prompt modes, and report comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::sha256_hex;
use crate::conceptformer::{self, ConceptFormerParams};
use crate::corpus::Bite;
use crate::error::{Error, Result};
use crate::graph_store::{DegreeBucket, StarGraphs};
use crate::lookup_store::ConceptTable;
use crate::prompting::{
    build_baseline, build_injected, build_rag, concept_vectors, AssembledPrompt, LabelEmbeddings,
    Ledger, PromptMode, PromptRecord, SkipReason,
};
use crate::tensor::Matrix;
use crate::toy_lm::{io as lm_io, LmParams, Tokenizer};

pub const DEFAULT_K: [usize; 3] = [1, 5, 10];

/// `1 + |{j : logits[j] > logits[target]}|`; ties count for the target.
pub fn token_rank(logits: &[f32], target: u32) -> u32 {
    let t = logits[target as usize];
    1 + logits.iter().filter(|&&v| v > t).count() as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub token_ranks: Vec<u32>,
    pub rank: u32,
}

impl RankResult {
    pub fn from_ranks(token_ranks: Vec<u32>) -> Self {
        let rank = token_ranks.iter().copied().max().unwrap_or(u32::MAX);
        Self { token_ranks, rank }
    }

    pub fn hit(&self, k: usize) -> bool {
        (self.rank as usize) <= k
    }
}

/// Teacher-forced per-token ranks of the prompt's targets.
pub fn sequence_rank(lm: &LmParams<f32>, prompt: &AssembledPrompt) -> Result<RankResult> {
    let x = prompt.input_rows(lm)?;
    let out = lm.forward_train(&x, &prompt.target_rows())?;
    Ok(RankResult::from_ranks(
        prompt
            .targets
            .iter()
            .enumerate()
            .map(|(r, &t)| token_rank(out.logits.row(r), t))
            .collect(),
    ))
}

/// Logits at the target rows; used for equivalence checks.
pub fn target_logits(lm: &LmParams<f32>, prompt: &AssembledPrompt) -> Result<Matrix<f32>> {
    let x = prompt.input_rows(lm)?;
    Ok(lm.forward_train(&x, &prompt.target_rows())?.logits)
}

/// Where CF-mode concept vectors come from.
#[derive(Clone, Copy)]
pub enum VectorSource<'a> {
    Live {
        cf: &'a ConceptFormerParams<f32>,
        labels: &'a LabelEmbeddings,
        top_m: usize,
    },
    Table(&'a ConceptTable),
}

impl VectorSource<'_> {
    pub fn n(&self) -> usize {
        match self {
            VectorSource::Live { cf, .. } => cf.n(),
            VectorSource::Table(t) => t.n,
        }
    }

    pub fn cf_fingerprint(&self) -> String {
        match self {
            VectorSource::Live { cf, .. } => conceptformer::fingerprint(cf),
            VectorSource::Table(t) => t.cf_fingerprint.clone(),
        }
    }
}

pub struct EvalInputs<'a> {
    pub lm: &'a LmParams<f32>,
    pub tokenizer: &'a Tokenizer,
    pub stars: &'a StarGraphs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub k: Vec<usize>,
    /// Neighbors textified in RAG prompts.
    pub rag_top_m: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K.to_vec(),
            rag_top_m: 100,
        }
    }
}

/// Identifies an evaluation dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetId {
    pub name: String,
    pub records: usize,
    pub sha256: String,
}

impl DatasetId {
    pub fn of(name: &str, bites: &[Bite]) -> Result<Self> {
        let mut bytes = Vec::new();
        for b in bites {
            serde_json::to_writer(&mut bytes, b)?;
            bytes.push(b'\n');
        }
        Ok(Self {
            name: name.to_string(),
            records: bites.len(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub k: usize,
    pub hits: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub examples: usize,
    pub hit_rates: Vec<HitRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanLedger {
    pub hard_tokens: f64,
    pub soft_vectors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub lm_fingerprint: String,
    pub cf_fingerprint: Option<String>,
    pub table_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mode: PromptMode,
    pub n_vectors: Option<usize>,
    pub dataset: DatasetId,
    pub examples: usize,
    pub skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
    pub downgraded: usize,
    pub hit_rates: Vec<HitRate>,
    pub buckets: BTreeMap<String, BucketStats>,
    pub ledger: MeanLedger,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn percent(&self, k: usize) -> Option<f64> {
        self.hit_rates.iter().find(|h| h.k == k).map(|h| h.percent)
    }

    /// Hit rates never decrease with k.
    pub fn is_monotone(&self) -> bool {
        let mut rates = self.hit_rates.clone();
        rates.sort_by_key(|h| h.k);
        rates.windows(2).all(|w| w[0].hits <= w[1].hits)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} on {} ({} examples, {} skipped)",
            self.label, self.dataset.name, self.examples, self.skipped
        );
        let mut header = format!("{:<10}", "bucket");
        for h in &self.hit_rates {
            header.push_str(&format!(" {:>8}", format!("Hit@{}", h.k)));
        }
        header.push_str(&format!(" {:>8}", "count"));
        let _ = writeln!(s, "{header}");
        let mut row = |name: &str, rates: &[HitRate], count: usize| {
            let mut line = format!("{name:<10}");
            for h in rates {
                line.push_str(&format!(" {:>8.2}", h.percent));
            }
            line.push_str(&format!(" {count:>8}"));
            let _ = writeln!(s, "{line}");
        };
        row("all", &self.hit_rates, self.examples);
        for b in DegreeBucket::REPORTED {
            if let Some(st) = self.buckets.get(b.name()) {
                row(b.name(), &st.hit_rates, st.examples);
            }
        }
        let _ = writeln!(
            s,
            "mean hard tokens {:.2}, mean soft vectors {:.2}",
            self.ledger.hard_tokens, self.ledger.soft_vectors
        );
        s
    }
}

/// One line of the per-example audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub index: usize,
    pub subject: String,
    pub object: String,
    pub prompt: Option<PromptRecord>,
    pub result: Option<RankResult>,
    pub skip: Option<SkipReason>,
}

fn rates(results: &[&RankResult], ks: &[usize]) -> Vec<HitRate> {
    ks.iter()
        .map(|&k| {
            let hits = results.iter().filter(|r| r.hit(k)).count();
            let percent = if results.is_empty() {
                0.0
            } else {
                100.0 * hits as f64 / results.len() as f64
            };
            HitRate { k, hits, percent }
        })
        .collect()
}

fn assemble(
    mode: PromptMode,
    bite: &Bite,
    inputs: &EvalInputs<'_>,
    source: Option<VectorSource<'_>>,
    options: &EvalOptions,
) -> Result<std::result::Result<AssembledPrompt, SkipReason>> {
    let context = inputs.lm.config.context;
    let star = inputs.stars.get(&bite.subject.qid);
    Ok(match mode {
        PromptMode::Baseline => build_baseline(bite, inputs.tokenizer, context),
        PromptMode::Rag => match star {
            None => Err(SkipReason::MissingStar),
            Some(star) => build_rag(bite, star, inputs.tokenizer, context, options.rag_top_m),
        },
        PromptMode::Cf => match star {
            None => Err(SkipReason::MissingStar),
            Some(star) => {
                let vectors = match source.expect("cf mode needs a vector source") {
                    VectorSource::Live { cf, labels, top_m } => concept_vectors(cf, star, labels, top_m)?,
                    VectorSource::Table(t) => t.lookup(&star.center.qid).cloned(),
                };
                build_injected(bite, inputs.tokenizer, context, vectors)
            }
        },
    })
}

/// Prompt for one bite in the given mode, as the evaluator builds it.
pub fn prompt_for(
    mode: PromptMode,
    bite: &Bite,
    inputs: &EvalInputs<'_>,
    source: Option<VectorSource<'_>>,
    options: &EvalOptions,
) -> Result<std::result::Result<AssembledPrompt, SkipReason>> {
    assemble(mode, bite, inputs, source, options)
}

/// Scores every bite in `dataset` under `mode`.
pub fn evaluate(
    mode: PromptMode,
    dataset: (&str, &[Bite]),
    inputs: &EvalInputs<'_>,
    source: Option<VectorSource<'_>>,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<AuditRecord>)> {
    if mode == PromptMode::Cf && source.is_none() {
        return Err(Error::Invalid("cf mode requires ConceptFormer parameters or a table".into()));
    }
    if options.k.is_empty() || options.k.contains(&0) {
        return Err(Error::Config("k values must be positive".into()));
    }
    let (name, bites) = dataset;
    let audit: Vec<AuditRecord> = bites
        .par_iter()
        .enumerate()
        .map(|(index, bite)| {
            let base = AuditRecord {
                index,
                subject: bite.subject.qid.clone(),
                object: bite.object.qid.clone(),
                prompt: None,
                result: None,
                skip: None,
            };
            match assemble(mode, bite, inputs, source, options)? {
                Err(reason) => Ok(AuditRecord {
                    skip: Some(reason),
                    ..base
                }),
                Ok(prompt) => Ok(AuditRecord {
                    result: Some(sequence_rank(inputs.lm, &prompt)?),
                    prompt: Some(PromptRecord::from(&prompt)),
                    ..base
                }),
            }
        })
        .collect::<Result<_>>()?;

    let mut skip_reasons = BTreeMap::new();
    let mut scored = Vec::new();
    let mut by_bucket: BTreeMap<&'static str, Vec<&RankResult>> = BTreeMap::new();
    let mut ledger = Ledger::default();
    let mut downgraded = 0;
    for rec in &audit {
        if let Some(reason) = &rec.skip {
            *skip_reasons.entry(reason.name().to_string()).or_insert(0) += 1;
            continue;
        }
        let (Some(result), Some(prompt)) = (&rec.result, &rec.prompt) else {
            continue;
        };
        scored.push(result);
        ledger.hard_tokens += prompt.ledger.hard_tokens;
        ledger.soft_vectors += prompt.ledger.soft_vectors;
        downgraded += prompt.downgraded as usize;
        let bucket = inputs
            .stars
            .get(&rec.subject)
            .map(|s| s.degree_bucket())
            .unwrap_or(DegreeBucket::Isolated);
        if bucket != DegreeBucket::Isolated {
            by_bucket.entry(bucket.name()).or_default().push(result);
        }
    }
    let count = scored.len().max(1) as f64;
    let n_vectors = if mode == PromptMode::Cf { source.map(|s| s.n()) } else { None };
    let label = match n_vectors {
        Some(n) => format!("cf-{n}"),
        None => mode.name().to_string(),
    };
    let report = EvalReport {
        label,
        mode,
        n_vectors,
        dataset: DatasetId::of(name, bites)?,
        examples: scored.len(),
        skipped: audit.len() - scored.len(),
        skip_reasons,
        downgraded,
        hit_rates: rates(&scored, &options.k),
        buckets: by_bucket
            .into_iter()
            .map(|(b, rs)| {
                (
                    b.to_string(),
                    BucketStats {
                        examples: rs.len(),
                        hit_rates: rates(&rs, &options.k),
                    },
                )
            })
            .collect(),
        ledger: MeanLedger {
            hard_tokens: ledger.hard_tokens as f64 / count,
            soft_vectors: ledger.soft_vectors as f64 / count,
        },
        provenance: Provenance {
            lm_fingerprint: lm_io::fingerprint(inputs.lm),
            cf_fingerprint: if mode == PromptMode::Cf { source.map(|s| s.cf_fingerprint()) } else { None },
            table_sha256: match source {
                Some(VectorSource::Table(t)) if mode == PromptMode::Cf => Some(t.file_sha256.clone()),
                _ => None,
            },
        },
    };
    Ok((report, audit))
}

pub fn write_audit(path: impl AsRef<Path>, audit: &[AuditRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in audit {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(new - old) / old * 100`, undefined when `old` is zero.
pub fn relative_change(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| (new - old) / old * 100.0)
}

pub fn arrow(change: Option<f64>) -> &'static str {
    match change {
        Some(c) if c > 0.0 => "↑",
        Some(c) if c < 0.0 => "↓",
        Some(_) => "≈",
        None => "?",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub old: String,
    pub new: String,
    pub k: usize,
    pub old_percent: f64,
    pub new_percent: f64,
    pub change_percent: Option<f64>,
    pub arrow: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub label: String,
    pub hard_tokens: f64,
    pub soft_vectors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: DatasetId,
    pub labels: Vec<String>,
    pub hit_table: Vec<Vec<Option<f64>>>,
    pub k: Vec<usize>,
    pub changes: Vec<ChangeRow>,
    pub ledgers: Vec<LedgerRow>,
    /// Mean RAG hard tokens over mean soft vectors of the smallest CF run.
    pub token_efficiency: Option<f64>,
    /// Extra hard tokens RAG adds over the bare prompt, per soft vector.
    pub expansion_efficiency: Option<f64>,
}

/// Relative changes of every later report against every earlier one.
pub fn compare_report(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Invalid("comparison needs at least two reports".into()));
    }
    let dataset = reports[0].dataset.clone();
    if let Some(r) = reports.iter().find(|r| r.dataset != dataset) {
        return Err(Error::Invalid(format!(
            "report {} covers dataset {} ({}), expected {} ({})",
            r.label, r.dataset.name, r.dataset.sha256, dataset.name, dataset.sha256
        )));
    }
    let mut k: Vec<usize> = reports.iter().flat_map(|r| r.hit_rates.iter().map(|h| h.k)).collect();
    k.sort_unstable();
    k.dedup();
    let mut changes = Vec::new();
    for (i, old) in reports.iter().enumerate() {
        for new in &reports[i + 1..] {
            for &kk in &k {
                if let (Some(a), Some(b)) = (old.percent(kk), new.percent(kk)) {
                    let c = relative_change(a, b);
                    changes.push(ChangeRow {
                        old: old.label.clone(),
                        new: new.label.clone(),
                        k: kk,
                        old_percent: a,
                        new_percent: b,
                        change_percent: c,
                        arrow: arrow(c).to_string(),
                    });
                }
            }
        }
    }
    let find = |mode: PromptMode| reports.iter().find(|r| r.mode == mode);
    let cf_min = reports
        .iter()
        .filter(|r| r.mode == PromptMode::Cf && r.ledger.soft_vectors > 0.0)
        .min_by(|a, b| a.ledger.soft_vectors.total_cmp(&b.ledger.soft_vectors));
    let token_efficiency = match (find(PromptMode::Rag), cf_min) {
        (Some(rag), Some(cf)) => Some(rag.ledger.hard_tokens / cf.ledger.soft_vectors),
        _ => None,
    };
    let expansion_efficiency = match (find(PromptMode::Rag), find(PromptMode::Baseline), cf_min) {
        (Some(rag), Some(base), Some(cf)) => {
            Some((rag.ledger.hard_tokens - base.ledger.hard_tokens) / cf.ledger.soft_vectors)
        }
        _ => None,
    };
    Ok(Comparison {
        dataset,
        labels: reports.iter().map(|r| r.label.clone()).collect(),
        hit_table: reports.iter().map(|r| k.iter().map(|&kk| r.percent(kk)).collect()).collect(),
        k,
        changes,
        ledgers: reports
            .iter()
            .map(|r| LedgerRow {
                label: r.label.clone(),
                hard_tokens: r.ledger.hard_tokens,
                soft_vectors: r.ledger.soft_vectors,
            })
            .collect(),
        token_efficiency,
        expansion_efficiency,
    })
}

impl Comparison {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset {} ({} records)", self.dataset.name, self.dataset.records);
        let mut header = format!("{:<12}", "model");
        for k in &self.k {
            header.push_str(&format!(" {:>8}", format!("Hit@{k}")));
        }
        header.push_str(&format!(" {:>8} {:>8}", "hard", "soft"));
        let _ = writeln!(s, "{header}");
        for ((label, row), ledger) in self.labels.iter().zip(&self.hit_table).zip(&self.ledgers) {
            let mut line = format!("{label:<12}");
            for v in row {
                match v {
                    Some(p) => line.push_str(&format!(" {p:>8.2}")),
                    None => line.push_str(&format!(" {:>8}", "-")),
                }
            }
            line.push_str(&format!(" {:>8.2} {:>8.2}", ledger.hard_tokens, ledger.soft_vectors));
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s);
        for c in &self.changes {
            let change = match c.change_percent {
                Some(v) => format!("{v:+.1}%"),
                None => "n/a".to_string(),
            };
            let _ = writeln!(
                s,
                "{:>12} -> {:<12} Hit@{:<3} {:>7.2} -> {:>7.2}  {change} {}",
                c.old, c.new, c.k, c.old_percent, c.new_percent, c.arrow
            );
        }
        if let Some(r) = self.token_efficiency {
            let _ = writeln!(s, "\ntoken efficiency (RAG hard tokens per soft vector): {r:.1}x");
        }
        if let Some(r) = self.expansion_efficiency {
            let _ = writeln!(s, "RAG expansion tokens per soft vector: {r:.1}x");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sort_rank(logits: &[f32], target: u32) -> u32 {
        // rank = 1-based position of the target's value in a descending sort,
        // taking the first slot among equal values
        let mut sorted = logits.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let t = logits[target as usize];
        sorted.iter().position(|&v| v == t).unwrap() as u32 + 1
    }

    #[test]
    fn rank_examples() {
        assert_eq!(token_rank(&[2.0, 1.0, 0.5, 3.0], 0), 2);
        assert_eq!(token_rank(&[2.0, 1.0, 0.5, 3.0], 3), 1);
        assert_eq!(token_rank(&[0.5; 7], 4), 1);
        let r = RankResult::from_ranks(vec![1, 7]);
        assert_eq!(r.rank, 7);
        assert!(!r.hit(5));
        assert!(r.hit(10));
        assert!(RankResult::from_ranks(vec![1]).hit(1));
    }

    #[test]
    fn change_formula_and_arrows() {
        assert_eq!(relative_change(19.5, 72.5).map(|c| (c * 10.0).round() / 10.0), Some(271.8));
        assert_eq!(relative_change(10.0, 10.0), Some(0.0));
        assert_eq!(arrow(relative_change(10.0, 5.0)), "↓");
        assert_eq!(arrow(relative_change(10.0, 10.0)), "≈");
        assert_eq!(relative_change(0.0, 3.0), None);
    }

    fn report(label: &str, mode: PromptMode, p: [f64; 3], hard: f64, soft: f64) -> EvalReport {
        EvalReport {
            label: label.into(),
            mode,
            n_vectors: None,
            dataset: DatasetId {
                name: "test".into(),
                records: 10,
                sha256: "00".into(),
            },
            examples: 10,
            skipped: 0,
            skip_reasons: BTreeMap::new(),
            downgraded: 0,
            hit_rates: DEFAULT_K
                .iter()
                .zip(p)
                .map(|(&k, percent)| HitRate {
                    k,
                    hits: (percent / 10.0) as usize,
                    percent,
                })
                .collect(),
            buckets: BTreeMap::new(),
            ledger: MeanLedger {
                hard_tokens: hard,
                soft_vectors: soft,
            },
            provenance: Provenance {
                lm_fingerprint: "x".into(),
                cf_fingerprint: None,
                table_sha256: None,
            },
        }
    }

    #[test]
    fn identical_reports_do_not_change() {
        let a = report("baseline", PromptMode::Baseline, [10.0, 20.0, 30.0], 12.0, 0.0);
        let cmp = compare_report(&[a.clone(), a]).unwrap();
        assert!(cmp.changes.iter().all(|c| c.change_percent == Some(0.0)));
    }

    #[test]
    fn token_efficiency_and_dataset_check() {
        let base = report("baseline", PromptMode::Baseline, [10.0, 20.0, 30.0], 12.0, 0.0);
        let rag = report("rag", PromptMode::Rag, [20.0, 30.0, 40.0], 92.0, 0.0);
        let cf = report("cf-1", PromptMode::Cf, [30.0, 40.0, 50.0], 12.0, 1.0);
        let cmp = compare_report(&[base.clone(), rag, cf]).unwrap();
        assert_eq!(cmp.token_efficiency, Some(92.0));
        assert_eq!(cmp.expansion_efficiency, Some(80.0));
        assert!(cmp.text().contains("Hit@10"));
        let mut other = base.clone();
        other.dataset.sha256 = "11".into();
        assert!(compare_report(&[base, other]).is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(
            logits in proptest::collection::vec(-4i32..4, 1..40),
            pick in 0usize..1000,
        ) {
            let logits: Vec<f32> = logits.into_iter().map(|v| v as f32 * 0.5).collect();
            let t = (pick % logits.len()) as u32;
            prop_assert_eq!(token_rank(&logits, t), sort_rank(&logits, t));
        }
    }
}
