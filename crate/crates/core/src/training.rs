//! Two-stage optimization of ConceptFormer weights through the frozen LM.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conceptformer::{self, ConceptFormerParams, EmbeddedSubgraph};
use crate::corpus::Bite;
use crate::error::{Error, Result};
use crate::graph_store::StarGraphs;
use crate::optim::{AdamW, AdamWConfig};
use crate::prompting::{embed_subgraph, injection_skeleton, AssembledPrompt, LabelEmbeddings};
use crate::tensor::{log_sum_exp, softmax_in_place, Matrix};
use crate::toy_lm::{io as lm_io, LmParams, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Neighbors fed to the generator, highest pagerank first.
    pub top_m: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            max_epochs: 10,
            patience: 1,
            seed: 0,
            top_m: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.top_m == 0 {
            return Err(Error::Config("patience, batch_size and top_m must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `targets` under `logits` (one row per target) and
/// its gradient with respect to the logits.
pub fn target_cross_entropy(logits: &Matrix<f32>, targets: &[u32]) -> (f64, Matrix<f32>) {
    assert_eq!(logits.rows, targets.len());
    let t = targets.len() as f32;
    let mut loss = 0.0f64;
    let mut grad = logits.clone();
    for (r, &id) in targets.iter().enumerate() {
        let row = logits.row(r);
        loss += (log_sum_exp(row) - row[id as usize]) as f64;
        let g = grad.row_mut(r);
        softmax_in_place(g);
        g[id as usize] -= 1.0;
        g.iter_mut().for_each(|v| *v /= t);
    }
    (loss / targets.len() as f64, grad)
}

/// Teacher-forced object loss and its gradient with respect to the soft
/// vectors (when the prompt has any).
pub fn object_loss(lm: &LmParams<f32>, prompt: &AssembledPrompt) -> Result<(f64, Option<Matrix<f32>>)> {
    let x = prompt.input_rows(lm)?;
    let rows = prompt.target_rows();
    if prompt.soft.is_none() {
        let out = lm.forward_train(&x, &rows)?;
        return Ok((target_cross_entropy(&out.logits, &prompt.targets).0, None));
    }
    let pass = lm.forward_train(&x, &rows)?;
    let (loss, dl) = target_cross_entropy(&pass.logits, &prompt.targets);
    let dx = lm.backward(&pass, &dl, None);
    let d_soft = dx.slice_rows(prompt.insert_at, prompt.insert_at + prompt.soft_count());
    Ok((loss, Some(d_soft)))
}

/// A prompt skeleton paired with the subgraph that fills it.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub index: usize,
    pub prompt: AssembledPrompt,
    pub subgraph: EmbeddedSubgraph<f32>,
}

/// Prompt skeletons for every usable bite; the rest are counted by reason.
pub fn prepare_examples(
    bites: &[Bite],
    stars: &StarGraphs,
    labels: &LabelEmbeddings,
    tokenizer: &Tokenizer,
    context: usize,
    n: usize,
    top_m: usize,
) -> Result<(Vec<TrainExample>, BTreeMap<String, usize>)> {
    let mut out = Vec::with_capacity(bites.len());
    let mut skips = BTreeMap::new();
    for (index, bite) in bites.iter().enumerate() {
        let Some(star) = stars.get(&bite.subject.qid) else {
            *skips.entry("missing_star".to_string()).or_insert(0) += 1;
            continue;
        };
        let Some(subgraph) = embed_subgraph(star, labels, top_m)? else {
            *skips.entry("isolated".to_string()).or_insert(0) += 1;
            continue;
        };
        match injection_skeleton(bite, tokenizer, context, n) {
            Ok(prompt) => out.push(TrainExample {
                index,
                prompt,
                subgraph,
            }),
            Err(reason) => *skips.entry(reason.name().to_string()).or_insert(0) += 1,
        }
    }
    Ok((out, skips))
}

/// Loss of one example; accumulates `scale`-weighted gradients when asked.
pub fn example_loss(
    cf: &ConceptFormerParams<f32>,
    lm: &LmParams<f32>,
    ex: &TrainExample,
    grads: Option<(&mut ConceptFormerParams<f32>, f32)>,
) -> Result<f64> {
    let vectors = cf.forward(&ex.subgraph)?.vectors;
    let mut prompt = ex.prompt.clone();
    prompt.soft = Some(vectors);
    let (loss, d_soft) = object_loss(lm, &prompt)?;
    if let Some((acc, scale)) = grads {
        let mut up = d_soft.expect("prompt carries soft vectors");
        up.data.iter_mut().for_each(|v| *v *= scale);
        let g = cf.gradients(&ex.subgraph, &up)?;
        for (a, t) in acc.tensors_mut().into_iter().zip(g.params.tensors()) {
            a.add_assign(t);
        }
    }
    Ok(loss)
}

/// Mean example loss.
pub fn mean_loss(cf: &ConceptFormerParams<f32>, lm: &LmParams<f32>, examples: &[TrainExample]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| example_loss(cf, lm, ex, None))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub cf_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub n: usize,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub skipped: BTreeMap<String, usize>,
    pub initial_train_loss: f64,
    pub initial_validation_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stop_reason: StopReason,
    pub lm_fingerprint_before: String,
    pub lm_fingerprint_after: String,
    pub cf_fingerprint: String,
    pub config: TrainConfig,
}

/// Patience-based early stopping on validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub best: f64,
    pub best_epoch: usize,
    patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    /// `initial` is the loss before any update, counted as epoch 0.
    pub fn new(initial: f64, patience: usize) -> Self {
        Self {
            best: initial,
            best_epoch: 0,
            patience,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            Verdict::Improved
        } else if epoch - self.best_epoch >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

/// One training stage. Returns the parameters of the best validation epoch
/// (the starting point counts as epoch 0).
pub fn train_stage(
    stage: u8,
    mut cf: ConceptFormerParams<f32>,
    lm: &LmParams<f32>,
    train: &[TrainExample],
    validation: &[TrainExample],
    skipped: BTreeMap<String, usize>,
    config: &TrainConfig,
) -> Result<(ConceptFormerParams<f32>, StageReport)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Invalid(format!("stage {stage}: empty train or validation set")));
    }
    let lm_before = lm_io::fingerprint(lm);
    let sizes: Vec<usize> = cf.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(config.optimizer.clone(), &sizes, vec![true; sizes.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial_train = mean_loss(&cf, lm, train)?;
    let initial_val = mean_loss(&cf, lm, validation)?;
    log::info!("stage {stage} n={}: initial train {initial_train:.4} validation {initial_val:.4}", cf.n());
    let mut stopper = EarlyStopper::new(initial_val, config.patience);
    let mut best_cf = cf.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let parts: Vec<(f64, ConceptFormerParams<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = cf.zeros_like();
                    example_loss(&cf, lm, &train[i], Some((&mut g, scale))).map(|l| (l, g))
                })
                .collect::<Result<_>>()?;
            let mut grads = cf.zeros_like();
            for (l, g) in &parts {
                total += l;
                for (a, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    a.add_assign(t);
                }
            }
            if parts.iter().any(|(l, _)| !l.is_finite()) || !grads.is_finite() {
                let ids: Vec<usize> = batch.iter().map(|&i| train[i].index).collect();
                return Err(Error::Divergence(format!(
                    "stage {stage} epoch {epoch}: non-finite loss or gradient in batch of bites {ids:?}"
                )));
            }
            opt.step(cf.tensors_mut(), grads.tensors());
        }
        let train_loss = total / train.len() as f64;
        let validation_loss = mean_loss(&cf, lm, validation)?;
        if !validation_loss.is_finite() {
            return Err(Error::Divergence(format!("stage {stage} epoch {epoch}: validation loss {validation_loss}")));
        }
        log::info!("stage {stage} n={} epoch {epoch}: train {train_loss:.4} validation {validation_loss:.4}", cf.n());
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            validation_loss,
            cf_fingerprint: conceptformer::fingerprint(&cf),
        });
        match stopper.observe(epoch, validation_loss) {
            Verdict::Improved => best_cf = cf.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let lm_after = lm_io::fingerprint(lm);
    if lm_after != lm_before {
        return Err(Error::Fingerprint {
            what: "frozen LM".into(),
            expected: lm_before,
            found: lm_after,
        });
    }
    let report = StageReport {
        stage,
        n: best_cf.n(),
        train_examples: train.len(),
        validation_examples: validation.len(),
        skipped,
        initial_train_loss: initial_train,
        initial_validation_loss: initial_val,
        epochs,
        best_epoch: stopper.best_epoch,
        best_validation_loss: stopper.best,
        stop_reason,
        lm_fingerprint_before: lm_before,
        lm_fingerprint_after: lm_after,
        cf_fingerprint: conceptformer::fingerprint(&best_cf),
        config: config.clone(),
    };
    Ok((best_cf, report))
}

/// Bites of one rendering stage, split by subject.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a [Bite],
    pub validation: &'a [Bite],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub n: usize,
    pub skipped_stage1: bool,
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
}

/// Everything a stage needs besides its data.
pub struct TrainContext<'a> {
    pub lm: &'a LmParams<f32>,
    pub tokenizer: &'a Tokenizer,
    pub stars: &'a StarGraphs,
    pub labels: &'a LabelEmbeddings,
}

impl TrainContext<'_> {
    pub fn run_stage(
        &self,
        stage: u8,
        cf: ConceptFormerParams<f32>,
        data: StageData<'_>,
        config: &TrainConfig,
    ) -> Result<(ConceptFormerParams<f32>, StageReport)> {
        let context = self.lm.config.context;
        let n = cf.n();
        let (train, mut skipped) =
            prepare_examples(data.train, self.stars, self.labels, self.tokenizer, context, n, config.top_m)?;
        let (validation, vskip) =
            prepare_examples(data.validation, self.stars, self.labels, self.tokenizer, context, n, config.top_m)?;
        for (k, v) in vskip {
            *skipped.entry(k).or_insert(0) += v;
        }
        train_stage(stage, cf, self.lm, &train, &validation, skipped, config)
    }

    /// Stage 1 on triple-style bites, then stage 2 from its result on
    /// contextual bites.
    pub fn run_two_stage(
        &self,
        init: ConceptFormerParams<f32>,
        stage1: Option<(StageData<'_>, &TrainConfig)>,
        stage2: (StageData<'_>, &TrainConfig),
    ) -> Result<(ConceptFormerParams<f32>, TwoStageReport)> {
        let n = init.n();
        let (cf, report1) = match stage1 {
            Some((data, cfg)) => {
                let (cf, r) = self.run_stage(1, init, data, cfg)?;
                (cf, Some(r))
            }
            None => (init, None),
        };
        let (cf, report2) = self.run_stage(2, cf, stage2.0, stage2.1)?;
        Ok((
            cf,
            TwoStageReport {
                n,
                skipped_stage1: report1.is_none(),
                stage1: report1,
                stage2: report2,
            },
        ))
    }
}

pub fn checkpoint_path(dir: impl AsRef<Path>, n: usize, stage: u8) -> PathBuf {
    dir.as_ref().join(format!("cf_n{n}_stage{stage}.cfp1"))
}

/// Writes the checkpoint and its JSON sidecar; returns the fingerprint.
pub fn save_checkpoint<S: Serialize>(
    dir: impl AsRef<Path>,
    cf: &ConceptFormerParams<f32>,
    stage: u8,
    sidecar: &S,
) -> Result<String> {
    let path = checkpoint_path(&dir, cf.n(), stage);
    let fp = conceptformer::save(cf, &path)?;
    let side = path.with_extension("json");
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(fp)
}
