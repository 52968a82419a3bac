//! The frozen language model: tokenizer, decoder forward/backward, label
//! embeddings and base pretraining.

pub mod io;
pub mod model;
pub mod tokenizer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use model::{ForwardPass, LmConfig, LmOutput, LmParams};
pub use tokenizer::{Tokenizer, BOS_ID, UNK_ID};

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{log_sum_exp, softmax_in_place, Matrix, Scalar};

/// Mean of the final hidden states over the label's tokens.
pub fn embed_label<T: Scalar>(params: &LmParams<T>, tokenizer: &Tokenizer, label: &str) -> Result<Vec<T>> {
    let ids = tokenizer.encode(label);
    if ids.is_empty() {
        return Err(Error::EmptyLabel(label.to_string()));
    }
    let out = params.forward_tokens(&ids)?;
    let n = T::of(ids.len() as f64);
    let mut mean = vec![T::zero(); params.dim()];
    for i in 0..out.hidden.rows {
        for (m, &h) in mean.iter_mut().zip(out.hidden.row(i)) {
            *m = *m + h;
        }
    }
    Ok(mean.into_iter().map(|v| v / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub sequences: usize,
    pub tokens: usize,
    pub epoch_losses: Vec<f64>,
    pub initial_perplexity: f64,
    pub final_perplexity: f64,
    pub steps: u64,
    pub fingerprint: String,
}

/// `[BOS] + encode(text)`.
pub fn encode_sequence(tokenizer: &Tokenizer, text: &str) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenizer.encode(text));
    ids
}

/// Mean next-token cross-entropy of one sequence, and optionally its
/// parameter gradient scaled by `scale`.
pub fn sequence_loss(
    params: &LmParams<f32>,
    ids: &[u32],
    grads: Option<(&mut LmParams<f32>, f32)>,
) -> Result<f64> {
    let n = ids.len() - 1;
    let x = params.embedding_rows(&ids[..n])?;
    let rows: Vec<usize> = (0..n).collect();
    let pass = params.forward_train(&x, &rows)?;
    let mut loss = 0.0f64;
    for (r, &t) in ids[1..].iter().enumerate() {
        let row = pass.logits.row(r);
        loss += (log_sum_exp(row) - row[t as usize]) as f64;
    }
    loss /= n as f64;
    if let Some((g, scale)) = grads {
        let mut dl = pass.logits.clone();
        let w = scale / n as f32;
        for (r, &t) in ids[1..].iter().enumerate() {
            let row = dl.row_mut(r);
            softmax_in_place(row);
            row[t as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v *= w);
        }
        let dx = params.backward(&pass, &dl, Some(g));
        for (i, &id) in ids[..n].iter().enumerate() {
            let dst = g.wte.row_mut(id as usize);
            for (d, &s) in dst.iter_mut().zip(dx.row(i)) {
                *d += s;
            }
        }
    }
    Ok(loss)
}

fn mean_loss(params: &LmParams<f32>, seqs: &[Vec<u32>]) -> Result<f64> {
    let losses: Vec<f64> = seqs
        .par_iter()
        .map(|s| sequence_loss(params, s, None))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Next-token pretraining from a seeded initialization. The caller decides
/// which texts are visible; the returned parameters are meant to be frozen.
pub fn pretrain_base_lm(
    config: &LmConfig,
    train: &PretrainConfig,
    tokenizer: &Tokenizer,
    texts: &[String],
    seed: u64,
) -> Result<(LmParams<f32>, PretrainReport)> {
    if texts.is_empty() {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    if tokenizer.vocab_size() > config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} entries but the LM vocabulary holds {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let seqs: Vec<Vec<u32>> = texts.iter().map(|t| encode_sequence(tokenizer, t)).collect();
    for s in &seqs {
        if s.len() > config.context + 1 {
            return Err(Error::ContextOverflow {
                required: s.len() - 1,
                actual: config.context,
            });
        }
    }
    let tokens = seqs.iter().map(|s| s.len() - 1).sum();

    let mut params = LmParams::<f32>::init(config, seed)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let decay = params.tensors().iter().map(|t| t.rows > 1).collect();
    let mut opt = AdamW::new(train.optimizer.clone(), &sizes, decay);
    let probe: Vec<Vec<u32>> = seqs.iter().take(512).cloned().collect();
    let initial = mean_loss(&params, &probe)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::new();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size.max(1)) {
            let scale = 1.0 / batch.len() as f32;
            let parts: Vec<(f64, LmParams<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = LmParams::zeros(config);
                    sequence_loss(&params, &seqs[i], Some((&mut g, scale))).map(|l| (l, g))
                })
                .collect::<Result<_>>()?;
            let mut grads = LmParams::<f32>::zeros(config);
            for (l, g) in &parts {
                if !l.is_finite() {
                    return Err(Error::Divergence(format!(
                        "pretraining epoch {epoch}: loss {l} in batch starting at sequence {}",
                        batch[0]
                    )));
                }
                total += l;
                for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.add_assign(t);
                }
            }
            opt.step(params.tensors_mut(), grads.tensors());
        }
        let mean = total / seqs.len() as f64;
        log::info!("pretrain epoch {}: loss {:.4}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::Divergence("pretrained parameters are not finite".into()));
    }
    let final_loss = mean_loss(&params, &probe)?;
    let report = PretrainReport {
        sequences: seqs.len(),
        tokens,
        epoch_losses,
        initial_perplexity: initial.exp(),
        final_perplexity: final_loss.exp(),
        steps: opt.steps(),
        fingerprint: io::fingerprint(&params),
    };
    Ok((params, report))
}

/// Embeds many labels; order of the output follows `labels`.
pub fn embed_labels(
    params: &LmParams<f32>,
    tokenizer: &Tokenizer,
    labels: &[&str],
) -> Result<Vec<Vec<f32>>> {
    labels
        .par_iter()
        .map(|l| embed_label(params, tokenizer, l))
        .collect()
}

/// Stacks equally sized vectors as matrix rows.
pub fn stack_rows<T: Scalar>(rows: &[&[T]], width: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(0, width);
    for r in rows {
        m.push_row(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Tokenizer, LmParams<f32>) {
        let corpus = ["Kalomi wore a Rensol.", "Tasvo lived in Barqui."];
        let tok = Tokenizer::build(&corpus, 40, 4).unwrap();
        let cfg = LmConfig {
            vocab_size: 40,
            dim: 16,
            layers: 1,
            heads: 2,
            context: 32,
            ff_dim: 32,
        };
        (tok, LmParams::init(&cfg, 9).unwrap())
    }

    #[test]
    fn single_token_label_is_its_hidden_state() {
        let (tok, p) = setup();
        let ids = tok.encode("K");
        assert_eq!(ids.len(), 1);
        let e = embed_label(&p, &tok, "K").unwrap();
        assert_eq!(e, p.forward_tokens(&ids).unwrap().hidden.row(0).to_vec());
    }

    #[test]
    fn multi_token_label_is_mean_of_hidden_states() {
        let (tok, p) = setup();
        let ids = tok.encode("Kalomi");
        assert!(ids.len() >= 2);
        let hidden = p.forward_tokens(&ids).unwrap().hidden;
        let e = embed_label(&p, &tok, "Kalomi").unwrap();
        for j in 0..16 {
            let col: f64 = (0..hidden.rows).map(|i| hidden.get(i, j) as f64).sum();
            assert!((e[j] as f64 - col / hidden.rows as f64).abs() < 1e-6);
        }
        assert_eq!(e, embed_label(&p, &tok, "Kalomi").unwrap());
    }

    #[test]
    fn empty_label_rejected() {
        let (tok, p) = setup();
        assert!(matches!(embed_label(&p, &tok, ""), Err(Error::EmptyLabel(_))));
    }

    #[test]
    fn pretraining_reduces_perplexity() {
        let texts: Vec<String> = (0..24)
            .map(|i| if i % 2 == 0 { "Kalomi wore a Rensol.".into() } else { "Tasvo lived in Barqui.".into() })
            .collect();
        let tok = Tokenizer::build(&texts, 40, 4).unwrap();
        let cfg = LmConfig {
            vocab_size: 40,
            dim: 16,
            layers: 1,
            heads: 2,
            context: 32,
            ff_dim: 32,
        };
        let train = PretrainConfig {
            epochs: 5,
            batch_size: 4,
            optimizer: AdamWConfig { lr: 1e-2, ..AdamWConfig::default() },
        };
        let (p, report) = pretrain_base_lm(&cfg, &train, &tok, &texts, 1).unwrap();
        assert!(report.final_perplexity < report.initial_perplexity);
        assert_eq!(report.fingerprint, io::fingerprint(&p));
        let (p2, report2) = pretrain_base_lm(&cfg, &train, &tok, &texts, 1).unwrap();
        assert_eq!(p, p2);
        assert_eq!(report, report2);
    }

    #[test]
    fn pretraining_rejects_overlong_text() {
        let (tok, p) = setup();
        let long = vec!["Kalomi wore a Rensol. ".repeat(10)];
        let train = PretrainConfig::default();
        assert!(matches!(
            pretrain_base_lm(&p.config, &train, &tok, &long, 1),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
