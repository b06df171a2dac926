//! Evaluation: masked perplexity over corpora, per-sentence perplexity
//! comparison between a baseline and a thinking-token model, ranking by
//! improvement, and per-word probability dumps.
//!
//! Dataset-level scoring treats every stream token as a prediction target;
//! the first prediction is conditioned on an `<eos>` context token, so a
//! raw split of L tokens contributes exactly L scorable positions.
//! Per-sentence scoring instead uses the first word as pure context
//! (targets are positions 1..L, `<eos>` included) and resets the hidden
//! state for every sentence.

use rayon::prelude::*;

use crate::corpus::{encode, RawCorpus, TokenStream, Vocabulary, EOS_ID, UNK_ID, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::inject::{inject, ThinkingTokenConfig};
use crate::model::{forward_step, log_norm, HiddenState, ModelParams};

/// Dataset-level perplexity with excluded-target accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset_name: String,
    pub model_name: String,
    pub perplexity: f64,
    pub tokens_counted: usize,
    pub tokens_excluded: usize,
}

/// One sentence scored under both models over the same real-word target
/// positions.
#[derive(Debug, Clone)]
pub struct SentenceScore {
    pub sentence: Vec<String>,
    pub ppl_base: f64,
    pub ppl_tt: f64,
    /// ppl_base − ppl_tt; positive means the thinking-token model scores
    /// the sentence better.
    pub delta: f64,
    pub tokens_counted: usize,
}

impl SentenceScore {
    pub fn text(&self) -> String {
        self.sentence.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct WordProbRecord {
    pub word: String,
    pub p_base: f64,
    pub p_tt: f64,
    /// The word was out of vocabulary and scored as `<unk>`.
    pub oov: bool,
}

/// Single-lane sequential pass: predict each target from the carried
/// state, skipping (but still consuming) targets equal to `exclude`.
/// Returns (total nll, counted, excluded).
fn score_targets(
    params: &ModelParams,
    first_input: u32,
    targets: &[u32],
    exclude: Option<u32>,
) -> Result<(f64, usize, usize)> {
    let mut state = HiddenState::zeros(1, params.dims.hidden);
    let mut prev = first_input;
    let mut total_nll = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for &target in targets {
        let (logits, next, _) = forward_step(params, &state, &[prev])?;
        if Some(target) == exclude {
            excluded += 1;
        } else {
            if target as usize >= params.dims.vocab {
                return Err(Error::IdOutOfRange { id: target, vocab: params.dims.vocab });
            }
            let row = logits.row(0);
            let (log_z, m) = log_norm(row);
            total_nll += log_z + m - row[target as usize];
            counted += 1;
        }
        state = next;
        prev = target;
    }
    Ok((total_nll, counted, excluded))
}

/// Like [`score_targets`] but returns the probability assigned to every
/// target position.
fn per_target_probs(params: &ModelParams, first_input: u32, targets: &[u32]) -> Result<Vec<f64>> {
    let mut state = HiddenState::zeros(1, params.dims.hidden);
    let mut prev = first_input;
    let mut probs = Vec::with_capacity(targets.len());
    for &target in targets {
        if target as usize >= params.dims.vocab {
            return Err(Error::IdOutOfRange { id: target, vocab: params.dims.vocab });
        }
        let (logits, next, _) = forward_step(params, &state, &[prev])?;
        let row = logits.row(0);
        let (log_z, m) = log_norm(row);
        probs.push((row[target as usize] - m - log_z).exp());
        state = next;
        prev = target;
    }
    Ok(probs)
}

/// Perplexity of `stream` with one lane and full state carry. NLL is
/// summed only at positions whose target is not `exclude_target`;
/// perplexity is exp of the mean NLL in nats.
pub fn masked_perplexity(
    params: &ModelParams,
    stream: &TokenStream,
    exclude_target: Option<u32>,
    model_name: &str,
) -> Result<EvalReport> {
    let (total_nll, counted, excluded) = score_targets(params, EOS_ID, &stream.ids, exclude_target)?;
    if counted == 0 {
        return Err(Error::NoScorablePositions);
    }
    Ok(EvalReport {
        dataset_name: stream.source_name.clone(),
        model_name: model_name.to_string(),
        perplexity: (total_nll / counted as f64).exp(),
        tokens_counted: counted,
        tokens_excluded: excluded,
    })
}

fn encode_sentence(words: &[String], vocab: &Vocabulary) -> Vec<u32> {
    let raw = RawCorpus { tokens: words.to_vec(), source_name: String::new() };
    let mut ids = encode(&raw, vocab).ids;
    ids.push(EOS_ID);
    ids
}

/// Score each sentence standalone under both models: the baseline on the
/// raw encoding, the thinking-token model on the injected encoding with
/// `<T>` targets masked. Both perplexities cover the same real-word target
/// positions. Sentences are scored in parallel (they are independent and
/// the state resets per sentence); output order matches input order.
/// Empty sentences are skipped.
pub fn sentence_perplexities(
    params_base: &ModelParams,
    params_tt: &ModelParams,
    sentences: &[Vec<String>],
    vocab: &Vocabulary,
    cfg: ThinkingTokenConfig,
) -> Result<Vec<SentenceScore>> {
    let scores: Result<Vec<Option<SentenceScore>>> = sentences
        .par_iter()
        .map(|words| {
            if words.is_empty() {
                return Ok(None);
            }
            let ids = encode_sentence(words, vocab);
            let (nll_base, counted_base, _) = score_targets(params_base, ids[0], &ids[1..], None)?;

            let raw = TokenStream { ids, source_name: String::new() };
            let inj = inject(&raw, cfg)?;
            let (nll_tt, counted_tt, _) =
                score_targets(params_tt, inj.ids[0], &inj.ids[1..], Some(cfg.thinking_id))?;
            debug_assert_eq!(counted_base, counted_tt);

            let ppl_base = (nll_base / counted_base as f64).exp();
            let ppl_tt = (nll_tt / counted_tt as f64).exp();
            Ok(Some(SentenceScore {
                sentence: words.clone(),
                ppl_base,
                ppl_tt,
                delta: ppl_base - ppl_tt,
                tokens_counted: counted_base,
            }))
        })
        .collect();
    Ok(scores?.into_iter().flatten().collect())
}

/// Sort by descending delta, ties broken by ascending sentence text, and
/// keep the first `top_k`.
pub fn rank_by_improvement(scores: &[SentenceScore], top_k: usize) -> Vec<SentenceScore> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.delta.total_cmp(&a.delta).then_with(|| a.text().cmp(&b.text()))
    });
    ranked.truncate(top_k);
    ranked
}

/// Probability of each real word given its preceding context, under both
/// models. The first word is context only; `<T>` and `<eos>` positions are
/// never emitted. Out-of-vocabulary words are scored as `<unk>` and
/// flagged.
pub fn word_probabilities(
    params_base: &ModelParams,
    params_tt: &ModelParams,
    words: &[String],
    vocab: &Vocabulary,
    cfg: ThinkingTokenConfig,
) -> Result<Vec<WordProbRecord>> {
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let ids = encode_sentence(words, vocab);
    let base_probs = per_target_probs(params_base, ids[0], &ids[1..])?;

    let raw = TokenStream { ids: ids.clone(), source_name: String::new() };
    let inj = inject(&raw, cfg)?;
    let tt_all = per_target_probs(params_tt, inj.ids[0], &inj.ids[1..])?;
    let tt_real: Vec<f64> = inj.ids[1..]
        .iter()
        .zip(&tt_all)
        .filter(|(&id, _)| id != cfg.thinking_id)
        .map(|(_, &p)| p)
        .collect();
    debug_assert_eq!(tt_real.len(), base_probs.len());

    // targets are words[1..] followed by <eos>; records stop before <eos>
    let mut records = Vec::with_capacity(words.len().saturating_sub(1));
    for (t, word) in words.iter().enumerate().skip(1) {
        records.push(WordProbRecord {
            word: word.clone(),
            p_base: base_probs[t - 1],
            p_tt: tt_real[t - 1],
            oov: ids[t] == UNK_ID && word != UNK_TOKEN,
        });
    }
    Ok(records)
}
