//! Evaluation metrics: word error rate for gloss recognition, corpus BLEU
//! and ROUGE-L for the text tasks.
//!
//! Text metrics treat whitespace tokens as the unit; nothing is re-tokenized.
//! BLEU is corpus-level and unsmoothed, so a missing n-gram order zeroes the
//! score. ROUGE-L is the mean per-sentence F1 (β = 1).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the four evaluation tasks a report describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "sign2gloss")]
    Sign2Gloss,
    #[serde(rename = "gloss2text")]
    Gloss2Text,
    #[serde(rename = "sign2gloss2text")]
    Sign2Gloss2Text,
    #[serde(rename = "sign2text")]
    Sign2Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Test,
}

/// How predictions were decoded: the CTC width chosen by the dev sweep with
/// the per-width dev WERs, or the text beam settings.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeInfo {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctc_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer_by_width: Option<std::collections::BTreeMap<usize, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_penalty: Option<f64>,
}

/// Metric summary for one task on one split. Gloss recognition reports WER;
/// the text tasks report BLEU-1..4 and ROUGE-L, all on a 0–100 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: Split,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeInfo>,
}

impl EvalReport {
    pub fn sign2gloss(split: Split, n_samples: usize, wer: f64) -> Self {
        EvalReport {
            task: Task::Sign2Gloss,
            split,
            n_samples,
            wer: Some(wer),
            bleu: None,
            rouge: None,
            decode: None,
        }
    }

    pub fn text_task(
        task: Task,
        split: Split,
        n_samples: usize,
        bleu: [f64; 4],
        rouge: f64,
    ) -> Result<Self> {
        if task == Task::Sign2Gloss {
            return Err(Error::InvalidArgument(
                "sign2gloss reports WER, not BLEU/ROUGE".to_string(),
            ));
        }
        Ok(EvalReport {
            task,
            split,
            n_samples,
            wer: None,
            bleu: Some(bleu),
            rouge: Some(rouge),
            decode: None,
        })
    }
}

/// Levenshtein distance in token edit operations (substitution, deletion,
/// insertion all cost 1).
pub fn edit_ops<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let (m, n) = (hyp.len(), reference.len());
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Edit operations over reference length; can exceed 1.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Corpus("WER reference is empty".to_string()));
    }
    Ok(edit_ops(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus WER: total edit operations over total reference length.
pub fn corpus_wer<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Corpus(format!(
            "corpus size mismatch: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let total_ref: usize = refs.iter().map(Vec::len).sum();
    if total_ref == 0 {
        return Err(Error::Corpus("WER references are empty".to_string()));
    }
    let total_ops: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| edit_ops(h, r))
        .sum();
    Ok(total_ops as f64 / total_ref as f64)
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn check_corpus_sizes(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Corpus(format!(
            "corpus size mismatch: {hyps} hypotheses vs {refs} references"
        )));
    }
    if hyps == 0 {
        return Err(Error::Corpus("empty corpus".to_string()));
    }
    Ok(())
}

fn ngram_counts<'a>(toks: &'a [&'a str], k: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= k {
        for i in 0..=toks.len() - k {
            *counts.entry(&toks[i..i + k]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n on a 0–100 scale: geometric mean of the modified k-gram
/// precisions for k = 1..=n with a brevity penalty, single reference per
/// hypothesis, no smoothing.
pub fn bleu_n<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "BLEU order must be 1..=4, got {n}"
        )));
    }
    check_corpus_sizes(hyps.len(), refs.len())?;
    let hyp_tokens: Vec<Vec<&str>> = hyps.iter().map(|s| tokens(s.as_ref())).collect();
    let ref_tokens: Vec<Vec<&str>> = refs.iter().map(|s| tokens(s.as_ref())).collect();
    let hyp_len: usize = hyp_tokens.iter().map(Vec::len).sum();
    let ref_len: usize = ref_tokens.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyp_tokens.iter().zip(&ref_tokens) {
            let ref_counts = ngram_counts(r, k);
            for (gram, count) in ngram_counts(h, k) {
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision_sum / n as f64).exp())
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Mean per-sentence ROUGE-L F1 (β = 1) on a 0–100 scale.
pub fn rouge_l<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_corpus_sizes(hyps.len(), refs.len())?;
    let mut sum = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let ht = tokens(h.as_ref());
        let rt = tokens(r.as_ref());
        sum += if ht.is_empty() && rt.is_empty() {
            1.0
        } else {
            let lcs = lcs_len(&ht, &rt) as f64;
            if lcs == 0.0 {
                0.0
            } else {
                let p = lcs / ht.len() as f64;
                let r = lcs / rt.len() as f64;
                2.0 * p * r / (p + r)
            }
        };
    }
    Ok(100.0 * sum / hyps.len() as f64)
}
