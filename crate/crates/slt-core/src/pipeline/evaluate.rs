//! Task evaluation on the held-out splits. Where the recipe calls for a
//! sweep, the dev split picks the decoding setting and the test split is
//! what gets reported, with the choice logged in the report.

use std::collections::BTreeMap;

use crate::ctc::CtcDecode;
use crate::data::Corpus;
use crate::error::Result;
use crate::mapper::Mapper;
use crate::metrics::{bleu_n, rouge_l, DecodeInfo, EvalReport, Split, Task};
use crate::translation::{gloss2text_predict, Translator};
use crate::visual::VisualEncoder;

use super::train::{sign2text_translate, split_wer};
use super::PipelineModel;

/// Decode settings for the text tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam_width: usize,
    pub length_penalty: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { beam_width: 4, length_penalty: 1.0 }
    }
}

/// Sweeps the CTC beam width 1..=10 on dev and returns the best width
/// (smallest on ties) with the per-width WER table.
fn select_ctc_width(
    enc: &VisualEncoder,
    model: &PipelineModel,
    corpus: &Corpus,
) -> Result<(usize, BTreeMap<usize, f64>)> {
    let vocab = model.gloss_vocab.as_ref().expect("caller checked");
    let mut by_width = BTreeMap::new();
    let mut best = (1usize, f64::INFINITY);
    for width in 1..=10 {
        let wer = split_wer(enc, &model.params, vocab, &corpus.dev, CtcDecode::Beam(width))?;
        by_width.insert(width, wer);
        if wer < best.1 {
            best = (width, wer);
        }
    }
    Ok((best.0, by_width))
}

fn text_report(
    task: Task,
    hyps: &[String],
    refs: &[&str],
    decode: DecodeInfo,
) -> Result<EvalReport> {
    let bleu = [
        bleu_n(hyps, refs, 1)?,
        bleu_n(hyps, refs, 2)?,
        bleu_n(hyps, refs, 3)?,
        bleu_n(hyps, refs, 4)?,
    ];
    let rouge = rouge_l(hyps, refs)?;
    let mut report = EvalReport::text_task(task, Split::Test, refs.len(), bleu, rouge)?;
    report.decode = Some(decode);
    Ok(report)
}

/// Runs one task over the corpus's test split and reports its metrics.
/// Fails with a checkpoint error naming the first missing sub-model.
pub fn evaluate(
    model: &PipelineModel,
    corpus: &Corpus,
    task: Task,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    match task {
        Task::Sign2Gloss => {
            let vocab = model.require_visual()?;
            let enc = VisualEncoder::new(model.visual_cfg.clone())?;
            let (width, by_width) = select_ctc_width(&enc, model, corpus)?;
            let wer = split_wer(
                &enc,
                &model.params,
                vocab,
                &corpus.test,
                CtcDecode::Beam(width),
            )?;
            let mut report = EvalReport::sign2gloss(Split::Test, corpus.test.len(), wer);
            report.decode = Some(DecodeInfo {
                ctc_width: Some(width),
                dev_wer_by_width: Some(by_width),
                beam_width: None,
                length_penalty: None,
            });
            Ok(report)
        }
        Task::Gloss2Text => {
            let (src_vocab, tgt_vocab) = model.require_translation()?;
            let translator = Translator::new(model.translation_cfg.clone())?;
            let mut hyps = Vec::with_capacity(corpus.test.len());
            for t in &corpus.test {
                hyps.push(gloss2text_predict(
                    &translator,
                    &model.params,
                    src_vocab,
                    tgt_vocab,
                    &t.gloss.join(" "),
                    &model.lang,
                    opts.beam_width,
                    opts.length_penalty,
                )?);
            }
            let refs: Vec<&str> = corpus.test.iter().map(|t| t.text.as_str()).collect();
            text_report(
                task,
                &hyps,
                &refs,
                DecodeInfo {
                    beam_width: Some(opts.beam_width),
                    length_penalty: Some(opts.length_penalty),
                    ..DecodeInfo::default()
                },
            )
        }
        Task::Sign2Gloss2Text => {
            let vocab = model.require_visual()?;
            let (src_vocab, tgt_vocab) = model.require_translation()?;
            let enc = VisualEncoder::new(model.visual_cfg.clone())?;
            let translator = Translator::new(model.translation_cfg.clone())?;
            let (width, by_width) = select_ctc_width(&enc, model, corpus)?;
            let mut hyps = Vec::with_capacity(corpus.test.len());
            for t in &corpus.test {
                let ids =
                    enc.sign2gloss_predict(&model.params, &t.features, CtcDecode::Beam(width))?;
                let gloss_line = vocab.decode(&ids)?;
                hyps.push(gloss2text_predict(
                    &translator,
                    &model.params,
                    src_vocab,
                    tgt_vocab,
                    &gloss_line,
                    &model.lang,
                    opts.beam_width,
                    opts.length_penalty,
                )?);
            }
            let refs: Vec<&str> = corpus.test.iter().map(|t| t.text.as_str()).collect();
            text_report(
                task,
                &hyps,
                &refs,
                DecodeInfo {
                    ctc_width: Some(width),
                    dev_wer_by_width: Some(by_width),
                    beam_width: Some(opts.beam_width),
                    length_penalty: Some(opts.length_penalty),
                },
            )
        }
        Task::Sign2Text => {
            model.require_visual()?;
            let mapper_cfg = model.require_mapper()?;
            let (src_vocab, tgt_vocab) = model.require_translation()?;
            let enc = VisualEncoder::new(model.visual_cfg.clone())?;
            let mapper = Mapper::new(mapper_cfg.clone());
            let translator = Translator::new(model.translation_cfg.clone())?;
            let src_lang = src_vocab.lang_id(&model.lang)?;
            let tgt_lang = tgt_vocab.lang_id(&model.lang)?;
            let mut hyps = Vec::with_capacity(corpus.test.len());
            for t in &corpus.test {
                hyps.push(sign2text_translate(
                    &enc,
                    &mapper,
                    &translator,
                    &model.params,
                    src_lang,
                    tgt_lang,
                    tgt_vocab,
                    &t.features,
                    opts.beam_width,
                    opts.length_penalty,
                )?);
            }
            let refs: Vec<&str> = corpus.test.iter().map(|t| t.text.as_str()).collect();
            text_report(
                task,
                &hyps,
                &refs,
                DecodeInfo {
                    beam_width: Some(opts.beam_width),
                    length_penalty: Some(opts.length_penalty),
                    ..DecodeInfo::default()
                },
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::GlossVocab;
    use crate::data::{gloss_to_text, Triplet, VideoFeatures};
    use crate::error::Error;
    use crate::numerics::{ParamStore, Tensor};
    use crate::rng::derive_rng;
    use crate::translation::{TextVocab, TranslationConfig};
    use crate::visual::VisualEncoderConfig;

    // width 4 everywhere: 3 glosses plus the blank channel
    const D: usize = 4;

    /// Kernel whose center tap passes each channel through unchanged.
    fn center_tap_identity() -> Tensor {
        let mut w = Tensor::zeros(&[3, D, D]);
        for c in 0..D {
            w.data_mut()[(D + c) * D + c] = 1.0;
        }
        w
    }

    fn scaled_eye(scale: f64) -> Tensor {
        let mut w = Tensor::zeros(&[D, D]);
        for c in 0..D {
            w.row_mut(c)[c] = scale;
        }
        w
    }

    fn bn_identity(store: &mut ParamStore, prefix: &str) {
        store.insert(&format!("{prefix}.gamma"), Tensor::ones(&[D]), true);
        store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[D]), true);
        store.insert(&format!("{prefix}.mean"), Tensor::zeros(&[D]), false);
        store.insert(&format!("{prefix}.var"), Tensor::ones(&[D]), false);
    }

    /// Hand-built encoder that routes one-hot gloss channels straight to the
    /// classifier: with stride-2 center-tap kernels, downsampled frame i
    /// reads input frame 4i, so 4-frame segments survive as single frames.
    fn oracle_visual() -> (VisualEncoderConfig, ParamStore) {
        let cfg = VisualEncoderConfig {
            input_dim: D,
            backbone_dim: D,
            repr_dim: D,
            vocab_size: D - 1,
            backbone_blocks: 2,
            freeze_backbone: false,
        };
        let mut store = ParamStore::new();
        for b in 0..2 {
            store.insert(
                &format!("visual.backbone.block{b}.conv.w"),
                center_tap_identity(),
                true,
            );
            bn_identity(&mut store, &format!("visual.backbone.block{b}.bn"));
        }
        store.insert("visual.head.proj.w", scaled_eye(1.0), true);
        bn_identity(&mut store, "visual.head.proj.bn");
        for t in 0..2 {
            store.insert(&format!("visual.head.tconv{t}.w"), center_tap_identity(), true);
            store.insert(&format!("visual.head.tconv{t}.b"), Tensor::zeros(&[D]), true);
        }
        store.insert("visual.head.out.w", scaled_eye(1.0), true);
        store.insert("visual.head.out.b", Tensor::zeros(&[D]), true);
        store.insert("visual.classify.w", scaled_eye(10.0), true);
        store.insert("visual.classify.b", Tensor::zeros(&[D]), true);
        (cfg, store)
    }

    fn oracle_gloss_vocab() -> GlossVocab {
        GlossVocab::new(vec!["a".to_string(), "b".to_string(), "c".to_string()]).unwrap()
    }

    /// 4 one-hot frames per gloss; the hot channel is the gloss id.
    fn clip(vocab: &GlossVocab, line: &str) -> Triplet {
        let gloss: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        let ids = vocab.encode(line).unwrap();
        let mut values = Tensor::zeros(&[4 * ids.len(), D]);
        for (pos, &id) in ids.iter().enumerate() {
            for f in 0..4 {
                values.row_mut(pos * 4 + f)[id] = 1.0;
            }
        }
        Triplet {
            id: line.replace(' ', "-"),
            features: VideoFeatures::new(values).unwrap(),
            gloss: gloss.clone(),
            text: gloss_to_text(&gloss),
        }
    }

    /// Sequences avoid adjacent repeats so the CTC collapse is lossless at
    /// one frame per gloss.
    fn oracle_corpus() -> Corpus {
        let vocab = oracle_gloss_vocab();
        let mk = |lines: &[&str]| lines.iter().map(|l| clip(&vocab, l)).collect();
        Corpus {
            train: mk(&["a b", "b c"]),
            dev: mk(&["a b c", "c a"]),
            test: mk(&["b a", "c a b", "a c"]),
        }
    }

    fn visual_only_model() -> PipelineModel {
        let (cfg, store) = oracle_visual();
        PipelineModel {
            params: store,
            visual_cfg: cfg,
            translation_cfg: TranslationConfig::default(),
            mapper_cfg: None,
            gloss_vocab: Some(oracle_gloss_vocab()),
            src_vocab: None,
            tgt_vocab: None,
            lang: "de_DE".to_string(),
            stages: vec!["pretrain_visual".to_string()],
        }
    }

    fn translation_only_model() -> PipelineModel {
        let corpus = oracle_corpus();
        let tcfg = TranslationConfig {
            layers_enc: 1,
            layers_dec: 1,
            d_model: 8,
            heads: 2,
            dropout: 0.0,
            label_smoothing: 0.1,
            max_len: 16,
        };
        let gloss_lines: Vec<String> = corpus.train.iter().map(|t| t.gloss.join(" ")).collect();
        let src_vocab =
            TextVocab::build(gloss_lines.iter().map(String::as_str), &["de_DE"]).unwrap();
        let tgt_vocab = TextVocab::build(
            corpus.train.iter().map(|t| t.text.as_str()),
            &["de_DE"],
        )
        .unwrap();
        let translator = Translator::new(tcfg.clone()).unwrap();
        let mut store = ParamStore::new();
        translator.init_params(
            &mut store,
            &mut derive_rng(5, "eval/translation"),
            src_vocab.size(),
            tgt_vocab.size(),
        );
        PipelineModel {
            params: store,
            visual_cfg: VisualEncoderConfig::default(),
            translation_cfg: tcfg,
            mapper_cfg: None,
            gloss_vocab: None,
            src_vocab: Some(src_vocab),
            tgt_vocab: Some(tgt_vocab),
            lang: "de_DE".to_string(),
            stages: vec!["pretrain_translation".to_string()],
        }
    }

    #[test]
    fn oracle_model_scores_zero_wer() {
        let model = visual_only_model();
        let corpus = oracle_corpus();
        let report = evaluate(&model, &corpus, Task::Sign2Gloss, &EvalOptions::default()).unwrap();
        assert_eq!(report.task, Task::Sign2Gloss);
        assert_eq!(report.split, Split::Test);
        assert_eq!(report.n_samples, 3);
        assert_eq!(report.wer, Some(0.0));
        assert!(report.bleu.is_none() && report.rouge.is_none());
        let decode = report.decode.unwrap();
        // every width is perfect on dev, so the tie keeps the smallest
        assert_eq!(decode.ctc_width, Some(1));
        let table = decode.dev_wer_by_width.unwrap();
        assert_eq!(table.len(), 10);
        assert!(table.values().all(|&w| w == 0.0), "{table:?}");
    }

    #[test]
    fn gloss2text_report_carries_beam_settings_and_no_wer() {
        let model = translation_only_model();
        let corpus = oracle_corpus();
        let report = evaluate(&model, &corpus, Task::Gloss2Text, &EvalOptions::default()).unwrap();
        assert_eq!(report.task, Task::Gloss2Text);
        assert_eq!(report.n_samples, 3);
        assert!(report.wer.is_none());
        assert!(report.bleu.is_some() && report.rouge.is_some());
        let json = serde_json::to_string(&report).unwrap();
        assert!(!json.contains("\"wer\""), "{json}");
        let decode = report.decode.unwrap();
        assert_eq!(decode.beam_width, Some(4));
        assert_eq!(decode.length_penalty, Some(1.0));
        assert!(decode.ctc_width.is_none());
    }

    #[test]
    fn cascade_runs_end_to_end() {
        let visual = visual_only_model();
        let translation = translation_only_model();
        let mut params = visual.params;
        params.absorb(translation.params);
        let model = PipelineModel {
            params,
            visual_cfg: visual.visual_cfg,
            translation_cfg: translation.translation_cfg,
            mapper_cfg: None,
            gloss_vocab: visual.gloss_vocab,
            src_vocab: translation.src_vocab,
            tgt_vocab: translation.tgt_vocab,
            lang: "de_DE".to_string(),
            stages: vec![],
        };
        let corpus = oracle_corpus();
        let report =
            evaluate(&model, &corpus, Task::Sign2Gloss2Text, &EvalOptions::default()).unwrap();
        assert_eq!(report.task, Task::Sign2Gloss2Text);
        assert_eq!(report.n_samples, 3);
        assert!(report.bleu.is_some());
        let decode = report.decode.unwrap();
        assert!(decode.ctc_width.is_some() && decode.dev_wer_by_width.is_some());
        assert_eq!(decode.beam_width, Some(4));
    }

    #[test]
    fn missing_components_fail_by_name() {
        let corpus = oracle_corpus();
        let opts = EvalOptions::default();
        let cases = [
            (visual_only_model(), Task::Gloss2Text, "translation"),
            (visual_only_model(), Task::Sign2Text, "mapper"),
            (translation_only_model(), Task::Sign2Gloss, "visual"),
        ];
        for (model, task, needle) in cases {
            let err = evaluate(&model, &corpus, task, &opts).unwrap_err();
            assert!(matches!(err, Error::CheckpointRequired(_)), "{task:?}: {err}");
            assert!(err.to_string().contains(needle), "{task:?}: {err}");
        }
    }
}
