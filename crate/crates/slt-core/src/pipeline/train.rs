//! The three training stages: CTC pretraining of the visual encoder,
//! cross-entropy pretraining of the translation network, and joint training
//! of the full stack through the mapper.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, ctc_min_frames, CtcDecode, GlossSequence, GlossVocab};
use crate::data::{frame_rate_augment_random, Corpus, Triplet, VideoFeatures};
use crate::error::{Error, Result};
use crate::mapper::{select_visual_feature, Mapper, MapperConfig};
use crate::metrics::{bleu_n, corpus_wer};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::optim::{cosine_lr, AdamConfig, AdamW};
use crate::rng::derive_rng;
use crate::translation::{
    beam_translate_with_score, gloss2text_predict, Mode, TextVocab, TranslationConfig, Translator,
    PAD_ID,
};
use crate::visual::{apply_bn_updates, VisualEncoder, VisualEncoderConfig, BN_MOMENTUM};

use super::{PipelineModel, Stage, TrainConfig};

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Learning rate of the stage's primary sub-network at the first step of
    /// the epoch.
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu4: Option<f64>,
    /// Training samples excluded this run (infeasible CTC target, empty or
    /// overlong text).
    pub skipped: usize,
}

/// A trained stage: the best-dev model plus its training history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PipelineModel,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters the model carries; None when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// Initialization for the joint stage. `Scratch` is the explicit waiver of
/// the progressive recipe, for ablations only.
// Moved straight into train_joint, never stored; variant sizes are moot.
#[allow(clippy::large_enum_variant)]
pub enum JointInit {
    Pretrained {
        visual: PipelineModel,
        translation: PipelineModel,
    },
    Scratch {
        visual_cfg: VisualEncoderConfig,
        translation_cfg: TranslationConfig,
    },
}

fn expect_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config names stage {} but {} was requested",
            cfg.stage.name(),
            stage.name()
        )));
    }
    Ok(())
}

/// Every gloss label seen anywhere in the corpus, so decoding can be scored
/// against any split.
fn gloss_vocab_from(corpus: &Corpus) -> Result<GlossVocab> {
    let mut labels = BTreeSet::new();
    for t in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
        labels.extend(t.gloss.iter().cloned());
    }
    GlossVocab::new(labels.into_iter().collect())
}

fn build_text_vocabs(corpus: &Corpus, lang: &str) -> Result<(TextVocab, TextVocab)> {
    let gloss_lines: Vec<String> = corpus.train.iter().map(|t| t.gloss.join(" ")).collect();
    let src = TextVocab::build(gloss_lines.iter().map(String::as_str), &[lang])?;
    let tgt = TextVocab::build(corpus.train.iter().map(|t| t.text.as_str()), &[lang])?;
    Ok((src, tgt))
}

fn mean_of(g: &Graph, losses: &[Var]) -> Result<Var> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / losses.len() as f64))
}

/// Output frames the backbone produces for `t` input frames.
fn downsampled(t: usize) -> usize {
    t.div_ceil(4)
}

/// Corpus WER of CTC-decoded gloss predictions over a split.
pub(crate) fn split_wer(
    enc: &VisualEncoder,
    store: &ParamStore,
    vocab: &GlossVocab,
    split: &[Triplet],
    decode: CtcDecode,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(split.len());
    let mut refs = Vec::with_capacity(split.len());
    for t in split {
        let ids = enc.sign2gloss_predict(store, &t.features, decode)?;
        let labels: Vec<String> = ids
            .iter()
            .map(|&id| vocab.label(id).map(str::to_string))
            .collect::<Result<_>>()?;
        hyps.push(labels);
        refs.push(t.gloss.clone());
    }
    corpus_wer(&hyps, &refs)
}

/// Greedy-decode BLEU-4 of the translation network over a split, from
/// ground-truth glosses.
fn dev_bleu_gloss2text(
    t: &Translator,
    store: &ParamStore,
    src_vocab: &TextVocab,
    tgt_vocab: &TextVocab,
    lang: &str,
    split: &[Triplet],
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(split.len());
    for s in split {
        hyps.push(gloss2text_predict(
            t,
            store,
            src_vocab,
            tgt_vocab,
            &s.gloss.join(" "),
            lang,
            1,
            1.0,
        )?);
    }
    let refs: Vec<&str> = split.iter().map(|s| s.text.as_str()).collect();
    bleu_n(&hyps, &refs, 4)
}

/// Sign2Text inference for one video: encode visually, map into the
/// translation embedding space, append the language-id embedding as the
/// final encoder position, then beam-search the decoder.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sign2text_translate(
    enc: &VisualEncoder,
    mapper: &Mapper,
    translator: &Translator,
    store: &ParamStore,
    src_lang: usize,
    tgt_lang: usize,
    tgt_vocab: &TextVocab,
    v: &VideoFeatures,
    width: usize,
    alpha: f64,
) -> Result<String> {
    let g = Graph::inference();
    let x = g.constant(v.values().clone());
    let fwd = enc.forward(&g, store, &[x], false)?;
    let feats = select_visual_feature(&g, &fwd, 0, mapper.cfg.input_kind)?;
    let mapped = mapper.map_features(&g, store, feats)?;
    let lang_emb = translator.embed_src(&g, store, &[src_lang])?;
    let enc_in = g.concat_rows(&[mapped, lang_emb])?;
    let len = g.shape_of(enc_in)[0];
    let pad = vec![false; len];
    let memory = translator.encode_embedded(&g, store, enc_in, &pad, &Mode::Eval)?;
    let mem = g.value(memory);
    let (ids, _) =
        beam_translate_with_score(translator, store, &mem, &pad, tgt_lang, tgt_vocab, width, alpha)?;
    tgt_vocab.detokenize(&ids)
}

#[allow(clippy::too_many_arguments)]
fn dev_bleu_sign2text(
    enc: &VisualEncoder,
    mapper: &Mapper,
    translator: &Translator,
    store: &ParamStore,
    src_lang: usize,
    tgt_lang: usize,
    tgt_vocab: &TextVocab,
    split: &[Triplet],
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(split.len());
    for s in split {
        hyps.push(sign2text_translate(
            enc, mapper, translator, store, src_lang, tgt_lang, tgt_vocab, &s.features, 1, 1.0,
        )?);
    }
    let refs: Vec<&str> = split.iter().map(|s| s.text.as_str()).collect();
    bleu_n(&hyps, &refs, 4)
}

pub fn pretrain_visual(
    corpus: &Corpus,
    visual_cfg: &VisualEncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::PretrainVisual)?;
    cfg.validate()?;
    let vocab = gloss_vocab_from(corpus)?;
    // The classifier width follows the corpus inventory, not the configured
    // placeholder.
    let mut vcfg = visual_cfg.clone();
    vcfg.vocab_size = vocab.size();
    vcfg.freeze_backbone = false;
    let enc = VisualEncoder::new(vcfg.clone())?;
    let mut store = ParamStore::new();
    enc.init_params(&mut store, &mut derive_rng(cfg.seed, "init/visual"));

    let mut samples: Vec<(&Triplet, GlossSequence)> = Vec::new();
    let mut skipped = 0usize;
    for t in &corpus.train {
        let target = vocab.encode(&t.gloss.join(" "))?;
        let out_frames = downsampled(t.features.frames());
        if ctc_min_frames(&target) > out_frames {
            eprintln!(
                "warning: skipping {}: target needs {} output frames, video yields {out_frames}",
                t.id,
                ctc_min_frames(&target)
            );
            skipped += 1;
            continue;
        }
        samples.push((t, target));
    }
    if samples.is_empty() {
        return Err(Error::Corpus("no feasible training sample".to_string()));
    }

    let mut opt = AdamW::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let n_batches = samples.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * n_batches).max(1);
    let mut step = 0usize;
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("order/{epoch}")));
        let mut aug_rng = derive_rng(cfg.seed, &format!("augment/{epoch}"));
        let epoch_lr = cosine_lr(cfg.lr_visual, step, total_steps);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr_scale = cosine_lr(1.0, step, total_steps);
            let g = Graph::new();
            let mut xs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (t, target) = &samples[i];
                xs.push(g.constant(augmented(t, target, &mut aug_rng)?));
            }
            let fwd = enc.forward(&g, &store, &xs, true)?;
            let losses: Vec<Var> = chunk
                .iter()
                .enumerate()
                .map(|(bi, &i)| ctc_loss(&g, fwd.logits[bi], &samples[i].1))
                .collect::<Result<_>>()?;
            let loss = mean_of(&g, &losses)?;
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss, &store)?;
            opt.step(&mut store, &grads, |name| lr_scale * cfg.lr_for(name))?;
            apply_bn_updates(&mut store, &fwd.bn_updates, BN_MOMENTUM)?;
            step += 1;
        }
        let wer = split_wer(&enc, &store, &vocab, &corpus.dev, CtcDecode::Greedy)?;
        logs.push(EpochLog {
            stage: cfg.stage.name().to_string(),
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n_batches as f64,
            dev_wer: Some(wer),
            dev_bleu4: None,
            skipped,
        });
        if best.as_ref().is_none_or(|(b, _, _)| wer < *b) {
            best = Some((wer, store.clone(), epoch));
        }
    }
    let (params, best_epoch) = match best {
        Some((_, params, epoch)) => (params, Some(epoch)),
        None => (store, None),
    };
    Ok(TrainOutcome {
        model: PipelineModel {
            params,
            visual_cfg: vcfg,
            translation_cfg: TranslationConfig::default(),
            mapper_cfg: None,
            gloss_vocab: Some(vocab),
            src_vocab: None,
            tgt_vocab: None,
            lang: cfg.lang.clone(),
            stages: vec![cfg.stage.name().to_string()],
        },
        epochs: logs,
        best_epoch,
    })
}

/// Frame-rate augmentation for one sample; falls back to the original clip
/// when the drawn rate would make the CTC target infeasible.
fn augmented(t: &Triplet, target: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let aug = frame_rate_augment_random(&t.features, rng)?;
    if ctc_min_frames(target) > downsampled(aug.frames()) {
        return Ok(t.features.values().clone());
    }
    Ok(aug.values().clone())
}

pub fn pretrain_translation(
    corpus: &Corpus,
    translation_cfg: &TranslationConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::PretrainTranslation)?;
    cfg.validate()?;
    translation_cfg.validate()?;
    let (src_vocab, tgt_vocab) = build_text_vocabs(corpus, &cfg.lang)?;
    let translator = Translator::new(translation_cfg.clone())?;
    let mut store = ParamStore::new();
    translator.init_params(
        &mut store,
        &mut derive_rng(cfg.seed, "init/translation"),
        src_vocab.size(),
        tgt_vocab.size(),
    );
    let src_lang = src_vocab.lang_id(&cfg.lang)?;
    let tgt_lang = tgt_vocab.lang_id(&cfg.lang)?;

    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut skipped = 0usize;
    for t in &corpus.train {
        if t.text.trim().is_empty() {
            eprintln!("warning: skipping {}: empty text", t.id);
            skipped += 1;
            continue;
        }
        let mut src = src_vocab.tokenize(&t.gloss.join(" "));
        src.push(src_lang);
        let tgt = tgt_vocab.tokenize(&t.text);
        if src.len() > translation_cfg.max_len || tgt.len() + 1 > translation_cfg.max_len {
            eprintln!(
                "warning: skipping {}: longer than max_len {}",
                t.id, translation_cfg.max_len
            );
            skipped += 1;
            continue;
        }
        pairs.push((src, tgt));
    }
    if pairs.is_empty() {
        return Err(Error::Corpus("no usable training sample".to_string()));
    }

    let drop_rng = RefCell::new(derive_rng(cfg.seed, "dropout/translation"));
    let mut opt = AdamW::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let n_batches = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * n_batches).max(1);
    let mut step = 0usize;
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("order/{epoch}")));
        let epoch_lr = cosine_lr(cfg.lr_translation, step, total_steps);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr_scale = cosine_lr(1.0, step, total_steps);
            let g = Graph::new();
            let mode = Mode::Train { dropout: translation_cfg.dropout, rng: &drop_rng };
            let losses: Vec<Var> = chunk
                .iter()
                .map(|&i| {
                    let (src, tgt) = &pairs[i];
                    translator.gloss2text_loss(&g, &store, src, tgt, tgt_lang, &mode)
                })
                .collect::<Result<_>>()?;
            let loss = mean_of(&g, &losses)?;
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss, &store)?;
            opt.step(&mut store, &grads, |name| lr_scale * cfg.lr_for(name))?;
            step += 1;
        }
        let bleu = dev_bleu_gloss2text(
            &translator, &store, &src_vocab, &tgt_vocab, &cfg.lang, &corpus.dev,
        )?;
        logs.push(EpochLog {
            stage: cfg.stage.name().to_string(),
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n_batches as f64,
            dev_wer: None,
            dev_bleu4: Some(bleu),
            skipped,
        });
        if best.as_ref().is_none_or(|(b, _, _)| bleu > *b) {
            best = Some((bleu, store.clone(), epoch));
        }
    }
    let (params, best_epoch) = match best {
        Some((_, params, epoch)) => (params, Some(epoch)),
        None => (store, None),
    };
    Ok(TrainOutcome {
        model: PipelineModel {
            params,
            visual_cfg: VisualEncoderConfig::default(),
            translation_cfg: translation_cfg.clone(),
            mapper_cfg: None,
            gloss_vocab: None,
            src_vocab: Some(src_vocab),
            tgt_vocab: Some(tgt_vocab),
            lang: cfg.lang.clone(),
            stages: vec![cfg.stage.name().to_string()],
        },
        epochs: logs,
        best_epoch,
    })
}

/// Embedding rows for the gloss-probability mapper seed: row 0 (blank) takes
/// the PAD embedding, row k the source embedding of gloss label k.
fn embedding_table_for_glosses(
    store: &ParamStore,
    gloss: &GlossVocab,
    src: &TextVocab,
) -> Result<Tensor> {
    let embed = store.tensor("trans.src_embed")?;
    let d = embed.cols();
    let mut data = Vec::with_capacity((gloss.size() + 1) * d);
    data.extend_from_slice(embed.row(PAD_ID));
    for k in 1..=gloss.size() {
        let label = gloss.label(k)?;
        let id = src.id(label).ok_or_else(|| {
            Error::Config(format!(
                "gloss {label} missing from the source vocabulary; cannot seed the mapper"
            ))
        })?;
        data.extend_from_slice(embed.row(id));
    }
    Tensor::new(vec![gloss.size() + 1, d], data)
}

pub fn train_joint(
    corpus: &Corpus,
    init: JointInit,
    mapper_cfg: &MapperConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    expect_stage(cfg, Stage::TrainJoint)?;
    cfg.validate()?;

    let (mut store, mut vcfg, tcfg, gloss_vocab, src_vocab, tgt_vocab, mut stages) = match init {
        JointInit::Pretrained { visual, translation } => {
            let gloss_vocab = visual.require_visual()?.clone();
            let (sv, tv) = translation.require_translation()?;
            let (src_vocab, tgt_vocab) = (sv.clone(), tv.clone());
            let mut stages = visual.stages;
            stages.extend(translation.stages);
            let mut store = visual.params;
            store.absorb(translation.params);
            (
                store,
                visual.visual_cfg,
                translation.translation_cfg,
                gloss_vocab,
                src_vocab,
                tgt_vocab,
                stages,
            )
        }
        JointInit::Scratch { visual_cfg, translation_cfg } => {
            translation_cfg.validate()?;
            let gloss_vocab = gloss_vocab_from(corpus)?;
            let mut vcfg = visual_cfg;
            vcfg.vocab_size = gloss_vocab.size();
            let enc = VisualEncoder::new(vcfg.clone())?;
            let mut store = ParamStore::new();
            enc.init_params(&mut store, &mut derive_rng(cfg.seed, "init/visual"));
            let (src_vocab, tgt_vocab) = build_text_vocabs(corpus, &cfg.lang)?;
            let translator = Translator::new(translation_cfg.clone())?;
            translator.init_params(
                &mut store,
                &mut derive_rng(cfg.seed, "init/translation"),
                src_vocab.size(),
                tgt_vocab.size(),
            );
            (store, vcfg, translation_cfg, gloss_vocab, src_vocab, tgt_vocab, vec![])
        }
    };
    stages.push(cfg.stage.name().to_string());

    vcfg.freeze_backbone = cfg.freeze_backbone;
    let enc = VisualEncoder::new(vcfg.clone())?;
    let translator = Translator::new(tcfg.clone())?;
    mapper_cfg.validate(&vcfg)?;
    if mapper_cfg.d_out != tcfg.d_model {
        return Err(Error::Config(format!(
            "mapper output width {} does not match translation d_model {}",
            mapper_cfg.d_out, tcfg.d_model
        )));
    }
    let mapper = Mapper::new(mapper_cfg.clone());
    if !store.contains("mapper.fc1.w") {
        mapper.init_params(&mut store, &mut derive_rng(cfg.seed, "init/mapper"));
        if mapper_cfg.init_from_embedding {
            let table = embedding_table_for_glosses(&store, &gloss_vocab, &src_vocab)?;
            mapper.init_from_embedding(&mut store, &table)?;
        }
    }
    if cfg.freeze_backbone {
        store.set_trainable_prefix("visual.backbone.", false);
    }
    let src_lang = src_vocab.lang_id(&cfg.lang)?;
    let tgt_lang = tgt_vocab.lang_id(&cfg.lang)?;

    let mut samples: Vec<(&Triplet, GlossSequence, Vec<usize>)> = Vec::new();
    let mut skipped = 0usize;
    for t in &corpus.train {
        let target = gloss_vocab.encode(&t.gloss.join(" "))?;
        let out_frames = downsampled(t.features.frames());
        if cfg.ctc_weight > 0.0 && ctc_min_frames(&target) > out_frames {
            eprintln!(
                "warning: skipping {}: target needs {} output frames, video yields {out_frames}",
                t.id,
                ctc_min_frames(&target)
            );
            skipped += 1;
            continue;
        }
        let tgt = tgt_vocab.tokenize(&t.text);
        if cfg.ce_weight > 0.0
            && (t.text.trim().is_empty()
                || tgt.len() + 1 > tcfg.max_len
                || out_frames + 1 > tcfg.max_len)
        {
            eprintln!("warning: skipping {}: unusable for translation", t.id);
            skipped += 1;
            continue;
        }
        samples.push((t, target, tgt));
    }
    if samples.is_empty() {
        return Err(Error::Corpus("no usable training sample".to_string()));
    }

    let drop_rng = RefCell::new(derive_rng(cfg.seed, "dropout/joint"));
    let mut opt = AdamW::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let n_batches = samples.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * n_batches).max(1);
    let mut step = 0usize;
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("order/{epoch}")));
        let epoch_lr = cosine_lr(cfg.lr_visual, step, total_steps);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr_scale = cosine_lr(1.0, step, total_steps);
            let g = Graph::new();
            let mode = Mode::Train { dropout: tcfg.dropout, rng: &drop_rng };
            let xs: Vec<Var> = chunk
                .iter()
                .map(|&i| g.constant(samples[i].0.features.values().clone()))
                .collect();
            let fwd = enc.forward(&g, &store, &xs, true)?;
            let mut ctc_losses = Vec::new();
            let mut ce_losses = Vec::new();
            for (bi, &i) in chunk.iter().enumerate() {
                let (_, target, tgt) = &samples[i];
                if cfg.ctc_weight > 0.0 {
                    ctc_losses.push(ctc_loss(&g, fwd.logits[bi], target)?);
                }
                if cfg.ce_weight > 0.0 {
                    let feats = select_visual_feature(&g, &fwd, bi, mapper_cfg.input_kind)?;
                    let mapped = mapper.map_features(&g, &store, feats)?;
                    let lang_emb = translator.embed_src(&g, &store, &[src_lang])?;
                    let enc_in = g.concat_rows(&[mapped, lang_emb])?;
                    let pad = vec![false; g.shape_of(enc_in)[0]];
                    let memory = translator.encode_embedded(&g, &store, enc_in, &pad, &mode)?;
                    ce_losses.push(
                        translator.loss_from_memory(&g, &store, memory, &pad, tgt, tgt_lang, &mode)?,
                    );
                }
            }
            let mut terms = Vec::new();
            if !ctc_losses.is_empty() {
                terms.push(g.scale(mean_of(&g, &ctc_losses)?, cfg.ctc_weight));
            }
            if !ce_losses.is_empty() {
                terms.push(g.scale(mean_of(&g, &ce_losses)?, cfg.ce_weight));
            }
            let loss = match terms[..] {
                [only] => only,
                [a, b] => g.add(a, b)?,
                _ => unreachable!("validate guarantees a positive weight"),
            };
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss, &store)?;
            opt.step(&mut store, &grads, |name| lr_scale * cfg.lr_for(name))?;
            apply_bn_updates(&mut store, &fwd.bn_updates, BN_MOMENTUM)?;
            step += 1;
        }
        let bleu = dev_bleu_sign2text(
            &enc, &mapper, &translator, &store, src_lang, tgt_lang, &tgt_vocab, &corpus.dev,
        )?;
        logs.push(EpochLog {
            stage: cfg.stage.name().to_string(),
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n_batches as f64,
            dev_wer: None,
            dev_bleu4: Some(bleu),
            skipped,
        });
        if best.as_ref().is_none_or(|(b, _, _)| bleu > *b) {
            best = Some((bleu, store.clone(), epoch));
        }
    }
    let (params, best_epoch) = match best {
        Some((_, params, epoch)) => (params, Some(epoch)),
        None => (store, None),
    };
    Ok(TrainOutcome {
        model: PipelineModel {
            params,
            visual_cfg: vcfg,
            translation_cfg: tcfg,
            mapper_cfg: Some(mapper_cfg.clone()),
            gloss_vocab: Some(gloss_vocab),
            src_vocab: Some(src_vocab),
            tgt_vocab: Some(tgt_vocab),
            lang: cfg.lang.clone(),
            stages,
        },
        epochs: logs,
        best_epoch,
    })
}
