//! Gloss2Text network: vocabulary with whitespace tokenization, a pre-LN
//! encoder-decoder transformer with learned positional embeddings, the
//! label-smoothed cross-entropy objective, and beam-search generation.
//!
//! The language-id symbol closes the encoder input and opens the decoder
//! input; the decoder target ends with EOS. Source and target vocabularies
//! are separate, each with its own language-id symbols.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::{normal, xavier_uniform};
use crate::numerics::scalar::s;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

/// Token table: ids 0..2 are PAD/UNK/EOS, then one language-id symbol per
/// language tag, then the ordinary tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TextVocab {
    tokens: Vec<String>,
    n_langs: usize,
}

fn lang_symbol(tag: &str) -> String {
    format!("<{tag}>")
}

impl TextVocab {
    /// Collects the distinct whitespace tokens of `sentences` (sorted for
    /// determinism) behind the specials and language symbols.
    pub fn build<'a>(
        sentences: impl IntoIterator<Item = &'a str>,
        langs: &[&str],
    ) -> Result<Self> {
        if langs.is_empty() {
            return Err(Error::Config("at least one language tag is required".to_string()));
        }
        let mut tokens: Vec<String> =
            vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        let mut seen_langs = BTreeSet::new();
        for tag in langs {
            if !seen_langs.insert(*tag) {
                return Err(Error::Config(format!("duplicate language tag {tag}")));
            }
            tokens.push(lang_symbol(tag));
        }
        let mut corpus: BTreeSet<&str> = BTreeSet::new();
        for sentence in sentences {
            corpus.extend(sentence.split_whitespace());
        }
        for tok in corpus {
            if tok.starts_with('<') && tok.ends_with('>') {
                return Err(Error::Config(format!(
                    "corpus token {tok} collides with the special-token syntax"
                )));
            }
            tokens.push(tok.to_string());
        }
        Ok(TextVocab { tokens, n_langs: langs.len() })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_specials(&self) -> usize {
        3 + self.n_langs
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.n_specials()
    }

    pub fn lang_id(&self, tag: &str) -> Result<usize> {
        let symbol = lang_symbol(tag);
        self.tokens[3..3 + self.n_langs]
            .iter()
            .position(|t| *t == symbol)
            .map(|p| 3 + p)
            .ok_or_else(|| Error::Config(format!("unknown language tag {tag}")))
    }

    /// The first language id, for corpora that carry a single language.
    pub fn default_lang_id(&self) -> usize {
        3
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::VocabId { id, vocab_size: self.tokens.len() })
    }

    /// Whitespace split; out-of-vocabulary words become UNK. Empty input
    /// gives an empty sequence.
    pub fn tokenize(&self, raw: &str) -> Vec<usize> {
        raw.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.token(id)).collect();
        Ok(words?.join(" "))
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_tokens(content.lines().map(str::to_string).collect())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Rebuilds a vocabulary from its saved token list, re-checking the
    /// layout (specials, then at least one language symbol).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[0] != PAD_TOKEN
            || tokens[1] != UNK_TOKEN
            || tokens[2] != EOS_TOKEN
        {
            return Err(Error::Config(format!(
                "vocabulary must start with {PAD_TOKEN}, {UNK_TOKEN}, {EOS_TOKEN}"
            )));
        }
        let n_langs = tokens[3..]
            .iter()
            .take_while(|t| t.starts_with('<') && t.ends_with('>'))
            .count();
        if n_langs == 0 {
            return Err(Error::Config(
                "no language-id symbol after the specials".to_string(),
            ));
        }
        Ok(TextVocab { tokens, n_langs })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 128,
            heads: 4,
            dropout: 0.3,
            label_smoothing: 0.2,
            max_len: 40,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers_enc == 0 || self.layers_dec == 0 {
            return Err(Error::Config("need at least one layer per stack".to_string()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(
                "dropout and label_smoothing must lie in [0, 1)".to_string(),
            ));
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Forward mode: training applies inverted dropout, evaluation is pure.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a RefCell<ChaCha12Rng> },
}

impl Mode<'_> {
    fn apply<S: Scalar>(&self, g: &Graph<S>, x: Var) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train { dropout, rng } => {
                if *dropout == 0.0 {
                    return x;
                }
                let keep = 1.0 - dropout;
                let shape = g.shape_of(x);
                let mut rng = rng.borrow_mut();
                let mut mask = Tensor::<S>::zeros(&shape);
                for slot in mask.data_mut() {
                    *slot = if rng.gen::<f64>() < keep { s::<S>(1.0 / keep) } else { S::zero() };
                }
                g.mul(x, g.constant(mask)).expect("mask matches shape")
            }
        }
    }
}

const NEG_MASK: f64 = -1e30;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Translator {
    pub cfg: TranslationConfig,
}

impl Translator {
    pub fn new(cfg: TranslationConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Translator { cfg })
    }

    /// Inserts freshly initialized parameters under the `trans.` prefix.
    pub fn init_params<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        src_vocab: usize,
        tgt_vocab: usize,
    ) {
        let d = self.cfg.d_model;
        store.insert("trans.src_embed", normal(rng, &[src_vocab, d], 0.0, 0.02), true);
        store.insert("trans.tgt_embed", normal(rng, &[tgt_vocab, d], 0.0, 0.02), true);
        store.insert("trans.enc.pos", normal(rng, &[self.cfg.max_len, d], 0.0, 0.02), true);
        store.insert("trans.dec.pos", normal(rng, &[self.cfg.max_len, d], 0.0, 0.02), true);
        for i in 0..self.cfg.layers_enc {
            let p = format!("trans.enc.layer{i}");
            insert_attn(store, rng, &format!("{p}.attn"), d);
            insert_ln(store, &format!("{p}.ln1"), d);
            insert_ffn(store, rng, &format!("{p}.ffn"), d, self.cfg.d_ff());
            insert_ln(store, &format!("{p}.ln2"), d);
        }
        insert_ln(store, "trans.enc.norm", d);
        for i in 0..self.cfg.layers_dec {
            let p = format!("trans.dec.layer{i}");
            insert_attn(store, rng, &format!("{p}.self"), d);
            insert_ln(store, &format!("{p}.ln1"), d);
            insert_attn(store, rng, &format!("{p}.cross"), d);
            insert_ln(store, &format!("{p}.ln2"), d);
            insert_ffn(store, rng, &format!("{p}.ffn"), d, self.cfg.d_ff());
            insert_ln(store, &format!("{p}.ln3"), d);
        }
        insert_ln(store, "trans.dec.norm", d);
        store.insert("trans.out.w", xavier_uniform(rng, &[d, tgt_vocab], d, tgt_vocab), true);
        store.insert("trans.out.b", Tensor::zeros(&[tgt_vocab]), true);
    }

    pub fn params_present<S: Scalar>(&self, store: &ParamStore<S>) -> bool {
        store.contains("trans.src_embed")
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptySequence { op: "translation" });
        }
        if len > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "{what} length {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Scaled token embeddings plus learned positions for the encoder side.
    pub fn embed_src<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        ids: &[usize],
    ) -> Result<Var> {
        self.check_len(ids.len(), "source")?;
        let table = store.leaf(g, "trans.src_embed")?;
        let e = g.embedding(table, ids)?;
        Ok(g.scale(e, s::<S>((self.cfg.d_model as f64).sqrt())))
    }

    /// Encoder stack over an already-embedded input (no positions yet).
    /// `pad` marks positions to hide from attention.
    pub fn encode_embedded<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        pad: &[bool],
        mode: &Mode,
    ) -> Result<Var> {
        let len = g.shape_of(x)[0];
        self.check_len(len, "source")?;
        if pad.len() != len {
            return Err(Error::InvalidArgument(format!(
                "pad mask length {} does not match sequence length {len}",
                pad.len()
            )));
        }
        let pos = store.leaf(g, "trans.enc.pos")?;
        let mut h = g.add(x, g.slice_rows(pos, 0, len)?)?;
        h = mode.apply(g, h);
        let mask = key_mask(g, len, pad);
        for i in 0..self.cfg.layers_enc {
            let p = format!("trans.enc.layer{i}");
            let ln1 = layer_norm(g, store, &format!("{p}.ln1"), h)?;
            let a = self.attention(g, store, &format!("{p}.attn"), ln1, ln1, mask, mode)?;
            h = g.add(h, a)?;
            let ln2 = layer_norm(g, store, &format!("{p}.ln2"), h)?;
            let f = self.ffn(g, store, &format!("{p}.ffn"), ln2, mode)?;
            h = g.add(h, f)?;
        }
        layer_norm(g, store, "trans.enc.norm", h)
    }

    /// Token-id encoder entry: embeds, adds positions, runs the stack.
    pub fn encode_tokens<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        ids: &[usize],
        mode: &Mode,
    ) -> Result<Var> {
        let x = self.embed_src(g, store, ids)?;
        let pad: Vec<bool> = ids.iter().map(|&id| id == PAD_ID).collect();
        self.encode_embedded(g, store, x, &pad, mode)
    }

    /// Decoder stack over `tgt_in` token ids with causal self-attention,
    /// returning one logit row per input position.
    pub fn decode<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        memory: Var,
        mem_pad: &[bool],
        tgt_in: &[usize],
        mode: &Mode,
    ) -> Result<Var> {
        self.check_len(tgt_in.len(), "target")?;
        let u = tgt_in.len();
        let table = store.leaf(g, "trans.tgt_embed")?;
        let e = g.embedding(table, tgt_in)?;
        let scaled = g.scale(e, s::<S>((self.cfg.d_model as f64).sqrt()));
        let pos = store.leaf(g, "trans.dec.pos")?;
        let mut h = g.add(scaled, g.slice_rows(pos, 0, u)?)?;
        h = mode.apply(g, h);
        let causal = causal_mask(g, u);
        let mem_mask = key_mask(g, u, mem_pad);
        for i in 0..self.cfg.layers_dec {
            let p = format!("trans.dec.layer{i}");
            let ln1 = layer_norm(g, store, &format!("{p}.ln1"), h)?;
            let a = self.attention(g, store, &format!("{p}.self"), ln1, ln1, causal, mode)?;
            h = g.add(h, a)?;
            let ln2 = layer_norm(g, store, &format!("{p}.ln2"), h)?;
            let c = self.attention(g, store, &format!("{p}.cross"), ln2, memory, mem_mask, mode)?;
            h = g.add(h, c)?;
            let ln3 = layer_norm(g, store, &format!("{p}.ln3"), h)?;
            let f = self.ffn(g, store, &format!("{p}.ffn"), ln3, mode)?;
            h = g.add(h, f)?;
        }
        let out = layer_norm(g, store, "trans.dec.norm", h)?;
        let w = store.leaf(g, "trans.out.w")?;
        let b = store.leaf(g, "trans.out.b")?;
        g.add_row(g.matmul(out, w)?, b)
    }

    /// Label-smoothed cross entropy for one pair, given an encoded source.
    /// Decoder input is `lang` + target, decoder target is target + EOS.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_from_memory<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        memory: Var,
        mem_pad: &[bool],
        tgt: &[usize],
        lang: usize,
        mode: &Mode,
    ) -> Result<Var> {
        if tgt.is_empty() {
            return Err(Error::EmptySequence { op: "translation_loss" });
        }
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(lang);
        dec_in.extend_from_slice(tgt);
        let mut target = tgt.to_vec();
        target.push(EOS_ID);
        let logits = self.decode(g, store, memory, mem_pad, &dec_in, mode)?;
        g.cross_entropy_label_smoothed(logits, &target, s::<S>(self.cfg.label_smoothing))
    }

    /// Full Gloss2Text objective for one pair of token-id sequences. The
    /// source must already end with its language-id symbol.
    pub fn gloss2text_loss<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        src: &[usize],
        tgt: &[usize],
        lang: usize,
        mode: &Mode,
    ) -> Result<Var> {
        let memory = self.encode_tokens(g, store, src, mode)?;
        let pad: Vec<bool> = src.iter().map(|&id| id == PAD_ID).collect();
        self.loss_from_memory(g, store, memory, &pad, tgt, lang, mode)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
        mode: &Mode,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.heads;
        let proj = |name: &str, x: Var| -> Result<Var> {
            let w = store.leaf(g, &format!("{prefix}.{name}.w"))?;
            let b = store.leaf(g, &format!("{prefix}.{name}.b"))?;
            g.add_row(g.matmul(x, w)?, b)
        };
        let q = proj("q", q_in)?;
        let k = proj("k", kv_in)?;
        let v = proj("v", kv_in)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let mut scores = g.scale(g.matmul_nt(qh, kh)?, s::<S>(1.0 / (dh as f64).sqrt()));
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        Ok(mode.apply(g, proj("o", ctx)?))
    }

    fn ffn<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        prefix: &str,
        x: Var,
        mode: &Mode,
    ) -> Result<Var> {
        let w1 = store.leaf(g, &format!("{prefix}.w1"))?;
        let b1 = store.leaf(g, &format!("{prefix}.b1"))?;
        let w2 = store.leaf(g, &format!("{prefix}.w2"))?;
        let b2 = store.leaf(g, &format!("{prefix}.b2"))?;
        let h = g.relu(g.add_row(g.matmul(x, w1)?, b1)?);
        Ok(mode.apply(g, g.add_row(g.matmul(h, w2)?, b2)?))
    }
}

fn insert_attn<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, prefix: &str, d: usize) {
    for name in ["q", "k", "v", "o"] {
        store.insert(&format!("{prefix}.{name}.w"), xavier_uniform(rng, &[d, d], d, d), true);
        store.insert(&format!("{prefix}.{name}.b"), Tensor::zeros(&[d]), true);
    }
}

fn insert_ffn<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    d_ff: usize,
) {
    store.insert(&format!("{prefix}.w1"), xavier_uniform(rng, &[d, d_ff], d, d_ff), true);
    store.insert(&format!("{prefix}.b1"), Tensor::zeros(&[d_ff]), true);
    store.insert(&format!("{prefix}.w2"), xavier_uniform(rng, &[d_ff, d], d_ff, d), true);
    store.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d]), true);
}

fn insert_ln<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::ones(&[d]), true);
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[d]), true);
}

fn layer_norm<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = store.leaf(g, &format!("{prefix}.gamma"))?;
    let beta = store.leaf(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, s::<S>(LN_EPS))
}

/// `[q_len×k_len]` additive mask hiding padded key positions.
fn key_mask<S: Scalar>(g: &Graph<S>, q_len: usize, pad: &[bool]) -> Option<Var> {
    if pad.iter().all(|&p| !p) {
        return None;
    }
    let mut m = Tensor::<S>::zeros(&[q_len, pad.len()]);
    for qi in 0..q_len {
        for (ki, &p) in pad.iter().enumerate() {
            if p {
                m.row_mut(qi)[ki] = s::<S>(NEG_MASK);
            }
        }
    }
    Some(g.constant(m))
}

/// `[u×u]` additive mask hiding future positions.
fn causal_mask<S: Scalar>(g: &Graph<S>, u: usize) -> Option<Var> {
    if u == 1 {
        return None;
    }
    let mut m = Tensor::<S>::zeros(&[u, u]);
    for qi in 0..u {
        for ki in qi + 1..u {
            m.row_mut(qi)[ki] = s::<S>(NEG_MASK);
        }
    }
    Some(g.constant(m))
}

// ---- beam search ----

#[derive(Clone, Debug)]
struct Hypothesis {
    seq: Vec<usize>,
    logp: f64,
    /// Steps taken including the EOS emission; force-finished hypotheses
    /// count only their tokens.
    steps: usize,
}

impl Hypothesis {
    fn score(&self, alpha: f64) -> f64 {
        self.logp / (self.steps.max(1) as f64).powf(alpha)
    }
}

/// Beam search over the decoder. Hypothesis score is (Σ log p) / len^alpha;
/// EOS emission counts toward len. PAD, UNK, and language-id symbols are
/// never generated. Hypotheses still active at max_len are force-finished.
/// Ties break toward the lexicographically smaller token sequence.
/// Returns the token ids (specials stripped) and the winning score.
#[allow(clippy::too_many_arguments)]
pub fn beam_translate_with_score<S: Scalar>(
    t: &Translator,
    store: &ParamStore<S>,
    memory: &Tensor<S>,
    mem_pad: &[bool],
    lang: usize,
    tgt_vocab: &TextVocab,
    width: usize,
    alpha: f64,
) -> Result<(Vec<usize>, f64)> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".to_string()));
    }
    let max_steps = t.cfg.max_len - 1;
    let mut active = vec![Hypothesis { seq: vec![], logp: 0.0, steps: 0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &active {
            let g = Graph::<S>::inference();
            let mem = g.constant(memory.clone());
            let mut dec_in = Vec::with_capacity(hyp.seq.len() + 1);
            dec_in.push(lang);
            dec_in.extend_from_slice(&hyp.seq);
            let logits = t.decode(&g, store, mem, mem_pad, &dec_in, &Mode::Eval)?;
            let last = g.log_softmax_rows(logits);
            let row_t = g.value(last);
            let row = row_t.row(dec_in.len() - 1);
            for (tok, &lp) in row.iter().enumerate() {
                if tok != EOS_ID && tgt_vocab.is_special(tok) {
                    continue;
                }
                let logp = hyp.logp + crate::numerics::scalar::to_f64(lp);
                if tok == EOS_ID {
                    finished.push(Hypothesis {
                        seq: hyp.seq.clone(),
                        logp,
                        steps: hyp.steps + 1,
                    });
                } else {
                    let mut seq = hyp.seq.clone();
                    seq.push(tok);
                    candidates.push(Hypothesis { seq, logp, steps: hyp.steps + 1 });
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .expect("finite log probabilities")
                .then_with(|| a.seq.cmp(&b.seq))
        });
        candidates.truncate(width);
        active = candidates;
    }
    // hypotheses that never emitted EOS compete as force-finished
    finished.extend(active);
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            a.score(alpha)
                .partial_cmp(&b.score(alpha))
                .expect("finite scores")
                .then_with(|| b.seq.cmp(&a.seq))
        })
        .expect("at least one hypothesis");
    let score = best.score(alpha);
    Ok((best.seq, score))
}

/// Gloss2Text inference: tokenize the gloss line against the source
/// vocabulary, append the language id, encode, and beam-search the target.
#[allow(clippy::too_many_arguments)]
pub fn gloss2text_predict<S: Scalar>(
    t: &Translator,
    store: &ParamStore<S>,
    src_vocab: &TextVocab,
    tgt_vocab: &TextVocab,
    gloss_line: &str,
    lang_tag: &str,
    width: usize,
    alpha: f64,
) -> Result<String> {
    if !t.params_present(store) {
        return Err(Error::CheckpointRequired(
            "translation parameters are not loaded".to_string(),
        ));
    }
    let mut src = src_vocab.tokenize(gloss_line);
    src.push(src_vocab.lang_id(lang_tag)?);
    let g = Graph::<S>::inference();
    let memory = t.encode_tokens(&g, store, &src, &Mode::Eval)?;
    let mem = g.value(memory);
    let pad = vec![false; src.len()];
    let (ids, _) = beam_translate_with_score(
        t,
        store,
        &mem,
        &pad,
        tgt_vocab.lang_id(lang_tag)?,
        tgt_vocab,
        width,
        alpha,
    )?;
    tgt_vocab.detokenize(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use crate::optim::{AdamConfig, AdamW};
    use crate::rng::derive_rng;

    fn tiny_cfg() -> TranslationConfig {
        TranslationConfig {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 8,
            heads: 2,
            dropout: 0.0,
            label_smoothing: 0.0,
            max_len: 12,
        }
    }

    fn tiny_model(seed: u64, v_src: usize, v_tgt: usize) -> (Translator, ParamStore) {
        let t = Translator::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::new();
        t.init_params(&mut store, &mut derive_rng(seed, "trans-test"), v_src, v_tgt);
        (t, store)
    }

    #[test]
    fn vocab_round_trip_and_oov() {
        let v = TextVocab::build(["heute nacht", "morgen nacht"], &["de_DE"]).unwrap();
        let ids = v.tokenize("heute nacht");
        assert_eq!(v.detokenize(&ids).unwrap(), "heute nacht");
        assert_eq!(v.tokenize("unbekannt nacht")[0], UNK_ID);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.lang_id("de_DE").unwrap(), 3);
        assert!(v.lang_id("zh_CN").is_err());
        // sorted corpus tokens after the specials
        assert_eq!(v.token(4).unwrap(), "heute");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = TextVocab::build(["a b c"], &["de_DE", "zh_CN"]).unwrap();
        v.save(&path).unwrap();
        let loaded = TextVocab::load(&path).unwrap();
        assert_eq!(loaded, v);
        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(&lines[..5], &["<pad>", "<unk>", "</s>", "<de_DE>", "<zh_CN>"]);
    }

    #[test]
    fn vocab_load_rejects_broken_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<unk>\n<pad>\n</s>\n<de_DE>\na\n").unwrap();
        assert!(TextVocab::load(&path).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TranslationConfig::default().validate().is_ok());
        let bad = TranslationConfig { d_model: 10, heads: 4, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encoder_preserves_shape() {
        let (t, store) = tiny_model(1, 9, 9);
        let g = Graph::<f64>::new();
        let m = t.encode_tokens(&g, &store, &[4, 5, 3], &Mode::Eval).unwrap();
        assert_eq!(g.shape_of(m), vec![3, 8]);
    }

    #[test]
    fn appended_pad_does_not_change_unpadded_outputs() {
        let (t, store) = tiny_model(2, 9, 9);
        let g = Graph::<f64>::new();
        let short = t.encode_tokens(&g, &store, &[4, 5, 3], &Mode::Eval).unwrap();
        let long = t
            .encode_tokens(&g, &store, &[4, 5, 3, PAD_ID, PAD_ID], &Mode::Eval)
            .unwrap();
        let a = g.value(short);
        let b = g.value(long);
        for r in 0..3 {
            for c in 0..8 {
                assert!((a.at2(r, c) - b.at2(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let (t, store) = tiny_model(3, 9, 9);
        let run = |tgt_in: &[usize]| {
            let g = Graph::<f64>::new();
            let mem = t.encode_tokens(&g, &store, &[4, 3], &Mode::Eval).unwrap();
            let logits = t
                .decode(&g, &store, mem, &[false, false], tgt_in, &Mode::Eval)
                .unwrap();
            g.value(logits)
        };
        let a = run(&[3, 4, 5, 6]);
        let b = run(&[3, 4, 7, 8]);
        for r in 0..2 {
            for c in 0..9 {
                assert!((a.at2(r, c) - b.at2(r, c)).abs() < 1e-9, "row {r}");
            }
        }
        // later rows do depend on the changed input
        assert!((0..9).any(|c| (a.at2(2, c) - b.at2(2, c)).abs() > 1e-9));
    }

    #[test]
    fn loss_rejects_empty_target_and_is_nonnegative() {
        let (t, store) = tiny_model(4, 9, 9);
        let g = Graph::<f64>::new();
        assert!(matches!(
            t.gloss2text_loss(&g, &store, &[4, 3], &[], 3, &Mode::Eval),
            Err(Error::EmptySequence { .. })
        ));
        let loss = t
            .gloss2text_loss(&g, &store, &[4, 3], &[5, 6], 3, &Mode::Eval)
            .unwrap();
        assert!(g.value(loss).item() >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (t, mut store) = tiny_model(5, 7, 7);
        let src = [4usize, 5, 3];
        let tgt = [5usize, 6, 4];
        let loss_of = |st: &ParamStore| -> crate::error::Result<(Graph, Var)> {
            let g = Graph::new();
            let loss = t.gloss2text_loss(&g, st, &src, &tgt, 3, &Mode::Eval)?;
            Ok((g, loss))
        };
        let (g, loss) = loss_of(&store).unwrap();
        let analytic = g.backward(loss, &store).unwrap();
        let report = finite_difference_check(&mut store, &analytic, 1e-5, |st| {
            let (g, loss) = loss_of(st)?;
            Ok(g.value(loss).item())
        })
        .unwrap();
        assert!(report.max_abs_diff <= 1e-4, "worst {:?}", report.worst);
    }

    #[test]
    fn dropout_zero_matches_eval_and_training_is_seeded() {
        let (t, store) = tiny_model(6, 9, 9);
        let rng = RefCell::new(derive_rng(7, "dropout"));
        let g = Graph::<f64>::new();
        let eval = t
            .gloss2text_loss(&g, &store, &[4, 3], &[5], 3, &Mode::Eval)
            .unwrap();
        let train = t
            .gloss2text_loss(
                &g,
                &store,
                &[4, 3],
                &[5],
                3,
                &Mode::Train { dropout: 0.0, rng: &rng },
            )
            .unwrap();
        assert_eq!(g.value(eval), g.value(train));
    }

    fn beam_fixture() -> (Translator, ParamStore, TextVocab, Tensor, Vec<bool>) {
        let vocab = TextVocab::build(["aa bb"], &["de_DE"]).unwrap();
        assert_eq!(vocab.size(), 6);
        let cfg = TranslationConfig { max_len: 4, ..tiny_cfg() };
        let t = Translator::new(cfg).unwrap();
        let mut store = ParamStore::new();
        t.init_params(&mut store, &mut derive_rng(11, "beam"), 6, 6);
        let g = Graph::<f64>::inference();
        let memory = t.encode_tokens(&g, &store, &[4, 3], &Mode::Eval).unwrap();
        let mem = g.value(memory);
        (t, store, vocab, mem, vec![false, false])
    }

    /// Enumerates every generable sequence (tokens 4/5, optional EOS close,
    /// force-finish at the step cap) under the beam's scoring.
    fn exhaustive_best(
        t: &Translator,
        store: &ParamStore,
        vocab: &TextVocab,
        mem: &Tensor,
        pad: &[bool],
        alpha: f64,
    ) -> (Vec<usize>, f64) {
        let lang = vocab.lang_id("de_DE").unwrap();
        let max_steps = t.cfg.max_len - 1;
        let step_logps = |seq: &[usize]| -> Vec<f64> {
            let g = Graph::<f64>::inference();
            let m = g.constant(mem.clone());
            let mut dec_in = vec![lang];
            dec_in.extend_from_slice(seq);
            let logits = t.decode(&g, store, m, pad, &dec_in, &Mode::Eval).unwrap();
            let ls = g.value(g.log_softmax_rows(logits));
            ls.row(dec_in.len() - 1).to_vec()
        };
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut consider = |seq: &[usize], score: f64| {
            let better = match &best {
                None => true,
                Some((bseq, bscore)) => {
                    score > *bscore || (score == *bscore && seq < bseq.as_slice())
                }
            };
            if better {
                best = Some((seq.to_vec(), score));
            }
        };
        // walk the full generation tree
        fn walk(
            seq: &mut Vec<usize>,
            logp: f64,
            max_steps: usize,
            step_logps: &dyn Fn(&[usize]) -> Vec<f64>,
            alpha: f64,
            consider: &mut dyn FnMut(&[usize], f64),
        ) {
            if seq.len() == max_steps {
                let steps = seq.len().max(1) as f64;
                consider(seq, logp / steps.powf(alpha));
                return;
            }
            let row = step_logps(seq);
            let eos_logp = logp + row[EOS_ID];
            let steps = (seq.len() + 1) as f64;
            consider(seq, eos_logp / steps.powf(alpha));
            for tok in [4usize, 5] {
                seq.push(tok);
                walk(seq, logp + row[tok], max_steps, step_logps, alpha, consider);
                seq.pop();
            }
        }
        walk(&mut Vec::new(), 0.0, max_steps, &step_logps, alpha, &mut consider);
        best.expect("nonempty search space")
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        let (t, store, vocab, mem, pad) = beam_fixture();
        for alpha in [0.0, 1.0] {
            let (seq, score) = beam_translate_with_score(
                &t, &store, &mem, &pad, 3, &vocab, 64, alpha,
            )
            .unwrap();
            let (oseq, oscore) = exhaustive_best(&t, &store, &vocab, &mem, &pad, alpha);
            assert_eq!(seq, oseq, "alpha={alpha}");
            assert!((score - oscore).abs() < 1e-12);
        }
    }

    #[test]
    fn width_one_equals_stepwise_argmax() {
        let (t, store, vocab, mem, pad) = beam_fixture();
        let (seq, _) =
            beam_translate_with_score(&t, &store, &mem, &pad, 3, &vocab, 1, 1.0).unwrap();
        // replay greedily: at each step take the best allowed token
        let mut greedy: Vec<usize> = Vec::new();
        for _ in 0..t.cfg.max_len - 1 {
            let g = Graph::<f64>::inference();
            let m = g.constant(mem.clone());
            let mut dec_in = vec![3];
            dec_in.extend_from_slice(&greedy);
            let logits = t.decode(&g, &store, m, &pad, &dec_in, &Mode::Eval).unwrap();
            let ls = g.value(g.log_softmax_rows(logits));
            let row = ls.row(dec_in.len() - 1);
            let (tok, _) = row
                .iter()
                .enumerate()
                .filter(|(i, _)| *i == EOS_ID || !vocab.is_special(*i))
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap();
            if tok == EOS_ID {
                break;
            }
            greedy.push(tok);
        }
        assert_eq!(seq, greedy);
    }

    #[test]
    fn wider_beam_never_scores_worse() {
        let (t, store, vocab, mem, pad) = beam_fixture();
        let (_, narrow) =
            beam_translate_with_score(&t, &store, &mem, &pad, 3, &vocab, 1, 1.0).unwrap();
        let (_, wide) =
            beam_translate_with_score(&t, &store, &mem, &pad, 3, &vocab, 4, 1.0).unwrap();
        assert!(wide >= narrow - 1e-12);
    }

    #[test]
    fn predict_is_deterministic_and_special_free() {
        let src_vocab = TextVocab::build(["g01 g02"], &["de_DE"]).unwrap();
        let tgt_vocab = TextVocab::build(["im hund park"], &["de_DE"]).unwrap();
        let t = Translator::new(tiny_cfg()).unwrap();
        let mut store = ParamStore::<f64>::new();
        t.init_params(
            &mut store,
            &mut derive_rng(13, "predict"),
            src_vocab.size(),
            tgt_vocab.size(),
        );
        let a = gloss2text_predict(&t, &store, &src_vocab, &tgt_vocab, "g01 g02", "de_DE", 4, 1.0)
            .unwrap();
        let b = gloss2text_predict(&t, &store, &src_vocab, &tgt_vocab, "g01 g02", "de_DE", 4, 1.0)
            .unwrap();
        assert_eq!(a, b);
        for word in a.split_whitespace() {
            assert!(!word.starts_with('<'), "special token {word} leaked");
        }
        let empty = ParamStore::<f64>::new();
        assert!(matches!(
            gloss2text_predict(&t, &empty, &src_vocab, &tgt_vocab, "g01", "de_DE", 4, 1.0),
            Err(Error::CheckpointRequired(_))
        ));
    }

    #[test]
    fn single_pair_memorizes_below_threshold() {
        let (t, mut store) = tiny_model(17, 8, 8);
        let src = [4usize, 5, 3];
        let tgt = [6usize, 7, 5];
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut last = f64::INFINITY;
        for step in 0..500 {
            let g = Graph::new();
            let loss = t
                .gloss2text_loss(&g, &store, &src, &tgt, 3, &Mode::Eval)
                .unwrap();
            last = g.value(loss).item();
            if last < 0.01 {
                break;
            }
            let grads = g.backward(loss, &store).unwrap();
            opt.step(&mut store, &grads, |_| 3e-3).unwrap();
            let _ = step;
        }
        assert!(last < 0.01, "loss stuck at {last}");
    }
}
