//! Connectionist temporal classification: loss, gradient, decoders, and an
//! exhaustive-path oracle for testing.
//!
//! A frame-level posterior over `{blank} ∪ glosses` assigns probability to
//! alignment paths; collapsing a path (merge adjacent repeats, then drop
//! blanks) yields a gloss sequence. The loss of a target is the negative log
//! of its total path mass. Blank is always id 0; gloss ids are 1..=K.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{log_softmax_in_place, Graph, Var};
use crate::numerics::scalar::{log_add_exp, s, Scalar};
use crate::numerics::tensor::Tensor;

/// Gloss ids, each in 1..=K.
pub type GlossSequence = Vec<usize>;

pub const BLANK_ID: usize = 0;

/// Gloss inventory. Id 0 is reserved for blank and never names a gloss;
/// ids 1..=K map onto `labels` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossVocab {
    labels: Vec<String>,
}

impl GlossVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid gloss label {l:?}")));
            }
            if !seen.insert(l.clone()) {
                return Err(Error::Config(format!("duplicate gloss label {l:?}")));
            }
        }
        Ok(GlossVocab { labels })
    }

    /// K, the number of glosses (excluding blank).
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> Result<&str> {
        if id == BLANK_ID || id > self.labels.len() {
            return Err(Error::VocabId {
                id,
                vocab_size: self.labels.len(),
            });
        }
        Ok(&self.labels[id - 1])
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<GlossSequence> {
        text.split_whitespace()
            .map(|tok| {
                self.id(tok)
                    .ok_or_else(|| Error::Corpus(format!("gloss {tok:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, seq: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = seq.iter().map(|&id| self.label(id)).collect();
        Ok(words?.join(" "))
    }
}

/// Frame-level distribution over `{blank} ∪ glosses`: `probs[T'×(K+1)]`,
/// column 0 blank, each row a probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GlossPosterior<S: Scalar = f64> {
    probs: Tensor<S>,
}

impl<S: Scalar> GlossPosterior<S> {
    /// Validates rows: entries in [0,1], each summing to 1 (tolerance 1e-9,
    /// widened to a few ulps for narrower scalar types).
    pub fn new(probs: Tensor<S>) -> Result<Self> {
        if probs.rank() != 2 || probs.cols() < 1 {
            return Err(Error::ShapeMismatch {
                op: "gloss_posterior",
                lhs: probs.shape().to_vec(),
                rhs: vec![0, 1],
            });
        }
        let tol = s::<S>(1e-9).max(S::epsilon() * s::<S>(64.0));
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| p < S::zero() || p > S::one() || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "posterior row {i} has entries outside [0, 1]"
                )));
            }
            let sum: S = row.iter().copied().sum();
            if (sum - S::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "posterior row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(GlossPosterior { probs })
    }

    /// Softmax over each row of raw scores; always a valid posterior.
    pub fn from_logits(logits: &Tensor<S>) -> Result<Self> {
        if logits.rank() != 2 || logits.cols() < 1 {
            return Err(Error::ShapeMismatch {
                op: "gloss_posterior",
                lhs: logits.shape().to_vec(),
                rhs: vec![0, 1],
            });
        }
        let mut probs = logits.clone();
        for i in 0..probs.rows() {
            crate::numerics::graph::softmax_in_place(probs.row_mut(i));
        }
        Ok(GlossPosterior { probs })
    }

    /// T', the number of (downsampled) frames.
    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    /// K, the gloss vocabulary size (columns minus blank).
    pub fn vocab_size(&self) -> usize {
        self.probs.cols() - 1
    }

    pub fn probs(&self) -> &Tensor<S> {
        &self.probs
    }

    fn log_probs(&self) -> Tensor<S> {
        self.probs.map(|p| p.ln())
    }
}

/// Removes adjacent repeats, then blanks: the path-to-sequence map B⁻¹.
pub fn collapse(path: &[usize]) -> GlossSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK_ID {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn validate_target(target: &[usize], k: usize) -> Result<()> {
    for &id in target {
        if id == BLANK_ID || id > k {
            return Err(Error::VocabId { id, vocab_size: k });
        }
    }
    Ok(())
}

/// Blank-interleaved extended target: `[−, g₁, −, g₂, …, −]`, length 2|G|+1.
fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK_ID);
    for &g in target {
        ext.push(g);
        ext.push(BLANK_ID);
    }
    ext
}

/// Forward lattice α in log space. `alpha[t][s]` is the log mass of all
/// length-(t+1) path prefixes ending in extended state s, including frame
/// t's emission.
fn forward_lattice<S: Scalar>(logp: &Tensor<S>, ext: &[usize]) -> Vec<Vec<S>> {
    let t_frames = logp.rows();
    let n = ext.len();
    let ninf = S::neg_infinity();
    let mut alpha = vec![vec![ninf; n]; t_frames];
    alpha[0][0] = logp.at2(0, ext[0]);
    if n > 1 {
        alpha[0][1] = logp.at2(0, ext[1]);
    }
    for t in 1..t_frames {
        for sx in 0..n {
            let mut acc = alpha[t - 1][sx];
            if sx >= 1 {
                acc = log_add_exp(acc, alpha[t - 1][sx - 1]);
            }
            if sx >= 2 && ext[sx] != BLANK_ID && ext[sx] != ext[sx - 2] {
                acc = log_add_exp(acc, alpha[t - 1][sx - 2]);
            }
            alpha[t][sx] = acc + logp.at2(t, ext[sx]);
        }
    }
    alpha
}

/// Backward lattice β in log space. `beta[t][s]` is the log mass of all path
/// suffixes over frames t+1.. given state s at frame t; frame t's emission is
/// excluded, so α+β at any frame sums to the total sequence mass.
fn backward_lattice<S: Scalar>(logp: &Tensor<S>, ext: &[usize]) -> Vec<Vec<S>> {
    let t_frames = logp.rows();
    let n = ext.len();
    let ninf = S::neg_infinity();
    let mut beta = vec![vec![ninf; n]; t_frames];
    beta[t_frames - 1][n - 1] = S::zero();
    if n > 1 {
        beta[t_frames - 1][n - 2] = S::zero();
    }
    for t in (0..t_frames - 1).rev() {
        for sx in 0..n {
            let mut acc = beta[t + 1][sx] + logp.at2(t + 1, ext[sx]);
            if sx + 1 < n {
                acc = log_add_exp(acc, beta[t + 1][sx + 1] + logp.at2(t + 1, ext[sx + 1]));
            }
            if sx + 2 < n && ext[sx + 2] != BLANK_ID && ext[sx + 2] != ext[sx] {
                acc = log_add_exp(acc, beta[t + 1][sx + 2] + logp.at2(t + 1, ext[sx + 2]));
            }
            beta[t][sx] = acc;
        }
    }
    beta
}

fn total_log_mass<S: Scalar>(alpha: &[Vec<S>], ext_len: usize) -> S {
    let last = alpha.last().expect("nonempty lattice");
    let mut ll = last[ext_len - 1];
    if ext_len > 1 {
        ll = log_add_exp(ll, last[ext_len - 2]);
    }
    ll
}

/// Negative log likelihood −ln p(target | posterior), marginalized over all
/// viable alignment paths. +∞ when no path exists (e.g. more labels than
/// frames). Zero frames with an empty target cost 0.
pub fn ctc_forward<S: Scalar>(post: &GlossPosterior<S>, target: &[usize]) -> Result<S> {
    validate_target(target, post.vocab_size())?;
    if post.frames() == 0 {
        return Ok(if target.is_empty() { S::zero() } else { S::infinity() });
    }
    let ext = extended(target);
    let alpha = forward_lattice(&post.log_probs(), &ext);
    Ok(-total_log_mass(&alpha, ext.len()))
}

/// Gradient of `ctc_forward(softmax(logits), target)` with respect to the
/// logits: softmax minus the alignment posterior, so each row sums to zero.
pub fn ctc_gradient<S: Scalar>(logits: &Tensor<S>, target: &[usize]) -> Result<Tensor<S>> {
    if logits.rank() != 2 || logits.cols() < 1 {
        return Err(Error::ShapeMismatch {
            op: "ctc_gradient",
            lhs: logits.shape().to_vec(),
            rhs: vec![0, 1],
        });
    }
    let k = logits.cols() - 1;
    validate_target(target, k)?;
    let t_frames = logits.rows();
    if t_frames == 0 {
        if target.is_empty() {
            return Ok(Tensor::zeros(&[0, k + 1]));
        }
        return Err(Error::InfeasibleTarget { frames: 0 });
    }
    let mut logp = logits.clone();
    for i in 0..t_frames {
        log_softmax_in_place(logp.row_mut(i));
    }
    let ext = extended(target);
    let alpha = forward_lattice(&logp, &ext);
    let beta = backward_lattice(&logp, &ext);
    let log_z = total_log_mass(&alpha, ext.len());
    if log_z == S::neg_infinity() {
        return Err(Error::InfeasibleTarget { frames: t_frames });
    }
    let mut grad = Tensor::zeros(&[t_frames, k + 1]);
    for t in 0..t_frames {
        // alignment posterior over classes at frame t
        let mut q = vec![S::zero(); k + 1];
        for (sx, &label) in ext.iter().enumerate() {
            let w = alpha[t][sx] + beta[t][sx] - log_z;
            if w != S::neg_infinity() {
                q[label] += w.exp();
            }
        }
        for (c, &qc) in q.iter().enumerate() {
            grad.row_mut(t)[c] = logp.at2(t, c).exp() - qc;
        }
    }
    Ok(grad)
}

/// Per-frame argmax (ties toward the lowest id), then collapse.
pub fn ctc_greedy_decode<S: Scalar>(post: &GlossPosterior<S>) -> GlossSequence {
    let probs = post.probs();
    let mut path = Vec::with_capacity(post.frames());
    for t in 0..post.frames() {
        let row = probs.row(t);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        path.push(best);
    }
    collapse(&path)
}

#[derive(Clone, Copy)]
struct PrefixMass<S: Scalar> {
    /// Log mass of paths producing this prefix and ending in blank.
    blank: S,
    /// Log mass of paths producing this prefix and ending in its last label.
    label: S,
}

impl<S: Scalar> PrefixMass<S> {
    fn empty() -> Self {
        PrefixMass {
            blank: S::neg_infinity(),
            label: S::neg_infinity(),
        }
    }

    fn total(&self) -> S {
        log_add_exp(self.blank, self.label)
    }
}

/// Prefix beam search returning the best sequence and the log of its
/// accumulated (path-marginalized) probability mass.
///
/// Prefixes reaching the same label sequence merge their mass, so the score
/// approximates the true marginal from below; ties rank lexicographically
/// by gloss ids.
pub fn ctc_beam_decode_with_score<S: Scalar>(
    post: &GlossPosterior<S>,
    width: usize,
) -> Result<(GlossSequence, S)> {
    if width < 1 {
        return Err(Error::InvalidArgument(
            "beam width must be at least 1".to_string(),
        ));
    }
    let k = post.vocab_size();
    let logp = post.log_probs();
    let mut beams: BTreeMap<GlossSequence, PrefixMass<S>> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        PrefixMass {
            blank: S::zero(),
            label: S::neg_infinity(),
        },
    );
    for t in 0..post.frames() {
        let mut next: BTreeMap<GlossSequence, PrefixMass<S>> = BTreeMap::new();
        for (prefix, mass) in &beams {
            let total = mass.total();
            // blank keeps the prefix and ends it in blank
            let slot = next.entry(prefix.clone()).or_insert_with(PrefixMass::empty);
            slot.blank = log_add_exp(slot.blank, total + logp.at2(t, BLANK_ID));
            // repeating the last label without an intervening blank also
            // keeps the prefix (adjacent repeats merge)
            if let Some(&last) = prefix.last() {
                let slot = next.entry(prefix.clone()).or_insert_with(PrefixMass::empty);
                slot.label = log_add_exp(slot.label, mass.label + logp.at2(t, last));
            }
            for c in 1..=k {
                // extending with the last label requires a blank in between,
                // so only the blank-ending mass carries over
                let src = if prefix.last() == Some(&c) { mass.blank } else { total };
                if src == S::neg_infinity() {
                    continue;
                }
                let mut ext = Vec::with_capacity(prefix.len() + 1);
                ext.extend_from_slice(prefix);
                ext.push(c);
                let slot = next.entry(ext).or_insert_with(PrefixMass::empty);
                slot.label = log_add_exp(slot.label, src + logp.at2(t, c));
            }
        }
        // rank by mass descending; the stable sort keeps the map's
        // lexicographic order among exact ties
        let mut ranked: Vec<_> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total()
                .partial_cmp(&a.1.total())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        ranked.truncate(width);
        beams = ranked.into_iter().collect();
    }
    let mut best: Option<(&GlossSequence, S)> = None;
    for (seq, mass) in &beams {
        let total = mass.total();
        match best {
            Some((_, bs)) if total <= bs => {}
            _ => best = Some((seq, total)),
        }
    }
    let (seq, score) = best.expect("beam never empty");
    Ok((seq.clone(), score))
}

/// Prefix beam search; see [`ctc_beam_decode_with_score`].
pub fn ctc_beam_decode<S: Scalar>(post: &GlossPosterior<S>, width: usize) -> Result<GlossSequence> {
    Ok(ctc_beam_decode_with_score(post, width)?.0)
}

/// Fewest frames that can emit `target`: one per label plus a separating
/// blank between equal neighbors.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Decoder selection carried through prediction and evaluation paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtcDecode {
    Greedy,
    Beam(usize),
}

impl CtcDecode {
    pub fn run<S: Scalar>(&self, post: &GlossPosterior<S>) -> Result<GlossSequence> {
        match self {
            CtcDecode::Greedy => Ok(ctc_greedy_decode(post)),
            CtcDecode::Beam(width) => ctc_beam_decode(post, *width),
        }
    }
}

const ORACLE_MAX_FRAMES: usize = 8;
const ORACLE_MAX_VOCAB: usize = 4;

/// Exact per-sequence marginals by enumerating all (K+1)^T' paths.
/// Refuses instances beyond T'≤8, K≤4.
pub fn ctc_brute_force_marginals<S: Scalar>(
    post: &GlossPosterior<S>,
) -> Result<BTreeMap<GlossSequence, S>> {
    let t_frames = post.frames();
    let k = post.vocab_size();
    if t_frames > ORACLE_MAX_FRAMES || k > ORACLE_MAX_VOCAB {
        return Err(Error::EnumerationBound {
            frames: t_frames,
            vocab_size: k,
        });
    }
    let probs = post.probs();
    let mut marginals: BTreeMap<GlossSequence, S> = BTreeMap::new();
    let mut path = vec![0usize; t_frames];
    loop {
        let mut p = S::one();
        for (t, &c) in path.iter().enumerate() {
            p *= probs.at2(t, c);
        }
        *marginals.entry(collapse(&path)).or_insert_with(S::zero) += p;
        // odometer over base K+1
        let mut pos = 0;
        loop {
            if pos == t_frames {
                return Ok(marginals);
            }
            path[pos] += 1;
            if path[pos] <= k {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// MAP sequence by exhaustive enumeration: (best sequence, its marginal
/// probability, total mass over all sequences). Ties go to the
/// lexicographically smallest sequence. Total mass is 1 up to rounding for
/// any valid posterior.
pub fn ctc_brute_force_oracle<S: Scalar>(
    post: &GlossPosterior<S>,
) -> Result<(GlossSequence, S, S)> {
    let marginals = ctc_brute_force_marginals(post)?;
    let mut total = S::zero();
    let mut best_seq: Option<&GlossSequence> = None;
    let mut best_p = S::neg_infinity();
    for (seq, &p) in &marginals {
        total += p;
        if p > best_p {
            best_p = p;
            best_seq = Some(seq);
        }
    }
    Ok((best_seq.expect("at least the empty sequence").clone(), best_p, total))
}

/// CTC loss as a graph node over raw classifier scores. The backward pass
/// uses the analytic softmax-minus-alignment-posterior form rather than
/// differentiating the lattice recursion.
pub fn ctc_loss<S: Scalar>(graph: &Graph<S>, logits: Var, target: &[usize]) -> Result<Var> {
    let lv = graph.value(logits);
    let post = GlossPosterior::from_logits(&lv)?;
    let loss = ctc_forward(&post, target)?;
    if !loss.is_finite() {
        return Err(Error::InfeasibleTarget { frames: lv.rows() });
    }
    let grad = ctc_gradient(&lv, target)?;
    Ok(graph.custom(&[logits], Tensor::scalar(loss), move |up| {
        let mut out = grad.clone();
        out.scale_in_place(up.item());
        vec![out]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param::ParamStore;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn posterior(rows: &[Vec<f64>]) -> GlossPosterior {
        GlossPosterior::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn random_posterior(rng: &mut impl Rng, t: usize, k: usize) -> GlossPosterior {
        let mut rows = Vec::with_capacity(t);
        for _ in 0..t {
            let mut row: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            rows.push(row);
        }
        posterior(&rows)
    }

    #[test]
    fn vocab_rejects_duplicates_and_blank_like_labels() {
        assert!(GlossVocab::new(vec!["a".into(), "a".into()]).is_err());
        assert!(GlossVocab::new(vec!["a b".into()]).is_err());
        let v = GlossVocab::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.id("b"), Some(2));
        assert!(v.label(0).is_err());
        assert_eq!(v.encode("b a b").unwrap(), vec![2, 1, 2]);
        assert_eq!(v.decode(&[2, 1]).unwrap(), "b a");
    }

    #[test]
    fn posterior_validation() {
        // rows must sum to one
        let bad = Tensor::from_rows(&[vec![0.5, 0.4]]).unwrap();
        assert!(GlossPosterior::new(bad).is_err());
        let neg = Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap();
        assert!(GlossPosterior::new(neg).is_err());
        let ok = Tensor::from_rows(&[vec![0.25, 0.75]]).unwrap();
        assert!(GlossPosterior::new(ok).is_ok());
    }

    #[test]
    fn forward_single_frame_single_label() {
        // T'=1: the only viable path is the label itself
        let post = posterior(&[vec![0.3, 0.7]]);
        let loss = ctc_forward(&post, &[1]).unwrap();
        assert_abs_diff_eq!(loss, -(0.7f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn forward_two_frames_matches_path_sum() {
        // T'=2, K=1, target [a]: paths aa, a−, −a
        let post = posterior(&[vec![0.4, 0.6], vec![0.2, 0.8]]);
        let expected: f64 = 0.6 * 0.8 + 0.6 * 0.2 + 0.4 * 0.8;
        let loss = ctc_forward(&post, &[1]).unwrap();
        assert_abs_diff_eq!(loss, -expected.ln(), epsilon = 1e-12);
    }

    #[test]
    fn forward_infeasible_is_infinite() {
        let post = posterior(&[vec![0.5, 0.25, 0.25]]);
        // two labels cannot fit one frame
        assert_eq!(ctc_forward(&post, &[1, 2]).unwrap(), f64::INFINITY);
        // adjacent repeat needs a separating blank: [a,a] needs ≥3 frames
        let post2 = posterior(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(ctc_forward(&post2, &[1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn forward_zero_frames() {
        let post = GlossPosterior::new(Tensor::<f64>::zeros(&[0, 3])).unwrap();
        assert_eq!(ctc_forward(&post, &[]).unwrap(), 0.0);
        assert_eq!(ctc_forward(&post, &[1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn forward_rejects_blank_in_target() {
        let post = posterior(&[vec![0.5, 0.5]]);
        assert!(matches!(
            ctc_forward(&post, &[0]).unwrap_err(),
            Error::VocabId { id: 0, .. }
        ));
        assert!(matches!(
            ctc_forward(&post, &[2]).unwrap_err(),
            Error::VocabId { id: 2, vocab_size: 1 }
        ));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = derive_rng(11, "ctc-grad-test");
        for _ in 0..20 {
            let t = rng.gen_range(1..=6);
            let logits_data: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits = Tensor::new(vec![t, 4], logits_data).unwrap();
            let len = rng.gen_range(1..=t.min(3));
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=3)).collect();
            if let Ok(grad) = ctc_gradient(&logits, &target) {
                for i in 0..t {
                    let sum: f64 = grad.row(i).iter().sum();
                    assert!(sum.abs() < 1e-10, "row {i} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn gradient_symmetric_for_uniform_frames() {
        // uniform logits, T'=2, target [a]: swapping frames is a symmetry
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let grad = ctc_gradient(&logits, &[1]).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(grad.at2(0, c), grad.at2(1, c), epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = derive_rng(5, "ctc-fd");
        let h = 1e-5;
        for _ in 0..10 {
            let t = 5;
            let k = 4;
            let data: Vec<f64> = (0..t * (k + 1)).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let logits = Tensor::new(vec![t, k + 1], data).unwrap();
            let len = rng.gen_range(1..=2);
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=k)).collect();
            let grad = ctc_gradient(&logits, &target).unwrap();
            let mut max_rel = 0.0f64;
            for idx in 0..t * (k + 1) {
                let mut plus = logits.clone();
                plus.data_mut()[idx] += h;
                let mut minus = logits.clone();
                minus.data_mut()[idx] -= h;
                let lp = ctc_forward(&GlossPosterior::from_logits(&plus).unwrap(), &target).unwrap();
                let lm = ctc_forward(&GlossPosterior::from_logits(&minus).unwrap(), &target).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let a = grad.data()[idx];
                let rel = (a - fd).abs() / fd.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-4, "max relative error {max_rel}");
        }
    }

    #[test]
    fn gradient_infeasible_is_error() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            ctc_gradient(&logits, &[1, 2]).unwrap_err(),
            Error::InfeasibleTarget { frames: 1 }
        ));
    }

    #[test]
    fn greedy_collapse_rules() {
        // argmax frames a a − b → "a b"
        let post = posterior(&[
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.6, 0.2],
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.2, 0.7],
        ]);
        assert_eq!(ctc_greedy_decode(&post), vec![1, 2]);
        // all blank → empty
        let blank = posterior(&[vec![0.9, 0.1], vec![0.8, 0.2]]);
        assert_eq!(ctc_greedy_decode(&blank), Vec::<usize>::new());
        // a − a → "a a"
        let sep = posterior(&[vec![0.1, 0.9], vec![0.9, 0.1], vec![0.1, 0.9]]);
        assert_eq!(ctc_greedy_decode(&sep), vec![1, 1]);
    }

    #[test]
    fn greedy_ties_take_lowest_id() {
        let post = posterior(&[vec![0.4, 0.4, 0.2]]);
        // blank and gloss 1 tie; blank (id 0) wins → empty output
        assert_eq!(ctc_greedy_decode(&post), Vec::<usize>::new());
        let post2 = posterior(&[vec![0.2, 0.4, 0.4]]);
        assert_eq!(ctc_greedy_decode(&post2), vec![1]);
    }

    #[test]
    fn beam_width_zero_rejected() {
        let post = posterior(&[vec![0.5, 0.5]]);
        assert!(matches!(
            ctc_beam_decode(&post, 0).unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn beam_empty_input_gives_empty_sequence() {
        let post = GlossPosterior::new(Tensor::<f64>::zeros(&[0, 4])).unwrap();
        let (seq, score) = ctc_beam_decode_with_score(&post, 3).unwrap();
        assert!(seq.is_empty());
        assert_eq!(score, 0.0);
    }

    #[test]
    fn beam_one_hot_posterior_is_width_independent() {
        let post = posterior(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let expect = vec![1, 1, 2];
        for width in 1..=10 {
            assert_eq!(ctc_beam_decode(&post, width).unwrap(), expect, "width {width}");
        }
    }

    #[test]
    fn beam_matches_oracle_when_wide_enough() {
        let mut rng = derive_rng(23, "beam-oracle");
        for _ in 0..50 {
            let t = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=3);
            let post = random_posterior(&mut rng, t, k);
            let marginals = ctc_brute_force_marginals(&post).unwrap();
            let (best, _, _) = ctc_brute_force_oracle(&post).unwrap();
            let seq = ctc_beam_decode(&post, marginals.len()).unwrap();
            assert_eq!(seq, best, "t={t} k={k}");
        }
    }

    #[test]
    fn oracle_trivial_two_paths() {
        let post = posterior(&[vec![0.6, 0.4]]);
        let (best, p, total) = ctc_brute_force_oracle(&post).unwrap();
        assert!(best.is_empty());
        assert_abs_diff_eq!(p, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_total_mass_is_one() {
        let mut rng = derive_rng(3, "oracle-mass");
        for _ in 0..20 {
            let t = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=4);
            let post = random_posterior(&mut rng, t, k);
            let (_, _, total) = ctc_brute_force_oracle(&post).unwrap();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let post = GlossPosterior::from_logits(&Tensor::<f64>::zeros(&[9, 3])).unwrap();
        assert!(matches!(
            ctc_brute_force_oracle(&post).unwrap_err(),
            Error::EnumerationBound { frames: 9, .. }
        ));
        let wide = GlossPosterior::from_logits(&Tensor::<f64>::zeros(&[3, 6])).unwrap();
        assert!(matches!(
            ctc_brute_force_oracle(&wide).unwrap_err(),
            Error::EnumerationBound { vocab_size: 5, .. }
        ));
    }

    #[test]
    fn forward_agrees_with_oracle_marginals() {
        let mut rng = derive_rng(41, "forward-oracle");
        for _ in 0..50 {
            let t = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=4);
            let post = random_posterior(&mut rng, t, k);
            let marginals = ctc_brute_force_marginals(&post).unwrap();
            let len = rng.gen_range(0..=3usize);
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=k)).collect();
            let marginal = marginals.get(&target).copied().unwrap_or(0.0);
            let loss = ctc_forward(&post, &target).unwrap();
            assert!(
                ((-loss).exp() - marginal).abs() <= 1e-9,
                "t={t} k={k} target={target:?}"
            );
        }
    }

    #[test]
    fn loss_node_backpropagates_analytic_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "logits",
            Tensor::from_rows(&[vec![0.5, -0.2, 0.1], vec![-0.3, 0.4, 0.0]]).unwrap(),
            true,
        );
        let g = Graph::new();
        let logits = store.leaf(&g, "logits").unwrap();
        let loss = ctc_loss(&g, logits, &[1]).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let direct = ctc_gradient(store.tensor("logits").unwrap(), &[1]).unwrap();
        assert!(grads["logits"].max_abs_diff(&direct) < 1e-15);
        // doubled upstream weight doubles the gradient
        let g2 = Graph::new();
        let logits2 = store.leaf(&g2, "logits").unwrap();
        let loss2 = g2.scale(ctc_loss(&g2, logits2, &[1]).unwrap(), 2.0);
        let grads2 = g2.backward(loss2, &store).unwrap();
        let mut doubled = direct.clone();
        doubled.scale_in_place(2.0);
        assert!(grads2["logits"].max_abs_diff(&doubled) < 1e-15);
    }

    #[test]
    fn loss_node_rejects_infeasible_target() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            ctc_loss(&g, logits, &[1, 2]).unwrap_err(),
            Error::InfeasibleTarget { .. }
        ));
    }

    // ---- property tests ----

    fn arb_posterior(
        max_t: usize,
        max_k: usize,
    ) -> impl Strategy<Value = GlossPosterior> {
        (1..=max_t, 1..=max_k).prop_flat_map(|(t, k)| {
            proptest::collection::vec(
                proptest::collection::vec(0.01f64..1.0, k + 1),
                t,
            )
            .prop_map(|mut rows| {
                for row in &mut rows {
                    let sum: f64 = row.iter().sum();
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                posterior(&rows)
            })
        })
    }

    proptest! {
        #[test]
        fn prop_forward_equals_oracle(post in arb_posterior(6, 4), raw in proptest::collection::vec(1usize..=4, 0..=3)) {
            let k = post.vocab_size();
            let target: Vec<usize> = raw.into_iter().map(|g| (g - 1) % k + 1).collect();
            let marginals = ctc_brute_force_marginals(&post).unwrap();
            let marginal = marginals.get(&target).copied().unwrap_or(0.0);
            let loss = ctc_forward(&post, &target).unwrap();
            prop_assert!(((-loss).exp() - marginal).abs() <= 1e-9);
        }

        #[test]
        fn prop_forward_permutation_covariant(post in arb_posterior(5, 3), raw in proptest::collection::vec(1usize..=3, 1..=3), shift in 0usize..3) {
            let k = post.vocab_size();
            let target: Vec<usize> = raw.into_iter().map(|g| (g - 1) % k + 1).collect();
            // cyclic relabeling σ(c) = ((c − 1 + shift) mod K) + 1
            let sigma = |c: usize| (c - 1 + shift) % k + 1;
            let probs = post.probs();
            let mut rows = Vec::new();
            for t in 0..post.frames() {
                let mut row = vec![0.0; k + 1];
                row[0] = probs.at2(t, 0);
                for c in 1..=k {
                    row[sigma(c)] = probs.at2(t, c);
                }
                rows.push(row);
            }
            let permuted = posterior(&rows);
            let mapped: Vec<usize> = target.iter().map(|&c| sigma(c)).collect();
            let a = ctc_forward(&post, &target).unwrap();
            let b = ctc_forward(&permuted, &mapped).unwrap();
            if a.is_finite() {
                prop_assert!((a - b).abs() < 1e-9);
            } else {
                prop_assert!(!b.is_finite());
            }
        }

        #[test]
        fn prop_gradient_rows_sum_zero(post in arb_posterior(6, 4), raw in proptest::collection::vec(1usize..=4, 1..=3)) {
            let k = post.vocab_size();
            let target: Vec<usize> = raw.into_iter().map(|g| (g - 1) % k + 1).collect();
            // treat log-probabilities as logits; softmax recovers the posterior
            let logits = post.probs().map(|p| p.ln());
            if let Ok(grad) = ctc_gradient(&logits, &target) {
                for i in 0..grad.rows() {
                    let sum: f64 = grad.row(i).iter().sum();
                    prop_assert!(sum.abs() < 1e-10);
                }
            }
        }

        #[test]
        fn prop_beam_widening_monotone(post in arb_posterior(5, 3)) {
            let (_, narrow) = ctc_beam_decode_with_score(&post, 1).unwrap();
            let (_, wide) = ctc_beam_decode_with_score(&post, 10).unwrap();
            prop_assert!(wide >= narrow - 1e-12);
        }
    }
}
