//! Corpus plumbing: synthetic triplet generation with a known compositional
//! gloss→text grammar, binary feature files, and JSONL manifests shaped like
//! exported PHOENIX/CSL-style triplets.
//!
//! Synthetic features are built from one fixed random unit prototype per
//! gloss, repeated for a fixed number of frames and perturbed with Gaussian
//! noise, then rounded through f32 so a write→load round trip is bit-exact.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::Tensor;

/// Per-frame feature sequence standing in for a sign video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    values: Tensor,
}

impl VideoFeatures {
    /// At least 4 frames (one downsampled step) and finite values.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.cols() == 0 {
            return Err(Error::ShapeMismatch {
                op: "video_features",
                lhs: values.shape().to_vec(),
                rhs: vec![4, 1],
            });
        }
        if values.rows() < 4 {
            return Err(Error::InvalidArgument(format!(
                "video needs at least 4 frames, got {}",
                values.rows()
            )));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite { op: "video_features" });
        }
        Ok(VideoFeatures { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// One (video, gloss, text) sample. Gloss is kept as labels; id lookup
/// happens against whatever vocabulary a model was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub features: VideoFeatures,
    pub gloss: Vec<String>,
    pub text: String,
}

/// Recipe for the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Gloss vocabulary size K.
    pub vocab_size: usize,
    /// Frames per gloss segment; divisible by 4 so segments survive the
    /// encoder's ×4 downsampling cleanly.
    pub frames_per_gloss: usize,
    /// Feature dimension D_in.
    pub feature_dim: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 20,
            frames_per_gloss: 8,
            feature_dim: 64,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

pub const MIN_GLOSS_LEN: usize = 2;
pub const MAX_GLOSS_LEN: usize = 6;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "synthetic vocabulary needs at least 2 glosses, got {}",
                self.vocab_size
            )));
        }
        if self.frames_per_gloss == 0 || !self.frames_per_gloss.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "frames_per_gloss must be a positive multiple of 4, got {}",
                self.frames_per_gloss
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".to_string()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Gloss labels "g01".."gK" for ids 1..=K.
    pub fn gloss_labels(&self) -> Vec<String> {
        (1..=self.vocab_size).map(|i| format!("g{i:02}")).collect()
    }

    /// The fixed unit prototype vectors, row id−1 per gloss id, `[K×D_in]`.
    pub fn prototypes(&self) -> Tensor {
        let mut rng = derive_rng(self.seed, "prototypes");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rows = Vec::with_capacity(self.vocab_size);
        for _ in 0..self.vocab_size {
            let mut v: Vec<f64> = (0..self.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= norm;
            }
            rows.push(v);
        }
        Tensor::from_rows(&rows).expect("consistent prototype shape")
    }
}

/// Deterministic gloss→text grammar: adjacent pairs swap, the sentence opens
/// with "im", and "und" separates the pair chunks. Distinct gloss sequences
/// always map to distinct texts (chunk boundaries are recoverable because
/// every sentence length corresponds to exactly one gloss length).
pub fn gloss_to_text(gloss: &[String]) -> String {
    let mut chunks: Vec<Vec<&str>> = Vec::new();
    for pair in gloss.chunks(2) {
        match pair {
            [a, b] => chunks.push(vec![b.as_str(), a.as_str()]),
            [a] => chunks.push(vec![a.as_str()]),
            _ => unreachable!("chunks(2)"),
        }
    }
    let mut words = vec!["im"];
    for (i, chunk) in chunks.iter().enumerate() {
        if i > 0 {
            words.push("und");
        }
        words.extend(chunk);
    }
    words.join(" ")
}

/// Inverse of [`gloss_to_text`] on its image; `None` for any other string.
pub fn text_to_gloss(text: &str) -> Option<Vec<String>> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.first() != Some(&"im") {
        return None;
    }
    let chunks: Vec<&[&str]> = tokens[1..].split(|&t| t == "und").collect();
    let mut gloss = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        match *chunk {
            [b, a] => {
                gloss.push((*a).to_string());
                gloss.push((*b).to_string());
            }
            // only the final chunk may be a singleton
            [a] if i + 1 == chunks.len() => gloss.push((*a).to_string()),
            _ => return None,
        }
    }
    if gloss.is_empty() {
        None
    } else {
        Some(gloss)
    }
}

/// The three generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Triplet>,
    pub dev: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Draws gloss sequences (length uniform in [2,6], ids uniform over the
/// vocabulary), renders features from prototypes plus noise, and applies the
/// grammar. Splits never share a gloss sequence. Deterministic in the seed.
pub fn generate_corpus(
    spec: &SyntheticSpec,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
) -> Result<Corpus> {
    spec.validate()?;
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "every split needs at least one sample".to_string(),
        ));
    }
    let labels = spec.gloss_labels();
    let prototypes = spec.prototypes();
    let mut seq_rng = derive_rng(spec.seed, "sequences");
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut draw_split = |n: usize| -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 200 * n + 10_000 {
                return Err(Error::Corpus(
                    "cannot draw enough distinct gloss sequences; enlarge the vocabulary"
                        .to_string(),
                ));
            }
            let len = seq_rng.gen_range(MIN_GLOSS_LEN..=MAX_GLOSS_LEN);
            let seq: Vec<usize> = (0..len)
                .map(|_| seq_rng.gen_range(1..=spec.vocab_size))
                .collect();
            if seen.insert(seq.clone()) {
                out.push(seq);
            }
        }
        Ok(out)
    };
    let train_seqs = draw_split(n_train)?;
    let dev_seqs = draw_split(n_dev)?;
    let test_seqs = draw_split(n_test)?;
    let render = |split: &str, seqs: Vec<Vec<usize>>| -> Result<Vec<Triplet>> {
        seqs.into_iter()
            .enumerate()
            .map(|(i, seq)| {
                let id = format!("{split}-{i:04}");
                let gloss: Vec<String> = seq.iter().map(|&g| labels[g - 1].clone()).collect();
                let text = gloss_to_text(&gloss);
                let mut noise_rng = derive_rng(spec.seed, &format!("noise/{id}"));
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let t = seq.len() * spec.frames_per_gloss;
                let mut values = Tensor::zeros(&[t, spec.feature_dim]);
                for (pos, &g) in seq.iter().enumerate() {
                    let proto = prototypes.row(g - 1);
                    for f in 0..spec.frames_per_gloss {
                        let row = values.row_mut(pos * spec.frames_per_gloss + f);
                        for (slot, &p) in row.iter_mut().zip(proto) {
                            let v = p + spec.noise_sigma * normal.sample(&mut noise_rng);
                            // f32 is the on-disk precision; rounding here makes
                            // the in-memory corpus identical to a reloaded one
                            *slot = v as f32 as f64;
                        }
                    }
                }
                Ok(Triplet {
                    id,
                    features: VideoFeatures::new(values)?,
                    gloss,
                    text,
                })
            })
            .collect()
    };
    Ok(Corpus {
        train: render("train", train_seqs)?,
        dev: render("dev", dev_seqs)?,
        test: render("test", test_seqs)?,
    })
}

// ---- binary feature files ----

const FEATURE_MAGIC: &[u8; 4] = b"SLTF";
const FEATURE_VERSION: u32 = 1;

/// Writes `[T×D]` features: magic "SLTF", u32 version, u32 T, u32 D, then
/// T·D little-endian f32 values.
pub fn write_features(path: &Path, values: &Tensor) -> Result<()> {
    debug_assert_eq!(values.rank(), 2);
    let mut bytes = Vec::with_capacity(16 + 4 * values.numel());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(values.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(values.cols() as u32).to_le_bytes());
    for &v in values.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a feature file back as f64. Short or oversized files are rejected
/// with the expected and actual byte counts.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 {
        return Err(Error::TruncatedFeatures {
            path: path.display().to_string(),
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Corpus(format!(
            "{}: not a feature file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(Error::Corpus(format!(
            "{}: unsupported feature file version {version}",
            path.display()
        )));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = 16 + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::TruncatedFeatures {
            path: path.display().to_string(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

// ---- JSONL manifests ----

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    features: String,
    gloss: String,
    text: String,
}

/// Writes `<dir>/<split>.jsonl` plus one feature file per sample under
/// `<dir>/features/`, and returns the manifest path.
pub fn save_split(dir: &Path, split: &str, samples: &[Triplet]) -> Result<PathBuf> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir)
        .map_err(|e| Error::io(format!("creating {}", feature_dir.display()), e))?;
    let manifest_path = dir.join(format!("{split}.jsonl"));
    let mut manifest = Vec::new();
    for sample in samples {
        let rel = format!("features/{}.sltf", sample.id);
        write_features(&dir.join(&rel), sample.features.values())?;
        let row = ManifestRow {
            id: sample.id.clone(),
            features: rel,
            gloss: sample.gloss.join(" "),
            text: sample.text.clone(),
        };
        serde_json::to_writer(&mut manifest, &row).expect("in-memory serialization");
        manifest.push(b'\n');
    }
    let mut file = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(format!("creating {}", manifest_path.display()), e))?;
    file.write_all(&manifest)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest_path)
}

/// Saves all three splits under one directory.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    save_split(dir, "train", &corpus.train)?;
    save_split(dir, "dev", &corpus.dev)?;
    save_split(dir, "test", &corpus.test)?;
    Ok(())
}

/// Loads a JSONL manifest and every referenced feature file. Feature paths
/// resolve relative to the manifest's directory. Unknown manifest fields are
/// ignored.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<Triplet>> {
    let content = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let gloss: Vec<String> = row.gloss.split_whitespace().map(str::to_string).collect();
        if gloss.is_empty() {
            return Err(Error::ManifestParse {
                line: idx + 1,
                message: format!("sample {}: empty gloss sequence", row.id),
            });
        }
        let feature_path = base.join(&row.features);
        let values = read_features(&feature_path).map_err(|e| match e {
            Error::Io { source, .. } => {
                Error::io(format!("features for sample {}", row.id), source)
            }
            other => other,
        })?;
        out.push(Triplet {
            id: row.id,
            features: VideoFeatures::new(values)?,
            gloss,
            text: row.text,
        });
    }
    Ok(out)
}

// ---- augmentation ----

/// Linear temporal resampling to `round(T·rate)` frames (at least 4), with
/// endpoints aligned. Rate must lie in [0.5, 1.5].
pub fn frame_rate_augment(v: &VideoFeatures, rate: f64) -> Result<VideoFeatures> {
    if !(0.5..=1.5).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "frame rate must be in [0.5, 1.5], got {rate}"
        )));
    }
    let t = v.frames();
    let d = v.dim();
    let t2 = ((t as f64 * rate).round() as usize).max(4);
    if t2 == t {
        return Ok(v.clone());
    }
    let mut out = Tensor::zeros(&[t2, d]);
    for i in 0..t2 {
        let src = if t2 == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (t2 - 1) as f64
        };
        let lo = src.floor() as usize;
        let hi = src.ceil() as usize;
        let frac = src - lo as f64;
        for c in 0..d {
            let a = v.values().at2(lo, c);
            let b = v.values().at2(hi.min(t - 1), c);
            out.row_mut(i)[c] = a + frac * (b - a);
        }
    }
    VideoFeatures::new(out)
}

/// Draws a rate uniformly from [0.5, 1.5] and resamples.
pub fn frame_rate_augment_random(
    v: &VideoFeatures,
    rng: &mut impl Rng,
) -> Result<VideoFeatures> {
    let rate = rng.gen_range(0.5..=1.5);
    frame_rate_augment(v, rate)
}
