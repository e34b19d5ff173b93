//! Captions and the text conditions derived from them.
//!
//! A [`CaptionProvider`] turns images into captions; a [`TextEncoder`] turns
//! captions into the per-token conditioning tensor the denoiser consumes via
//! its cross-attention contract. Captions are generated from the image as
//! presented to the purifier, so at evaluation time they describe the
//! adversarial input.

use std::path::PathBuf;
use std::process::Command;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::codec::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::splitmix64;

/// A generated caption plus the provider that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    text: String,
    provider_id: String,
}

impl Caption {
    /// A regular caption; text must be non-empty.
    pub fn new(text: impl Into<String>, provider_id: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Domain("caption text must be non-empty".into()));
        }
        Ok(Self {
            text,
            provider_id: provider_id.into(),
        })
    }

    /// The designated empty caption. Encoders map it to their declared
    /// unconditional embedding (the null-conditioning path).
    pub fn null(provider_id: impl Into<String>) -> Self {
        Self {
            text: String::new(),
            provider_id: provider_id.into(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn is_null(&self) -> bool {
        self.text.is_empty()
    }
}

/// Per-token conditioning vectors, shaped (N, L, d), plus the captions they
/// encode.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub embedding: Array3<f64>,
    pub provenance: Vec<Caption>,
}

impl TextCondition {
    /// (L, d) of each row block.
    pub fn contract(&self) -> (usize, usize) {
        let s = self.embedding.shape();
        (s[1], s[2])
    }

    pub fn len(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Image -> captions. Deterministic providers are pure functions of
/// (provider config, batch); adapters inherit determinism from their
/// decoding mode. Read-only after construction.
pub trait CaptionProvider: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, x: &ImageBatch) -> Result<Vec<Caption>>;

    /// True for providers that read ground-truth labels. Reports flag these
    /// because they are test-only.
    fn uses_ground_truth_labels(&self) -> bool {
        false
    }
}

/// One caption per image, with the count checked.
pub fn generate_captions(provider: &dyn CaptionProvider, x: &ImageBatch) -> Result<Vec<Caption>> {
    let captions = provider.generate(x)?;
    if captions.len() != x.len() {
        return Err(Error::AdapterFailure(format!(
            "provider {} returned {} captions for {} images",
            provider.id(),
            captions.len(),
            x.len()
        )));
    }
    Ok(captions)
}

/// Maps every image to one configured string. An empty string selects the
/// null-conditioning path, which is how a config requests unconditional
/// purification.
#[derive(Debug, Clone)]
pub struct ConstantProvider {
    text: String,
}

impl ConstantProvider {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

impl CaptionProvider for ConstantProvider {
    fn id(&self) -> &str {
        "constant"
    }

    fn generate(&self, x: &ImageBatch) -> Result<Vec<Caption>> {
        let caption = if self.text.trim().is_empty() {
            Caption::null(self.id())
        } else {
            Caption::new(self.text.clone(), self.id())?
        };
        Ok(vec![caption; x.len()])
    }
}

/// Substitutes each image's ground-truth label name into a template.
/// Test-only: it reads labels the defender would not have.
#[derive(Debug, Clone)]
pub struct LabelTemplateProvider {
    template: String,
    label_names: Vec<String>,
}

impl LabelTemplateProvider {
    pub fn new(template: impl Into<String>, label_names: Vec<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains("{label}") {
            return Err(Error::Config(
                "label template must contain the {label} placeholder".into(),
            ));
        }
        if label_names.is_empty() {
            return Err(Error::Config("label template needs label names".into()));
        }
        Ok(Self {
            template,
            label_names,
        })
    }
}

impl CaptionProvider for LabelTemplateProvider {
    fn id(&self) -> &str {
        "label_template"
    }

    fn generate(&self, x: &ImageBatch) -> Result<Vec<Caption>> {
        let labels = x.labels().ok_or_else(|| {
            Error::Domain("label template provider needs a labelled batch".into())
        })?;
        labels
            .iter()
            .map(|&l| {
                let name = self.label_names.get(l).ok_or_else(|| {
                    Error::Domain(format!(
                        "label {l} has no name (have {})",
                        self.label_names.len()
                    ))
                })?;
                Caption::new(self.template.replace("{label}", name), self.id())
            })
            .collect()
    }

    fn uses_ground_truth_labels(&self) -> bool {
        true
    }
}

/// Adapter for an external pretrained captioner, invoked as a subprocess.
///
/// The batch is written to a temporary directory as zero-padded PNG files
/// (`000000.png`, ...); the command is called with that directory as its
/// single argument and must print a JSON array with one caption per image.
/// Any failure is an adapter failure: the run aborts rather than
/// substituting captions.
pub struct SubprocessCaptionProvider {
    command: PathBuf,
    id: String,
}

impl SubprocessCaptionProvider {
    pub fn new(command: impl Into<PathBuf>) -> Self {
        let command = command.into();
        let id = format!("pretrained:{}", command.display());
        Self { command, id }
    }
}

impl CaptionProvider for SubprocessCaptionProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, x: &ImageBatch) -> Result<Vec<Caption>> {
        let dir = tempfile::tempdir()?;
        crate::dataset::save_png_dir(x, dir.path())
            .map_err(|e| Error::AdapterFailure(format!("writing caption input: {e}")))?;
        let output = Command::new(&self.command)
            .arg(dir.path())
            .output()
            .map_err(|e| {
                Error::AdapterFailure(format!(
                    "caption model {} unavailable: {e}",
                    self.command.display()
                ))
            })?;
        if !output.status.success() {
            return Err(Error::AdapterFailure(format!(
                "caption model exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        let texts: Vec<String> = serde_json::from_slice(&output.stdout)
            .map_err(|e| Error::AdapterFailure(format!("caption model output malformed: {e}")))?;
        if texts.len() != x.len() {
            return Err(Error::AdapterFailure(format!(
                "caption model returned {} captions for {} images",
                texts.len(),
                x.len()
            )));
        }
        texts
            .into_iter()
            .map(|t| Caption::new(t, self.id.clone()))
            .collect()
    }
}

/// Caption -> conditioning tensor. Read-only after construction.
pub trait TextEncoder: Send + Sync {
    /// Declared (L, d): token slots and embedding width.
    fn contract(&self) -> (usize, usize);

    /// Encode a batch of captions into an (N, L, d) tensor. Null captions
    /// take the unconditional path.
    fn encode(&self, captions: &[Caption]) -> Result<TextCondition>;

    /// The declared unconditional embedding, one block per image.
    fn unconditional(&self, n: usize) -> TextCondition {
        let (l, d) = self.contract();
        TextCondition {
            embedding: Array3::zeros((n, l, d)),
            provenance: vec![Caption::null("unconditional"); n],
        }
    }
}

/// Encode captions, rejecting an empty batch.
pub fn encode_text(encoder: &dyn TextEncoder, captions: &[Caption]) -> Result<TextCondition> {
    if captions.is_empty() {
        return Err(Error::Domain("cannot encode an empty caption batch".into()));
    }
    encoder.encode(captions)
}

/// Deterministic pseudo-embedding encoder for desk-scale work.
///
/// Tokens are lowercased whitespace words, truncated at the token budget.
/// Token `w` at dimension `k` embeds to the signed unit value of
/// `splitmix64(fnv1a64(w) ^ k)`; unused token slots stay zero, and the null
/// caption maps to the all-zero (unconditional) block. The whole map is
/// pinned by tests against an independent re-implementation.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    max_tokens: usize,
    dim: usize,
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Map a u64 to [-1, 1) using the top 53 bits.
pub fn signed_unit(u: u64) -> f64 {
    (u >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl HashTextEncoder {
    pub fn new(max_tokens: usize, dim: usize) -> Result<Self> {
        if max_tokens == 0 || dim == 0 {
            return Err(Error::Config("token budget and dim must be positive".into()));
        }
        Ok(Self { max_tokens, dim })
    }

    fn encode_one(&self, caption: &Caption, out: &mut Array2<f64>) {
        let tokens: Vec<String> = caption
            .text()
            .split_whitespace()
            .take(self.max_tokens)
            .map(|t| t.to_lowercase())
            .collect();
        for (i, tok) in tokens.iter().enumerate() {
            let h = fnv1a64(tok.as_bytes());
            for k in 0..self.dim {
                out[[i, k]] = signed_unit(splitmix64(h ^ k as u64));
            }
        }
    }
}

impl TextEncoder for HashTextEncoder {
    fn contract(&self) -> (usize, usize) {
        (self.max_tokens, self.dim)
    }

    fn encode(&self, captions: &[Caption]) -> Result<TextCondition> {
        let mut embedding = Array3::zeros((captions.len(), self.max_tokens, self.dim));
        for (n, caption) in captions.iter().enumerate() {
            if caption.is_null() {
                continue; // unconditional block stays zero
            }
            let mut block = embedding.index_axis_mut(ndarray::Axis(0), n);
            let mut tmp = Array2::zeros((self.max_tokens, self.dim));
            self.encode_one(caption, &mut tmp);
            block.assign(&tmp);
        }
        Ok(TextCondition {
            embedding,
            provenance: captions.to_vec(),
        })
    }
}
