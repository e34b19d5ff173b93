//! Image and latent batches, and the encoder/decoder pair between them.
//!
//! Diffusion runs in the space produced by a [`LatentCodec`]. The identity
//! codec keeps everything in pixel space for desk-scale work; checkpointed
//! codecs loaded from a file stand in for a pretrained variational
//! autoencoder operating in deterministic (posterior-mean) mode.

use std::path::Path;

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of images: rank-4 data (N, C, H, W) with values in [0, 1] and
/// optional integer labels, one per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
    labels: Option<Vec<usize>>,
}

impl ImageBatch {
    /// Wrap an array, checking the [0, 1] range invariant.
    pub fn new(data: Array4<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "image values must lie in [0, 1], found {bad}"
            )));
        }
        if let Some(ref l) = labels {
            if l.len() != data.shape()[0] {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels", data.shape()[0]),
                    actual: format!("{} labels", l.len()),
                });
            }
        }
        Ok(Self { data, labels })
    }

    /// Wrap an array, clamping values into [0, 1] first. Non-finite values
    /// are rejected.
    pub fn clamped(mut data: Array4<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image values must be finite".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data, labels)
    }

    pub fn data(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(ref l) = labels {
            if l.len() != self.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels", self.len()),
                    actual: format!("{} labels", l.len()),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Number of images in the batch.
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-image shape (C, H, W).
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    /// Select a sub-batch by indices, carrying labels along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (c, h, w) = self.image_shape();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Domain(format!("index {i} out of range")));
            }
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.data.index_axis(ndarray::Axis(0), i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self { data: out, labels })
    }
}

/// A batch of latents plus the per-image shape they decode back to.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub data: Array4<f64>,
    /// (C, H, W) of the images this latent batch came from.
    pub origin_shape: (usize, usize, usize),
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn shape4(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Encoder/decoder pair. Implementations are read-only after load and must
/// be deterministic: adapters for stochastic models run in mean mode.
pub trait LatentCodec: Send + Sync {
    /// Identity string for report provenance.
    fn id(&self) -> String;

    /// Latent (C', H', W') for a given image (C, H, W), or an error if the
    /// codec cannot accept that input size.
    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> Result<(usize, usize, usize)>;

    /// E: image batch -> latent batch.
    fn encode(&self, x: &ImageBatch) -> Result<LatentBatch>;

    /// D: latent batch -> image batch, clamped to [0, 1].
    fn decode(&self, z: &LatentBatch) -> Result<ImageBatch>;
}

/// Pixel-space codec: encode and decode are exact inverses.
#[derive(Debug, Clone, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn id(&self) -> String {
        "identity".into()
    }

    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        Ok(image_shape)
    }

    fn encode(&self, x: &ImageBatch) -> Result<LatentBatch> {
        Ok(LatentBatch {
            data: x.data().to_owned(),
            origin_shape: x.image_shape(),
        })
    }

    fn decode(&self, z: &LatentBatch) -> Result<ImageBatch> {
        ImageBatch::clamped(z.data.clone(), None)
    }
}

/// On-disk description of a checkpointed codec: average-pool encoder with a
/// nearest-neighbour upsampling decoder and a per-checkpoint affine map.
/// This is the exchange format a VAE export would target; anything richer
/// implements [`LatentCodec`] directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecCheckpoint {
    /// Spatial pooling factor; H and W must be divisible by it.
    pub pool: usize,
    /// Latent = (pixel - shift) * scale.
    pub scale: f64,
    pub shift: f64,
}

/// Codec loaded from a [`CodecCheckpoint`] file.
#[derive(Debug, Clone)]
pub struct CheckpointCodec {
    ckpt: CodecCheckpoint,
    id: String,
}

impl CheckpointCodec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::AdapterFailure(format!(
                "codec checkpoint {} unavailable: {e}",
                path.display()
            ))
        })?;
        let ckpt: CodecCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::AdapterFailure(format!("codec checkpoint malformed: {e}")))?;
        if ckpt.pool == 0 || ckpt.scale == 0.0 {
            return Err(Error::AdapterFailure(
                "codec checkpoint: pool and scale must be non-zero".into(),
            ));
        }
        Ok(Self {
            ckpt,
            id: path.display().to_string(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

impl LatentCodec for CheckpointCodec {
    fn id(&self) -> String {
        format!("pretrained:{}", self.id)
    }

    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = image_shape;
        let p = self.ckpt.pool;
        if h % p != 0 || w % p != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("H and W divisible by {p}"),
                actual: format!("{h}x{w}"),
            });
        }
        Ok((c, h / p, w / p))
    }

    fn encode(&self, x: &ImageBatch) -> Result<LatentBatch> {
        let (c, h, w) = x.image_shape();
        let (lc, lh, lw) = self.latent_shape((c, h, w))?;
        let p = self.ckpt.pool;
        let src = x.data();
        let mut out = Array4::zeros((x.len(), lc, lh, lw));
        for n in 0..x.len() {
            for ch in 0..lc {
                for i in 0..lh {
                    for j in 0..lw {
                        let mut acc = 0.0;
                        for di in 0..p {
                            for dj in 0..p {
                                acc += src[[n, ch, i * p + di, j * p + dj]];
                            }
                        }
                        let mean = acc / (p * p) as f64;
                        out[[n, ch, i, j]] = (mean - self.ckpt.shift) * self.ckpt.scale;
                    }
                }
            }
        }
        Ok(LatentBatch {
            data: out,
            origin_shape: (c, h, w),
        })
    }

    fn decode(&self, z: &LatentBatch) -> Result<ImageBatch> {
        let (c, h, w) = z.origin_shape;
        let expected = self.latent_shape((c, h, w))?;
        if z.latent_shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected:?}"),
                actual: format!("{:?}", z.latent_shape()),
            });
        }
        let p = self.ckpt.pool;
        let mut out = Array4::zeros((z.len(), c, h, w));
        for n in 0..z.len() {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = z.data[[n, ch, i / p, j / p]] / self.ckpt.scale + self.ckpt.shift;
                        out[[n, ch, i, j]] = v;
                    }
                }
            }
        }
        ImageBatch::clamped(out, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn batch(values: Array4<f64>) -> ImageBatch {
        ImageBatch::new(values, None).unwrap()
    }

    #[test]
    fn identity_encode_is_bitwise_equal() {
        let x = batch(Array4::from_shape_fn((2, 1, 4, 4), |(n, _, i, j)| {
            ((n + 1) * (i * 4 + j)) as f64 / 32.0
        }));
        let codec = IdentityCodec;
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.data, x.data().to_owned());
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn identity_decode_clamps_out_of_range() {
        let z = LatentBatch {
            data: ndarray::array![[[[-0.5, 0.5], [1.5, 1.0]]]],
            origin_shape: (1, 2, 2),
        };
        let x = IdentityCodec.decode(&z).unwrap();
        let v: Vec<f64> = x.data().iter().copied().collect();
        assert_eq!(v, vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn image_batch_rejects_out_of_range_and_bad_labels() {
        assert!(ImageBatch::new(ndarray::array![[[[1.5]]]], None).is_err());
        assert!(ImageBatch::new(ndarray::array![[[[f64::NAN]]]], None).is_err());
        assert!(ImageBatch::new(ndarray::array![[[[0.5]]]], Some(vec![0, 1])).is_err());
    }

    #[test]
    fn checkpoint_codec_round_trip_shape_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.codec.json");
        std::fs::write(&path, r#"{"pool": 2, "scale": 2.0, "shift": 0.5}"#).unwrap();
        let codec = CheckpointCodec::load(&path).unwrap();

        let x = batch(Array4::from_shape_fn((3, 2, 8, 8), |(n, c, i, j)| {
            ((n + c + i + j) % 7) as f64 / 7.0
        }));
        assert_eq!(codec.latent_shape((2, 8, 8)).unwrap(), (2, 4, 4));
        let z1 = codec.encode(&x).unwrap();
        let z2 = codec.encode(&x).unwrap();
        assert_eq!(z1, z2);
        let back = codec.decode(&z1).unwrap();
        assert_eq!(back.image_shape(), x.image_shape());
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_codec_missing_file_is_adapter_failure() {
        let err = CheckpointCodec::load(Path::new("/nonexistent/vae.json")).unwrap_err();
        assert!(matches!(err, Error::AdapterFailure(_)));
    }

    #[test]
    fn checkpoint_codec_rejects_indivisible_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"pool": 3, "scale": 1.0, "shift": 0.0}"#).unwrap();
        let codec = CheckpointCodec::load(&path).unwrap();
        let x = batch(Array4::zeros((1, 1, 4, 4)));
        assert!(matches!(
            codec.encode(&x),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
