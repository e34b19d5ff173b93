//! Forward noising, conditioned reverse denoising, and the purifier that
//! composes caption -> encode -> noise -> denoise -> decode.
//!
//! The forward process follows the stepwise recursion
//! `z_t = sqrt(1 - beta_t) * z_{t-1} + sqrt(beta_t) * eps_t`; the reverse
//! process walks a [`Denoiser`] from the noised step back to zero, feeding it
//! the per-step noise draw and the text condition.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::codec::{ImageBatch, LatentBatch, LatentCodec};
use crate::conditioning::{generate_captions, CaptionProvider, TextCondition, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{Adam, Linear};
use crate::rng::{derive_seed, NoiseSource, SeededNoise};
use crate::schedules::{fraction_to_step, VarianceSchedule};

/// One reverse transition. `step` produces `z_t` from `z_{t+1}`; the caller
/// supplies the noise draw so deterministic and stochastic samplers share a
/// contract. Output shape must equal input shape.
pub trait Denoiser: Send + Sync {
    fn id(&self) -> String;

    /// Declared (L, d) cross-attention contract, or None to accept any.
    fn conditioning_contract(&self) -> Option<(usize, usize)>;

    /// Declared latent (C, H, W), or None to accept any.
    fn latent_shape(&self) -> Option<(usize, usize, usize)>;

    fn step(
        &self,
        z_next: &LatentBatch,
        t: usize,
        noise: &Array4<f64>,
        condition: &TextCondition,
    ) -> Result<LatentBatch>;
}

/// Fixed-point denoiser: every step returns its input. Useful for wiring
/// tests and as the no-op slot in configs.
#[derive(Debug, Clone, Default)]
pub struct StubDenoiser;

impl Denoiser for StubDenoiser {
    fn id(&self) -> String {
        "stub".into()
    }

    fn conditioning_contract(&self) -> Option<(usize, usize)> {
        None
    }

    fn latent_shape(&self) -> Option<(usize, usize, usize)> {
        None
    }

    fn step(
        &self,
        z_next: &LatentBatch,
        _t: usize,
        _noise: &Array4<f64>,
        _condition: &TextCondition,
    ) -> Result<LatentBatch> {
        Ok(z_next.clone())
    }
}

/// Run the noising recursion from step 0 up to `step`.
///
/// `step = 0` returns the input unchanged. Each iteration consumes exactly
/// one latent-shaped draw from the noise source.
pub fn forward_diffuse(
    z0: &LatentBatch,
    schedule: &VarianceSchedule,
    step: usize,
    noise: &mut dyn NoiseSource,
) -> Result<LatentBatch> {
    if step > schedule.num_steps() {
        return Err(Error::Domain(format!(
            "step {step} exceeds schedule length {}",
            schedule.num_steps()
        )));
    }
    let mut z = z0.data.clone();
    let shape = z0.shape4();
    for k in 1..=step {
        let beta = schedule.beta(k - 1);
        let eps = noise.standard_normal(shape);
        z = z * (1.0 - beta).sqrt() + eps * beta.sqrt();
    }
    Ok(LatentBatch {
        data: z,
        origin_shape: z0.origin_shape,
    })
}

/// Walk the denoiser from `from_step` down to step 0.
///
/// `from_step = 0` returns the input unchanged. One noise draw is consumed
/// per step, whether or not the denoiser uses it.
pub fn reverse_denoise(
    z_from: &LatentBatch,
    from_step: usize,
    denoiser: &dyn Denoiser,
    schedule: &VarianceSchedule,
    condition: &TextCondition,
    noise: &mut dyn NoiseSource,
) -> Result<LatentBatch> {
    if from_step > schedule.num_steps() {
        return Err(Error::Domain(format!(
            "from_step {from_step} exceeds schedule length {}",
            schedule.num_steps()
        )));
    }
    if let Some((l, d)) = denoiser.conditioning_contract() {
        if condition.contract() != (l, d) {
            return Err(Error::ContractMismatch(format!(
                "denoiser expects condition (L, d) = ({l}, {d}), got {:?}",
                condition.contract()
            )));
        }
        if condition.len() != z_from.len() {
            return Err(Error::ContractMismatch(format!(
                "condition covers {} images, batch has {}",
                condition.len(),
                z_from.len()
            )));
        }
    }
    let shape = z_from.shape4();
    let mut z = z_from.clone();
    for t in (0..from_step).rev() {
        let eps = noise.standard_normal(shape);
        let next = denoiser.step(&z, t, &eps, condition)?;
        if next.shape4() != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                actual: format!("{:?}", next.shape4()),
            });
        }
        z = next;
    }
    Ok(z)
}

/// Serializable description of a purifier for report provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifierInfo {
    pub t_frac: f64,
    pub steps: usize,
    pub noised_to_step: usize,
    pub codec: String,
    pub caption_provider: String,
    pub caption_uses_ground_truth_labels: bool,
    pub text_encoder_contract: (usize, usize),
    pub denoiser: String,
}

/// The full purification pipeline. Read-only once built; concurrent calls
/// on disjoint batches are fine because every call owns its noise source.
pub struct Purifier {
    codec: Arc<dyn LatentCodec>,
    captioner: Arc<dyn CaptionProvider>,
    encoder: Arc<dyn TextEncoder>,
    denoiser: Arc<dyn Denoiser>,
    schedule: VarianceSchedule,
    t_frac: f64,
}

impl Purifier {
    pub fn new(
        codec: Arc<dyn LatentCodec>,
        captioner: Arc<dyn CaptionProvider>,
        encoder: Arc<dyn TextEncoder>,
        denoiser: Arc<dyn Denoiser>,
        schedule: VarianceSchedule,
        t_frac: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&t_frac) {
            return Err(Error::Domain(format!("t_frac {t_frac} outside [0, 1]")));
        }
        if let Some(contract) = denoiser.conditioning_contract() {
            if encoder.contract() != contract {
                return Err(Error::ContractMismatch(format!(
                    "text encoder contract {:?} does not match denoiser contract {contract:?}",
                    encoder.contract()
                )));
            }
        }
        Ok(Self {
            codec,
            captioner,
            encoder,
            denoiser,
            schedule,
            t_frac,
        })
    }

    pub fn t_frac(&self) -> f64 {
        self.t_frac
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn captioner(&self) -> &dyn CaptionProvider {
        self.captioner.as_ref()
    }

    pub fn describe(&self) -> PurifierInfo {
        let steps = self.schedule.num_steps();
        PurifierInfo {
            t_frac: self.t_frac,
            steps,
            noised_to_step: fraction_to_step(self.t_frac, steps).unwrap_or(0),
            codec: self.codec.id(),
            caption_provider: self.captioner.id().to_string(),
            caption_uses_ground_truth_labels: self.captioner.uses_ground_truth_labels(),
            text_encoder_contract: self.encoder.contract(),
            denoiser: self.denoiser.id(),
        }
    }

    /// Caption, encode, noise to the configured step, denoise under the
    /// caption condition, decode, clamp. Labels ride along unchanged.
    ///
    /// Deterministic in (input, configuration, seed); never returns a
    /// partially purified batch.
    pub fn purify(&self, x: &ImageBatch, seed: u64) -> Result<ImageBatch> {
        let steps = self.schedule.num_steps();
        let target = fraction_to_step(self.t_frac, steps)?;
        let labels = x.labels().map(<[usize]>::to_vec);

        if target == 0 {
            // No noise and no reverse steps: purification reduces to the
            // codec round trip, exact for the identity codec.
            let z0 = self.codec.encode(x)?;
            let out = self.codec.decode(&z0)?;
            return self.finish(x, out, labels);
        }

        let captions = generate_captions(self.captioner.as_ref(), x)?;
        let condition = self.encoder.encode(&captions)?;
        let z0 = self.codec.encode(x)?;
        let mut noise = SeededNoise::new(seed);
        let z_noised = forward_diffuse(&z0, &self.schedule, target, &mut noise)?;
        let z_denoised = reverse_denoise(
            &z_noised,
            target,
            self.denoiser.as_ref(),
            &self.schedule,
            &condition,
            &mut noise,
        )?;
        let out = self.codec.decode(&z_denoised)?;
        self.finish(x, out, labels)
    }

    fn finish(
        &self,
        x: &ImageBatch,
        out: ImageBatch,
        labels: Option<Vec<usize>>,
    ) -> Result<ImageBatch> {
        if out.image_shape() != x.image_shape() || out.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} x {}", x.image_shape(), x.len()),
                actual: format!("{:?} x {}", out.image_shape(), out.len()),
            });
        }
        out.with_labels(labels)
    }
}

const TIME_FREQS: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
const TIME_FEATURES: usize = 2 * TIME_FREQS.len();

fn time_features(step: usize, total: usize) -> Array1<f64> {
    let u = step as f64 / total as f64;
    let mut out = Array1::zeros(TIME_FEATURES);
    for (i, f) in TIME_FREQS.iter().enumerate() {
        out[2 * i] = (2.0 * std::f64::consts::PI * f * u).sin();
        out[2 * i + 1] = (2.0 * std::f64::consts::PI * f * u).cos();
    }
    out
}

/// Mean-pool the (N, L, d) condition into (N, d) rows for the additive
/// conditioning path.
fn pool_condition(condition: &TextCondition) -> Array2<f64> {
    condition.embedding.mean_axis(Axis(1)).expect("L > 0")
}

/// Desk-scale noise-prediction network: one hidden tanh layer over the
/// flattened latent with additive time and condition embeddings, plus two
/// time-gated linear heads. The gates let the network express the
/// step-dependent amplification of the noise target (`z / sqrt(1 - ab)` and
/// a condition-mean term), which a bounded hidden layer cannot reach on its
/// own. The reverse step runs the posterior update on the implied
/// clean-latent estimate, clipped to the codec's value range for stability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    schedule: VarianceSchedule,
    latent_shape: (usize, usize, usize),
    cond_contract: (usize, usize),
    w_in: Linear,
    w_time: Linear,
    w_cond: Linear,
    w_out: Linear,
    /// Time features -> [latent gate, condition-mean gate].
    gates: Linear,
    /// Condition vector -> a latent-shaped mean estimate.
    cond_mean: Linear,
    /// Clamp range for the implied clean latent; None disables clipping.
    clip_sample: Option<(f64, f64)>,
    epochs_seen: usize,
    loss_history: Vec<f64>,
}

impl ToyDenoiser {
    pub fn init(
        schedule: VarianceSchedule,
        latent_shape: (usize, usize, usize),
        cond_contract: (usize, usize),
        hidden: usize,
        seed: u64,
    ) -> Self {
        let d = latent_shape.0 * latent_shape.1 * latent_shape.2;
        let mut noise = SeededNoise::new(seed);
        Self {
            schedule,
            latent_shape,
            cond_contract,
            w_in: Linear::init(hidden, d, &mut noise),
            w_time: Linear::init(hidden, TIME_FEATURES, &mut noise),
            w_cond: Linear::init(hidden, cond_contract.1, &mut noise),
            w_out: Linear::init(d, hidden, &mut noise),
            gates: Linear::init(2, TIME_FEATURES, &mut noise),
            cond_mean: Linear::init(d, cond_contract.1, &mut noise),
            clip_sample: Some((0.0, 1.0)),
            epochs_seen: 0,
            loss_history: Vec::new(),
        }
    }

    /// Override the clean-latent clamp range (pixel-space latents default
    /// to [0, 1]).
    pub fn with_clip_sample(mut self, clip: Option<(f64, f64)>) -> Self {
        self.clip_sample = clip;
        self
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs_seen
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::AdapterFailure(format!("denoiser checkpoint {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn flat_dim(&self) -> usize {
        self.latent_shape.0 * self.latent_shape.1 * self.latent_shape.2
    }

    /// Predict the noise component of `z` at step index `k` (1..=T).
    /// `z` is (N, D) flattened, `tf` (N, time features), `cond` (N, d).
    /// Returns the hidden activations, the gate values, the condition-mean
    /// estimate, and the prediction.
    fn predict(
        &self,
        z: &Array2<f64>,
        tf: &Array2<f64>,
        cond: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let pre = self.w_in.forward(z) + self.w_time.forward(tf) + self.w_cond.forward(cond);
        let h = pre.mapv(f64::tanh);
        let gates = self.gates.forward(tf); // (N, 2)
        let mean = self.cond_mean.forward(cond); // (N, D)
        let mut out = self.w_out.forward(&h);
        for n in 0..out.shape()[0] {
            let (gz, gm) = (gates[[n, 0]], gates[[n, 1]]);
            for d in 0..out.shape()[1] {
                out[[n, d]] += gz * z[[n, d]] + gm * mean[[n, d]];
            }
        }
        (h, gates, mean, out)
    }

    fn params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.w_in.write_params(&mut v);
        self.w_time.write_params(&mut v);
        self.w_cond.write_params(&mut v);
        self.w_out.write_params(&mut v);
        self.gates.write_params(&mut v);
        self.cond_mean.write_params(&mut v);
        v
    }

    fn set_params(&mut self, src: &[f64]) {
        let mut off = 0;
        off += self.w_in.read_params(&src[off..]);
        off += self.w_time.read_params(&src[off..]);
        off += self.w_cond.read_params(&src[off..]);
        off += self.w_out.read_params(&src[off..]);
        off += self.gates.read_params(&src[off..]);
        self.cond_mean.read_params(&src[off..]);
    }

    /// Noise-prediction MSE and its parameter gradient for one batch.
    fn loss_and_grad(
        &self,
        z: &Array2<f64>,
        tf: &Array2<f64>,
        cond: &Array2<f64>,
        target: &Array2<f64>,
    ) -> (f64, Vec<f64>) {
        let (h, gates, mean, out) = self.predict(z, tf, cond);
        let diff = &out - target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let dout = diff.mapv(|v| 2.0 * v / n);

        let mut dw_out = Array2::zeros(self.w_out.w.raw_dim());
        let mut db_out = Array1::zeros(self.w_out.b.raw_dim());
        let dh = self.w_out.backward(&h, &dout, &mut dw_out, &mut db_out);
        let dpre = &dh * &h.mapv(|v| 1.0 - v * v);

        let mut dw_in = Array2::zeros(self.w_in.w.raw_dim());
        let mut db_in = Array1::zeros(self.w_in.b.raw_dim());
        self.w_in.backward(z, &dpre, &mut dw_in, &mut db_in);
        let mut dw_time = Array2::zeros(self.w_time.w.raw_dim());
        let mut db_time = Array1::zeros(self.w_time.b.raw_dim());
        self.w_time.backward(tf, &dpre, &mut dw_time, &mut db_time);
        let mut dw_cond = Array2::zeros(self.w_cond.w.raw_dim());
        let mut db_cond = Array1::zeros(self.w_cond.b.raw_dim());
        self.w_cond.backward(cond, &dpre, &mut dw_cond, &mut db_cond);

        // gate heads: out[n, d] += gz_n * z[n, d] + gm_n * mean[n, d]
        let rows = out.shape()[0];
        let mut dgates = Array2::zeros((rows, 2));
        let mut dmean = Array2::zeros(mean.raw_dim());
        for r in 0..rows {
            let gm = gates[[r, 1]];
            let mut acc_z = 0.0;
            let mut acc_m = 0.0;
            for d in 0..out.shape()[1] {
                let g = dout[[r, d]];
                acc_z += g * z[[r, d]];
                acc_m += g * mean[[r, d]];
                dmean[[r, d]] = g * gm;
            }
            dgates[[r, 0]] = acc_z;
            dgates[[r, 1]] = acc_m;
        }
        let mut dw_gates = Array2::zeros(self.gates.w.raw_dim());
        let mut db_gates = Array1::zeros(self.gates.b.raw_dim());
        self.gates.backward(tf, &dgates, &mut dw_gates, &mut db_gates);
        let mut dw_mean = Array2::zeros(self.cond_mean.w.raw_dim());
        let mut db_mean = Array1::zeros(self.cond_mean.b.raw_dim());
        self.cond_mean.backward(cond, &dmean, &mut dw_mean, &mut db_mean);

        let mut grads = Vec::new();
        grads.extend(dw_in.iter());
        grads.extend(db_in.iter());
        grads.extend(dw_time.iter());
        grads.extend(db_time.iter());
        grads.extend(dw_cond.iter());
        grads.extend(db_cond.iter());
        grads.extend(dw_out.iter());
        grads.extend(db_out.iter());
        grads.extend(dw_gates.iter());
        grads.extend(db_gates.iter());
        grads.extend(dw_mean.iter());
        grads.extend(db_mean.iter());
        (loss, grads)
    }

    fn mse_on(&self, z: &Array2<f64>, tf: &Array2<f64>, cond: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let (_, _, _, out) = self.predict(z, tf, cond);
        let diff = &out - target;
        diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
    }
}

impl Denoiser for ToyDenoiser {
    fn id(&self) -> String {
        format!("toy(epochs={})", self.epochs_seen)
    }

    fn conditioning_contract(&self) -> Option<(usize, usize)> {
        Some(self.cond_contract)
    }

    fn latent_shape(&self) -> Option<(usize, usize, usize)> {
        Some(self.latent_shape)
    }

    fn step(
        &self,
        z_next: &LatentBatch,
        t: usize,
        noise: &Array4<f64>,
        condition: &TextCondition,
    ) -> Result<LatentBatch> {
        if z_next.latent_shape() != self.latent_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.latent_shape),
                actual: format!("{:?}", z_next.latent_shape()),
            });
        }
        let steps = self.schedule.num_steps();
        if t >= steps {
            return Err(Error::Domain(format!("step index {t} out of range")));
        }
        let n = z_next.len();
        let d = self.flat_dim();
        let z_flat = z_next
            .data
            .to_owned()
            .into_shape_with_order((n, d))
            .expect("contiguous latent");
        let tf_row = time_features(t + 1, steps);
        let tf = Array2::from_shape_fn((n, TIME_FEATURES), |(_, j)| tf_row[j]);
        let cond = pool_condition(condition);

        let (_, _, _, eps_hat) = self.predict(&z_flat, &tf, &cond);

        // Implied clean latent from the noise estimate, optionally clipped,
        // then the posterior mean over (clean, current) with the
        // lower-variance noise scale, which vanishes at t = 0.
        let beta = self.schedule.beta(t);
        let ab_next = self.schedule.alpha_bar(t + 1);
        let ab_t = self.schedule.alpha_bar(t);
        let mut x0 = (&z_flat - &(eps_hat * (1.0 - ab_next).sqrt())) / ab_next.sqrt();
        if let Some((lo, hi)) = self.clip_sample {
            x0.mapv_inplace(|v| v.clamp(lo, hi));
        }
        let coeff_x0 = ab_t.sqrt() * beta / (1.0 - ab_next);
        let coeff_z = (1.0 - beta).sqrt() * (1.0 - ab_t) / (1.0 - ab_next);
        let mean = x0 * coeff_x0 + &z_flat * coeff_z;
        let sigma = ((1.0 - ab_t) / (1.0 - ab_next) * beta).sqrt();

        let noise_flat = noise
            .to_owned()
            .into_shape_with_order((n, d))
            .map_err(|_| Error::ShapeMismatch {
                expected: format!("noise of shape {:?}", z_next.shape4()),
                actual: format!("{:?}", noise.shape()),
            })?;
        let z_t = mean + noise_flat * sigma;
        Ok(LatentBatch {
            data: z_t
                .into_shape_with_order(z_next.shape4())
                .expect("round trip shape"),
            origin_shape: z_next.origin_shape,
        })
    }
}

/// Training knobs for [`train_toy_denoiser`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Fraction of the dataset held out for the loss-improvement check.
    pub holdout_fraction: f64,
    /// Fraction of training samples shown with the unconditional (zero)
    /// condition so the null-caption path is also trained.
    pub condition_dropout: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            hidden: 128,
            learning_rate: 1e-3,
            holdout_fraction: 0.125,
            condition_dropout: 0.2,
            seed: 0,
        }
    }
}

/// Outcome of toy training: the model plus held-out noise-prediction MSE
/// before and after.
#[derive(Debug, Clone)]
pub struct ToyTraining {
    pub denoiser: ToyDenoiser,
    pub holdout_initial: f64,
    pub holdout_final: f64,
}

/// Train a [`ToyDenoiser`] on a labelled image batch.
///
/// Conditions come from the provider/encoder pair, mirroring how the
/// purifier will drive the model. Deterministic in the config seed.
pub fn train_toy_denoiser(
    dataset: &ImageBatch,
    schedule: &VarianceSchedule,
    captioner: &dyn CaptionProvider,
    encoder: &dyn TextEncoder,
    cfg: &ToyTrainConfig,
) -> Result<ToyTraining> {
    if dataset.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config("bad batch size or holdout fraction".into()));
    }

    let (c, h, w) = dataset.image_shape();
    let d = c * h * w;
    let n_total = dataset.len();
    let n_holdout = ((n_total as f64 * cfg.holdout_fraction) as usize).min(n_total - 1);
    let n_train = n_total - n_holdout;

    let captions = generate_captions(captioner, dataset)?;
    let cond_all = pool_condition(&encoder.encode(&captions)?);
    let flat_all = dataset
        .data()
        .to_owned()
        .into_shape_with_order((n_total, d))
        .expect("contiguous batch");

    let mut model = ToyDenoiser::init(
        schedule.clone(),
        (c, h, w),
        encoder.contract(),
        cfg.hidden,
        derive_seed(cfg.seed, 1),
    );
    let mut params = model.params();
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = SeededNoise::new(derive_seed(cfg.seed, 2));
    let steps = schedule.num_steps();

    // Frozen noising of the holdout split, reused for every evaluation so
    // the before/after comparison is paired.
    let mut holdout_rng = SeededNoise::new(derive_seed(cfg.seed, 3));
    let holdout = build_noised(
        &flat_all,
        &cond_all,
        n_train..n_total,
        schedule,
        &mut holdout_rng,
    );
    let holdout_initial = if n_holdout > 0 {
        model.mse_on(&holdout.z, &holdout.tf, &holdout.cond, &holdout.eps)
    } else {
        f64::NAN
    };

    for epoch in 0..cfg.epochs {
        let order = shuffled(n_train, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let nb = chunk.len();
            let mut z = Array2::zeros((nb, d));
            let mut eps = Array2::zeros((nb, d));
            let mut tf = Array2::zeros((nb, TIME_FEATURES));
            let mut cond = Array2::zeros((nb, cond_all.shape()[1]));
            for (row, &i) in chunk.iter().enumerate() {
                let k = 1 + (rng.uniform(0.0, steps as f64) as usize).min(steps - 1);
                let ab = schedule.alpha_bar(k);
                let tf_row = time_features(k, steps);
                for j in 0..TIME_FEATURES {
                    tf[[row, j]] = tf_row[j];
                }
                let drop = rng.uniform(0.0, 1.0) < cfg.condition_dropout;
                for j in 0..cond.shape()[1] {
                    cond[[row, j]] = if drop { 0.0 } else { cond_all[[i, j]] };
                }
                for j in 0..d {
                    let e = rng.normal();
                    eps[[row, j]] = e;
                    z[[row, j]] = ab.sqrt() * flat_all[[i, j]] + (1.0 - ab).sqrt() * e;
                }
            }
            model.set_params(&params);
            let (loss, grads) = model.loss_and_grad(&z, &tf, &cond, &eps);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            opt.step(&mut params, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        model.loss_history.push(epoch_loss / batches as f64);
        model.epochs_seen += 1;
    }
    model.set_params(&params);

    let holdout_final = if n_holdout > 0 && cfg.epochs > 0 {
        model.mse_on(&holdout.z, &holdout.tf, &holdout.cond, &holdout.eps)
    } else {
        holdout_initial
    };

    Ok(ToyTraining {
        denoiser: model,
        holdout_initial,
        holdout_final,
    })
}

struct NoisedSplit {
    z: Array2<f64>,
    eps: Array2<f64>,
    tf: Array2<f64>,
    cond: Array2<f64>,
}

fn build_noised(
    flat: &Array2<f64>,
    cond_all: &Array2<f64>,
    range: std::ops::Range<usize>,
    schedule: &VarianceSchedule,
    rng: &mut SeededNoise,
) -> NoisedSplit {
    let d = flat.shape()[1];
    let n = range.len();
    let steps = schedule.num_steps();
    let mut z = Array2::zeros((n, d));
    let mut eps = Array2::zeros((n, d));
    let mut tf = Array2::zeros((n, TIME_FEATURES));
    let mut cond = Array2::zeros((n, cond_all.shape()[1]));
    for (row, i) in range.enumerate() {
        let k = 1 + (rng.uniform(0.0, steps as f64) as usize).min(steps - 1);
        let ab = schedule.alpha_bar(k);
        let tf_row = time_features(k, steps);
        for j in 0..TIME_FEATURES {
            tf[[row, j]] = tf_row[j];
        }
        for j in 0..cond.shape()[1] {
            cond[[row, j]] = cond_all[[i, j]];
        }
        for j in 0..d {
            let e = rng.normal();
            eps[[row, j]] = e;
            z[[row, j]] = ab.sqrt() * flat[[i, j]] + (1.0 - ab).sqrt() * e;
        }
    }
    NoisedSplit { z, eps, tf, cond }
}

fn shuffled(n: usize, rng: &mut SeededNoise) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.uniform(0.0, (i + 1) as f64) as usize).min(i);
        order.swap(i, j);
    }
    order
}
