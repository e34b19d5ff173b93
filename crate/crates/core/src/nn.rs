//! Small dense networks with hand-written gradients.
//!
//! Everything at desk scale is an MLP over flattened pixels, so the crate
//! carries its own linear layer, cross-entropy, and Adam rather than a
//! framework. Gradients here are pinned by finite-difference tests.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::codec::ImageBatch;
use crate::error::{Error, Result};
use crate::finetune::Classifier;
use crate::rng::SeededNoise;

/// Dense layer computing `x · wᵀ + b` over row-major batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform Glorot initialization, deterministic in the seed.
    pub fn init(out_dim: usize, in_dim: usize, noise: &mut SeededNoise) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| noise.uniform(-a, a));
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Given upstream gradient dy (N, out), accumulate parameter gradients
    /// and return dx (N, in).
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        dw: &mut Array2<f64>,
        db: &mut Array1<f64>,
    ) -> Array2<f64> {
        *dw += &dy.t().dot(x);
        *db += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.extend(self.b.iter());
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.w.len();
        let nb = self.b.len();
        for (slot, &v) in self.w.iter_mut().zip(&src[..nw]) {
            *slot = v;
        }
        for (slot, &v) in self.b.iter_mut().zip(&src[nw..nw + nb]) {
            *slot = v;
        }
        nw + nb
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Plain gradient descent, used where a convex toy needs a monotone loss.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f64], grads: &[f64]) {
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.lr * g;
        }
    }
}

/// Mean cross-entropy over a batch and the gradient w.r.t. logits.
///
/// Returns (loss, d loss / d logits), with the softmax computed against a
/// row-wise max shift.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            actual: format!("{} labels", labels.len()),
        });
    }
    let mut dlogits = Array2::zeros((n, k));
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Domain(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss += z.ln() + m - row[y];
        for j in 0..k {
            let p = exp[j] / z;
            dlogits[[i, j]] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, dlogits))
}

fn flatten_batch(x: &ImageBatch) -> Array2<f64> {
    let n = x.len();
    let d = x.data().len() / n.max(1);
    x.data()
        .to_owned()
        .into_shape_with_order((n, d))
        .expect("batch is contiguous")
}

fn unflatten_gradient(g: Array2<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    g.into_shape_with_order(shape).expect("gradient matches batch shape")
}

/// Multinomial logistic regression over flattened pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub layer: Linear,
    pub input_shape: (usize, usize, usize),
}

impl LinearClassifier {
    pub fn init(input_shape: (usize, usize, usize), classes: usize, seed: u64) -> Self {
        let d = input_shape.0 * input_shape.1 * input_shape.2;
        let mut noise = SeededNoise::new(seed);
        Self {
            layer: Linear::init(classes, d, &mut noise),
            input_shape,
        }
    }

    /// Build from explicit weights; used by analytic-attack tests.
    pub fn from_weights(w: Array2<f64>, b: Array1<f64>, input_shape: (usize, usize, usize)) -> Self {
        Self {
            layer: Linear { w, b },
            input_shape,
        }
    }

    fn check_shape(&self, x: &ImageBatch) -> Result<()> {
        if x.image_shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.input_shape),
                actual: format!("{:?}", x.image_shape()),
            });
        }
        Ok(())
    }

    pub fn loss_and_param_grad(&self, x: &ImageBatch, y: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_shape(x)?;
        let flat = flatten_batch(x);
        let logits = self.layer.forward(&flat);
        let (loss, dlogits) = cross_entropy(&logits, y)?;
        let mut dw = Array2::zeros(self.layer.w.raw_dim());
        let mut db = Array1::zeros(self.layer.b.raw_dim());
        self.layer.backward(&flat, &dlogits, &mut dw, &mut db);
        let mut grads = Vec::with_capacity(self.layer.param_count());
        grads.extend(dw.iter());
        grads.extend(db.iter());
        Ok((loss, grads))
    }
}

impl Classifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.layer.w.shape()[0]
    }

    fn logits(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        self.check_shape(x)?;
        Ok(self.layer.forward(&flatten_batch(x)))
    }

    fn input_gradient(&self, x: &ImageBatch, y: &[usize]) -> Result<Array4<f64>> {
        self.check_shape(x)?;
        let flat = flatten_batch(x);
        let logits = self.layer.forward(&flat);
        let (_, dlogits) = cross_entropy(&logits, y)?;
        let dx = dlogits.dot(&self.layer.w);
        let s = x.data().raw_dim();
        Ok(unflatten_gradient(dx, (s[0], s[1], s[2], s[3])))
    }
}

/// Two-layer tanh MLP over flattened pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub l1: Linear,
    pub l2: Linear,
    pub input_shape: (usize, usize, usize),
}

impl MlpClassifier {
    pub fn init(
        input_shape: (usize, usize, usize),
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        let d = input_shape.0 * input_shape.1 * input_shape.2;
        let mut noise = SeededNoise::new(seed);
        Self {
            l1: Linear::init(hidden, d, &mut noise),
            l2: Linear::init(classes, hidden, &mut noise),
            input_shape,
        }
    }

    fn check_shape(&self, x: &ImageBatch) -> Result<()> {
        if x.image_shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.input_shape),
                actual: format!("{:?}", x.image_shape()),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, flat: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = self.l1.forward(flat).mapv(f64::tanh);
        let logits = self.l2.forward(&h);
        (h, logits)
    }

    pub fn loss_and_param_grad(&self, x: &ImageBatch, y: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_shape(x)?;
        let flat = flatten_batch(x);
        let (h, logits) = self.forward_cached(&flat);
        let (loss, dlogits) = cross_entropy(&logits, y)?;

        let mut dw2 = Array2::zeros(self.l2.w.raw_dim());
        let mut db2 = Array1::zeros(self.l2.b.raw_dim());
        let dh = self.l2.backward(&h, &dlogits, &mut dw2, &mut db2);
        let dh_pre = &dh * &h.mapv(|v| 1.0 - v * v);
        let mut dw1 = Array2::zeros(self.l1.w.raw_dim());
        let mut db1 = Array1::zeros(self.l1.b.raw_dim());
        self.l1.backward(&flat, &dh_pre, &mut dw1, &mut db1);

        let mut grads = Vec::with_capacity(self.l1.param_count() + self.l2.param_count());
        grads.extend(dw1.iter());
        grads.extend(db1.iter());
        grads.extend(dw2.iter());
        grads.extend(db2.iter());
        Ok((loss, grads))
    }
}

impl Classifier for MlpClassifier {
    fn num_classes(&self) -> usize {
        self.l2.w.shape()[0]
    }

    fn logits(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        self.check_shape(x)?;
        let flat = flatten_batch(x);
        Ok(self.forward_cached(&flat).1)
    }

    fn input_gradient(&self, x: &ImageBatch, y: &[usize]) -> Result<Array4<f64>> {
        self.check_shape(x)?;
        let flat = flatten_batch(x);
        let (h, logits) = self.forward_cached(&flat);
        let (_, dlogits) = cross_entropy(&logits, y)?;
        let dh = dlogits.dot(&self.l2.w);
        let dh_pre = &dh * &h.mapv(|v| 1.0 - v * v);
        let dx = dh_pre.dot(&self.l1.w);
        let s = x.data().raw_dim();
        Ok(unflatten_gradient(dx, (s[0], s[1], s[2], s[3])))
    }
}

/// Returns a one-hot of the batch's true label: an upper-bound stub for
/// harness tests. Needs a labelled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfectStub {
    pub num_classes: usize,
}

impl Classifier for PerfectStub {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        let labels = x
            .labels()
            .ok_or_else(|| Error::Domain("perfect stub needs a labelled batch".into()))?;
        let mut out = Array2::zeros((x.len(), self.num_classes));
        for (i, &y) in labels.iter().enumerate() {
            out[[i, y]] = 1.0;
        }
        Ok(out)
    }

    fn input_gradient(&self, x: &ImageBatch, _y: &[usize]) -> Result<Array4<f64>> {
        Ok(Array4::zeros(x.data().raw_dim()))
    }
}

/// Always predicts one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityStub {
    pub class: usize,
    pub num_classes: usize,
}

impl Classifier for MajorityStub {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.len(), self.num_classes));
        for i in 0..x.len() {
            out[[i, self.class]] = 1.0;
        }
        Ok(out)
    }

    fn input_gradient(&self, x: &ImageBatch, _y: &[usize]) -> Result<Array4<f64>> {
        Ok(Array4::zeros(x.data().raw_dim()))
    }
}

/// Serializable classifier checkpoint covering every built-in model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierModel {
    Linear(LinearClassifier),
    Mlp(MlpClassifier),
    PerfectStub(PerfectStub),
    Majority(MajorityStub),
}

impl ClassifierModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Flat parameter vector, or None for stub models with nothing to train.
    pub fn params(&self) -> Option<Vec<f64>> {
        match self {
            ClassifierModel::Linear(m) => {
                let mut v = Vec::with_capacity(m.layer.param_count());
                m.layer.write_params(&mut v);
                Some(v)
            }
            ClassifierModel::Mlp(m) => {
                let mut v = Vec::with_capacity(m.l1.param_count() + m.l2.param_count());
                m.l1.write_params(&mut v);
                m.l2.write_params(&mut v);
                Some(v)
            }
            _ => None,
        }
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            ClassifierModel::Linear(m) => {
                if src.len() != m.layer.param_count() {
                    return Err(Error::Domain("parameter vector length mismatch".into()));
                }
                m.layer.read_params(src);
                Ok(())
            }
            ClassifierModel::Mlp(m) => {
                if src.len() != m.l1.param_count() + m.l2.param_count() {
                    return Err(Error::Domain("parameter vector length mismatch".into()));
                }
                let used = m.l1.read_params(src);
                m.l2.read_params(&src[used..]);
                Ok(())
            }
            _ => Err(Error::Domain("stub classifiers have no parameters".into())),
        }
    }

    pub fn loss_and_param_grad(&self, x: &ImageBatch, y: &[usize]) -> Result<(f64, Vec<f64>)> {
        match self {
            ClassifierModel::Linear(m) => m.loss_and_param_grad(x, y),
            ClassifierModel::Mlp(m) => m.loss_and_param_grad(x, y),
            _ => Err(Error::Domain("stub classifiers are not trainable".into())),
        }
    }
}

impl Classifier for ClassifierModel {
    fn num_classes(&self) -> usize {
        match self {
            ClassifierModel::Linear(m) => m.num_classes(),
            ClassifierModel::Mlp(m) => m.num_classes(),
            ClassifierModel::PerfectStub(m) => m.num_classes(),
            ClassifierModel::Majority(m) => m.num_classes(),
        }
    }

    fn logits(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        match self {
            ClassifierModel::Linear(m) => m.logits(x),
            ClassifierModel::Mlp(m) => m.logits(x),
            ClassifierModel::PerfectStub(m) => m.logits(x),
            ClassifierModel::Majority(m) => m.logits(x),
        }
    }

    fn input_gradient(&self, x: &ImageBatch, y: &[usize]) -> Result<Array4<f64>> {
        match self {
            ClassifierModel::Linear(m) => m.input_gradient(x, y),
            ClassifierModel::Mlp(m) => m.input_gradient(x, y),
            ClassifierModel::PerfectStub(m) => m.input_gradient(x, y),
            ClassifierModel::Majority(m) => m.input_gradient(x, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array4;

    fn batch(data: Array4<f64>, labels: Vec<usize>) -> ImageBatch {
        ImageBatch::new(data, Some(labels)).unwrap()
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::zeros((4, 3));
        let (loss, d) = cross_entropy(&logits, &[0, 1, 2, 0]).unwrap();
        assert_relative_eq!(loss, (3.0f64).ln(), max_relative = 1e-12);
        // gradient rows sum to zero
        for row in d.rows() {
            assert!(row.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_param_gradient_matches_finite_differences() {
        let x = batch(
            Array4::from_shape_fn((5, 1, 2, 3), |(n, _, i, j)| {
                ((n * 7 + i * 3 + j) % 10) as f64 / 10.0
            }),
            vec![0, 1, 1, 0, 1],
        );
        let model = ClassifierModel::Mlp(MlpClassifier::init((1, 2, 3), 4, 2, 9));
        let params = model.params().unwrap();
        let (_, analytic) = model.loss_and_param_grad(&x, &[0, 1, 1, 0, 1]).unwrap();

        let h = 1e-6;
        for idx in [0usize, 3, 10, params.len() - 1] {
            let mut plus = model.clone();
            let mut p = params.clone();
            p[idx] += h;
            plus.set_params(&p).unwrap();
            let (lp, _) = plus.loss_and_param_grad(&x, &[0, 1, 1, 0, 1]).unwrap();

            let mut minus = model.clone();
            p[idx] -= 2.0 * h;
            minus.set_params(&p).unwrap();
            let (lm, _) = minus.loss_and_param_grad(&x, &[0, 1, 1, 0, 1]).unwrap();

            let fd = (lp - lm) / (2.0 * h);
            assert_relative_eq!(analytic[idx], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let data = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, i, j)| {
            0.2 + 0.1 * (n + i + j) as f64
        });
        let y = vec![0, 1];
        let x = batch(data.clone(), y.clone());
        let model = MlpClassifier::init((1, 2, 2), 5, 2, 3);
        let g = model.input_gradient(&x, &y).unwrap();

        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 0, 1, 1), (1, 0, 0, 1)] {
            let mut dp = data.clone();
            dp[idx] += h;
            let (lp, _) = cross_entropy(
                &model.logits(&batch(dp, y.clone())).unwrap(),
                &y,
            )
            .unwrap();
            let mut dm = data.clone();
            dm[idx] -= h;
            let (lm, _) = cross_entropy(
                &model.logits(&batch(dm, y.clone())).unwrap(),
                &y,
            )
            .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert_relative_eq!(g[idx], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            opt.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        let model = ClassifierModel::Mlp(MlpClassifier::init((1, 4, 4), 8, 3, 11));
        model.save(&path).unwrap();
        let back = ClassifierModel::load(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn perfect_stub_reads_labels() {
        let x = batch(Array4::zeros((3, 1, 2, 2)), vec![2, 0, 1]);
        let stub = PerfectStub { num_classes: 3 };
        let logits = stub.logits(&x).unwrap();
        assert_eq!(logits[[0, 2]], 1.0);
        assert_eq!(logits[[1, 0]], 1.0);
        assert_eq!(logits[[2, 1]], 1.0);
    }
}
