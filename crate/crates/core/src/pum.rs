//! Gaussian relation embeddings: the mean / variance head, reparameterized
//! sampling, the three inference modes and differential entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::layers::{attach_with, BoundParameters, ClassifierParams, LinearParams, LinearVars, ParamSource, Parameters};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Default lower bound added to every variance.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// `0.5 * ln(2πe)`, the entropy of a unit-variance Gaussian in one dimension.
pub const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

/// Diagonal Gaussian `N(mu, diag(sigma2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mu: Tensor,
    sigma2: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, sigma2: Tensor) -> Result<Self> {
        if mu.shape().len() != 1 || mu.shape() != sigma2.shape() {
            return Err(shape_err(
                "gaussian",
                format!("mu {:?} and sigma2 {:?} must be equal-length vectors", mu.shape(), sigma2.shape()),
            ));
        }
        if !mu.is_finite() || !sigma2.is_finite() {
            return Err(Error::Contract("gaussian parameters must be finite".into()));
        }
        if let Some(d) = sigma2.data().iter().position(|&s| s <= 0.0) {
            return Err(Error::Contract(format!("variance at dimension {d} is not positive")));
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma2(&self) -> &Tensor {
        &self.sigma2
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Linear mean and variance heads on the fused relation feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumHeadParams {
    pub w_mu: LinearParams,
    pub w_sigma: LinearParams,
    pub variance_floor: f64,
}

#[derive(Debug, Clone)]
pub struct PumHeadVars {
    w_mu: LinearVars,
    w_sigma: LinearVars,
    floor: NodeId,
}

impl PumHeadParams {
    pub fn init(in_dim: usize, z_dim: usize, variance_floor: f64, rng: &mut RngState) -> Self {
        Self {
            w_mu: LinearParams::xavier(in_dim, z_dim, true, rng),
            w_sigma: LinearParams::xavier(in_dim, z_dim, true, rng),
            variance_floor,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.w_mu.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.w_mu.validate()?;
        self.w_sigma.validate()?;
        if self.w_mu.out_dim() != self.w_sigma.out_dim() || self.w_mu.in_dim() != self.w_sigma.in_dim() {
            return Err(shape_err("gaussian_head", "mean and variance heads disagree on shape"));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config(format!("variance floor must be positive, got {}", self.variance_floor)));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> PumHeadVars {
        self.bind_with(tape, &mut ParamSource::Fresh)
    }

    pub fn attach(&self, tape: &mut Tape, nodes: &[NodeId]) -> Result<PumHeadVars> {
        attach_with(self, tape, nodes, Self::bind_with)
    }

    fn bind_with(&self, tape: &mut Tape, src: &mut ParamSource<'_>) -> PumHeadVars {
        PumHeadVars {
            w_mu: self.w_mu.bind_with(tape, src),
            w_sigma: self.w_sigma.bind_with(tape, src),
            floor: tape.leaf(Tensor::filled(&[self.z_dim()], self.variance_floor)),
        }
    }
}

impl PumHeadVars {
    /// Returns `(mu, sigma2)` with `sigma2 = softplus(W_sigma e) + floor`.
    pub fn forward(&self, tape: &mut Tape, e: NodeId) -> Result<(NodeId, NodeId)> {
        let mu = self.w_mu.forward(tape, e)?;
        let raw = self.w_sigma.forward(tape, e)?;
        let pos = tape.softplus(raw)?;
        let sigma2 = tape.add(pos, self.floor)?;
        Ok((mu, sigma2))
    }
}

impl Parameters for PumHeadParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.w_mu.tensors();
        v.extend(self.w_sigma.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.w_mu.tensors_mut();
        v.extend(self.w_sigma.tensors_mut());
        v
    }
}

impl BoundParameters for PumHeadVars {
    fn nodes(&self) -> Vec<NodeId> {
        let mut v = self.w_mu.nodes();
        v.extend(self.w_sigma.nodes());
        v
    }
}

/// `z = mu + eps ⊙ sqrt(sigma2)` on the tape, with the noise held fixed.
pub fn reparameterize_traced(tape: &mut Tape, mu: NodeId, sigma2: NodeId, eps: Tensor) -> Result<NodeId> {
    let log_var = tape.log(sigma2)?;
    let half = tape.scale_by(0.5, log_var)?;
    let std = tape.exp(half)?;
    let eps = tape.leaf(eps);
    let noise = tape.mul(eps, std)?;
    tape.add(mu, noise)
}

/// `0.5 D ln(2πe) + 0.5 Σ ln sigma2` on the tape.
pub fn entropy_traced(tape: &mut Tape, sigma2: NodeId) -> Result<NodeId> {
    let d = tape.value(sigma2).len() as f64;
    let log_var = tape.log(sigma2)?;
    let total = tape.sum(log_var)?;
    let half = tape.scale_by(0.5, total)?;
    let offset = tape.constant(d * HALF_LN_2PI_E);
    tape.add(half, offset)
}

pub fn gaussian_head(e: &Tensor, p: &PumHeadParams) -> Result<GaussianParams> {
    let mut tape = Tape::new();
    let ei = tape.leaf(e.clone());
    let vars = p.bind(&mut tape);
    let (mu, sigma2) = vars.forward(&mut tape, ei)?;
    GaussianParams::new(tape.value(mu).clone(), tape.value(sigma2).clone())
}

/// Draws `D` standard normals from `rng` and returns `mu + eps ⊙ sqrt(sigma2)`.
pub fn reparameterize(g: &GaussianParams, rng: &mut RngState) -> Tensor {
    let eps = rng.normals(g.dim());
    reparameterize_with(g, &eps)
}

/// Reparameterized sample for a given noise vector.
pub fn reparameterize_with(g: &GaussianParams, eps: &[f64]) -> Tensor {
    let data = g
        .mu
        .data()
        .iter()
        .zip(g.sigma2.data())
        .zip(eps)
        .map(|((m, s2), e)| m + e * (0.5 * s2.ln()).exp())
        .collect();
    Tensor::from_parts(vec![g.dim()], data)
}

/// `(1/K) Σ_k classify(z_k)` with `K` reparameterized samples.
pub fn predict_averaged(g: &GaussianParams, cls: &ClassifierParams, k: usize, rng: &mut RngState) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("averaged prediction needs K >= 1".into()));
    }
    let mut acc = vec![0.0; cls.num_classes()];
    for _ in 0..k {
        let p = crate::layers::classify(&reparameterize(g, rng), cls)?;
        acc.iter_mut().zip(p.data()).for_each(|(a, p)| *a += p);
    }
    let inv = k as f64;
    Ok(Tensor::from_parts(
        vec![acc.len()],
        acc.into_iter().map(|a| a / inv).collect(),
    ))
}

/// `classify(mu)`.
pub fn predict_deterministic(g: &GaussianParams, cls: &ClassifierParams) -> Result<Tensor> {
    crate::layers::classify(&g.mu, cls)
}

/// `classify` of one reparameterized sample.
pub fn predict_stochastic_once(g: &GaussianParams, cls: &ClassifierParams, rng: &mut RngState) -> Result<Tensor> {
    crate::layers::classify(&reparameterize(g, rng), cls)
}

/// Differential entropy in nats.
pub fn differential_entropy(g: &GaussianParams) -> f64 {
    let log_det: f64 = g.sigma2.data().iter().map(|s| s.ln()).sum();
    0.5 * log_det + g.dim() as f64 * HALF_LN_2PI_E
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    fn gaussian(mu: &[f64], s2: &[f64]) -> GaussianParams {
        GaussianParams::new(v(mu), v(s2)).unwrap()
    }

    #[test]
    fn rejects_non_positive_variance() {
        assert!(GaussianParams::new(v(&[0.0]), v(&[0.0])).is_err());
        assert!(GaussianParams::new(v(&[0.0, 1.0]), v(&[1.0])).is_err());
    }

    #[test]
    fn zero_head_gives_ln2_variance() {
        let p = PumHeadParams {
            w_mu: LinearParams::zeros(3, 4, true),
            w_sigma: LinearParams::zeros(3, 4, true),
            variance_floor: 1e-6,
        };
        let g = gaussian_head(&v(&[1.0, -2.0, 3.0]), &p).unwrap();
        assert_eq!(g.mu().data(), &[0.0; 4]);
        for s in g.sigma2().data() {
            assert!((s - (2f64.ln() + 1e-6)).abs() < 1e-15);
            assert!((s - 0.693148).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_returns_mean_bias() {
        let mut rng = RngState::seed(1);
        let mut p = PumHeadParams::init(3, 2, 1e-6, &mut rng);
        p.w_mu.bias = Some(v(&[0.25, -1.5]));
        let g = gaussian_head(&Tensor::zeros(&[3]), &p).unwrap();
        assert_eq!(g.mu().data(), &[0.25, -1.5]);
    }

    #[test]
    fn variance_is_positive_for_extreme_inputs() {
        let mut rng = RngState::seed(2);
        let p = PumHeadParams::init(3, 5, 1e-6, &mut rng);
        let g = gaussian_head(&v(&[-500.0, 800.0, -900.0]), &p).unwrap();
        assert!(g.sigma2().data().iter().all(|&s| s >= 1e-6));
    }

    #[test]
    fn zero_noise_returns_mean() {
        let g = gaussian(&[0.5, -0.5], &[2.0, 3.0]);
        assert_eq!(reparameterize_with(&g, &[0.0, 0.0]).data(), &[0.5, -0.5]);
        let tight = gaussian(&[0.5, -0.5], &[1e-14, 1e-14]);
        let z = reparameterize(&tight, &mut RngState::seed(3));
        assert!((z.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn averaged_needs_positive_k() {
        let g = gaussian(&[0.0], &[1.0]);
        let cls = ClassifierParams::new(LinearParams::zeros(1, 2, true)).unwrap();
        assert!(predict_averaged(&g, &cls, 0, &mut RngState::seed(0)).is_err());
    }

    #[test]
    fn k1_matches_single_sample_and_stochastic_once() {
        let mut rng = RngState::seed(4);
        let cls = ClassifierParams::init(3, 4, &mut rng);
        let g = gaussian(&[0.1, 0.2, -0.3], &[0.5, 1.5, 0.2]);
        let a = predict_averaged(&g, &cls, 1, &mut RngState::seed(9)).unwrap();
        let b = crate::layers::classify(&reparameterize(&g, &mut RngState::seed(9)), &cls).unwrap();
        let c = predict_stochastic_once(&g, &cls, &mut RngState::seed(9)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn collapsed_gaussian_matches_deterministic() {
        let mut rng = RngState::seed(5);
        let cls = ClassifierParams::init(4, 3, &mut rng);
        let g = gaussian(&[0.3, -0.1, 0.7, 0.2], &[1e-14; 4]);
        let det = predict_deterministic(&g, &cls).unwrap();
        for k in [1, 8, 64] {
            let avg = predict_averaged(&g, &cls, k, &mut rng).unwrap();
            for (a, d) in avg.data().iter().zip(det.data()) {
                assert!((a - d).abs() < 1e-6);
            }
        }
        let zero = ClassifierParams::new(LinearParams::zeros(4, 3, true)).unwrap();
        let u = predict_deterministic(&g, &zero).unwrap();
        assert!(u.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn entropy_examples() {
        let g = gaussian(&[0.0], &[1.0]);
        assert!((differential_entropy(&g) - 1.418939).abs() < 1e-6);
        let g16 = gaussian(&[0.0; 16], &[1.0; 16]);
        assert!((differential_entropy(&g16) - 22.70302).abs() < 1e-5);
        let s2 = [0.3, 1.7, 0.01, 5.0];
        let e2 = std::f64::consts::E.powi(2);
        let base = differential_entropy(&gaussian(&[0.0; 4], &s2));
        let scaled: Vec<f64> = s2.iter().map(|s| s * e2).collect();
        let up = differential_entropy(&gaussian(&[0.0; 4], &scaled));
        assert!((up - base - 4.0).abs() < 1e-9);
    }

    #[test]
    fn traced_entropy_matches_value() {
        let s2 = v(&[0.3, 1.7, 0.01]);
        let mut tape = Tape::new();
        let n = tape.leaf(s2.clone());
        let h = entropy_traced(&mut tape, n).unwrap();
        let g = GaussianParams::new(Tensor::zeros(&[3]), s2).unwrap();
        assert!((tape.value(h).data()[0] - differential_entropy(&g)).abs() < 1e-12);
    }
}
