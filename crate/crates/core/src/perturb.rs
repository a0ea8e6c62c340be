//! Moves a query's latent code toward weighted search targets and decodes
//! the result as a suggested sketch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::{FcStack, Modality};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::sketch::Sketch;
use crate::vae::SketchVae;

/// Regulariser weight on `||v − Q^V||`.
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Frames in a suggestion morph.
pub const SEQUENCE_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linear,
    Slerp,
    Backprop,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Method::Linear),
            "slerp" => Ok(Method::Slerp),
            "backprop" => Ok(Method::Backprop),
            other => Err(Error::invalid(format!("unknown perturbation method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackpropConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    /// Added under the square root of the regulariser so its gradient is
    /// defined at the starting point.
    pub smoothing: f64,
}

impl Default for BackpropConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            alpha: DEFAULT_ALPHA,
            smoothing: 1e-8,
        }
    }
}

/// A search target in both the latent and the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub v: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRequest {
    pub query_v: Vec<f64>,
    pub targets: Vec<Target>,
    /// One per target; clamped to [0, 1], never renormalised.
    pub weights: Vec<f64>,
    pub method: Method,
    #[serde(default)]
    pub config: BackpropConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetDistance {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub method: Method,
    pub new_v: Vec<f64>,
    /// Objective per iterate, starting point first; empty unless
    /// backpropagating.
    pub loss_trace: Vec<f64>,
    pub distances: Vec<TargetDistance>,
    /// Set when the objective went non-finite and the best earlier iterate
    /// was returned.
    pub aborted: bool,
}

impl PerturbationRequest {
    fn validate(&self) -> Result<Vec<f64>> {
        if self.targets.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "{} targets but {} weights",
                self.targets.len(),
                self.weights.len()
            )));
        }
        let d = self.query_v.len();
        if d == 0 {
            return Err(Error::invalid("empty query code"));
        }
        for t in &self.targets {
            if t.v.len() != d {
                return Err(Error::dim("perturb target", &[t.v.len()], &[d]));
            }
        }
        if self.weights.iter().any(|w| !w.is_finite()) || self.query_v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite perturbation input"));
        }
        Ok(self.weights.iter().map(|w| w.clamp(0.0, 1.0)).collect())
    }

    /// ω scaled by `fraction`, for morph frames.
    pub fn scaled(&self, fraction: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w.clamp(0.0, 1.0) * fraction).collect(),
            ..self.clone()
        }
    }
}

/// `Q^V + Σ ωᵢ (Q^V*ᵢ − Q^V)`.
pub fn linear_code(request: &PerturbationRequest) -> Result<Vec<f64>> {
    let weights = request.validate()?;
    let q = &request.query_v;
    let mut out = q.clone();
    for (t, w) in request.targets.iter().zip(weights) {
        for ((o, &tv), &qv) in out.iter_mut().zip(&t.v).zip(q) {
            *o += w * (tv - qv);
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spherical interpolation from `a` toward `b` by angle fraction `w`.
/// Falls back to linear interpolation for (anti)parallel inputs.
pub fn slerp(a: &[f64], b: &[f64], w: f64) -> Result<Vec<f64>> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("spherical interpolation of a zero vector"));
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = theta.sin();
    if sin.abs() < 1e-9 {
        if cos < 0.0 {
            log::warn!("antiparallel codes; interpolating linearly");
        }
        return Ok(a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect());
    }
    let (ca, cb) = (((1.0 - w) * theta).sin() / sin, (w * theta).sin() / sin);
    Ok(a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect())
}

/// Targets applied one after another, each by its own ω.
pub fn slerp_code(request: &PerturbationRequest) -> Result<Vec<f64>> {
    let weights = request.validate()?;
    let mut cur = request.query_v.clone();
    for (t, w) in request.targets.iter().zip(weights) {
        if w > 0.0 {
            cur = slerp(&cur, &t.v, w)?;
        }
    }
    Ok(cur)
}

/// `(1/m) Σ ωⱼ ||F_V(v) − Q^S*ⱼ||² + α ||v − Q^V||` evaluated exactly.
pub fn objective(fc: &FcStack, request: &PerturbationRequest, v: &[f64]) -> Result<f64> {
    let weights = request.validate()?;
    let s = fc.f_v(v)?;
    let m = request.targets.len().max(1) as f64;
    let mut d = 0.0;
    for (t, w) in request.targets.iter().zip(&weights) {
        d += w * s.iter().zip(&t.s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let reg: f64 = v.iter().zip(&request.query_v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(d / m + request.config.alpha * reg)
}

/// Value and gradient of the smoothed objective at `v`.
fn objective_grad(fc: &FcStack, request: &PerturbationRequest, weights: &[f64], v: &[f64]) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let p = fc.params().bind(&tape);
    let x = tape.leaf(Tensor::row(v.to_vec()));
    let s = fc.forward(&p, x, Modality::Vector)?;
    let m = request.targets.len().max(1) as f64;
    let q = tape.leaf(Tensor::row(request.query_v.clone()));
    let mut loss = x.sub(q)?.l2_norm(request.config.smoothing).scale(request.config.alpha);
    for (t, &w) in request.targets.iter().zip(weights) {
        if w > 0.0 {
            let target = tape.leaf(Tensor::row(t.s.clone()));
            loss = loss.add(s.sq_dist(target)?.scale(w / m))?;
        }
    }
    let value = loss.value().item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt(x)))
}

/// Adam on the latent code with the fc weights held fixed; returns the
/// best iterate seen.
pub fn backprop_code(fc: &FcStack, request: &PerturbationRequest) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    let weights = request.validate()?;
    if fc.dims().vector_dim != request.query_v.len() {
        return Err(Error::dim("perturb query", &[request.query_v.len()], &[fc.dims().vector_dim]));
    }
    for t in &request.targets {
        if t.s.len() != fc.dims().out_dim {
            return Err(Error::dim("perturb target", &[t.s.len()], &[fc.dims().out_dim]));
        }
    }
    let mut v = vec![Tensor::row(request.query_v.clone())];
    let mut adam = Adam::new(AdamConfig::with_learning_rate(request.config.learning_rate), &v);
    let mut trace = Vec::with_capacity(request.config.steps + 1);
    let mut best = (f64::INFINITY, request.query_v.clone());
    let mut aborted = false;
    for step in 0..=request.config.steps {
        let current = v[0].data().to_vec();
        let exact = objective(fc, request, &current)?;
        if !exact.is_finite() {
            aborted = true;
            break;
        }
        trace.push(exact);
        if exact < best.0 {
            best = (exact, current.clone());
        }
        if step == request.config.steps {
            break;
        }
        let (_, grad) = objective_grad(fc, request, &weights, &current)?;
        if grad.data().iter().any(|g| !g.is_finite()) {
            aborted = true;
            break;
        }
        adam.step(&mut v, &[grad])?;
    }
    if aborted {
        log::warn!("perturbation objective went non-finite; returning the best earlier iterate");
    }
    Ok((best.1, trace, aborted))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `||Q^S − Q^S*ᵢ||` before and `||Q^S′ − Q^S*ᵢ||` after, per target.
pub fn distance_report(fc: &FcStack, request: &PerturbationRequest, new_v: &[f64]) -> Result<Vec<TargetDistance>> {
    let before = fc.f_v(&request.query_v)?;
    let after = fc.f_v(new_v)?;
    Ok(request
        .targets
        .iter()
        .map(|t| TargetDistance {
            before: distance(&before, &t.s),
            after: distance(&after, &t.s),
        })
        .collect())
}

/// Runs the requested method in the latent space.
pub fn perturb(fc: &FcStack, request: &PerturbationRequest) -> Result<PerturbationResult> {
    let (new_v, loss_trace, aborted) = match request.method {
        Method::Linear => (linear_code(request)?, Vec::new(), false),
        Method::Slerp => (slerp_code(request)?, Vec::new(), false),
        Method::Backprop => backprop_code(fc, request)?,
    };
    Ok(PerturbationResult {
        method: request.method,
        distances: distance_report(fc, request, &new_v)?,
        new_v,
        loss_trace,
        aborted,
    })
}

/// One frame of a suggestion morph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub fraction: f64,
    pub v: Vec<f64>,
    pub sketch: Sketch,
}

/// `steps` frames with ω ramped evenly from 0 to its full value, each
/// solved on its own and decoded.
pub fn interpolation_sequence(
    vae: &SketchVae,
    fc: &FcStack,
    request: &PerturbationRequest,
    steps: usize,
) -> Result<Vec<Frame>> {
    if steps < 2 {
        return Err(Error::invalid("a sequence needs at least two steps"));
    }
    (0..steps)
        .map(|i| {
            let fraction = i as f64 / (steps - 1) as f64;
            let r = perturb(fc, &request.scaled(fraction))?;
            let sketch = vae.decode(&r.new_v, vae.dims().max_points)?.sketch;
            Ok(Frame {
                fraction,
                v: r.new_v,
                sketch,
            })
        })
        .collect()
}
