//! The fully-connected unification stack that maps V and R into the
//! common search space S.
//!
//! Each modality has its own first layer; layers two to four are one set
//! of weights used by both paths. Outputs are L2-normalised.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot_std, he_std, substream, Adam, AdamConfig, Checkpoint, GradAccumulator};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::raster_encoder::{triplet_hinge, DEFAULT_MARGIN};

pub const CHECKPOINT_KIND: &str = "fc-stack";

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcDims {
    pub vector_dim: usize,
    pub raster_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for FcDims {
    fn default() -> Self {
        Self {
            vector_dim: 128,
            raster_dim: 64,
            hidden: 128,
            out_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vector,
    Raster,
}

#[derive(Debug, Clone)]
pub struct FcStack {
    dims: FcDims,
    store: ParamStore,
}

impl FcStack {
    pub fn new(dims: FcDims, seed: u64) -> Result<Self> {
        if [dims.vector_dim, dims.raster_dim, dims.hidden, dims.out_dim].contains(&0) {
            return Err(Error::invalid("fc dimensions must be positive"));
        }
        let mut rng = substream(seed, "fc-init");
        let h = dims.hidden;
        let mut store = ParamStore::new();
        store.insert("fc1.vector.w", Tensor::randn(&[dims.vector_dim, h], he_std(dims.vector_dim), &mut rng))?;
        store.insert("fc1.vector.b", Tensor::zeros(&[1, h]))?;
        store.insert("fc1.raster.w", Tensor::randn(&[dims.raster_dim, h], he_std(dims.raster_dim), &mut rng))?;
        store.insert("fc1.raster.b", Tensor::zeros(&[1, h]))?;
        store.insert("fc2.w", Tensor::randn(&[h, h], he_std(h), &mut rng))?;
        store.insert("fc2.b", Tensor::zeros(&[1, h]))?;
        store.insert("fc3.w", Tensor::randn(&[h, h], he_std(h), &mut rng))?;
        store.insert("fc3.b", Tensor::zeros(&[1, h]))?;
        store.insert("fc4.w", Tensor::randn(&[h, dims.out_dim], glorot_std(h, dims.out_dim), &mut rng))?;
        store.insert("fc4.b", Tensor::zeros(&[1, dims.out_dim]))?;
        Ok(Self { dims, store })
    }

    pub fn dims(&self) -> &FcDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Rows of `x` mapped into S, on the tape.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, modality: Modality) -> Result<Var<'t>> {
        let idx = |name: &str| self.store.index_of(name).map(|i| p[i]);
        let first = match modality {
            Modality::Vector => "fc1.vector",
            Modality::Raster => "fc1.raster",
        };
        let mut h = x
            .matmul(idx(&format!("{first}.w"))?)?
            .add_row(idx(&format!("{first}.b"))?)?
            .relu();
        for layer in ["fc2", "fc3"] {
            h = h.matmul(idx(&format!("{layer}.w"))?)?.add_row(idx(&format!("{layer}.b"))?)?.relu();
        }
        Ok(h.matmul(idx("fc4.w")?)?.add_row(idx("fc4.b")?)?.normalize_rows(NORM_EPS))
    }

    fn map(&self, x: &[f64], modality: Modality) -> Result<Vec<f64>> {
        let expected = match modality {
            Modality::Vector => self.dims.vector_dim,
            Modality::Raster => self.dims.raster_dim,
        };
        if x.len() != expected {
            return Err(Error::dim("fc stack input", &[x.len()], &[expected]));
        }
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let v = tape.leaf(Tensor::row(x.to_vec()));
        Ok(self.forward(&p, v, modality)?.value().to_vec())
    }

    /// F_V.
    pub fn f_v(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.map(v, Modality::Vector)
    }

    /// F_R.
    pub fn f_r(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.map(r, Modality::Raster)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.dims).expect("dims serialise"),
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let dims: FcDims = serde_json::from_value(ckpt.config.clone())?;
        let store: ParamStore = ckpt.to_store()?;
        let fresh = Self::new(dims.clone(), 0)?;
        if fresh.store.names() != store.names() {
            return Err(Error::Format("fc checkpoint layout mismatch".into()));
        }
        for (a, b) in fresh.store.tensors().iter().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::dim("fc checkpoint", b.shape(), a.shape()));
            }
        }
        Ok(Self { dims, store })
    }
}

/// `[m + ||a − p||² − ||a − n||²]₊` on plain vectors.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::dim("triplet_loss", &[a.len(), p.len()], &[n.len()]));
    }
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    Ok((margin + sq(a, p) - sq(a, n)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    /// Share of items held out for triplet validation.
    pub validation_fraction: f64,
    pub grad_clip: f64,
    /// Other-class candidates drawn per anchor; the one currently closest
    /// to the anchor in S becomes the negative.
    pub negative_candidates: usize,
    /// Probability that an anchor's negatives come from other sketches of
    /// its own class instead of other classes. Zero keeps negatives
    /// strictly cross-class.
    pub instance_negative_share: f64,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            margin: DEFAULT_MARGIN,
            seed: 0,
            validation_fraction: 0.1,
            grad_clip: 1.0,
            negative_candidates: 1,
            instance_negative_share: 0.0,
        }
    }
}

/// Training pairs: item `i` has latent `vectors[i]`, the R_S embedding of
/// its own rasterisation `rasters[i]`, and a class label.
#[derive(Debug, Clone)]
pub struct JointData {
    pub vectors: Vec<Vec<f64>>,
    pub rasters: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of validation triplets with `d_pos < d_neg`.
    pub validation_accuracy: f64,
}

fn draw_negative(labels: &[usize], label: usize, rng: &mut impl Rng) -> Result<usize> {
    if labels.iter().all(|&l| l == label) {
        return Err(Error::invalid("no negative of a different class"));
    }
    loop {
        let j = rng.random_range(0..labels.len());
        if labels[j] != label {
            return Ok(j);
        }
    }
}

/// Another item of the same class as `i`, or a cross-class one when `i`
/// has no siblings.
fn draw_sibling(labels: &[usize], i: usize, rng: &mut impl Rng) -> Result<usize> {
    let label = labels[i];
    if labels.iter().enumerate().all(|(j, &l)| j == i || l != label) {
        return draw_negative(labels, label, rng);
    }
    loop {
        let j = rng.random_range(0..labels.len());
        if j != i && labels[j] == label {
            return Ok(j);
        }
    }
}

/// Trains the stack with frozen upstream encoders: anchors go through the
/// vector path, positives (the anchor's rasterisation) and negatives
/// (rasterised sketches of another class) through the raster path.
pub fn train_joint(mut fc: FcStack, data: &JointData, config: &JointTrainConfig) -> Result<(FcStack, Vec<JointEpochStats>)> {
    let n = data.vectors.len();
    if data.rasters.len() != n || data.labels.len() != n || n < 2 {
        return Err(Error::invalid("joint data must hold matching vectors, rasters and labels"));
    }
    let mut rng = substream(config.seed, "joint-split");
    let mut items: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(items.as_mut_slice(), &mut rng);
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).min(n - 1);
    let (val, train) = items.split_at(n_val);
    let mut val_rng = substream(config.seed, "joint-validation");
    let val_triplets: Vec<(usize, usize)> = val
        .iter()
        .map(|&i| Ok((i, draw_negative(&data.labels, data.labels[i], &mut val_rng)?)))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), fc.params().tensors());
    let mut curve = Vec::new();
    let mut order = train.to_vec();
    for epoch in 0..config.epochs {
        let mut epoch_rng = substream(config.seed, &format!("joint-epoch-{epoch}"));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut epoch_rng);
        let k = config.negative_candidates.max(1);
        let candidates: Vec<(usize, Vec<usize>)> = order
            .iter()
            .map(|&i| {
                let same_class = epoch_rng.random::<f64>() < config.instance_negative_share;
                let c = (0..k)
                    .map(|_| {
                        if same_class {
                            draw_sibling(&data.labels, i, &mut epoch_rng)
                        } else {
                            draw_negative(&data.labels, data.labels[i], &mut epoch_rng)
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok((i, c))
            })
            .collect::<Result<_>>()?;
        let mut loss_sum = 0.0;
        for chunk in candidates.chunks(config.batch_size) {
            let batch = hardest_negatives(&fc, data, chunk)?;
            let (grads, loss) = batch_step(&fc, data, &batch, config.margin)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite triplet loss".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            let mut grads = grads;
            crate::vae::clip_global_norm(&mut grads, config.grad_clip);
            adam.step(fc.params_mut().tensors_mut(), &grads)?;
        }
        let validation_accuracy = triplet_accuracy(&fc, data, &val_triplets)?;
        let stats = JointEpochStats {
            epoch,
            loss: loss_sum / candidates.len().max(1) as f64,
            validation_accuracy,
        };
        log::info!("joint epoch {epoch}: loss {:.4} val acc {:.3}", stats.loss, validation_accuracy);
        curve.push(stats);
    }
    Ok((fc, curve))
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn hardest_negatives(fc: &FcStack, data: &JointData, chunk: &[(usize, Vec<usize>)]) -> Result<Vec<(usize, usize)>> {
    chunk
        .par_iter()
        .map(|(i, cands)| {
            if cands.len() == 1 {
                return Ok((*i, cands[0]));
            }
            let a = fc.f_v(&data.vectors[*i])?;
            let mut best = (f64::INFINITY, cands[0]);
            for &j in cands {
                let d = sq_dist(&a, &fc.f_r(&data.rasters[j])?);
                if d < best.0 {
                    best = (d, j);
                }
            }
            Ok((*i, best.1))
        })
        .collect()
}

/// Mean gradient and mean loss over a batch of `(anchor, negative)` pairs.
fn batch_step(fc: &FcStack, data: &JointData, batch: &[(usize, usize)], margin: f64) -> Result<(Vec<Tensor>, f64)> {
    let results: Vec<Result<(Vec<Tensor>, f64)>> = batch
        .par_iter()
        .map(|&(i, j)| {
            let tape = Tape::new();
            let p = fc.params().bind(&tape);
            let a = fc.forward(&p, tape.leaf(Tensor::row(data.vectors[i].clone())), Modality::Vector)?;
            let pos = fc.forward(&p, tape.leaf(Tensor::row(data.rasters[i].clone())), Modality::Raster)?;
            let neg = fc.forward(&p, tape.leaf(Tensor::row(data.rasters[j].clone())), Modality::Raster)?;
            let loss = triplet_hinge(a, pos, neg, margin)?;
            let value = loss.value().item();
            Ok((fc.params().grads(&tape.backward(loss)?, &p), value))
        })
        .collect();
    let mut acc = GradAccumulator::new(fc.params());
    let mut total = 0.0;
    for r in results {
        let (g, v) = r?;
        total += v;
        acc.add(&g);
    }
    Ok((acc.take_mean(), total / batch.len() as f64))
}

fn triplet_accuracy(fc: &FcStack, data: &JointData, triplets: &[(usize, usize)]) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(f64::NAN);
    }
    let ok: Vec<Result<bool>> = triplets
        .par_iter()
        .map(|&(i, j)| {
            let a = fc.f_v(&data.vectors[i])?;
            let p = fc.f_r(&data.rasters[i])?;
            let n = fc.f_r(&data.rasters[j])?;
            Ok(sq_dist(&a, &p) < sq_dist(&a, &n))
        })
        .collect();
    let mut hits = 0usize;
    for r in ok {
        hits += r? as usize;
    }
    Ok(hits as f64 / triplets.len() as f64)
}
