use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{clamp_var, cross_entropy, kl_var, reconstruction, step_targets, VaeLosses};
use super::{argmax, SketchVae, VaeDims};
use crate::error::{Error, Result};
use crate::numerics::{substream, Adam, AdamConfig, GradAccumulator, Tape, Tensor, Var};
use crate::sketch::{fit_length, offset_std, Sketch, DEFAULT_RDP_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub kl_weight: f64,
    /// Fixed deviation of the regression head's offset likelihood, in
    /// normalised offset units.
    pub offset_sigma: f64,
    /// Linear KL warm-up length in epochs; 0 disables annealing.
    pub kl_anneal_epochs: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Draw `batch_z` by reparameterisation during training.
    pub sample_latent: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            seed: 0,
            kl_weight: 1.0,
            offset_sigma: 0.1,
            kl_anneal_epochs: 0,
            grad_clip: 1.0,
            sample_latent: true,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sketch losses.
    pub losses: VaeLosses,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub model: SketchVae,
    pub curve: Vec<EpochStats>,
}

/// Loss-shape parameters that vary with the training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub offset_sigma: f64,
}

/// One sketch's loss terms on a tape.
pub struct ItemLoss<'t> {
    pub total: Var<'t>,
    pub reconstruction: Var<'t>,
    pub kl: Var<'t>,
    pub classification: Var<'t>,
    pub logits: Var<'t>,
}

impl SketchVae {
    /// Builds the training loss for one labelled sketch against bound
    /// parameters `p`. `noise` supplies η for the reparameterised draw;
    /// without it `batch_z = mu`.
    pub fn item_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        sketch: &Sketch,
        label: usize,
        noise: Option<&[f64]>,
        weights: LossWeights,
    ) -> Result<ItemLoss<'t>> {
        let enc = self.encoder_vars(tape, p, sketch)?;
        let log_var = if self.dims.clamp_covariance {
            clamp_var(enc.log_var)
        } else {
            enc.log_var
        };
        let z = match noise {
            Some(eta) => {
                let eta = tape.leaf(Tensor::row(eta.to_vec()));
                enc.mu.add(log_var.scale(0.5).exp().mul(eta)?)?
            }
            None => enc.mu,
        };
        let rows = self.normalized_rows(sketch);
        let targets = step_targets(&rows);
        let out = self.decoder_outputs(tape, p, z, &rows)?;
        let rec = reconstruction(tape, self.dims.head, weights.offset_sigma, out, &targets)?;
        let kl = kl_var(enc.mu, log_var)?;
        let logits = self.classifier_logits(p, enc.mu)?;
        let cls = cross_entropy(logits, label)?;
        let total = rec.add(kl.scale(weights.kl))?.add(cls)?;
        Ok(ItemLoss {
            total,
            reconstruction: rec,
            kl,
            classification: cls,
            logits,
        })
    }
}

struct ItemResult {
    grads: Vec<Tensor>,
    losses: VaeLosses,
    correct: bool,
}

fn run_item(
    model: &SketchVae,
    sketch: &Sketch,
    label: usize,
    noise: Option<&[f64]>,
    weights: LossWeights,
) -> Result<ItemResult> {
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let l = model.item_loss(&tape, &p, sketch, label, noise, weights)?;
    let losses = VaeLosses {
        reconstruction: l.reconstruction.value().item(),
        kl: l.kl.value().item(),
        classification: l.classification.value().item(),
        total: l.total.value().item(),
    };
    let correct = argmax(l.logits.value().data()) == label;
    let grads = model.params().grads(&tape.backward(l.total)?, &p);
    Ok(ItemResult {
        grads,
        losses,
        correct,
    })
}

pub(crate) fn clip_global_norm(grads: &mut [Tensor], ceiling: f64) {
    if ceiling <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > ceiling {
        let c = ceiling / norm;
        for g in grads.iter_mut() {
            *g = g.scale(c);
        }
    }
}

/// Sorted distinct class names of a labelled corpus.
pub(crate) fn class_names(corpus: &[Sketch]) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for s in corpus {
        let c = s
            .class()
            .ok_or_else(|| Error::invalid("training sketch without a class label"))?;
        if !names.iter().any(|n| n == c) {
            names.push(c.to_string());
        }
    }
    names.sort();
    Ok(names)
}

/// Trains a fresh model on a labelled corpus.
pub fn train_vae(corpus: &[Sketch], dims: VaeDims, config: &VaeTrainConfig) -> Result<TrainedVae> {
    let names = class_names(corpus)?;
    if names.len() < 2 {
        return Err(Error::invalid("VAE training needs at least two classes"));
    }
    let dims = VaeDims {
        classes: names.len(),
        ..dims
    };
    let scale = offset_std(corpus);
    if !(scale > 0.0) {
        return Err(Error::invalid("corpus offsets have zero variance"));
    }
    let model = SketchVae::new(dims, names, scale, config.seed)?;
    train_vae_from(model, corpus, config)
}

/// Continues training an existing model.
pub fn train_vae_from(mut model: SketchVae, corpus: &[Sketch], config: &VaeTrainConfig) -> Result<TrainedVae> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let max_points = model.dims.max_points;
    let items: Vec<(Sketch, usize)> = corpus
        .iter()
        .map(|s| {
            let label = s
                .class()
                .and_then(|c| model.class_index(c))
                .ok_or_else(|| Error::invalid(format!("unknown class {:?}", s.class())))?;
            Ok((fit_length(s, max_points, DEFAULT_RDP_EPSILON), label))
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut adam = Adam::new(adam_config, model.params().tensors());
    let mut order_rng = substream(config.seed, "vae-order");
    let mut noise_rng = substream(config.seed, "vae-noise");
    let d = model.latent_dim();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let kl_weight = if config.kl_anneal_epochs > 0 {
            config.kl_weight * ((epoch + 1) as f64 / config.kl_anneal_epochs as f64).min(1.0)
        } else {
            config.kl_weight
        };
        let weights = LossWeights {
            kl: kl_weight,
            offset_sigma: config.offset_sigma,
        };
        adam.config.learning_rate = config.learning_rate * config.lr_decay.powi(epoch as i32);
        order.shuffle(&mut order_rng);
        let mut sum = VaeLosses::default();
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let noise: Vec<Option<Vec<f64>>> = batch
                .iter()
                .map(|_| {
                    config
                        .sample_latent
                        .then(|| (0..d).map(|_| StandardNormal.sample(&mut noise_rng)).collect())
                })
                .collect();
            let results: Vec<Result<ItemResult>> = batch
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&i, eta)| run_item(&model, &items[i].0, items[i].1, eta.as_deref(), weights))
                .collect();
            let mut acc = GradAccumulator::new(model.params());
            for r in results {
                let r = r?;
                if !r.losses.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("non-finite loss {:?}", r.losses),
                    });
                }
                sum.accumulate(&r.losses);
                correct += r.correct as usize;
                acc.add(&r.grads);
            }
            let mut grads = acc.take_mean();
            clip_global_norm(&mut grads, config.grad_clip);
            adam.step(model.params_mut().tensors_mut(), &grads)?;
            if !model.params().all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite parameters after update".into(),
                });
            }
        }
        let stats = EpochStats {
            epoch,
            losses: sum.scaled(1.0 / items.len() as f64),
            train_accuracy: correct as f64 / items.len() as f64,
        };
        log::info!(
            "vae epoch {epoch}: total {:.4} rec {:.4} kl {:.4} cls {:.4} acc {:.3}",
            stats.losses.total,
            stats.losses.reconstruction,
            stats.losses.kl,
            stats.losses.classification,
            stats.train_accuracy
        );
        curve.push(stats);
        if let Some(dir) = &config.checkpoint_dir {
            model.to_checkpoint().save(&dir.join(format!("vae-epoch-{epoch:03}.json")))?;
        }
    }
    Ok(TrainedVae { model, curve })
}
