//! Recurrent variational autoencoder for stroke sequences.
//!
//! A bidirectional LSTM reads the `(dx, dy, lift)` sequence; its final
//! states are projected to a deterministic code `z0`, and a bottleneck maps
//! `z0` to the Gaussian parameters `(mu, log_var)` from which `batch_z` is
//! drawn. A linear classifier on `mu` adds a softmax loss. The decoder LSTM
//! is conditioned on `batch_z` and regresses the next offset, pen-lift and
//! end-of-sketch logits (or a diagonal Gaussian mixture over the offset).
//!
//! `mu` is the deterministic embedding used by search.

mod loss;
mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot_std, substream, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::sketch::{Sketch, StrokePoint, DEFAULT_MAX_POINTS};

pub use loss::{covariance_clamp, kl_loss, VaeLosses, VARIANCE_CEILING};
pub(crate) use train::clip_global_norm;
pub use train::{train_vae, train_vae_from, EpochStats, ItemLoss, LossWeights, TrainedVae, VaeTrainConfig};

pub const CHECKPOINT_KIND: &str = "rnn-vae";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DecoderHead {
    /// Squared error on offsets, cross-entropy on pen-lift and end flags.
    Regression,
    /// Diagonal bivariate Gaussian mixture over offsets.
    Mixture { components: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeDims {
    pub latent_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub max_points: usize,
    pub head: DecoderHead,
    /// Cap posterior variance at [`VARIANCE_CEILING`].
    #[serde(default = "default_true")]
    pub clamp_covariance: bool,
}

fn default_true() -> bool {
    true
}

impl Default for VaeDims {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            hidden: 256,
            classes: 10,
            max_points: DEFAULT_MAX_POINTS,
            head: DecoderHead::Regression,
            clamp_covariance: true,
        }
    }
}

impl VaeDims {
    fn head_width(&self) -> usize {
        match self.head {
            DecoderHead::Regression => 4,
            DecoderHead::Mixture { components } => 5 * components + 2,
        }
    }
}

/// Encoder output for one sketch. All vectors have the latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z0: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub batch_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub sketch: Sketch,
    /// The rollout stopped at `max_steps` rather than an end signal.
    pub hit_max_steps: bool,
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    enc_fwd_w: usize,
    enc_fwd_b: usize,
    enc_bwd_w: usize,
    enc_bwd_b: usize,
    z0_w: usize,
    z0_b: usize,
    mu_w: usize,
    mu_b: usize,
    lv_w: usize,
    lv_b: usize,
    cls_w: usize,
    cls_b: usize,
    init_w: usize,
    init_b: usize,
    dec_w: usize,
    dec_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Slots {
    fn resolve(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            enc_fwd_w: store.index_of("enc.fwd.w")?,
            enc_fwd_b: store.index_of("enc.fwd.b")?,
            enc_bwd_w: store.index_of("enc.bwd.w")?,
            enc_bwd_b: store.index_of("enc.bwd.b")?,
            z0_w: store.index_of("enc.z0.w")?,
            z0_b: store.index_of("enc.z0.b")?,
            mu_w: store.index_of("enc.mu.w")?,
            mu_b: store.index_of("enc.mu.b")?,
            lv_w: store.index_of("enc.logvar.w")?,
            lv_b: store.index_of("enc.logvar.b")?,
            cls_w: store.index_of("enc.classifier.w")?,
            cls_b: store.index_of("enc.classifier.b")?,
            init_w: store.index_of("dec.init.w")?,
            init_b: store.index_of("dec.init.b")?,
            dec_w: store.index_of("dec.lstm.w")?,
            dec_b: store.index_of("dec.lstm.b")?,
            head_w: store.index_of("dec.head.w")?,
            head_b: store.index_of("dec.head.b")?,
        })
    }
}

/// Metadata saved alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VaeMeta {
    dims: VaeDims,
    offset_scale: f64,
    class_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SketchVae {
    dims: VaeDims,
    offset_scale: f64,
    class_names: Vec<String>,
    store: ParamStore,
    slots: Slots,
}

/// Encoder tape values for one sketch.
pub(crate) struct EncoderVars<'t> {
    pub z0: Var<'t>,
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
}

const START_TOKEN: [f64; 3] = [0.0, 0.0, 1.0];

fn lstm_weight(rng: &mut impl Rng, input: usize, hidden: usize) -> (Tensor, Tensor) {
    let w = Tensor::randn(&[input + hidden, 4 * hidden], glorot_std(input + hidden, hidden), rng);
    let mut b = vec![0.0; 4 * hidden];
    // forget gate starts open
    b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
    (w, Tensor::row(b))
}

impl SketchVae {
    /// Fresh randomly initialised model. `offset_scale` is the corpus offset
    /// deviation that inputs are divided by.
    pub fn new(dims: VaeDims, class_names: Vec<String>, offset_scale: f64, seed: u64) -> Result<Self> {
        if dims.latent_dim == 0 || dims.hidden == 0 || dims.max_points == 0 {
            return Err(Error::invalid("VAE dimensions must be positive"));
        }
        if class_names.len() != dims.classes {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                class_names.len(),
                dims.classes
            )));
        }
        if let DecoderHead::Mixture { components: 0 } = dims.head {
            return Err(Error::invalid("mixture head needs at least one component"));
        }
        if !(offset_scale > 0.0) {
            return Err(Error::invalid("offset scale must be positive"));
        }
        let mut rng = substream(seed, "vae-init");
        let (h, d) = (dims.hidden, dims.latent_dim);
        let mut store = ParamStore::new();
        let (w, b) = lstm_weight(&mut rng, 3, h);
        store.insert("enc.fwd.w", w)?;
        store.insert("enc.fwd.b", b)?;
        let (w, b) = lstm_weight(&mut rng, 3, h);
        store.insert("enc.bwd.w", w)?;
        store.insert("enc.bwd.b", b)?;
        store.insert("enc.z0.w", Tensor::randn(&[2 * h, d], glorot_std(2 * h, d), &mut rng))?;
        store.insert("enc.z0.b", Tensor::zeros(&[1, d]))?;
        store.insert("enc.mu.w", Tensor::randn(&[d, d], glorot_std(d, d), &mut rng))?;
        store.insert("enc.mu.b", Tensor::zeros(&[1, d]))?;
        store.insert("enc.logvar.w", Tensor::randn(&[d, d], 0.01, &mut rng))?;
        store.insert("enc.logvar.b", Tensor::zeros(&[1, d]))?;
        let classes = dims.classes.max(1);
        store.insert("enc.classifier.w", Tensor::randn(&[d, classes], glorot_std(d, classes), &mut rng))?;
        store.insert("enc.classifier.b", Tensor::zeros(&[1, classes]))?;
        store.insert("dec.init.w", Tensor::randn(&[d, 2 * h], glorot_std(d, 2 * h), &mut rng))?;
        store.insert("dec.init.b", Tensor::zeros(&[1, 2 * h]))?;
        let (w, b) = lstm_weight(&mut rng, 3 + d, h);
        store.insert("dec.lstm.w", w)?;
        store.insert("dec.lstm.b", b)?;
        let out = dims.head_width();
        store.insert("dec.head.w", Tensor::randn(&[h, out], glorot_std(h, out), &mut rng))?;
        store.insert("dec.head.b", Tensor::zeros(&[1, out]))?;
        let slots = Slots::resolve(&store)?;
        Ok(Self {
            dims,
            offset_scale,
            class_names,
            store,
            slots,
        })
    }

    pub fn dims(&self) -> &VaeDims {
        &self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent_dim
    }

    pub fn offset_scale(&self) -> f64 {
        self.offset_scale
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Names of encoder-side parameters (the recurrent encoder, bottleneck
    /// and classifier).
    pub fn encoder_param_names(&self) -> Vec<&str> {
        self.store
            .names()
            .iter()
            .filter(|n| n.starts_with("enc."))
            .map(String::as_str)
            .collect()
    }

    pub fn decoder_param_names(&self) -> Vec<&str> {
        self.store
            .names()
            .iter()
            .filter(|n| n.starts_with("dec."))
            .map(String::as_str)
            .collect()
    }

    fn check_sketch(&self, sketch: &Sketch) -> Result<()> {
        if sketch.is_empty() {
            return Err(Error::contract("cannot encode an empty sketch"));
        }
        if sketch.len() > self.dims.max_points {
            return Err(Error::contract(format!(
                "sketch has {} points, encoder accepts at most {}",
                sketch.len(),
                self.dims.max_points
            )));
        }
        Ok(())
    }

    fn normalized_rows(&self, sketch: &Sketch) -> Vec<[f64; 3]> {
        sketch
            .points()
            .iter()
            .map(|p| [p.dx / self.offset_scale, p.dy / self.offset_scale, p.lift_value()])
            .collect()
    }

    /// Runs the bidirectional encoder on the tape.
    pub(crate) fn encoder_vars<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        sketch: &Sketch,
    ) -> Result<EncoderVars<'t>> {
        self.check_sketch(sketch)?;
        let s = self.slots;
        let h = self.dims.hidden;
        let rows = self.normalized_rows(sketch);
        let run = |w: Var<'t>, b: Var<'t>, order: &mut dyn Iterator<Item = &[f64; 3]>| -> Result<Var<'t>> {
            let mut hs = tape.leaf(Tensor::zeros(&[1, h]));
            let mut cs = tape.leaf(Tensor::zeros(&[1, h]));
            for r in order {
                let x = tape.leaf(Tensor::row(r.to_vec()));
                let out = x.lstm_cell(hs, cs, w, b)?;
                hs = out.slice_cols(0, h)?;
                cs = out.slice_cols(h, 2 * h)?;
            }
            Ok(hs)
        };
        let hf = run(p[s.enc_fwd_w], p[s.enc_fwd_b], &mut rows.iter())?;
        let hb = run(p[s.enc_bwd_w], p[s.enc_bwd_b], &mut rows.iter().rev())?;
        let both = Var::concat_cols(&[hf, hb])?;
        let z0 = both.matmul(p[s.z0_w])?.add(p[s.z0_b])?.tanh();
        let mu = z0.matmul(p[s.mu_w])?.add(p[s.mu_b])?;
        let log_var = z0.matmul(p[s.lv_w])?.add(p[s.lv_b])?;
        Ok(EncoderVars { z0, mu, log_var })
    }

    pub(crate) fn classifier_logits<'t>(&self, p: &[Var<'t>], mu: Var<'t>) -> Result<Var<'t>> {
        mu.matmul(p[self.slots.cls_w])?.add(p[self.slots.cls_b])
    }

    /// Deterministic encoding: `batch_z = mu`.
    pub fn encode(&self, sketch: &Sketch) -> Result<LatentCode> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let enc = self.encoder_vars(&tape, &p, sketch)?;
        let mu = enc.mu.value().to_vec();
        let mut log_var = enc.log_var.value().to_vec();
        if self.dims.clamp_covariance {
            log_var = covariance_clamp(&log_var);
        }
        Ok(LatentCode {
            z0: enc.z0.value().to_vec(),
            batch_z: mu.clone(),
            mu,
            log_var,
        })
    }

    /// Encoding with a reparameterised draw `batch_z = mu + exp(log_var/2)·η`.
    pub fn encode_sampled<R: Rng + ?Sized>(&self, sketch: &Sketch, rng: &mut R) -> Result<LatentCode> {
        let mut code = self.encode(sketch)?;
        code.batch_z = reparameterize(&code.mu, &code.log_var, rng);
        Ok(code)
    }

    /// The search-facing embedding in V.
    pub fn embed(&self, sketch: &Sketch) -> Result<Vec<f64>> {
        Ok(self.encode(sketch)?.mu)
    }

    pub fn classify(&self, sketch: &Sketch) -> Result<usize> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let enc = self.encoder_vars(&tape, &p, sketch)?;
        let logits = self.classifier_logits(&p, enc.mu)?.value();
        Ok(argmax(logits.data()))
    }

    fn decoder_init<'t>(&self, p: &[Var<'t>], z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.dims.hidden;
        let init = z.matmul(p[self.slots.init_w])?.add(p[self.slots.init_b])?.tanh();
        Ok((init.slice_cols(0, h)?, init.slice_cols(h, 2 * h)?))
    }

    /// Teacher-forced decoder outputs, one row per target point.
    pub(crate) fn decoder_outputs<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        z: Var<'t>,
        targets: &[[f64; 3]],
    ) -> Result<Var<'t>> {
        let s = self.slots;
        let h = self.dims.hidden;
        let (mut hs, mut cs) = self.decoder_init(p, z)?;
        let mut outs = Vec::with_capacity(targets.len());
        let mut prev = START_TOKEN;
        for t in targets {
            let x = Var::concat_cols(&[tape.leaf(Tensor::row(prev.to_vec())), z])?;
            let out = x.lstm_cell(hs, cs, p[s.dec_w], p[s.dec_b])?;
            hs = out.slice_cols(0, h)?;
            cs = out.slice_cols(h, 2 * h)?;
            outs.push(hs);
            prev = *t;
        }
        Var::concat_rows(&outs)?.matmul(p[s.head_w])?.add_row(p[s.head_b])
    }

    /// Greedy autoregressive rollout from a latent vector.
    pub fn decode(&self, z: &[f64], max_steps: usize) -> Result<Decoded> {
        if z.len() != self.dims.latent_dim {
            return Err(Error::dim("decode", &[z.len()], &[self.dims.latent_dim]));
        }
        let max_steps = max_steps.max(1);
        let s = self.slots;
        let h = self.dims.hidden;
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let zv = tape.leaf(Tensor::row(z.to_vec()));
        let (mut hs, mut cs) = self.decoder_init(&p, zv)?;
        let mut prev = START_TOKEN;
        let mut points = Vec::new();
        let mut hit_max_steps = true;
        for step in 0..max_steps {
            let x = Var::concat_cols(&[tape.leaf(Tensor::row(prev.to_vec())), zv])?;
            let out = x.lstm_cell(hs, cs, p[s.dec_w], p[s.dec_b])?;
            hs = out.slice_cols(0, h)?;
            cs = out.slice_cols(h, 2 * h)?;
            let y = hs.matmul(p[s.head_w])?.add(p[s.head_b])?.value();
            let y = y.data();
            let (dx, dy) = match self.dims.head {
                DecoderHead::Regression => (y[0], y[1]),
                DecoderHead::Mixture { components: k } => {
                    let best = argmax(&y[..k]);
                    (y[k + best], y[2 * k + best])
                }
            };
            let w = y.len();
            let mut lift = y[w - 2] > 0.0;
            let end = y[w - 1] > 0.0;
            if end || step + 1 == max_steps {
                lift = true;
            }
            points.push(StrokePoint::new(dx * self.offset_scale, dy * self.offset_scale, lift));
            prev = [dx, dy, if lift { 1.0 } else { 0.0 }];
            if end {
                hit_max_steps = false;
                break;
            }
        }
        if !points.iter().all(|p| p.dx.is_finite() && p.dy.is_finite()) {
            return Err(Error::contract("decoder produced non-finite offsets"));
        }
        Ok(Decoded {
            sketch: Sketch::new(points, None)?,
            hit_max_steps,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = VaeMeta {
            dims: self.dims.clone(),
            offset_scale: self.offset_scale,
            class_names: self.class_names.clone(),
        };
        Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(meta).expect("metadata serialises"),
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: VaeMeta = serde_json::from_value(ckpt.config.clone())?;
        let store = ckpt.to_store()?;
        let fresh = Self::new(meta.dims.clone(), meta.class_names.clone(), meta.offset_scale, 0)?;
        for (name, t) in fresh.store.names().iter().zip(fresh.store.tensors()) {
            if store.by_name(name)?.shape() != t.shape() {
                return Err(Error::dim("vae checkpoint", store.by_name(name)?.shape(), t.shape()));
            }
        }
        let slots = Slots::resolve(&store)?;
        Ok(Self {
            dims: meta.dims,
            offset_scale: meta.offset_scale,
            class_names: meta.class_names,
            store,
            slots,
        })
    }
}

pub fn reparameterize<R: Rng + ?Sized>(mu: &[f64], log_var: &[f64], rng: &mut R) -> Vec<f64> {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| {
            let eta: f64 = StandardNormal.sample(rng);
            m + (lv / 2.0).exp() * eta
        })
        .collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
