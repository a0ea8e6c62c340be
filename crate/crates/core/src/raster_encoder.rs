//! Convolutional raster encoders.
//!
//! [`StructureEncoder`] maps a canvas into the raster space R through one
//! of two branches: the sketch branch and the image branch have their own
//! first convolution and share every later layer. [`SemanticEncoder`] is a
//! small classifier whose penultimate activations give the auxiliary
//! embedding Z.

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{he_std, substream, Adam, AdamConfig, Checkpoint, ConvGeometry, GradAccumulator};
use crate::numerics::{glorot_std, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::sketch::RasterCanvas;

pub const STRUCTURE_KIND: &str = "structure-encoder";
pub const SEMANTIC_KIND: &str = "semantic-encoder";

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvDims {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output channels of each stride-2 3×3 block.
    pub channels: Vec<usize>,
    pub out_dim: usize,
}

impl ConvDims {
    pub fn structure_default() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 64, 64],
            out_dim: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.out_dim == 0 {
            return Err(Error::invalid("conv dims must be positive with at least one block"));
        }
        if self.input_size < 2 {
            return Err(Error::invalid("input size too small"));
        }
        Ok(())
    }

    fn geometry(&self, block: usize) -> ConvGeometry {
        let mut side = self.input_size;
        let mut channels = 1;
        for b in 0..block {
            side = (side + 1) / 2;
            channels = self.channels[b];
        }
        ConvGeometry {
            height: side,
            width: side,
            channels,
            stride: 2,
            pad: 1,
        }
    }
}

fn conv_weights(store: &mut ParamStore, prefix: &str, geo: ConvGeometry, out: usize, rng: &mut SeededRng) -> Result<()> {
    let patch = geo.patch_len();
    store.insert(format!("{prefix}.w"), Tensor::randn(&[patch, out], he_std(patch), rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, out]))?;
    Ok(())
}

/// `relu(im2col(x) · w + b)`.
fn conv_block<'t>(x: Var<'t>, geo: ConvGeometry, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(x.im2col(geo)?.matmul(w)?.add_row(b)?.relu())
}

fn canvas_leaf<'t>(tape: &'t Tape, canvas: &RasterCanvas, size: usize) -> Result<Var<'t>> {
    if canvas.width != size || canvas.height != size {
        return Err(Error::dim("canvas", &[canvas.width, canvas.height], &[size, size]));
    }
    Ok(tape.leaf(Tensor::new(vec![size * size, 1], canvas.pixels.clone())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Sketch,
    Image,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Sketch => "sketch",
            Branch::Image => "image",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StructureEncoder {
    dims: ConvDims,
    store: ParamStore,
}

impl StructureEncoder {
    pub fn new(dims: ConvDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = substream(seed, "structure-init");
        let mut store = ParamStore::new();
        for branch in [Branch::Sketch, Branch::Image] {
            conv_weights(&mut store, &format!("{}.conv0", branch.prefix()), dims.geometry(0), dims.channels[0], &mut rng)?;
        }
        for b in 1..dims.channels.len() {
            conv_weights(&mut store, &format!("trunk.conv{b}"), dims.geometry(b), dims.channels[b], &mut rng)?;
        }
        let last = *dims.channels.last().unwrap();
        store.insert("head.w", Tensor::randn(&[last, dims.out_dim], glorot_std(last, dims.out_dim), &mut rng))?;
        store.insert("head.b", Tensor::zeros(&[1, dims.out_dim]))?;
        Ok(Self { dims, store })
    }

    pub fn dims(&self) -> &ConvDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Unit-norm embedding of a canvas through one branch, on the tape.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], canvas: &RasterCanvas, branch: Branch) -> Result<Var<'t>> {
        let idx = |name: &str| self.store.index_of(name).map(|i| p[i]);
        let mut x = canvas_leaf(tape, canvas, self.dims.input_size)?;
        let pre = branch.prefix();
        x = conv_block(x, self.dims.geometry(0), idx(&format!("{pre}.conv0.w"))?, idx(&format!("{pre}.conv0.b"))?)?;
        for b in 1..self.dims.channels.len() {
            x = conv_block(x, self.dims.geometry(b), idx(&format!("trunk.conv{b}.w"))?, idx(&format!("trunk.conv{b}.b"))?)?;
        }
        Ok(x.mean_rows()
            .matmul(idx("head.w")?)?
            .add(idx("head.b")?)?
            .normalize_rows(NORM_EPS))
    }

    pub fn encode(&self, canvas: &RasterCanvas, branch: Branch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        Ok(self.forward(&tape, &p, canvas, branch)?.value().to_vec())
    }

    /// R_S: the sketch branch.
    pub fn r_s(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        self.encode(canvas, Branch::Sketch)
    }

    /// R_I: the image branch.
    pub fn r_i(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        self.encode(canvas, Branch::Image)
    }

    /// Mean L2 distance between R_S and R_I on the same canvases.
    pub fn branch_gap(&self, canvases: &[RasterCanvas]) -> Result<f64> {
        if canvases.is_empty() {
            return Err(Error::invalid("branch gap needs at least one canvas"));
        }
        let d = canvases
            .par_iter()
            .map(|c| {
                let (s, i) = (self.r_s(c)?, self.r_i(c)?);
                Ok(s.iter().zip(&i).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            STRUCTURE_KIND,
            serde_json::to_value(&self.dims).expect("dims serialise"),
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(STRUCTURE_KIND)?;
        let dims: ConvDims = serde_json::from_value(ckpt.config.clone())?;
        let store = ckpt.to_store()?;
        check_layout(&Self::new(dims.clone(), 0)?.store, &store)?;
        Ok(Self { dims, store })
    }
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::Format(format!(
            "parameter names {:?} do not match {:?}",
            got.names(),
            expected.names()
        )));
    }
    for (a, b) in expected.tensors().iter().zip(got.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::dim("checkpoint", b.shape(), a.shape()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    dims: ConvDims,
    class_names: Vec<String>,
    store: ParamStore,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SemanticMeta {
    dims: ConvDims,
    class_names: Vec<String>,
}

impl SemanticEncoder {
    /// `dims.out_dim` is the penultimate width d_z.
    pub fn new(dims: ConvDims, class_names: Vec<String>, seed: u64) -> Result<Self> {
        dims.validate()?;
        if class_names.len() < 2 {
            return Err(Error::invalid("semantic classifier needs at least two classes"));
        }
        let mut rng = substream(seed, "semantic-init");
        let mut store = ParamStore::new();
        for b in 0..dims.channels.len() {
            conv_weights(&mut store, &format!("conv{b}"), dims.geometry(b), dims.channels[b], &mut rng)?;
        }
        let last = *dims.channels.last().unwrap();
        store.insert("penult.w", Tensor::randn(&[last, dims.out_dim], he_std(last), &mut rng))?;
        store.insert("penult.b", Tensor::zeros(&[1, dims.out_dim]))?;
        let n = class_names.len();
        store.insert("classifier.w", Tensor::randn(&[dims.out_dim, n], glorot_std(dims.out_dim, n), &mut rng))?;
        store.insert("classifier.b", Tensor::zeros(&[1, n]))?;
        Ok(Self {
            dims,
            class_names,
            store,
            trained: false,
        })
    }

    pub fn dims(&self) -> &ConvDims {
        &self.dims
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Returns `(penultimate, logits)`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], canvas: &RasterCanvas) -> Result<(Var<'t>, Var<'t>)> {
        let idx = |name: &str| self.store.index_of(name).map(|i| p[i]);
        let mut x = canvas_leaf(tape, canvas, self.dims.input_size)?;
        for b in 0..self.dims.channels.len() {
            x = conv_block(x, self.dims.geometry(b), idx(&format!("conv{b}.w"))?, idx(&format!("conv{b}.b"))?)?;
        }
        let z = x.mean_rows().matmul(idx("penult.w")?)?.add(idx("penult.b")?)?.relu();
        let logits = z.matmul(idx("classifier.w")?)?.add(idx("classifier.b")?)?;
        Ok((z, logits))
    }

    /// Z(I): penultimate activations of the trained classifier.
    pub fn z_embed(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::contract("semantic encoder has not been trained"));
        }
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        Ok(self.forward(&tape, &p, canvas)?.0.value().to_vec())
    }

    pub fn classify(&self, canvas: &RasterCanvas) -> Result<usize> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let logits = self.forward(&tape, &p, canvas)?.1.value();
        Ok(crate::vae::argmax(logits.data()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = SemanticMeta {
            dims: self.dims.clone(),
            class_names: self.class_names.clone(),
        };
        Checkpoint::from_store(SEMANTIC_KIND, serde_json::to_value(meta).expect("meta serialises"), &self.store)
    }

    /// Loaded encoders count as trained.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(SEMANTIC_KIND)?;
        let meta: SemanticMeta = serde_json::from_value(ckpt.config.clone())?;
        let store = ckpt.to_store()?;
        check_layout(&Self::new(meta.dims.clone(), meta.class_names.clone(), 0)?.store, &store)?;
        Ok(Self {
            dims: meta.dims,
            class_names: meta.class_names,
            store,
            trained: true,
        })
    }
}

/// A labelled raster. `instance` groups renderings of the same drawing.
#[derive(Debug, Clone)]
pub struct LabelledRaster {
    pub canvas: RasterCanvas,
    pub label: usize,
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for ConvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 2e-3,
            margin: DEFAULT_MARGIN,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvEpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Triplet ordering accuracy or classification accuracy, by trainer.
    pub accuracy: f64,
}

/// `[m + ||a − p||² − ||a − n||²]₊` on the tape.
pub fn triplet_hinge<'t>(a: Var<'t>, p: Var<'t>, n: Var<'t>, margin: f64) -> Result<Var<'t>> {
    Ok(a.sq_dist(p)?.sub(a.sq_dist(n)?)?.affine(1.0, margin).relu())
}

/// One structure-encoder triplet: an anchor sketch raster, a positive
/// rendering of the same class and a negative rendering of another class.
#[derive(Debug, Clone)]
pub struct StructureTriplet {
    pub anchor: RasterCanvas,
    pub positive: RasterCanvas,
    pub negative: RasterCanvas,
}

fn by_label(items: &[LabelledRaster]) -> Vec<Vec<usize>> {
    let classes = items.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); classes];
    for (i, r) in items.iter().enumerate() {
        out[r.label].push(i);
    }
    out
}

/// Trains the structure encoder with triplets. Anchors are sketch rasters
/// through the sketch branch; positives and negatives are drawn from
/// `gallery` and go through the image branch. Half of the positives are
/// renderings of the anchor's own drawing when one exists.
pub fn train_structure(
    mut model: StructureEncoder,
    anchors: &[LabelledRaster],
    gallery: &[LabelledRaster],
    config: &ConvTrainConfig,
) -> Result<(StructureEncoder, Vec<ConvEpochStats>)> {
    let classes = by_label(gallery);
    if classes.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(Error::invalid("structure training needs at least two classes"));
    }
    let mut by_instance: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for (i, g) in gallery.iter().enumerate() {
        by_instance.entry(g.instance).or_default().push(i);
    }
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), model.params().tensors());
    let mut rng = substream(config.seed, "structure-triplets");
    let mut curve = Vec::new();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let triplets: Vec<(usize, usize, usize)> = order
            .iter()
            .map(|&a| {
                let label = anchors[a].label;
                let own = by_instance.get(&anchors[a].instance);
                let pos = match own {
                    Some(own) if rng.random_bool(0.5) => *own.choose(&mut rng).unwrap(),
                    _ => *classes
                        .get(label)
                        .and_then(|c| c.choose(&mut rng))
                        .ok_or_else(|| Error::invalid(format!("class {label} has no gallery items")))?,
                };
                let neg_class = loop {
                    let c = rng.random_range(0..classes.len());
                    if c != label && !classes[c].is_empty() {
                        break c;
                    }
                };
                Ok((a, pos, *classes[neg_class].choose(&mut rng).unwrap()))
            })
            .collect::<Result<_>>()?;
        let mut loss_sum = 0.0;
        let mut ordered = 0usize;
        for batch in triplets.chunks(config.batch_size) {
            let results: Vec<Result<(Vec<Tensor>, f64, bool)>> = batch
                .par_iter()
                .map(|&(a, p, n)| {
                    let tape = Tape::new();
                    let params = model.params().bind(&tape);
                    let va = model.forward(&tape, &params, &anchors[a].canvas, Branch::Sketch)?;
                    let vp = model.forward(&tape, &params, &gallery[p].canvas, Branch::Image)?;
                    let vn = model.forward(&tape, &params, &gallery[n].canvas, Branch::Image)?;
                    let ok = va.sq_dist(vp)?.value().item() < va.sq_dist(vn)?.value().item();
                    let loss = triplet_hinge(va, vp, vn, config.margin)?;
                    let value = loss.value().item();
                    let grads = model.params().grads(&tape.backward(loss)?, &params);
                    Ok((grads, value, ok))
                })
                .collect();
            let mut acc = GradAccumulator::new(model.params());
            for r in results {
                let (g, value, ok) = r?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: "non-finite triplet loss".into(),
                    });
                }
                loss_sum += value;
                ordered += ok as usize;
                acc.add(&g);
            }
            let mut grads = acc.take_mean();
            crate::vae::clip_global_norm(&mut grads, config.grad_clip);
            adam.step(model.params_mut().tensors_mut(), &grads)?;
        }
        let stats = ConvEpochStats {
            epoch,
            loss: loss_sum / anchors.len() as f64,
            accuracy: ordered as f64 / anchors.len() as f64,
        };
        log::info!("structure epoch {epoch}: loss {:.4} ordered {:.3}", stats.loss, stats.accuracy);
        curve.push(stats);
    }
    Ok((model, curve))
}

/// Softmax cross-entropy training of the semantic classifier.
pub fn train_semantic(
    mut model: SemanticEncoder,
    items: &[LabelledRaster],
    config: &ConvTrainConfig,
) -> Result<(SemanticEncoder, Vec<ConvEpochStats>)> {
    let n_classes = model.class_names.len();
    if let Some(bad) = items.iter().find(|r| r.label >= n_classes) {
        return Err(Error::invalid(format!("label {} out of range", bad.label)));
    }
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), model.store.tensors());
    let mut rng = substream(config.seed, "semantic-order");
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curve = Vec::new();
    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(Vec<Tensor>, f64, bool)>> = batch
                .par_iter()
                .map(|&i| {
                    let tape = Tape::new();
                    let params = model.store.bind(&tape);
                    let (_, logits) = model.forward(&tape, &params, &items[i].canvas)?;
                    let ok = crate::vae::argmax(logits.value().data()) == items[i].label;
                    let loss = logits.log_softmax_rows().pick(items[i].label)?.scale(-1.0);
                    let value = loss.value().item();
                    Ok((model.store.grads(&tape.backward(loss)?, &params), value, ok))
                })
                .collect();
            let mut acc = GradAccumulator::new(&model.store);
            for r in results {
                let (g, value, ok) = r?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: "non-finite classification loss".into(),
                    });
                }
                loss_sum += value;
                correct += ok as usize;
                acc.add(&g);
            }
            let mut grads = acc.take_mean();
            crate::vae::clip_global_norm(&mut grads, config.grad_clip);
            adam.step(model.store.tensors_mut(), &grads)?;
        }
        let stats = ConvEpochStats {
            epoch,
            loss: loss_sum / items.len() as f64,
            accuracy: correct as f64 / items.len() as f64,
        };
        log::info!("semantic epoch {epoch}: loss {:.4} acc {:.3}", stats.loss, stats.accuracy);
        curve.push(stats);
    }
    model.trained = true;
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{rasterize, Sketch};

    fn tiny_dims() -> ConvDims {
        ConvDims {
            input_size: 16,
            channels: vec![4, 4],
            out_dim: 6,
        }
    }

    fn canvas() -> RasterCanvas {
        let s = Sketch::from_strokes(&[vec![(0.0, 0.0), (10.0, 4.0), (3.0, 9.0)]], None).unwrap();
        rasterize(&s, 16).unwrap()
    }

    #[test]
    fn branch_gap_vanishes_with_tied_first_blocks() {
        let mut enc = StructureEncoder::new(tiny_dims(), 3).unwrap();
        let c = canvas();
        assert!(enc.branch_gap(std::slice::from_ref(&c)).unwrap() > 0.0);
        assert!(enc.branch_gap(&[]).is_err());
        for part in ["w", "b"] {
            let from = enc.params().by_name(&format!("sketch.conv0.{part}")).unwrap().clone();
            let idx = enc.params().index_of(&format!("image.conv0.{part}")).unwrap();
            enc.params_mut().set(idx, from).unwrap();
        }
        assert_eq!(enc.branch_gap(&[c]).unwrap(), 0.0);
    }

    #[test]
    fn geometry_halves_each_block() {
        let d = ConvDims::structure_default();
        assert_eq!(d.geometry(0).height, 64);
        assert_eq!(d.geometry(3).height, 8);
        assert_eq!(d.geometry(3).channels, 64);
    }

    #[test]
    fn blank_canvas_gives_finite_unit_vector() {
        let enc = StructureEncoder::new(tiny_dims(), 1).unwrap();
        let v = enc.r_s(&RasterCanvas::blank(16, 16)).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        let n: f64 = v.iter().map(|x| x * x).sum();
        assert!(n <= 1.0 + 1e-9);
    }

    #[test]
    fn branches_differ_and_share_trunk() {
        let mut enc = StructureEncoder::new(tiny_dims(), 1).unwrap();
        let c = canvas();
        let (s0, i0) = (enc.r_s(&c).unwrap(), enc.r_i(&c).unwrap());
        assert_ne!(s0, i0);
        let idx = enc.params().index_of("trunk.conv1.w").unwrap();
        let bumped = enc.params().get(idx).map(|x| x * 1.5 + 0.01);
        enc.params_mut().set(idx, bumped).unwrap();
        assert_ne!(enc.r_s(&c).unwrap(), s0);
        assert_ne!(enc.r_i(&c).unwrap(), i0);
        // trunk stored once
        assert_eq!(enc.params().names().iter().filter(|n| n.starts_with("trunk.")).count(), 2);
    }

    #[test]
    fn wrong_canvas_size_rejected() {
        let enc = StructureEncoder::new(tiny_dims(), 1).unwrap();
        assert!(matches!(enc.r_s(&RasterCanvas::blank(8, 8)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn untrained_semantic_encoder_refuses_z() {
        let enc = SemanticEncoder::new(tiny_dims(), vec!["a".into(), "b".into()], 0).unwrap();
        assert!(matches!(enc.z_embed(&canvas()), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs() {
        let enc = StructureEncoder::new(tiny_dims(), 4).unwrap();
        let text = serde_json::to_string(&enc.to_checkpoint()).unwrap();
        let back = StructureEncoder::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(enc.r_i(&canvas()).unwrap(), back.r_i(&canvas()).unwrap());
        assert_eq!(enc.r_s(&canvas()).unwrap(), back.r_s(&canvas()).unwrap());
    }

    #[test]
    fn triplet_hinge_cases() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::row(vec![0.0, 0.0]));
        let p = tape.leaf(Tensor::row(vec![0.0, 0.0]));
        let n = tape.leaf(Tensor::row(vec![1.0, 0.0]));
        assert_eq!(triplet_hinge(a, p, n, 0.2).unwrap().value().item(), 0.0);
        let same = triplet_hinge(a, n, n, 0.2).unwrap().value().item();
        assert!((same - 0.2).abs() < 1e-15);
    }
}
