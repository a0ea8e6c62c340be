//! Trains and bundles the four models behind the search embedding.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{image_style, Corpus, CorpusConfig};
use crate::error::{Error, Result};
use crate::joint::{train_joint, FcDims, FcStack, JointData, JointEpochStats, JointTrainConfig};
use crate::numerics::{substream, Checkpoint};
use crate::raster_encoder::{train_semantic, train_structure, ConvDims, ConvEpochStats, ConvTrainConfig};
use crate::raster_encoder::{LabelledRaster, SemanticEncoder, StructureEncoder};
use crate::sketch::{rasterize, rasterize_styled, RasterCanvas, Sketch};
use crate::vae::{train_vae, EpochStats, SketchVae, VaeDims, VaeTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub vae: VaeDims,
    pub vae_train: VaeTrainConfig,
    pub structure: ConvDims,
    pub structure_train: ConvTrainConfig,
    pub semantic: ConvDims,
    pub semantic_train: ConvTrainConfig,
    /// Hidden and output widths of the fc stack; input widths follow the
    /// upstream encoders.
    pub fc_hidden: usize,
    pub search_dim: usize,
    pub joint_train: JointTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            vae: VaeDims::default(),
            vae_train: VaeTrainConfig::default(),
            structure: ConvDims::structure_default(),
            structure_train: ConvTrainConfig::default(),
            semantic: ConvDims::structure_default(),
            semantic_train: ConvTrainConfig::default(),
            fc_hidden: 128,
            search_dim: 64,
            joint_train: JointTrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// A reduced configuration that trains end to end in about a minute on
    /// one core.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.corpus.train_per_class = 100;
        c.corpus.test_per_class = 20;
        c.corpus.images_per_class = 40;
        c.corpus.image_size = 32;
        c.vae = VaeDims {
            latent_dim: 32,
            hidden: 64,
            ..VaeDims::default()
        };
        c.vae_train = VaeTrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 4e-3,
            lr_decay: 0.95,
            ..VaeTrainConfig::default()
        };
        c.structure = ConvDims {
            input_size: 32,
            channels: vec![8, 16, 32, 32],
            out_dim: 32,
        };
        c.structure_train = ConvTrainConfig {
            epochs: 8,
            ..ConvTrainConfig::default()
        };
        c.semantic = ConvDims {
            input_size: 32,
            channels: vec![8, 16, 16, 16],
            out_dim: 32,
        };
        c.semantic_train = ConvTrainConfig {
            epochs: 4,
            ..ConvTrainConfig::default()
        };
        c.fc_hidden = 64;
        c.search_dim = 32;
        c.joint_train = JointTrainConfig {
            epochs: 30,
            learning_rate: 2e-3,
            instance_negative_share: 0.2,
            ..JointTrainConfig::default()
        };
        c
    }

    /// Propagates the global seed into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.vae_train.seed = seed;
        self.structure_train.seed = seed;
        self.semantic_train.seed = seed;
        self.joint_train.seed = seed;
        self
    }
}

/// Trained encoders for every modality.
#[derive(Debug, Clone)]
pub struct Models {
    pub vae: SketchVae,
    pub structure: StructureEncoder,
    pub semantic: SemanticEncoder,
    pub fc: FcStack,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingReport {
    pub vae: Vec<EpochStats>,
    pub structure: Vec<ConvEpochStats>,
    pub semantic: Vec<ConvEpochStats>,
    pub joint: Vec<JointEpochStats>,
}

pub const VAE_FILE: &str = "vae.json";
pub const STRUCTURE_FILE: &str = "structure.json";
pub const SEMANTIC_FILE: &str = "semantic.json";
pub const FC_FILE: &str = "fc.json";

impl Models {
    pub fn raster_size(&self) -> usize {
        self.structure.dims().input_size
    }

    pub fn rasterize(&self, sketch: &Sketch) -> Result<RasterCanvas> {
        rasterize(sketch, self.raster_size())
    }

    /// V_E: the deterministic latent of a sketch.
    pub fn v_e(&self, sketch: &Sketch) -> Result<Vec<f64>> {
        self.vae.embed(sketch)
    }

    /// S_Q = F_V ∘ V_E.
    pub fn s_q(&self, sketch: &Sketch) -> Result<Vec<f64>> {
        self.fc.f_v(&self.v_e(sketch)?)
    }

    /// F_R ∘ R_S, for raster sketches.
    pub fn s_r(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        self.fc.f_r(&self.structure.r_s(canvas)?)
    }

    /// S_I = F_R ∘ R_I, for images.
    pub fn s_i(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        self.fc.f_r(&self.structure.r_i(canvas)?)
    }

    pub fn z(&self, canvas: &RasterCanvas) -> Result<Vec<f64>> {
        self.semantic.z_embed(canvas)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vae.to_checkpoint().save(&dir.join(VAE_FILE))?;
        self.structure.to_checkpoint().save(&dir.join(STRUCTURE_FILE))?;
        self.semantic.to_checkpoint().save(&dir.join(SEMANTIC_FILE))?;
        self.fc.to_checkpoint().save(&dir.join(FC_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::NotFound(format!("checkpoint {}", path.display())));
            }
            Checkpoint::load(&path)
        };
        let models = Self {
            vae: SketchVae::from_checkpoint(&load(VAE_FILE)?)?,
            structure: StructureEncoder::from_checkpoint(&load(STRUCTURE_FILE)?)?,
            semantic: SemanticEncoder::from_checkpoint(&load(SEMANTIC_FILE)?)?,
            fc: FcStack::from_checkpoint(&load(FC_FILE)?)?,
        };
        models.check_compatible()?;
        Ok(models)
    }

    fn check_compatible(&self) -> Result<()> {
        let fc = self.fc.dims();
        if fc.vector_dim != self.vae.latent_dim() {
            return Err(Error::dim("fc vector input", &[fc.vector_dim], &[self.vae.latent_dim()]));
        }
        if fc.raster_dim != self.structure.dims().out_dim {
            return Err(Error::dim("fc raster input", &[fc.raster_dim], &[self.structure.dims().out_dim]));
        }
        if self.semantic.dims().input_size != self.raster_size() {
            return Err(Error::dim(
                "semantic input",
                &[self.semantic.dims().input_size],
                &[self.raster_size()],
            ));
        }
        Ok(())
    }
}

/// Augmented renderings of the training sketches, one per sketch.
fn augmented(train: &[Sketch], labels: &[usize], size: usize, seed: u64) -> Result<Vec<LabelledRaster>> {
    let mut rng = substream(seed, "train-augment");
    train
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, &label))| {
            Ok(LabelledRaster {
                canvas: rasterize_styled(s, size, image_style(&mut rng))?,
                label,
                instance: i,
            })
        })
        .collect()
}

pub fn train_vae_stage(corpus: &Corpus, config: &PipelineConfig) -> Result<(SketchVae, Vec<EpochStats>)> {
    let out = train_vae(&corpus.train, config.vae.clone(), &config.vae_train)?;
    Ok((out.model, out.curve))
}

/// Trains the structure and semantic encoders on renderings of the
/// training sketches.
pub fn train_raster_stage(
    corpus: &Corpus,
    class_names: &[String],
    labels: &[usize],
    config: &PipelineConfig,
) -> Result<(StructureEncoder, SemanticEncoder, Vec<ConvEpochStats>, Vec<ConvEpochStats>)> {
    let size = config.structure.input_size;
    let anchors: Vec<LabelledRaster> = corpus
        .train
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (s, &label))| {
            Ok(LabelledRaster {
                canvas: rasterize(s, size)?,
                label,
                instance: i,
            })
        })
        .collect::<Result<_>>()?;
    let gallery = augmented(&corpus.train, labels, size, config.seed)?;
    let structure = StructureEncoder::new(config.structure.clone(), config.seed)?;
    let (structure, s_curve) = train_structure(structure, &anchors, &gallery, &config.structure_train)?;
    let canvases: Vec<RasterCanvas> = anchors.iter().map(|a| a.canvas.clone()).collect();
    log::info!("sketch/image branch gap: {:.4}", structure.branch_gap(&canvases)?);

    if config.semantic.input_size != size {
        return Err(Error::invalid("semantic and structure encoders must share the raster size"));
    }
    let mut items = gallery;
    items.extend(anchors);
    let semantic = SemanticEncoder::new(config.semantic.clone(), class_names.to_vec(), config.seed)?;
    let (semantic, z_curve) = train_semantic(semantic, &items, &config.semantic_train)?;
    Ok((structure, semantic, s_curve, z_curve))
}

pub fn train_joint_stage(
    corpus: &Corpus,
    vae: &SketchVae,
    structure: &StructureEncoder,
    labels: &[usize],
    config: &PipelineConfig,
) -> Result<(FcStack, Vec<JointEpochStats>)> {
    let size = structure.dims().input_size;
    let encoded: Vec<Result<(Vec<f64>, Vec<f64>)>> = corpus
        .train
        .par_iter()
        .map(|s| Ok((vae.embed(s)?, structure.r_s(&rasterize(s, size)?)?)))
        .collect();
    let mut data = JointData {
        vectors: Vec::with_capacity(encoded.len()),
        rasters: Vec::with_capacity(encoded.len()),
        labels: labels.to_vec(),
    };
    for e in encoded {
        let (v, r) = e?;
        data.vectors.push(v);
        data.rasters.push(r);
    }
    let dims = FcDims {
        vector_dim: vae.latent_dim(),
        raster_dim: structure.dims().out_dim,
        hidden: config.fc_hidden,
        out_dim: config.search_dim,
    };
    let fc = FcStack::new(dims, config.seed)?;
    train_joint(fc, &data, &config.joint_train)
}

/// Trains all models in dependency order.
pub fn train_all(corpus: &Corpus, config: &PipelineConfig) -> Result<(Models, TrainingReport)> {
    let (vae, vae_curve) = train_vae_stage(corpus, config)?;
    let labels = labels_for(&corpus.train, &vae)?;
    let (structure, semantic, s_curve, z_curve) = train_raster_stage(corpus, vae.class_names(), &labels, config)?;
    let (fc, j_curve) = train_joint_stage(corpus, &vae, &structure, &labels, config)?;
    let models = Models {
        vae,
        structure,
        semantic,
        fc,
    };
    models.check_compatible()?;
    Ok((
        models,
        TrainingReport {
            vae: vae_curve,
            structure: s_curve,
            semantic: z_curve,
            joint: j_curve,
        },
    ))
}

/// Class index of every training sketch under the VAE's class list.
pub fn labels_for(sketches: &[Sketch], vae: &SketchVae) -> Result<Vec<usize>> {
    sketches
        .iter()
        .map(|s| {
            s.class()
                .and_then(|c| vae.class_index(c))
                .ok_or_else(|| Error::invalid(format!("sketch class {:?} unknown to the model", s.class())))
        })
        .collect()
}
