#![allow(dead_code)]

use std::path::Path;

use livesketch::config::AppConfig;
use livesketch::corpus::Corpus;
use livesketch::dataset::save_corpus;
use livesketch::pipeline::{train_all, Models, PipelineConfig};
use livesketch::raster_encoder::ConvDims;
use livesketch::vae::VaeDims;

/// A pipeline small enough to train in a few seconds.
pub fn tiny_config(seed: u64) -> AppConfig {
    let mut p = PipelineConfig::quick();
    p.corpus.classes = vec!["circle".into(), "box".into(), "zigzag".into()];
    p.corpus.train_per_class = 16;
    p.corpus.test_per_class = 4;
    p.corpus.images_per_class = 8;
    p.corpus.max_points = 40;
    p.vae = VaeDims {
        latent_dim: 8,
        hidden: 16,
        max_points: 40,
        ..p.vae
    };
    p.vae_train.epochs = 2;
    p.structure = ConvDims {
        input_size: 32,
        channels: vec![4, 4, 8, 8],
        out_dim: 8,
    };
    p.structure_train.epochs = 1;
    p.semantic = p.structure.clone();
    p.semantic_train.epochs = 1;
    p.fc_hidden = 16;
    p.search_dim = 16;
    p.joint_train.epochs = 2;
    let mut c = AppConfig {
        pipeline: p,
        ..AppConfig::default()
    };
    c.ann.subspaces = 4;
    c.ann.iterations = 5;
    c.service.k = 12;
    c.service.max_k = 40;
    c.perturb.steps = 30;
    c.bench.pairs = 4;
    c.bench.steps = 3;
    c.bench.backprop.steps = 30;
    c.with_seed(seed)
}

pub fn write_config(config: &AppConfig, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(config).unwrap()).unwrap();
}

pub fn tiny_models(config: &AppConfig) -> (Corpus, Models) {
    let corpus = livesketch::corpus::build_toy_corpus(&config.pipeline.corpus).unwrap();
    let (models, _) = train_all(&corpus, &config.pipeline).unwrap();
    (corpus, models)
}

/// Dataset, models and index written under `root`.
pub fn tiny_deployment(config: &AppConfig, root: &Path) -> (Corpus, Models) {
    let (corpus, models) = tiny_models(config);
    save_corpus(&corpus, &config.pipeline.corpus, &root.join("data")).unwrap();
    models.save(&root.join("models")).unwrap();
    livesketch::service::index_corpus(&corpus, &models, &config.ann, &root.join("index")).unwrap();
    (corpus, models)
}
pub mod intent_oracle;
