//! Command-line entry points.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::AppConfig;
use crate::corpus::{build_toy_corpus, split_corpus, CorpusConfig};
use crate::dataset::{load_corpus, save_corpus};
use crate::error::{Error, Result};
use crate::eval::{
    bench_contact_sheet, contact_sheet_svg, run_perturbation_bench, run_s2i, run_s2s, ExperimentReport, S2iVariant,
    S2sDirection,
};
use crate::joint::FcStack;
use crate::numerics::Checkpoint;
use crate::perturb::{interpolation_sequence, Method, PerturbationRequest, Target, SEQUENCE_STEPS};
use crate::pipeline::{
    labels_for, train_joint_stage, train_raster_stage, train_vae_stage, Models, FC_FILE, SEMANTIC_FILE,
    STRUCTURE_FILE, VAE_FILE,
};
use crate::raster_encoder::{SemanticEncoder, StructureEncoder};
use crate::service::{index_corpus, serve, AppState, Engine};
use crate::sketch::parse_ndjson;
use crate::vae::SketchVae;

#[derive(Debug, Parser)]
#[command(name = "livesketch", version, about = "Interactive sketch-based image retrieval")]
pub struct Cli {
    /// Seed for every random component.
    #[arg(long, global = true, env = "LIVESKETCH_SEED")]
    pub seed: Option<u64>,
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true, env = "LIVESKETCH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Start from the reduced training configuration instead of the full one.
    #[arg(long, global = true)]
    pub quick: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dataset from QuickDraw ndjson, or synthesise the toy corpus.
    Ingest {
        /// QuickDraw-format ndjson; the toy generators are used when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// Sketches used per class, split in the configured proportions.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sketch autoencoder.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Train the raster encoders; needs the autoencoder's class list.
    TrainRaster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Train the joint embedding on top of the frozen encoders.
    TrainJoint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Encode the image gallery and the target sketches into indexes.
    Index {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Run retrieval and perturbation experiments.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(value_enum, default_value_t = Experiment::All)]
        experiment: Experiment,
    },
    /// Morph one test sketch toward another with every method.
    PerturbDemo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Test-set index of the query sketch.
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Test-set index of the target sketch; defaults to the first one
        /// of another class.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
        /// SVG contact sheet.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    All,
    S2sVr,
    S2sRv,
    S2sVrShuffled,
    S2sRvShuffled,
    S2i,
    Perturb,
}

impl Cli {
    pub fn app_config(&self) -> Result<AppConfig> {
        let mut config = match &self.config {
            Some(path) => AppConfig::load(path)?,
            None if self.quick => AppConfig::quick(),
            None => AppConfig::default(),
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        config.validate()?;
        Ok(config)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn checkpoint(dir: &Path, name: &str) -> Result<Checkpoint> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::NotFound(format!("checkpoint {}; run the earlier training stage first", path.display())));
    }
    Checkpoint::load(&path)
}

fn ingest(config: &AppConfig, input: Option<&Path>, classes: Option<Vec<String>>, per_class: Option<usize>, out: &Path) -> Result<()> {
    let mut corpus_config = config.pipeline.corpus.clone();
    if let Some(classes) = classes {
        corpus_config.classes = classes;
    }
    if let Some(n) = per_class {
        corpus_config = scale_split(&corpus_config, n)?;
    }
    let corpus = match input {
        None => build_toy_corpus(&corpus_config)?,
        Some(path) => {
            let parsed = parse_ndjson(BufReader::new(std::fs::File::open(path)?))?;
            if !parsed.errors.is_empty() {
                log::warn!("{}: {} unreadable records skipped", path.display(), parsed.errors.len());
            }
            split_corpus(parsed.sketches, &corpus_config)?
        }
    };
    save_corpus(&corpus, &corpus_config, out)?;
    println!(
        "{} classes, {} train, {} test, {} images → {}",
        corpus_config.classes.len(),
        corpus.train.len(),
        corpus.test.len(),
        corpus.images.len(),
        out.display()
    );
    Ok(())
}

/// Splits `n` sketches per class in the configured train/test/image ratio.
fn scale_split(c: &CorpusConfig, n: usize) -> Result<CorpusConfig> {
    if n < 3 {
        return Err(Error::invalid("--per-class needs at least 3 sketches per class"));
    }
    let total = (c.train_per_class + c.test_per_class + c.images_per_class) as f64;
    let test = ((c.test_per_class as f64 / total * n as f64).round() as usize).max(1);
    let images = ((c.images_per_class as f64 / total * n as f64).round() as usize).max(1);
    let train = n.checked_sub(test + images).filter(|&t| t >= 1).ok_or_else(|| Error::invalid("--per-class too small"))?;
    Ok(CorpusConfig {
        train_per_class: train,
        test_per_class: test,
        images_per_class: images,
        ..c.clone()
    })
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

fn experiment_reports(which: Experiment, data: &Path, models: &Models, config: &AppConfig, out: &Path) -> Result<()> {
    let (corpus, _) = load_corpus(data)?;
    let seed = config.seed;
    let mut reports: Vec<ExperimentReport> = Vec::new();
    let s2s = [
        (Experiment::S2sVr, S2sDirection::VectorToRaster, false),
        (Experiment::S2sRv, S2sDirection::RasterToVector, false),
        (Experiment::S2sVrShuffled, S2sDirection::VectorToRaster, true),
        (Experiment::S2sRvShuffled, S2sDirection::RasterToVector, true),
    ];
    for (e, direction, shuffle) in s2s {
        if which == Experiment::All || which == e {
            reports.push(run_s2s(direction, shuffle, &corpus.test, models, seed)?);
        }
    }
    if matches!(which, Experiment::All | Experiment::S2i) {
        for variant in S2iVariant::ALL {
            reports.push(run_s2i(variant, &corpus.test, &corpus.images, models, seed)?);
        }
    }
    std::fs::create_dir_all(out)?;
    if !reports.is_empty() {
        let mut table = ExperimentReport::table_header();
        for r in &reports {
            table.push('\n');
            table.push_str(&r.table_row());
            write_json(&out.join(format!("{}.json", slug(&r.name))), r)?;
        }
        table.push('\n');
        std::fs::write(out.join("table.txt"), &table)?;
        print!("{table}");
    }
    if matches!(which, Experiment::All | Experiment::Perturb) {
        let report = run_perturbation_bench(&corpus.test, models, &config.bench)?;
        write_json(&out.join("perturb.json"), &report)?;
        std::fs::write(out.join("perturb.svg"), bench_contact_sheet(&report, 5))?;
        println!(
            "perturbation: loss decreased on {:.1}% of pairs, weighted distance improved on {:.1}%",
            100.0 * report.loss_decreased,
            100.0 * report.distance_improved
        );
        for (method, v) in &report.validity {
            println!("  {method:?} valid frames {:.1}%", 100.0 * v);
        }
    }
    Ok(())
}

fn perturb_demo(data: &Path, models: &Models, config: &AppConfig, query: usize, target: Option<usize>, weight: f64, out: &Path) -> Result<()> {
    let (corpus, _) = load_corpus(data)?;
    let test = &corpus.test;
    let q = test
        .get(query)
        .ok_or_else(|| Error::invalid(format!("query index {query} out of range ({} test sketches)", test.len())))?;
    let t = match target {
        Some(i) => test
            .get(i)
            .ok_or_else(|| Error::invalid(format!("target index {i} out of range")))?,
        None => test
            .iter()
            .find(|s| s.class() != q.class())
            .ok_or_else(|| Error::invalid("no test sketch of another class"))?,
    };
    let mut rows = Vec::new();
    for method in [Method::Linear, Method::Slerp, Method::Backprop] {
        let request = PerturbationRequest {
            query_v: models.v_e(q)?,
            targets: vec![Target {
                v: models.v_e(t)?,
                s: models.s_q(t)?,
            }],
            weights: vec![weight],
            method,
            config: config.perturb.clone(),
        };
        let frames = interpolation_sequence(&models.vae, &models.fc, &request, SEQUENCE_STEPS)?;
        let last = frames.last().map(|f| models.fc.f_v(&f.v)).transpose()?;
        if let Some(s) = last {
            let d: f64 = s.iter().zip(&request.targets[0].s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            println!("{method:?}: final distance to target {d:.4}");
        }
        rows.push((format!("{method:?}"), frames.into_iter().map(|f| f.sketch).collect()));
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, contact_sheet_svg(&rows, 64.0))?;
    println!("contact sheet → {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.app_config()?;
    match cli.command {
        Command::Ingest {
            input,
            classes,
            per_class,
            out,
        } => ingest(&config, input.as_deref(), classes, per_class, &out),
        Command::TrainVae { data, models } => {
            let (corpus, _) = load_corpus(&data)?;
            let (vae, curve) = train_vae_stage(&corpus, &config.pipeline)?;
            std::fs::create_dir_all(&models)?;
            vae.to_checkpoint().save(&models.join(VAE_FILE))?;
            write_json(&models.join("vae_curve.json"), &curve)?;
            if let Some(last) = curve.last() {
                println!("vae: {} epochs, final {last:?}", curve.len());
            }
            Ok(())
        }
        Command::TrainRaster { data, models } => {
            let (corpus, _) = load_corpus(&data)?;
            let vae = SketchVae::from_checkpoint(&checkpoint(&models, VAE_FILE)?)?;
            let labels = labels_for(&corpus.train, &vae)?;
            let (structure, semantic, s_curve, z_curve) =
                train_raster_stage(&corpus, vae.class_names(), &labels, &config.pipeline)?;
            structure.to_checkpoint().save(&models.join(STRUCTURE_FILE))?;
            semantic.to_checkpoint().save(&models.join(SEMANTIC_FILE))?;
            write_json(&models.join("structure_curve.json"), &s_curve)?;
            write_json(&models.join("semantic_curve.json"), &z_curve)?;
            println!("raster encoders: {} + {} epochs", s_curve.len(), z_curve.len());
            Ok(())
        }
        Command::TrainJoint { data, models } => {
            let (corpus, _) = load_corpus(&data)?;
            let vae = SketchVae::from_checkpoint(&checkpoint(&models, VAE_FILE)?)?;
            let structure = StructureEncoder::from_checkpoint(&checkpoint(&models, STRUCTURE_FILE)?)?;
            // checked for presence so a missing stage fails here, not at index time
            SemanticEncoder::from_checkpoint(&checkpoint(&models, SEMANTIC_FILE)?)?;
            let labels = labels_for(&corpus.train, &vae)?;
            let (fc, curve): (FcStack, _) = train_joint_stage(&corpus, &vae, &structure, &labels, &config.pipeline)?;
            fc.to_checkpoint().save(&models.join(FC_FILE))?;
            write_json(&models.join("joint_curve.json"), &curve)?;
            println!("joint embedding: {} epochs", curve.len());
            Ok(())
        }
        Command::Index { data, models, out } => {
            let (corpus, _) = load_corpus(&data)?;
            let models = Models::load(&models)?;
            index_corpus(&corpus, &models, &config.ann, &out)?;
            println!("indexed {} images and {} sketches → {}", corpus.images.len(), corpus.train.len(), out.display());
            Ok(())
        }
        Command::Serve { index, models, bind } => {
            let bind = bind.unwrap_or_else(|| config.service.bind.clone());
            let engine = Engine::load(&index, &models, config)?;
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(serve(AppState::new(engine), &bind))
        }
        Command::Eval {
            data,
            models,
            out,
            experiment,
        } => {
            let models = Models::load(&models)?;
            experiment_reports(experiment, &data, &models, &config, &out)
        }
        Command::PerturbDemo {
            data,
            models,
            query,
            target,
            weight,
            out,
        } => {
            let models = Models::load(&models)?;
            perturb_demo(&data, &models, &config, query, target, weight, &out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_keeps_the_configured_ratio() {
        let c = CorpusConfig::default();
        let s = scale_split(&c, 80).unwrap();
        assert_eq!(s.train_per_class + s.test_per_class + s.images_per_class, 80);
        assert_eq!((s.train_per_class, s.test_per_class, s.images_per_class), (50, 10, 20));
        assert!(scale_split(&c, 2).is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["livesketch", "--seed", "3", "eval", "--data", "d", "--models", "m", "--out", "o", "s2i"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(matches!(cli.command, Command::Eval { experiment: Experiment::S2i, .. }));
        assert!(Cli::try_parse_from(["livesketch", "frobnicate"]).is_err());
    }
}
