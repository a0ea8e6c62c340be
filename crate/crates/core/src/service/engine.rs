use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{PqConfig, PqIndex};
use crate::config::AppConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::intent::{identify_intents, IntentConfig, ResultItem};
use crate::perturb::{interpolation_sequence, perturb, Frame, Method, PerturbationRequest, PerturbationResult, Target, SEQUENCE_STEPS};
use crate::pipeline::Models;
use crate::sketch::{fit_length, parse_ndjson, Sketch};

const IMAGES_INDEX: &str = "images.pq";
const SKETCH_INDEX: &str = "sketches.pq";
const RECORDS: &str = "records.json";
const SKETCHES: &str = "sketches.ndjson";
const THUMBS: &str = "thumbs";

/// One indexed image. The class is kept for evaluation only; nothing on
/// the search path reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: u64,
    pub class: String,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

fn pq_for(n: usize, config: &PqConfig) -> PqConfig {
    let mut c = config.clone();
    if n < c.centroids {
        log::warn!("only {n} vectors; using {n} centroids per subspace");
        c.centroids = n;
    }
    c
}

fn flat(rows: &[Vec<f64>]) -> Vec<f32> {
    rows.iter().flatten().map(|&x| x as f32).collect()
}

/// Encodes the images with S_I and Z, the sketch collection with S_Q, and
/// writes both indexes, the records and the thumbnails to `out`.
pub fn index_corpus(corpus: &Corpus, models: &Models, config: &PqConfig, out: &Path) -> Result<()> {
    if corpus.images.is_empty() {
        return Err(Error::invalid("no images to index"));
    }
    if corpus.train.is_empty() {
        return Err(Error::invalid("no sketches to use as targets"));
    }
    let size = models.raster_size();
    if let Some(img) = corpus.images.iter().find(|i| i.canvas.width != size || i.canvas.height != size) {
        return Err(Error::dim("image size", &[img.canvas.width, img.canvas.height], &[size, size]));
    }
    std::fs::create_dir_all(out.join(THUMBS))?;
    let records: Vec<CorpusRecord> = corpus
        .images
        .par_iter()
        .map(|img| {
            Ok(CorpusRecord {
                id: img.id,
                class: img.class.clone(),
                s: models.s_i(&img.canvas)?,
                z: models.z(&img.canvas)?,
            })
        })
        .collect::<Result<_>>()?;
    let s_rows: Vec<Vec<f64>> = records.iter().map(|r| r.s.clone()).collect();
    let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    let dims = models.fc.dims().out_dim;
    let images = PqIndex::build(&flat(&s_rows), &ids, dims, &pq_for(ids.len(), config))?;
    images.save(&out.join(IMAGES_INDEX))?;

    let h: Vec<Vec<f64>> = corpus.train.par_iter().map(|s| models.s_q(s)).collect::<Result<_>>()?;
    let h_ids: Vec<u64> = (0..h.len() as u64).collect();
    let sketches = PqIndex::build(&flat(&h), &h_ids, dims, &pq_for(h.len(), config))?;
    sketches.save(&out.join(SKETCH_INDEX))?;
    let mut lines = String::new();
    for s in &corpus.train {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    std::fs::write(out.join(SKETCHES), lines)?;
    std::fs::write(out.join(RECORDS), serde_json::to_string(&records)?)?;
    for img in &corpus.images {
        std::fs::write(out.join(THUMBS).join(format!("{}.png", img.id)), img.canvas.to_png()?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    /// L2 distance in the search space.
    pub distance: f64,
}

/// A selected intent with its target sketch resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub members: Vec<u64>,
    pub representative: u64,
    pub target_id: u64,
    pub target: Sketch,
    pub target_v: Vec<f64>,
    pub target_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub results: Vec<Hit>,
    pub clusters: Vec<ClusterView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbOutcome {
    pub result: PerturbationResult,
    pub suggestion: Sketch,
    pub frames: Vec<Frame>,
}

/// Models, indexes and records, shared read-only by every request.
pub struct Engine {
    pub models: Models,
    images: PqIndex<f32>,
    sketches: PqIndex<f32>,
    records: Vec<CorpusRecord>,
    by_id: HashMap<u64, usize>,
    h: Vec<Sketch>,
    thumbs: HashMap<u64, Vec<u8>>,
    pub config: AppConfig,
}

impl Engine {
    pub fn load(index_dir: &Path, models_dir: &Path, config: AppConfig) -> Result<Self> {
        config.validate()?;
        let images_path = index_dir.join(IMAGES_INDEX);
        if !images_path.exists() {
            return Err(Error::NotFound(format!("image index {}", images_path.display())));
        }
        let models = Models::load(models_dir)?;
        let images = PqIndex::<f32>::load(&images_path)?;
        let sketches = PqIndex::<f32>::load(&index_dir.join(SKETCH_INDEX))?;
        let records: Vec<CorpusRecord> = serde_json::from_str(&std::fs::read_to_string(index_dir.join(RECORDS))?)?;
        let parsed = parse_ndjson(std::io::BufReader::new(std::fs::File::open(index_dir.join(SKETCHES))?))?;
        if !parsed.errors.is_empty() {
            return Err(Error::Format("unreadable target sketches".into()));
        }
        let h = parsed.sketches;
        let dims = models.fc.dims().out_dim;
        if images.dims() != dims || sketches.dims() != dims {
            return Err(Error::dim("index width", &[images.dims(), sketches.dims()], &[dims]));
        }
        if images.is_empty() {
            return Err(Error::invalid("the image index is empty"));
        }
        if records.len() != images.len() || h.len() != sketches.len() {
            return Err(Error::Format("index files disagree on item counts".into()));
        }
        let by_id = records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        let mut thumbs = HashMap::new();
        for r in &records {
            let path = index_dir.join(THUMBS).join(format!("{}.png", r.id));
            if path.exists() {
                thumbs.insert(r.id, std::fs::read(path)?);
            }
        }
        Ok(Self {
            models,
            images,
            sketches,
            records,
            by_id,
            h,
            thumbs,
            config,
        })
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn sketch_count(&self) -> usize {
        self.h.len()
    }

    pub fn thumbnail(&self, id: u64) -> Option<&[u8]> {
        self.thumbs.get(&id).map(Vec::as_slice)
    }

    pub fn record(&self, id: u64) -> Option<&CorpusRecord> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    /// Applies the model's length limit to a user sketch.
    pub fn prepare(&self, q: &Sketch) -> Sketch {
        fit_length(q, self.models.vae.dims().max_points, crate::sketch::DEFAULT_RDP_EPSILON)
    }

    /// k-NN in S, clustering in Z, representatives and targets.
    pub fn search(&self, q: &Sketch, k: usize, m: usize) -> Result<SearchOutcome> {
        if m == 0 || k < m {
            return Err(Error::invalid(format!("need k ≥ m ≥ 1, got k {k} m {m}")));
        }
        if k > self.config.service.max_k {
            return Err(Error::invalid(format!("k {k} exceeds the limit {}", self.config.service.max_k)));
        }
        let q = self.prepare(q);
        let s_query = self.models.s_q(&q)?;
        let q32: Vec<f32> = s_query.iter().map(|&x| x as f32).collect();
        let hits = self.images.knn(&q32, k)?;
        let items: Vec<ResultItem> = hits
            .iter()
            .map(|h| {
                let r = &self.records[self.by_id[&h.id]];
                ResultItem {
                    id: r.id,
                    z: r.z.clone(),
                    s: r.s.clone(),
                }
            })
            .collect();
        let intent = IntentConfig {
            clusters: m,
            ..self.config.intent.clone()
        };
        let intents = identify_intents(&items, &s_query, &self.sketches, &intent)?;
        let clusters = intents
            .into_iter()
            .map(|c| {
                let target = self.h[c.target as usize].clone();
                Ok(ClusterView {
                    target_v: self.models.v_e(&target)?,
                    target_s: self.models.s_q(&target)?,
                    members: c.members,
                    representative: c.representative,
                    target_id: c.target,
                    target,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SearchOutcome {
            results: hits
                .iter()
                .map(|h| Hit {
                    id: h.id,
                    distance: (h.distance as f64).max(0.0).sqrt(),
                })
                .collect(),
            clusters,
        })
    }

    /// Perturbs `q` toward the clusters' targets and decodes the suggestion
    /// plus a morph from `q` to it.
    pub fn perturb(&self, q: &Sketch, clusters: &[ClusterView], weights: &[f64], method: Method) -> Result<PerturbOutcome> {
        if clusters.is_empty() {
            return Err(Error::contract("no search targets; search first"));
        }
        if weights.len() != clusters.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} clusters",
                weights.len(),
                clusters.len()
            )));
        }
        let q = self.prepare(q);
        let request = PerturbationRequest {
            query_v: self.models.v_e(&q)?,
            targets: clusters
                .iter()
                .map(|c| Target {
                    v: c.target_v.clone(),
                    s: c.target_s.clone(),
                })
                .collect(),
            weights: weights.to_vec(),
            method,
            config: self.config.perturb.clone(),
        };
        let result = perturb(&self.models.fc, &request)?;
        let max = self.models.vae.dims().max_points;
        let suggestion = self.models.vae.decode(&result.new_v, max)?.sketch;
        let frames = interpolation_sequence(&self.models.vae, &self.models.fc, &request, SEQUENCE_STEPS)?;
        Ok(PerturbOutcome {
            result,
            suggestion,
            frames,
        })
    }
}
