use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, empirical_chance, mean_ap, precision_at_k, rank_by_distance, RankedJudgment};
use crate::corpus::ImageItem;
use crate::error::{Error, Result};
use crate::numerics::substream;
use crate::perturb::{perturb, BackpropConfig, Method, PerturbationRequest, Target};
use crate::pipeline::Models;
use crate::sketch::{shuffle_strokes, Sketch};

/// Cut-offs of the precision curve.
pub const PRECISION_KS: [usize; 7] = [1, 5, 10, 15, 25, 50, 100];
pub const CHANCE_TRIALS: usize = 100;
pub const SCALE_NOTE: &str = "desk-scale toy corpus; large-scale figures are not reproduced here";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum S2sDirection {
    /// Vector queries against raster renderings.
    VectorToRaster,
    /// Raster queries against vector sketches.
    RasterToVector,
}

impl S2sDirection {
    pub fn label(self) -> &'static str {
        match self {
            S2sDirection::VectorToRaster => "V-R",
            S2sDirection::RasterToVector => "R-V",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum S2iVariant {
    /// Vector query in the search space.
    Ls,
    /// Rasterised query in the search space.
    LsR,
    /// Rasterised query in the intermediate raster space.
    LsRI,
}

impl S2iVariant {
    pub const ALL: [S2iVariant; 3] = [S2iVariant::Ls, S2iVariant::LsR, S2iVariant::LsRI];

    pub fn label(self) -> &'static str {
        match self {
            S2iVariant::Ls => "LS",
            S2iVariant::LsR => "LS-R",
            S2iVariant::LsRI => "LS-R-I",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub queries: usize,
    pub gallery: usize,
    pub class_ap: Vec<Option<f64>>,
    pub class_map: Option<f64>,
    pub class_chance: f64,
    pub instance_map: Option<f64>,
    pub instance_chance: Option<f64>,
    /// Share of queries whose exact counterpart ranks in the top 10.
    pub instance_top10: Option<f64>,
    /// `(k, mean class-level precision@k)`.
    pub precision_at_k: Vec<(usize, f64)>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub note: String,
}

impl ExperimentReport {
    fn from_judgments(name: String, gallery: usize, judgments: &[RankedJudgment], seed: u64, config: serde_json::Value) -> Self {
        let class_ap: Vec<Option<f64>> = judgments
            .iter()
            .map(|j| average_precision(&j.class_relevant, j.class_total))
            .collect();
        let skipped = class_ap.iter().filter(|a| a.is_none()).count();
        if skipped > 0 {
            log::warn!("{name}: {skipped} queries have no relevant gallery item and are excluded");
        }
        let has_instances = judgments.iter().any(|j| j.instance_total > 0);
        let (instance_map, instance_chance, instance_top10) = if has_instances {
            let aps: Vec<Option<f64>> = judgments
                .iter()
                .map(|j| average_precision(&j.instance_relevant, j.instance_total))
                .collect();
            let with: Vec<&RankedJudgment> = judgments.iter().filter(|j| j.instance_total > 0).collect();
            let top = with.iter().filter(|j| j.instance_rank().is_some_and(|r| r <= 10)).count();
            (
                mean_ap(&aps),
                Some(empirical_chance(judgments, true, CHANCE_TRIALS, seed)),
                Some(top as f64 / with.len() as f64),
            )
        } else {
            (None, None, None)
        };
        let n = judgments.len().max(1) as f64;
        let precision = PRECISION_KS
            .iter()
            .filter(|&&k| k <= gallery)
            .map(|&k| (k, judgments.iter().map(|j| precision_at_k(&j.class_relevant, k)).sum::<f64>() / n))
            .collect();
        Self {
            name,
            queries: judgments.len(),
            gallery,
            class_map: mean_ap(&class_ap),
            class_ap,
            class_chance: empirical_chance(judgments, false, CHANCE_TRIALS, seed),
            instance_map,
            instance_chance,
            instance_top10,
            precision_at_k: precision,
            seed,
            config,
            note: SCALE_NOTE.to_string(),
        }
    }

    /// One fixed-width table row.
    pub fn table_row(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("     -".to_string(), |v| format!("{:6.2}", 100.0 * v));
        format!(
            "{:<16} {:>5} {} {} {} {} {}",
            self.name,
            self.queries,
            pct(self.class_map),
            pct(Some(self.class_chance)),
            pct(self.instance_map),
            pct(self.instance_chance),
            pct(self.instance_top10),
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<16} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "experiment", "n", "mAP", "chance", "inst", "i-chan", "top10"
        )
    }
}

fn class_of(s: &Sketch) -> Result<String> {
    s.class()
        .map(str::to_string)
        .ok_or_else(|| Error::invalid("evaluation sketches need class labels"))
}

fn judge_all(queries: &[Vec<f64>], gallery: &[Vec<f64>], query_classes: &[String], gallery_classes: &[String], counterparts: bool) -> Vec<RankedJudgment> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            RankedJudgment::judge(
                i,
                rank_by_distance(q, gallery),
                &query_classes[i],
                gallery_classes,
                counterparts.then_some(i),
            )
        })
        .collect()
}

fn vector_side(models: &Models, sketches: &[Sketch], shuffle: bool, seed: u64) -> Result<Vec<Vec<f64>>> {
    sketches
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let s = if shuffle {
                shuffle_strokes(s, seed.wrapping_add(i as u64))
            } else {
                s.clone()
            };
            models.s_q(&s)
        })
        .collect()
}

fn raster_side(models: &Models, sketches: &[Sketch]) -> Result<Vec<Vec<f64>>> {
    sketches.par_iter().map(|s| models.s_r(&models.rasterize(s)?)).collect()
}

/// Sketch-to-sketch retrieval across modalities; every sketch queries the
/// others' renderings (or vectors) and its own counterpart is the instance
/// match. `shuffle` permutes stroke order on the vector side.
pub fn run_s2s(direction: S2sDirection, shuffle: bool, sketches: &[Sketch], models: &Models, seed: u64) -> Result<ExperimentReport> {
    if sketches.is_empty() {
        return Err(Error::invalid("no evaluation sketches"));
    }
    let classes: Vec<String> = sketches.iter().map(class_of).collect::<Result<_>>()?;
    let vectors = vector_side(models, sketches, shuffle, seed)?;
    let rasters = raster_side(models, sketches)?;
    let (queries, gallery) = match direction {
        S2sDirection::VectorToRaster => (vectors, rasters),
        S2sDirection::RasterToVector => (rasters, vectors),
    };
    let judgments = judge_all(&queries, &gallery, &classes, &classes, true);
    let name = format!("S2S {}{}", direction.label(), if shuffle { "-shuffle" } else { "" });
    let config = serde_json::json!({ "direction": direction, "shuffle": shuffle });
    Ok(ExperimentReport::from_judgments(name, gallery.len(), &judgments, seed, config))
}

/// Sketch-to-image retrieval for one ablation row; relevance is the image's
/// class.
pub fn run_s2i(variant: S2iVariant, queries: &[Sketch], images: &[ImageItem], models: &Models, seed: u64) -> Result<ExperimentReport> {
    if queries.is_empty() || images.is_empty() {
        return Err(Error::invalid("S2I needs queries and images"));
    }
    let classes: Vec<String> = queries.iter().map(class_of).collect::<Result<_>>()?;
    let image_classes: Vec<String> = images.iter().map(|i| i.class.clone()).collect();
    let q: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|s| match variant {
            S2iVariant::Ls => models.s_q(s),
            S2iVariant::LsR => models.s_r(&models.rasterize(s)?),
            S2iVariant::LsRI => models.structure.r_s(&models.rasterize(s)?),
        })
        .collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = images
        .par_iter()
        .map(|i| match variant {
            S2iVariant::LsRI => models.structure.r_i(&i.canvas),
            _ => models.s_i(&i.canvas),
        })
        .collect::<Result<_>>()?;
    let judgments = judge_all(&q, &g, &classes, &image_classes, false);
    let config = serde_json::json!({ "variant": variant });
    Ok(ExperimentReport::from_judgments(format!("S2I {}", variant.label()), g.len(), &judgments, seed, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbBenchConfig {
    pub pairs: usize,
    pub steps: usize,
    pub seed: u64,
    pub backprop: BackpropConfig,
}

impl Default for PerturbBenchConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            steps: crate::perturb::SEQUENCE_STEPS,
            seed: 0,
            backprop: BackpropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTrace {
    pub method: Method,
    /// `||F_V(v_t) − Q^S*||` per frame.
    pub latent_distance: Vec<f64>,
    /// `||S_Q(decode(v_t)) − Q^S*||` per frame; `None` if the frame decoded
    /// to nothing usable.
    pub decoded_distance: Vec<Option<f64>>,
    /// Frame decoded to a terminated, non-empty sketch.
    pub valid: Vec<bool>,
    #[serde(skip)]
    pub frames: Vec<Sketch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub query: usize,
    pub target: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `Σ ωᵢ ||Q^S − Q^S*ᵢ||²` before and after backpropagation.
    pub weighted_before: f64,
    pub weighted_after: f64,
    pub traces: Vec<MethodTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbBenchReport {
    pub pairs: Vec<PairOutcome>,
    pub loss_decreased: f64,
    pub distance_improved: f64,
    /// Per method, share of frames that decoded validly.
    pub validity: Vec<(Method, f64)>,
    pub config: PerturbBenchConfig,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn trace(models: &Models, request: &PerturbationRequest, target_s: &[f64], steps: usize) -> Result<(MethodTrace, Option<crate::perturb::PerturbationResult>)> {
    let mut t = MethodTrace {
        method: request.method,
        latent_distance: Vec::with_capacity(steps),
        decoded_distance: Vec::with_capacity(steps),
        valid: Vec::with_capacity(steps),
        frames: Vec::with_capacity(steps),
    };
    let mut last = None;
    for i in 0..steps {
        let fraction = i as f64 / (steps - 1) as f64;
        let r = perturb(&models.fc, &request.scaled(fraction))?;
        t.latent_distance.push(sq(&models.fc.f_v(&r.new_v)?, target_s).sqrt());
        let decoded = models.vae.decode(&r.new_v, models.vae.dims().max_points)?;
        let ok = !decoded.hit_max_steps && decoded.sketch.len() >= 2;
        t.valid.push(ok);
        t.decoded_distance.push(if ok {
            Some(sq(&models.s_q(&decoded.sketch)?, target_s).sqrt())
        } else {
            None
        });
        t.frames.push(decoded.sketch);
        last = Some(r);
    }
    Ok((t, last))
}

/// Morph sequences for sampled (query, target) pairs of different classes,
/// one target at full weight, with machine metrics only.
pub fn run_perturbation_bench(sketches: &[Sketch], models: &Models, config: &PerturbBenchConfig) -> Result<PerturbBenchReport> {
    if config.steps < 2 {
        return Err(Error::invalid("a sequence needs at least two steps"));
    }
    let classes: Vec<String> = sketches.iter().map(class_of).collect::<Result<_>>()?;
    if classes.iter().all(|c| *c == classes[0]) {
        return Err(Error::invalid("the bench needs sketches of at least two classes"));
    }
    let mut rng = substream(config.seed, "perturb-bench");
    let mut pairs = Vec::with_capacity(config.pairs);
    while pairs.len() < config.pairs {
        let q = rng.random_range(0..sketches.len());
        let t = rng.random_range(0..sketches.len());
        if classes[q] != classes[t] {
            pairs.push((q, t));
        }
    }
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|&(q, t)| {
            let target = Target {
                v: models.v_e(&sketches[t])?,
                s: models.s_q(&sketches[t])?,
            };
            let query_v = models.v_e(&sketches[q])?;
            let query_s = models.fc.f_v(&query_v)?;
            let mut traces = Vec::new();
            let mut backprop = None;
            for method in [Method::Linear, Method::Slerp, Method::Backprop] {
                let request = PerturbationRequest {
                    query_v: query_v.clone(),
                    targets: vec![target.clone()],
                    weights: vec![1.0],
                    method,
                    config: config.backprop.clone(),
                };
                let (tr, last) = trace(models, &request, &target.s, config.steps)?;
                if method == Method::Backprop {
                    backprop = last;
                }
                traces.push(tr);
            }
            let bp = backprop.expect("backprop trace ran");
            Ok(PairOutcome {
                query: q,
                target: t,
                initial_loss: bp.loss_trace[0],
                final_loss: crate::perturb::objective(
                    &models.fc,
                    &PerturbationRequest {
                        query_v: query_v.clone(),
                        targets: vec![target.clone()],
                        weights: vec![1.0],
                        method: Method::Backprop,
                        config: config.backprop.clone(),
                    },
                    &bp.new_v,
                )?,
                weighted_before: sq(&query_s, &target.s),
                weighted_after: sq(&models.fc.f_v(&bp.new_v)?, &target.s),
                traces,
            })
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len().max(1) as f64;
    let validity = [Method::Linear, Method::Slerp, Method::Backprop]
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let frames: Vec<bool> = outcomes.iter().flat_map(|o| o.traces[m].valid.iter().copied()).collect();
            (method, frames.iter().filter(|&&v| v).count() as f64 / frames.len().max(1) as f64)
        })
        .collect();
    Ok(PerturbBenchReport {
        loss_decreased: outcomes.iter().filter(|o| o.final_loss < o.initial_loss).count() as f64 / n,
        distance_improved: outcomes.iter().filter(|o| o.weighted_after < o.weighted_before).count() as f64 / n,
        validity,
        pairs: outcomes,
        config: config.clone(),
    })
}

/// A grid of sketches, one labelled row per sequence.
pub fn contact_sheet_svg(rows: &[(String, Vec<Sketch>)], cell: f64) -> String {
    let label_w = 120.0;
    let cols = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let (w, h) = (label_w + cols as f64 * cell, rows.len() as f64 * cell);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (r, (label, sketches)) in rows.iter().enumerate() {
        let y0 = r as f64 * cell;
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
            y0 + cell / 2.0,
            label.replace('&', "&amp;").replace('<', "&lt;")
        ));
        for (c, sketch) in sketches.iter().enumerate() {
            let x0 = label_w + c as f64 * cell;
            svg.push_str(&format!(
                "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"none\" stroke=\"#ddd\"/>\n"
            ));
            if sketch.is_empty() {
                continue;
            }
            let (min_x, min_y, max_x, max_y) = sketch.bounds();
            let extent = (max_x - min_x).max(max_y - min_y).max(1e-9);
            let scale = 0.8 * cell / extent;
            let (ox, oy) = (
                x0 + 0.5 * cell - 0.5 * (max_x - min_x) * scale,
                y0 + 0.5 * cell - 0.5 * (max_y - min_y) * scale,
            );
            for stroke in sketch.strokes() {
                let pts: Vec<String> = stroke
                    .iter()
                    .map(|&(x, y)| format!("{:.1},{:.1}", ox + (x - min_x) * scale, oy + (y - min_y) * scale))
                    .collect();
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.2\"/>\n",
                    pts.join(" ")
                ));
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Contact sheet of the first `pairs` outcomes, one row per method.
pub fn bench_contact_sheet(report: &PerturbBenchReport, pairs: usize) -> String {
    let rows: Vec<(String, Vec<Sketch>)> = report
        .pairs
        .iter()
        .take(pairs)
        .flat_map(|p| {
            p.traces.iter().map(move |t| {
                let name = serde_json::to_value(t.method).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                (format!("{}→{} {}", p.query, p.target, name), t.frames.clone())
            })
        })
        .collect();
    contact_sheet_svg(&rows, 64.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::StrokePoint;

    #[test]
    fn contact_sheet_has_one_polyline_per_stroke() {
        let s = Sketch::new(
            vec![
                StrokePoint::new(0.0, 0.0, false),
                StrokePoint::new(5.0, 0.0, true),
                StrokePoint::new(0.0, 5.0, false),
                StrokePoint::new(5.0, 0.0, true),
            ],
            None,
        )
        .unwrap();
        let svg = contact_sheet_svg(&[("a<b".into(), vec![s.clone(), s])], 50.0);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("a&lt;b"));
    }
}
