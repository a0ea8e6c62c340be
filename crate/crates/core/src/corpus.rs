//! Labelled sketch and image corpora.
//!
//! The toy generators draw jittered parametric shapes on a 256-pixel
//! canvas, the same coordinate range as QuickDraw. "Images" are augmented
//! renderings of sketches that appear in neither the train nor the test
//! split.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{substream, SeededRng};
use crate::sketch::{fit_length, rasterize_styled, rdp_simplify, RasterCanvas, RasterStyle, Sketch, Stroke};
use crate::sketch::{DEFAULT_MAX_POINTS, DEFAULT_RDP_EPSILON};

pub const TOY_CLASSES: [&str; 10] = [
    "circle",
    "box",
    "star",
    "zigzag",
    "cross_on_box",
    "triangle",
    "spiral",
    "arrow",
    "house",
    "wave",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Per-point positional noise of the toy generators, in pixels.
    pub jitter: f64,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
            train_per_class: 500,
            test_per_class: 100,
            images_per_class: 200,
            image_size: 64,
            jitter: 2.0,
            max_points: DEFAULT_MAX_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageItem {
    pub id: u64,
    pub class: String,
    pub canvas: RasterCanvas,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Sketch>,
    pub test: Vec<Sketch>,
    pub images: Vec<ImageItem>,
}

impl Corpus {
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.train.iter().filter_map(|s| s.class().map(str::to_string)).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Synthesises one jittered sketch of a toy class.
pub fn toy_sketch(class: &str, jitter: f64, rng: &mut SeededRng) -> Result<Sketch> {
    let shape = toy_shape(class, rng)?;
    let half = rng.random_range(60.0..110.0);
    let aspect = rng.random_range(0.75..1.3);
    let (sin, cos) = rng.random_range(-0.3f64..0.3).sin_cos();
    let centre = (rng.random_range(108.0..148.0), rng.random_range(108.0..148.0));
    let noise = Normal::new(0.0, jitter.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?;
    let strokes: Vec<Stroke> = shape
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x * half * aspect, y * half / aspect);
                    let (x, y) = (x * cos - y * sin, x * sin + y * cos);
                    let x = (centre.0 + x + noise.sample(rng)).round().clamp(0.0, 255.0);
                    let y = (centre.1 + y + noise.sample(rng)).round().clamp(0.0, 255.0);
                    (x, y)
                })
                .collect()
        })
        .collect();
    let first = strokes[0][0];
    let strokes: Vec<Stroke> = strokes
        .into_iter()
        .map(|s| s.into_iter().map(|(x, y)| (x - first.0, y - first.1)).collect())
        .collect();
    let sketch = Sketch::from_strokes(&strokes, Some(class.to_string()))?;
    Ok(rdp_simplify(&sketch, DEFAULT_RDP_EPSILON))
}

fn arc(n: usize, start: f64, sweep: f64, rx: f64, ry: f64) -> Stroke {
    (0..=n)
        .map(|i| {
            let t = start + sweep * i as f64 / n as f64;
            (rx * t.cos(), ry * t.sin())
        })
        .collect()
}

fn closed(points: &[(f64, f64)]) -> Stroke {
    let mut s = points.to_vec();
    s.push(points[0]);
    s
}

/// Unit-scale strokes in roughly `[-1, 1]²`, y pointing down.
fn toy_shape(class: &str, rng: &mut SeededRng) -> Result<Vec<Stroke>> {
    let shape = match class {
        "circle" => {
            let overshoot = rng.random_range(0.0..0.4);
            vec![arc(24, rng.random_range(0.0..TAU), TAU + overshoot, 1.0, 1.0)]
        }
        "box" => {
            let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
            if rng.random_bool(0.5) {
                vec![closed(&corners)]
            } else {
                (0..4).map(|i| vec![corners[i], corners[(i + 1) % 4]]).collect()
            }
        }
        "star" => {
            let inner = rng.random_range(0.35..0.5);
            let rot = rng.random_range(-0.2..0.2);
            let pts: Vec<(f64, f64)> = (0..10)
                .map(|i| {
                    let r = if i % 2 == 0 { 1.0 } else { inner };
                    let t = rot - PI / 2.0 + PI * i as f64 / 5.0;
                    (r * t.cos(), r * t.sin())
                })
                .collect();
            vec![closed(&pts)]
        }
        "zigzag" => {
            let teeth = rng.random_range(4..=7);
            let amp = rng.random_range(0.3..0.6);
            vec![(0..=teeth)
                .map(|i| (-1.0 + 2.0 * i as f64 / teeth as f64, if i % 2 == 0 { amp } else { -amp }))
                .collect()]
        }
        "cross_on_box" => {
            let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
            vec![
                closed(&corners),
                vec![(-1.0, -1.0), (1.0, 1.0)],
                vec![(1.0, -1.0), (-1.0, 1.0)],
            ]
        }
        "triangle" => {
            let apex = rng.random_range(-0.4..0.4);
            vec![closed(&[(apex, -1.0), (1.0, 0.9), (-1.0, 0.9)])]
        }
        "spiral" => {
            let turns = rng.random_range(1.6..2.6);
            let n = 40;
            vec![(0..=n)
                .map(|i| {
                    let f = i as f64 / n as f64;
                    let t = f * turns * TAU;
                    (f * t.cos(), f * t.sin())
                })
                .collect()]
        }
        "arrow" => {
            let head = rng.random_range(0.3..0.5);
            vec![
                vec![(-1.0, 0.0), (1.0, 0.0)],
                vec![(1.0 - head, -head), (1.0, 0.0), (1.0 - head, head)],
            ]
        }
        "house" => {
            let roof = rng.random_range(0.5..0.9);
            vec![
                closed(&[(-0.8, -0.1), (0.8, -0.1), (0.8, 1.0), (-0.8, 1.0)]),
                vec![(-0.9, -0.1), (0.0, -0.1 - roof), (0.9, -0.1)],
            ]
        }
        "wave" => {
            let periods = rng.random_range(1.5..3.0);
            let amp = rng.random_range(0.25..0.5);
            let n = 30;
            vec![(0..=n)
                .map(|i| {
                    let f = i as f64 / n as f64;
                    (-1.0 + 2.0 * f, amp * (f * periods * TAU).sin())
                })
                .collect()]
        }
        other => return Err(Error::invalid(format!("no toy generator for class {other:?}"))),
    };
    Ok(shape)
}

/// Random rendering style for the image modality.
pub fn image_style(rng: &mut SeededRng) -> RasterStyle {
    RasterStyle {
        rotation: rng.random_range(-10f64..=10.0).to_radians(),
        scale: rng.random_range(0.8..=1.2),
        thickness: rng.random_range(1.0..=2.0),
    }
}

/// Synthesises a toy corpus and splits it.
pub fn build_toy_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.classes.len() < 2 {
        return Err(Error::invalid("a corpus needs at least two classes"));
    }
    let per_class = config.train_per_class + config.test_per_class + config.images_per_class;
    let mut pool = Vec::with_capacity(per_class * config.classes.len());
    for class in &config.classes {
        let mut rng = substream(config.seed, &format!("toy/{class}"));
        for _ in 0..per_class {
            pool.push(toy_sketch(class, config.jitter, &mut rng)?);
        }
    }
    split_corpus(pool, config)
}

/// Splits labelled sketches per class, in input order, into train, test
/// and image-source sketches; image sources are rendered with a random
/// augmentation. Fails if any configured class has too few sketches.
pub fn split_corpus(sketches: Vec<Sketch>, config: &CorpusConfig) -> Result<Corpus> {
    if config.classes.len() < 2 {
        return Err(Error::invalid("a corpus needs at least two classes"));
    }
    let mut by_class: BTreeMap<&str, Vec<Sketch>> = config.classes.iter().map(|c| (c.as_str(), Vec::new())).collect();
    for s in sketches {
        if let Some(bucket) = s.class().and_then(|c| by_class.get_mut(c)) {
            bucket.push(s);
        }
    }
    let per_class = config.train_per_class + config.test_per_class + config.images_per_class;
    let mut corpus = Corpus {
        train: Vec::new(),
        test: Vec::new(),
        images: Vec::new(),
    };
    let mut next_id = 0u64;
    for class in &config.classes {
        let bucket = &by_class[class.as_str()];
        if bucket.len() < per_class {
            return Err(Error::invalid(format!(
                "class {class:?} has {} sketches, {per_class} needed",
                bucket.len()
            )));
        }
        let fit = |s: &Sketch| fit_length(s, config.max_points, DEFAULT_RDP_EPSILON);
        let (train, rest) = bucket[..per_class].split_at(config.train_per_class);
        let (test, sources) = rest.split_at(config.test_per_class);
        corpus.train.extend(train.iter().map(fit));
        corpus.test.extend(test.iter().map(fit));
        let mut rng = substream(config.seed, &format!("images/{class}"));
        for s in sources {
            let canvas = rasterize_styled(s, config.image_size, image_style(&mut rng))?.quantized();
            corpus.images.push(ImageItem {
                id: next_id,
                class: class.clone(),
                canvas,
            });
            next_id += 1;
        }
    }
    Ok(corpus)
}
