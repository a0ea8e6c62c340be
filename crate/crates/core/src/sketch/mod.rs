//! Stroke-sequence sketches: the vector query modality.
//!
//! A [`Sketch`] is a list of relative pen movements. Each [`StrokePoint`]
//! moves the pen by `(dx, dy)` from the previous point (the first point is
//! relative to the origin) and `lift` marks the last point of a stroke.

mod ndjson;
mod raster;
mod rdp;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

pub use ndjson::{parse_ndjson, to_quickdraw_line, ParseOutcome, RecordError};
pub use raster::{dilate, raster_iou, rasterize, rasterize_styled, RasterCanvas, RasterStyle, RASTER_MARGIN};
pub use rdp::{point_segment_distance, rdp_polyline, rdp_simplify};

/// Default simplification tolerance, in source pixel units.
pub const DEFAULT_RDP_EPSILON: f64 = 2.0;
/// Longest sequence fed to the recurrent encoder.
pub const DEFAULT_MAX_POINTS: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokePoint {
    pub dx: f64,
    pub dy: f64,
    pub lift: bool,
}

impl StrokePoint {
    pub fn new(dx: f64, dy: f64, lift: bool) -> Self {
        Self { dx, dy, lift }
    }

    pub fn lift_value(&self) -> f64 {
        if self.lift {
            1.0
        } else {
            0.0
        }
    }
}

/// Absolute polyline of one stroke.
pub type Stroke = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    points: Vec<StrokePoint>,
    class: Option<String>,
}

impl Sketch {
    pub fn new(points: Vec<StrokePoint>, class: Option<String>) -> Result<Self> {
        let last = points
            .last()
            .ok_or_else(|| Error::invalid("sketch has no points"))?;
        if !last.lift {
            return Err(Error::invalid("final sketch point must lift the pen"));
        }
        if points.iter().any(|p| !p.dx.is_finite() || !p.dy.is_finite()) {
            return Err(Error::invalid("sketch offsets must be finite"));
        }
        Ok(Self { points, class })
    }

    /// Builds a sketch from absolute strokes; empty strokes are dropped.
    pub fn from_strokes(strokes: &[Stroke], class: Option<String>) -> Result<Self> {
        let mut points = Vec::new();
        let (mut px, mut py) = (0.0, 0.0);
        for stroke in strokes.iter().filter(|s| !s.is_empty()) {
            for (i, &(x, y)) in stroke.iter().enumerate() {
                points.push(StrokePoint::new(x - px, y - py, i + 1 == stroke.len()));
                px = x;
                py = y;
            }
        }
        Self::new(points, class)
    }

    pub fn points(&self) -> &[StrokePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class(&self) -> Option<&str> {
        self.class.as_deref()
    }

    pub fn with_class(mut self, class: Option<String>) -> Self {
        self.class = class;
        self
    }

    /// Absolute coordinates of every point.
    pub fn absolute(&self) -> Vec<(f64, f64)> {
        let (mut x, mut y) = (0.0, 0.0);
        self.points
            .iter()
            .map(|p| {
                x += p.dx;
                y += p.dy;
                (x, y)
            })
            .collect()
    }

    /// Absolute polylines, split at pen lifts.
    pub fn strokes(&self) -> Vec<Stroke> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        for (p, abs) in self.points.iter().zip(self.absolute()) {
            current.push(abs);
            if p.lift {
                out.push(std::mem::take(&mut current));
            }
        }
        out
    }

    pub fn stroke_count(&self) -> usize {
        self.points.iter().filter(|p| p.lift).count()
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.absolute().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        )
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| StrokePoint::new(p.dx * factor, p.dy * factor, p.lift))
                .collect(),
            class: self.class.clone(),
        }
    }

    /// Moves the starting point by `(tx, ty)`, translating the whole drawing.
    pub fn translated(&self, tx: f64, ty: f64) -> Self {
        let mut points = self.points.clone();
        points[0].dx += tx;
        points[0].dy += ty;
        Self {
            points,
            class: self.class.clone(),
        }
    }

    /// Flat `[dx, dy, lift]` rows.
    pub fn to_rows(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.dx, p.dy, p.lift_value()]).collect()
    }

    pub fn from_rows(rows: &[[f64; 3]], class: Option<String>) -> Result<Self> {
        let points = rows
            .iter()
            .map(|r| {
                if r[2] != 0.0 && r[2] != 1.0 {
                    return Err(Error::invalid(format!("pen-lift flag must be 0 or 1, got {}", r[2])));
                }
                Ok(StrokePoint::new(r[0], r[1], r[2] == 1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, class)
    }
}

#[derive(Serialize, Deserialize)]
struct SketchWire {
    class: Option<String>,
    points: Vec<[f64; 3]>,
}

impl Serialize for Sketch {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SketchWire {
            class: self.class.clone(),
            points: self.to_rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Sketch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = SketchWire::deserialize(d)?;
        Sketch::from_rows(&wire.points, wire.class).map_err(serde::de::Error::custom)
    }
}

/// Divides every offset by the pooled standard deviation of all `dx`, `dy`
/// values in the corpus. Returns the normalised corpus and that deviation.
pub fn normalize_offsets(corpus: &[Sketch]) -> Result<(Vec<Sketch>, f64)> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot normalise an empty corpus"));
    }
    let scale = offset_std(corpus);
    if !(scale > 1e-12) || !scale.is_finite() {
        return Err(Error::invalid("corpus offsets have zero variance"));
    }
    Ok((corpus.iter().map(|s| s.scaled(1.0 / scale)).collect(), scale))
}

pub(crate) fn offset_std(corpus: &[Sketch]) -> f64 {
    let values: Vec<f64> = corpus
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.dx, p.dy]))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Permutes whole strokes; points inside a stroke keep their order and
/// absolute position.
pub fn shuffle_strokes(sketch: &Sketch, seed: u64) -> Sketch {
    let mut strokes = sketch.strokes();
    if strokes.len() > 1 {
        strokes.shuffle(&mut seeded_rng(seed));
    }
    Sketch::from_strokes(&strokes, sketch.class.clone()).expect("strokes come from a valid sketch")
}

/// Simplifies until the sketch fits in `max_points`, growing the tolerance
/// geometrically; truncates as a last resort.
pub fn fit_length(sketch: &Sketch, max_points: usize, epsilon: f64) -> Sketch {
    let mut eps = epsilon.max(1e-3);
    let mut current = rdp_simplify(sketch, epsilon);
    let extent = {
        let (a, b, c, d) = sketch.bounds();
        (c - a).max(d - b).max(1.0)
    };
    while current.len() > max_points && eps < extent {
        eps *= 1.5;
        current = rdp_simplify(sketch, eps);
    }
    if current.len() > max_points {
        let mut points = current.points[..max_points].to_vec();
        points[max_points - 1].lift = true;
        current = Sketch::new(points, current.class.clone()).expect("truncated sketch ends with a lift");
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_strokes() -> Sketch {
        Sketch::from_strokes(
            &[vec![(0.0, 0.0), (10.0, 0.0), (10.0, 5.0)], vec![(3.0, 3.0), (4.0, 8.0)]],
            Some("thing".into()),
        )
        .unwrap()
    }

    #[test]
    fn construction_enforces_final_lift() {
        assert!(Sketch::new(vec![StrokePoint::new(1.0, 1.0, false)], None).is_err());
        assert!(Sketch::new(vec![], None).is_err());
        assert!(Sketch::new(vec![StrokePoint::new(f64::NAN, 0.0, true)], None).is_err());
    }

    #[test]
    fn strokes_roundtrip_through_relative_form() {
        let s = two_strokes();
        assert_eq!(s.stroke_count(), 2);
        assert_eq!(s.strokes()[1], vec![(3.0, 3.0), (4.0, 8.0)]);
        assert_eq!(s.points()[3].dx, -7.0);
    }

    #[test]
    fn internal_json_format() {
        let s = two_strokes();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.starts_with(r#"{"class":"thing","points":[[0.0,0.0,0.0]"#), "{text}");
        let back: Sketch = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<Sketch>(r#"{"class":null,"points":[[1,2,0.5]]}"#).is_err());
    }

    #[test]
    fn unit_std_corpus_is_unchanged() {
        // offsets ±1 with zero mean have unit standard deviation
        let s = Sketch::new(
            vec![
                StrokePoint::new(1.0, -1.0, false),
                StrokePoint::new(-1.0, 1.0, true),
            ],
            None,
        )
        .unwrap();
        let (out, scale) = normalize_offsets(std::slice::from_ref(&s)).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(out[0], s);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let corpus = vec![two_strokes()];
        let scaled: Vec<Sketch> = corpus.iter().map(|s| s.scaled(10.0)).collect();
        let (a, sa) = normalize_offsets(&corpus).unwrap();
        let (b, sb) = normalize_offsets(&scaled).unwrap();
        assert!((sb / sa - 10.0).abs() < 1e-12);
        for (p, q) in a[0].points().iter().zip(b[0].points()) {
            assert!((p.dx - q.dx).abs() < 1e-12 && (p.dy - q.dy).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_corpus_is_an_error() {
        let s = Sketch::new(vec![StrokePoint::new(0.0, 0.0, true)], None).unwrap();
        assert!(normalize_offsets(&[s]).is_err());
        assert!(normalize_offsets(&[]).is_err());
    }

    #[test]
    fn single_stroke_shuffle_is_identity() {
        let s = Sketch::from_strokes(&[vec![(0.0, 0.0), (1.0, 2.0), (3.0, 1.0)]], None).unwrap();
        assert_eq!(shuffle_strokes(&s, 7), s);
    }

    #[test]
    fn two_stroke_swap_keeps_raster() {
        let s = two_strokes();
        let swapped = (0..64)
            .map(|seed| shuffle_strokes(&s, seed))
            .find(|t| t.strokes()[0] != s.strokes()[0])
            .expect("some seed swaps two strokes");
        let (a, b) = (s.strokes(), swapped.strokes());
        assert_eq!(b, vec![a[1].clone(), a[0].clone()]);
        assert_eq!(rasterize(&s, 32).unwrap(), rasterize(&swapped, 32).unwrap());
    }

    #[test]
    fn fit_length_bounds_sequence() {
        let stroke: Stroke = (0..400)
            .map(|i| {
                let t = i as f64 * 0.05;
                (t.cos() * 100.0 + t * 3.0, t.sin() * 100.0)
            })
            .collect();
        let s = Sketch::from_strokes(&[stroke], None).unwrap();
        let fitted = fit_length(&s, 96, 0.01);
        assert!(fitted.len() <= 96);
        assert!(fitted.points().last().unwrap().lift);
    }

    proptest! {
        #[test]
        fn normalized_offsets_have_unit_std(
            rows in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..60)
        ) {
            let mut points: Vec<StrokePoint> = rows.iter().map(|&(x, y)| StrokePoint::new(x, y, false)).collect();
            points.last_mut().unwrap().lift = true;
            let s = Sketch::new(points, None).unwrap();
            prop_assume!(offset_std(std::slice::from_ref(&s)) > 1e-6);
            let (out, _) = normalize_offsets(&[s]).unwrap();
            prop_assert!((offset_std(&out) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn shuffle_preserves_stroke_multiset(
            lens in proptest::collection::vec(1usize..5, 1..7),
            seed in 0u64..1000
        ) {
            let mut k = 0.0;
            let strokes: Vec<Stroke> = lens.iter().map(|&n| {
                (0..n).map(|_| { k += 1.0; (k, k * 0.5 - 3.0) }).collect()
            }).collect();
            let s = Sketch::from_strokes(&strokes, None).unwrap();
            let t = shuffle_strokes(&s, seed);
            let key = |v: &Vec<Stroke>| {
                let mut v: Vec<String> = v.iter().map(|s| format!("{s:?}")).collect();
                v.sort();
                v
            };
            prop_assert_eq!(key(&s.strokes()), key(&t.strokes()));
            prop_assert_eq!(t, shuffle_strokes(&s, seed));
        }
    }
}
