use serde::{Deserialize, Serialize};

use super::Sketch;
use crate::error::{Error, Result};

/// Fraction of the canvas left blank on each side.
pub const RASTER_MARGIN: f64 = 0.04;

/// Grayscale canvas with ink intensity in `[0, 1]` (1 = ink), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterCanvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl RasterCanvas {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim("canvas", &[width, height], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("canvas intensities must lie in [0, 1]"));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn splat(&mut self, x: usize, y: usize, v: f64) {
        let p = &mut self.pixels[y * self.width + x];
        *p = p.max(v.clamp(0.0, 1.0));
    }

    pub fn ink(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// 8-bit grayscale PNG, ink drawn dark on white.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Format(format!("png header: {e}")))?;
            let bytes: Vec<u8> = self
                .pixels
                .iter()
                .map(|&v| (255.0 * (1.0 - v)).round() as u8)
                .collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::Format(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    /// Pixels rounded to the 8-bit levels a PNG stores, so that saving and
    /// reloading is lossless.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| 1.0 - (255.0 * (1.0 - v)).round() / 255.0).collect(),
        }
    }

    /// Reads an 8-bit grayscale PNG written by [`RasterCanvas::to_png`].
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(fmt)?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("expected an 8-bit grayscale png".into()));
        }
        let (width, height) = (info.width as usize, info.height as usize);
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(width * height)];
        let frame = reader.next_frame(&mut buf).map_err(fmt)?;
        let pixels = buf[..frame.buffer_size()].iter().map(|&b| 1.0 - b as f64 / 255.0).collect();
        Self::new(width, height, pixels)
    }
}

/// Rendering parameters; the default is the plain sketch rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterStyle {
    /// Rotation about the drawing centre, radians.
    pub rotation: f64,
    /// Multiplier on the fitted scale.
    pub scale: f64,
    /// Line width in pixels.
    pub thickness: f64,
}

impl Default for RasterStyle {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            thickness: 1.0,
        }
    }
}

/// Renders 1-pixel anti-aliased polylines on a `size × size` canvas, with
/// the drawing centred and uniformly scaled to fit inside the margin.
pub fn rasterize(sketch: &Sketch, size: usize) -> Result<RasterCanvas> {
    rasterize_styled(sketch, size, RasterStyle::default())
}

pub fn rasterize_styled(sketch: &Sketch, size: usize, style: RasterStyle) -> Result<RasterCanvas> {
    if size < 16 {
        return Err(Error::invalid(format!("raster size must be at least 16, got {size}")));
    }
    let strokes = sketch.strokes();
    let (x0, y0, x1, y1) = sketch.bounds();
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (sin, cos) = style.rotation.sin_cos();
    let rotated: Vec<Vec<(f64, f64)>> = strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|&(x, y)| {
                    let (u, v) = (x - cx, y - cy);
                    (u * cos - v * sin, u * sin + v * cos)
                })
                .collect()
        })
        .collect();
    let extent = rotated
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, &(x, y)| {
            (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y))
        });
    let span = (extent.2 - extent.0).max(extent.3 - extent.1);
    let mid = ((extent.0 + extent.2) / 2.0, (extent.1 + extent.3) / 2.0);
    let usable = size as f64 * (1.0 - 2.0 * RASTER_MARGIN);
    let half = size as f64 / 2.0;

    let mut canvas = RasterCanvas::blank(size, size);
    if !(span > 1e-9) {
        let c = size / 2;
        canvas.splat(c, c, 1.0);
        return Ok(canvas);
    }
    let scale = usable / span * style.scale;
    let to_px = |(x, y): (f64, f64)| ((x - mid.0) * scale + half, (y - mid.1) * scale + half);
    for stroke in &rotated {
        let px: Vec<(f64, f64)> = stroke.iter().map(|&p| to_px(p)).collect();
        if px.len() == 1 {
            draw_segment(&mut canvas, px[0], px[0], style.thickness);
        }
        for w in px.windows(2) {
            draw_segment(&mut canvas, w[0], w[1], style.thickness);
        }
    }
    Ok(canvas)
}

/// Coverage falls off linearly with distance from the segment, giving a
/// band `thickness` wide with a one-pixel anti-aliased edge.
fn draw_segment(canvas: &mut RasterCanvas, a: (f64, f64), b: (f64, f64), thickness: f64) {
    let reach = thickness / 2.0 + 0.5;
    let lo_x = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let lo_y = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let hi_x = ((a.0.max(b.0) + reach).ceil() as isize).clamp(0, canvas.width as isize - 1) as usize;
    let hi_y = ((a.1.max(b.1) + reach).ceil() as isize).clamp(0, canvas.height as isize - 1) as usize;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d = super::point_segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
            let v = reach - d;
            if v > 0.0 {
                canvas.splat(x, y, v);
            }
        }
    }
}

/// Binary dilation with a 3×3 structuring element after thresholding at 0.5.
pub fn dilate(canvas: &RasterCanvas) -> Vec<bool> {
    let (w, h) = (canvas.width, canvas.height);
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if canvas.get(x, y) < 0.5 {
                continue;
            }
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    out[ny * w + nx] = true;
                }
            }
        }
    }
    out
}

/// Intersection-over-union of two dilated rasters of equal size.
pub fn raster_iou(a: &RasterCanvas, b: &RasterCanvas) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim("raster_iou", &[a.width, a.height], &[b.width, b.height]));
    }
    let (da, db) = (dilate(a), dilate(b));
    let inter = da.iter().zip(&db).filter(|(x, y)| **x && **y).count();
    let union = da.iter().zip(&db).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
