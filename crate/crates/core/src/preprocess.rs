//! Source scan to 28x28 grayscale digit: crop, resample into a 20x20 box,
//! quantize, then place by center of gravity.
//!
//! The chain is `place_28(quantize(fit_box20(crop_digit(src))))`. Every
//! stage is pure and deterministic, so callers may preprocess digits in
//! parallel with any partitioning.
//!
//! The resampler computes exact overlaps between input pixels and output
//! footprints. Footprints are scaled by a configurable fudge factor
//! (default 0.99), which makes the rightmost/bottom footprints end short
//! of the input edge. Two normalizations are provided: exact-area divides
//! by the area actually covered, nominal-area divides by the footprint
//! area `sx*sy*fudge^2` whether or not it was fully covered. A fixed-point
//! accumulation mode quantizes the normalized per-axis weights to 16.8
//! binary fixed point; combined with nominal-area normalization it turns
//! constant inputs into low-amplitude periodic patterns, mimicking the
//! artifact visible in the dark areas of legacy datasets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{SourceImage, SOURCE_SIDE};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("digit is empty after component filtering")]
    EmptyDigit,
    #[error("raster has zero total mass")]
    ZeroMass,
    #[error("expected a {expected} raster, found {found_w}x{found_h}")]
    ShapeMismatch {
        expected: String,
        found_w: usize,
        found_h: usize,
    },
}

/// Rectangular intensity image. Values are ink-positive doubles
/// (0 = background), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::InvalidRaster(format!(
                "dimensions {width}x{height} must be positive"
            )));
        }
        if width * height != values.len() {
            return Err(PreprocessError::InvalidRaster(format!(
                "{width}x{height} does not match {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(PreprocessError::InvalidRaster(format!(
                "value {v} is not a finite non-negative intensity"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        debug_assert!(row < self.height && col < self.width);
        self.values[row * self.width + col] = v;
    }

    /// Mean intensity over all pixels.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// A 28x28 grayscale digit, ink = high values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digit28 {
    pixels: Box<[u8; 784]>,
}

impl Digit28 {
    pub const SIDE: usize = 28;

    /// Construct with the non-blank invariant enforced.
    pub fn new(pixels: [u8; 784]) -> Result<Self, PreprocessError> {
        if pixels.iter().all(|&p| p == 0) {
            return Err(PreprocessError::EmptyDigit);
        }
        Ok(Self {
            pixels: Box::new(pixels),
        })
    }

    /// Construct without the non-blank check. For deserialization paths
    /// that must tolerate whatever bytes a file holds.
    pub fn from_raw(pixels: [u8; 784]) -> Self {
        Self {
            pixels: Box::new(pixels),
        }
    }

    pub fn as_bytes(&self) -> &[u8; 784] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        debug_assert!(row < 28 && col < 28);
        self.pixels[row * 28 + col]
    }
}

/// How to split a tie exactly halfway between two integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    HalfAwayFromZero,
    HalfUp,
    HalfEven,
}

impl RoundingMode {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            RoundingMode::HalfAwayFromZero => x.round(),
            RoundingMode::HalfUp => (x + 0.5).floor(),
            RoundingMode::HalfEven => x.round_ties_even(),
        }
    }
}

/// Tie-rounding choices for the two stages where they matter. The original
/// conventions are undocumented, so both are explicit and overridable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingConfig {
    pub quantize: RoundingMode,
    pub placement: RoundingMode,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        Self {
            quantize: RoundingMode::HalfAwayFromZero,
            placement: RoundingMode::HalfUp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the source area actually covered by the footprint.
    ExactArea,
    /// Divide by the footprint area `sx*sy*fudge^2` regardless of coverage.
    NominalArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    Float64,
    /// Normalized per-axis weights quantized to multiples of 2^-8 before
    /// accumulation.
    FixedPoint16x8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub fudge: f64,
    pub normalization: Normalization,
    pub accumulation: Accumulation,
}

impl ResampleConfig {
    pub fn new(
        fudge: f64,
        normalization: Normalization,
        accumulation: Accumulation,
    ) -> Result<Self, PreprocessError> {
        if !(fudge > 0.0 && fudge <= 1.5) {
            return Err(PreprocessError::InvalidConfig(format!(
                "fudge {fudge} outside (0, 1.5]"
            )));
        }
        Ok(Self {
            fudge,
            normalization,
            accumulation,
        })
    }

    /// The legacy-flavored mode: nominal-area normalization with
    /// fixed-point weights. Produces the periodic dark-area pattern.
    pub fn legacy(fudge: f64) -> Result<Self, PreprocessError> {
        Self::new(fudge, Normalization::NominalArea, Accumulation::FixedPoint16x8)
    }
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            fudge: 0.99,
            normalization: Normalization::ExactArea,
            accumulation: Accumulation::Float64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Connected ink components smaller than this are treated as noise.
    pub min_component_size: usize,
    pub connectivity: Connectivity,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            min_component_size: 5,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Drop ink components below the configured size, then cut the tight
/// bounding box of what remains. Output values are 0.0/1.0.
pub fn crop_digit(src: &SourceImage, cfg: &CropConfig) -> Result<Raster, PreprocessError> {
    let side = SOURCE_SIDE;
    let diag: &[(isize, isize)] = match cfg.connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    let mut keep = vec![false; side * side];
    let mut visited = vec![false; side * side];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..side * side {
        if visited[start] || !src.ink_at(start / side, start % side) {
            continue;
        }
        component.clear();
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            component.push(p);
            let (r, c) = ((p / side) as isize, (p % side) as isize);
            for &(dr, dc) in diag {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= side as isize || nc >= side as isize {
                    continue;
                }
                let np = nr as usize * side + nc as usize;
                if !visited[np] && src.ink_at(nr as usize, nc as usize) {
                    visited[np] = true;
                    stack.push(np);
                }
            }
        }
        if component.len() >= cfg.min_component_size {
            for &p in &component {
                keep[p] = true;
            }
        }
    }
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for p in keep.iter().enumerate().filter(|(_, &k)| k).map(|(p, _)| p) {
        let (r, c) = (p / side, p % side);
        bounds = Some(match bounds {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    let (r0, r1, c0, c1) = bounds.ok_or(PreprocessError::EmptyDigit)?;
    let (w, h) = (c1 - c0 + 1, r1 - r0 + 1);
    let mut values = vec![0.0; w * h];
    for r in r0..=r1 {
        for c in c0..=c1 {
            if keep[r * side + c] {
                values[(r - r0) * w + (c - c0)] = 1.0;
            }
        }
    }
    Raster::new(w, h, values)
}

/// Per-output-pixel source weights along one axis: first covered source
/// index plus the normalized weight of each covered pixel.
fn axis_weights(src_len: usize, out_len: usize, cfg: &ResampleConfig) -> Vec<(usize, Vec<f64>)> {
    let scale = src_len as f64 * cfg.fudge / out_len as f64;
    (0..out_len)
        .map(|j| {
            let x0 = j as f64 * scale;
            let x1 = (j as f64 + 1.0) * scale;
            let k0 = (x0.floor().max(0.0) as usize).min(src_len);
            let k1 = (x1.ceil().max(0.0) as usize).min(src_len);
            let mut weights = Vec::with_capacity(k1.saturating_sub(k0));
            let mut covered = 0.0;
            for k in k0..k1 {
                let w = (x1.min(k as f64 + 1.0) - x0.max(k as f64)).max(0.0);
                covered += w;
                weights.push(w);
            }
            let norm = match cfg.normalization {
                Normalization::ExactArea => covered,
                Normalization::NominalArea => scale,
            };
            if norm > 0.0 {
                for w in &mut weights {
                    *w /= norm;
                }
            }
            if cfg.accumulation == Accumulation::FixedPoint16x8 {
                for w in &mut weights {
                    *w = (*w * 256.0).round() / 256.0;
                }
            }
            (k0, weights)
        })
        .collect()
}

/// Resample by exact pixel overlap. The source footprint of output pixel
/// (i, j) is `[j*sx*f, (j+1)*sx*f) x [i*sy*f, (i+1)*sy*f)` with
/// `sx = src.width/out_w`, `sy = src.height/out_h`, `f = cfg.fudge`.
/// Separable: weights are computed per axis and applied rows-then-columns.
pub fn overlap_resample(
    src: &Raster,
    out_w: usize,
    out_h: usize,
    cfg: &ResampleConfig,
) -> Result<Raster, PreprocessError> {
    if out_w == 0 || out_h == 0 {
        return Err(PreprocessError::InvalidConfig(format!(
            "output size {out_w}x{out_h} must be positive"
        )));
    }
    let wx = axis_weights(src.width(), out_w, cfg);
    let wy = axis_weights(src.height(), out_h, cfg);
    let mut rows = vec![0.0; src.height() * out_w];
    for l in 0..src.height() {
        for (j, (k0, ws)) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for (dk, w) in ws.iter().enumerate() {
                acc += w * src.get(l, k0 + dk);
            }
            rows[l * out_w + j] = acc;
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (i, (l0, ws)) in wy.iter().enumerate() {
        for j in 0..out_w {
            let mut acc = 0.0;
            for (dl, w) in ws.iter().enumerate() {
                acc += w * rows[(l0 + dl) * out_w + j];
            }
            out[i * out_w + j] = acc;
        }
    }
    Raster::new(out_w, out_h, out)
}

fn double_raster(r: &Raster) -> Raster {
    let (w, h) = (r.width() * 2, r.height() * 2);
    let mut out = Raster::zeros(w, h);
    for i in 0..h {
        for j in 0..w {
            out.set(i, j, r.get(i / 2, j / 2));
        }
    }
    out
}

/// Scale the longest side to 20 preserving aspect ratio and center the
/// result in a 20x20 zero raster (extra margin pixel goes right/bottom).
/// Inputs with longest side below 20 are pixel-doubled until both sides
/// reach 20, then downsampled; the overlap resampler therefore never
/// upsamples.
pub fn fit_box20(cropped: &Raster, cfg: &ResampleConfig) -> Result<Raster, PreprocessError> {
    let (w, h) = (cropped.width(), cropped.height());
    let (out_w, out_h) = if w >= h {
        let other = (20.0 * h as f64 / w as f64).round() as usize;
        (20, other.max(1))
    } else {
        let other = (20.0 * w as f64 / h as f64).round() as usize;
        (other.max(1), 20)
    };
    let mut work = cropped.clone();
    if w.max(h) < 20 {
        while work.width() < 20 || work.height() < 20 {
            work = double_raster(&work);
        }
    }
    let scaled = overlap_resample(&work, out_w, out_h, cfg)?;
    let mut out = Raster::zeros(20, 20);
    let left = (20 - out_w) / 2;
    let top = (20 - out_h) / 2;
    for i in 0..out_h {
        for j in 0..out_w {
            out.set(top + i, left + j, scaled.get(i, j));
        }
    }
    Ok(out)
}

/// Linearly map the observed value range onto [0, 255] and round. A
/// constant raster maps to all zeros (a blank-ish raster stays
/// background).
pub fn quantize(r: &Raster) -> Raster {
    quantize_with(r, RoundingConfig::default().quantize)
}

pub fn quantize_with(r: &Raster, rounding: RoundingMode) -> Raster {
    let min = r.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = r.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Raster::zeros(r.width(), r.height());
    }
    let values = r
        .values()
        .iter()
        .map(|&v| rounding.apply(255.0 * (v - min) / (max - min)))
        .collect();
    Raster::new(r.width(), r.height(), values).expect("quantized raster is valid")
}

/// Intensity-weighted mean of pixel-center coordinates; pixel (row i,
/// col j) has center (x=j, y=i).
pub fn center_of_mass(r: &Raster) -> Result<(f64, f64), PreprocessError> {
    let mut mass = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..r.height() {
        for j in 0..r.width() {
            let v = r.get(i, j);
            mass += v;
            sx += v * j as f64;
            sy += v * i as f64;
        }
    }
    if mass <= 0.0 {
        return Err(PreprocessError::ZeroMass);
    }
    Ok((sx / mass, sy / mass))
}

/// Translate a 20x20 box into a 28x28 frame so that the rounded center
/// of gravity lands on pixel (14, 14). Values convert to u8; pixels
/// shifted out of frame are dropped.
pub fn place_28(box20: &Raster) -> Result<Digit28, PreprocessError> {
    place_28_with(box20, RoundingConfig::default().placement)
}

pub fn place_28_with(box20: &Raster, placement: RoundingMode) -> Result<Digit28, PreprocessError> {
    if box20.width() != 20 || box20.height() != 20 {
        return Err(PreprocessError::ShapeMismatch {
            expected: "20x20".to_string(),
            found_w: box20.width(),
            found_h: box20.height(),
        });
    }
    let (cx, cy) = center_of_mass(box20)?;
    let dx = 14 - placement.apply(cx) as i64;
    let dy = 14 - placement.apply(cy) as i64;
    let mut pixels = [0u8; 784];
    let mut any_ink = false;
    for i in 0..20 {
        for j in 0..20 {
            let q = box20.get(i, j).round().clamp(0.0, 255.0) as u8;
            if q == 0 {
                continue;
            }
            let (r, c) = (i as i64 + dy, j as i64 + dx);
            if (0..28).contains(&r) && (0..28).contains(&c) {
                pixels[(r * 28 + c) as usize] = q;
                any_ink = true;
            }
        }
    }
    if !any_ink {
        return Err(PreprocessError::EmptyDigit);
    }
    Ok(Digit28::from_raw(pixels))
}

/// The full chain from a raw scan to a placed 28x28 digit.
pub fn preprocess_digit(
    src: &SourceImage,
    crop_cfg: &CropConfig,
    res_cfg: &ResampleConfig,
) -> Result<Digit28, PreprocessError> {
    let cropped = crop_digit(src, crop_cfg)?;
    let boxed = fit_box20(&cropped, res_cfg)?;
    place_28(&quantize(&boxed))
}
