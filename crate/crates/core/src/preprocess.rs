//! Document-image preprocessing: Otsu binarization, 2x2 dilation and the
//! distance-transform smudge.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

/// `true` marks ink.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Image(format!(
                "{} bits for a {width}x{height} image",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, ink: bool) {
        self.bits[y * self.width + x] = ink;
    }

    pub fn ink_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Ink as 0, background as 255.
    pub fn render(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 0 } else { 255 }).collect(),
        }
    }
}

/// Largest gray level `t` of the dark class under Otsu's criterion, or
/// `None` when the image has a single gray level.
pub fn otsu_level(img: &GrayImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let total = img.pixels.len() as f64;
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

/// Global Otsu binarization: pixels at or below the dark-class level are ink.
pub fn binarize(img: &GrayImage) -> BinaryImage {
    match otsu_level(img) {
        Some(t) => BinaryImage {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| p <= t).collect(),
        },
        None => BinaryImage::blank(img.width, img.height),
    }
}

/// One iteration with a 2x2 structuring element anchored at the top-left.
pub fn dilate(img: &BinaryImage) -> BinaryImage {
    let (w, h) = (img.width, img.height);
    let mut out = BinaryImage::blank(w, h);
    for y in 0..h {
        for x in 0..w {
            let ink = img.get(x, y)
                || (x + 1 < w && img.get(x + 1, y))
                || (y + 1 < h && img.get(x, y + 1))
                || (x + 1 < w && y + 1 < h && img.get(x + 1, y + 1));
            out.set(x, y, ink);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistanceMetric {
    Cityblock,
    Chebyshev,
    Euclidean,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Cityblock => "l1",
            DistanceMetric::Chebyshev => "linf",
            DistanceMetric::Euclidean => "l2",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "cityblock" | "linear" => Ok(DistanceMetric::Cityblock),
            "linf" | "chebyshev" | "max" => Ok(DistanceMetric::Chebyshev),
            "l2" | "euclidean" => Ok(DistanceMetric::Euclidean),
            _ => Err(Error::InvalidArgument(format!(
                "unknown metric {s:?} (expected l1, linf or l2)"
            ))),
        }
    }
}

/// Two-pass chamfer transform; exact for the 4- and 8-neighbour metrics.
fn chamfer(img: &BinaryImage, diagonal: bool) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut d: Vec<f64> = img
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut v = d[y * w + x];
            if x > 0 {
                v = v.min(d[y * w + x - 1] + 1.0);
            }
            if y > 0 {
                v = v.min(d[(y - 1) * w + x] + 1.0);
                if diagonal {
                    if x > 0 {
                        v = v.min(d[(y - 1) * w + x - 1] + 1.0);
                    }
                    if x + 1 < w {
                        v = v.min(d[(y - 1) * w + x + 1] + 1.0);
                    }
                }
            }
            d[y * w + x] = v;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut v = d[y * w + x];
            if x + 1 < w {
                v = v.min(d[y * w + x + 1] + 1.0);
            }
            if y + 1 < h {
                v = v.min(d[(y + 1) * w + x] + 1.0);
                if diagonal {
                    if x + 1 < w {
                        v = v.min(d[(y + 1) * w + x + 1] + 1.0);
                    }
                    if x > 0 {
                        v = v.min(d[(y + 1) * w + x - 1] + 1.0);
                    }
                }
            }
            d[y * w + x] = v;
        }
    }
    d
}

/// Squared distance transform of a sampled 1D function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in (start + 1)..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        out[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest ink pixel.
pub fn squared_euclidean_transform(img: &BinaryImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut d: Vec<f64> = img
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        edt_1d(&col, &mut tmp[..h]);
        for y in 0..h {
            d[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&d[y * w..(y + 1) * w]);
        edt_1d(&row, &mut tmp[..w]);
        d[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    d
}

/// Distance to the nearest ink pixel; infinite everywhere on a blank image.
pub fn distance_transform(img: &BinaryImage, metric: DistanceMetric) -> Vec<f64> {
    match metric {
        DistanceMetric::Cityblock => chamfer(img, false),
        DistanceMetric::Chebyshev => chamfer(img, true),
        DistanceMetric::Euclidean => squared_euclidean_transform(img)
            .into_iter()
            .map(f64::sqrt)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmudgeConfig {
    /// Distance (px) at which the ramp reaches white.
    pub decay: f64,
    pub metric: DistanceMetric,
}

impl Default for SmudgeConfig {
    fn default() -> Self {
        Self {
            decay: 4.0,
            metric: DistanceMetric::Euclidean,
        }
    }
}

/// Darkness ramp around strokes: `255 * min(1, d / decay)`, rounded.
pub fn smudge(img: &BinaryImage, cfg: &SmudgeConfig) -> Result<GrayImage> {
    if !(cfg.decay > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smudge decay must be > 0, got {}",
            cfg.decay
        )));
    }
    let d = distance_transform(img, cfg.metric);
    let pixels = d
        .iter()
        .map(|&v| (255.0 * (v / cfg.decay).min(1.0)).round() as u8)
        .collect();
    GrayImage::new(img.width, img.height, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreprocessMode {
    Raw,
    Dilate,
    Smudge,
    Both,
}

impl PreprocessMode {
    pub fn name(self) -> &'static str {
        match self {
            PreprocessMode::Raw => "raw",
            PreprocessMode::Dilate => "dilate",
            PreprocessMode::Smudge => "smudge",
            PreprocessMode::Both => "both",
        }
    }
}

impl fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PreprocessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(PreprocessMode::Raw),
            "dilate" | "dilation" => Ok(PreprocessMode::Dilate),
            "smudge" => Ok(PreprocessMode::Smudge),
            "both" | "dilation+smudge" | "dilate+smudge" => Ok(PreprocessMode::Both),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preprocess mode {s:?} (expected raw, dilate, smudge or both)"
            ))),
        }
    }
}

pub fn preprocess_pipeline(
    img: &GrayImage,
    mode: PreprocessMode,
    cfg: &SmudgeConfig,
) -> Result<GrayImage> {
    match mode {
        PreprocessMode::Raw => Ok(img.clone()),
        PreprocessMode::Dilate => Ok(dilate(&binarize(img)).render()),
        PreprocessMode::Smudge => smudge(&binarize(img), cfg),
        PreprocessMode::Both => smudge(&dilate(&binarize(img)), cfg),
    }
}

// ----- file IO -------------------------------------------------------------

fn pgm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    while out.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(Error::Image("truncated or malformed PGM header".into()));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).expect("ascii digits");
        out.push(
            tok.parse()
                .map_err(|_| Error::Image(format!("bad PGM number {tok}")))?,
        );
    }
    Ok((out, i))
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::Image("not a PGM file".into())),
    };
    let (hdr, end) = pgm_tokens(&bytes[2..], 3)?;
    let (w, h, maxval) = (hdr[0], hdr[1], hdr[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported PGM maxval {maxval}")));
    }
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
    let body = &bytes[2 + end..];
    let pixels: Vec<u8> = if binary {
        let data = body
            .get(1..1 + w * h)
            .ok_or_else(|| Error::Image("truncated PGM raster".into()))?;
        data.iter().map(|&v| scale(v as usize)).collect()
    } else {
        pgm_tokens(body, w * h)?
            .0
            .into_iter()
            .map(|v| scale(v.min(maxval)))
            .collect()
    };
    GrayImage::new(w, h, pixels)
}

fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Reads PNG (gray or color, converted by luminance) or PGM (P2/P5).
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        return decode_pgm(&bytes);
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::new(w as usize, h as usize, luma.into_raw())
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes PGM when the extension says so, PNG otherwise.
pub fn write_image(img: &GrayImage, path: &Path) -> Result<()> {
    let bytes = if is_pgm(path) {
        encode_pgm(img)
    } else {
        encode_png(img)?
    };
    let mut f =
        fs::File::create(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes)?;
    Ok(())
}
