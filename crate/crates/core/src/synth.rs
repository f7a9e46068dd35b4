//! Deterministic toy images, edited copies, and directed hard negatives.
//!
//! A scene is a striped background plus 4-12 rectangles and ellipses, each
//! with a base intensity and its own stripe texture. Scenes live in normalized
//! `[0, 1]²` coordinates and are rasterized at pixel centers, so a scene and
//! its variants line up pixel for pixel.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::descriptor::{csv_err, ImageId, RelationKind, RelationLabel};
use crate::error::{Error, Result};
use crate::rng::{self, domain, Rng};

pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Crop scales for self-supervised ladders: `0.8^k`, k = 0..4.
pub const CROP_SCHEDULE: [f64; 5] = [1.0, 0.8, 0.64, 0.512, 0.4096];

pub const MIN_CROP_SCALE: f64 = 0.2;
pub const MAX_CROP_JITTER: f64 = 0.05;

pub const TEXTURE_PROBABILITY: f64 = 1.0;
/// Share of shapes that get a fresh texture in a similar scene.
pub const RETEXTURE_PROBABILITY: f64 = 0.5;
pub const SHAPE_INTENSITY: std::ops::Range<f64> = 0.4..0.6;
/// Stripe frequency in cycles per image width.
pub const TEXTURE_FREQUENCY: std::ops::Range<f64> = 10.0..22.0;
pub const TEXTURE_AMPLITUDE: std::ops::Range<f64> = 0.2..0.3;

/// Id blocks. Test and train images never share a block.
pub const REFERENCE_ID_BASE: u64 = 0;
pub const QUERY_ID_BASE: u64 = 1 << 32;
pub const TRAIN_ID_BASE: u64 = 2 << 32;
pub const TRAIN_PAIR_ID_BASE: u64 = 3 << 32;
pub const HELDOUT_ID_BASE: u64 = 4 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub id: ImageId,
    pub height: usize,
    pub width: usize,
    /// Row-major, every value in `[0, 1]`.
    pub pixels: Vec<f64>,
}

impl ToyImage {
    pub fn filled(id: ImageId, height: usize, width: usize, value: f64) -> Self {
        Self {
            id,
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        Self {
            id: self.id,
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Snaps every pixel to the 8-bit grid used on disk.
    pub fn quantized(mut self) -> Self {
        for p in &mut self.pixels {
            *p = (*p * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
        self
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integers), clamped at the border.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

pub fn mean_abs_diff(a: &ToyImage, b: &ToyImage) -> f64 {
    assert_eq!(a.pixels.len(), b.pixels.len());
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.pixels.len() as f64
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stripes {
    /// Cycles per unit length.
    pub frequency: f64,
    pub angle: f64,
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    pub intensity: f64,
    pub texture: Option<Stripes>,
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        let dx = (u - self.center.0) / self.half_extent.0;
        let dy = (v - self.center.1) / self.half_extent.1;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    fn value(&self, u: f64, v: f64) -> f64 {
        stripes_at(self.intensity, self.texture, u, v)
    }
}

fn stripes_at(base: f64, texture: Option<Stripes>, u: f64, v: f64) -> f64 {
    match texture {
        None => base,
        Some(t) => {
            let proj = u * t.angle.cos() + v * t.angle.sin();
            base + t.amplitude * (std::f64::consts::TAU * t.frequency * proj + t.phase).sin()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: f64,
    pub background_texture: Option<Stripes>,
    pub shapes: Vec<Shape>,
}

fn random_texture(rng: &mut Rng) -> Option<Stripes> {
    rng.gen_bool(TEXTURE_PROBABILITY).then(|| Stripes {
        frequency: rng.gen_range(TEXTURE_FREQUENCY),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        amplitude: rng.gen_range(TEXTURE_AMPLITUDE),
    })
}

fn random_shape(rng: &mut Rng, extent: std::ops::Range<f64>) -> Shape {
    let kind = if rng.gen_bool(0.5) {
        ShapeKind::Rect
    } else {
        ShapeKind::Ellipse
    };
    Shape {
        kind,
        center: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
        half_extent: (rng.gen_range(extent.clone()), rng.gen_range(extent)),
        intensity: rng.gen_range(SHAPE_INTENSITY),
        texture: random_texture(rng),
    }
}

impl Scene {
    pub fn random(rng: &mut Rng) -> Self {
        let background = rng.gen_range(SHAPE_INTENSITY);
        let background_texture = random_texture(rng);
        let count = rng.gen_range(4..=12);
        let shapes = (0..count).map(|_| random_shape(rng, 0.05..0.25)).collect();
        Self {
            background,
            background_texture,
            shapes,
        }
    }

    /// Every stripe amplitude scaled by `factor`.
    pub fn damped(&self, factor: f64) -> Self {
        let damp = |t: Option<Stripes>| {
            t.map(|t| Stripes {
                amplitude: t.amplitude * factor,
                ..t
            })
        };
        Self {
            background: self.background,
            background_texture: damp(self.background_texture),
            shapes: self
                .shapes
                .iter()
                .map(|s| Shape {
                    texture: damp(s.texture),
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Same layout and background with about half the shapes given fresh
    /// intensities and textures, plus 2-4 extra small shapes: similar at a
    /// glance, not derived from the original, and never carrying less content.
    pub fn retextured(&self, rng: &mut Rng) -> Self {
        let mut shapes: Vec<Shape> = self
            .shapes
            .iter()
            .map(|s| {
                if rng.gen_bool(RETEXTURE_PROBABILITY) {
                    Shape {
                        intensity: rng.gen_range(SHAPE_INTENSITY),
                        texture: random_texture(rng),
                        ..s.clone()
                    }
                } else {
                    s.clone()
                }
            })
            .collect();
        let extra = rng.gen_range(2..=4);
        shapes.extend((0..extra).map(|_| random_shape(rng, 0.03..0.1)));
        Self {
            background: self.background,
            background_texture: self.background_texture,
            shapes,
        }
    }

    pub fn render(&self, id: ImageId, size: usize) -> ToyImage {
        let mut pixels = Vec::with_capacity(size * size);
        for row in 0..size {
            let v = (row as f64 + 0.5) / size as f64;
            for col in 0..size {
                let u = (col as f64 + 0.5) / size as f64;
                let mut value = stripes_at(self.background, self.background_texture, u, v);
                for shape in &self.shapes {
                    if shape.contains(u, v) {
                        value = shape.value(u, v);
                    }
                }
                pixels.push(value.clamp(0.0, 1.0));
            }
        }
        ToyImage {
            id,
            height: size,
            width: size,
            pixels,
        }
    }
}

pub fn gen_image(seed: u64, id: ImageId) -> ToyImage {
    gen_image_sized(seed, id, DEFAULT_IMAGE_SIZE)
}

pub fn gen_image_sized(seed: u64, id: ImageId, size: usize) -> ToyImage {
    let mut rng = rng::stream(seed, domain::SCENE, id.0);
    Scene::random(&mut rng).render(id, size)
}

// ---------------------------------------------------------------------------
// Crops
// ---------------------------------------------------------------------------

/// A square crop window in normalized coordinates: top-left `(x, y)`, side
/// `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
}

impl Window {
    pub const FULL: Window = Window {
        x: 0.0,
        y: 0.0,
        scale: 1.0,
    };

    /// Window `inner`, expressed relative to `self`, in absolute coordinates.
    pub fn compose(&self, inner: &Window) -> Window {
        Window {
            x: self.x + self.scale * inner.x,
            y: self.y + self.scale * inner.y,
            scale: self.scale * inner.scale,
        }
    }

    pub fn contains(&self, other: &Window) -> bool {
        const EPS: f64 = 1e-12;
        other.x >= self.x - EPS
            && other.y >= self.y - EPS
            && other.x + other.scale <= self.x + self.scale + EPS
            && other.y + other.scale <= self.y + self.scale + EPS
    }

    pub fn strictly_contains(&self, other: &Window) -> bool {
        self.contains(other) && self.scale > other.scale
    }

    /// A window of `scale` with its anchor drawn uniformly inside the image.
    pub fn random(rng: &mut Rng, scale: f64) -> Window {
        let slack = 1.0 - scale;
        let (x, y) = if slack > 0.0 {
            (rng.gen_range(0.0..=slack), rng.gen_range(0.0..=slack))
        } else {
            (0.0, 0.0)
        };
        Window { x, y, scale }
    }
}

fn validate_window(scale: f64, anchor: (f64, f64)) -> Result<()> {
    if !(MIN_CROP_SCALE..=1.0).contains(&scale) {
        return Err(Error::InvalidScale(scale));
    }
    let ok = |a: f64| a >= 0.0 && a + scale <= 1.0 + 1e-9;
    if !ok(anchor.0) || !ok(anchor.1) {
        return Err(Error::InvalidAnchor(anchor.0, anchor.1));
    }
    Ok(())
}

/// Extracts the window and resizes it back to full size with bilinear
/// interpolation. No jitter.
pub fn crop_window(img: &ToyImage, scale: f64, anchor: (f64, f64)) -> Result<ToyImage> {
    validate_window(scale, anchor)?;
    let (h, w) = (img.height as f64, img.width as f64);
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in 0..img.height {
        let v = anchor.1 + scale * (row as f64 + 0.5) / h;
        let sy = v * h - 0.5;
        for col in 0..img.width {
            let u = anchor.0 + scale * (col as f64 + 0.5) / w;
            let sx = u * w - 0.5;
            pixels.push(img.sample(sy, sx));
        }
    }
    Ok(img.with_pixels(pixels))
}

/// Keeps the pixels whose centres fall inside `window` where they are and
/// fills the rest with `fill`. Unlike [`crop_window`] nothing is resampled, so
/// the kept region stays pixel-aligned with the source.
pub fn crop_in_place(img: &ToyImage, window: &Window, fill: f64) -> ToyImage {
    let (h, w) = (img.height as f64, img.width as f64);
    let inside = |t: f64, lo: f64| t >= lo && t <= lo + window.scale;
    let mut pixels = img.pixels.clone();
    for row in 0..img.height {
        let v = (row as f64 + 0.5) / h;
        for col in 0..img.width {
            let u = (col as f64 + 0.5) / w;
            if !(inside(u, window.x) && inside(v, window.y)) {
                pixels[row * img.width + col] = fill;
            }
        }
    }
    img.with_pixels(pixels)
}

/// Crop-to-copy: window extraction plus a seeded brightness shift of at most
/// [`MAX_CROP_JITTER`].
pub fn crop_copy(img: &ToyImage, scale: f64, anchor: (f64, f64), seed: u64) -> Result<ToyImage> {
    let mut out = crop_window(img, scale, anchor)?;
    let mut rng = rng::stream(seed, domain::CROP, img.id.0);
    let shift = if MAX_CROP_JITTER > 0.0 {
        rng.gen_range(-MAX_CROP_JITTER..=MAX_CROP_JITTER)
    } else {
        0.0
    };
    for p in &mut out.pixels {
        *p = (*p + shift).clamp(0.0, 1.0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Basic edits
// ---------------------------------------------------------------------------

/// Per-operation probabilities for [`EditPlan::sample`]. They are drawn
/// independently, so the no-op plan has probability
/// `(1-0.15)(1-0.1)(1-0.4)(1-0.5)(1-0.3) = 0.16065`.
pub const P_FLIP: f64 = 0.15;
pub const P_ROTATE: f64 = 0.1;
pub const P_BLUR: f64 = 0.4;
pub const P_JITTER: f64 = 0.5;
pub const P_PAD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EditPlan {
    pub hflip: bool,
    /// Number of counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub blur: bool,
    pub brightness: f64,
    /// 1.0 = unchanged.
    pub contrast: f64,
    /// Border width in pixels and its fill value.
    pub pad: Option<(usize, f64)>,
}

impl EditPlan {
    pub fn identity() -> Self {
        Self {
            contrast: 1.0,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn sample(rng: &mut Rng) -> Self {
        let hflip = rng.gen_bool(P_FLIP);
        let quarter_turns = if rng.gen_bool(P_ROTATE) {
            rng.gen_range(1..=3)
        } else {
            0
        };
        let blur = rng.gen_bool(P_BLUR);
        let (brightness, contrast) = if rng.gen_bool(P_JITTER) {
            (rng.gen_range(-0.1..0.1), rng.gen_range(0.85..1.1))
        } else {
            (0.0, 1.0)
        };
        let pad = rng
            .gen_bool(P_PAD)
            .then(|| (rng.gen_range(2..=8), rng.gen_range(0.0..1.0)));
        Self {
            hflip,
            quarter_turns,
            blur,
            brightness,
            contrast,
            pad,
        }
    }

    pub fn apply(&self, img: &ToyImage) -> ToyImage {
        let mut out = img.clone();
        if self.hflip {
            out = hflip(&out);
        }
        for _ in 0..self.quarter_turns {
            out = rotate90(&out);
        }
        if self.blur {
            out = blur3(&out);
        }
        if self.brightness != 0.0 || self.contrast != 1.0 {
            for p in &mut out.pixels {
                *p = ((*p - 0.5) * self.contrast + 0.5 + self.brightness).clamp(0.0, 1.0);
            }
        }
        if let Some((width, value)) = self.pad {
            for row in 0..out.height {
                for col in 0..out.width {
                    let edge = row < width || col < width || row + width >= out.height || col + width >= out.width;
                    if edge {
                        out.pixels[row * out.width + col] = value;
                    }
                }
            }
        }
        out
    }
}

pub fn hflip(img: &ToyImage) -> ToyImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in 0..img.height {
        for col in (0..img.width).rev() {
            pixels.push(img.get(row, col));
        }
    }
    img.with_pixels(pixels)
}

/// Quarter turn counter-clockwise. Square images only.
pub fn rotate90(img: &ToyImage) -> ToyImage {
    assert_eq!(img.height, img.width, "rotation requires a square image");
    let n = img.width;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in 0..n {
        for col in 0..n {
            pixels.push(img.get(col, n - 1 - row));
        }
    }
    img.with_pixels(pixels)
}

/// Separable 3×3 Gaussian ([1, 2, 1] / 4) with clamped borders.
pub fn blur3(img: &ToyImage) -> ToyImage {
    let (h, w) = (img.height, img.width);
    let tap = |a: f64, b: f64, c: f64| 0.25 * a + 0.5 * b + 0.25 * c;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = img.get(r, c.saturating_sub(1));
            let m = img.get(r, c);
            let rr = img.get(r, (c + 1).min(w - 1));
            tmp[r * w + c] = tap(l, m, rr);
        }
    }
    let mut pixels = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let u = tmp[r.saturating_sub(1) * w + c];
            let m = tmp[r * w + c];
            let d = tmp[(r + 1).min(h - 1) * w + c];
            pixels[r * w + c] = tap(u, m, d);
        }
    }
    img.with_pixels(pixels)
}

pub fn basic_edit(img: &ToyImage, seed: u64) -> ToyImage {
    let mut rng = rng::stream(seed, domain::EDIT, img.id.0);
    EditPlan::sample(&mut rng).apply(img)
}

// ---------------------------------------------------------------------------
// Hard negatives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardNegativeKind {
    /// Reference is a crop of a scene; the negative is the whole scene.
    SuperScene,
    /// Negative shares the reference's layout with new textures and extra
    /// detail.
    SimilarScene,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Construction {
    SuperScene {
        reference_window: Window,
        negative_window: Window,
    },
    SimilarScene,
}

#[derive(Debug, Clone)]
pub struct HardNegative {
    pub reference: ToyImage,
    pub negative: ToyImage,
    pub label: RelationLabel,
    pub construction: Construction,
}

/// Texture strength of a similar-scene reference relative to its negative, so
/// the negative always carries the richer detail.
pub const SIMILAR_REFERENCE_DAMPING: f64 = 0.7;

/// Reference crop scales for super-scene negatives.
pub const HARD_NEGATIVE_SCALES: [f64; 2] = [0.85, 0.75];

pub fn make_hard_negative(seed: u64, ref_id: ImageId, neg_id: ImageId, kind: HardNegativeKind) -> Result<HardNegative> {
    make_hard_negative_sized(seed, ref_id, neg_id, kind, DEFAULT_IMAGE_SIZE)
}

pub fn make_hard_negative_sized(
    seed: u64,
    ref_id: ImageId,
    neg_id: ImageId,
    kind: HardNegativeKind,
    size: usize,
) -> Result<HardNegative> {
    let label = RelationLabel::new(RelationKind::HardNegativeDirected, ref_id, neg_id)?;
    let mut rng = rng::stream(seed, domain::HARD_NEGATIVE, neg_id.0);
    let scene = Scene::random(&mut rng);
    match kind {
        HardNegativeKind::SuperScene => {
            let negative = scene.render(neg_id, size);
            let scale = *HARD_NEGATIVE_SCALES.choose(&mut rng).expect("non-empty");
            let window = Window::random(&mut rng, scale);
            let mut reference = crop_in_place(&negative, &window, scene.background);
            reference.id = ref_id;
            Ok(HardNegative {
                reference,
                negative,
                label,
                construction: Construction::SuperScene {
                    reference_window: window,
                    negative_window: Window::FULL,
                },
            })
        }
        HardNegativeKind::SimilarScene => {
            let negative = scene.retextured(&mut rng).render(neg_id, size);
            let reference = scene.damped(SIMILAR_REFERENCE_DAMPING).render(ref_id, size);
            Ok(HardNegative {
                reference,
                negative,
                label,
                construction: Construction::SimilarScene,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

pub fn encode_pgm(img: &ToyImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_pgm(id: ImageId, bytes: &[u8], path: &Path) -> Result<ToyImage> {
    let bad = |msg: &str| Error::parse(path, 1, msg.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(bad("pixel payload size does not match header"));
    }
    Ok(ToyImage {
        id,
        height,
        width,
        pixels: data.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub image_size: usize,
    pub refs: usize,
    pub pos_queries: usize,
    pub easy_neg: usize,
    pub hard_neg: usize,
    pub train_images: usize,
    pub train_hard_neg: usize,
    /// Share of hard negatives built as similar scenes rather than super-scenes.
    pub similar_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: DEFAULT_IMAGE_SIZE,
            refs: 200,
            pos_queries: 50,
            easy_neg: 100,
            hard_neg: 100,
            train_images: 200,
            train_hard_neg: 400,
            similar_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refs < 1 {
            return Err(Error::config("refs", "refs must be ≥ 1"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size", "image_size must be ≥ 8"));
        }
        if self.hard_neg > self.refs {
            return Err(Error::config(
                "hard_neg",
                format!("hard_neg ({}) must be ≤ refs ({})", self.hard_neg, self.refs),
            ));
        }
        if self.pos_queries > self.refs - self.hard_neg {
            return Err(Error::config(
                "pos_queries",
                format!(
                    "pos_queries ({}) must be ≤ refs - hard_neg ({})",
                    self.pos_queries,
                    self.refs - self.hard_neg
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.similar_fraction) {
            return Err(Error::config("similar_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub references: Vec<ImageId>,
    pub queries: Vec<ImageId>,
    pub train_images: Vec<ImageId>,
    pub labels: Vec<RelationLabel>,
    /// Fixed inclusion order for hard-negative sweeps.
    pub hard_negative_query_ids: Vec<ImageId>,
}

impl DatasetManifest {
    /// (query, reference) pairs of every test EditedCopy label.
    pub fn ground_truth(&self) -> BTreeSet<(ImageId, ImageId)> {
        let queries: BTreeSet<_> = self.queries.iter().copied().collect();
        self.labels
            .iter()
            .filter(|l| l.kind == RelationKind::EditedCopy && queries.contains(&l.latter))
            .map(|l| (l.latter, l.former))
            .collect()
    }

    /// Directed (former, latter) hard-negative pairs among training images.
    pub fn train_hard_negative_pairs(&self) -> Vec<(ImageId, ImageId)> {
        let train: BTreeSet<_> = self.train_images.iter().copied().collect();
        self.labels
            .iter()
            .filter(|l| {
                l.kind == RelationKind::HardNegativeDirected && train.contains(&l.former) && train.contains(&l.latter)
            })
            .map(|l| (l.former, l.latter))
            .collect()
    }

    /// Training images that are not members of a hard-negative pair.
    pub fn train_base_images(&self) -> Vec<ImageId> {
        let in_pairs: BTreeSet<ImageId> = self
            .train_hard_negative_pairs()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        self.train_images
            .iter()
            .copied()
            .filter(|id| !in_pairs.contains(id))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: BTreeMap<ImageId, ToyImage>,
}

impl Dataset {
    pub fn image(&self, id: ImageId) -> &ToyImage {
        self.images
            .get(&id)
            .unwrap_or_else(|| panic!("image {id} missing from dataset"))
    }

    pub fn image_size(&self) -> usize {
        self.images.values().next().map_or(DEFAULT_IMAGE_SIZE, |i| i.width)
    }
}

pub fn build_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let seed = config.seed;
    let size = config.image_size;
    let mut rng = rng::stream(seed, domain::DATASET, 0);
    let mut images = BTreeMap::new();
    let mut labels = Vec::new();

    let ref_ids: Vec<ImageId> = (0..config.refs as u64)
        .map(|i| ImageId(REFERENCE_ID_BASE + i))
        .collect();
    let mut slots = ref_ids.clone();
    slots.shuffle(&mut rng);
    let (hard_refs, regular_refs) = slots.split_at(config.hard_neg);

    for &id in regular_refs {
        images.insert(id, gen_image_sized(seed, id, size).quantized());
    }

    let n_queries = config.pos_queries + config.easy_neg + config.hard_neg;
    let mut query_ids: Vec<ImageId> = (0..n_queries as u64).map(|i| ImageId(QUERY_ID_BASE + i)).collect();
    query_ids.shuffle(&mut rng);
    let (pos_ids, rest) = query_ids.split_at(config.pos_queries);
    let (easy_ids, hard_ids) = rest.split_at(config.easy_neg);

    let mut sources = regular_refs.to_vec();
    sources.sort();
    let sources: Vec<ImageId> = sources.choose_multiple(&mut rng, config.pos_queries).copied().collect();
    for (&qid, &rid) in pos_ids.iter().zip(&sources) {
        let mut copy = basic_edit(&images[&rid], rng::derive(seed, domain::EDIT, qid.0));
        copy.id = qid;
        images.insert(qid, copy.quantized());
        labels.push(RelationLabel::new(RelationKind::EditedCopy, rid, qid)?);
    }

    for &qid in easy_ids {
        images.insert(qid, gen_image_sized(seed, qid, size).quantized());
    }

    let mut hard_order = Vec::with_capacity(config.hard_neg);
    for (&qid, &rid) in hard_ids.iter().zip(hard_refs) {
        let kind = pick_kind(&mut rng, config.similar_fraction);
        let hn = make_hard_negative_sized(seed, rid, qid, kind, size)?;
        images.insert(rid, hn.reference.quantized());
        images.insert(qid, hn.negative.quantized());
        labels.push(hn.label);
        hard_order.push(qid);
    }

    let mut train_images = Vec::new();
    for i in 0..config.train_images as u64 {
        let id = ImageId(TRAIN_ID_BASE + i);
        images.insert(id, gen_image_sized(seed, id, size).quantized());
        train_images.push(id);
    }
    for k in 0..config.train_hard_neg as u64 {
        let former = ImageId(TRAIN_PAIR_ID_BASE + 2 * k);
        let latter = ImageId(TRAIN_PAIR_ID_BASE + 2 * k + 1);
        let kind = pick_kind(&mut rng, config.similar_fraction);
        let hn = make_hard_negative_sized(seed, former, latter, kind, size)?;
        images.insert(former, hn.reference.quantized());
        images.insert(latter, hn.negative.quantized());
        labels.push(hn.label);
        train_images.push(former);
        train_images.push(latter);
    }

    let mut queries = query_ids.clone();
    queries.sort();
    let manifest = DatasetManifest {
        references: ref_ids,
        queries,
        train_images,
        labels,
        hard_negative_query_ids: hard_order,
    };
    Ok(Dataset { manifest, images })
}

fn pick_kind(rng: &mut Rng, similar_fraction: f64) -> HardNegativeKind {
    if rng.gen::<f64>() < similar_fraction {
        HardNegativeKind::SimilarScene
    } else {
        HardNegativeKind::SuperScene
    }
}

fn image_path(dir: &Path, id: ImageId) -> std::path::PathBuf {
    dir.join("images").join(format!("{id}.pgm"))
}

/// Writes `images/*.pgm`, `manifest.json`, `gt.csv`, and `train_pairs.csv`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (id, img) in &dataset.images {
        let path = image_path(dir, *id);
        fs::write(&path, encode_pgm(img)).map_err(|e| Error::io(&path, e))?;
    }

    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("gt.csv");
    let mut gt = String::from("query_id,ref_id\n");
    for (q, r) in dataset.manifest.ground_truth() {
        gt.push_str(&format!("{q},{r}\n"));
    }
    fs::write(&path, gt).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("train_pairs.csv");
    let train: BTreeSet<_> = dataset.manifest.train_images.iter().copied().collect();
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = String::from("former_id,latter_id,kind\n");
    for l in &dataset.manifest.labels {
        if train.contains(&l.former) {
            let kind = match l.kind {
                RelationKind::EditedCopy => "copy",
                RelationKind::HardNegativeDirected => "hardneg",
            };
            out.push_str(&format!("{},{},{kind}\n", l.former, l.latter));
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line() as u64, e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut images = BTreeMap::new();
    let ids = manifest
        .references
        .iter()
        .chain(&manifest.queries)
        .chain(&manifest.train_images);
    for &id in ids {
        let path = image_path(dir, id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        images.insert(id, decode_pgm(id, &bytes, &path)?);
    }
    Ok(Dataset { manifest, images })
}

/// Reads `query_id,ref_id` ground truth.
pub fn read_ground_truth(path: &Path) -> Result<BTreeSet<(ImageId, ImageId)>> {
    #[derive(Deserialize)]
    struct Row {
        query_id: u64,
        ref_id: u64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = BTreeSet::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.insert((ImageId(row.query_id), ImageId(row.ref_id)));
    }
    Ok(out)
}
