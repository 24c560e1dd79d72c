//! Procedural datasets: generic shapes and figures for the base model, a
//! fixed character for personalization, and a palette-plus-stripes style.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::unet::ConditionEncoder;

pub const ID_TRIGGER: &str = "<char>";
pub const STYLE_TRIGGER: &str = "<style>";
/// Class word of the identity set; base-model figures carry it too.
pub const ID_CLASS: &str = "figure";
/// Class word of generic shape images.
pub const STYLE_CLASS: &str = "shape";

pub const COLORS: [(&str, [f32; 3]); 5] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.2, 0.7, 0.25]),
    ("blue", [0.2, 0.35, 0.9]),
    ("yellow", [0.95, 0.85, 0.2]),
    ("white", [0.95, 0.95, 0.95]),
];

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

pub const BACKGROUNDS: [(&str, [f32; 3]); 5] = [
    ("dark", [0.08, 0.08, 0.1]),
    ("navy", [0.06, 0.08, 0.3]),
    ("forest", [0.05, 0.22, 0.1]),
    ("maroon", [0.28, 0.05, 0.08]),
    ("light", [0.85, 0.85, 0.8]),
];

/// Style palette, indexed by luminance quartile.
pub const STYLE_PALETTE: [[f32; 3]; 4] = [
    [0.25, 0.1, 0.35],
    [0.1, 0.55, 0.55],
    [0.95, 0.55, 0.45],
    [1.0, 0.95, 0.8],
];

const CHAR_HEAD: [f32; 3] = [0.98, 0.8, 0.3];
const CHAR_BODY: [f32; 3] = [0.95, 0.95, 0.9];

/// Every token the synthetic captions use, including both triggers.
pub fn vocabulary() -> ConditionEncoder {
    let mut tokens = vec![STYLE_CLASS, ID_CLASS];
    tokens.extend(COLORS.iter().map(|c| c.0));
    tokens.extend(SHAPES);
    tokens.extend(BACKGROUNDS.iter().map(|b| b.0));
    tokens.extend([ID_TRIGGER, STYLE_TRIGGER]);
    ConditionEncoder::new(tokens)
}

pub fn luminance(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Geometry is authored on a 32-pixel canvas and scaled to `size`.
struct Canvas {
    size: usize,
    scale: f32,
    img: Image,
}

impl Canvas {
    fn new(size: usize, bg: [f32; 3]) -> Canvas {
        Canvas {
            size,
            scale: size as f32 / 32.0,
            img: Image::filled(size, bg),
        }
    }

    fn paint(&mut self, color: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (u, v) = ((x as f32 + 0.5) / self.scale, (y as f32 + 0.5) / self.scale);
                if inside(u, v) {
                    self.img.set_rgb(y, x, color);
                }
            }
        }
    }

    fn circle(&mut self, cx: f32, cy: f32, r: f32, color: [f32; 3]) {
        self.paint(color, |u, v| (u - cx).powi(2) + (v - cy).powi(2) <= r * r);
    }

    fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, color: [f32; 3]) {
        self.paint(color, |u, v| u >= x0 && u < x1 && v >= y0 && v < y1);
    }

    fn triangle(&mut self, p: [(f32, f32); 3], color: [f32; 3]) {
        self.paint(color, |u, v| in_triangle(p, u, v));
    }
}

fn in_triangle(p: [(f32, f32); 3], u: f32, v: f32) -> bool {
    let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
    let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
    d.iter().all(|x| *x >= 0.0) || d.iter().all(|x| *x <= 0.0)
}

/// One generic shape; caption `"shape, <color>, <shape>, <background>"`.
pub fn shape_sample(rng: &mut impl Rng, size: usize) -> (Image, String) {
    let (bg_name, bg) = *BACKGROUNDS.choose(rng).expect("non-empty");
    let (color_name, color) = *COLORS.choose(rng).expect("non-empty");
    let shape = *SHAPES.choose(rng).expect("non-empty");
    let r: f32 = rng.random_range(6.0..11.0);
    let cx: f32 = rng.random_range(r + 1.0..31.0 - r);
    let cy: f32 = rng.random_range(r + 1.0..31.0 - r);
    let mut c = Canvas::new(size, bg);
    match shape {
        "circle" => c.circle(cx, cy, r, color),
        "square" => c.rect(cx - r, cy - r, cx + r, cy + r, color),
        _ => c.triangle([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], color),
    }
    (c.img, format!("{STYLE_CLASS}, {color_name}, {shape}, {bg_name}"))
}

/// A random head-and-body figure; caption `"figure, <color>, <background>"`.
pub fn figure_sample(rng: &mut impl Rng, size: usize) -> (Image, String) {
    let (bg_name, bg) = *BACKGROUNDS.choose(rng).expect("non-empty");
    let (color_name, head) = *COLORS.choose(rng).expect("non-empty");
    let body = COLORS.choose(rng).expect("non-empty").1;
    let hr: f32 = rng.random_range(4.0..7.0);
    let bw: f32 = rng.random_range(8.0..14.0);
    let bh: f32 = rng.random_range(6.0..11.0);
    let cx: f32 = rng.random_range(9.0..23.0);
    let top: f32 = rng.random_range(2.0..(31.0 - 2.0 * hr - bh).max(2.5));
    let mut c = Canvas::new(size, bg);
    c.rect(cx - bw / 2.0, top + 2.0 * hr - 1.0, cx + bw / 2.0, top + 2.0 * hr - 1.0 + bh, body);
    c.circle(cx, top + hr, hr, head);
    (c.img, format!("{ID_CLASS}, {color_name}, {bg_name}"))
}

/// Base-model training corpus: alternating shapes and figures.
pub fn base_corpus(count: usize, seed: u64, size: usize) -> Vec<(Image, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                shape_sample(&mut rng, size)
            } else {
                figure_sample(&mut rng, size)
            }
        })
        .collect()
}

/// The personalization subject: a fixed two-tone figure with ears and a
/// tail, drawn at an offset on a dark background.
pub struct Character;

impl Character {
    fn parts(dx: f32, dy: f32) -> impl Fn(f32, f32) -> Option<[f32; 3]> {
        move |u: f32, v: f32| {
            let (u, v) = (u - dx, v - dy);
            let head = (u - 16.0).powi(2) + (v - 11.0).powi(2) <= 36.0;
            let ears = in_triangle([(10.0, 9.0), (11.0, 2.0), (15.0, 5.5)], u, v)
                || in_triangle([(22.0, 9.0), (21.0, 2.0), (17.0, 5.5)], u, v);
            let body = (11.0..21.0).contains(&u) && (16.0..27.0).contains(&v);
            let tail = ((21.0..27.0).contains(&u) && (22.0..24.0).contains(&v))
                || ((26.0..29.0).contains(&u) && (18.0..24.0).contains(&v));
            if body {
                Some(CHAR_BODY)
            } else if head || ears || tail {
                Some(CHAR_HEAD)
            } else {
                None
            }
        }
    }

    /// Renders the character shifted by `(dx, dy)` pixels (on the 32-pixel
    /// authoring grid).
    pub fn render(size: usize, dx: f32, dy: f32, bg: [f32; 3]) -> Image {
        let mut c = Canvas::new(size, bg);
        let parts = Self::parts(dx, dy);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f32 + 0.5) / c.scale, (y as f32 + 0.5) / c.scale);
                if let Some(color) = parts(u, v) {
                    c.img.set_rgb(y, x, color);
                }
            }
        }
        c.img
    }

    pub fn template(size: usize) -> IdentityTemplate {
        let scale = size as f32 / 32.0;
        let parts = Self::parts(0.0, 0.0);
        let mask: Vec<bool> = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                parts((x as f32 + 0.5) / scale, (y as f32 + 0.5) / scale).is_some()
            })
            .collect();
        IdentityTemplate::from_mask(size, mask)
    }
}

/// Reference silhouette of the identity subject.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTemplate {
    pub size: usize,
    pub mask: Vec<bool>,
    /// Alignment landmark: silhouette centroid `(y, x)`.
    pub centroid: (f64, f64),
}

impl IdentityTemplate {
    pub fn from_mask(size: usize, mask: Vec<bool>) -> IdentityTemplate {
        let centroid = mask_centroid(size, &mask).unwrap_or((size as f64 / 2.0, size as f64 / 2.0));
        IdentityTemplate { size, mask, centroid }
    }
}

pub(crate) fn mask_centroid(size: usize, mask: &[bool]) -> Option<(f64, f64)> {
    let (mut n, mut sy, mut sx) = (0usize, 0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        n += 1;
        sy += (i / size) as f64;
        sx += (i % size) as f64;
    }
    (n > 0).then(|| (sy / n as f64, sx / n as f64))
}

/// Instance set of the character: random offsets of up to 3 pixels on
/// dark backgrounds. Captions `"<char>, figure, <background>"`.
pub fn identity_set(count: usize, seed: u64, size: usize) -> Vec<(Image, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dark = &BACKGROUNDS[..4];
    (0..count)
        .map(|_| {
            let (bg_name, bg) = *dark.choose(&mut rng).expect("non-empty");
            let dx = rng.random_range(-3i32..=3) as f32;
            let dy = rng.random_range(-2i32..=2) as f32;
            (Character::render(size, dx, dy, bg), format!("{ID_TRIGGER}, {ID_CLASS}, {bg_name}"))
        })
        .collect()
}

/// Maps luminance quartiles to the style palette and darkens alternate
/// diagonal stripes.
pub fn stylize(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.size {
        for x in 0..img.size {
            let l = luminance(img.rgb(y, x));
            let level = ((l * 4.0) as usize).min(3);
            let mut rgb = STYLE_PALETTE[level];
            if ((x + y) / 3) % 2 == 0 {
                rgb = rgb.map(|v| v * 0.88);
            }
            out.set_rgb(y, x, rgb);
        }
    }
    out
}

/// Stylized generic content. Captions `"<style>, <content caption>"`.
pub fn style_set(count: usize, seed: u64, size: usize) -> Vec<(Image, String)> {
    base_corpus(count, seed, size)
        .into_iter()
        .map(|(img, caption)| (stylize(&img), format!("{STYLE_TRIGGER}, {caption}")))
        .collect()
}
