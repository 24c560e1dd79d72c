use crate::data::synth::{mask_centroid, IdentityTemplate};
use crate::data::Image;
use crate::error::{Error, Result};

/// Normalized RGB distance above which a pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.3;
/// Extra search radius around the centroid alignment, in pixels.
pub const ALIGN_RADIUS: i64 = 2;
/// Edge-statistic distance that counts as maximally different.
pub const EDGE_SCALE: f64 = 0.1;

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

/// Foreground mask: pixels far from the median border color.
pub fn foreground_mask(img: &Image) -> Vec<bool> {
    let s = img.size;
    let border: Vec<[f32; 3]> = (0..s)
        .flat_map(|i| [(0, i), (s - 1, i), (i, 0), (i, s - 1)])
        .map(|(y, x)| img.rgb(y, x))
        .collect();
    let bg: [f32; 3] = [0, 1, 2].map(|c| median(border.iter().map(|p| p[c]).collect()));
    (0..s * s)
        .map(|i| {
            let p = img.rgb(i / s, i % s);
            let d2: f32 = p.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum();
            (d2 / 3.0).sqrt() > FOREGROUND_THRESHOLD
        })
        .collect()
}

/// IoU of the template with the foreground shifted by `(dy, dx)`. Foreground
/// shifted out of frame still counts toward the union.
fn iou_shifted(size: usize, fg: &[bool], fg_area: usize, template: &[bool], t_area: usize, dy: i64, dx: i64) -> f64 {
    let s = size as i64;
    let mut inter = 0usize;
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = (y - dy, x - dx);
            if template[(y * s + x) as usize] && (0..s).contains(&sy) && (0..s).contains(&sx) && fg[(sy * s + sx) as usize] {
                inter += 1;
            }
        }
    }
    let union = t_area + fg_area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Silhouette IoU against the template after aligning centroids and
/// refining the shift within ±[`ALIGN_RADIUS`] pixels. Images are scored as
/// their 8-bit quantization so PNG round trips do not change the result.
pub fn identity_score(img: &Image, template: &IdentityTemplate) -> Result<f64> {
    if img.size != template.size {
        return Err(Error::contract(format!(
            "image size {} differs from template size {}",
            img.size, template.size
        )));
    }
    let fg = foreground_mask(&img.quantized());
    let Some((cy, cx)) = mask_centroid(img.size, &fg) else {
        return Ok(0.0);
    };
    let (by, bx) = (
        (template.centroid.0 - cy).round() as i64,
        (template.centroid.1 - cx).round() as i64,
    );
    let fg_area = fg.iter().filter(|v| **v).count();
    let t_area = template.mask.iter().filter(|v| **v).count();
    let mut best = 0.0f64;
    for dy in by - ALIGN_RADIUS..=by + ALIGN_RADIUS {
        for dx in bx - ALIGN_RADIUS..=bx + ALIGN_RADIUS {
            best = best.max(iou_shifted(img.size, &fg, fg_area, &template.mask, t_area, dy, dx));
        }
    }
    Ok(best)
}

/// Color histogram (3 bins per channel) and mean absolute luminance
/// differences along x, y and both diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeatures {
    pub histogram: [f64; 27],
    pub edges: [f64; 4],
}

impl StyleFeatures {
    pub fn of(img: &Image) -> StyleFeatures {
        let img = img.quantized();
        let s = img.size;
        let mut histogram = [0.0; 27];
        let mut lum = vec![0.0f64; s * s];
        for y in 0..s {
            for x in 0..s {
                let p = img.rgb(y, x);
                let bin = |v: f32| ((v * 3.0) as usize).min(2);
                histogram[bin(p[0]) * 9 + bin(p[1]) * 3 + bin(p[2])] += 1.0;
                lum[y * s + x] = crate::data::synth::luminance(p) as f64;
            }
        }
        histogram.iter_mut().for_each(|h| *h /= (s * s) as f64);
        let mut edges = [0.0; 4];
        let mut count = 0.0;
        for y in 1..s - 1 {
            for x in 0..s - 1 {
                let c = lum[y * s + x];
                edges[0] += (lum[y * s + x + 1] - c).abs();
                edges[1] += (lum[(y + 1) * s + x] - c).abs();
                edges[2] += (lum[(y + 1) * s + x + 1] - c).abs();
                edges[3] += (lum[(y - 1) * s + x + 1] - c).abs();
                count += 1.0;
            }
        }
        edges.iter_mut().for_each(|e| *e /= count);
        StyleFeatures { histogram, edges }
    }

    pub fn mean(set: &[StyleFeatures]) -> Result<StyleFeatures> {
        if set.is_empty() {
            return Err(Error::contract("style reference set is empty"));
        }
        let n = set.len() as f64;
        let mut out = StyleFeatures {
            histogram: [0.0; 27],
            edges: [0.0; 4],
        };
        for f in set {
            for (o, v) in out.histogram.iter_mut().zip(&f.histogram) {
                *o += v / n;
            }
            for (o, v) in out.edges.iter_mut().zip(&f.edges) {
                *o += v / n;
            }
        }
        Ok(out)
    }

    /// Half total-variation histogram distance plus half clipped L1 edge
    /// distance; lies in `[0, 1]`.
    pub fn distance(&self, other: &StyleFeatures) -> f64 {
        let tv: f64 = 0.5 * self.histogram.iter().zip(&other.histogram).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let edge: f64 = self.edges.iter().zip(&other.edges).map(|(a, b)| (a - b).abs()).sum();
        0.5 * tv.min(1.0) + 0.5 * (edge / EDGE_SCALE).min(1.0)
    }
}

/// Precomputed reference statistics of a style.
#[derive(Debug, Clone)]
pub struct StyleReference {
    pub mean: StyleFeatures,
}

impl StyleReference {
    pub fn new(images: &[Image]) -> Result<StyleReference> {
        let feats: Vec<StyleFeatures> = images.iter().map(StyleFeatures::of).collect();
        Ok(StyleReference {
            mean: StyleFeatures::mean(&feats)?,
        })
    }

    pub fn score(&self, img: &Image) -> f64 {
        (1.0 - StyleFeatures::of(img).distance(&self.mean)).clamp(0.0, 1.0)
    }
}

/// `1 - distance(image, mean of references)`, clamped to `[0, 1]`.
pub fn style_score(img: &Image, references: &[Image]) -> Result<f64> {
    Ok(StyleReference::new(references)?.score(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{Character, BACKGROUNDS};

    #[test]
    fn self_match_is_one() {
        let t = Character::template(32);
        let img = Character::render(32, 0.0, 0.0, BACKGROUNDS[1].1);
        assert_eq!(identity_score(&img, &t).unwrap(), 1.0);
    }

    #[test]
    fn empty_silhouette_scores_zero() {
        let t = Character::template(32);
        let img = Image::filled(32, [0.3, 0.3, 0.3]);
        assert_eq!(identity_score(&img, &t).unwrap(), 0.0);
    }

    #[test]
    fn singleton_reference_scores_one() {
        let img = Character::render(32, 1.0, 0.0, BACKGROUNDS[0].1);
        assert_eq!(style_score(&img, std::slice::from_ref(&img)).unwrap(), 1.0);
        assert!(style_score(&img, &[]).is_err());
    }
}
