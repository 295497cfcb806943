//! Procedural digit glyphs: a hermetic stand-in for file-based digit data.
//!
//! Digits are vector strokes rasterized through a signed-distance field
//! with per-style rotation/thickness buckets and small per-sample jitter,
//! so the condition space is (class, style) — larger than the digit set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PairedDataset, Provenance};
use crate::error::{Error, Result};
use crate::models::Condition;
use crate::numcore::Tensor;
use crate::rng::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub classes: u32,
    pub styles: u32,
    pub image_size: usize,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            styles: 8,
            image_size: 16,
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 10 || self.styles == 0 {
            return Err(Error::invalid(format!(
                "glyphs support 1..=10 classes and >=1 styles, got {}x{}",
                self.classes, self.styles
            )));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("glyph images need at least 8 pixels"));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.image_size, self.image_size]
    }
}

type Polyline = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, n: usize) -> Polyline {
    let mut pts: Polyline = (0..=n)
        .map(|i| {
            let a = 2.0 * std::f32::consts::PI * i as f32 / n as f32;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect();
    // close exactly
    let first = pts[0];
    *pts.last_mut().unwrap() = first;
    pts
}

/// Stroke table in the unit square, y-up.
fn digit_strokes(digit: u32) -> Vec<Polyline> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.21, 0.32, 16)],
        1 => vec![
            vec![(0.36, 0.68), (0.54, 0.84), (0.54, 0.16)],
            vec![(0.38, 0.16), (0.70, 0.16)],
        ],
        2 => vec![vec![
            (0.29, 0.70),
            (0.38, 0.83),
            (0.60, 0.83),
            (0.70, 0.70),
            (0.65, 0.53),
            (0.29, 0.16),
            (0.72, 0.16),
        ]],
        3 => vec![
            vec![(0.30, 0.80), (0.50, 0.86), (0.67, 0.75), (0.61, 0.58), (0.45, 0.53)],
            vec![(0.45, 0.53), (0.64, 0.46), (0.69, 0.28), (0.52, 0.14), (0.30, 0.20)],
        ],
        4 => vec![
            vec![(0.62, 0.84), (0.25, 0.36), (0.78, 0.36)],
            vec![(0.62, 0.84), (0.62, 0.15)],
        ],
        5 => vec![vec![
            (0.69, 0.84),
            (0.33, 0.84),
            (0.31, 0.56),
            (0.53, 0.60),
            (0.68, 0.48),
            (0.67, 0.28),
            (0.49, 0.15),
            (0.30, 0.22),
        ]],
        6 => vec![vec![
            (0.63, 0.84),
            (0.44, 0.79),
            (0.33, 0.60),
            (0.31, 0.36),
            (0.43, 0.17),
            (0.60, 0.17),
            (0.69, 0.31),
            (0.63, 0.46),
            (0.45, 0.49),
            (0.33, 0.41),
        ]],
        7 => vec![vec![(0.28, 0.84), (0.72, 0.84), (0.45, 0.15)]],
        8 => vec![
            ellipse(0.5, 0.67, 0.16, 0.17, 12),
            ellipse(0.5, 0.33, 0.19, 0.19, 12),
        ],
        9 => vec![vec![
            (0.37, 0.16),
            (0.56, 0.21),
            (0.67, 0.40),
            (0.69, 0.64),
            (0.57, 0.83),
            (0.40, 0.83),
            (0.31, 0.69),
            (0.37, 0.54),
            (0.55, 0.51),
            (0.67, 0.59),
        ]],
        _ => unreachable!("digit out of range"),
    }
}

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let len2 = bx * bx + by * by;
    let t = if len2 > 0.0 {
        ((px * bx + py * by) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - t * bx, py - t * by);
    (dx * dx + dy * dy).sqrt()
}

struct GlyphTransform {
    rot: f32,
    scale: f32,
    tx: f32,
    ty: f32,
    half_thick: f32,
}

fn style_params(style: u32) -> (f32, f32) {
    const ROTS: [f32; 4] = [-16.0, -6.0, 6.0, 16.0];
    const THICKS: [f32; 2] = [0.075, 0.115];
    (
        ROTS[(style % 4) as usize],
        THICKS[((style / 4) % 2) as usize],
    )
}

fn render_one(digit: u32, size: usize, tf: &GlyphTransform) -> Tensor<f32> {
    let (sin, cos) = (tf.rot.to_radians().sin(), tf.rot.to_radians().cos());
    let apply = |(x, y): (f32, f32)| -> (f32, f32) {
        let (cx, cy) = (x - 0.5, y - 0.5);
        let (rx, ry) = (cos * cx - sin * cy, sin * cx + cos * cy);
        (rx * tf.scale + 0.5 + tf.tx, ry * tf.scale + 0.5 + tf.ty)
    };
    let strokes: Vec<Polyline> = digit_strokes(digit)
        .into_iter()
        .map(|line| line.into_iter().map(apply).collect())
        .collect();

    let aa = 1.2 / size as f32;
    let mut data = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let u = (col as f32 + 0.5) / size as f32;
            // image rows run top-down, glyph space is y-up
            let v = 1.0 - (row as f32 + 0.5) / size as f32;
            let mut d = f32::INFINITY;
            for line in &strokes {
                for seg in line.windows(2) {
                    d = d.min(dist_to_segment((u, v), seg[0], seg[1]));
                }
            }
            let cov = ((tf.half_thick - d) / aa + 0.5).clamp(0.0, 1.0);
            data.push(2.0 * cov - 1.0);
        }
    }
    Tensor::new(&[1, size, size], data).expect("glyph tensor")
}

/// Rasterize `per_cell` jittered samples for every (class, style) cell.
/// Deterministic per seed; conditions are `Composite(class, style)`.
pub fn render_glyphs(cfg: &GlyphConfig, per_cell: usize, seed: u64) -> Result<PairedDataset> {
    cfg.validate()?;
    if per_cell == 0 {
        return Err(Error::invalid("per_cell must be positive"));
    }
    let mut examples = Vec::with_capacity((cfg.classes * cfg.styles) as usize * per_cell);
    for class in 0..cfg.classes {
        for style in 0..cfg.styles {
            let (rot, thick) = style_params(style);
            let mut rng = derive_rng(seed, "glyphs", &[class as u64, style as u64]);
            for _ in 0..per_cell {
                let tf = GlyphTransform {
                    rot: rot + rng.random_range(-4.0..4.0),
                    scale: 1.0 + rng.random_range(-0.07..0.07),
                    tx: rng.random_range(-0.035..0.035),
                    ty: rng.random_range(-0.035..0.035),
                    half_thick: thick * (1.0 + rng.random_range(-0.1..0.1)) / 2.0,
                };
                examples.push((
                    render_one(class, cfg.image_size, &tf),
                    Condition::composite(class, style),
                ));
            }
        }
    }
    Ok(PairedDataset {
        examples,
        provenance: Provenance::Real,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = GlyphConfig {
            classes: 3,
            styles: 2,
            image_size: 12,
        };
        let a = render_glyphs(&cfg, 2, 9).unwrap();
        let b = render_glyphs(&cfg, 2, 9).unwrap();
        for ((xa, _), (xb, _)) in a.examples.iter().zip(&b.examples) {
            assert!(xa.bit_eq(xb));
        }
    }

    #[test]
    fn condition_count_is_classes_times_styles() {
        let cfg = GlyphConfig {
            classes: 4,
            styles: 3,
            image_size: 12,
        };
        let d = render_glyphs(&cfg, 2, 1).unwrap();
        assert_eq!(d.distinct_conditions().len(), 12);
        assert_eq!(d.len(), 24);
        assert_eq!(d.infer_vocab().unwrap().rows(), 13);
    }

    #[test]
    fn pixels_are_in_range_and_strokes_present() {
        let d = render_glyphs(&GlyphConfig::default(), 1, 2).unwrap();
        for (x, _) in &d.examples {
            assert!(x.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            let ink: usize = x.data().iter().filter(|&&v| v > 0.0).count();
            assert!(ink > 8, "glyph nearly empty: {ink} bright pixels");
            assert!(ink < x.len() / 2, "glyph mostly ink: {ink}");
        }
    }

    // Visual aid while tuning stroke tables: `cargo test -p rclab-core
    // glyph_ascii -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn glyph_ascii_preview() {
        let cfg = GlyphConfig {
            classes: 10,
            styles: 8,
            image_size: 16,
        };
        let d = render_glyphs(&cfg, 1, 0).unwrap();
        for digit in 0..10u32 {
            for style in [0u32, 5] {
                let idx = (digit * cfg.styles + style) as usize;
                let (x, c) = &d.examples[idx];
                println!("digit {digit} style {style} {c:?}");
                for row in 0..cfg.image_size {
                    let line: String = (0..cfg.image_size)
                        .map(|col| {
                            let v = x.data()[row * cfg.image_size + col];
                            if v > 0.5 {
                                '#'
                            } else if v > -0.5 {
                                '+'
                            } else {
                                '.'
                            }
                        })
                        .collect();
                    println!("  {line}");
                }
            }
        }
    }
}
