//! Procedural component strokes and the style-dependent rasteriser.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Where a component sits inside the glyph cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Left,
    Right,
    Top,
    Bottom,
    Center,
    Full,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Left,
        Slot::Right,
        Slot::Top,
        Slot::Bottom,
        Slot::Center,
        Slot::Full,
    ];

    /// Sub-box `(x0, y0, x1, y1)` of the unit cell, y pointing down.
    pub fn bounds(self) -> (f64, f64, f64, f64) {
        match self {
            Slot::Left => (0.08, 0.08, 0.46, 0.92),
            Slot::Right => (0.54, 0.08, 0.92, 0.92),
            Slot::Top => (0.08, 0.08, 0.92, 0.46),
            Slot::Bottom => (0.08, 0.54, 0.92, 0.92),
            Slot::Center => (0.32, 0.32, 0.68, 0.68),
            Slot::Full => (0.08, 0.08, 0.92, 0.92),
        }
    }
}

/// A stroke primitive in the component's unit box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Stroke {
    Line {
        from: [f64; 2],
        to: [f64; 2],
    },
    Arc {
        center: [f64; 2],
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Stroke {
    /// Polyline approximation, in the unit box.
    fn points(&self) -> Vec<[f64; 2]> {
        match *self {
            Stroke::Line { from, to } => vec![from, to],
            Stroke::Arc {
                center,
                radius,
                start,
                sweep,
            } => (0..=10)
                .map(|i| {
                    let t = start + sweep * i as f64 / 10.0;
                    [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentGlyphSpec {
    pub component_id: usize,
    pub anchor_slot: Slot,
    pub strokes: Vec<Stroke>,
}

impl ComponentGlyphSpec {
    /// Two to four strokes between points of a 3×3 lattice, with an
    /// occasional arc. Distinct lattice pairs keep components visually apart.
    pub fn random(component_id: usize, anchor_slot: Slot, rng: &mut impl Rng) -> Self {
        let lattice = |i: usize| [0.1 + 0.4 * (i % 3) as f64, 0.1 + 0.4 * (i / 3) as f64];
        let count = rng.random_range(2..=4);
        let mut strokes: Vec<Stroke> = Vec::with_capacity(count);
        while strokes.len() < count {
            let stroke = if rng.random_bool(0.2) {
                Stroke::Arc {
                    center: [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)],
                    radius: rng.random_range(0.2..0.35),
                    start: rng.random_range(0.0..std::f64::consts::TAU),
                    sweep: rng.random_range(1.5..3.5),
                }
            } else {
                let a = rng.random_range(0..9);
                let b = rng.random_range(0..9);
                if a == b {
                    continue;
                }
                Stroke::Line {
                    from: lattice(a.min(b)),
                    to: lattice(a.max(b)),
                }
            };
            if !strokes.contains(&stroke) {
                strokes.push(stroke);
            }
        }
        ComponentGlyphSpec {
            component_id,
            anchor_slot,
            strokes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: usize,
    /// Stroke width in pixels for vertical strokes.
    pub stroke_thickness: f64,
    /// Horizontal shear in radians.
    pub slant: f64,
    /// Fraction of the cell occupied by the glyph.
    pub scale: f64,
    /// Width of horizontal strokes relative to vertical ones.
    pub contrast: f64,
    /// Amplitude of the per-style endpoint wobble, in unit-cell coordinates.
    pub jitter: f64,
    /// Seed of the wobble pattern.
    pub jitter_seed: u64,
}

impl StyleSpec {
    pub fn params(&self) -> [f64; 5] {
        [
            self.stroke_thickness,
            self.slant,
            self.scale,
            self.contrast,
            self.jitter,
        ]
    }
}

/// Styles for `count` ids: a shuffled 4×4×2×2 grid of thickness, slant,
/// scale and contrast (plus a small random offset) so styles stay
/// separable; beyond 64 styles the offsets alone keep them distinct.
pub fn sample_styles(count: usize, rng: &mut impl Rng) -> Vec<StyleSpec> {
    let mut grid: Vec<[usize; 4]> = Vec::with_capacity(64);
    for t in 0..4 {
        for s in 0..4 {
            for c in 0..2 {
                for k in 0..2 {
                    grid.push([t, s, c, k]);
                }
            }
        }
    }
    use rand::seq::SliceRandom;
    grid.shuffle(rng);
    (0..count)
        .map(|style_id| {
            let [t, s, c, k] = grid[style_id % grid.len()];
            StyleSpec {
                style_id,
                stroke_thickness: 1.2 + 0.7 * t as f64 + rng.random_range(-0.1..0.1),
                slant: -0.3 + 0.2 * s as f64 + rng.random_range(-0.03..0.03),
                scale: 0.8 + 0.18 * c as f64 + rng.random_range(-0.02..0.02),
                contrast: 0.55 + 0.45 * k as f64 - rng.random_range(0.0..0.05),
                jitter: rng.random_range(0.0..0.025),
                jitter_seed: rng.random(),
            }
        })
        .collect()
}

/// Splits 64 bits of a seed into a deterministic pseudo-random offset.
fn wobble(seed: u64, key: u64) -> f64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Renders the ink of `components` under `style` into an 8-bit
/// `size × size` raster (0 = paper, 255 = full ink). Ink is the pixel-wise
/// maximum over every stroke segment, so a character is exactly the union
/// of its components' renders.
pub fn render(components: &[&ComponentGlyphSpec], style: &StyleSpec, size: usize) -> Vec<u8> {
    let px = size as f64;
    // style transform: unit cell → pixels
    let to_pixels = |p: [f64; 2]| {
        let x = 0.5 + (p[0] - 0.5) * style.scale;
        let y = 0.5 + (p[1] - 0.5) * style.scale;
        let x = x + style.slant.tan() * (0.5 - y);
        [x * px, y * px]
    };
    let mut segments: Vec<([f64; 2], [f64; 2], f64)> = Vec::new();
    for comp in components {
        let (x0, y0, x1, y1) = comp.anchor_slot.bounds();
        for (si, stroke) in comp.strokes.iter().enumerate() {
            let key = (comp.component_id as u64) << 16 | (si as u64) << 8;
            let pts: Vec<[f64; 2]> = stroke
                .points()
                .into_iter()
                .enumerate()
                .map(|(pi, p)| {
                    let jx = style.jitter * wobble(style.jitter_seed, key | (2 * pi) as u64);
                    let jy = style.jitter * wobble(style.jitter_seed, key | (2 * pi + 1) as u64);
                    to_pixels([x0 + p[0] * (x1 - x0) + jx, y0 + p[1] * (y1 - y0) + jy])
                })
                .collect();
            for w in pts.windows(2) {
                let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
                let len = (dx * dx + dy * dy).sqrt().max(1e-9);
                // horizontal strokes are thinner by the contrast ratio
                let vertical = (dy / len).abs();
                let width = style.stroke_thickness * (style.contrast + (1.0 - style.contrast) * vertical);
                segments.push((w[0], w[1], width));
            }
        }
    }
    let mut out = vec![0u8; size * size];
    for row in 0..size {
        for col in 0..size {
            let p = [col as f64 + 0.5, row as f64 + 0.5];
            let ink = segments
                .iter()
                .map(|&(a, b, width)| (0.5 * width + 0.5 - segment_distance(p, a, b)).clamp(0.0, 1.0))
                .fold(0.0, f64::max);
            out[row * size + col] = (ink * 255.0).round() as u8;
        }
    }
    out
}
