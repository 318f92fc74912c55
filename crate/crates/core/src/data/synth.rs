//! Procedural aerial scenes.
//!
//! Tree and low vegetation are rendered by the same texture function, so a
//! single pixel carries no information about which of the two it is. Trees
//! come in clustered parks, low vegetation in long thin strips; telling them
//! apart requires looking at the surrounding region.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{RasterSample, SampleMeta};
use crate::init::derive_seed;
use crate::label::{LabelMap, BUILDING, CAR, CLUTTER, IMPERVIOUS, LOW_VEGETATION, TREE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Ground,
    Road,
    Vegetation,
    Roof { tone: [f32; 3], height: f32 },
    Car { color: [f32; 3] },
    Clutter { color: [f32; 3], height: f32 },
}

struct Canvas {
    size: usize,
    labels: Vec<u8>,
    surface: Vec<Surface>,
}

impl Canvas {
    fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, label: u8, surface: Surface) {
        let (y1, x1) = ((y0 + h).min(self.size), (x0 + w).min(self.size));
        for y in y0.min(self.size)..y1 {
            for x in x0.min(self.size)..x1 {
                let i = y * self.size + x;
                self.labels[i] = label;
                self.surface[i] = surface;
            }
        }
    }

    fn fill_disc(&mut self, cy: f64, cx: f64, r: f64, label: u8, surface: Surface) {
        let lo = |c: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + r).ceil() as usize + 1).min(self.size);
        for y in lo(cy)..hi(cy) {
            for x in lo(cx)..hi(cx) {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    let i = y * self.size + x;
                    self.labels[i] = label;
                    self.surface[i] = surface;
                }
            }
        }
    }

    fn rect_overlaps(&self, y0: usize, x0: usize, h: usize, w: usize, pred: impl Fn(Surface) -> bool) -> bool {
        (y0..(y0 + h).min(self.size))
            .any(|y| (x0..(x0 + w).min(self.size)).any(|x| pred(self.surface[y * self.size + x])))
    }
}

/// Extent proportional to the scene size, never below `min` pixels.
fn scaled(size: usize, frac: f64, min: usize) -> usize {
    ((size as f64 * frac).round() as usize).max(min).min(size)
}

fn span<R: Rng>(rng: &mut R, size: usize, lo: f64, hi: f64, min: usize) -> usize {
    let a = scaled(size, lo, min);
    let b = scaled(size, hi, min).max(a);
    rng.gen_range(a..=b)
}

fn origin<R: Rng>(rng: &mut R, size: usize, extent: usize) -> usize {
    rng.gen_range(0..=size.saturating_sub(extent))
}

/// RNG stream of scene `index` under dataset seed `seed`.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("scene-{index}")))
}

pub fn sample_id(index: usize) -> String {
    format!("{index:04}")
}

/// Generates scene `index` of the dataset with seed `seed`.
pub fn generate_scene(seed: u64, index: usize, size: usize, bands: usize) -> RasterSample {
    let mut rng = scene_rng(seed, index);
    let mut c = Canvas {
        size,
        labels: vec![IMPERVIOUS; size * size],
        surface: vec![Surface::Ground; size * size],
    };

    // Open strips of low vegetation.
    for _ in 0..rng.gen_range(2..=4) {
        let len = span(&mut rng, size, 0.45, 0.9, 8);
        let thick = span(&mut rng, size, 0.035, 0.06, 3);
        let (h, w) = if rng.gen_bool(0.5) { (thick, len) } else { (len, thick) };
        let (y, x) = (origin(&mut rng, size, h), origin(&mut rng, size, w));
        c.fill_rect(y, x, h, w, LOW_VEGETATION, Surface::Vegetation);
    }

    // Parks: clusters of overlapping tree crowns.
    for _ in 0..rng.gen_range(1..=2) {
        let extent = span(&mut rng, size, 0.18, 0.3, 10) as f64;
        let cy = rng.gen_range(extent * 0.5..=(size as f64 - extent * 0.5).max(extent * 0.5));
        let cx = rng.gen_range(extent * 0.5..=(size as f64 - extent * 0.5).max(extent * 0.5));
        for _ in 0..rng.gen_range(5..=9) {
            let r = extent * rng.gen_range(0.2..0.35);
            let oy = rng.gen_range(-0.3..0.3) * extent;
            let ox = rng.gen_range(-0.3..0.3) * extent;
            c.fill_disc(cy + oy, cx + ox, r, TREE, Surface::Vegetation);
        }
    }

    // Road corridors.
    let mut roads = Vec::new();
    for horizontal in [true, false] {
        for _ in 0..rng.gen_range(1..=2) {
            let width = span(&mut rng, size, 0.06, 0.09, 6);
            let at = origin(&mut rng, size, width);
            let (y, x, h, w) = if horizontal {
                (at, 0, width, size)
            } else {
                (0, at, size, width)
            };
            c.fill_rect(y, x, h, w, IMPERVIOUS, Surface::Road);
            roads.push((horizontal, at, width));
        }
    }

    // Buildings, kept off the roads where possible.
    for _ in 0..rng.gen_range(2..=5) {
        let (h, w) = (span(&mut rng, size, 0.1, 0.22, 6), span(&mut rng, size, 0.1, 0.22, 6));
        let tone = [
            rng.gen_range(0.62..0.78),
            rng.gen_range(0.32..0.45),
            rng.gen_range(0.28..0.40),
        ];
        let height = rng.gen_range(0.6..0.9);
        let mut placed = (origin(&mut rng, size, h), origin(&mut rng, size, w));
        for _ in 0..20 {
            if !c.rect_overlaps(placed.0, placed.1, h, w, |s| s == Surface::Road) {
                break;
            }
            placed = (origin(&mut rng, size, h), origin(&mut rng, size, w));
        }
        c.fill_rect(placed.0, placed.1, h, w, BUILDING, Surface::Roof { tone, height });
    }

    // Cars, only on roads and aligned with them.
    for _ in 0..rng.gen_range(2..=6) {
        let &(horizontal, at, width) = &roads[rng.gen_range(0..roads.len())];
        let long = scaled(size, 0.05, 6);
        let short = scaled(size, 0.025, 3).min(width);
        let lane = at + rng.gen_range(0..=width - short);
        let pos = origin(&mut rng, size, long);
        let color = [
            rng.gen_range(0.0..1.0f32).round(),
            rng.gen_range(0.0..1.0f32).round(),
            rng.gen_range(0.5..1.0),
        ];
        let (y, x, h, w) = if horizontal {
            (lane, pos, short, long)
        } else {
            (pos, lane, long, short)
        };
        c.fill_rect(y, x, h, w, CAR, Surface::Car { color });
    }

    // Sparse clutter away from roads and cars.
    for _ in 0..rng.gen_range(2..=5) {
        let e = span(&mut rng, size, 0.03, 0.06, 3);
        let color = [
            rng.gen_range(0.2..0.9),
            rng.gen_range(0.2..0.9),
            rng.gen_range(0.2..0.9),
        ];
        let height = rng.gen_range(0.0..0.4);
        let mut at = (origin(&mut rng, size, e), origin(&mut rng, size, e));
        for _ in 0..20 {
            if !c.rect_overlaps(at.0, at.1, e, e, |s| matches!(s, Surface::Road | Surface::Car { .. })) {
                break;
            }
            at = (origin(&mut rng, size, e), origin(&mut rng, size, e));
        }
        c.fill_rect(at.0, at.1, e, e, CLUTTER, Surface::Clutter { color, height });
    }

    let image = render(&c, bands, &mut rng);
    RasterSample {
        image,
        labels: LabelMap::new(size, size, c.labels).expect("scene labels"),
        meta: SampleMeta {
            id: sample_id(index),
            seed,
            size,
        },
    }
}

/// Quantises to the 8-bit grid the files store.
fn quantise(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render<R: Rng>(c: &Canvas, bands: usize, rng: &mut R) -> Tensor<f32> {
    let size = c.size;
    let plane = size * size;
    let brightness: f32 = rng.gen_range(-0.04..0.04);
    let mut data = vec![0.0f32; bands * plane];
    for (i, s) in c.surface.iter().enumerate() {
        let (rgb, elevation, grain) = match *s {
            Surface::Ground => ([0.60, 0.58, 0.55], 0.05, 0.06),
            Surface::Road => ([0.36, 0.36, 0.38], 0.02, 0.05),
            Surface::Vegetation => ([0.22, 0.48, 0.20], 0.18, 0.12),
            Surface::Roof { tone, height } => (tone, height, 0.05),
            Surface::Car { color } => (color, 0.12, 0.05),
            Surface::Clutter { color, height } => (color, height, 0.08),
        };
        for (b, base) in rgb.iter().enumerate().take(bands.min(3)) {
            let noise: f32 = rng.gen_range(-grain..grain);
            data[b * plane + i] = quantise(base + brightness + noise);
        }
        if bands > 3 {
            let noise: f32 = rng.gen_range(-0.04..0.04);
            data[3 * plane + i] = quantise(elevation + noise);
        }
    }
    Tensor::from_vec([1, bands, size, size], data).expect("scene image")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = generate_scene(7, 3, 128, 4);
        let b = generate_scene(7, 3, 128, 4);
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.labels.max_label() < 6);
        assert_ne!(a, generate_scene(7, 4, 128, 4));
    }

    #[test]
    fn values_sit_on_the_byte_grid() {
        let s = generate_scene(1, 0, 64, 3);
        for &v in s.image.data() {
            let k = (v * 255.0).round();
            assert_eq!(k / 255.0, v);
        }
    }
}
