//! Procedurally generated image-caption fixtures.
//!
//! Item `i` draws one of 64 combinations of color × shape × background
//! (`i mod 64`): a centered object on a tinted, lightly noised background,
//! captioned `"a {color} {shape} on a {background} background"`. The
//! `variant` seeds the noise so different variants show the same scenes with
//! different pixels.

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::batch::ImageBatch;
use crate::error::Result;
use crate::rng;

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
];
pub const SHAPES: [&str; 4] = ["square", "dot", "striped square", "checkered square"];
pub const BACKGROUNDS: [(&str, [f64; 3]); 4] = [
    ("gray", [0.4, 0.4, 0.4]),
    ("black", [0.02, 0.02, 0.02]),
    ("white", [0.75, 0.75, 0.8]),
    ("purple", [0.4, 0.1, 0.45]),
];
pub const COMBINATIONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scene {
    pub color: usize,
    pub shape: usize,
    pub background: usize,
}

impl Scene {
    pub fn of(i: usize) -> Self {
        let c = i % COMBINATIONS;
        Self {
            color: c / 16,
            shape: (c / 4) % 4,
            background: c % 4,
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} on a {} background",
            COLORS[self.color].0, SHAPES[self.shape], BACKGROUNDS[self.background].0
        )
    }

    fn covers(&self, y: f64, x: f64) -> bool {
        // (y, x) relative to the image, in [0, 1).
        let (cy, cx) = (y - 0.5, x - 0.5);
        let (ay, ax) = (cy.abs(), cx.abs());
        // Shapes differ in pixel content within a patch, not only in layout.
        let inner = ay < 0.4 && ax < 0.4;
        match self.shape {
            0 => inner,
            1 => ay < 0.17 && ax < 0.17,
            2 => inner && (y * 16.0).floor() as i64 % 2 == 0,
            _ => inner && ((y * 8.0).floor() as i64 + (x * 8.0).floor() as i64) % 2 == 0,
        }
    }

    /// `[3, size, size]` pixels in `[0, 1]`.
    pub fn render(&self, size: usize, noise_seed: u64) -> Array3<f64> {
        let mut r = rng::stream(noise_seed, &[]);
        let col = COLORS[self.color].1;
        let bg = BACKGROUNDS[self.background].1;
        let mut img = Array3::<f64>::zeros((3, size, size));
        let step = 1.0 / size as f64;
        for y in 0..size {
            for x in 0..size {
                let inside = self.covers((y as f64 + 0.5) * step, (x as f64 + 0.5) * step);
                for c in 0..3 {
                    let base = if inside { col[c] } else { bg[c] };
                    let n: f64 = r.random_range(-0.05..0.05);
                    img[[c, y, x]] = (base + n).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

pub fn captions(n: usize) -> Vec<String> {
    (0..n).map(|i| Scene::of(i).caption()).collect()
}

pub fn images(n: usize, size: usize, variant: u64) -> Result<ImageBatch> {
    let mut out = Array4::<f64>::zeros((n, 3, size, size));
    for i in 0..n {
        let img = Scene::of(i).render(size, rng::derive(variant, &[i as u64]));
        out.index_axis_mut(ndarray::Axis(0), i).assign(&img);
    }
    ImageBatch::new(out)
}

/// Parses `synthetic:<n>` or `synthetic:<n>:<variant>`.
pub fn parse_source(source: &str) -> Option<(usize, Option<u64>)> {
    let rest = source.strip_prefix("synthetic:")?;
    let mut parts = rest.split(':');
    let n = parts.next()?.parse().ok()?;
    let variant = match parts.next() {
        Some(v) => Some(v.parse().ok()?),
        None => None,
    };
    if parts.next().is_some() {
        return None;
    }
    Some((n, variant))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_cover_all_combinations() {
        let caps = captions(64);
        let mut uniq = caps.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 64);
        assert_eq!(caps[0], "a red square on a gray background");
        assert_eq!(Scene::of(64), Scene::of(0));
    }

    #[test]
    fn rendering_is_deterministic_and_colored() {
        let a = images(8, 32, 1).unwrap();
        assert_eq!(a, images(8, 32, 1).unwrap());
        assert_ne!(a, images(8, 32, 2).unwrap());
        // Scene 0: red square on gray.
        assert!(a.pixels[[0, 0, 16, 16]] > 0.8 && a.pixels[[0, 1, 16, 16]] < 0.2);
        assert!((a.pixels[[0, 1, 0, 0]] - 0.4).abs() < 0.06);
    }

    #[test]
    fn source_parsing() {
        assert_eq!(parse_source("synthetic:64"), Some((64, None)));
        assert_eq!(parse_source("synthetic:10:3"), Some((10, Some(3))));
        assert_eq!(parse_source("synthetic:x"), None);
        assert_eq!(parse_source("data.jsonl"), None);
    }
}
