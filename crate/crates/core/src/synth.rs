//! Procedural image corpus for desk-scale experiments.
//!
//! Ten classes: five shapes × two colour families (warm, cool) drawn over
//! smooth random backgrounds with pixel noise. A source may carry an
//! acquisition signature: a faint fixed-phase horizontal stripe pattern of
//! period four rows with a per-image random amplitude.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{RawImage, Role, SampleId, Source};
use crate::error::Result;

pub const NUM_CLASSES: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthStyle {
    /// Native side length in pixels.
    pub size: usize,
    /// Standard deviation of additive Gaussian pixel noise (pixel units in [0,1]).
    pub noise_std: f64,
    /// Upper bound of the stripe signature amplitude; 0 disables it.
    pub stripe_amplitude: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            size: 64,
            noise_std: 0.02,
            stripe_amplitude: 0.0,
        }
    }
}

impl SynthStyle {
    pub fn with_stripes(mut self, amplitude: f64) -> Self {
        self.stripe_amplitude = amplitude;
        self
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Signed distance (in pixels, negative inside) of local coordinates `(u, v)`
/// to the outline of `shape` with radius `r`.
fn shape_distance(shape: u32, u: f64, v: f64, r: f64) -> f64 {
    match shape {
        0 => (u * u + v * v).sqrt() - r,
        1 => u.abs().max(v.abs()) - 0.8 * r,
        2 => {
            let mut d = f64::MIN;
            for k in 0..3 {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                d = d.max(u * a.cos() + v * a.sin() - 0.5 * r);
            }
            d
        }
        3 => {
            let bar = |a: f64, b: f64| (a.abs() - r).max(b.abs() - 0.3 * r);
            bar(u, v).min(bar(v, u))
        }
        _ => ((u * u + v * v).sqrt() - 0.7 * r).abs() - 0.25 * r,
    }
}

/// Render one image of `class` (0..10).
pub fn render(class: u32, style: &SynthStyle, rng: &mut ChaCha8Rng) -> RawImage {
    let s = style.size;
    let sf = s as f64;
    let shape = class % 5;
    let hue = if class < 5 {
        rng.gen_range(-20.0..50.0)
    } else {
        rng.gen_range(180.0..250.0)
    };
    let fg = hsv(hue, rng.gen_range(0.6..0.95), rng.gen_range(0.65..0.95));
    let bg_a = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.0..0.35), rng.gen_range(0.15..0.75));
    let bg_b = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.0..0.35), rng.gen_range(0.15..0.75));
    let grad_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (grad_angle.cos(), grad_angle.sin());
    let wave_freq = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / sf;
    let wave_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let cx = rng.gen_range(0.3..0.7) * sf;
    let cy = rng.gen_range(0.3..0.7) * sf;
    let r = rng.gen_range(0.17..0.28) * sf;
    let rot: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (cr, sr) = (rot.cos(), rot.sin());
    let stripe = if style.stripe_amplitude > 0.0 {
        rng.gen_range(0.0..style.stripe_amplitude)
    } else {
        0.0
    };
    let noise = Normal::new(0.0, style.noise_std.max(0.0)).expect("finite noise std");

    let mut pixels = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        let py = y as f64 + 0.5;
        let stripe_sign = if y % 4 < 2 { 1.0 } else { -1.0 };
        for x in 0..s {
            let px = x as f64 + 0.5;
            let t = (((px / sf - 0.5) * gx + (py / sf - 0.5) * gy) + 0.5).clamp(0.0, 1.0);
            let wave = 0.04 * (wave_freq * (px * gy - py * gx) + wave_phase).sin();
            let (du, dv) = (px - cx, py - cy);
            let (u, v) = (cr * du + sr * dv, -sr * du + cr * dv);
            let alpha = (0.5 - shape_distance(shape, u, v, r)).clamp(0.0, 1.0);
            for ch in 0..3 {
                let bg = bg_a[ch] * (1.0 - t) + bg_b[ch] * t + wave;
                let mut val = bg * (1.0 - alpha) + fg[ch] * alpha;
                val += stripe * stripe_sign;
                if style.noise_std > 0.0 {
                    val += noise.sample(rng);
                }
                pixels.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RawImage {
        height: s,
        width: s,
        pixels,
    }
}

/// Generate `count` labelled images with ids `id_base..id_base+count`;
/// classes cycle so every class is equally represented.
pub fn generate_source(
    source_id: &str,
    role: Role,
    count: usize,
    id_base: SampleId,
    style: &SynthStyle,
    seed: u64,
) -> Result<Source> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..count)
        .map(|i| {
            let class = (i as u32) % NUM_CLASSES;
            (id_base + i as u64, Some(class), render(class, style, &mut rng))
        })
        .collect();
    Source::from_images(source_id, role, items)
}

/// Recipe for a standard desk corpus: one audited-training source carrying
/// the stripe signature and `externals` signature-free external sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub d_count: usize,
    pub external_counts: Vec<usize>,
    pub style: SynthStyle,
    pub stripe_amplitude: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            d_count: 8000,
            external_counts: vec![2000, 2000, 1000],
            style: SynthStyle::default(),
            stripe_amplitude: 0.06,
            seed: 0,
        }
    }
}

pub const D_SOURCE: &str = "train";

pub fn external_name(index: usize) -> String {
    format!("ext{}", index + 1)
}

impl CorpusSpec {
    /// Sources in order: D, then externals `ext1`, `ext2`, ... Id ranges are
    /// disjoint (source `k` uses ids starting at `k·10^9`).
    pub fn generate(&self) -> Result<Vec<Source>> {
        let mut out = Vec::with_capacity(1 + self.external_counts.len());
        let d_style = self.style.with_stripes(self.stripe_amplitude);
        out.push(generate_source(D_SOURCE, Role::AuditedTraining, self.d_count, 0, &d_style, self.seed)?);
        for (k, &n) in self.external_counts.iter().enumerate() {
            out.push(generate_source(
                &external_name(k),
                Role::External,
                n,
                (k as u64 + 1) * 1_000_000_000,
                &self.style,
                self.seed.wrapping_mul(31).wrapping_add(k as u64 + 1),
            )?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{dedup_check, resize};

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let style = SynthStyle::default();
        let a = generate_source("a", Role::External, 30, 0, &style, 4).unwrap();
        let b = generate_source("a", Role::External, 30, 0, &style, 4).unwrap();
        assert_eq!(a.images, b.images);
        let counts = a.manifest.entries.iter().filter(|e| e.class_label == Some(3)).count();
        assert_eq!(counts, 3);
    }

    #[test]
    fn stripe_signature_vanishes_at_quarter_resolution() {
        let style = SynthStyle { noise_std: 0.0, ..SynthStyle::default() };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let plain = render(2, &style, &mut r1);
        let striped = render(2, &style.with_stripes(0.06), &mut r2);
        let diff = |r: usize| {
            let a = resize(&plain.to_tensor(), r).unwrap();
            let b = resize(&striped.to_tensor(), r).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max)
        };
        // The stripe draw uses the rng after the shared draws, so both images
        // agree elsewhere; only quantisation and clamping remain at 16×16.
        assert!(diff(32) > 0.005);
        assert!(diff(16) <= 2.0 / 255.0 + 1e-6);
    }

    #[test]
    fn corpus_sources_are_disjoint() {
        let spec = CorpusSpec {
            d_count: 50,
            external_counts: vec![20, 20, 20],
            ..CorpusSpec::default()
        };
        let sources = spec.generate().unwrap();
        assert_eq!(sources.len(), 4);
        let m: Vec<_> = sources.iter().map(|s| &s.manifest).collect();
        assert!(dedup_check(&m).is_empty());
    }
}
