//! Desk-scale synthetic rain.
//!
//! Rain is composited additively onto a clean background (`X = clip(B + R)`)
//! where `R` is a set of anti-aliased streaks. Shifting the angle range between
//! two generators gives a controllable synthetic/"real" domain gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyRainConfig {
    pub image_size: usize,
    pub streak_count: usize,
    /// Degrees from vertical.
    pub angle_range: [f64; 2],
    pub streak_length: [f64; 2],
    pub streak_intensity: [f64; 2],
    pub seed: u64,
}

impl Default for ToyRainConfig {
    fn default() -> Self {
        Self::synthetic(64, 0)
    }
}

impl ToyRainConfig {
    /// Near-vertical streaks.
    pub fn synthetic(image_size: usize, seed: u64) -> Self {
        Self {
            image_size,
            streak_count: 20,
            angle_range: [-10.0, 10.0],
            streak_length: [10.0, 20.0],
            streak_intensity: [0.3, 0.6],
            seed,
        }
    }

    /// Same density, slanted streaks: the "real" side of the toy domain gap.
    pub fn pseudo_real(image_size: usize, seed: u64) -> Self {
        Self {
            angle_range: [20.0, 40.0],
            ..Self::synthetic(image_size, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("angle_range", self.angle_range),
            ("streak_length", self.streak_length),
            ("streak_intensity", self.streak_intensity),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name}: need lo <= hi, got [{lo}, {hi}]")));
            }
        }
        let [lo, hi] = self.streak_intensity;
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Config(format!(
                "streak_intensity must lie in [0, 1], got [{lo}, {hi}]"
            )));
        }
        if self.streak_length[0] < 0.0 {
            return Err(Error::Config("streak_length must be non-negative".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One rain streak: a line segment with a constant intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Streak {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub intensity: f64,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws `cfg.streak_count` streaks with centres uniform over a `height x width` canvas.
pub fn sample_streaks(cfg: &ToyRainConfig, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<Streak> {
    (0..cfg.streak_count)
        .map(|_| {
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let angle = uniform(rng, cfg.angle_range).to_radians();
            let half = 0.5 * uniform(rng, cfg.streak_length);
            let intensity = uniform(rng, cfg.streak_intensity);
            let (dx, dy) = (half * angle.sin(), half * angle.cos());
            Streak {
                x0: cx - dx,
                y0: cy - dy,
                x1: cx + dx,
                y1: cy + dy,
                intensity,
            }
        })
        .collect()
}

fn segment_distance(px: f64, py: f64, s: &Streak) -> f64 {
    let (vx, vy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - s.x0) * vx + (py - s.y0) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (s.x0 + t * vx - px, s.y0 + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Renders streaks into a single-channel layer.
///
/// Coverage falls off linearly over one pixel from the segment (`1 - d`), so each
/// streak is roughly two pixels wide; overlapping streaks add and saturate at 1.
pub fn render_streaks(streaks: &[Streak], height: usize, width: usize) -> Result<ImageTensor> {
    let mut layer = vec![0.0f64; height * width];
    for s in streaks {
        let x_lo = (s.x0.min(s.x1) - 1.5).floor().max(0.0) as usize;
        let x_hi = ((s.x0.max(s.x1) + 1.5).ceil().max(0.0) as usize).min(width);
        let y_lo = (s.y0.min(s.y1) - 1.5).floor().max(0.0) as usize;
        let y_hi = ((s.y0.max(s.y1) + 1.5).ceil().max(0.0) as usize).min(height);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, s);
                let coverage = (1.0 - d).max(0.0);
                if coverage > 0.0 {
                    layer[y * width + x] += s.intensity * coverage;
                }
            }
        }
    }
    ImageTensor::new(1, height, width, layer.into_iter().map(|v| v.min(1.0) as f32).collect())
}

/// Composites seeded rain onto `clean`, returning `(rainy, streak layer)`.
pub fn generate_toy_rain(cfg: &ToyRainConfig, clean: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
    cfg.validate()?;
    if clean.channels() != 3 {
        return Err(Error::InvalidImage(format!(
            "toy rain needs a 3-channel background, got {}",
            clean.channels()
        )));
    }
    let (h, w) = (clean.height(), clean.width());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let streaks = sample_streaks(cfg, h, w, &mut rng);
    let layer = render_streaks(&streaks, h, w)?;
    let rainy = ImageTensor::from_fn(3, h, w, |c, y, x| clean.get(c, y, x) + layer.get(0, y, x))?;
    Ok((rainy, layer))
}

/// A smooth procedural scene: a two-colour gradient with a few soft blobs and bars.
pub fn toy_background(size: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_6772_6f75);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.random_range(0.05..0.6),
            rng.random_range(0.05..0.6),
            rng.random_range(0.05..0.6),
        ]
    };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let blobs: Vec<_> = (0..4)
        .map(|_| {
            let c = color(&mut rng);
            let cx = rng.random_range(0.0..size as f64);
            let cy = rng.random_range(0.0..size as f64);
            let r = rng.random_range(0.1..0.35) * size as f64;
            (c, cx, cy, r)
        })
        .collect();
    let bar_x = rng.random_range(0.0..size as f64);
    let bar_w = rng.random_range(0.05..0.2) * size as f64;
    let bar_c = color(&mut rng);
    let s = size as f64;
    ImageTensor::from_fn(3, size, size, |c, y, x| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = fy / s;
        let mut v = top[c] * (1.0 - t) + bottom[c] * t;
        for (bc, cx, cy, r) in &blobs {
            let d2 = ((fx - cx).powi(2) + (fy - cy).powi(2)) / (r * r);
            let a = (-d2).exp();
            v = v * (1.0 - a) + bc[c] * a;
        }
        let edge = ((fx - bar_x).abs() - bar_w).max(0.0);
        let a = (-edge * 0.8).exp() * 0.8;
        v = v * (1.0 - a) + bar_c[c] * a;
        v.clamp(0.0, 0.8) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn background() -> ImageTensor {
        toy_background(64, 3).unwrap()
    }

    #[test]
    fn zero_streaks_leave_the_image_untouched() {
        let cfg = ToyRainConfig {
            streak_count: 0,
            ..ToyRainConfig::synthetic(64, 1)
        };
        let clean = background();
        let (rainy, layer) = generate_toy_rain(&cfg, &clean).unwrap();
        assert_eq!(rainy, clean);
        assert!(layer.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = ToyRainConfig::synthetic(64, 42);
        let clean = background();
        let a = generate_toy_rain(&cfg, &clean).unwrap();
        let b = generate_toy_rain(&cfg, &clean).unwrap();
        assert_eq!(a, b);
        let other = generate_toy_rain(&ToyRainConfig { seed: 43, ..cfg }, &clean).unwrap();
        assert_ne!(a.1, other.1);
    }

    #[test]
    fn rain_is_additive() {
        let clean = background();
        for seed in 0..10 {
            let (rainy, layer) = generate_toy_rain(&ToyRainConfig::synthetic(64, seed), &clean).unwrap();
            for c in 0..3 {
                for y in 0..64 {
                    for x in 0..64 {
                        let expected = (clean.get(c, y, x) + layer.get(0, y, x)).min(1.0);
                        assert_eq!(rainy.get(c, y, x), expected);
                        assert!(rainy.get(c, y, x) >= clean.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut cfg = ToyRainConfig::synthetic(64, 0);
        cfg.angle_range = [10.0, -10.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ToyRainConfig::synthetic(64, 0);
        cfg.streak_intensity = [0.5, 1.2];
        assert!(cfg.validate().is_err());
    }

    /// Independent estimate of the covered fraction: draw segments with the same
    /// distributions from a separate generator and count pixels whose centre lies
    /// strictly within one pixel of any segment, by scanning the whole canvas.
    fn brute_force_covered_fraction(cfg: &ToyRainConfig, size: usize, trials: u64) -> f64 {
        let mut total = 0.0;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + t);
            let mut segs = Vec::new();
            for _ in 0..cfg.streak_count {
                let cx: f64 = rng.random_range(0.0..size as f64);
                let cy: f64 = rng.random_range(0.0..size as f64);
                let a: f64 = rng.random_range(cfg.angle_range[0]..cfg.angle_range[1]).to_radians();
                let l: f64 = rng.random_range(cfg.streak_length[0]..cfg.streak_length[1]);
                segs.push((cx, cy, a, l));
            }
            let mut covered = 0usize;
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let hit = segs.iter().any(|&(cx, cy, a, l)| {
                        // project onto the streak axis, clamp to the half-length
                        let (ux, uy) = (a.sin(), a.cos());
                        let along = ((px - cx) * ux + (py - cy) * uy).clamp(-l / 2.0, l / 2.0);
                        let (qx, qy) = (cx + along * ux, cy + along * uy);
                        (px - qx).hypot(py - qy) < 1.0
                    });
                    covered += usize::from(hit);
                }
            }
            total += covered as f64 / (size * size) as f64;
        }
        total / trials as f64
    }

    #[test]
    fn covered_fraction_matches_rasterization_count() {
        let size = 64;
        let base = ToyRainConfig {
            streak_count: 20,
            streak_length: [10.0, 20.0],
            ..ToyRainConfig::synthetic(size, 0)
        };
        let expected = brute_force_covered_fraction(&base, size, 100);
        let clean = ImageTensor::filled(3, size, size, 0.2).unwrap();
        let mut measured = 0.0;
        for seed in 0..100 {
            let cfg = ToyRainConfig { seed, ..base.clone() };
            let (_, layer) = generate_toy_rain(&cfg, &clean).unwrap();
            let nz = layer.data().iter().filter(|&&v| v > 0.0).count();
            measured += nz as f64 / (size * size) as f64;
        }
        measured /= 100.0;
        assert!(
            measured >= 0.2 * expected && measured <= 3.0 * expected,
            "measured {measured}, expected {expected}"
        );
    }
}
