//! Synthetic two-modality tracking data.
//!
//! Each sequence follows one rectangular target moving with a constant
//! velocity that bounces off the frame border. Every frame is assigned a
//! visibility regime: in `RgbClear` the target has contrast only in the rgb
//! frame and the thermal frame is degraded (pure noise at twice the level),
//! `TirClear` is the mirror case, and in `Both` the target is visible in both.
//! Pixel intensities are the covered area of the pixel times the target
//! amplitude, plus Gaussian noise, so box edges are rendered sub-pixel.

use ainet_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    RgbClear,
    TirClear,
    Both,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::RgbClear, Regime::TirClear, Regime::Both];

    pub fn index(self) -> usize {
        match self {
            Regime::RgbClear => 0,
            Regime::TirClear => 1,
            Regime::Both => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::RgbClear => "rgb_clear",
            Regime::TirClear => "tir_clear",
            Regime::Both => "both",
        }
    }

    fn rgb_visible(self) -> bool {
        self != Regime::TirClear
    }

    fn tir_visible(self) -> bool {
        self != Regime::RgbClear
    }
}

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(CoreError::Config(format!("degenerate box ({cx}, {cy}, {w}, {h})")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x0() >= 0.0 && self.y0() >= 0.0 && self.x1() <= width && self.y1() <= height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSample {
    pub sequence: usize,
    pub frame: usize,
    /// `[S, S]`.
    pub rgb: Tensor,
    pub tir: Tensor,
    /// `[T, T]`, the target centered.
    pub template_rgb: Tensor,
    pub template_tir: Tensor,
    pub gt_box: BBox,
    pub regime: Regime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub search_size: usize,
    pub template_size: usize,
    pub frames_per_sequence: usize,
    pub noise: f64,
    /// Target side lengths are drawn from this range.
    pub size_range: (f64, f64),
    /// Target amplitude is drawn from this range.
    pub amplitude_range: (f64, f64),
    /// Relative weights of `RgbClear`, `TirClear`, `Both`.
    pub regime_mix: [f64; 3],
}

impl DataConfig {
    pub fn new(search_size: usize, template_size: usize) -> Self {
        let s = search_size as f64;
        Self {
            search_size,
            template_size,
            frames_per_sequence: 12,
            noise: 0.25,
            size_range: (0.15 * s, 0.4 * s),
            amplitude_range: (0.8, 1.2),
            regime_mix: [1.0, 1.0, 1.0],
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        let ok = self.search_size > 0
            && self.template_size > 0
            && self.frames_per_sequence > 0
            && self.noise >= 0.0
            && lo > 0.0
            && lo <= hi
            && hi < self.search_size as f64
            && hi <= self.template_size as f64
            && self.amplitude_range.0 <= self.amplitude_range.1
            && self.regime_mix.iter().all(|&w| w >= 0.0)
            && self.regime_mix.iter().sum::<f64>() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid data config {self:?}")))
        }
    }
}

/// Adds `amplitude * covered_area` for `bbox` to `frame` (`[size, size]`).
fn paint(frame: &mut [f64], size: usize, bbox: &BBox, amplitude: f64) {
    let x_lo = bbox.x0().floor().max(0.0) as usize;
    let y_lo = bbox.y0().floor().max(0.0) as usize;
    let x_hi = (bbox.x1().ceil() as usize).min(size);
    let y_hi = (bbox.y1().ceil() as usize).min(size);
    for y in y_lo..y_hi {
        let cover_y = (bbox.y1().min(y as f64 + 1.0) - bbox.y0().max(y as f64)).max(0.0);
        for x in x_lo..x_hi {
            let cover_x = (bbox.x1().min(x as f64 + 1.0) - bbox.x0().max(x as f64)).max(0.0);
            frame[y * size + x] += amplitude * cover_x * cover_y;
        }
    }
}

fn noisy_frame(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; size * size];
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    (0..size * size).map(|_| normal.sample(rng)).collect()
}

/// Exactly proportional regime labels for `n` frames, shuffled.
fn regime_labels(n: usize, mix: &[f64; 3], rng: &mut ChaCha8Rng) -> Vec<Regime> {
    let total: f64 = mix.iter().sum();
    let mut counts: Vec<usize> = mix.iter().map(|w| (w / total * n as f64).floor() as usize).collect();
    // hand the rounding remainder out in regime order
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        if mix[k % 3] > 0.0 {
            counts[k % 3] += 1;
        }
        k += 1;
    }
    let mut labels: Vec<Regime> = Regime::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&r, &c)| std::iter::repeat_n(r, c))
        .collect();
    labels.shuffle(rng);
    labels
}

/// Deterministic in `seed`. Sequence `i` draws from its own random stream, so
/// samples do not depend on how many sequences are generated after them.
pub fn generate_dataset(seed: u64, n_sequences: usize, cfg: &DataConfig) -> Result<Vec<TrackSample>> {
    cfg.validate()?;
    let (s, t) = (cfg.search_size, cfg.template_size);
    let sf = s as f64;
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    label_rng.set_stream(u64::MAX);
    let labels = regime_labels(n_sequences * cfg.frames_per_sequence, &cfg.regime_mix, &mut label_rng);

    let mut samples = Vec::with_capacity(labels.len());
    for seq in 0..n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(seq as u64);
        let w = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let h = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let amplitude = rng.random_range(cfg.amplitude_range.0..=cfg.amplitude_range.1);
        let mut cx = rng.random_range(w / 2.0..=sf - w / 2.0);
        let mut cy = rng.random_range(h / 2.0..=sf - h / 2.0);
        let speed = 0.06 * sf;
        let (mut vx, mut vy) = (rng.random_range(-speed..=speed), rng.random_range(-speed..=speed));

        let tc = t as f64 / 2.0;
        let template_box = BBox::new(tc, tc, w, h)?;
        let mut template_rgb = noisy_frame(t, cfg.noise, &mut rng);
        let mut template_tir = noisy_frame(t, cfg.noise, &mut rng);
        paint(&mut template_rgb, t, &template_box, amplitude);
        paint(&mut template_tir, t, &template_box, amplitude);
        let template_rgb = Tensor::new(vec![t, t], template_rgb)?;
        let template_tir = Tensor::new(vec![t, t], template_tir)?;

        for frame in 0..cfg.frames_per_sequence {
            let regime = labels[seq * cfg.frames_per_sequence + frame];
            let gt_box = BBox::new(cx, cy, w, h)?;
            let degraded = 2.0 * cfg.noise;
            let mut rgb = noisy_frame(s, if regime.rgb_visible() { cfg.noise } else { degraded }, &mut rng);
            let mut tir = noisy_frame(s, if regime.tir_visible() { cfg.noise } else { degraded }, &mut rng);
            if regime.rgb_visible() {
                paint(&mut rgb, s, &gt_box, amplitude);
            }
            if regime.tir_visible() {
                paint(&mut tir, s, &gt_box, amplitude);
            }
            samples.push(TrackSample {
                sequence: seq,
                frame,
                rgb: Tensor::new(vec![s, s], rgb)?,
                tir: Tensor::new(vec![s, s], tir)?,
                template_rgb: template_rgb.clone(),
                template_tir: template_tir.clone(),
                gt_box,
                regime,
            });

            cx += vx;
            cy += vy;
            if cx - w / 2.0 < 0.0 || cx + w / 2.0 > sf {
                vx = -vx;
                cx = cx.clamp(w / 2.0, sf - w / 2.0);
            }
            if cy - h / 2.0 < 0.0 || cy + h / 2.0 > sf {
                vy = -vy;
                cy = cy.clamp(h / 2.0, sf - h / 2.0);
            }
        }
    }
    Ok(samples)
}

/// Mean inside `bbox` minus mean outside, and the standard error of that
/// difference for pure noise of level `sigma`. Pixels count as inside when
/// their centre is.
pub fn contrast(frame: &Tensor, bbox: &BBox, sigma: f64) -> (f64, f64) {
    let size = frame.shape()[1];
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (i, &v) in frame.data().iter().enumerate() {
        let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        if x > bbox.x0() && x < bbox.x1() && y > bbox.y0() && y < bbox.y1() {
            sum_in += v;
            n_in += 1;
        } else {
            sum_out += v;
            n_out += 1;
        }
    }
    let diff = sum_in / n_in.max(1) as f64 - sum_out / n_out.max(1) as f64;
    let se = sigma * (1.0 / n_in.max(1) as f64 + 1.0 / n_out.max(1) as f64).sqrt();
    (diff, se)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(5.0, 5.0, 4.0, 4.0).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        let b = BBox::new(7.0, 5.0, 4.0, 4.0).unwrap();
        assert!((a.iou(&b) - 8.0 / 24.0).abs() < 1e-15);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 1.0, 1.0).unwrap()), 0.0);
        assert!(BBox::new(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn paint_covers_box_area() {
        let mut f = vec![0.0; 100];
        let b = BBox::new(4.3, 5.1, 3.4, 2.2).unwrap();
        paint(&mut f, 10, &b, 1.0);
        assert!((f.iter().sum::<f64>() - b.area()).abs() < 1e-12);
    }

    #[test]
    fn regime_proportions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = regime_labels(301, &[1.0, 1.0, 1.0], &mut rng);
        let counts: Vec<usize> = Regime::ALL.iter().map(|r| labels.iter().filter(|l| *l == r).count()).collect();
        assert_eq!(counts, [101, 100, 100]);
    }
}
