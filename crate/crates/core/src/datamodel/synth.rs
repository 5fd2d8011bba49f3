use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sequence::{Misalignment, RgbFrame, SequenceRecord, Split};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::eventio::{Event, EventStream, Polarity};

/// Parameters of a synthetic sequence: a textured rectangle bouncing over
/// static low-contrast clutter, observed by an RGB camera and an event
/// sensor that may be offset in space and time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
    /// Event sensor resolution; zero means "same as RGB".
    pub event_width: u32,
    pub event_height: u32,
    pub object_w: f64,
    pub object_h: f64,
    /// RGB pixels per frame.
    pub speed: f64,
    /// Log-intensity contrast threshold.
    pub event_threshold: f64,
    pub misalignment: Misalignment,
    /// Std of additive per-pixel intensity noise.
    pub noise: f64,
    pub frame_interval_us: u64,
    pub subframes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 64,
            width: 256,
            height: 192,
            event_width: 0,
            event_height: 0,
            object_w: 32.0,
            object_h: 32.0,
            speed: 2.0,
            event_threshold: 0.15,
            misalignment: Misalignment { dx: 0.0, dy: 0.0, dt: 0 },
            noise: 0.0,
            frame_interval_us: 33_333,
            subframes: 4,
        }
    }
}

impl SynthConfig {
    fn event_size(&self) -> (u32, u32) {
        let w = if self.event_width == 0 { self.width } else { self.event_width };
        let h = if self.event_height == 0 { self.height } else { self.event_height };
        (w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_frames < 2 {
            return bad("n_frames must be >= 2");
        }
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive");
        }
        if !(self.object_w > 0.0 && self.object_h > 0.0)
            || self.object_w >= f64::from(self.width)
            || self.object_h >= f64::from(self.height)
        {
            return bad("object must have positive size smaller than the frame");
        }
        if !(self.speed >= 0.0) || !(self.noise >= 0.0) || !(self.event_threshold > 0.0) {
            return bad("speed and noise must be >= 0, event_threshold > 0");
        }
        if self.frame_interval_us == 0 || self.subframes == 0 {
            return bad("frame interval and subframes must be positive");
        }
        if self.event_width > u32::from(u16::MAX) || self.event_height > u32::from(u16::MAX) {
            return bad("event sensor too large");
        }
        Ok(())
    }

    /// Timestamp of RGB frame `i`; frame 0 closes the first event window.
    pub fn frame_time(&self, i: usize) -> u64 {
        (i as u64 + 1) * self.frame_interval_us
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Scene {
    waves: Vec<Wave>,
    base: [f64; 3],
    object_color: [f64; 3],
    texture_period: f64,
    size: (f64, f64),
    start: (f64, f64),
    velocity: (f64, f64),
    bounds: ((f64, f64), (f64, f64)),
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

impl Scene {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
        let waves = (0..6)
            .map(|_| Wave {
                fx: rng.random_range(0.02..0.12),
                fy: rng.random_range(0.02..0.12),
                phase: rng.random_range(0.0..TAU),
                amp: [rng.random_range(0.01..0.04), rng.random_range(0.01..0.04), rng.random_range(0.01..0.04)],
            })
            .collect();
        let margin = 2.0;
        let bounds = (
            (margin + cfg.object_w / 2.0, w - margin - cfg.object_w / 2.0),
            (margin + cfg.object_h / 2.0, h - margin - cfg.object_h / 2.0),
        );
        let start = (
            rng.random_range(bounds.0 .0..=bounds.0 .1.max(bounds.0 .0)),
            rng.random_range(bounds.1 .0..=bounds.1 .1.max(bounds.1 .0)),
        );
        let angle = rng.random_range(0.0..TAU);
        let per_us = cfg.speed / cfg.frame_interval_us as f64;
        Self {
            waves,
            base: [rng.random_range(0.35..0.5), rng.random_range(0.35..0.5), rng.random_range(0.35..0.5)],
            object_color: [rng.random_range(0.8..0.95), rng.random_range(0.15..0.35), rng.random_range(0.05..0.2)],
            texture_period: (cfg.object_w.min(cfg.object_h) / 2.0).max(2.0),
            size: (cfg.object_w, cfg.object_h),
            start,
            velocity: (per_us * angle.cos(), per_us * angle.sin()),
            bounds,
        }
    }

    fn center(&self, t_us: f64) -> (f64, f64) {
        (
            reflect(self.start.0 + self.velocity.0 * t_us, self.bounds.0 .0, self.bounds.0 .1),
            reflect(self.start.1 + self.velocity.1 * t_us, self.bounds.1 .0, self.bounds.1 .1),
        )
    }

    fn object_box(&self, t_us: f64) -> BoundingBox {
        let (cx, cy) = self.center(t_us);
        BoundingBox::from_center(cx, cy, self.size.0, self.size.1)
    }

    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = self.base;
        for wv in &self.waves {
            let s = (wv.fx * x + wv.fy * y + wv.phase).sin();
            for c in 0..3 {
                out[c] += wv.amp[c] * s;
            }
        }
        out
    }

    /// Point-symmetric about the object centre.
    fn texture(&self, u: f64, v: f64) -> f64 {
        let k = TAU / self.texture_period;
        0.75 + 0.25 * (k * u).cos() * (k * v).cos()
    }

    /// Renders at `out_w×out_h` pixels covering the RGB frame extent; object
    /// edges are area-antialiased.
    fn render(&self, cfg: &SynthConfig, t_us: f64, out_w: u32, out_h: u32) -> Vec<[f64; 3]> {
        let sx = f64::from(cfg.width) / f64::from(out_w);
        let sy = f64::from(cfg.height) / f64::from(out_h);
        let b = self.object_box(t_us);
        let (cx, cy) = b.center();
        let mut out = Vec::with_capacity((out_w * out_h) as usize);
        for py in 0..out_h {
            let (y0, y1) = (f64::from(py) * sy, f64::from(py + 1) * sy);
            let cov_y = overlap(y0, y1, b.y, b.bottom()) / sy;
            for px in 0..out_w {
                let (x0, x1) = (f64::from(px) * sx, f64::from(px + 1) * sx);
                let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                let bg = self.background(mx, my);
                let cov = cov_y * overlap(x0, x1, b.x, b.right()) / sx;
                if cov <= 0.0 {
                    out.push(bg);
                    continue;
                }
                let u = mx.clamp(b.x, b.right()) - cx;
                let v = my.clamp(b.y, b.bottom()) - cy;
                let tex = self.texture(u, v);
                let mut px_val = [0.0; 3];
                for c in 0..3 {
                    px_val[c] = cov * self.object_color[c] * tex + (1.0 - cov) * bg[c];
                }
                out.push(px_val);
            }
        }
        out
    }
}

fn luminance(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn add_noise(pixels: &mut [[f64; 3]], noise: f64, rng: &mut ChaCha8Rng) {
    if noise <= 0.0 {
        return;
    }
    let dist = Normal::new(0.0, noise).expect("noise std");
    for p in pixels.iter_mut() {
        for c in p.iter_mut() {
            *c += dist.sample(rng);
        }
    }
}

/// Renders a deterministic (per seed) synthetic sequence. Events come from a
/// per-pixel log-intensity reference: whenever the rendered log intensity
/// moves more than `event_threshold` away from it, events of the matching
/// polarity are emitted and the reference steps toward the new level.
/// Events are then shifted by the configured misalignment.
pub fn generate_synthetic_sequence(cfg: &SynthConfig, seed: u64) -> Result<SequenceRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::new(cfg, &mut rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let (ew, eh) = cfg.event_size();
    let (ex_scale, ey_scale) = (f64::from(ew) / f64::from(cfg.width), f64::from(eh) / f64::from(cfg.height));
    let shift = ((cfg.misalignment.dx * ex_scale).round() as i64, (cfg.misalignment.dy * ey_scale).round() as i64);
    let log_i = |v: f64| (v.max(0.0) + 0.01).ln();

    let mut initial = scene.render(cfg, 0.0, ew, eh);
    add_noise(&mut initial, cfg.noise, &mut noise_rng);
    let mut reference: Vec<f64> = initial.iter().map(|&p| log_i(luminance(p))).collect();

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut groundtruth = Vec::with_capacity(cfg.n_frames);
    let mut events = Vec::new();
    let thr = cfg.event_threshold;
    let sub_dt = cfg.frame_interval_us as f64 / cfg.subframes as f64;
    for i in 0..cfg.n_frames {
        let t_frame = cfg.frame_time(i);
        let t_prev = t_frame - cfg.frame_interval_us;
        for k in 1..=cfg.subframes {
            let t_render = t_prev as f64 + k as f64 * sub_dt;
            let stamp = (t_prev as f64 + (k as f64 - 0.5) * sub_dt).round() as i64 + cfg.misalignment.dt;
            let mut pixels = scene.render(cfg, t_render, ew, eh);
            add_noise(&mut pixels, cfg.noise, &mut noise_rng);
            for (idx, p) in pixels.iter().enumerate() {
                let delta = log_i(luminance(*p)) - reference[idx];
                let n = (delta.abs() / thr).floor();
                if n < 1.0 {
                    continue;
                }
                let polarity = if delta > 0.0 { Polarity::On } else { Polarity::Off };
                reference[idx] += delta.signum() * n * thr;
                let x = (idx as u32 % ew) as i64 + shift.0;
                let y = (idx as u32 / ew) as i64 + shift.1;
                if x < 0 || y < 0 || x >= i64::from(ew) || y >= i64::from(eh) || stamp < 0 {
                    continue;
                }
                for _ in 0..n as usize {
                    events.push(Event { t: stamp as u64, x: x as u16, y: y as u16, polarity });
                }
            }
        }
        let mut pixels = scene.render(cfg, t_frame as f64, cfg.width, cfg.height);
        add_noise(&mut pixels, cfg.noise, &mut noise_rng);
        let image = image::RgbImage::from_fn(cfg.width, cfg.height, |x, y| {
            let p = pixels[(y * cfg.width + x) as usize];
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(p[0]), q(p[1]), q(p[2])])
        });
        frames.push(RgbFrame { timestamp: t_frame, image });
        groundtruth.push(Some(scene.object_box(t_frame as f64)));
    }
    let mut stream = EventStream::from_events(events, ew, eh);
    stream.t_begin = 0;
    stream.t_end = stream.t_end.max(cfg.frame_time(cfg.n_frames - 1));
    Ok(SequenceRecord {
        name: format!("synth_{seed:06}"),
        frames,
        events: stream,
        groundtruth,
        attributes: BTreeSet::new(),
        split: Split::Train,
        misalignment: Some(cfg.misalignment),
    })
}
