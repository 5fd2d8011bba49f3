//! Online tracking: frozen templates from the first frame, one search per
//! frame around the previous box.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::backbone::Region;
use crate::bbox::BoundingBox;
use crate::config::{DataConfig, ModelConfig, TrackConfig};
use crate::datamodel::{crop_region, pair_frame_with_events, parse_groundtruth, FramePair, SequenceRecord};
use crate::error::{Error, Result};
use crate::head::{decode_box, ScoreMaps, WindowPenalty};
use crate::imaging::Image;
use crate::matrix::Matrix;
use crate::model::{Branch, Inputs, Model, TemplateInput};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Smallest box side the tracker emits, in pixels.
pub const MIN_SIDE: f64 = 1.0;

/// Per-sequence tracking state. Template tokens are fixed at `init`.
#[derive(Clone, Debug)]
pub struct TrackerState<T> {
    rgb_template: Matrix<T>,
    ev_template: Matrix<T>,
    template_digest: [u8; 32],
    pub previous: BoundingBox,
    pub frame_size: (usize, usize),
}

fn digest<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    for &v in a.as_slice().iter().chain(b.as_slice()) {
        h.update(v.to_f64_lossy().to_le_bytes());
    }
    h.finalize().into()
}

impl<T: Scalar> TrackerState<T> {
    /// True while the cached template tokens are unchanged since `init`.
    pub fn templates_intact(&self) -> bool {
        digest(&self.rgb_template, &self.ev_template) == self.template_digest
    }

    pub fn template_tokens(&self) -> (&Matrix<T>, &Matrix<T>) {
        (&self.rgb_template, &self.ev_template)
    }
}

/// Output of one `track` call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackOutput {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Stateless tracker over a frozen model snapshot; share it across threads
/// and keep one [`TrackerState`] per sequence.
pub struct Tracker<'m, T> {
    model: &'m Model<T>,
    data: DataConfig,
    penalty: Option<WindowPenalty>,
}

impl<'m, T: Scalar> Tracker<'m, T> {
    pub fn new(model: &'m Model<T>, data: &DataConfig, track: &TrackConfig) -> Self {
        let grid = model.net.config.search_grid();
        let penalty = track.window_penalty.then(|| WindowPenalty::hanning(grid, track.window_weight));
        Self { model, data: data.clone(), penalty }
    }

    fn model_config(&self) -> &ModelConfig {
        &self.model.net.config
    }

    pub fn init(&self, pair: &FramePair, init_box: &BoundingBox) -> Result<TrackerState<T>> {
        self.init_images(&pair.rgb, &pair.event_image(), init_box)
    }

    pub fn init_images(&self, rgb: &Image, events: &Image, init_box: &BoundingBox) -> Result<TrackerState<T>> {
        let (w, h) = (rgb.width(), rgb.height());
        let inside = init_box.x < w as f64 && init_box.y < h as f64 && init_box.right() > 0.0 && init_box.bottom() > 0.0;
        if !init_box.is_finite() || !init_box.has_positive_area() || !inside {
            return Err(Error::Argument(format!("initial box {init_box:?} is degenerate or outside the {w}x{h} frame")));
        }
        let side = self.model_config().template_size;
        let factor = self.data.template_factor;
        let net = &self.model.net;
        let rgb_t = crop_region(rgb, init_box, factor, side)?;
        let ev_t = crop_region(events, init_box, factor, side)?;
        let rgb_template = net.embed_template(&self.model.params, &rgb_t.patch, Region::RgbTemplate)?;
        let ev_template = net.embed_template(&self.model.params, &ev_t.patch, Region::EvTemplate)?;
        let template_digest = digest(&rgb_template, &ev_template);
        Ok(TrackerState { rgb_template, ev_template, template_digest, previous: *init_box, frame_size: (w, h) })
    }

    pub fn track(&self, state: &mut TrackerState<T>, pair: &FramePair) -> Result<TrackOutput> {
        self.track_images(state, &pair.rgb, &pair.event_image())
    }

    /// Searches around the previous box; always emits a box inside the frame.
    pub fn track_images(&self, state: &mut TrackerState<T>, rgb: &Image, events: &Image) -> Result<TrackOutput> {
        let cfg = self.model_config();
        let factor = self.data.search_factor;
        let rgb_s = crop_region(rgb, &state.previous, factor, cfg.search_size)?;
        let ev_s = crop_region(events, &state.previous, factor, cfg.search_size)?;
        let mut tape = Tape::with_params(&self.model.params);
        let inputs = Inputs {
            rgb_template: TemplateInput::Tokens(&state.rgb_template),
            ev_template: TemplateInput::Tokens(&state.ev_template),
            rgb_search: &rgb_s.patch,
            ev_search: &ev_s.patch,
        };
        let out = self.model.net.forward(&mut tape, &inputs, None)?;
        let maps = out.branch(Branch::Fusion).expect("fusion branch");
        let maps = ScoreMaps::from_tape(&tape, maps, cfg.search_grid());
        let (patch_box, confidence) = decode_box(&maps, self.penalty.as_ref(), cfg.patch_size);
        let (w, h) = (rgb.width() as f64, rgb.height() as f64);
        let candidate = rgb_s.to_source(&patch_box);
        let bbox = if candidate.is_finite() { candidate } else { state.previous };
        let bbox = bbox.clip_to(w, h, MIN_SIDE.min(w).min(h));
        state.previous = bbox;
        Ok(TrackOutput { bbox, confidence })
    }
}

/// Per-frame wall time. `inclusive` adds event stacking and image decoding
/// to the model time in `exclusive`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub inclusive: Duration,
    pub exclusive: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRun {
    pub trajectory: Vec<BoundingBox>,
    pub confidence: Vec<f64>,
    pub timing: Vec<FrameTiming>,
}

impl SequenceRun {
    pub fn fps(&self, inclusive: bool) -> f64 {
        let total: f64 = self
            .timing
            .iter()
            .map(|t| if inclusive { t.inclusive } else { t.exclusive }.as_secs_f64())
            .sum();
        if total > 0.0 {
            self.timing.len() as f64 / total
        } else {
            0.0
        }
    }
}

/// One-pass run: initialize on frame 0's groundtruth, then track every
/// remaining frame. The first trajectory entry is the initial box.
pub fn run_sequence<T: Scalar>(tracker: &Tracker<'_, T>, seq: &SequenceRecord) -> Result<SequenceRun> {
    let init_box = seq
        .groundtruth
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| Error::Argument(format!("sequence {:?} has no groundtruth for frame 0", seq.name)))?;
    let n = seq.len();
    let mut run = SequenceRun {
        trajectory: Vec::with_capacity(n),
        confidence: Vec::with_capacity(n),
        timing: Vec::with_capacity(n),
    };
    let load = |i: usize| -> Result<(Image, Image)> {
        let pair = pair_frame_with_events(seq, i).map_err(|e| frame_error(seq, i, e))?;
        let events = pair.event_image();
        Ok((pair.rgb, events))
    };
    let start = Instant::now();
    let (rgb, events) = load(0)?;
    let model_start = Instant::now();
    let mut state = tracker.init_images(&rgb, &events, &init_box)?;
    run.timing.push(FrameTiming { inclusive: start.elapsed(), exclusive: model_start.elapsed() });
    run.trajectory.push(init_box);
    run.confidence.push(1.0);
    for i in 1..n {
        let start = Instant::now();
        let (rgb, events) = load(i)?;
        let model_start = Instant::now();
        let out = tracker.track_images(&mut state, &rgb, &events).map_err(|e| frame_error(seq, i, e))?;
        run.timing.push(FrameTiming { inclusive: start.elapsed(), exclusive: model_start.elapsed() });
        run.trajectory.push(out.bbox);
        run.confidence.push(out.confidence);
    }
    debug_assert!(state.templates_intact());
    Ok(run)
}

fn frame_error(seq: &SequenceRecord, i: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("sequence {:?} frame {i}: {m}", seq.name)),
        Error::Io { .. } | Error::Image { .. } => e,
        other => Error::Format(format!("sequence {:?} frame {i}: {other}", seq.name)),
    }
}

/// Runs several sequences on up to `workers` threads sharing one model.
/// Results keep the input order.
pub fn run_sequences<T: Scalar + Send + Sync>(
    tracker: &Tracker<'_, T>,
    seqs: &[SequenceRecord],
    workers: usize,
) -> Vec<Result<SequenceRun>> {
    let workers = workers.clamp(1, seqs.len().max(1));
    if workers == 1 {
        return seqs.iter().map(|s| run_sequence(tracker, s)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SequenceRun>>> = (0..seqs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seqs.len() {
                    break;
                }
                let r = run_sequence(tracker, &seqs[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every sequence ran")).collect()
}

/// `x,y,w,h` per line, the groundtruth format.
pub fn format_trajectory(boxes: &[BoundingBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    s
}

pub fn write_trajectory(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    std::fs::write(path, format_trajectory(boxes)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_groundtruth(&text, path)?
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.ok_or_else(|| Error::Format(format!("{}: frame {i} has no box", path.display()))))
        .collect()
}

/// Sidecar timing file: `frame,inclusive_ms,exclusive_ms`.
pub fn write_timing(path: &Path, timing: &[FrameTiming]) -> Result<()> {
    let mut s = String::from("frame,inclusive_ms,exclusive_ms\n");
    for (i, t) in timing.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.3},{:.3}", t.inclusive.as_secs_f64() * 1e3, t.exclusive.as_secs_f64() * 1e3);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, Variant};
    use crate::datamodel::{generate_synthetic_sequence, SynthConfig};

    fn tiny(variant: Variant) -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            patch_size: 8,
            mlp_ratio: 2.0,
            elim_blocks: vec![],
            template_size: 16,
            search_size: 32,
            uncert_heads: 2,
            head_channels: 4,
            variant,
            ..ModelConfig::default()
        };
        c
    }

    fn seq(n: usize) -> SequenceRecord {
        let cfg = SynthConfig { n_frames: n, width: 64, height: 48, object_w: 12.0, object_h: 10.0, ..SynthConfig::default() };
        generate_synthetic_sequence(&cfg, 4).unwrap()
    }

    #[test]
    fn one_box_per_frame_starting_with_init() {
        let c = tiny(Variant::Full);
        let model = Model::<f32>::init(&c.model, 0).unwrap();
        let tracker = Tracker::new(&model, &c.data, &c.track);
        let s = seq(5);
        let run = run_sequence(&tracker, &s).unwrap();
        assert_eq!(run.trajectory.len(), 5);
        assert_eq!(run.timing.len(), 5);
        assert_eq!(run.trajectory[0], s.groundtruth[0].unwrap());
        for b in &run.trajectory[1..] {
            assert!(b.has_positive_area());
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 64.0 && b.bottom() <= 48.0);
        }
        assert!(run.timing.iter().all(|t| t.inclusive >= t.exclusive));
        let again = run_sequence(&tracker, &s).unwrap();
        assert_eq!(run.trajectory, again.trajectory);
    }

    #[test]
    fn degenerate_init_is_rejected() {
        let c = tiny(Variant::Full);
        let model = Model::<f64>::init(&c.model, 0).unwrap();
        let tracker = Tracker::new(&model, &c.data, &c.track);
        let img = Image::zeros(20, 20);
        for b in [BoundingBox::new(2.0, 2.0, 0.0, 5.0), BoundingBox::new(30.0, 2.0, 4.0, 4.0)] {
            assert!(matches!(tracker.init_images(&img, &img, &b), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn empty_event_frame_still_initializes() {
        let c = tiny(Variant::Baseline);
        let model = Model::<f64>::init(&c.model, 0).unwrap();
        let tracker = Tracker::new(&model, &c.data, &c.track);
        let rgb = Image::zeros(40, 40);
        let mut st = tracker.init_images(&rgb, &Image::zeros(40, 40), &BoundingBox::new(10.0, 10.0, 8.0, 8.0)).unwrap();
        let out = tracker.track_images(&mut st, &rgb, &Image::zeros(40, 40)).unwrap();
        assert!(out.bbox.has_positive_area());
        assert!(st.templates_intact());
    }

    #[test]
    fn border_boxes_are_clipped() {
        let c = tiny(Variant::Full);
        let model = Model::<f64>::init(&c.model, 1).unwrap();
        let tracker = Tracker::new(&model, &c.data, &c.track);
        let img = Image::zeros(30, 30);
        let mut st = tracker.init_images(&img, &img, &BoundingBox::new(0.0, 0.0, 6.0, 6.0)).unwrap();
        for _ in 0..3 {
            let b = tracker.track_images(&mut st, &img, &img).unwrap().bbox;
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 30.0 && b.bottom() <= 30.0 && b.has_positive_area());
        }
    }

    #[test]
    fn trajectory_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        let boxes = vec![BoundingBox::new(1.5, 2.0, 3.25, 4.0), BoundingBox::new(0.1, 0.2, 0.3, 0.4)];
        write_trajectory(&p, &boxes).unwrap();
        assert_eq!(read_trajectory(&p).unwrap(), boxes);
        write_timing(&dir.path().join("t.timing.csv"), &[FrameTiming::default()]).unwrap();
    }

    #[test]
    fn parallel_runs_match_serial() {
        let c = tiny(Variant::Full);
        let model = Model::<f32>::init(&c.model, 2).unwrap();
        let tracker = Tracker::new(&model, &c.data, &c.track);
        let seqs = vec![seq(3), seq(4), seq(2)];
        let serial = run_sequences(&tracker, &seqs, 1);
        let parallel = run_sequences(&tracker, &seqs, 3);
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.as_ref().unwrap().trajectory, b.as_ref().unwrap().trajectory);
        }
    }
}
