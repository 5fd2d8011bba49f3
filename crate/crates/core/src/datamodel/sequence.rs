use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Attribute;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::eventio::{
    normalize_event_frame, parse_event_stream, resize_event_frame, slice_events, stack_events, EventFormat,
    EventFrame, EventStream,
};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Known spatial (RGB pixels) and temporal (microseconds) offset of the
/// event sensor relative to the RGB camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    pub dx: f64,
    pub dy: f64,
    pub dt: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    /// Microseconds.
    pub timestamp: u64,
    pub image: image::RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<RgbFrame>,
    pub events: EventStream,
    /// `None` marks a frame where the target is absent.
    pub groundtruth: Vec<Option<BoundingBox>>,
    pub attributes: BTreeSet<Attribute>,
    pub split: Split,
    pub misalignment: Option<Misalignment>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (u32, u32) {
        self.frames.first().map_or((0, 0), |f| f.image.dimensions())
    }

    pub fn present_frames(&self) -> Vec<usize> {
        (0..self.groundtruth.len()).filter(|&i| self.groundtruth[i].is_some()).collect()
    }

    pub fn check_integrity(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Integrity(format!("sequence {:?} has no frames", self.name)));
        }
        if self.groundtruth.len() != self.frames.len() {
            return Err(Error::Integrity(format!(
                "sequence {:?}: {} groundtruth lines for {} frames",
                self.name,
                self.groundtruth.len(),
                self.frames.len()
            )));
        }
        if self.frames.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
            return Err(Error::Integrity(format!("sequence {:?}: frame timestamps not sorted", self.name)));
        }
        self.events.validate()
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    split: Split,
    event_width: u32,
    event_height: u32,
    t_begin: u64,
    t_end: u64,
    misalignment: Option<Misalignment>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Writes the directory layout read by [`load_sequence`].
pub fn save_sequence(record: &SequenceRecord, dir: &Path) -> Result<()> {
    record.check_integrity()?;
    let rgb_dir = dir.join("rgb");
    fs::create_dir_all(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    for (i, f) in record.frames.iter().enumerate() {
        let p = rgb_dir.join(frame_file_name(i));
        f.image.save(&p).map_err(|e| Error::Image { path: p.clone(), message: e.to_string() })?;
    }
    let ts: String = record.frames.iter().map(|f| format!("{}\n", f.timestamp)).collect();
    write_file(&dir.join("timestamps.txt"), &ts)?;
    let gt: String = record
        .groundtruth
        .iter()
        .map(|b| match b {
            Some(b) => format!("{},{},{},{}\n", b.x, b.y, b.w, b.h),
            None => "nan,nan,nan,nan\n".to_string(),
        })
        .collect();
    write_file(&dir.join("groundtruth.txt"), &gt)?;
    let attrs: String = record.attributes.iter().map(|a| format!("{a}\n")).collect();
    write_file(&dir.join("attributes.txt"), &attrs)?;
    let ev_path = dir.join("events.csv");
    let file = fs::File::create(&ev_path).map_err(|e| Error::io(&ev_path, e))?;
    record.events.write_csv(BufWriter::new(file)).map_err(|e| Error::io(&ev_path, e))?;
    let meta = SequenceMeta {
        split: record.split,
        event_width: record.events.width,
        event_height: record.events.height,
        t_begin: record.events.t_begin,
        t_end: record.events.t_end,
        misalignment: record.misalignment,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_file(&dir.join("meta.json"), &(json + "\n"))
}

/// Parses `x,y,w,h` lines; rows containing `nan` are absent boxes.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<Option<BoundingBox>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let location = format!("{}:{}", path.display(), i + 1);
            let vals: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { location: location.clone(), message: e.to_string() })?;
            if vals.len() != 4 {
                return Err(Error::Parse { location, message: format!("expected 4 values, found {}", vals.len()) });
            }
            if vals.iter().any(|v| v.is_nan()) {
                return Ok(None);
            }
            Ok(Some(BoundingBox::new(vals[0], vals[1], vals[2], vals[3])))
        })
        .collect()
}

/// Reads a sequence directory: `rgb/*.png`, `timestamps.txt`,
/// `events.csv` or `events.bin`, `groundtruth.txt`, and optionally
/// `attributes.txt` and `meta.json`.
pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let ts_path = dir.join("timestamps.txt");
    let timestamps: Vec<u64> = read_file(&ts_path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u64>().map_err(|e| Error::Parse {
                location: format!("{}:{}", ts_path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    if timestamps.is_empty() {
        return Err(Error::Integrity(format!("sequence {name:?} has no frames")));
    }
    let mut frames = Vec::with_capacity(timestamps.len());
    for (i, &timestamp) in timestamps.iter().enumerate() {
        let p = dir.join("rgb").join(frame_file_name(i));
        let img = image::open(&p)
            .map_err(|e| Error::Integrity(format!("frame {i} ({}) unreadable: {e}", p.display())))?
            .to_rgb8();
        frames.push(RgbFrame { timestamp, image: img });
    }
    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = parse_groundtruth(&read_file(&gt_path)?, &gt_path)?;
    let attributes = match fs::read_to_string(dir.join("attributes.txt")) {
        Ok(text) => text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse::<Attribute>)
            .collect::<Result<BTreeSet<_>>>()?,
        Err(_) => BTreeSet::new(),
    };
    let csv = dir.join("events.csv");
    let bin = dir.join("events.bin");
    let mut events = if csv.exists() {
        let f = fs::File::open(&csv).map_err(|e| Error::io(&csv, e))?;
        parse_event_stream(f, EventFormat::Csv)?
    } else if bin.exists() {
        let f = fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?;
        parse_event_stream(f, EventFormat::Binary)?
    } else {
        EventStream::empty(0, 0)
    };
    let meta_path = dir.join("meta.json");
    let (split, misalignment) = if meta_path.exists() {
        let meta: SequenceMeta = serde_json::from_str(&read_file(&meta_path)?)
            .map_err(|e| Error::Parse { location: meta_path.display().to_string(), message: e.to_string() })?;
        events.width = meta.event_width;
        events.height = meta.event_height;
        events.t_begin = meta.t_begin;
        events.t_end = meta.t_end;
        (meta.split, meta.misalignment)
    } else {
        let (w, h) = frames[0].image.dimensions();
        events.width = events.width.max(w);
        events.height = events.height.max(h);
        events.t_begin = events.t_begin.min(frames[0].timestamp);
        events.t_end = events.t_end.max(timestamps[timestamps.len() - 1]);
        (Split::Test, None)
    };
    let record = SequenceRecord { name, frames, events, groundtruth, attributes, split, misalignment };
    record.check_integrity()?;
    Ok(record)
}

/// An RGB frame with the event frame of its stacking window, resized to the
/// RGB resolution. No spatial registration is attempted.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub rgb: Image,
    pub event_frame: EventFrame,
    pub frame_index: usize,
    pub misalignment: Option<(f64, f64)>,
}

impl FramePair {
    pub fn event_image(&self) -> Image {
        normalize_event_frame(&self.event_frame)
    }
}

/// `[t(F_{i-1}), t(F_i))`, with the stream start standing in for frame −1.
pub fn stacking_window(seq: &SequenceRecord, frame_index: usize) -> (u64, u64) {
    let end = seq.frames[frame_index].timestamp;
    let start = if frame_index == 0 { seq.events.t_begin } else { seq.frames[frame_index - 1].timestamp };
    (start.min(end), end)
}

pub fn pair_frame_with_events(seq: &SequenceRecord, frame_index: usize) -> Result<FramePair> {
    if frame_index >= seq.frames.len() {
        return Err(Error::Argument(format!("frame {frame_index} out of range for {} frames", seq.frames.len())));
    }
    let (t0, t1) = stacking_window(seq, frame_index);
    let window = slice_events(&seq.events, t0, t1)?;
    let stacked = stack_events(&window, seq.events.width.max(1), seq.events.height.max(1))?;
    let (w, h) = seq.frames[frame_index].image.dimensions();
    let event_frame = resize_event_frame(&stacked, w, h)?;
    Ok(FramePair {
        rgb: Image::from_rgb8(&seq.frames[frame_index].image),
        event_frame,
        frame_index,
        misalignment: seq.misalignment.map(|m| (m.dx, m.dy)),
    })
}
