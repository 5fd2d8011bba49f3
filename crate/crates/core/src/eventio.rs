//! Event stream parsing, time slicing and stacking into count frames.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::imaging::{resample_plane, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    /// Accepts both the signed (+1/−1) and the binary (1/0) encodings.
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(Polarity::On),
            -1 | 0 => Some(Polarity::Off),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u32,
    pub height: u32,
    pub t_begin: u64,
    pub t_end: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    /// Header-less `t,x,y,p` lines.
    Csv,
    /// Little-endian `(u64 t, u16 x, u16 y, i8 p)` records, 13 bytes each.
    Binary,
}

const BINARY_RECORD: usize = 13;

impl EventStream {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { events: Vec::new(), width, height, t_begin: 0, t_end: 0 }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Builds a stream from unsorted events; the sort is stable.
    pub fn from_events(mut events: Vec<Event>, width: u32, height: u32) -> Self {
        events.sort_by_key(|e| e.t);
        let t_begin = events.first().map_or(0, |e| e.t);
        let t_end = events.last().map_or(0, |e| e.t);
        Self { events, width, height, t_begin, t_end }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if u32::from(e.x) >= self.width || u32::from(e.y) >= self.height {
                return Err(Error::OutOfRange { index: i, x: e.x.into(), y: e.y.into(), width: self.width, height: self.height });
            }
            if e.t < self.t_begin || e.t > self.t_end {
                return Err(Error::Integrity(format!("event {i} timestamp {} outside [{}, {}]", e.t, self.t_begin, self.t_end)));
            }
            if i > 0 && self.events[i - 1].t > e.t {
                return Err(Error::Integrity(format!("event {i} out of timestamp order")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.polarity.sign())?;
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            w.write_all(&e.t.to_le_bytes())?;
            w.write_all(&e.x.to_le_bytes())?;
            w.write_all(&e.y.to_le_bytes())?;
            w.write_all(&e.polarity.sign().to_le_bytes())?;
        }
        Ok(())
    }
}

/// Decodes a stream; sensor size is the bounding extent of the events and the
/// time range spans the first to last timestamp (all zero when empty).
pub fn parse_event_stream<R: Read>(source: R, format: EventFormat) -> Result<EventStream> {
    let events = match format {
        EventFormat::Csv => parse_csv(source)?,
        EventFormat::Binary => parse_binary(source)?,
    };
    let width = events.iter().map(|e| u32::from(e.x) + 1).max().unwrap_or(0);
    let height = events.iter().map(|e| u32::from(e.y) + 1).max().unwrap_or(0);
    Ok(EventStream::from_events(events, width, height))
}

fn parse_csv<R: Read>(source: R) -> Result<Vec<Event>> {
    let reader = std::io::BufReader::new(source);
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let location = format!("line {}", lineno + 1);
        let line = line.map_err(|e| Error::Parse { location: location.clone(), message: e.to_string() })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse { location, message: format!("expected 4 fields, found {}", fields.len()) });
        }
        let bad = |what: &str| Error::Parse { location: location.clone(), message: format!("invalid {what}") };
        let t: u64 = fields[0].parse().map_err(|_| bad("timestamp"))?;
        let x: u16 = fields[1].parse().map_err(|_| bad("x"))?;
        let y: u16 = fields[2].parse().map_err(|_| bad("y"))?;
        let code: i64 = fields[3].parse().map_err(|_| bad("polarity"))?;
        let polarity = Polarity::from_code(code)
            .ok_or_else(|| Error::Format(format!("{location}: polarity {code} not in {{1, -1, 0}}")))?;
        events.push(Event { t, x, y, polarity });
    }
    Ok(events)
}

fn parse_binary<R: Read>(mut source: R) -> Result<Vec<Event>> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Parse { location: "offset 0".into(), message: e.to_string() })?;
    if bytes.len() % BINARY_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % BINARY_RECORD;
        return Err(Error::Parse { location: format!("offset {offset}"), message: "truncated record".into() });
    }
    bytes
        .chunks_exact(BINARY_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
            let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
            let code = i8::from_le_bytes([rec[12]]);
            let polarity = Polarity::from_code(code.into()).ok_or_else(|| {
                Error::Format(format!("offset {}: polarity {code} not in {{1, -1, 0}}", i * BINARY_RECORD + 12))
            })?;
            Ok(Event { t, x, y, polarity })
        })
        .collect()
}

/// Events with `t0 <= t < t1`.
pub fn slice_events(stream: &EventStream, t0: u64, t1: u64) -> Result<EventStream> {
    if t0 > t1 {
        return Err(Error::Argument(format!("slice bounds reversed: {t0} > {t1}")));
    }
    let lo = stream.events.partition_point(|e| e.t < t0);
    let hi = stream.events.partition_point(|e| e.t < t1);
    Ok(EventStream {
        events: stream.events[lo..hi.max(lo)].to_vec(),
        width: stream.width,
        height: stream.height,
        t_begin: t0,
        t_end: t1,
    })
}

/// Per-pixel ON/OFF counts over a time window.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    pub width: u32,
    pub height: u32,
    pub on: Vec<f32>,
    pub off: Vec<f32>,
    pub t_start: u64,
    pub t_end: u64,
}

impl EventFrame {
    pub fn zeros(width: u32, height: u32, t_start: u64, t_end: u64) -> Self {
        let n = (width * height) as usize;
        Self { width, height, on: vec![0.0; n], off: vec![0.0; n], t_start, t_end }
    }

    pub fn on_at(&self, x: u32, y: u32) -> f32 {
        self.on[(y * self.width + x) as usize]
    }

    pub fn off_at(&self, x: u32, y: u32) -> f32 {
        self.off[(y * self.width + x) as usize]
    }

    pub fn total(&self) -> f64 {
        self.on.iter().chain(&self.off).map(|&v| f64::from(v)).sum()
    }
}

pub fn stack_events(stream: &EventStream, width: u32, height: u32) -> Result<EventFrame> {
    let mut frame = EventFrame::zeros(width, height, stream.t_begin, stream.t_end);
    for (index, e) in stream.events.iter().enumerate() {
        let (x, y) = (u32::from(e.x), u32::from(e.y));
        if x >= width || y >= height {
            return Err(Error::OutOfRange { index, x, y, width, height });
        }
        let i = (y * width + x) as usize;
        match e.polarity {
            Polarity::On => frame.on[i] += 1.0,
            Polarity::Off => frame.off[i] += 1.0,
        }
    }
    Ok(frame)
}

/// Bilinear resampling of both channels.
pub fn resize_event_frame(frame: &EventFrame, target_w: u32, target_h: u32) -> Result<EventFrame> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Argument(format!("resize target {target_w}x{target_h} must be positive")));
    }
    if (target_w, target_h) == (frame.width, frame.height) {
        return Ok(frame.clone());
    }
    let (sw, sh, tw, th) = (frame.width as usize, frame.height as usize, target_w as usize, target_h as usize);
    Ok(EventFrame {
        width: target_w,
        height: target_h,
        on: resample_plane(&frame.on, sw, sh, tw, th),
        off: resample_plane(&frame.off, sw, sh, tw, th),
        t_start: frame.t_start,
        t_end: frame.t_end,
    })
}

/// Three channels in `[0, 1]`: ON, OFF and ON+OFF, each divided by its maximum.
pub fn normalize_event_frame(frame: &EventFrame) -> Image {
    let n = frame.on.len();
    let both: Vec<f32> = frame.on.iter().zip(&frame.off).map(|(a, b)| a + b).collect();
    let mut data = Vec::with_capacity(3 * n);
    for plane in [&frame.on, &frame.off, &both] {
        let max = plane.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            data.extend(plane.iter().map(|&v| (v / max).clamp(0.0, 1.0)));
        } else {
            data.extend(std::iter::repeat(0.0).take(n));
        }
    }
    Image::from_planes(frame.width as usize, frame.height as usize, data)
}
