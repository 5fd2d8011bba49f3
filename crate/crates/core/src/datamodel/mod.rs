//! Sequences, loose RGB/event pairing, region cropping and synthetic data.

mod crop;
mod sequence;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use crop::{crop_region, CropResult};
pub use sequence::{
    load_sequence, pair_frame_with_events, parse_groundtruth, save_sequence, stacking_window, FramePair, Misalignment, RgbFrame,
    SequenceRecord, Split,
};
pub use synth::{generate_synthetic_sequence, SynthConfig};

use crate::error::Error;

/// The 17 challenge attributes a sequence may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    CameraMotion,
    Rotation,
    Deformation,
    FullOcclusion,
    LowIllumination,
    OutOfView,
    PartialOcclusion,
    ViewChange,
    ScaleVariation,
    BackgroundClutter,
    MotionBlur,
    AspectRatioChange,
    FastMotion,
    NoMotion,
    IlluminationVariation,
    OverExposure,
    BackgroundObjectMotion,
}

impl Attribute {
    pub const ALL: [Attribute; 17] = [
        Attribute::CameraMotion,
        Attribute::Rotation,
        Attribute::Deformation,
        Attribute::FullOcclusion,
        Attribute::LowIllumination,
        Attribute::OutOfView,
        Attribute::PartialOcclusion,
        Attribute::ViewChange,
        Attribute::ScaleVariation,
        Attribute::BackgroundClutter,
        Attribute::MotionBlur,
        Attribute::AspectRatioChange,
        Attribute::FastMotion,
        Attribute::NoMotion,
        Attribute::IlluminationVariation,
        Attribute::OverExposure,
        Attribute::BackgroundObjectMotion,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Attribute::CameraMotion => "CM",
            Attribute::Rotation => "ROT",
            Attribute::Deformation => "DEF",
            Attribute::FullOcclusion => "FOC",
            Attribute::LowIllumination => "LI",
            Attribute::OutOfView => "OV",
            Attribute::PartialOcclusion => "POC",
            Attribute::ViewChange => "VC",
            Attribute::ScaleVariation => "SV",
            Attribute::BackgroundClutter => "BC",
            Attribute::MotionBlur => "MB",
            Attribute::AspectRatioChange => "ARC",
            Attribute::FastMotion => "FM",
            Attribute::NoMotion => "NM",
            Attribute::IlluminationVariation => "IV",
            Attribute::OverExposure => "OE",
            Attribute::BackgroundObjectMotion => "BOM",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Attribute::ALL
            .iter()
            .copied()
            .find(|a| a.code() == s)
            .ok_or_else(|| Error::Vocabulary(s.to_string()))
    }
}
