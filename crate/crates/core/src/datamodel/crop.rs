use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};

/// A square resampled crop plus the similarity transform back to the source.
#[derive(Clone, Debug, PartialEq)]
pub struct CropResult {
    pub patch: Image,
    /// Patch pixels per source pixel.
    pub scale: f64,
    /// Source coordinates of the patch's top-left corner.
    pub crop_origin: (f64, f64),
    pub target_in_patch: BoundingBox,
}

impl CropResult {
    pub fn to_source(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            b.x / self.scale + self.crop_origin.0,
            b.y / self.scale + self.crop_origin.1,
            b.w / self.scale,
            b.h / self.scale,
        )
    }

    pub fn to_patch(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            (b.x - self.crop_origin.0) * self.scale,
            (b.y - self.crop_origin.1) * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }
}

/// Square crop of side `context_factor·sqrt(w·h)` centred on `region`,
/// resampled to `out_side`; samples falling outside the image take the
/// per-channel mean.
pub fn crop_region(image: &Image, region: &BoundingBox, context_factor: f64, out_side: usize) -> Result<CropResult> {
    if !region.has_positive_area() {
        return Err(Error::Argument(format!("degenerate crop box {region:?}")));
    }
    if !(context_factor >= 1.0) {
        return Err(Error::Argument(format!("context factor {context_factor} must be >= 1")));
    }
    if out_side == 0 {
        return Err(Error::Argument("crop output side must be positive".into()));
    }
    let side = context_factor * (region.w * region.h).sqrt();
    let (cx, cy) = region.center();
    let origin = (cx - side / 2.0, cy - side / 2.0);
    let scale = out_side as f64 / side;
    let means = image.channel_means();
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut patch = Image::zeros(out_side, out_side);
    for v in 0..out_side {
        // continuous source coordinate of the patch pixel centre
        let sy = origin.1 + (v as f64 + 0.5) / scale;
        for u in 0..out_side {
            let sx = origin.0 + (u as f64 + 0.5) / scale;
            let inside = sx >= 0.0 && sx < w && sy >= 0.0 && sy < h;
            for (c, &mean) in means.iter().enumerate().take(CHANNELS) {
                let val = if inside { image.sample(c, sx - 0.5, sy - 0.5) } else { mean };
                patch.set(c, u, v, val);
            }
        }
    }
    let mut out = CropResult { patch, scale, crop_origin: origin, target_in_patch: *region };
    out.target_in_patch = out.to_patch(region);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(0, x, y, x as f32 / w as f32);
                img.set(1, x, y, y as f32 / h as f32);
                img.set(2, x, y, 0.5);
            }
        }
        img
    }

    #[test]
    fn centred_crop_geometry() {
        let img = gradient_image(400, 300);
        let b = BoundingBox::new(180.0, 130.0, 40.0, 40.0);
        let c = crop_region(&img, &b, 2.0, 96).unwrap();
        assert!((80.0 * c.scale - 96.0).abs() < 1e-9);
        let (tcx, tcy) = c.target_in_patch.center();
        assert!((tcx - 48.0).abs() < 1e-9 && (tcy - 48.0).abs() < 1e-9);
        let tight = crop_region(&img, &b, 1.0, 40).unwrap();
        assert!((tight.target_in_patch.x).abs() < 1e-9 && (tight.target_in_patch.w - 40.0).abs() < 1e-9);
    }

    #[test]
    fn corner_crop_pads_with_mean() {
        let img = gradient_image(100, 80);
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let c = crop_region(&img, &b, 4.0, 40).unwrap();
        let means = img.channel_means();
        assert_eq!(c.patch.get(0, 0, 0), means[0]);
        assert_eq!(c.patch.get(1, 2, 3), means[1]);
        let back = c.to_source(&c.target_in_patch);
        assert!((back.x - b.x).abs() < 0.5 && (back.w - b.w).abs() < 0.5);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let img = gradient_image(10, 10);
        let z = BoundingBox::new(1.0, 1.0, 0.0, 3.0);
        assert!(matches!(crop_region(&img, &z, 2.0, 8), Err(Error::Argument(_))));
        let b = BoundingBox::new(1.0, 1.0, 2.0, 3.0);
        assert!(matches!(crop_region(&img, &b, 0.5, 8), Err(Error::Argument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn inverse_mapping_recovers_source_box(
            x in -20.0..120.0f64, y in -20.0..90.0f64, w in 1.0..60.0f64, h in 1.0..60.0f64,
            factor in 1.0..5.0f64, side in 8usize..64,
        ) {
            let img = Image::zeros(4, 4);
            let b = BoundingBox::new(x, y, w, h);
            let c = crop_region(&img, &b, factor, side).unwrap();
            let back = c.to_source(&c.target_in_patch);
            prop_assert!((back.x - x).abs() < 0.5 && (back.y - y).abs() < 0.5);
            prop_assert!((back.w - w).abs() < 0.5 && (back.h - h).abs() < 0.5);
        }
    }
}
