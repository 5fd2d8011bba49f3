//! Centre-based tracking head, box decoding, targets and losses.

use rand::Rng;

use crate::bbox::BoundingBox;
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Builder, Linear};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Prior probability the classification bias starts at.
const CLS_PRIOR: f64 = 0.1;

/// Two 3×3 conv layers with ReLU, then a 1×1 output layer and a sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct Tower {
    pub conv1: Linear,
    pub conv2: Linear,
    pub out: Linear,
}

impl Tower {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, ch: usize, out: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            conv1: Linear::new(&mut s, "conv1", 9 * dim, ch),
            conv2: Linear::new(&mut s, "conv2", 9 * ch, ch),
            out: Linear::new(&mut s, "out", ch, out),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, grid: usize) -> Var {
        let c = tape.im2col3x3(x, grid, grid);
        let h = self.conv1.forward(tape, c);
        let h = tape.relu(h);
        let c = tape.im2col3x3(h, grid, grid);
        let h = self.conv2.forward(tape, c);
        let h = tape.relu(h);
        let o = self.out.forward(tape, h);
        tape.sigmoid(o)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub cls: Tower,
    pub offset: Tower,
    pub size: Tower,
    pub grid: usize,
    pub patch_size: usize,
}

/// Head outputs on a tape, one row per grid cell in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    pub cls: Var,
    pub offset: Var,
    pub size: Var,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        dim: usize,
        channels: usize,
        grid: usize,
        patch_size: usize,
    ) -> Self {
        let mut s = b.scope("head");
        let cls = Tower::new(&mut s, "cls", dim, channels, 1);
        let bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        *s.store.value_mut(cls.out.bias) = Matrix::filled(1, 1, T::lit(bias));
        Self {
            cls,
            offset: Tower::new(&mut s, "offset", dim, channels, 2),
            size: Tower::new(&mut s, "size", dim, channels, 2),
            grid,
            patch_size,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// `tokens` holds live search tokens whose grid positions are
    /// `positions`; missing cells are filled with zeros.
    pub fn predict_maps<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, positions: &[usize]) -> MapVars {
        let cells = self.cells();
        assert!(positions.iter().all(|&p| p < cells), "search token outside the {}x{} grid", self.grid, self.grid);
        let x = if positions.len() == cells && positions.iter().enumerate().all(|(i, &p)| i == p) {
            tokens
        } else {
            tape.scatter_rows(tokens, positions, cells)
        };
        MapVars {
            cls: self.cls.forward(tape, x, self.grid),
            offset: self.offset.forward(tape, x, self.grid),
            size: self.size.forward(tape, x, self.grid),
        }
    }
}

/// Detached head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps<T> {
    pub grid: usize,
    pub cls: Vec<T>,
    pub offset: Vec<[T; 2]>,
    pub size: Vec<[T; 2]>,
}

impl<T: Scalar> ScoreMaps<T> {
    pub fn from_tape(tape: &Tape<'_, T>, m: MapVars, grid: usize) -> Self {
        let pair = |v: Var| -> Vec<[T; 2]> {
            let mat = tape.value(v);
            (0..mat.rows()).map(|r| [mat.get(r, 0), mat.get(r, 1)]).collect()
        };
        Self { grid, cls: tape.value(m.cls).as_slice().to_vec(), offset: pair(m.offset), size: pair(m.size) }
    }
}

/// Symmetric 2-D Hanning window, row-major.
pub fn hanning_window(grid: usize) -> Vec<f64> {
    let mut w1 = vec![1.0; grid];
    if grid > 1 {
        for n in 0..grid.div_ceil(2) {
            let v = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (grid - 1) as f64).cos();
            w1[n] = v;
            w1[grid - 1 - n] = v;
        }
    }
    let mut out = Vec::with_capacity(grid * grid);
    for &a in &w1 {
        for &b in &w1 {
            out.push(a * b);
        }
    }
    out
}

/// Window used by [`decode_box`]: `score·(1 − weight) + score·window·weight`.
#[derive(Clone, Debug)]
pub struct WindowPenalty {
    pub window: Vec<f64>,
    pub weight: f64,
}

impl WindowPenalty {
    pub fn hanning(grid: usize, weight: f64) -> Self {
        Self { window: hanning_window(grid), weight }
    }
}

/// Peak cell (row-major, first maximum wins) and its raw classification score.
pub fn peak_cell<T: Scalar>(maps: &ScoreMaps<T>, penalty: Option<&WindowPenalty>) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &c) in maps.cls.iter().enumerate() {
        let c = c.to_f64_lossy();
        let s = match penalty {
            None => c,
            Some(p) => c * (1.0 - p.weight) + c * p.window[i] * p.weight,
        };
        if s > best.1 {
            best = (i, s);
        }
    }
    (best.0, maps.cls[best.0].to_f64_lossy())
}

/// Box in search-patch pixels at the peak cell, plus the peak score.
pub fn decode_box<T: Scalar>(
    maps: &ScoreMaps<T>,
    penalty: Option<&WindowPenalty>,
    patch_size: usize,
) -> (BoundingBox, f64) {
    let (idx, score) = peak_cell(maps, penalty);
    (box_at(maps, idx, patch_size), score)
}

/// Box encoded at grid cell `idx`.
pub fn box_at<T: Scalar>(maps: &ScoreMaps<T>, idx: usize, patch_size: usize) -> BoundingBox {
    let g = maps.grid;
    let (row, col) = ((idx / g) as f64, (idx % g) as f64);
    let ps = patch_size as f64;
    let side = (g * patch_size) as f64;
    let [ox, oy] = maps.offset[idx].map(|v| v.to_f64_lossy());
    let [sw, sh] = maps.size[idx].map(|v| v.to_f64_lossy());
    BoundingBox::from_center((col + ox) * ps, (row + oy) * ps, sw * side, sh * side)
}

/// CornerNet radius for a `height×width` box at overlap 0.7.
pub fn gaussian_radius(height: f64, width: f64) -> f64 {
    let min_overlap = 0.7;
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Supervision for one branch, built from a box in search-patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Target<T> {
    pub response: Matrix<T>,
    /// Row-major cell containing the box centre.
    pub cell: usize,
    /// `(cx, cy, w, h)` divided by the search side.
    pub normalized: [T; 4],
}

/// Gaussian response map (one row per cell) peaking at 1 in the cell that
/// holds the box centre. `None` when the centre lies outside the patch.
pub fn gt_response_map<T: Scalar>(gt: &BoundingBox, grid: usize, patch_size: usize) -> Option<Target<T>> {
    let ps = patch_size as f64;
    let side = grid as f64 * ps;
    let (cx, cy) = gt.center();
    if !gt.has_positive_area() || !(cx >= 0.0 && cx < side && cy >= 0.0 && cy < side) {
        return None;
    }
    let (col, row) = ((cx / ps).floor() as usize, (cy / ps).floor() as usize);
    let radius = gaussian_radius(gt.h / ps, gt.w / ps).floor().max(1.0);
    let sigma = (2.0 * radius + 1.0) / 6.0;
    let r = radius as i64;
    let mut response = Matrix::zeros(grid * grid, 1);
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as i64 + dy, col as i64 + dx);
            if y < 0 || x < 0 || y >= grid as i64 || x >= grid as i64 {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            response.set(y as usize * grid + x as usize, 0, T::lit(v));
        }
    }
    let normalized = [cx / side, cy / side, gt.w / side, gt.h / side].map(T::lit);
    Some(Target { response, cell: row * grid + col, normalized })
}

/// Loss terms of one branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle<T> {
    pub cls: T,
    pub iou: T,
    pub l1: T,
    pub branch_total: T,
}

impl<T: Scalar> LossBundle<T> {
    pub fn new(cls: T, iou: T, l1: T, cfg: &LossConfig) -> Self {
        let branch_total = cls + T::lit(cfg.lambda_iou) * iou + T::lit(cfg.lambda_l1) * l1;
        Self { cls, iou, l1, branch_total }
    }

    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.iou.is_finite() && self.l1.is_finite() && self.branch_total.is_finite()
    }
}

/// Loss nodes of one branch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
    pub total: Var,
}

impl BranchVars {
    pub fn bundle<T: Scalar>(&self, tape: &Tape<'_, T>) -> LossBundle<T> {
        LossBundle {
            cls: tape.value(self.cls).value(),
            iou: tape.value(self.iou).value(),
            l1: tape.value(self.l1).value(),
            branch_total: tape.value(self.total).value(),
        }
    }
}

/// Predicted `(cx, cy, w, h)`, normalized by the search side, read at the
/// target's centre cell.
pub fn predicted_box_at<T: Scalar>(tape: &mut Tape<'_, T>, maps: MapVars, cell: usize, grid: usize) -> Var {
    let g = T::lit(grid as f64);
    let off = tape.gather_rows(maps.offset, &[cell]);
    let off = tape.scale(off, T::one() / g);
    let size = tape.gather_rows(maps.size, &[cell]);
    let b = tape.concat_cols(&[off, size]);
    let base = Matrix::from_vec(1, 4, vec![T::lit((cell % grid) as f64) / g, T::lit((cell / grid) as f64) / g, T::zero(), T::zero()]);
    tape.add_const(b, &base)
}

/// Focal, GIoU and L1 terms and their weighted sum for one branch.
pub fn branch_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    maps: MapVars,
    target: &Target<T>,
    grid: usize,
    cfg: &LossConfig,
) -> BranchVars {
    let cls = tape.focal_loss(maps.cls, &target.response);
    let pred = predicted_box_at(tape, maps, target.cell, grid);
    let iou = tape.giou_loss(pred, target.normalized);
    let gt = Matrix::from_vec(1, 4, target.normalized.to_vec());
    let l1 = tape.l1_loss(pred, &gt);
    let total = tape.weighted_sum(&[(cls, T::one()), (iou, T::lit(cfg.lambda_iou)), (l1, T::lit(cfg.lambda_l1))]);
    BranchVars { cls, iou, l1, total }
}

/// Fusion + cross-modal + RGB branch totals plus `alpha·(kl_v + kl_cm)`.
pub fn total_loss<T: Scalar>(
    fusion: &LossBundle<T>,
    cross: &LossBundle<T>,
    rgb: &LossBundle<T>,
    kl_v: T,
    kl_cm: T,
    cfg: &LossConfig,
) -> Result<T> {
    for (name, b) in [("fusion", fusion), ("cross-modal", cross), ("rgb", rgb)] {
        if !b.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} branch loss {b:?}")));
        }
    }
    for (name, k) in [("kl_v", kl_v), ("kl_cm", kl_cm)] {
        if !k.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} = {k}")));
        }
    }
    Ok(fusion.branch_total + cross.branch_total + rgb.branch_total + T::lit(cfg.alpha_kl) * (kl_v + kl_cm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use crate::tape::focal_value;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps_with_peak(grid: usize, idx: usize, off: [f64; 2], size: [f64; 2]) -> ScoreMaps<f64> {
        let mut cls = vec![0.0; grid * grid];
        cls[idx] = 1.0;
        ScoreMaps { grid, cls, offset: vec![off; grid * grid], size: vec![size; grid * grid] }
    }

    #[test]
    fn decode_hand_example() {
        let m = maps_with_peak(12, 5 * 12 + 5, [0.5, 0.5], [0.25, 0.25]);
        let (b, score) = decode_box(&m, None, 16);
        // centre (5 + 0.5)·16 = 88, side 0.25·192 = 48
        assert_eq!(b, BoundingBox::new(64.0, 64.0, 48.0, 48.0));
        assert_eq!(score, 1.0);
    }

    #[test]
    fn uniform_scores_with_window_pick_centre() {
        let m = ScoreMaps { grid: 12, cls: vec![0.3; 144], offset: vec![[0.0; 2]; 144], size: vec![[0.1; 2]; 144] };
        let p = WindowPenalty::hanning(12, 0.49);
        assert_eq!(peak_cell(&m, Some(&p)).0, 5 * 12 + 5);
        let m9 = ScoreMaps { grid: 9, cls: vec![0.3; 81], offset: vec![[0.0; 2]; 81], size: vec![[0.1; 2]; 81] };
        assert_eq!(peak_cell(&m9, Some(&WindowPenalty::hanning(9, 0.49))).0, 4 * 9 + 4);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut m = maps_with_peak(4, 9, [0.0; 2], [0.1; 2]);
        m.cls[3] = 1.0;
        assert_eq!(peak_cell(&m, None).0, 3);
    }

    #[test]
    fn single_sharp_peak_ignores_window() {
        let m = maps_with_peak(12, 2 * 12 + 9, [0.3, 0.7], [0.2, 0.1]);
        let p = WindowPenalty::hanning(12, 0.49);
        assert_eq!(decode_box(&m, None, 16).0, decode_box(&m, Some(&p), 16).0);
    }

    #[test]
    fn response_map_peak_at_centre_cell() {
        let b = BoundingBox::from_center(5.5 * 16.0, 3.5 * 16.0, 40.0, 30.0);
        let t: Target<f64> = gt_response_map(&b, 12, 16).unwrap();
        let ones: Vec<usize> = (0..144).filter(|&i| t.response.get(i, 0) == 1.0).collect();
        assert_eq!(ones, vec![3 * 12 + 5]);
        assert_eq!(t.cell, 3 * 12 + 5);
        let tiny = BoundingBox::from_center(100.0, 100.0, 1.0, 1.0);
        let t: Target<f64> = gt_response_map(&tiny, 12, 16).unwrap();
        let nonzero = t.response.as_slice().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, 9);
        assert!(gt_response_map::<f64>(&BoundingBox::new(190.0, 10.0, 10.0, 10.0), 12, 16).is_none());
    }

    #[test]
    fn radius_matches_reference_values() {
        // values of the reference CornerNet routine for a few sizes
        assert!((gaussian_radius(10.0, 10.0) - 2.7332).abs() < 1e-3);
        assert!((gaussian_radius(3.0, 2.0) - 0.6581).abs() < 1e-3);
    }

    #[test]
    fn focal_hand_values() {
        let mut target = vec![0.0; 4];
        target[1] = 1.0;
        let pred = vec![0.5; 4];
        // positive: −(0.5)² ln 0.5 ; each negative: −1·0.5²·ln 0.5
        let want = -0.25 * 0.5f64.ln() * 4.0;
        assert!((focal_value(&pred, &target) - want).abs() < 1e-12);
        let perfect: Vec<f64> = target.clone();
        assert!(focal_value(&perfect, &target) <= 1e-5);
        let mut wide_t = target.clone();
        let mut wide_p = vec![1e-9, 1.0, 1e-9, 1e-9];
        wide_t.extend([0.0; 4]);
        wide_p.extend([1e-9; 4]);
        let base = focal_value(&[1e-9, 1.0, 1e-9, 1e-9], &target);
        assert!(focal_value(&wide_p, &wide_t) - base <= 1e-6);
    }

    #[test]
    fn branch_and_total_weights() {
        let cfg = LossConfig::default();
        let b = LossBundle::new(1.0, 0.5, 0.1, &cfg);
        assert!((b.branch_total - 2.5f64).abs() < 1e-12);
        let z = LossBundle::new(0.0, 0.0, 0.0, &cfg);
        assert_eq!(z.branch_total, 0.0);
        assert_eq!(total_loss(&z, &z, &z, 0.0, 0.0, &cfg).unwrap(), 0.0);
        let one = LossBundle { cls: 1.0, iou: 0.0, l1: 0.0, branch_total: 1.0 };
        assert!((total_loss(&one, &one, &one, 1.0, 1.0, &cfg).unwrap() - 3.002f64).abs() < 1e-12);
        assert!(matches!(total_loss(&one, &one, &one, f64::NAN, 1.0, &cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn head_shapes_and_ranges() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = {
            let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Other, "");
            Head::new(&mut b, 8, 4, 4, 4)
        };
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Matrix::from_fn(10, 8, |r, c| ((r * 8 + c) as f64).sin()));
        let positions: Vec<usize> = (0..16).filter(|p| p % 3 != 0).collect();
        let m = head.predict_maps(&mut tape, x, &positions);
        let maps = ScoreMaps::from_tape(&tape, m, 4);
        assert_eq!(maps.cls.len(), 16);
        assert!(maps.cls.iter().all(|&c| c > 0.0 && c < 1.0));
        assert!(maps.size.iter().flatten().all(|&c| c > 0.0 && c < 1.0));
    }

    proptest! {
        #[test]
        fn response_map_max_is_centre(cx in 0.0..192.0f64, cy in 0.0..192.0f64, w in 2.0..120.0f64, h in 2.0..120.0f64) {
            let b = BoundingBox::from_center(cx, cy, w, h);
            let t: Target<f64> = gt_response_map(&b, 12, 16).unwrap();
            let (row, col) = ((cy / 16.0).floor() as usize, (cx / 16.0).floor() as usize);
            let max = t.response.as_slice().iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(max, 1.0);
            prop_assert_eq!(t.response.get(row * 12 + col, 0), 1.0);
            // independent evaluation of the falloff at a neighbour
            let r = gaussian_radius(h / 16.0, w / 16.0).floor().max(1.0);
            let s = (2.0 * r + 1.0) / 6.0;
            if col + 1 < 12 {
                let want = (-1.0 / (2.0 * s * s)).exp();
                prop_assert!((t.response.get(row * 12 + col + 1, 0) - want).abs() < 1e-12);
            }
        }

        #[test]
        fn decode_inverts_encoding(row in 0usize..12, col in 0usize..12, ox in 0.0..1.0f64, oy in 0.0..1.0f64, sw in 0.01..1.0f64, sh in 0.01..1.0f64) {
            let m = maps_with_peak(12, row * 12 + col, [ox, oy], [sw, sh]);
            let (b, _) = decode_box(&m, None, 16);
            let (cx, cy) = b.center();
            prop_assert!((cx - (col as f64 + ox) * 16.0).abs() < 1e-9);
            prop_assert!((cy - (row as f64 + oy) * 16.0).abs() < 1e-9);
            prop_assert!((b.w - sw * 192.0).abs() < 1e-9 && (b.h - sh * 192.0).abs() < 1e-9);
        }

        #[test]
        fn focal_decreases_in_positive_prob(p1 in 0.01..0.98f64, dp in 0.001..0.01f64) {
            let t = [1.0, 0.0];
            let a = focal_value(&[p1, 0.2], &t);
            let b = focal_value(&[p1 + dp, 0.2], &t);
            prop_assert!(b < a);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn branch_total_is_linear(c in 0.0..5.0f64, i in 0.0..2.0f64, l in 0.0..1.0f64) {
            let cfg = LossConfig::default();
            let b = LossBundle::new(c, i, l, &cfg);
            prop_assert!((b.branch_total - (c + 2.0 * i + 5.0 * l)).abs() < 1e-12);
        }
    }
}
