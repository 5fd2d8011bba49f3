//! Patch embedding and the joint RGB/event transformer with per-modality
//! search-token elimination.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::matrix::Matrix;
use crate::nn::{mean_attention, Attention, Builder, LayerNorm, Linear, Mlp};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Event,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    RgbTemplate,
    RgbSearch,
    EvTemplate,
    EvSearch,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::RgbTemplate, Region::RgbSearch, Region::EvTemplate, Region::EvSearch];

    pub fn modality(self) -> Modality {
        match self {
            Region::RgbTemplate | Region::RgbSearch => Modality::Rgb,
            Region::EvTemplate | Region::EvSearch => Modality::Event,
        }
    }

    pub fn is_search(self) -> bool {
        matches!(self, Region::RgbSearch | Region::EvSearch)
    }

    pub fn template_of(m: Modality) -> Region {
        match m {
            Modality::Rgb => Region::RgbTemplate,
            Modality::Event => Region::EvTemplate,
        }
    }

    pub fn search_of(m: Modality) -> Region {
        match m {
            Modality::Rgb => Region::RgbSearch,
            Modality::Event => Region::EvSearch,
        }
    }
}

/// Global slot numbering of the concatenated sequence:
/// `[rgb template | rgb search | event template | event search]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub template_grid: usize,
    pub search_grid: usize,
}

impl Layout {
    pub fn grid(&self, r: Region) -> usize {
        if r.is_search() {
            self.search_grid
        } else {
            self.template_grid
        }
    }

    pub fn count(&self, r: Region) -> usize {
        self.grid(r) * self.grid(r)
    }

    pub fn offset(&self, r: Region) -> usize {
        Region::ALL.iter().take_while(|&&q| q != r).map(|&q| self.count(q)).sum()
    }

    pub fn total(&self) -> usize {
        Region::ALL.iter().map(|&r| self.count(r)).sum()
    }

    pub fn slots(&self, r: Region) -> std::ops::Range<usize> {
        let o = self.offset(r);
        o..o + self.count(r)
    }

    pub fn region_of(&self, slot: usize) -> Region {
        *Region::ALL.iter().find(|&&r| self.slots(r).contains(&slot)).expect("slot outside layout")
    }
}

/// Token sequence on a tape plus the global slot of every row.
#[derive(Clone, Debug)]
pub struct TokenVar {
    pub x: Var,
    pub slots: Vec<usize>,
}

impl TokenVar {
    /// Row positions whose slot lies in `r`.
    pub fn rows_in(&self, layout: &Layout, r: Region) -> Vec<usize> {
        let range = layout.slots(r);
        self.slots.iter().enumerate().filter(|(_, s)| range.contains(s)).map(|(i, _)| i).collect()
    }

    pub fn to_token_set<T: Scalar>(&self, tape: &Tape<'_, T>, layout: Layout) -> TokenSet<T> {
        TokenSet { tokens: tape.value(self.x).clone(), slots: self.slots.clone(), layout }
    }
}

/// Detached token values. Rows are live tokens; `slots` places each row in
/// the layout, so eliminated tokens are exactly the slots that do not appear.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub tokens: Matrix<T>,
    pub slots: Vec<usize>,
    pub layout: Layout,
}

impl<T: Scalar> TokenSet<T> {
    pub fn region_tags(&self) -> Vec<Region> {
        self.slots.iter().map(|&s| self.layout.region_of(s)).collect()
    }

    /// One flag per layout slot.
    pub fn live_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.layout.total()];
        for &s in &self.slots {
            m[s] = true;
        }
        m
    }

    pub fn live_count(&self, r: Region) -> usize {
        let range = self.layout.slots(r);
        self.slots.iter().filter(|s| range.contains(s)).count()
    }

    pub fn grid_shape(&self, r: Region) -> (usize, usize) {
        let g = self.layout.grid(r);
        (g, g)
    }
}

/// Tokens dropped at one block, as global slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EliminationStep {
    pub block: usize,
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EliminationTrace {
    pub steps: Vec<EliminationStep>,
}

/// Output of [`Backbone::joint_encode`].
pub struct Encoded {
    pub tokens: TokenVar,
    pub trace: EliminationTrace,
    /// Attention nodes of every block, for inspection.
    pub attention: Vec<Var>,
}

/// Number of tokens kept out of `count`.
pub fn keep_count(count: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * count as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Indices (ascending) of the `ceil(keep_ratio·n)` highest scores; ties go
/// to the lower index.
pub fn rank_keep<T: Scalar>(scores: &[T], keep_ratio: f64) -> Result<Vec<usize>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Argument(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(keep_count(scores.len(), keep_ratio));
    order.sort_unstable();
    Ok(order)
}

/// Rows of the current sequence to keep, given the head-averaged attention
/// matrix of the block. Each modality's search tokens are ranked by the mean
/// attention they receive from that modality's template tokens; templates
/// always survive.
pub fn eliminate_tokens<T: Scalar>(
    attention: &Matrix<T>,
    slots: &[usize],
    layout: &Layout,
    keep_ratio: f64,
) -> Result<Vec<usize>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Argument(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    assert_eq!(attention.shape(), (slots.len(), slots.len()), "attention must be square over the sequence");
    let rows_of = |r: Region| -> Vec<usize> {
        let range = layout.slots(r);
        slots.iter().enumerate().filter(|(_, s)| range.contains(s)).map(|(i, _)| i).collect()
    };
    let mut keep: Vec<usize> = Vec::with_capacity(slots.len());
    for m in [Modality::Rgb, Modality::Event] {
        let templ = rows_of(Region::template_of(m));
        let search = rows_of(Region::search_of(m));
        keep.extend_from_slice(&templ);
        if search.is_empty() {
            continue;
        }
        let scores: Vec<T> = if templ.is_empty() {
            vec![T::zero(); search.len()]
        } else {
            let n = T::from_usize(templ.len()).unwrap();
            search.iter().map(|&j| templ.iter().map(|&i| attention.get(i, j)).sum::<T>() / n).collect()
        };
        keep.extend(rank_keep(&scores, keep_ratio)?.into_iter().map(|k| search[k]));
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub layout: Layout,
    pub dim: usize,
    pub patch_size: usize,
    pub elim_blocks: Vec<usize>,
    pub keep_ratio: f64,
    pub rgb_embed: Linear,
    pub ev_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(cfg: &ModelConfig, b: &mut Builder<'_, T, R>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_dim = crate::imaging::CHANNELS * cfg.patch_size * cfg.patch_size;
        let layout = Layout { template_grid: cfg.template_grid(), search_grid: cfg.search_grid() };
        let rgb_embed = Linear::new(b, "patch_embed.rgb", patch_dim, d);
        let ev_embed = Linear::new(b, "patch_embed.event", patch_dim, d);
        let pos = b.normal("pos_embed", layout.total(), d);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut s = b.scope(&format!("blocks.{i}"));
                Block {
                    norm1: LayerNorm::new(&mut s, "norm1", d),
                    attn: Attention::new(&mut s, "attn", d, cfg.heads),
                    norm2: LayerNorm::new(&mut s, "norm2", d),
                    mlp: Mlp::new(&mut s, "mlp", d, cfg.mlp_hidden(), d),
                }
            })
            .collect();
        let norm = LayerNorm::new(b, "norm", d);
        Ok(Self {
            layout,
            dim: d,
            patch_size: cfg.patch_size,
            elim_blocks: cfg.elim_blocks.clone(),
            keep_ratio: cfg.keep_ratio,
            rgb_embed,
            ev_embed,
            pos,
            blocks,
            norm,
        })
    }

    /// Linear patch projection plus the region's positional embeddings.
    pub fn patch_embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, patch: &Image, region: Region) -> Result<TokenVar> {
        let ps = self.patch_size;
        if patch.width() % ps != 0 || patch.height() % ps != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} not divisible by patch size {ps}",
                patch.width(),
                patch.height()
            )));
        }
        let g = self.layout.grid(region);
        if patch.width() != g * ps || patch.height() != g * ps {
            return Err(Error::Config(format!(
                "{region:?} patch is {}x{}, expected {}x{}",
                patch.width(),
                patch.height(),
                g * ps,
                g * ps
            )));
        }
        let p = tape.constant(patch.patchify::<T>(ps));
        let proj = match region.modality() {
            Modality::Rgb => self.rgb_embed,
            Modality::Event => self.ev_embed,
        };
        let x = proj.forward(tape, p);
        let table = tape.param(self.pos);
        let slots: Vec<usize> = self.layout.slots(region).collect();
        let x = tape.add_rows(x, table, &slots);
        Ok(TokenVar { x, slots })
    }

    /// Runs the blocks over the concatenation of `parts`. The final norm is
    /// not applied here; see [`Backbone::final_norm`].
    pub fn joint_encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, parts: &[TokenVar]) -> Result<Encoded> {
        for p in parts {
            let (rows, cols) = tape.shape(p.x);
            if cols != self.dim || rows != p.slots.len() {
                return Err(Error::Config(format!("token width {cols} does not match backbone.dim {}", self.dim)));
            }
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.x).collect();
        let mut x = tape.concat_rows(&vars);
        let mut slots: Vec<usize> = parts.iter().flat_map(|p| p.slots.iter().copied()).collect();
        let mut trace = EliminationTrace::default();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let h = blk.norm1.forward(tape, x);
            let (a, node) = blk.attn.forward(tape, h, h);
            attention.push(node);
            x = tape.add(x, a);
            if self.keep_ratio < 1.0 && self.elim_blocks.contains(&i) {
                let probs = mean_attention(tape, node);
                let keep = eliminate_tokens(&probs, &slots, &self.layout, self.keep_ratio)?;
                if keep.len() < slots.len() {
                    let mut kept = vec![false; slots.len()];
                    keep.iter().for_each(|&k| kept[k] = true);
                    let removed = slots.iter().zip(&kept).filter(|(_, &k)| !k).map(|(&s, _)| s).collect();
                    trace.steps.push(EliminationStep { block: i, removed });
                    x = tape.gather_rows(x, &keep);
                    slots = keep.iter().map(|&k| slots[k]).collect();
                }
            }
            let h = blk.norm2.forward(tape, x);
            let m = blk.mlp.forward(tape, h);
            x = tape.add(x, m);
        }
        Ok(Encoded { tokens: TokenVar { x, slots }, trace, attention })
    }

    pub fn final_norm<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: &TokenVar) -> TokenVar {
        TokenVar { x: self.norm.forward(tape, tokens.x), slots: tokens.slots.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(depth: usize, keep: f64) -> ModelConfig {
        ModelConfig {
            dim: 8,
            depth,
            heads: 2,
            patch_size: 4,
            mlp_ratio: 2.0,
            elim_blocks: vec![0, 1],
            keep_ratio: keep,
            template_size: 8,
            search_size: 16,
            uncert_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Backbone, "backbone");
        let bb = Backbone::new(cfg, &mut b).unwrap();
        (store, bb)
    }

    fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
        let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
        Image::from_planes(side, side, data)
    }

    fn inputs(bb: &Backbone, tape: &mut Tape<'_, f64>, seed: u64) -> Vec<TokenVar> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Region::ALL
            .iter()
            .map(|&r| {
                let side = bb.layout.grid(r) * bb.patch_size;
                bb.patch_embed(tape, &random_image(side, &mut rng), r).unwrap()
            })
            .collect()
    }

    #[test]
    fn layout_counts() {
        let l = Layout { template_grid: 6, search_grid: 12 };
        assert_eq!(l.count(Region::RgbTemplate), 36);
        assert_eq!(l.count(Region::EvSearch), 144);
        assert_eq!(l.total(), 360);
        assert_eq!(l.offset(Region::EvTemplate), 180);
        assert_eq!(l.region_of(179), Region::RgbSearch);
    }

    #[test]
    fn hand_ranking_example() {
        assert_eq!(rank_keep(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap(), vec![0, 2]);
        assert_eq!(rank_keep(&[0.5; 5], 0.4).unwrap(), vec![0, 1]);
        assert_eq!(rank_keep(&[0.1, 0.2, 0.3], 1.0).unwrap(), vec![0, 1, 2]);
        assert!(matches!(rank_keep(&[0.1], 0.0), Err(Error::Argument(_))));
        assert!(matches!(rank_keep(&[0.1], 1.5), Err(Error::Argument(_))));
    }

    #[test]
    fn ranking_ignores_order_of_dropped_candidates() {
        let a = rank_keep(&[0.9, 0.1, 0.8, 0.2, 0.05], 0.4).unwrap();
        let b = rank_keep(&[0.9, 0.2, 0.8, 0.05, 0.1], 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eliminate_per_modality() {
        // one template row per modality (slots 0 and 5), four search rows each
        let layout = Layout { template_grid: 1, search_grid: 2 };
        let slots: Vec<usize> = (0..layout.total()).collect();
        let n = slots.len();
        let mut att = Matrix::<f64>::zeros(n, n);
        for (j, v) in [0.4, 0.1, 0.3, 0.2].into_iter().enumerate() {
            att.set(0, 1 + j, v);
        }
        // event search slot 9 preferred, the rest tie and the lowest index wins
        att.set(5, 9, 0.9);
        let keep = eliminate_tokens(&att, &slots, &layout, 0.5).unwrap();
        assert_eq!(keep, vec![0, 1, 3, 5, 6, 9]);
    }

    #[test]
    fn zero_image_gives_position_plus_bias() {
        let cfg = toy_cfg(0, 1.0);
        let (mut store, bb) = build(&cfg, 3);
        let bias = Matrix::from_fn(1, 8, |_, c| 0.1 * c as f64 - 0.3);
        *store.value_mut(bb.ev_embed.bias) = bias.clone();
        let mut tape = Tape::with_params(&store);
        let t = bb.patch_embed(&mut tape, &Image::zeros(8, 8), Region::EvTemplate).unwrap();
        let pos = store.value(bb.pos);
        assert_eq!(t.slots, (20..24).collect::<Vec<_>>());
        for (r, &s) in t.slots.iter().enumerate() {
            for c in 0..8 {
                let want = pos.get(s, c) + bias.get(0, c);
                assert!((tape.value(t.x).get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn patch_side_checked() {
        let cfg = toy_cfg(0, 1.0);
        let (store, bb) = build(&cfg, 3);
        let mut tape = Tape::with_params(&store);
        assert!(matches!(bb.patch_embed(&mut tape, &Image::zeros(10, 10), Region::RgbTemplate), Err(Error::Config(_))));
        assert!(matches!(bb.patch_embed(&mut tape, &Image::zeros(16, 16), Region::RgbTemplate), Err(Error::Config(_))));
    }

    #[test]
    fn depth_zero_is_concatenation() {
        let cfg = toy_cfg(0, 0.5);
        let (store, bb) = build(&cfg, 4);
        let mut tape = Tape::with_params(&store);
        let parts = inputs(&bb, &mut tape, 1);
        let out = bb.joint_encode(&mut tape, &parts).unwrap();
        let mut rows = Vec::new();
        for p in &parts {
            rows.extend_from_slice(tape.value(p.x).as_slice());
        }
        assert_eq!(tape.value(out.tokens.x).as_slice(), &rows[..]);
        assert!(out.trace.steps.is_empty());
    }

    #[test]
    fn keep_ratio_one_matches_no_elimination() {
        let mut with = toy_cfg(3, 1.0);
        with.elim_blocks = vec![0, 1, 2];
        let mut without = with.clone();
        without.elim_blocks.clear();
        let (store, bb1) = build(&with, 5);
        let (_, bb2) = build(&without, 5);
        let mut t1 = Tape::with_params(&store);
        let mut t2 = Tape::with_params(&store);
        let p1 = inputs(&bb1, &mut t1, 2);
        let p2 = inputs(&bb2, &mut t2, 2);
        let o1 = bb1.joint_encode(&mut t1, &p1).unwrap();
        let o2 = bb2.joint_encode(&mut t2, &p2).unwrap();
        assert_eq!(t1.value(o1.tokens.x), t2.value(o2.tokens.x));
        let set = o1.tokens.to_token_set(&t1, bb1.layout);
        assert!(set.live_mask().iter().all(|&b| b));
    }

    #[test]
    fn elimination_counts_follow_ceil_chain() {
        let cfg = toy_cfg(2, 0.7);
        let (store, bb) = build(&cfg, 6);
        let mut tape = Tape::with_params(&store);
        let parts = inputs(&bb, &mut tape, 3);
        let out = bb.joint_encode(&mut tape, &parts).unwrap();
        let set = out.tokens.to_token_set(&tape, bb.layout);
        // 16 → ceil(11.2) = 12 → ceil(8.4) = 9
        assert_eq!(set.live_count(Region::RgbSearch), 9);
        assert_eq!(set.live_count(Region::EvSearch), 9);
        assert_eq!(set.live_count(Region::RgbTemplate), 4);
        assert_eq!(set.live_count(Region::EvTemplate), 4);
        assert_eq!(out.trace.steps.len(), 2);
        assert_eq!(out.trace.steps[0].removed.len(), 8);
        assert_eq!(set.region_tags().len(), set.tokens.rows());
        assert!(set.slots.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = toy_cfg(2, 0.7);
        let (store, bb) = build(&cfg, 7);
        let mut tape = Tape::with_params(&store);
        let parts = inputs(&bb, &mut tape, 4);
        let out = bb.joint_encode(&mut tape, &parts).unwrap();
        for node in out.attention {
            for p in tape.attention_probs(node).unwrap() {
                for r in 0..p.rows() {
                    assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_embedding_gradient_matches_finite_differences() {
        let cfg = toy_cfg(2, 1.0);
        let (mut store, bb) = build(&cfg, 8);
        let loss = |store: &ParamStore<f64>| -> (f64, Vec<(ParamId, Matrix<f64>)>) {
            let mut tape = Tape::with_params(store);
            let parts = inputs(&bb, &mut tape, 5);
            let out = bb.joint_encode(&mut tape, &parts).unwrap();
            let n = bb.final_norm(&mut tape, &out.tokens);
            let sq = tape.mul(n.x, n.x);
            let s = tape.sum(sq);
            let g = tape.backward(s);
            (tape.value(s).value(), g.param_grads(store))
        };
        let (_, grads) = loss(&store);
        let wid = bb.rgb_embed.weight;
        let analytic = &grads.iter().find(|(id, _)| *id == wid).unwrap().1;
        let h = 1e-6;
        let mut checked = 0;
        for idx in (0..analytic.len()).step_by(7) {
            let orig = store.value(wid).as_slice()[idx];
            store.value_mut(wid).as_mut_slice()[idx] = orig + h;
            let (lp, _) = loss(&store);
            store.value_mut(wid).as_mut_slice()[idx] = orig - h;
            let (lm, _) = loss(&store);
            store.value_mut(wid).as_mut_slice()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-3 || (fd - a).abs() < 1e-9, "idx {idx}: fd {fd} vs {a}");
            checked += 1;
        }
        assert!(checked > 10);
    }
}
