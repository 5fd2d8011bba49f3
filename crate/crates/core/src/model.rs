//! The full network (backbone, Gaussian perception, fusion, shared head)
//! and the 1×1-concatenation baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, EliminationTrace, Layout, Modality, Region, TokenVar};
use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::head::{Head, MapVars};
use crate::imaging::Image;
use crate::matrix::Matrix;
use crate::nn::{Builder, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::uncertainty::{reparameterize, Fusion, GaussianVars, Perception, Tokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Fusion,
    CrossModal,
    Rgb,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Fusion => "fusion",
            Branch::CrossModal => "cross_modal",
            Branch::Rgb => "rgb",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct UncertaintyModules {
    pub mdup: Perception,
    pub cmdup: Perception,
    pub muf: Fusion,
}

#[derive(Clone, Debug)]
pub enum Neck {
    Full(UncertaintyModules),
    Baseline(Linear),
}

/// Parameter handles and static shape information of a network.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

/// Template input: a crop, or tokens already embedded by
/// [`Network::embed_template`].
#[derive(Clone, Copy, Debug)]
pub enum TemplateInput<'a, T> {
    Image(&'a Image),
    Tokens(&'a Matrix<T>),
}

#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a, T> {
    pub rgb_template: TemplateInput<'a, T>,
    pub ev_template: TemplateInput<'a, T>,
    pub rgb_search: &'a Image,
    pub ev_search: &'a Image,
}

pub struct ForwardOutput {
    /// Head outputs; the fusion branch comes first.
    pub branches: Vec<(Branch, MapVars)>,
    /// `(RGB-only, cross-modal)` Gaussians; absent for the baseline.
    pub gaussians: Option<(GaussianVars, GaussianVars)>,
    pub trace: EliminationTrace,
    /// Backbone attention nodes followed by MDUP, CMDUP and MUF nodes.
    pub attention: Vec<Var>,
}

impl ForwardOutput {
    pub fn branch(&self, b: Branch) -> Option<MapVars> {
        self.branches.iter().find(|(k, _)| *k == b).map(|(_, m)| *m)
    }
}

impl Network {
    pub fn new<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = {
            let mut b = Builder::new(store, rng, ParamGroup::Backbone, "backbone");
            Backbone::new(cfg, &mut b)?
        };
        let slots = backbone.layout.total();
        let mut b = Builder::new(store, rng, ParamGroup::Other, "");
        let neck = match cfg.variant {
            Variant::Full => Neck::Full(UncertaintyModules {
                mdup: Perception::new(&mut b, "mdup", cfg.dim, cfg.uncert_heads, slots, cfg.logvar_clamp)?,
                cmdup: Perception::new(&mut b, "cmdup", cfg.dim, cfg.uncert_heads, slots, cfg.logvar_clamp)?,
                muf: Fusion::new(&mut b, "muf", cfg.dim, cfg.uncert_heads, slots)?,
            }),
            Variant::Baseline => Neck::Baseline(Linear::new(&mut b, "fuse1x1", 2 * cfg.dim, cfg.dim)),
        };
        let head = Head::new(&mut b, cfg.dim, cfg.head_channels, cfg.search_grid(), cfg.patch_size);
        Ok(Self { config: cfg.clone(), backbone, neck, head })
    }

    pub fn layout(&self) -> Layout {
        self.backbone.layout
    }

    /// Patch-embedded template tokens (positional embedding included).
    pub fn embed_template<T: Scalar>(&self, store: &ParamStore<T>, image: &Image, region: Region) -> Result<Matrix<T>> {
        let mut tape = Tape::with_params(store);
        let t = self.backbone.patch_embed(&mut tape, image, region)?;
        Ok(tape.value(t.x).clone())
    }

    fn template<T: Scalar>(&self, tape: &mut Tape<'_, T>, input: TemplateInput<'_, T>, region: Region) -> Result<TokenVar> {
        match input {
            TemplateInput::Image(img) => self.backbone.patch_embed(tape, img, region),
            TemplateInput::Tokens(m) => {
                let slots: Vec<usize> = self.layout().slots(region).collect();
                assert_eq!(m.shape(), (slots.len(), self.config.dim), "cached template shape");
                Ok(TokenVar { x: tape.constant(m.clone()), slots })
            }
        }
    }

    /// Search rows of `tokens` (whose slots are given) as grid positions.
    fn search_positions(&self, slots: &[usize], region: Region) -> (Vec<usize>, Vec<usize>) {
        let range = self.layout().slots(region);
        slots.iter().enumerate().filter(|(_, s)| range.contains(s)).map(|(i, &s)| (i, s - range.start)).unzip()
    }

    /// One forward pass. `noise` drives the reparameterized sampling; `None`
    /// uses the means.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        inputs: &Inputs<'_, T>,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let parts = [
            self.template(tape, inputs.rgb_template, Region::RgbTemplate)?,
            self.backbone.patch_embed(tape, inputs.rgb_search, Region::RgbSearch)?,
            self.template(tape, inputs.ev_template, Region::EvTemplate)?,
            self.backbone.patch_embed(tape, inputs.ev_search, Region::EvSearch)?,
        ];
        let enc = self.backbone.joint_encode(tape, &parts)?;
        let z = self.backbone.final_norm(tape, &enc.tokens);
        let layout = self.layout();
        let mut attention = enc.attention;
        match &self.neck {
            Neck::Full(m) => {
                let rows_of = |m: Modality| -> Vec<usize> {
                    (0..z.slots.len()).filter(|&i| layout.region_of(z.slots[i]).modality() == m).collect()
                };
                let (rgb_rows, ev_rows) = (rows_of(Modality::Rgb), rows_of(Modality::Event));
                let v_slots: Vec<usize> = rgb_rows.iter().map(|&i| z.slots[i]).collect();
                let e_slots: Vec<usize> = ev_rows.iter().map(|&i| z.slots[i]).collect();
                let fv = tape.gather_rows(z.x, &rgb_rows);
                let fe = tape.gather_rows(z.x, &ev_rows);
                let fv_t = Tokens { x: fv, slots: &v_slots };
                let fe_t = Tokens { x: fe, slots: &e_slots };
                let g_v = m.mdup.forward_self(tape, &fv_t)?;
                let g_cm = m.cmdup.forward(tape, &fv_t, &fe_t)?;
                let s_v = reparameterize(tape, g_v, noise.as_deref_mut());
                let s_m = reparameterize(tape, g_cm, noise.as_deref_mut());
                let (fused, muf_node) =
                    m.muf.forward(tape, &Tokens { x: s_v, slots: &v_slots }, &Tokens { x: s_m, slots: &v_slots })?;
                attention.extend([g_v.attention, g_cm.attention, muf_node]);
                let (rows, positions) = self.search_positions(&v_slots, Region::RgbSearch);
                let mut branches = Vec::with_capacity(3);
                for (kind, feat) in [(Branch::Fusion, fused), (Branch::CrossModal, s_m), (Branch::Rgb, s_v)] {
                    let search = tape.gather_rows(feat, &rows);
                    branches.push((kind, self.head.predict_maps(tape, search, &positions)));
                }
                Ok(ForwardOutput { branches, gaussians: Some((g_v, g_cm)), trace: enc.trace, attention })
            }
            Neck::Baseline(proj) => {
                let cells = self.head.cells();
                let mut grids = Vec::with_capacity(2);
                for region in [Region::RgbSearch, Region::EvSearch] {
                    let (rows, positions) = self.search_positions(&z.slots, region);
                    let s = tape.gather_rows(z.x, &rows);
                    grids.push(tape.scatter_rows(s, &positions, cells));
                }
                let cat = tape.concat_cols(&grids);
                let fused = proj.forward(tape, cat);
                let all: Vec<usize> = (0..cells).collect();
                let maps = self.head.predict_maps(tape, fused, &all);
                Ok(ForwardOutput { branches: vec![(Branch::Fusion, maps)], gaussians: None, trace: enc.trace, attention })
            }
        }
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Network::new(cfg, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::ScoreMaps;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            patch_size: 4,
            mlp_ratio: 2.0,
            elim_blocks: vec![1],
            keep_ratio: 0.7,
            template_size: 8,
            search_size: 16,
            uncert_heads: 2,
            head_channels: 4,
            variant,
            ..ModelConfig::default()
        }
    }

    fn image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_planes(side, side, (0..3 * side * side).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn full_forward_shapes_and_counts() {
        let m = Model::<f64>::init(&small_cfg(Variant::Full), 1).unwrap();
        let (t, s) = (image(8, 1), image(16, 2));
        let (te, se) = (image(8, 3), image(16, 4));
        let inputs = Inputs {
            rgb_template: TemplateInput::Image(&t),
            ev_template: TemplateInput::Image(&te),
            rgb_search: &s,
            ev_search: &se,
        };
        let mut tape = Tape::with_params(&m.params);
        let out = m.net.forward(&mut tape, &inputs, None).unwrap();
        assert_eq!(out.branches.len(), 3);
        let (g_v, g_cm) = out.gaussians.unwrap();
        // 4 template + ceil(0.7·16) = 12 search tokens
        assert_eq!(tape.shape(g_v.mu), (16, 8));
        assert_eq!(tape.shape(g_cm.mu), (16, 8));
        for (_, maps) in &out.branches {
            let sm = ScoreMaps::from_tape(&tape, *maps, 4);
            assert_eq!(sm.cls.len(), 16);
        }
        for node in &out.attention {
            for p in tape.attention_probs(*node).unwrap() {
                for r in 0..p.rows() {
                    assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cached_templates_match_images() {
        let m = Model::<f64>::init(&small_cfg(Variant::Full), 2).unwrap();
        let (t, s, te, se) = (image(8, 5), image(16, 6), image(8, 7), image(16, 8));
        let rt = m.net.embed_template(&m.params, &t, Region::RgbTemplate).unwrap();
        let et = m.net.embed_template(&m.params, &te, Region::EvTemplate).unwrap();
        let run = |inputs: Inputs<'_, f64>| {
            let mut tape = Tape::with_params(&m.params);
            let out = m.net.forward(&mut tape, &inputs, None).unwrap();
            ScoreMaps::from_tape(&tape, out.branches[0].1, 4)
        };
        let a = run(Inputs {
            rgb_template: TemplateInput::Image(&t),
            ev_template: TemplateInput::Image(&te),
            rgb_search: &s,
            ev_search: &se,
        });
        let b = run(Inputs {
            rgb_template: TemplateInput::Tokens(&rt),
            ev_template: TemplateInput::Tokens(&et),
            rgb_search: &s,
            ev_search: &se,
        });
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_has_single_branch_and_parameter_groups_partition() {
        let m = Model::<f32>::init(&small_cfg(Variant::Baseline), 3).unwrap();
        let (t, s) = (image(8, 1), image(16, 2));
        let inputs =
            Inputs { rgb_template: TemplateInput::Image(&t), ev_template: TemplateInput::Image(&t), rgb_search: &s, ev_search: &s };
        let mut tape = Tape::with_params(&m.params);
        let out = m.net.forward(&mut tape, &inputs, None).unwrap();
        assert_eq!(out.branches.len(), 1);
        assert!(out.gaussians.is_none());
        for (_, p) in m.params.iter() {
            let backbone = p.name.starts_with("backbone.");
            assert_eq!(backbone, p.group == ParamGroup::Backbone, "{}", p.name);
        }
        assert!(m.params.find("fuse1x1.weight").is_some());
    }

    #[test]
    fn sampling_changes_output_only_with_noise() {
        let m = Model::<f64>::init(&small_cfg(Variant::Full), 4).unwrap();
        let (t, s) = (image(8, 9), image(16, 10));
        let inputs =
            Inputs { rgb_template: TemplateInput::Image(&t), ev_template: TemplateInput::Image(&t), rgb_search: &s, ev_search: &s };
        let run = |noise: Option<&mut ChaCha8Rng>| {
            let mut tape = Tape::with_params(&m.params);
            let out = m.net.forward(&mut tape, &inputs, noise).unwrap();
            ScoreMaps::from_tape(&tape, out.branches[0].1, 4)
        };
        assert_eq!(run(None), run(None));
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(run(Some(&mut r1)), run(Some(&mut r2)));
        assert_ne!(run(Some(&mut r1)), run(None));
    }
}
