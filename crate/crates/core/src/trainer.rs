//! Training: pair sampling, the joint objective, optimizer steps and the
//! learning-rate schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::bbox::BoundingBox;
use crate::config::{DataConfig, LossConfig, ModelConfig, RunConfig, TrainConfig};
use crate::datamodel::{crop_region, pair_frame_with_events, SequenceRecord};
use crate::error::{Error, Result};
use crate::head::{branch_loss, gt_response_map, total_loss, BranchVars, LossBundle};
use crate::imaging::Image;
use crate::matrix::Matrix;
use crate::model::{Branch, Inputs, Model, Network, TemplateInput};
use crate::optim::{clip_grad_norm, AdamW};
use crate::params::{ParamGroup, ParamId};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// `(lr_backbone, lr_other)` for an epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> (f64, f64) {
    let f = if epoch >= cfg.lr_decay_epoch { cfg.lr_decay_factor } else { 1.0 };
    (cfg.lr_backbone * f, cfg.lr_other * f)
}

/// A sequence with every frame's RGB image and normalized event image
/// precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub name: String,
    pub rgb: Vec<Image>,
    pub events: Vec<Image>,
    pub groundtruth: Vec<Option<BoundingBox>>,
}

impl PreparedSequence {
    pub fn new(seq: &SequenceRecord) -> Result<Self> {
        let mut rgb = Vec::with_capacity(seq.len());
        let mut events = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let pair = pair_frame_with_events(seq, i)?;
            events.push(pair.event_image());
            rgb.push(pair.rgb);
        }
        Ok(Self { name: seq.name.clone(), rgb, events, groundtruth: seq.groundtruth.clone() })
    }

    pub fn present_frames(&self) -> Vec<usize> {
        (0..self.groundtruth.len()).filter(|&i| self.groundtruth[i].is_some_and(|b| b.has_positive_area())).collect()
    }
}

/// Template and search crops for one training example.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub rgb_template: Image,
    pub ev_template: Image,
    pub rgb_search: Image,
    pub ev_search: Image,
    /// Search-frame groundtruth in search-patch pixels.
    pub target: BoundingBox,
    pub template_frame: usize,
    pub search_frame: usize,
}

impl TrainingSample {
    pub fn inputs<T>(&self) -> Inputs<'_, T> {
        Inputs {
            rgb_template: TemplateInput::Image(&self.rgb_template),
            ev_template: TemplateInput::Image(&self.ev_template),
            rgb_search: &self.rgb_search,
            ev_search: &self.ev_search,
        }
    }
}

/// Draws a template frame and a later search frame at most `max_gap` apart,
/// then crops both modalities. `None` means no usable pair (too few
/// annotated frames, or jitter pushed the target centre out of the crop).
pub fn sample_training_pair<R: Rng + ?Sized>(
    seq: &PreparedSequence,
    data: &DataConfig,
    model: &ModelConfig,
    rng: &mut R,
) -> Result<Option<TrainingSample>> {
    let present = seq.present_frames();
    let mut pairs = Vec::new();
    for (a, &i) in present.iter().enumerate() {
        for &j in &present[a + 1..] {
            if j - i > data.max_gap {
                break;
            }
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let (ti, si) = pairs[rng.random_range(0..pairs.len())];
    let tbox = seq.groundtruth[ti].expect("present frame");
    let sbox = seq.groundtruth[si].expect("present frame");

    let t_rgb = crop_region(&seq.rgb[ti], &tbox, data.template_factor, model.template_size)?;
    let t_ev = crop_region(&seq.events[ti], &tbox, data.template_factor, model.template_size)?;

    let (cx, cy) = sbox.center();
    let mut jitter = |span: f64| if span > 0.0 { rng.random_range(-span..span) } else { 0.0 };
    let jx = jitter(data.center_jitter) * sbox.w;
    let jy = jitter(data.center_jitter) * sbox.h;
    let ls = jitter(data.scale_jitter.ln());
    let s = ls.exp();
    let region = BoundingBox::from_center(cx + jx, cy + jy, sbox.w * s, sbox.h * s);
    let s_rgb = crop_region(&seq.rgb[si], &region, data.search_factor, model.search_size)?;
    let s_ev = crop_region(&seq.events[si], &region, data.search_factor, model.search_size)?;
    let target = s_rgb.to_patch(&sbox);
    let (tx, ty) = target.center();
    let side = model.search_size as f64;
    if !(tx >= 0.0 && tx < side && ty >= 0.0 && ty < side) {
        return Ok(None);
    }
    Ok(Some(TrainingSample {
        rgb_template: t_rgb.patch,
        ev_template: t_ev.patch,
        rgb_search: s_rgb.patch,
        ev_search: s_ev.patch,
        target,
        template_frame: ti,
        search_frame: si,
    }))
}

/// Loss nodes of one sample.
pub struct Objective {
    pub total: Var,
    pub branches: Vec<(Branch, BranchVars)>,
    /// `(kl_v, kl_cm)`.
    pub kl: Option<(Var, Var)>,
}

/// Builds the full objective for one sample on `tape`. `Ok(None)` when the
/// target falls outside the search grid.
pub fn sample_objective<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: &Network,
    sample: &TrainingSample,
    loss: &LossConfig,
    noise: Option<&mut ChaCha8Rng>,
) -> Result<Option<Objective>> {
    let grid = net.config.search_grid();
    let Some(target) = gt_response_map::<T>(&sample.target, grid, net.config.patch_size) else {
        return Ok(None);
    };
    let out = net.forward(tape, &sample.inputs(), noise)?;
    let branches: Vec<(Branch, BranchVars)> =
        out.branches.iter().map(|&(b, maps)| (b, branch_loss(tape, maps, &target, grid, loss))).collect();
    let mut terms: Vec<(Var, T)> = branches.iter().map(|(_, v)| (v.total, T::one())).collect();
    let kl = out.gaussians.map(|(g_v, g_cm)| {
        let kv = tape.kl_standard_normal(g_v.mu, g_v.log_var);
        let kc = tape.kl_standard_normal(g_cm.mu, g_cm.log_var);
        (kv, kc)
    });
    if let Some((kv, kc)) = kl {
        let a = T::lit(loss.alpha_kl);
        terms.push((kv, a));
        terms.push((kc, a));
    }
    let total = tape.weighted_sum(&terms);
    Ok(Some(Objective { total, branches, kl }))
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub branches: Vec<(Branch, LossBundle<f64>)>,
    pub kl_v: Option<f64>,
    pub kl_cm: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub samples: usize,
}

impl StepReport {
    pub fn branch(&self, b: Branch) -> Option<&LossBundle<f64>> {
        self.branches.iter().find(|(k, _)| *k == b).map(|(_, l)| l)
    }

    /// One log record; keys are emitted in sorted order.
    pub fn to_json(&self, variant: &str, config_hash: &str) -> String {
        let mut branches = serde_json::Map::new();
        for (b, l) in &self.branches {
            branches.insert(
                b.name().to_string(),
                json!({ "cls": l.cls, "iou": l.iou, "l1": l.l1, "total": l.branch_total }),
            );
        }
        json!({
            "step": self.step,
            "epoch": self.epoch,
            "variant": variant,
            "config_hash": config_hash,
            "lr_backbone": self.lr_backbone,
            "lr_other": self.lr_other,
            "total": self.total,
            "kl_v": self.kl_v,
            "kl_cm": self.kl_cm,
            "grad_norm": self.grad_norm,
            "branches": branches,
        })
        .to_string()
    }
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
    sample_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

const SAMPLE_STREAM: u64 = 0x5a4d_504c;
const NOISE_STREAM: u64 = 0x4e4f_4953;

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(&config.model, config.train.seed)?;
        Ok(Self::from_model(config, model))
    }

    pub fn from_model(config: RunConfig, model: Model<T>) -> Self {
        let optimizer = AdamW::new(&model.params);
        let seed = config.train.seed;
        Self {
            sample_rng: ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_STREAM),
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM),
            config,
            model,
            optimizer,
            step: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.step / self.config.train.steps_per_epoch.max(1)
    }

    /// Draws `batch_size` valid samples from randomly chosen sequences.
    pub fn sample_batch(&mut self, seqs: &[PreparedSequence]) -> Result<Vec<TrainingSample>> {
        let usable: Vec<&PreparedSequence> = seqs.iter().filter(|s| s.present_frames().len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::Degenerate("no sequence has two annotated frames".into()));
        }
        let want = self.config.train.batch_size;
        let mut batch = Vec::with_capacity(want);
        let mut attempts = 0;
        while batch.len() < want {
            attempts += 1;
            if attempts > 100 * want {
                return Err(Error::Degenerate("could not draw valid training pairs".into()));
            }
            let seq = usable[self.sample_rng.random_range(0..usable.len())];
            if let Some(s) = sample_training_pair(seq, &self.config.data, &self.config.model, &mut self.sample_rng)? {
                batch.push(s);
            }
        }
        Ok(batch)
    }

    /// Forward/backward over `batch`, gradient averaging, clipping and one
    /// AdamW update.
    pub fn training_step(&mut self, batch: &[TrainingSample]) -> Result<StepReport> {
        let epoch = self.epoch();
        let (lr_b, lr_o) = lr_schedule(&self.config.train, epoch);
        let mut acc: Option<Vec<(ParamId, Matrix<T>)>> = None;
        let mut sums: Vec<(Branch, [f64; 4])> = Vec::new();
        let (mut kl_v, mut kl_cm, mut total, mut used) = (0.0, 0.0, 0.0, 0usize);
        let mut has_kl = false;
        for sample in batch {
            let mut tape = Tape::with_params(&self.model.params);
            let Some(obj) =
                sample_objective(&mut tape, &self.model.net, sample, &self.config.loss, Some(&mut self.noise_rng))?
            else {
                continue;
            };
            let bundles: Vec<(Branch, LossBundle<T>)> = obj.branches.iter().map(|(b, v)| (*b, v.bundle(&tape))).collect();
            for (b, l) in &bundles {
                for (term, v) in [("cls", l.cls), ("iou", l.iou), ("l1", l.l1)] {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("step {}: {} branch {term} loss is {v}", self.step, b.name())));
                    }
                }
            }
            let kls = obj.kl.map(|(a, b)| (tape.value(a).value(), tape.value(b).value()));
            let sample_total = match (&bundles[..], kls) {
                ([(_, f), (_, c), (_, v)], Some((kv, kc))) => total_loss(f, c, v, kv, kc, &self.config.loss)
                    .map_err(|e| Error::Numeric(format!("step {}: {e}", self.step)))?,
                _ => bundles[0].1.branch_total,
            };
            let t = tape.value(obj.total).value();
            if !t.is_finite() {
                return Err(Error::Numeric(format!("step {}: total loss is {t}", self.step)));
            }
            let grads = tape.backward(obj.total).param_grads(&self.model.params);
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for ((_, dst), (_, g)) in a.iter_mut().zip(&grads) {
                        dst.add_assign(g);
                    }
                }
            }
            for (i, (b, l)) in bundles.iter().enumerate() {
                if sums.len() <= i {
                    sums.push((*b, [0.0; 4]));
                }
                let s = &mut sums[i].1;
                s[0] += l.cls.to_f64_lossy();
                s[1] += l.iou.to_f64_lossy();
                s[2] += l.l1.to_f64_lossy();
                s[3] += l.branch_total.to_f64_lossy();
            }
            if let Some((kv, kc)) = kls {
                has_kl = true;
                kl_v += kv.to_f64_lossy();
                kl_cm += kc.to_f64_lossy();
            }
            total += sample_total.to_f64_lossy();
            used += 1;
        }
        let Some(mut grads) = acc else {
            return Err(Error::Degenerate("every sample in the batch was skipped".into()));
        };
        let n = used as f64;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(T::lit(1.0 / n));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("step {}: gradient norm is {grad_norm}", self.step)));
        }
        self.optimizer.step(
            &mut self.model.params,
            &grads,
            |g| if g == ParamGroup::Backbone { lr_b } else { lr_o },
            self.config.train.weight_decay,
        );
        let report = StepReport {
            step: self.step,
            epoch,
            lr_backbone: lr_b,
            lr_other: lr_o,
            branches: sums
                .into_iter()
                .map(|(b, s)| (b, LossBundle { cls: s[0] / n, iou: s[1] / n, l1: s[2] / n, branch_total: s[3] / n }))
                .collect(),
            kl_v: has_kl.then_some(kl_v / n),
            kl_cm: has_kl.then_some(kl_cm / n),
            total: total / n,
            grad_norm,
            samples: used,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` sample-then-update iterations, reporting each.
    pub fn run(
        &mut self,
        seqs: &[PreparedSequence],
        steps: usize,
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let batch = self.sample_batch(seqs)?;
            let report = self.training_step(&batch)?;
            on_step(&report)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic_sequence, SynthConfig};

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig {
            dim: 16,
            depth: 2,
            heads: 2,
            patch_size: 8,
            mlp_ratio: 2.0,
            elim_blocks: vec![1],
            keep_ratio: 0.7,
            template_size: 32,
            search_size: 64,
            uncert_heads: 2,
            head_channels: 8,
            ..ModelConfig::default()
        };
        c.train.batch_size = 2;
        c.train.lr_backbone = 1e-3;
        c.train.lr_other = 1e-3;
        c
    }

    fn prepared(n: usize) -> PreparedSequence {
        let cfg = SynthConfig { n_frames: n, width: 96, height: 80, object_w: 16.0, object_h: 16.0, ..SynthConfig::default() };
        PreparedSequence::new(&generate_synthetic_sequence(&cfg, 3).unwrap()).unwrap()
    }

    #[test]
    fn schedule_boundaries() {
        let t = TrainConfig::default();
        assert_eq!(lr_schedule(&t, 0), (5e-6, 5e-5));
        assert_eq!(lr_schedule(&t, 49), (5e-6, 5e-5));
        let (b, o) = lr_schedule(&t, 50);
        assert!((b - 1e-6).abs() < 1e-18 && (o - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn two_frame_sequence_yields_the_only_pair() {
        let seq = prepared(2);
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let s = sample_training_pair(&seq, &cfg.data, &cfg.model, &mut rng).unwrap().unwrap();
            assert_eq!((s.template_frame, s.search_frame), (0, 1));
        }
    }

    #[test]
    fn zero_jitter_centres_search_on_target() {
        let seq = prepared(6);
        let mut cfg = tiny_config();
        cfg.data.center_jitter = 0.0;
        cfg.data.scale_jitter = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_training_pair(&seq, &cfg.data, &cfg.model, &mut rng).unwrap().unwrap();
        let (cx, cy) = s.target.center();
        assert!((cx - 32.0).abs() < 1e-9 && (cy - 32.0).abs() < 1e-9);
        // search factor 4 around a 16 px object → 64 px crop at scale 1
        assert!((s.target.w - 16.0).abs() < 1e-9);
    }

    #[test]
    fn empirical_gap_bounded() {
        let seq = prepared(40);
        let mut cfg = tiny_config();
        cfg.data.max_gap = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut max_gap = 0;
        for _ in 0..1000 {
            if let Some(s) = sample_training_pair(&seq, &cfg.data, &cfg.model, &mut rng).unwrap() {
                assert!(s.search_frame > s.template_frame);
                max_gap = max_gap.max(s.search_frame - s.template_frame);
            }
        }
        assert_eq!(max_gap, 7);
    }

    #[test]
    fn no_pairs_signals_skip() {
        let mut seq = prepared(3);
        seq.groundtruth = vec![None, Some(BoundingBox::new(1.0, 1.0, 5.0, 5.0)), None];
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_pair(&seq, &cfg.data, &cfg.model, &mut rng).unwrap().is_none());
    }

    #[test]
    fn same_state_same_batch_same_loss() {
        let seq = vec![prepared(8)];
        let mut a = Trainer::<f64>::new(tiny_config()).unwrap();
        let mut b = Trainer::<f64>::new(tiny_config()).unwrap();
        let batch = a.sample_batch(&seq).unwrap();
        let batch_b = b.sample_batch(&seq).unwrap();
        assert_eq!(batch[0].target, batch_b[0].target);
        let ra = a.training_step(&batch).unwrap();
        let rb = b.training_step(&batch).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.branches.len(), 3);
        assert!(ra.kl_v.unwrap() >= 0.0);
    }

    #[test]
    fn alpha_zero_with_tiny_variance_sums_branches() {
        let seq = vec![prepared(8)];
        let mut cfg = tiny_config();
        cfg.loss.alpha_kl = 0.0;
        cfg.model.logvar_clamp = 1e-3;
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let batch = t.sample_batch(&seq).unwrap();
        let r = t.training_step(&batch).unwrap();
        let sum: f64 = r.branches.iter().map(|(_, l)| l.branch_total).sum();
        assert!((r.total - sum).abs() < 1e-12);
    }

    #[test]
    fn groups_get_their_own_rates() {
        let seq = vec![prepared(8)];
        let mut cfg = tiny_config();
        cfg.train.lr_backbone = 1e-9;
        cfg.train.lr_other = 1e-2;
        cfg.train.weight_decay = 0.0;
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let before = t.model.params.clone();
        let batch = t.sample_batch(&seq).unwrap();
        t.training_step(&batch).unwrap();
        let mut moved = [0.0f64; 2];
        for ((_, p0), (_, p1)) in before.iter().zip(t.model.params.iter()) {
            let d = p0.value.as_slice().iter().zip(p1.value.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let slot = if p0.group == ParamGroup::Backbone { 0 } else { 1 };
            moved[slot] = moved[slot].max(d);
        }
        assert!(moved[0] <= 1.1e-9 && moved[1] > 1e-3, "{moved:?}");
    }

    #[test]
    fn report_serializes_deterministically() {
        let r = StepReport {
            step: 3,
            epoch: 0,
            lr_backbone: 5e-6,
            lr_other: 5e-5,
            branches: vec![(Branch::Fusion, LossBundle { cls: 1.0, iou: 0.5, l1: 0.1, branch_total: 2.5 })],
            kl_v: None,
            kl_cm: None,
            total: 2.5,
            grad_norm: 0.25,
            samples: 2,
        };
        let line = r.to_json("baseline", "abc");
        assert_eq!(line, r.to_json("baseline", "abc"));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["variant"], "baseline");
        assert_eq!(v["branches"]["fusion"]["total"], 2.5);
    }
}
