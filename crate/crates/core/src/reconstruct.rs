//! Stage two: the low-resolution deformation branch (an encoder-decoder with
//! skip connections) and the fully-convolutional high-resolution refiner,
//! jointly trained without labels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align::{align_pair, AlignmentResult, PyramidConfig};
use crate::datakit::save_image;
use crate::losses::{
    consistency_loss_grad, content_loss_grad, reconstruction_objective, seam_loss_grad, stage_total, FeatureExtractor,
    LossWeights, TapDepth,
};
use crate::tensorcore::checkpoint::{load_checkpoint, save_checkpoint};
use crate::tensorcore::{adam_step, kernels, AdamConfig, AdamState, Graph, NodeId, Shape4, Tensor4};
use crate::warpmask::MaskSet;
use crate::{rng, Error, Result};

/// Filter counts of the low-resolution branch at full width.
pub const LR_FILTERS: [usize; 15] = [64, 64, 128, 128, 256, 256, 512, 512, 256, 256, 128, 128, 64, 64, 3];
pub const HR_FILTERS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    pub channel_scale: f64,
    /// (height, width) of the low-resolution branch.
    pub lr_working_size: (usize, usize),
    pub resblock_count: usize,
    /// Cut the gradient from the high-resolution branch into S_LR.
    pub detach_hr_input: bool,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            channel_scale: 0.125,
            lr_working_size: (64, 64),
            resblock_count: 4,
            detach_hr_input: false,
        }
    }
}

impl BranchConfig {
    /// Full-width network: 256x256 low-resolution input, 8 residual blocks.
    pub fn full_scale() -> Self {
        Self {
            channel_scale: 1.0,
            lr_working_size: (256, 256),
            resblock_count: 8,
            detach_hr_input: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channel_scale > 0.0 && self.channel_scale <= 1.0) {
            return Err(Error::Config(format!("channel_scale {} outside (0, 1]", self.channel_scale)));
        }
        let (h, w) = self.lr_working_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("lr_working_size {h}x{w} must be a positive multiple of 8")));
        }
        Ok(())
    }

    fn width(&self, full: usize) -> usize {
        ((full as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// Scaled filter counts of the fifteen low-resolution conv layers.
    pub fn lr_filters(&self) -> [usize; 15] {
        let mut f = LR_FILTERS.map(|c| self.width(c));
        f[14] = 3;
        f
    }

    pub fn hr_filters(&self) -> usize {
        self.width(HR_FILTERS)
    }
}

/// Names of the fifteen conv layers of the low-resolution branch, by depth.
pub fn lr_conv_names() -> [String; 15] {
    std::array::from_fn(|i| format!("c{:02}", i + 1))
}

fn build_lr(cfg: &BranchConfig, seed: u64) -> Result<Graph> {
    let f = cfg.lr_filters();
    let mut rng = rng::stream(seed, "lr-branch", 0);
    let mut g = Graph::new();
    let names = lr_conv_names();
    let mut x = g.input("lr_input", 6)?;
    let mut conv_relu = |g: &mut Graph, x: NodeId, i: usize| -> Result<NodeId> {
        let c = g.conv3x3(&names[i], x, f[i], &mut rng)?;
        g.relu(&format!("{}.relu", names[i]), c)
    };
    let mut skips = Vec::new();
    for stage in 0..3 {
        x = conv_relu(&mut g, x, 2 * stage)?;
        x = conv_relu(&mut g, x, 2 * stage + 1)?;
        skips.push(x);
        x = g.maxpool2x2(&format!("pool{}", stage + 1), x)?;
    }
    x = conv_relu(&mut g, x, 6)?;
    x = conv_relu(&mut g, x, 7)?;
    let mut rng = rng::stream(seed, "lr-branch", 1);
    for stage in 0..3 {
        let i = 8 + 2 * stage;
        let up = g.deconv2x2(&format!("up{}", stage + 1), x, f[i], &mut rng)?;
        let up = g.relu(&format!("up{}.relu", stage + 1), up)?;
        let cat = g.concat(&format!("cat{}", stage + 1), &[up, skips[2 - stage]])?;
        let mut cr = |g: &mut Graph, x: NodeId, i: usize| -> Result<NodeId> {
            let c = g.conv3x3(&names[i], x, f[i], &mut rng)?;
            g.relu(&format!("{}.relu", names[i]), c)
        };
        x = cr(&mut g, cat, i)?;
        x = cr(&mut g, x, i + 1)?;
    }
    g.conv3x3(&names[14], x, 3, &mut rng)?;
    Ok(g)
}

fn build_hr(cfg: &BranchConfig, seed: u64) -> Result<Graph> {
    let f = cfg.hr_filters();
    let mut rng = rng::stream(seed, "hr-branch", 0);
    let mut g = Graph::new();
    let s_lr = g.input("s_lr", 3)?;
    let wa = g.input("warped_a", 3)?;
    let wb = g.input("warped_b", 3)?;
    let src = if cfg.detach_hr_input { g.detach("s_lr.detach", s_lr)? } else { s_lr };
    let up = g.resize_like("s_lr.up", src, wa)?;
    let cat = g.concat("hr_cat", &[up, wa, wb])?;
    let first = g.conv3x3("h_in", cat, f, &mut rng)?;
    let first = g.relu("h_in.relu", first)?;
    let mut x = first;
    for r in 0..cfg.resblock_count {
        let t = g.conv3x3(&format!("res{r}.a"), x, f, &mut rng)?;
        let t = g.relu(&format!("res{r}.a.relu"), t)?;
        let t = g.conv3x3(&format!("res{r}.b"), t, f, &mut rng)?;
        let s = g.add(&format!("res{r}.sum"), t, x)?;
        x = g.relu(&format!("res{r}.relu"), s)?;
    }
    let pen = g.conv3x3("h_mid", x, f, &mut rng)?;
    let skip = g.add("h_skip", pen, first)?;
    let skip = g.relu("h_skip.relu", skip)?;
    g.conv3x3("h_out", skip, 3, &mut rng)?;
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct StitchModel {
    pub config: BranchConfig,
    pub lr_graph: Graph,
    pub hr_graph: Graph,
    pub lr_opt: AdamState,
    pub hr_opt: AdamState,
}

pub fn build_model(cfg: &BranchConfig, seed: u64) -> Result<StitchModel> {
    cfg.validate()?;
    Ok(StitchModel {
        config: *cfg,
        lr_graph: build_lr(cfg, seed)?,
        hr_graph: build_hr(cfg, seed)?,
        lr_opt: AdamState::default(),
        hr_opt: AdamState::default(),
    })
}

fn last_node(g: &Graph) -> NodeId {
    g.nodes().len() - 1
}

impl StitchModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &[("lr", &self.lr_graph), ("hr", &self.hr_graph)])
    }

    /// Restore both branches; the branch configuration is recovered from the
    /// stored topology where it matters (widths live in the graphs).
    pub fn load(path: &Path, config: &BranchConfig) -> Result<Self> {
        let mut sections = load_checkpoint(path)?;
        let mut take = |name: &str| {
            sections
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| sections.remove(i).1)
                .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
        };
        let lr_graph = take("lr")?;
        let hr_graph = take("hr")?;
        lr_graph.node_id("lr_input")?;
        hr_graph.node_id("s_lr")?;
        let detach = hr_graph.node_id("s_lr.detach").is_ok();
        Ok(Self {
            config: BranchConfig {
                detach_hr_input: detach,
                ..*config
            },
            lr_graph,
            hr_graph,
            lr_opt: AdamState::default(),
            hr_opt: AdamState::default(),
        })
    }

    fn lr_input(&self, warped_a: &Tensor4, warped_b: &Tensor4) -> Result<Tensor4> {
        if warped_a.shape() != warped_b.shape() {
            return Err(Error::shape("forward_lr", format!("{} vs {}", warped_a.shape(), warped_b.shape())));
        }
        let (h, w) = self.config.lr_working_size;
        let a = kernels::resize_bilinear(warped_a, h, w);
        let b = kernels::resize_bilinear(warped_b, h, w);
        Tensor4::concat_channels(&[&a, &b])
    }
}

/// Low-resolution stitched image from the two warped images (resized to the
/// working size first).
pub fn forward_lr(model: &StitchModel, warped_a: &Tensor4, warped_b: &Tensor4) -> Result<Tensor4> {
    let x = model.lr_input(warped_a, warped_b)?;
    let acts = model.lr_graph.forward(&[("lr_input", &x)])?;
    Ok(acts.get(last_node(&model.lr_graph)).clone())
}

/// High-resolution stitched image at the canvas size of the warped images.
pub fn forward_hr(model: &StitchModel, s_lr: &Tensor4, warped_a: &Tensor4, warped_b: &Tensor4) -> Result<Tensor4> {
    let acts = model
        .hr_graph
        .forward(&[("s_lr", s_lr), ("warped_a", warped_a), ("warped_b", warped_b)])?;
    Ok(acts.get(last_node(&model.hr_graph)).clone())
}

/// One training sample with its low-resolution inputs precomputed.
struct Prepared {
    lr_input: Tensor4,
    lr_a: Tensor4,
    lr_b: Tensor4,
    lr_masks: MaskSet,
    warped_a: Tensor4,
    warped_b: Tensor4,
    masks: MaskSet,
}

fn prepare(model: &StitchModel, s: &AlignmentResult) -> Result<Prepared> {
    let (h, w) = model.config.lr_working_size;
    Ok(Prepared {
        lr_input: model.lr_input(&s.warped_a, &s.warped_b)?,
        lr_a: kernels::resize_bilinear(&s.warped_a, h, w),
        lr_b: kernels::resize_bilinear(&s.warped_b, h, w),
        lr_masks: s.masks.resized(h, w),
        warped_a: s.warped_a.clone(),
        warped_b: s.warped_b.clone(),
        masks: s.masks.clone(),
    })
}

/// Per-sample values of every term of the reconstruction objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lr: f64,
    pub l_hr: f64,
    pub l_cs: f64,
    pub l_r: f64,
    pub content_lr: f64,
    pub seam_lr: f64,
    pub content_hr: f64,
    pub seam_hr: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &Self, k: f64) {
        self.l_lr += k * o.l_lr;
        self.l_hr += k * o.l_hr;
        self.l_cs += k * o.l_cs;
        self.l_r += k * o.l_r;
        self.content_lr += k * o.content_lr;
        self.seam_lr += k * o.seam_lr;
        self.content_hr += k * o.content_hr;
        self.seam_hr += k * o.seam_hr;
    }
}

/// Loss weights plus the two frozen feature extractors.
pub struct Objective {
    pub weights: LossWeights,
    pub fx_lr: FeatureExtractor,
    pub fx_hr: FeatureExtractor,
}

impl Objective {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            fx_lr: FeatureExtractor::new(TapDepth::Deep),
            fx_hr: FeatureExtractor::new(TapDepth::Shallow),
        }
    }
}

/// Parameter gradients of both branches.
pub struct ModelGradients {
    pub lr: Vec<Tensor4>,
    pub hr: Vec<Tensor4>,
}

fn scaled(mut t: Tensor4, k: f64) -> Tensor4 {
    t.scale(k);
    t
}

/// Objective value and gradients for one prepared sample. `hr_active = false`
/// drops the high-resolution and consistency terms.
fn step_grads(model: &StitchModel, p: &Prepared, obj: &Objective, hr_active: bool) -> Result<(LossBreakdown, ModelGradients)> {
    let w = &obj.weights;
    let lr_acts = model.lr_graph.forward(&[("lr_input", &p.lr_input)])?;
    let lr_out = last_node(&model.lr_graph);
    let s_lr = lr_acts.get(lr_out);
    let m = &p.lr_masks;
    let (c_lr, gc_lr) = content_loss_grad(s_lr, &p.lr_a, &p.lr_b, &m.content_a, &m.content_b, &obj.fx_lr)?;
    let (s_lr_seam, gs_lr) = seam_loss_grad(s_lr, &p.lr_a, &p.lr_b, &m.seam_a, &m.seam_b)?;
    let l_lr = stage_total(c_lr, s_lr_seam, w);
    let mut g_lr = scaled(gc_lr, w.omega_lr * w.lambda_c);
    g_lr.add_assign(&scaled(gs_lr, w.omega_lr * w.lambda_s))?;

    let mut out = LossBreakdown {
        l_lr,
        content_lr: c_lr,
        seam_lr: s_lr_seam,
        ..Default::default()
    };
    let mut hr_grads: Vec<Tensor4> = model.hr_graph.params().iter().map(|t| Tensor4::zeros(t.shape())).collect();

    if hr_active {
        let hr_acts = model
            .hr_graph
            .forward(&[("s_lr", s_lr), ("warped_a", &p.warped_a), ("warped_b", &p.warped_b)])?;
        let hr_out = last_node(&model.hr_graph);
        let s_hr = hr_acts.get(hr_out);
        let m = &p.masks;
        let (c_hr, gc_hr) = content_loss_grad(s_hr, &p.warped_a, &p.warped_b, &m.content_a, &m.content_b, &obj.fx_hr)?;
        let (s_hr_seam, gs_hr) = seam_loss_grad(s_hr, &p.warped_a, &p.warped_b, &m.seam_a, &m.seam_b)?;
        let l_hr = stage_total(c_hr, s_hr_seam, w);
        let cs = consistency_loss_grad(s_hr, s_lr)?;
        let mut g_hr = scaled(gc_hr, w.omega_hr * w.lambda_c);
        g_hr.add_assign(&scaled(gs_hr, w.omega_hr * w.lambda_s))?;
        g_hr.add_assign(&scaled(cs.grad_hr, w.omega_cs))?;
        g_lr.add_assign(&scaled(cs.grad_lr, w.omega_cs))?;

        let hg = model.hr_graph.backward_seeded(&hr_acts, &[(hr_out, g_hr)])?;
        let s_lr_node = model.hr_graph.node_id("s_lr")?;
        if let Some(g) = hg.node(s_lr_node) {
            g_lr.add_assign(g)?;
        }
        hr_grads = hg.params;
        out.l_hr = l_hr;
        out.l_cs = cs.value;
        out.content_hr = c_hr;
        out.seam_hr = s_hr_seam;
    }
    out.l_r = reconstruction_objective(out.l_lr, out.l_hr, out.l_cs, w);

    let lg = model.lr_graph.backward_seeded(&lr_acts, &[(lr_out, g_lr)])?;
    Ok((
        out,
        ModelGradients {
            lr: lg.params,
            hr: hr_grads,
        },
    ))
}

/// Objective value and parameter gradients for one aligned sample.
pub fn objective_grads(model: &StitchModel, sample: &AlignmentResult, obj: &Objective) -> Result<(LossBreakdown, ModelGradients)> {
    step_grads(model, &prepare(model, sample)?, obj, true)
}

/// Objective value for one aligned sample without gradients.
pub fn objective(model: &StitchModel, sample: &AlignmentResult, obj: &Objective) -> Result<LossBreakdown> {
    let p = prepare(model, sample)?;
    let w = &obj.weights;
    let lr_acts = model.lr_graph.forward(&[("lr_input", &p.lr_input)])?;
    let s_lr = lr_acts.get(last_node(&model.lr_graph));
    let m = &p.lr_masks;
    let content_lr = crate::losses::content_loss(s_lr, &p.lr_a, &p.lr_b, &m.content_a, &m.content_b, &obj.fx_lr)?;
    let seam_lr = crate::losses::seam_loss(s_lr, &p.lr_a, &p.lr_b, &m.seam_a, &m.seam_b)?;
    let s_hr = forward_hr(model, s_lr, &p.warped_a, &p.warped_b)?;
    let m = &p.masks;
    let content_hr = crate::losses::content_loss(&s_hr, &p.warped_a, &p.warped_b, &m.content_a, &m.content_b, &obj.fx_hr)?;
    let seam_hr = crate::losses::seam_loss(&s_hr, &p.warped_a, &p.warped_b, &m.seam_a, &m.seam_b)?;
    let l_cs = crate::losses::consistency_loss(&s_hr, s_lr)?;
    let l_lr = stage_total(content_lr, seam_lr, w);
    let l_hr = stage_total(content_hr, seam_hr, w);
    Ok(LossBreakdown {
        l_lr,
        l_hr,
        l_cs,
        l_r: reconstruction_objective(l_lr, l_hr, l_cs, w),
        content_lr,
        seam_lr,
        content_hr,
        seam_hr,
    })
}

/// Dataset mean of every objective term.
pub fn evaluate(model: &StitchModel, dataset: &[AlignmentResult], obj: &Objective) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = LossBreakdown::default();
    for s in dataset {
        acc.accumulate(&objective(model, s, obj)?, 1.0 / dataset.len() as f64);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many updates even if epochs remain.
    pub max_iterations: Option<usize>,
    pub adam: AdamConfig,
    /// Learning-rate multiplier per epoch (applied continuously).
    pub decay_rate: f64,
    /// Fraction of iterations that train the low-resolution branch alone.
    pub warm_start_fraction: f64,
    /// Reshuffle the sample order every epoch from the seed.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            max_iterations: None,
            adam: AdamConfig::default(),
            decay_rate: 0.96,
            warm_start_fraction: 0.0,
            shuffle: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,L_LR,L_HR,L_CS,L_R\n");
        for r in &self.records {
            let l = &r.losses;
            out.push_str(&format!("{},{},{},{},{}\n", r.iteration, l.l_lr, l.l_hr, l.l_cs, l.l_r));
        }
        out
    }

    pub fn total(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.losses.l_r).collect()
    }
}

/// Trailing moving average; entry `i` averages `values[i + 1 - window ..= i]`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Joint Adam training of both branches under the reconstruction objective.
pub fn train(model: &mut StitchModel, dataset: &[AlignmentResult], weights: &LossWeights, cfg: &TrainConfig) -> Result<TrainTrace> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.validate()?;
    let obj = Objective::new(*weights);
    let prepared: Vec<Prepared> = dataset.iter().map(|s| prepare(model, s)).collect::<Result<_>>()?;
    let n = prepared.len();
    let total = cfg.max_iterations.map_or(cfg.epochs * n, |m| m.min(cfg.epochs * n));
    let warm = (cfg.warm_start_fraction.clamp(0.0, 1.0) * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace::default();
    for it in 0..total {
        let epoch = it / n;
        if it % n == 0 && cfg.shuffle {
            order = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.seed, "train-order", epoch as u64));
        }
        let p = &prepared[order[it % n]];
        let hr_active = it >= warm;
        let (losses, grads) = step_grads(model, p, &obj, hr_active)?;
        if !losses.l_r.is_finite() {
            return Err(Error::Diverged(it));
        }
        let adam = AdamConfig {
            lr: cfg.adam.lr * cfg.decay_rate.powf(it as f64 / n as f64),
            ..cfg.adam
        };
        adam_step(model.lr_graph.params_mut(), &grads.lr, &mut model.lr_opt, &adam)?;
        if hr_active {
            adam_step(model.hr_graph.params_mut(), &grads.hr, &mut model.hr_opt, &adam)?;
        }
        if model.lr_graph.params().iter().chain(model.hr_graph.params()).any(|p| !p.all_finite()) {
            return Err(Error::Diverged(it));
        }
        trace.records.push(IterationRecord { iteration: it, losses });
    }
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct StitchOutput {
    /// Raw network output; clamp only for export.
    pub s_hr: Tensor4,
    pub s_lr: Tensor4,
    pub l_cs: f64,
    pub alignment: AlignmentResult,
}

/// Reconstruct an already aligned pair.
pub fn reconstruct(model: &StitchModel, alignment: AlignmentResult) -> Result<StitchOutput> {
    let s_lr = forward_lr(model, &alignment.warped_a, &alignment.warped_b)?;
    let s_hr = forward_hr(model, &s_lr, &alignment.warped_a, &alignment.warped_b)?;
    let l_cs = crate::losses::consistency_loss(&s_hr, &s_lr)?;
    Ok(StitchOutput {
        s_hr,
        s_lr,
        l_cs,
        alignment,
    })
}

/// Full pipeline: align, then both branches.
pub fn stitch(model: &StitchModel, reference: &Tensor4, target: &Tensor4, pyr: &PyramidConfig) -> Result<StitchOutput> {
    reconstruct(model, align_pair(reference, target, pyr)?)
}

/// Write the channel-mean activation of each low-resolution conv layer as
/// `layer_XX.png`, each normalized to the full 8-bit range.
pub fn dump_feature_maps(model: &StitchModel, warped_a: &Tensor4, warped_b: &Tensor4, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let x = model.lr_input(warped_a, warped_b)?;
    let acts = model.lr_graph.forward(&[("lr_input", &x)])?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (i, name) in lr_conv_names().iter().enumerate() {
        let t = acts.get(model.lr_graph.node_id(name)?);
        let s = t.shape();
        let mut mean = Tensor4::zeros(Shape4::new(1, 1, s.h, s.w));
        for c in 0..s.c {
            for (m, v) in mean.plane_mut(0, 0).iter_mut().zip(t.plane(0, c)) {
                *m += v / s.c as f64;
            }
        }
        let (lo, hi) = mean
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let norm = if hi > lo { mean.map(|v| (v - lo) / (hi - lo)) } else { mean.map(|_| 0.0) };
        let path = out_dir.join(format!("layer_{i:02}.png"));
        save_image(&norm, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::align_with_offsets;
    use crate::datakit::{gen_synthetic_pair, procedural_source};
    use crate::geometry::FourPointOffsets;
    use crate::tensorcore::LayerKind;

    fn conv_widths(g: &Graph) -> Vec<usize> {
        g.nodes()
            .iter()
            .filter_map(|n| match n.kind {
                LayerKind::Conv3x3 { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect()
    }

    fn count(g: &Graph, f: impl Fn(&LayerKind) -> bool) -> usize {
        g.nodes().iter().filter(|n| f(&n.kind)).count()
    }

    fn tiny() -> BranchConfig {
        BranchConfig {
            channel_scale: 0.0625,
            lr_working_size: (32, 32),
            resblock_count: 2,
            detach_hr_input: false,
        }
    }

    fn sample(seed: u64, offsets: FourPointOffsets) -> AlignmentResult {
        let src = procedural_source(96, 96, seed);
        let p = gen_synthetic_pair(&src, 0.0, 48, seed).unwrap();
        align_with_offsets(&p.reference, &p.target, &offsets).unwrap()
    }

    #[test]
    fn topology_matches_the_published_filter_list() {
        let full = build_lr(&BranchConfig::full_scale(), 0).unwrap();
        assert_eq!(conv_widths(&full), LR_FILTERS);
        assert_eq!(count(&full, |k| matches!(k, LayerKind::Maxpool2x2)), 3);
        assert_eq!(count(&full, |k| matches!(k, LayerKind::Deconv2x2 { .. })), 3);

        let desk = build_lr(&BranchConfig::default(), 0).unwrap();
        assert_eq!(conv_widths(&desk), [8, 8, 16, 16, 32, 32, 64, 64, 32, 32, 16, 16, 8, 8, 3]);

        let hr = build_hr(&BranchConfig::full_scale(), 0).unwrap();
        let widths = conv_widths(&hr);
        assert_eq!(widths.len(), 3 + 2 * 8);
        assert!(widths[..widths.len() - 1].iter().all(|&w| w == 64));
        assert_eq!(*widths.last().unwrap(), 3);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&tiny(), 5).unwrap();
        let b = build_model(&tiny(), 5).unwrap();
        assert_eq!(a.lr_graph.params(), b.lr_graph.params());
        assert_eq!(a.hr_graph.params(), b.hr_graph.params());
        let c = build_model(&tiny(), 6).unwrap();
        assert_ne!(a.lr_graph.params(), c.lr_graph.params());
        assert!(build_model(&BranchConfig { lr_working_size: (30, 32), ..tiny() }, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_zero_final_layer() {
        let mut m = build_model(&tiny(), 1).unwrap();
        let s = sample(1, FourPointOffsets::uniform(4.0, -3.0));
        let s_lr = forward_lr(&m, &s.warped_a, &s.warped_b).unwrap();
        assert_eq!(s_lr.shape(), Shape4::new(1, 3, 32, 32));
        for (h, w) in [(64, 80), (96, 96)] {
            let a = Tensor4::filled(Shape4::new(1, 3, h, w), 0.3);
            assert_eq!(forward_hr(&m, &s_lr, &a, &a).unwrap().shape(), Shape4::new(1, 3, h, w));
        }
        let n = m.lr_graph.params().len();
        for p in &mut m.lr_graph.params_mut()[n - 2..] {
            *p = Tensor4::zeros(p.shape());
        }
        let z = forward_lr(&m, &s.warped_a, &s.warped_b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_path_survives_zeroed_blocks() {
        let mut m = build_model(&tiny(), 2).unwrap();
        for (info, p) in m.hr_graph.param_info().to_vec().iter().zip(m.hr_graph.params_mut()) {
            if info.name.starts_with("res") {
                *p = Tensor4::zeros(p.shape());
            }
        }
        let a = Tensor4::filled(Shape4::new(1, 3, 40, 40), 0.5);
        let s_lr = Tensor4::filled(Shape4::new(1, 3, 32, 32), 0.5);
        let out = forward_hr(&m, &s_lr, &a, &a).unwrap();
        assert!(out.max_abs() > 0.0);
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let m = build_model(&tiny(), 3).unwrap();
        let s = sample(3, FourPointOffsets::uniform(6.0, 2.0));
        let obj = Objective::new(LossWeights::default());
        let (l, g) = objective_grads(&m, &s, &obj).unwrap();
        assert!(l.l_r.is_finite());
        for (i, t) in g.lr.iter().chain(&g.hr).enumerate() {
            assert!(t.all_finite(), "param {i}");
        }
        let weights_nonzero = |gs: &[Tensor4]| gs.iter().step_by(2).all(|t| t.max_abs() > 0.0);
        assert!(weights_nonzero(&g.lr) && weights_nonzero(&g.hr));
    }

    #[test]
    fn detach_cuts_the_cross_branch_gradient() {
        let s = sample(4, FourPointOffsets::uniform(5.0, 1.0));
        let obj = Objective::new(LossWeights {
            omega_lr: 0.0,
            omega_cs: 0.0,
            ..LossWeights::default()
        });
        let joint = build_model(&tiny(), 4).unwrap();
        let (_, g) = objective_grads(&joint, &s, &obj).unwrap();
        assert!(g.lr.iter().any(|t| t.max_abs() > 0.0));
        let cut = build_model(&BranchConfig { detach_hr_input: true, ..tiny() }, 4).unwrap();
        let (_, g) = objective_grads(&cut, &s, &obj).unwrap();
        assert!(g.lr.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut m = build_model(&tiny(), 5).unwrap();
        let before = (m.lr_graph.params().to_vec(), m.hr_graph.params().to_vec());
        let data = vec![sample(5, FourPointOffsets::ZERO)];
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        train(&mut m, &data, &LossWeights::zero(), &cfg).unwrap();
        assert_eq!(before.0, m.lr_graph.params());
        assert_eq!(before.1, m.hr_graph.params());
        assert!(matches!(train(&mut m, &[], &LossWeights::default(), &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![sample(6, FourPointOffsets::uniform(3.0, 0.0)), sample(7, FourPointOffsets::ZERO)];
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = build_model(&tiny(), 8).unwrap();
            let t = train(&mut m, &data, &LossWeights::default(), &cfg).unwrap();
            (m.lr_graph.params().to_vec(), m.hr_graph.params().to_vec(), t)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_model(&tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        m.save(&p).unwrap();
        let back = StitchModel::load(&p, &tiny()).unwrap();
        assert_eq!(back.lr_graph.params(), m.lr_graph.params());
        assert_eq!(back.hr_graph.topology(), m.hr_graph.topology());
    }

    #[test]
    fn stitch_reports_consistency() {
        let m = build_model(&tiny(), 10).unwrap();
        let src = procedural_source(96, 96, 10);
        let p = gen_synthetic_pair(&src, 4.0, 48, 10).unwrap();
        let out = stitch(&m, &p.reference, &p.target, &PyramidConfig::default()).unwrap();
        let c = out.alignment.canvas;
        assert_eq!(out.s_hr.shape(), Shape4::new(1, 3, c.height, c.width));
        let recomputed = crate::losses::consistency_loss(&out.s_hr, &out.s_lr).unwrap();
        assert!((recomputed - out.l_cs).abs() < 1e-9);
    }

    #[test]
    fn feature_dump_files() {
        let m = build_model(&tiny(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let zero = Tensor4::zeros(Shape4::new(1, 3, 48, 48));
        let files = dump_feature_maps(&m, &zero, &zero, dir.path()).unwrap();
        assert_eq!(files.len(), 15);
        let mut names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names[0], "layer_00.png");
        assert_eq!(names[14], "layer_14.png");
        for f in files {
            let img = crate::datakit::load_image(&f).unwrap();
            let first = img.data()[0];
            assert!(img.data().iter().all(|&v| v == first));
        }
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
