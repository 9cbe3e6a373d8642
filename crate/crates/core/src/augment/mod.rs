//! Training-time sampling: anchor-based crops that land a chosen face exactly
//! on an anchor scale, and SSD-style photometric + crop + flip augmentation.
//!
//! Every augmentation is first drawn as a [`Plan`] from the face boxes and
//! image size alone, then applied to boxes and (optionally) pixels. Box-only
//! statistics therefore consume the RNG exactly like full image augmentation.

mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{build_grids, level_specs, ScaleMode, Shot};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{flip_horizontal, resample_crop};
use crate::matching::{matched_count_stats, MatchStats};
use crate::tensor::Tensor;

pub use synth::{render_layout, synth_corpus, synth_layouts, SynthConfig};

pub const DEFAULT_SCALE_SET: [f64; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
pub const MIN_IOU_CHOICES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const MAX_CROP_TRIES: usize = 50;
const JITTER: f64 = 0.125;
const MIN_CROP_FRACTION: f64 = 0.3;

/// Image tensor (`1 x C x H x W`, values in `[0, 1]`) with its face boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub faces: Vec<BBox>,
}

impl Sample {
    pub fn layout(&self) -> Layout {
        let s = self.image.shape();
        Layout {
            width: s.width,
            height: s.height,
            faces: self.faces.clone(),
        }
    }
}

/// Image size and faces without pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub faces: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub input_size: usize,
    pub anchor_scale_set: Vec<f64>,
    pub p_anchor_sampling: f64,
    /// Restrict target scales to at most one step above the face's nearest anchor scale.
    pub restrict_target_scale: bool,
    /// Per-channel fill for crop area outside the source image.
    pub pad_value: Vec<f64>,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            input_size: 640,
            anchor_scale_set: DEFAULT_SCALE_SET.to_vec(),
            p_anchor_sampling: 0.4,
            restrict_target_scale: true,
            pad_value: vec![0.5; 3],
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_anchor_sampling) {
            return Err(Error::invalid(format!(
                "anchor sampling probability {} outside [0, 1]",
                self.p_anchor_sampling
            )));
        }
        if self.anchor_scale_set.is_empty()
            || self.anchor_scale_set.windows(2).any(|w| w[1] <= w[0])
            || self.anchor_scale_set[0] <= 0.0
        {
            return Err(Error::invalid("anchor scale set must be positive and strictly increasing"));
        }
        if self.input_size == 0 {
            return Err(Error::invalid("input size must be positive"));
        }
        Ok(())
    }
}

/// Which sampler produced a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Branch {
    AnchorBased { target_scale: f64, face: usize },
    Identity,
    MinIouCrop(f64),
    RandomCrop,
}

impl Branch {
    pub fn is_anchor_based(&self) -> bool {
        matches!(self, Branch::AnchorBased { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
}

/// A drawn augmentation, independent of pixel content.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// Window in source coordinates mapped onto the output square.
    pub crop: BBox,
    pub out_size: usize,
    pub flip: bool,
    pub photometric: Option<Photometric>,
    pub branch: Branch,
    /// Set when the requested sampler could not produce a crop.
    pub fallback: bool,
}

impl Plan {
    /// Keeps faces whose centre lies inside the crop, clips them to it and
    /// maps them into output coordinates.
    pub fn apply_faces(&self, faces: &[BBox]) -> Vec<BBox> {
        let sx = self.out_size as f64 / self.crop.w;
        let sy = self.out_size as f64 / self.crop.h;
        let s = self.out_size as f64;
        faces
            .iter()
            .filter(|f| self.crop.contains_point(f.cx(), f.cy()))
            .filter_map(|f| f.clip_to(&self.crop))
            .map(|f| {
                let b = BBox::new((f.x - self.crop.x) * sx, (f.y - self.crop.y) * sy, f.w * sx, f.h * sy);
                if self.flip {
                    BBox::new(s - b.x - b.w, b.y, b.w, b.h)
                } else {
                    b
                }
            })
            .filter(BBox::is_valid)
            .collect()
    }

    pub fn apply_image(&self, image: &Tensor, pad: &[f64]) -> Tensor {
        let src = match self.photometric {
            Some(p) => image.map(|v| (v * p.contrast + p.brightness).clamp(0.0, 1.0)),
            None => image.clone(),
        };
        let out = resample_crop(&src, &self.crop, self.out_size, self.out_size, pad);
        if self.flip {
            flip_horizontal(&out)
        } else {
            out
        }
    }
}

/// Index of the scale closest to `s` in log space.
fn nearest_scale_index(set: &[f64], s: f64) -> usize {
    let ls = s.ln();
    let mut best = 0;
    for (k, v) in set.iter().enumerate() {
        if (v.ln() - ls).abs() < (set[best].ln() - ls).abs() {
            best = k;
        }
    }
    best
}

/// Draws an anchor-based crop, or `None` when the chosen target scale needs
/// a window smaller than the selected face.
pub fn plan_anchor_based<R: Rng + ?Sized>(layout: &Layout, cfg: &AugConfig, rng: &mut R) -> Option<Plan> {
    if layout.faces.is_empty() {
        return None;
    }
    let idx = rng.gen_range(0..layout.faces.len());
    let face = layout.faces[idx];
    let sf = face.scale();
    let set = &cfg.anchor_scale_set;
    let top = if cfg.restrict_target_scale {
        (nearest_scale_index(set, sf) + 1).min(set.len() - 1)
    } else {
        set.len() - 1
    };
    let target = set[rng.gen_range(0..=top)];
    let side = sf * cfg.input_size as f64 / target;
    if side < face.w || side < face.h {
        return None;
    }
    let x0 = uniform_in(rng, face.right() - side, face.x);
    let y0 = uniform_in(rng, face.bottom() - side, face.y);
    Some(Plan {
        crop: BBox::new(x0, y0, side, side),
        out_size: cfg.input_size,
        flip: false,
        photometric: None,
        branch: Branch::AnchorBased {
            target_scale: target,
            face: idx,
        },
        fallback: false,
    })
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws an SSD-style plan: photometric jitter, one of identity / min-IoU
/// crop / free crop, then a horizontal flip with probability one half.
pub fn plan_ssd<R: Rng + ?Sized>(layout: &Layout, cfg: &AugConfig, rng: &mut R) -> Plan {
    let photometric = Photometric {
        brightness: rng.gen_range(-JITTER..=JITTER),
        contrast: rng.gen_range(1.0 - JITTER..=1.0 + JITTER),
    };
    let full = BBox::new(0.0, 0.0, layout.width as f64, layout.height as f64);
    let mut branch = match rng.gen_range(0..3) {
        0 => Branch::Identity,
        1 => Branch::MinIouCrop(*MIN_IOU_CHOICES.choose(rng).expect("non-empty")),
        _ => Branch::RandomCrop,
    };
    let mut fallback = false;
    let crop = match branch {
        Branch::Identity | Branch::AnchorBased { .. } => Some(full),
        Branch::MinIouCrop(m) => draw_crop(layout, Some(m), rng),
        Branch::RandomCrop => draw_crop(layout, None, rng),
    }
    .unwrap_or_else(|| {
        branch = Branch::Identity;
        fallback = true;
        full
    });
    let flip = rng.gen_bool(0.5);
    Plan {
        crop,
        out_size: cfg.input_size,
        flip,
        photometric: Some(photometric),
        branch,
        fallback,
    }
}

fn draw_crop<R: Rng + ?Sized>(layout: &Layout, min_iou: Option<f64>, rng: &mut R) -> Option<BBox> {
    let short = layout.width.min(layout.height) as f64;
    for _ in 0..MAX_CROP_TRIES {
        let side = rng.gen_range(MIN_CROP_FRACTION * short..=short);
        let x0 = uniform_in(rng, 0.0, layout.width as f64 - side);
        let y0 = uniform_in(rng, 0.0, layout.height as f64 - side);
        let crop = BBox::new(x0, y0, side, side);
        if layout.faces.is_empty() {
            return Some(crop);
        }
        let kept: Vec<&BBox> = layout
            .faces
            .iter()
            .filter(|f| crop.contains_point(f.cx(), f.cy()))
            .collect();
        if kept.is_empty() {
            continue;
        }
        if let Some(m) = min_iou {
            let ok = kept
                .iter()
                .all(|f| f.clip_to(&crop).is_some_and(|c| c.iou(f) >= m));
            if !ok {
                continue;
            }
        }
        return Some(crop);
    }
    None
}

/// Picks the anchor-based sampler with probability `p_anchor_sampling`
/// (never for faceless images) and SSD-style augmentation otherwise.
pub fn plan_augment<R: Rng + ?Sized>(layout: &Layout, cfg: &AugConfig, rng: &mut R) -> Plan {
    let u: f64 = rng.gen();
    if !layout.faces.is_empty() && u < cfg.p_anchor_sampling {
        match plan_anchor_based(layout, cfg, rng) {
            Some(p) => p,
            None => Plan {
                fallback: true,
                ..plan_ssd(layout, cfg, rng)
            },
        }
    } else {
        plan_ssd(layout, cfg, rng)
    }
}

/// Result of augmenting one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    pub plan: Plan,
}

fn realize(src: &Sample, plan: Plan, cfg: &AugConfig) -> Augmented {
    Augmented {
        sample: Sample {
            image: plan.apply_image(&src.image, &cfg.pad_value),
            faces: plan.apply_faces(&src.faces),
        },
        plan,
    }
}

pub fn anchor_based_sample<R: Rng + ?Sized>(src: &Sample, cfg: &AugConfig, rng: &mut R) -> Result<Augmented> {
    cfg.validate()?;
    if src.faces.is_empty() {
        return Err(Error::invalid("anchor-based sampling needs at least one face"));
    }
    let layout = src.layout();
    let plan = match plan_anchor_based(&layout, cfg, rng) {
        Some(p) => p,
        None => Plan {
            fallback: true,
            ..plan_ssd(&layout, cfg, rng)
        },
    };
    Ok(realize(src, plan, cfg))
}

pub fn ssd_style_sample<R: Rng + ?Sized>(src: &Sample, cfg: &AugConfig, rng: &mut R) -> Result<Augmented> {
    cfg.validate()?;
    let plan = plan_ssd(&src.layout(), cfg, rng);
    Ok(realize(src, plan, cfg))
}

pub fn augment<R: Rng + ?Sized>(src: &Sample, cfg: &AugConfig, rng: &mut R) -> Result<Augmented> {
    cfg.validate()?;
    let plan = plan_augment(&src.layout(), cfg, rng);
    Ok(realize(src, plan, cfg))
}

/// Box-only counterpart of [`augment`] (or of SSD-style sampling alone when
/// `ssd_only` is set).
pub fn augment_layout<R: Rng + ?Sized>(layout: &Layout, cfg: &AugConfig, ssd_only: bool, rng: &mut R) -> (Vec<BBox>, Plan) {
    let plan = if ssd_only {
        plan_ssd(layout, cfg, rng)
    } else {
        plan_augment(layout, cfg, rng)
    };
    (plan.apply_faces(&layout.faces), plan)
}

/// Independent, reproducible RNG stream for image `index` under `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sampling pipeline applied before matching-statistics collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    /// Anchor-based sampling mixed with SSD-style augmentation.
    Iam,
    /// SSD-style augmentation only.
    Traditional,
}

/// Augments every layout (image `k` on stream `k` of `cfg.seed`) and
/// collects threshold-matching statistics against the second-shot anchors.
/// Returns the statistics and the augmented face sets.
pub fn pipeline_match_stats(
    layouts: &[Layout],
    cfg: &AugConfig,
    pipeline: Pipeline,
    threshold: f64,
) -> Result<(MatchStats, Vec<Vec<BBox>>)> {
    cfg.validate()?;
    let grids = build_grids(&level_specs(cfg.input_size)?, Shot::Second, ScaleMode::Width);
    let faces: Vec<Vec<BBox>> = layouts
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let mut rng = image_rng(cfg.seed, k as u64);
            augment_layout(l, cfg, pipeline == Pipeline::Traditional, &mut rng).0
        })
        .collect();
    Ok((matched_count_stats(&faces, &grids, threshold)?, faces))
}
