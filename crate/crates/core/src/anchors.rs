//! Dual-shot anchor layout: six levels with strides 4..128, one 1.5:1 anchor
//! per feature-map cell, first-shot anchors at half the second-shot size.

use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUM_LEVELS: usize = 6;
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32, 64, 128];
pub const SECOND_SHOT_SCALES: [f64; NUM_LEVELS] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
/// Anchor height over width.
pub const ANCHOR_RATIO: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shot {
    First,
    Second,
}

impl Shot {
    pub fn name(self) -> &'static str {
        match self {
            Shot::First => "first",
            Shot::Second => "second",
        }
    }
}

impl fmt::Display for Shot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a level's scale and the 1.5 ratio turn into anchor width and height.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    /// `w = scale`, `h = 1.5 * scale`.
    #[default]
    Width,
    /// `w = scale / sqrt(1.5)`, `h = scale * sqrt(1.5)`.
    AreaPreserving,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelSpec {
    /// 1-based level index.
    pub index: usize,
    pub stride: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub scale_second_shot: f64,
    pub scale_first_shot: f64,
    pub ratio: f64,
}

impl LevelSpec {
    pub fn scale(&self, shot: Shot) -> f64 {
        match shot {
            Shot::First => self.scale_first_shot,
            Shot::Second => self.scale_second_shot,
        }
    }

    pub fn anchor_size(&self, shot: Shot, mode: ScaleMode) -> (f64, f64) {
        let s = self.scale(shot);
        match mode {
            ScaleMode::Width => (s, s * self.ratio),
            ScaleMode::AreaPreserving => {
                let r = self.ratio.sqrt();
                (s / r, s * r)
            }
        }
    }

    pub fn count(&self) -> usize {
        self.map_h * self.map_w
    }
}

/// Level ladder for any positive input size; map sizes are `ceil(size / stride)`,
/// which is what a chain of stride-2 convolutions produces.
pub fn level_specs(input_size: usize) -> Result<Vec<LevelSpec>> {
    if input_size == 0 {
        return Err(Error::invalid("input size must be positive"));
    }
    Ok(LEVEL_STRIDES
        .iter()
        .zip(SECOND_SHOT_SCALES)
        .enumerate()
        .map(|(i, (&stride, scale))| {
            let m = input_size.div_ceil(stride);
            LevelSpec {
                index: i + 1,
                stride,
                map_h: m,
                map_w: m,
                scale_second_shot: scale,
                scale_first_shot: scale / 2.0,
                ratio: ANCHOR_RATIO,
            }
        })
        .collect())
}

/// The reference layout; `input_size` must be a multiple of the largest stride.
pub fn default_level_specs(input_size: usize) -> Result<Vec<LevelSpec>> {
    let largest = LEVEL_STRIDES[NUM_LEVELS - 1];
    if input_size == 0 || input_size % largest != 0 {
        return Err(Error::invalid(format!(
            "input size {input_size} is not a positive multiple of {largest}"
        )));
    }
    level_specs(input_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub level: LevelSpec,
    pub shot: Shot,
    /// Row-major over cells: index `i * map_w + j`.
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn anchor_size(&self) -> (f64, f64) {
        self.boxes.first().map(|b| (b.w, b.h)).unwrap_or((0.0, 0.0))
    }

    /// Centre of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.level.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }
}

pub fn build_grid(spec: &LevelSpec, shot: Shot) -> AnchorGrid {
    build_grid_with(spec, shot, ScaleMode::default())
}

/// One anchor per cell, centred on the cell, not clipped to the image.
pub fn build_grid_with(spec: &LevelSpec, shot: Shot, mode: ScaleMode) -> AnchorGrid {
    let (w, h) = spec.anchor_size(shot, mode);
    let s = spec.stride as f64;
    let mut boxes = Vec::with_capacity(spec.count());
    for i in 0..spec.map_h {
        for j in 0..spec.map_w {
            boxes.push(BBox::from_center((j as f64 + 0.5) * s, (i as f64 + 0.5) * s, w, h));
        }
    }
    AnchorGrid {
        level: *spec,
        shot,
        boxes,
    }
}

pub fn build_grids(specs: &[LevelSpec], shot: Shot, mode: ScaleMode) -> Vec<AnchorGrid> {
    specs.iter().map(|s| build_grid_with(s, shot, mode)).collect()
}

/// Anchors of one shot summed over levels.
pub fn total_anchor_count(specs: &[LevelSpec]) -> usize {
    specs.iter().map(LevelSpec::count).sum()
}

/// Concatenation of all grids in level order.
pub fn flatten(grids: &[AnchorGrid]) -> Vec<BBox> {
    grids.iter().flat_map(|g| g.boxes.iter().copied()).collect()
}

/// `level,shot,cell_i,cell_j,x,y,w,h` rows, header first.
pub fn anchors_csv(grids: &[AnchorGrid]) -> String {
    let mut out = String::from("level,shot,cell_i,cell_j,x,y,w,h\n");
    for g in grids {
        let mw = g.level.map_w;
        for (k, b) in g.boxes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                g.level.index,
                g.shot,
                k / mw,
                k % mw,
                b.x,
                b.y,
                b.w,
                b.h
            );
        }
    }
    out
}
