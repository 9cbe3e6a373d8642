//! Toy dual-shot detector.
//!
//! A six-stage strided convolution backbone yields original maps `of_1..of_6`
//! at strides 4..128. First-shot heads read `of_l`; second-shot heads read the
//! enhanced map `ef_l = FEM(of_l, of_{l+1})`. Each head is one 3x3 convolution
//! for the two class logits and one for the four box deltas.

mod checkpoint;
mod predict;
mod toy;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{build_grids, flatten, level_specs, AnchorGrid, LevelSpec, ScaleMode, Shot, NUM_LEVELS};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fem::{fem_forward_graph, uniform_conv, xavier_conv, ConvVars, FemParams, FemVars, DEFAULT_DILATION};
use crate::geometry::{BBox, BoxDelta};
use crate::pal::ShotPredictions;
use crate::tensor::{ConvParams, Graph, Shape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use predict::{postprocess, predict, PredictConfig};
pub use toy::{corpus_annotations, corpus_key, self_evaluate, train_toy, ToySetup, TOY_DATA_SEED, TOY_IMAGES, TOY_LR};
pub use train::{match_batch, pal_loss_graph, LrSchedule, Selection, StepReport, TrainConfig, Trainer};

/// Offset subtracted from `[0, 1]` pixels before the first convolution.
pub const PIXEL_MEAN: f64 = 0.5;
/// Multiplier applied after centring.
pub const PIXEL_SCALE: f64 = 4.0;
const HEAD_KERNEL: usize = 3;
/// ReLU-compensating variance gain for the from-scratch backbone and FEM
/// convolutions; heads use plain xavier. With gain 1 the product fusion
/// shrinks deep enhanced maps towards zero at initialisation.
const BACKBONE_GAIN: f64 = 2.0;
const FEM_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each backbone stage.
    pub backbone_channels: [usize; NUM_LEVELS],
    /// Channels of every enhanced map; a multiple of 3.
    pub fem_channels: usize,
    pub fem_dilation: usize,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 160,
            in_channels: 3,
            backbone_channels: [8, 12, 12, 12, 12, 12],
            fem_channels: 12,
            fem_dilation: DEFAULT_DILATION,
            scale_mode: ScaleMode::Width,
            seed: 0,
        }
    }
}

pub(crate) const NET_KEYS: [&str; 7] = [
    "input_size",
    "in_channels",
    "backbone_channels",
    "fem_channels",
    "fem_dilation",
    "scale_mode",
    "seed",
];

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(Error::invalid("input size and channels must be positive"));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        if self.fem_channels == 0 || self.fem_channels % 3 != 0 {
            return Err(Error::invalid(format!(
                "fem_channels {} is not a positive multiple of 3",
                self.fem_channels
            )));
        }
        if self.fem_dilation == 0 {
            return Err(Error::invalid("fem_dilation must be positive"));
        }
        Ok(())
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        let d = NetConfig::default();
        let bc: Vec<usize> = c.get_list_or("backbone_channels", d.backbone_channels.to_vec())?;
        let backbone_channels: [usize; NUM_LEVELS] = bc
            .try_into()
            .map_err(|v: Vec<usize>| Error::invalid(format!("backbone_channels needs 6 entries, got {}", v.len())))?;
        let scale_mode = match c.get_str("scale_mode").unwrap_or("width") {
            "width" => ScaleMode::Width,
            "area" => ScaleMode::AreaPreserving,
            other => return Err(Error::invalid(format!("scale_mode `{other}` is not width|area"))),
        };
        let cfg = NetConfig {
            input_size: c.get_or("input_size", d.input_size)?,
            in_channels: c.get_or("in_channels", d.in_channels)?,
            backbone_channels,
            fem_channels: c.get_or("fem_channels", d.fem_channels)?,
            fem_dilation: c.get_or("fem_dilation", d.fem_dilation)?,
            scale_mode,
            seed: c.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("input_size", self.input_size);
        c.set("in_channels", self.in_channels);
        c.set(
            "backbone_channels",
            self.backbone_channels.map(|v| v.to_string()).join(","),
        );
        c.set("fem_channels", self.fem_channels);
        c.set("fem_dilation", self.fem_dilation);
        c.set(
            "scale_mode",
            match self.scale_mode {
                ScaleMode::Width => "width",
                ScaleMode::AreaPreserving => "area",
            },
        );
        c.set("seed", self.seed);
        c
    }
}

/// Class and box convolutions of one level of one shot.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub cls: ConvParams,
    pub loc: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetConfig,
    specs: Vec<LevelSpec>,
    /// Two convolutions per stage.
    pub backbone: Vec<[ConvParams; 2]>,
    /// One module per level; the top level has no upper input.
    pub fem: Vec<FemParams>,
    pub first_heads: Vec<Head>,
    pub second_heads: Vec<Head>,
    first_grids: Vec<AnchorGrid>,
    second_grids: Vec<AnchorGrid>,
    first_anchors: Vec<BBox>,
    second_anchors: Vec<BBox>,
}

/// Tape handles of a head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls: ConvVars,
    pub loc: ConvVars,
}

/// Tape handles of every parameter, in [`Network::params`] order.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub backbone: Vec<[ConvVars; 2]>,
    pub fem: Vec<FemVars>,
    pub first_heads: Vec<HeadVars>,
    pub second_heads: Vec<HeadVars>,
}

impl NetVars {
    pub fn convs(&self) -> Vec<&ConvVars> {
        let mut v: Vec<&ConvVars> = self.backbone.iter().flatten().collect();
        for f in &self.fem {
            v.extend(f.convs());
        }
        for h in self.first_heads.iter().chain(&self.second_heads) {
            v.push(&h.cls);
            v.push(&h.loc);
        }
        v
    }
}

/// Head outputs of one shot: `(cls, loc)` per level, shaped `B x 2 x h x w`
/// and `B x 4 x h x w`.
#[derive(Clone, Debug)]
pub struct ShotOutputs {
    pub shot: Shot,
    pub levels: Vec<(Var, Var)>,
}

impl ShotOutputs {
    pub fn vars(&self) -> Vec<Var> {
        self.levels.iter().flat_map(|&(c, l)| [c, l]).collect()
    }

    /// Per-anchor predictions of image `b`, levels in order, cells row-major.
    pub fn predictions(&self, g: &Graph, b: usize) -> ShotPredictions {
        let mut cls_logits = Vec::new();
        let mut loc_deltas = Vec::new();
        for &(cv, lv) in &self.levels {
            let (ct, lt) = (g.value(cv), g.value(lv));
            let s = ct.shape();
            for i in 0..s.height {
                for j in 0..s.width {
                    cls_logits.push([ct.at(b, 0, i, j), ct.at(b, 1, i, j)]);
                    loc_deltas.push(BoxDelta::from_array(std::array::from_fn(|k| lt.at(b, k, i, j))));
                }
            }
        }
        ShotPredictions {
            shot: self.shot,
            cls_logits,
            loc_deltas,
        }
    }

    /// Scatters per-anchor gradients of image `b` into per-level buffers laid
    /// out like [`ShotOutputs::vars`].
    pub fn scatter_grads(
        &self,
        g: &Graph,
        b: usize,
        d_logits: &[[f64; 2]],
        d_deltas: &[[f64; 4]],
        scale: f64,
        out: &mut [Vec<f64>],
    ) {
        let mut k = 0;
        for (l, &(cv, lv)) in self.levels.iter().enumerate() {
            let (ct, lt) = (g.value(cv), g.value(lv));
            let s = ct.shape();
            for i in 0..s.height {
                for j in 0..s.width {
                    for c in 0..2 {
                        out[2 * l][ct.index(b, c, i, j)] += scale * d_logits[k][c];
                    }
                    for c in 0..4 {
                        out[2 * l + 1][lt.index(b, c, i, j)] += scale * d_deltas[k][c];
                    }
                    k += 1;
                }
            }
        }
    }
}

fn head_init(rng: &mut ChaCha8Rng, in_ch: usize) -> Head {
    Head {
        cls: xavier_conv(rng, 2, in_ch, HEAD_KERNEL, 1, 1),
        loc: xavier_conv(rng, 4, in_ch, HEAD_KERNEL, 1, 1),
    }
}

impl Network {
    /// Deterministic fan-in scaled uniform initialization from `cfg.seed`.
    pub fn build(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = level_specs(cfg.input_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut backbone = Vec::with_capacity(NUM_LEVELS);
        let mut prev = cfg.in_channels;
        for (l, &c) in cfg.backbone_channels.iter().enumerate() {
            let second_stride = if l == 0 { 2 } else { 1 };
            backbone.push([
                uniform_conv(&mut rng, c, prev, 3, 2, 1, BACKBONE_GAIN),
                uniform_conv(&mut rng, c, c, 3, second_stride, 1, BACKBONE_GAIN),
            ]);
            prev = c;
        }
        let bc = cfg.backbone_channels;
        let fem = (0..NUM_LEVELS)
            .map(|l| {
                let up = (l + 1 < NUM_LEVELS).then(|| bc[l + 1]);
                FemParams::init_with_gain(&mut rng, bc[l], up, cfg.fem_channels, cfg.fem_dilation, FEM_GAIN)
            })
            .collect::<Result<Vec<_>>>()?;
        let first_heads = bc.iter().map(|&c| head_init(&mut rng, c)).collect();
        let second_heads = (0..NUM_LEVELS).map(|_| head_init(&mut rng, cfg.fem_channels)).collect();
        let first_grids = build_grids(&specs, Shot::First, cfg.scale_mode);
        let second_grids = build_grids(&specs, Shot::Second, cfg.scale_mode);
        Ok(Network {
            cfg: cfg.clone(),
            first_anchors: flatten(&first_grids),
            second_anchors: flatten(&second_grids),
            specs,
            backbone,
            fem,
            first_heads,
            second_heads,
            first_grids,
            second_grids,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn level_specs(&self) -> &[LevelSpec] {
        &self.specs
    }

    pub fn grids(&self, shot: Shot) -> &[AnchorGrid] {
        match shot {
            Shot::First => &self.first_grids,
            Shot::Second => &self.second_grids,
        }
    }

    /// Anchors of a shot, flattened in prediction order.
    pub fn anchors(&self, shot: Shot) -> &[BBox] {
        match shot {
            Shot::First => &self.first_anchors,
            Shot::Second => &self.second_anchors,
        }
    }

    pub fn heads_mut(&mut self, shot: Shot) -> &mut [Head] {
        match shot {
            Shot::First => &mut self.first_heads,
            Shot::Second => &mut self.second_heads,
        }
    }

    /// Every parameterized convolution with a stable name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &ConvParams)> {
        let mut out = Vec::new();
        for (l, stage) in self.backbone.iter().enumerate() {
            for (k, p) in stage.iter().enumerate() {
                out.push((format!("backbone.{}.{k}", l + 1), p));
            }
        }
        for (l, f) in self.fem.iter().enumerate() {
            let lv = l + 1;
            out.push((format!("fem.{lv}.norm_cur"), &f.norm_cur));
            if let Some(up) = &f.norm_up {
                out.push((format!("fem.{lv}.norm_up"), up));
            }
            for (b, branch) in f.branches.iter().enumerate() {
                for (k, p) in branch.iter().enumerate() {
                    out.push((format!("fem.{lv}.branch{}.{k}", b + 1), p));
                }
            }
        }
        for (shot, heads) in [(Shot::First, &self.first_heads), (Shot::Second, &self.second_heads)] {
            for (l, h) in heads.iter().enumerate() {
                out.push((format!("head.{shot}.{}.cls", l + 1), &h.cls));
                out.push((format!("head.{shot}.{}.loc", l + 1), &h.loc));
            }
        }
        out
    }

    /// Mutable counterpart of [`Network::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut out: Vec<&mut ConvParams> = self.backbone.iter_mut().flatten().collect();
        for f in &mut self.fem {
            out.extend(f.convs_mut());
        }
        for h in self.first_heads.iter_mut().chain(self.second_heads.iter_mut()) {
            out.push(&mut h.cls);
            out.push(&mut h.loc);
        }
        out
    }

    pub fn num_weights(&self) -> usize {
        self.params()
            .iter()
            .map(|(_, p)| p.kernel.numel() + p.bias.len())
            .sum()
    }

    /// Kernel and `1 x out x 1 x 1` bias of every convolution, in
    /// [`Network::params`] order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params()
            .into_iter()
            .flat_map(|(_, p)| [p.kernel.clone(), p.bias_tensor()])
            .collect()
    }

    /// Wraps leaves laid out like [`Network::param_tensors`] as [`NetVars`].
    pub fn vars_from_leaves(&self, g: &Graph, leaves: &[Var]) -> Result<NetVars> {
        let params = self.params();
        if leaves.len() != 2 * params.len() {
            return Err(Error::invalid(format!(
                "{} leaves for {} convolutions",
                leaves.len(),
                params.len()
            )));
        }
        let mut convs = Vec::with_capacity(params.len());
        for ((name, p), pair) in params.iter().zip(leaves.chunks(2)) {
            if g.shape(pair[0]) != p.kernel.shape() || g.shape(pair[1]) != p.bias_tensor().shape() {
                return Err(Error::shape(format!("leaf shapes do not match parameter {name}")));
            }
            convs.push(ConvVars {
                kernel: pair[0],
                bias: pair[1],
                geom: p.geometry(),
            });
        }
        let mut it = convs.into_iter();
        let mut next = || it.next().expect("counted above");
        let backbone = (0..NUM_LEVELS).map(|_| [next(), next()]).collect();
        let fem = self
            .fem
            .iter()
            .map(|f| FemVars {
                norm_cur: next(),
                norm_up: f.norm_up.as_ref().map(|_| next()),
                branches: std::array::from_fn(|k| (0..=k).map(|_| next()).collect()),
            })
            .collect();
        let mut heads = || -> Vec<HeadVars> {
            (0..NUM_LEVELS)
                .map(|_| HeadVars {
                    cls: next(),
                    loc: next(),
                })
                .collect()
        };
        let first_heads = heads();
        let second_heads = heads();
        Ok(NetVars {
            backbone,
            fem,
            first_heads,
            second_heads,
        })
    }

    pub fn register(&self, g: &mut Graph) -> NetVars {
        let leaves: Vec<Var> = self.param_tensors().into_iter().map(|t| g.leaf(t)).collect();
        self.vars_from_leaves(g, &leaves).expect("leaves built from own parameters")
    }

    /// `[0, 1]` images (`B x C x S x S`) to a centred leaf.
    pub fn input_leaf(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        let s = images.shape();
        if s.channels != self.cfg.in_channels || s.height != self.cfg.input_size || s.width != self.cfg.input_size {
            return Err(Error::shape(format!(
                "image batch {s} does not match {} channels at {}x{}",
                self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size
            )));
        }
        Ok(g.leaf(images.map(|v| (v - PIXEL_MEAN) * PIXEL_SCALE)))
    }

    /// Original maps `of_1..of_6`.
    pub fn backbone_graph(&self, g: &mut Graph, vars: &NetVars, x: Var) -> Result<Vec<Var>> {
        let mut maps = Vec::with_capacity(NUM_LEVELS);
        let mut h = x;
        for (l, [a, b]) in vars.backbone.iter().enumerate() {
            h = a.apply_relu(g, h)?;
            h = b.apply_relu(g, h)?;
            let s = g.shape(h);
            let spec = &self.specs[l];
            if s.height != spec.map_h || s.width != spec.map_w {
                return Err(Error::shape(format!(
                    "level {}: backbone map {}x{} but the anchor layout expects {}x{}",
                    spec.index, s.height, s.width, spec.map_h, spec.map_w
                )));
            }
            maps.push(h);
        }
        Ok(maps)
    }

    fn heads_graph(g: &mut Graph, shot: Shot, heads: &[HeadVars], maps: &[Var]) -> Result<ShotOutputs> {
        let levels = heads
            .iter()
            .zip(maps)
            .map(|(h, &m)| Ok((h.cls.apply(g, m)?, h.loc.apply(g, m)?)))
            .collect::<Result<_>>()?;
        Ok(ShotOutputs { shot, levels })
    }

    fn enhanced_graph(&self, g: &mut Graph, vars: &NetVars, of: &[Var]) -> Result<Vec<Var>> {
        (0..NUM_LEVELS)
            .map(|l| fem_forward_graph(g, of[l], of.get(l + 1).copied(), &vars.fem[l]))
            .collect()
    }

    /// Both shots' head outputs recorded on `g`.
    pub fn forward_dual_graph(&self, g: &mut Graph, vars: &NetVars, x: Var) -> Result<(ShotOutputs, ShotOutputs)> {
        let of = self.backbone_graph(g, vars, x)?;
        let first = Self::heads_graph(g, Shot::First, &vars.first_heads, &of)?;
        let ef = self.enhanced_graph(g, vars, &of)?;
        let second = Self::heads_graph(g, Shot::Second, &vars.second_heads, &ef)?;
        Ok((first, second))
    }

    /// Second-shot head outputs only; first-shot heads are never evaluated.
    pub fn forward_second_graph(&self, g: &mut Graph, vars: &NetVars, x: Var) -> Result<ShotOutputs> {
        let of = self.backbone_graph(g, vars, x)?;
        let ef = self.enhanced_graph(g, vars, &of)?;
        Self::heads_graph(g, Shot::Second, &vars.second_heads, &ef)
    }

    /// Per-anchor predictions of both shots for a single image `1 x C x S x S`.
    pub fn forward_dual(&self, image: &Tensor) -> Result<(ShotPredictions, ShotPredictions)> {
        if image.shape().batch != 1 {
            return Err(Error::shape("forward_dual takes one image"));
        }
        let mut g = Graph::new();
        let vars = self.register(&mut g);
        let x = self.input_leaf(&mut g, image)?;
        let (first, second) = self.forward_dual_graph(&mut g, &vars, x)?;
        Ok((first.predictions(&g, 0), second.predictions(&g, 0)))
    }

    /// Sets every head weight and bias of `shot` to zero.
    pub fn zero_heads(&mut self, shot: Shot) {
        for h in self.heads_mut(shot) {
            for p in [&mut h.cls, &mut h.loc] {
                p.kernel.data_mut().fill(0.0);
                p.bias.fill(0.0);
            }
        }
    }
}

/// Stacks `1 x C x H x W` images into one batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for t in images {
        let s = t.shape();
        if s != first {
            return Err(Error::shape(format!("batch mixes {first} and {s}")));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(
        Shape::new(first.batch * images.len(), first.channels, first.height, first.width),
        data,
    )
}
