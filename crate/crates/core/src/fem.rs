//! Feature enhancement: fuse a level with the level above it, then widen the
//! receptive field with three stacks of dilated 3x3 convolutions.
//!
//! ```text
//! nc = relu(conv1x1(of_l)) * up2x(relu(conv1x1(of_{l+1})))
//! ef = concat(branch_1(nc[0..c/3]), branch_2(nc[c/3..2c/3]), branch_3(nc[2c/3..c]))
//! ```
//!
//! Branch `k` holds `k` dilated convolutions, each followed by a ReLU. The
//! top level has no upper neighbour and uses `nc = relu(conv1x1(of_l))`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvGeometry, ConvParams, Graph, Shape, Tensor, Var};

pub const NUM_BRANCHES: usize = 3;
pub const DEFAULT_DILATION: usize = 3;
const KERNEL: usize = 3;

/// Fan-in scaled uniform ("xavier") initialization: `U(-a, a)` with
/// `a = sqrt(3 / fan_in)`, i.e. unit variance times `1 / fan_in`.
pub fn xavier_conv<R: Rng + ?Sized>(
    rng: &mut R,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    dilation: usize,
) -> ConvParams {
    uniform_conv(rng, out_ch, in_ch, k, stride, dilation, 1.0)
}

/// Fan-in scaled uniform with variance `gain / fan_in`.
pub fn uniform_conv<R: Rng + ?Sized>(
    rng: &mut R,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    gain: f64,
) -> ConvParams {
    let fan_in = (in_ch * k * k) as f64;
    let limit = (3.0 * gain / fan_in).sqrt();
    let shape = Shape::new(out_ch, in_ch, k, k);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-limit..limit)).collect();
    let kernel = Tensor::from_vec(shape, data).expect("sized from shape");
    ConvParams::same(kernel, vec![0.0; out_ch], stride, dilation).expect("odd kernel")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FemParams {
    pub norm_cur: ConvParams,
    /// Absent at the top level.
    pub norm_up: Option<ConvParams>,
    /// `branches[k]` holds `k + 1` dilated convolutions on `c / 3` channels.
    pub branches: [Vec<ConvParams>; NUM_BRANCHES],
}

impl FemParams {
    /// Xavier initialization; see [`FemParams::init_with_gain`].
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        cur_channels: usize,
        up_channels: Option<usize>,
        channels: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::init_with_gain(rng, cur_channels, up_channels, channels, dilation, 1.0)
    }

    /// Weights uniform in `±sqrt(3 gain / fan_in)`, biases zero.
    pub fn init_with_gain<R: Rng + ?Sized>(
        rng: &mut R,
        cur_channels: usize,
        up_channels: Option<usize>,
        channels: usize,
        dilation: usize,
        gain: f64,
    ) -> Result<Self> {
        if channels == 0 || channels % NUM_BRANCHES != 0 {
            return Err(Error::invalid(format!(
                "enhanced channel count {channels} is not a positive multiple of {NUM_BRANCHES}"
            )));
        }
        let part = channels / NUM_BRANCHES;
        let norm_cur = uniform_conv(rng, channels, cur_channels, 1, 1, 1, gain);
        let norm_up = up_channels.map(|c| uniform_conv(rng, channels, c, 1, 1, 1, gain));
        let branches = std::array::from_fn(|k| {
            (0..=k)
                .map(|_| uniform_conv(rng, part, part, KERNEL, 1, dilation, gain))
                .collect()
        });
        Ok(FemParams {
            norm_cur,
            norm_up,
            branches,
        })
    }

    pub fn channels(&self) -> usize {
        self.norm_cur.out_channels()
    }

    /// All convolutions in a fixed order: norm_cur, norm_up, branch 1..3.
    pub fn convs(&self) -> Vec<&ConvParams> {
        let mut v = vec![&self.norm_cur];
        v.extend(self.norm_up.as_ref());
        v.extend(self.branches.iter().flatten());
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut v = vec![&mut self.norm_cur];
        v.extend(self.norm_up.as_mut());
        v.extend(self.branches.iter_mut().flatten());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 || c % NUM_BRANCHES != 0 {
            return Err(Error::invalid(format!("enhanced channel count {c} not divisible by 3")));
        }
        if let Some(up) = &self.norm_up {
            if up.out_channels() != c {
                return Err(Error::shape("norm_up and norm_cur disagree on output channels"));
            }
        }
        for (k, branch) in self.branches.iter().enumerate() {
            if branch.len() != k + 1 {
                return Err(Error::invalid(format!("branch {} has depth {}", k + 1, branch.len())));
            }
            for conv in branch {
                conv.validate()?;
                let kh = conv.kernel.shape().height;
                if conv.stride != 1 || conv.padding != conv.dilation * (kh - 1) / 2 {
                    return Err(Error::invalid("branch convolutions must be stride-1 same-padded"));
                }
            }
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> FemVars {
        FemVars {
            norm_cur: ConvVars::register(g, &self.norm_cur),
            norm_up: self.norm_up.as_ref().map(|p| ConvVars::register(g, p)),
            branches: std::array::from_fn(|k| {
                self.branches[k].iter().map(|p| ConvVars::register(g, p)).collect()
            }),
        }
    }
}

/// Tape handles of one convolution's weights.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub geom: ConvGeometry,
}

impl ConvVars {
    pub fn register(g: &mut Graph, p: &ConvParams) -> Self {
        ConvVars {
            kernel: g.leaf(p.kernel.clone()),
            bias: g.leaf(p.bias_tensor()),
            geom: p.geometry(),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.kernel, self.bias, self.geom)
    }

    pub fn apply_relu(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.apply(g, x)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct FemVars {
    pub norm_cur: ConvVars,
    pub norm_up: Option<ConvVars>,
    pub branches: [Vec<ConvVars>; NUM_BRANCHES],
}

impl FemVars {
    pub fn convs(&self) -> Vec<&ConvVars> {
        let mut v = vec![&self.norm_cur];
        v.extend(self.norm_up.as_ref());
        v.extend(self.branches.iter().flatten());
        v
    }
}

/// Records the module on `g` and returns the enhanced map.
pub fn fem_forward_graph(g: &mut Graph, of_cur: Var, of_up: Option<Var>, vars: &FemVars) -> Result<Var> {
    let cs = g.shape(of_cur);
    let cur = vars.norm_cur.apply_relu(g, of_cur)?;
    let nc = match (of_up, &vars.norm_up) {
        (None, _) => cur,
        (Some(up), Some(norm_up)) => {
            let us = g.shape(up);
            if us.height != cs.height.div_ceil(2) || us.width != cs.width.div_ceil(2) {
                return Err(Error::shape(format!(
                    "upper map {us} is not half the spatial size of {cs}"
                )));
            }
            let up = norm_up.apply_relu(g, up)?;
            let up = g.upsample2x(up);
            let up = g.crop(up, cs.height, cs.width)?;
            g.mul(cur, up)?
        }
        (Some(_), None) => return Err(Error::invalid("upper map supplied to a top-level module")),
    };
    let c = g.shape(nc).channels;
    if c % NUM_BRANCHES != 0 {
        return Err(Error::shape(format!("{c} channels cannot split three ways")));
    }
    let parts = g.split_channels(nc, &[c / NUM_BRANCHES; NUM_BRANCHES])?;
    let mut outs = Vec::with_capacity(NUM_BRANCHES);
    for (part, branch) in parts.into_iter().zip(&vars.branches) {
        let mut x = part;
        for conv in branch {
            x = conv.apply_relu(g, x)?;
        }
        outs.push(x);
    }
    g.concat_channels(&outs)
}

/// Forward pass outside any caller graph.
pub fn fem_forward(of_cur: &Tensor, of_up: Option<&Tensor>, params: &FemParams) -> Result<Tensor> {
    params.validate()?;
    let mut g = Graph::new();
    let cur = g.leaf(of_cur.clone());
    let up = of_up.map(|t| g.leaf(t.clone()));
    let vars = params.register(&mut g);
    let out = fem_forward_graph(&mut g, cur, up, &vars)?;
    Ok(g.value(out).clone())
}

/// Receptive field of `depth` stacked stride-1 convolutions.
pub fn receptive_field(depth: usize, kernel: usize, dilation: usize) -> usize {
    1 + depth * (kernel - 1) * dilation
}

/// Measures the receptive field of branch `branch` (1-based) as the support of
/// its response to a centred unit impulse.
pub fn verify_rf_empirically(params: &FemParams, branch: usize) -> Result<usize> {
    if branch == 0 || branch > NUM_BRANCHES {
        return Err(Error::invalid(format!("branch index {branch} outside 1..=3")));
    }
    let convs = &params.branches[branch - 1];
    if convs.iter().any(|c| c.kernel.data().iter().any(|&w| w <= 0.0)) {
        return Err(Error::invalid("impulse measurement needs strictly positive weights"));
    }
    let expected_max: usize = 1 + convs
        .iter()
        .map(|c| (c.kernel.shape().height - 1) * c.dilation)
        .sum::<usize>();
    let side = 2 * expected_max + 1;
    let ch = convs[0].in_channels();
    let mut x = Tensor::zeros(Shape::new(1, ch, side, side));
    let mid = side / 2;
    for c in 0..ch {
        x.set(0, c, mid, mid, 1.0);
    }
    for conv in convs {
        let mut unbiased = conv.clone();
        unbiased.bias.iter_mut().for_each(|b| *b = 0.0);
        x = conv2d(&x, &unbiased)?.map(|v| v.max(0.0));
    }
    let s = x.shape();
    let (mut ymin, mut ymax, mut xmin, mut xmax) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..s.channels {
        for yy in 0..s.height {
            for xx in 0..s.width {
                if x.at(0, c, yy, xx) != 0.0 {
                    ymin = ymin.min(yy);
                    ymax = ymax.max(yy);
                    xmin = xmin.min(xx);
                    xmax = xmax.max(xx);
                }
            }
        }
    }
    if ymin == usize::MAX {
        return Err(Error::invalid("impulse response is identically zero"));
    }
    let h = ymax - ymin + 1;
    let w = xmax - xmin + 1;
    if h != w {
        return Err(Error::shape(format!("anisotropic response {h}x{w}")));
    }
    Ok(h)
}
