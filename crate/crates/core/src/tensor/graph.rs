use super::kernels::{self, ConvGeometry};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate backward defects, used as negative controls for gradient checks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Fault {
    #[default]
    None,
    /// Every propagated contribution is multiplied by this factor.
    ScaleBackward(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Upsample2x(Var),
    Crop(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Sum(Var),
    /// Scalar whose partials with respect to `inputs` were computed elsewhere.
    External {
        inputs: Vec<Var>,
        partials: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of tensor operations.
///
/// Gradients land in each node's tensor grad slot after [`Graph::backward`].
/// A second backward pass requires [`Graph::reset_grads`] first.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    fault: Fault,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            fault,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let bias_shape = self.shape(bias);
        let ks = self.shape(kernel);
        if bias_shape.numel() != ks.batch {
            return Err(Error::shape(format!(
                "bias {bias_shape} does not match kernel {ks}"
            )));
        }
        if ks.height % 2 == 0 || ks.width % 2 == 0 {
            return Err(Error::invalid(format!("kernel {ks} must have odd extents")));
        }
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias).data(),
            geom,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn upsample2x(&mut self, input: Var) -> Var {
        let out = kernels::upsample2x_forward(self.value(input));
        self.push(out, Op::Upsample2x(input))
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(input);
        if height > s.height || width > s.width {
            return Err(Error::shape(format!(
                "cannot crop {s} to {height}x{width}"
            )));
        }
        if height == s.height && width == s.width {
            return Ok(input);
        }
        let out = kernels::crop_forward(self.value(input), height, width);
        Ok(self.push(out, Op::Crop(input)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).scale_add(1.0, self.value(b), 1.0)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "eltwise_mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu(input))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.batch != s0.batch || s.height != s0.height || s.width != s0.width {
                return Err(Error::shape(format!("concat_channels: {s} vs {s0}")));
            }
            channels += s.channels;
        }
        let os = Shape::new(s0.batch, channels, s0.height, s0.width);
        let mut data = Vec::with_capacity(os.numel());
        for b in 0..s0.batch {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().channels * t.shape().plane();
                data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        let out = Tensor::from_vec(os, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).narrow_channels(start, len)?;
        Ok(self.push(out, Op::Narrow { input, start }))
    }

    /// Splits along channels at the given part sizes.
    pub fn split_channels(&mut self, input: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let s = self.shape(input);
        if total != s.channels {
            return Err(Error::shape(format!(
                "split sizes sum to {total}, tensor {s} has {} channels",
                s.channels
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.narrow_channels(input, start, n)?);
            start += n;
        }
        Ok(out)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn external_scalar(&mut self, value: f64, inputs: &[Var], partials: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::invalid("one partial buffer per input required"));
        }
        for (&v, p) in inputs.iter().zip(&partials) {
            if self.value(v).numel() != p.len() {
                return Err(Error::shape(format!(
                    "partial of length {} for tensor {}",
                    p.len(),
                    self.shape(v)
                )));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::External {
                inputs: inputs.to_vec(),
                partials,
            },
        ))
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.backward_done = false;
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(Error::Graph(format!("backward root must be scalar, got {rs}")));
        }
        let scale = match self.fault {
            Fault::None => 1.0,
            Fault::ScaleBackward(f) => f,
        };

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.local_backward(id, &g);
            for (target, mut delta) in contributions {
                if scale != 1.0 {
                    delta.iter_mut().for_each(|d| *d *= scale);
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            self.nodes[id].value.set_grad(g)?;
        }
        self.backward_done = true;
        Ok(())
    }

    fn local_backward(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *geom,
                    g,
                    node.value.shape(),
                );
                vec![
                    (*input, grads.input),
                    (*kernel, grads.kernel),
                    (*bias, grads.bias),
                ]
            }
            Op::Upsample2x(input) => {
                vec![(*input, kernels::upsample2x_backward(self.shape(*input), g))]
            }
            Op::Crop(input) => vec![(
                *input,
                kernels::crop_backward(self.shape(*input), node.value.shape(), g),
            )],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(va).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*input, gx)]
            }
            Op::Concat(parts) => {
                let os = node.value.shape();
                let mut out: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|&p| (p, Vec::with_capacity(self.value(p).numel())))
                    .collect();
                let mut offset = 0;
                for _ in 0..os.batch {
                    for (p, buf) in out.iter_mut() {
                        let len = self.shape(*p).channels * os.plane();
                        buf.extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                out
            }
            Op::Narrow { input, start } => {
                let is = self.shape(*input);
                let os = node.value.shape();
                let plane = is.plane();
                let mut gx = vec![0.0; is.numel()];
                for b in 0..is.batch {
                    let to = (b * is.channels + start) * plane;
                    let from = b * os.channels * plane;
                    let len = os.channels * plane;
                    gx[to..to + len].copy_from_slice(&g[from..from + len]);
                }
                vec![(*input, gx)]
            }
            Op::Sum(input) => vec![(*input, vec![g[0]; self.value(*input).numel()])],
            Op::External { inputs, partials } => inputs
                .iter()
                .zip(partials)
                .map(|(&v, p)| (v, p.iter().map(|d| d * g[0]).collect()))
                .collect(),
        }
    }
}
