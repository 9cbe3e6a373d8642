//! Dense rank-4 `f64` tensors and a small tape-based reverse-mode engine.
//!
//! Only the operators the detector needs are provided: convolution with
//! dilation, bilinear 2x upsampling, element-wise product and sum, channel
//! concatenation and slicing, ReLU and scalar reductions. Classification
//! and box-regression losses live in [`loss`] and hand their gradients back
//! to the tape through [`Graph::external_scalar`].

mod gradcheck;
mod graph;
mod io;
pub(crate) mod kernels;
pub mod loss;

use std::fmt;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use graph::{Fault, Graph, Var};
pub use io::{read_tensor, read_tensors, write_tensor, write_tensors};
pub use kernels::ConvGeometry;

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Row-major NCHW tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} values supplied for shape {shape} ({} expected)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn scale_add(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot combine {} with {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Tensor::from_vec(self.shape, data)
    }

    /// Copies channels `[start, start + len)` into a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.channels {
            return Err(Error::shape(format!(
                "channel range {start}..{} out of bounds for {s}",
                start + len
            )));
        }
        let out_shape = Shape::new(s.batch, len, s.height, s.width);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s.batch {
            let from = (b * s.channels + start) * plane;
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Tensor::from_vec(out_shape, data)
    }
}

/// Weights and geometry of one 2-D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(out_ch, in_ch, kh, kw)`.
    pub kernel: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Builds a layer whose padding keeps the spatial size at stride 1.
    pub fn same(kernel: Tensor, bias: Vec<f64>, stride: usize, dilation: usize) -> Result<Self> {
        let kh = kernel.shape().height;
        let params = ConvParams {
            padding: dilation * (kh.saturating_sub(1)) / 2,
            kernel,
            bias,
            stride,
            dilation,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().channels
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel.shape();
        if k.height % 2 == 0 || k.width % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel {}x{} must have odd extents",
                k.height, k.width
            )));
        }
        if self.bias.len() != k.batch {
            return Err(Error::shape(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                k.batch
            )));
        }
        self.geometry().validate()
    }

    pub fn bias_tensor(&self) -> Tensor {
        Tensor {
            shape: Shape::new(1, self.bias.len(), 1, 1),
            data: self.bias.clone(),
            grad: None,
        }
    }
}

/// Forward-only convolution, outside any tape.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    params.validate()?;
    kernels::conv2d_forward(input, &params.kernel, &params.bias, params.geometry())
}

/// Forward-only bilinear 2x upsampling (half-pixel centres).
pub fn upsample2x(input: &Tensor) -> Tensor {
    kernels::upsample2x_forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn narrow_channels_picks_planes() {
        let t = Tensor::from_vec(Shape::new(1, 3, 1, 2), (0..6).map(f64::from).collect()).unwrap();
        let mid = t.narrow_channels(1, 1).unwrap();
        assert_eq!(mid.data(), &[2.0, 3.0]);
        assert!(t.narrow_channels(2, 2).is_err());
    }

    #[test]
    fn same_padding_follows_dilation() {
        let p = ConvParams::same(Tensor::zeros(Shape::new(1, 1, 3, 3)), vec![0.0], 1, 3).unwrap();
        assert_eq!(p.padding, 3);
        let even = ConvParams::same(Tensor::zeros(Shape::new(1, 1, 2, 2)), vec![0.0], 1, 1);
        assert!(even.is_err());
    }
}
