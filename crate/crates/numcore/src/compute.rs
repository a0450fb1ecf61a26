//! Execution contexts. Model code is written once against [`Compute`] and runs either
//! eagerly for inference ([`Eager`]) or on a gradient tape ([`crate::Graph`]).

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvOpts, NormKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub trait Compute {
    type Value: Clone;

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
    /// Non-trainable input.
    fn input(&mut self, t: Tensor) -> Self::Value;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Value;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, factor: f64) -> Self::Value;
    fn relu(&mut self, a: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn prelu(&mut self, x: &Self::Value, slope: &Self::Value) -> Result<Self::Value>;
    fn glu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn conv1d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        opts: ConvOpts,
    ) -> Result<Self::Value>;
    fn conv_transpose1d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
        kind: NormKind,
    ) -> Result<Self::Value>;
    #[allow(clippy::too_many_arguments)]
    fn lstm(
        &mut self,
        x: &Self::Value,
        w_ih: &Self::Value,
        w_hh: &Self::Value,
        b_ih: &Self::Value,
        b_hh: &Self::Value,
        reverse: bool,
    ) -> Result<Self::Value>;
    fn narrow(
        &mut self,
        x: &Self::Value,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[Self::Value], axis: usize) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
}

pub(crate) fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Tape-free evaluation on owned tensors.
#[derive(Debug, Default)]
pub struct Eager;

impl Compute for Eager {
    type Value = Tensor;

    fn tensor<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        store.get(id).clone()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_same("add", a, b, |x, y| x + y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_same("mul", a, b, |x, y| x * y)
    }

    fn scale(&mut self, a: &Tensor, factor: f64) -> Tensor {
        a.map(|v| v * factor)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        a.map(|v| v.max(0.0))
    }

    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        a.map(kernels::sigmoid)
    }

    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::tanh)
    }

    fn prelu(&mut self, x: &Tensor, slope: &Tensor) -> Result<Tensor> {
        kernels::prelu(x, slope)
    }

    fn glu(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::glu(x)
    }

    fn conv1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        opts: ConvOpts,
    ) -> Result<Tensor> {
        kernels::conv1d(x, w, b, opts)
    }

    fn conv_transpose1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        kernels::conv_transpose1d(x, w, b, stride, padding)
    }

    fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        kind: NormKind,
    ) -> Result<Tensor> {
        kernels::layer_norm(x, gain, bias, kind).map(|(out, _)| out)
    }

    fn lstm(
        &mut self,
        x: &Tensor,
        w_ih: &Tensor,
        w_hh: &Tensor,
        b_ih: &Tensor,
        b_hh: &Tensor,
        reverse: bool,
    ) -> Result<Tensor> {
        kernels::lstm(x, w_ih, w_hh, b_ih, b_hh, reverse).map(|(out, _)| out)
    }

    fn narrow(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        kernels::narrow(x, axis, start, len)
    }

    fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        let refs: Vec<&Tensor> = xs.iter().collect();
        kernels::concat(&refs, axis)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.clone().reshape(shape)
    }
}
