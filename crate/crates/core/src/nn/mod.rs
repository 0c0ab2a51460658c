//! Layers, their forward/backward kernels, and the recording tape used for
//! backpropagation.

pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport, Mode};
pub use ops::ConvSpec;
pub use tape::{Eval, Gradients, Graph, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

/// One learnable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape();
        Param {
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Square `k x k` convolution, stride 1, "same" padding of `k / 2`.
    Conv { kernel: usize },
    Linear,
}

/// Weight and bias of one conv or fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub kind: LayerKind,
    /// `(out, in, kh, kw)`; `(out, in, 1, 1)` for fully connected layers.
    pub weight: Param<T>,
    /// `(1, out, 1, 1)`.
    pub bias: Param<T>,
}

impl<T: Element> LayerParams<T> {
    /// He-normal weights and zero bias.
    pub fn conv(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid("conv", format!("kernel {kernel} must be odd")));
        }
        let weight = Tensor::he_normal(Shape::new(out_ch, in_ch, kernel, kernel), rng)?;
        Ok(LayerParams {
            name: name.into(),
            kind: LayerKind::Conv { kernel },
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(Shape::new(1, out_ch, 1, 1))),
        })
    }

    pub fn linear(name: impl Into<String>, in_f: usize, out_f: usize, rng: &mut Rng) -> Result<Self> {
        let weight = Tensor::he_normal(Shape::new(out_f, in_f, 1, 1), rng)?;
        Ok(LayerParams {
            name: name.into(),
            kind: LayerKind::Linear,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(Shape::new(1, out_f, 1, 1))),
        })
    }

    /// Layer with explicitly given weight and bias tensors.
    pub fn from_tensors(
        name: impl Into<String>,
        kind: LayerKind,
        weight: Tensor<T>,
        bias: Tensor<T>,
    ) -> Result<Self> {
        let ws = weight.shape();
        if bias.shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "layer bias",
                left: ws,
                right: bias.shape(),
            });
        }
        let expected_k = match kind {
            LayerKind::Conv { kernel } => kernel,
            LayerKind::Linear => 1,
        };
        if ws.h != expected_k || ws.w != expected_k {
            return Err(Error::invalid(
                "layer",
                format!("weight shape {ws} does not match {kind:?}"),
            ));
        }
        Ok(LayerParams {
            name: name.into(),
            kind,
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn conv_spec(&self) -> ConvSpec {
        match self.kind {
            LayerKind::Conv { kernel } => ConvSpec::same(kernel),
            LayerKind::Linear => ConvSpec::same(1),
        }
    }

    /// Learnable scalars, weights plus biases.
    pub fn num_scalars(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of layers; a [`ParamId`] indexes into it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    layers: Vec<LayerParams<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: LayerParams<T>) -> ParamId {
        self.layers.push(layer);
        ParamId(self.layers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &LayerParams<T> {
        &self.layers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut LayerParams<T> {
        &mut self.layers[id.0]
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.layers.iter().position(|l| l.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(LayerParams::num_scalars).sum()
    }
}

/// Anything that owns a [`ParamStore`].
pub trait HasParams<T> {
    fn param_store(&self) -> &ParamStore<T>;
    fn param_store_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T> HasParams<T> for ParamStore<T> {
    fn param_store(&self) -> &ParamStore<T> {
        self
    }

    fn param_store_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_layer_has_zero_grads_and_moments() {
        let l = LayerParams::<f32>::conv("c", 3, 8, 3, &mut Rng::new(1)).unwrap();
        for p in l.params() {
            assert_eq!(p.grad.shape(), p.value.shape());
            assert!(p.grad.is_all_zero() && p.adam_m.is_all_zero() && p.adam_v.is_all_zero());
        }
        assert!(l.bias.value.is_all_zero());
        assert_eq!(l.num_scalars(), 3 * 8 * 9 + 8);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(LayerParams::<f32>::conv("c", 3, 8, 2, &mut Rng::new(1)).is_err());
    }
}
