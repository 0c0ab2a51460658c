//! Execution backends for model code.
//!
//! Model forward passes are written once against [`Graph`]. [`Tape`] records
//! every op with its output so [`Tape::backward`] can replay them in reverse;
//! [`Eval`] computes values directly and drops intermediates as soon as the
//! caller does, which keeps inference memory at a few feature maps.

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvSpec};
use crate::nn::{LayerKind, ParamId, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

/// Primitive ops the network is built from.
pub trait Graph<T: Element> {
    type Value;

    fn input(&mut self, x: Tensor<T>) -> Self::Value;

    /// Convolution with the layer's own "same" padding.
    fn conv2d(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Self::Value) -> Result<Self::Value>;

    fn linear(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Self::Value) -> Result<Self::Value>;

    fn relu(&mut self, x: &Self::Value) -> Self::Value;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn global_avg_pool(&mut self, x: &Self::Value) -> Self::Value;

    fn softmax(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn pixel_shuffle(&mut self, x: &Self::Value, scale: usize) -> Result<Self::Value>;

    fn gather_samples(&mut self, x: &Self::Value, indices: &[usize]) -> Result<Self::Value>;

    fn scatter_add_samples(&mut self, base: &Self::Value, part: &Self::Value, indices: &[usize]) -> Result<Self::Value>;

    /// Multiplies sample `i` of `x` by `weights[i, column]`.
    fn scale_samples(&mut self, x: &Self::Value, weights: &Self::Value, column: usize) -> Result<Self::Value>;

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    /// Conv followed by ReLU.
    fn conv_relu(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Self::Value) -> Result<Self::Value> {
        let z = self.conv2d(params, layer, x)?;
        Ok(self.relu(&z))
    }
}

fn layer_conv<T: Element>(params: &ParamStore<T>, layer: ParamId) -> Result<ConvSpec> {
    let l = params.get(layer);
    match l.kind {
        LayerKind::Conv { kernel } => Ok(ConvSpec::same(kernel)),
        LayerKind::Linear => Err(Error::invalid("conv2d", format!("layer {} is fully connected", l.name))),
    }
}

fn layer_linear<T: Element>(params: &ParamStore<T>, layer: ParamId) -> Result<()> {
    let l = params.get(layer);
    match l.kind {
        LayerKind::Linear => Ok(()),
        LayerKind::Conv { .. } => Err(Error::invalid("linear", format!("layer {} is a convolution", l.name))),
    }
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl<T: Element> Graph<T> for Eval {
    type Value = Tensor<T>;

    fn input(&mut self, x: Tensor<T>) -> Tensor<T> {
        x
    }

    fn conv2d(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = layer_conv(params, layer)?;
        let l = params.get(layer);
        ops::conv2d(x, &l.weight.value, &l.bias.value, spec)
    }

    fn linear(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_linear(params, layer)?;
        let l = params.get(layer);
        ops::linear(x, &l.weight.value, &l.bias.value)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::relu(x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::global_avg_pool(x)
    }

    fn softmax(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax(x)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
        ops::pixel_shuffle(x, scale)
    }

    fn gather_samples(&mut self, x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        x.gather_samples(indices)
    }

    fn scatter_add_samples(&mut self, base: &Tensor<T>, part: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        ops::scatter_add_samples(base, part, indices)
    }

    fn scale_samples(&mut self, x: &Tensor<T>, weights: &Tensor<T>, column: usize) -> Result<Tensor<T>> {
        ops::scale_samples(x, weights, column)
    }

    fn tensor<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv_relu(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = Graph::<T>::conv2d(self, params, layer, x)?;
        z.data_mut().iter_mut().for_each(|v| {
            if !(*v > T::zero()) {
                *v = T::zero()
            }
        });
        Ok(z)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { x: Var, layer: ParamId, spec: ConvSpec },
    Linear { x: Var, layer: ParamId },
    Relu { x: Var },
    Add { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    Softmax { x: Var },
    PixelShuffle { x: Var, scale: usize },
    Gather { x: Var, indices: Vec<usize> },
    ScatterAdd { base: Var, part: Var, indices: Vec<usize> },
    ScaleSamples { x: Var, weights: Var, column: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// Records ops in execution order; gradients flow back in exact reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the recorded inputs after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    inputs: Vec<(Var, Tensor<T>)>,
}

impl<T> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Smallest `|z|` over every ReLU input recorded so far, i.e. how close
    /// the current point is to a kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Shapes of every recorded node, in recording order.
    pub fn shapes(&self) -> Vec<Shape> {
        self.nodes.iter().map(|n| n.value.shape()).collect()
    }

    /// Backpropagates `seed` (the gradient of the objective with respect to
    /// `root`) through the tape. Parameter gradients are accumulated into
    /// `params`; gradients of recorded inputs are returned.
    pub fn backward(&self, root: Var, seed: Tensor<T>, params: &mut ParamStore<T>) -> Result<Gradients<T>> {
        root_check(self.value(root), &seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        let mut inputs = Vec::new();

        fn acc<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => inputs.push((Var(idx), g)),
                Op::Conv { x, layer, spec } => {
                    let l = params.get_mut(*layer);
                    let gx = ops::conv2d_backward(
                        self.value(*x),
                        &l.weight.value,
                        &g,
                        *spec,
                        &mut l.weight.grad,
                        &mut l.bias.grad,
                    )?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Linear { x, layer } => {
                    let l = params.get_mut(*layer);
                    let gx = ops::linear_backward(
                        self.value(*x),
                        &l.weight.value,
                        &g,
                        &mut l.weight.grad,
                        &mut l.bias.grad,
                    )?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Relu { x } => {
                    let gx = ops::relu_backward(self.value(*x), &g)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::GlobalAvgPool { x } => {
                    let gx = ops::global_avg_pool_backward(self.value(*x).shape(), &g)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Softmax { x } => {
                    let gx = ops::softmax_backward(&node.value, &g)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::PixelShuffle { x, scale } => {
                    let gx = ops::pixel_unshuffle(&g, *scale)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Gather { x, indices } => {
                    let gx = ops::gather_samples_backward(self.value(*x).shape(), &g, indices)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::ScatterAdd { base, part, indices } => {
                    let gp = g.gather_samples(indices)?;
                    acc(&mut grads, *part, gp)?;
                    acc(&mut grads, *base, g)?;
                }
                Op::ScaleSamples { x, weights, column } => {
                    let (gx, gw) =
                        ops::scale_samples_backward(self.value(*x), self.value(*weights), *column, &g)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *weights, gw)?;
                }
            }
        }
        inputs.reverse();
        Ok(Gradients { inputs })
    }
}

fn root_check<T: Element>(root: &Tensor<T>, seed: &Tensor<T>) -> Result<()> {
    root.check_same_shape("backward seed", seed)
}

impl<T: Element> Graph<T> for Tape<T> {
    type Value = Var;

    fn input(&mut self, x: Tensor<T>) -> Var {
        self.push(Op::Input, x)
    }

    fn conv2d(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Var) -> Result<Var> {
        let spec = layer_conv(params, layer)?;
        let l = params.get(layer);
        let y = ops::conv2d(self.value(*x), &l.weight.value, &l.bias.value, spec)?;
        Ok(self.push(Op::Conv { x: *x, layer, spec }, y))
    }

    fn linear(&mut self, params: &ParamStore<T>, layer: ParamId, x: &Var) -> Result<Var> {
        layer_linear(params, layer)?;
        let l = params.get(layer);
        let y = ops::linear(self.value(*x), &l.weight.value, &l.bias.value)?;
        Ok(self.push(Op::Linear { x: *x, layer }, y))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = ops::relu(self.value(*x));
        self.push(Op::Relu { x: *x }, y)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.value(*a).add(self.value(*b))?;
        Ok(self.push(Op::Add { a: *a, b: *b }, y))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let y = ops::global_avg_pool(self.value(*x));
        self.push(Op::GlobalAvgPool { x: *x }, y)
    }

    fn softmax(&mut self, x: &Var) -> Result<Var> {
        let y = ops::softmax(self.value(*x))?;
        Ok(self.push(Op::Softmax { x: *x }, y))
    }

    fn pixel_shuffle(&mut self, x: &Var, scale: usize) -> Result<Var> {
        let y = ops::pixel_shuffle(self.value(*x), scale)?;
        Ok(self.push(Op::PixelShuffle { x: *x, scale }, y))
    }

    fn gather_samples(&mut self, x: &Var, indices: &[usize]) -> Result<Var> {
        let y = self.value(*x).gather_samples(indices)?;
        Ok(self.push(
            Op::Gather {
                x: *x,
                indices: indices.to_vec(),
            },
            y,
        ))
    }

    fn scatter_add_samples(&mut self, base: &Var, part: &Var, indices: &[usize]) -> Result<Var> {
        let y = ops::scatter_add_samples(self.value(*base), self.value(*part), indices)?;
        Ok(self.push(
            Op::ScatterAdd {
                base: *base,
                part: *part,
                indices: indices.to_vec(),
            },
            y,
        ))
    }

    fn scale_samples(&mut self, x: &Var, weights: &Var, column: usize) -> Result<Var> {
        let y = ops::scale_samples(self.value(*x), self.value(*weights), column)?;
        Ok(self.push(
            Op::ScaleSamples {
                x: *x,
                weights: *weights,
                column,
            },
            y,
        ))
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.value(*v)
    }
}
