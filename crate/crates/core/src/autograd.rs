//! Tape-based reverse-mode differentiation over the layer set the models use.
//!
//! A [`Graph`] records one forward pass. Nodes only reference nodes created
//! before them, so creation order is a topological order and the backward
//! sweep walks the tape once in reverse. Trainable tensors live in a
//! [`ParamStore`]; `backward` accumulates into its gradient slots.

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
struct ParamEntry<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

/// Named trainable tensors with gradient accumulators of matching shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        self.entries[id.0].value.ensure_same_shape(&value, "set_value")?;
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(F::zero());
        }
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn split_mut(&mut self, id: ParamId) -> (&mut Tensor<F>, &Tensor<F>) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    StraightThrough(NodeId),
    MeanSquaredError { input: NodeId, target: Tensor<F> },
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// One recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant leaf; never receives gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.push(value, Op::Input, false, "input")
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<NodeId> {
        self.push(store.value(id).clone(), Op::Param(id), true, "param")
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let out = conv::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
            "conv2d",
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let out = conv::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
            "conv_transpose2d",
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = conv::relu(self.value(input));
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu(input), rg, "relu")
    }

    /// Elementwise sum of two equally shaped nodes (residual connections, loss terms).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn scale(&mut self, input: NodeId, factor: F) -> Result<NodeId> {
        let out = self.value(input).scale(factor);
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale(input, factor), rg, "scale")
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(out, Op::Sum(input), rg, "sum")
    }

    /// Forward value is `quantized`; the backward pass copies the incoming
    /// gradient unchanged onto `encoder_output`.
    pub fn straight_through(&mut self, quantized: Tensor<F>, encoder_output: NodeId) -> Result<NodeId> {
        self.value(encoder_output)
            .ensure_same_shape(&quantized, "straight_through")?;
        let rg = self.requires_grad(encoder_output);
        self.push(
            quantized,
            Op::StraightThrough(encoder_output),
            rg,
            "straight_through",
        )
    }

    /// `mean((input - target)^2)`; the target is a constant (stop-gradient).
    pub fn mse(&mut self, input: NodeId, target: &Tensor<F>) -> Result<NodeId> {
        let x = self.value(input);
        x.ensure_same_shape(target, "mse")?;
        let n = F::from_f64(x.len() as f64);
        let total: F = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.requires_grad(input);
        self.push(
            Tensor::scalar(total / n),
            Op::MeanSquaredError {
                input,
                target: target.clone(),
            },
            rg,
            "mse",
        )
    }

    /// Accumulates `d loss / d param` into `store` for every reachable parameter.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<F>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            grad.ensure_finite("backward")?;
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    store.entries[pid.0].grad.add_assign(&grad)?;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.requires_grad(*input);
                    let (dx, dw, db) = conv::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &grad,
                        *geom,
                        need_input,
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *input, dx)?;
                    }
                    accumulate(&mut grads, *weight, dw)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.requires_grad(*input);
                    let (dx, dw, db) = conv::conv_transpose2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &grad,
                        *geom,
                        need_input,
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *input, dx)?;
                    }
                    accumulate(&mut grads, *weight, dw)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Relu(input) => {
                    let g = conv::relu_backward(self.value(*input), &grad)?;
                    accumulate(&mut grads, *input, g)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone())?;
                    accumulate(&mut grads, *b, grad)?;
                }
                Op::Scale(input, factor) => {
                    accumulate(&mut grads, *input, grad.scale(*factor))?;
                }
                Op::Sum(input) => {
                    let g = grad.item()?;
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, Tensor::full(shape, g))?;
                }
                Op::StraightThrough(input) => {
                    accumulate(&mut grads, *input, grad)?;
                }
                Op::MeanSquaredError { input, target } => {
                    let x = self.value(*input);
                    let coef = grad.item()? * F::from_f64(2.0 / x.len() as f64);
                    let g = x.zip_map(target, |a, b| coef * (a - b))?;
                    accumulate(&mut grads, *input, g)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Element>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
