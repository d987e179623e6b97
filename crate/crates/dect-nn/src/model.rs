//! Static computation graph over the operator library.
//!
//! A model is a flat list of nodes in topological order; node 0 is the input
//! placeholder and the last node is the output. The forward pass caches every
//! node's activation (plus pooling argmax indices) so the backward pass can
//! accumulate gradients in reverse order.

use serde::{Deserialize, Serialize};

use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Op {
    Input,
    /// Convolution with parameter indices (weight, bias).
    Conv { weight: usize, bias: usize },
    Relu,
    MaxPool2,
    Upsample2,
    /// Channel-wise concatenation of the two input nodes.
    Concat,
    /// Elementwise sum of the two input nodes.
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub nodes: Vec<Node>,
    pub params: Vec<Tensor>,
}

/// Forward-pass cache: node activations plus pooling indices.
pub struct Cache {
    pub activations: Vec<Tensor>,
    pool_args: Vec<Option<Vec<u8>>>,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn forward(&self, input: &Tensor) -> (Tensor, Cache) {
        let mut activations: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut pool_args: Vec<Option<Vec<u8>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (out, pool) = match &node.op {
                Op::Input => (input.clone(), None),
                Op::Conv { weight, bias } => (
                    ops::conv2d_forward(
                        &activations[node.inputs[0]],
                        &self.params[*weight],
                        &self.params[*bias],
                    ),
                    None,
                ),
                Op::Relu => (ops::relu_forward(&activations[node.inputs[0]]), None),
                Op::MaxPool2 => {
                    let (out, arg) = ops::maxpool2_forward(&activations[node.inputs[0]]);
                    (out, Some(arg))
                }
                Op::Upsample2 => (ops::upsample2_forward(&activations[node.inputs[0]]), None),
                Op::Concat => (
                    ops::concat_forward(
                        &activations[node.inputs[0]],
                        &activations[node.inputs[1]],
                    ),
                    None,
                ),
                Op::Add => (
                    ops::add_forward(&activations[node.inputs[0]], &activations[node.inputs[1]]),
                    None,
                ),
            };
            activations.push(out);
            pool_args.push(pool);
        }
        (
            activations[self.output_node()].clone(),
            Cache {
                activations,
                pool_args,
            },
        )
    }

    /// Backpropagates `out_grad` through the cached graph. Returns per-param
    /// gradients (ordered like `params`) and the gradient at the input node.
    pub fn backward(&self, cache: &Cache, out_grad: &Tensor) -> (Vec<Vec<f64>>, Tensor) {
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        node_grads[self.output_node()] = Some(out_grad.clone());
        let mut param_grads: Vec<Vec<f64>> =
            self.params.iter().map(|p| vec![0.0; p.len()]).collect();

        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            None => *slot = Some(g),
            Some(existing) => {
                for (dst, src) in existing.data.iter_mut().zip(&g.data) {
                    *dst += src;
                }
            }
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    node_grads[idx] = Some(grad); // keep for the caller
                }
                Op::Conv { weight, bias } => {
                    let (gin, gw, gb) = ops::conv2d_backward(
                        &cache.activations[node.inputs[0]],
                        &self.params[*weight],
                        &grad,
                    );
                    for (dst, src) in param_grads[*weight].iter_mut().zip(&gw) {
                        *dst += src;
                    }
                    for (dst, src) in param_grads[*bias].iter_mut().zip(&gb) {
                        *dst += src;
                    }
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                Op::Relu => {
                    let gin = ops::relu_backward(&cache.activations[idx], &grad);
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                Op::MaxPool2 => {
                    let arg = cache.pool_args[idx].as_ref().expect("pool cache");
                    let gin = ops::maxpool2_backward(
                        cache.activations[node.inputs[0]].shape,
                        arg,
                        &grad,
                    );
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                Op::Upsample2 => {
                    let gin =
                        ops::upsample2_backward(cache.activations[node.inputs[0]].shape, &grad);
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                Op::Concat => {
                    let c_a = cache.activations[node.inputs[0]].shape[1];
                    let (ga, gb) = ops::concat_backward(c_a, &grad);
                    accumulate(&mut node_grads[node.inputs[0]], ga);
                    accumulate(&mut node_grads[node.inputs[1]], gb);
                }
                Op::Add => {
                    accumulate(&mut node_grads[node.inputs[0]], grad.clone());
                    accumulate(&mut node_grads[node.inputs[1]], grad);
                }
            }
        }

        let input_grad = node_grads[0]
            .take()
            .expect("input node receives a gradient");
        (param_grads, input_grad)
    }

    /// Structural check used by tests: true when any node pools.
    pub fn has_pooling(&self) -> bool {
        self.nodes.iter().any(|n| n.op == Op::MaxPool2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_graph_forward_backward() {
        // input -> relu -> add(input, relu) : y = x + relu(x)
        let model = Model {
            nodes: vec![
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Relu,
                    inputs: vec![0],
                },
                Node {
                    op: Op::Add,
                    inputs: vec![0, 1],
                },
            ],
            params: vec![],
        };
        let x = Tensor::from_vec([1, 1, 1, 4], vec![-2.0, -0.5, 0.5, 2.0]);
        let (y, cache) = model.forward(&x);
        assert_eq!(y.data, vec![-2.0, -0.5, 1.0, 4.0]);
        let g = Tensor::from_vec([1, 1, 1, 4], vec![1.0; 4]);
        let (_, gin) = model.backward(&cache, &g);
        // dy/dx = 1 + (x > 0): fan-in through both branches.
        assert_eq!(gin.data, vec![1.0, 1.0, 2.0, 2.0]);
    }
}
