//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every recorded node that
//! requires one.

use super::ops::{self, ConvSpec};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Gelu(Var),
    Resize(Var),
    ToTokens(Var),
    FromTokens(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    BceMean {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by graph variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add operands differ in shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| ops::gelu(v)).collect());
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Bilinear resize of a `[b, c, h, w]` variable to `oh x ow`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        if (h, w) == (oh, ow) {
            return x;
        }
        let data = ops::resize_planes(&self.value(x).data, b * c, h, w, oh, ow);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![b, c, oh, ow], data), Op::Resize(x), rg)
    }

    pub fn to_tokens(&mut self, x: Var) -> Var {
        let out = ops::to_tokens(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::ToTokens(x), rg)
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = ops::from_tokens(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(out, Op::FromTokens(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, inv_std) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), 1e-6);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::linear(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, probs) = ops::attention(self.value(q), self.value(k), self.value(v), heads);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy between `logits` and constant `targets`.
    pub fn bce_mean(&mut self, logits: Var, targets: &Tensor) -> Var {
        let vx = self.value(logits);
        assert_eq!(vx.shape, targets.shape, "logits and targets differ in shape");
        let loss = ops::bce_with_logits(&vx.data, &targets.data);
        let rg = self.rg(logits);
        self.push(
            Tensor::new(vec![1], vec![loss]),
            Op::BceMean {
                logits,
                targets: targets.data.clone(),
            },
            rg,
        )
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(&self.value(root).shape, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let need_dx = self.rg(*x);
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &g, *spec, need_dx);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let data = vx.data.iter().zip(&g.data).map(|(&v, &d)| d * ops::gelu_grad(v)).collect();
                    accumulate(&mut grads, *x, Tensor::new(vx.shape.clone(), data));
                }
                Op::Resize(x) => {
                    let (b, c, h, w) = self.value(*x).dims4();
                    let (_, _, oh, ow) = g.dims4();
                    let data = ops::resize_planes_backward(&g.data, b * c, h, w, oh, ow);
                    accumulate(&mut grads, *x, Tensor::new(vec![b, c, h, w], data));
                }
                Op::ToTokens(x) => {
                    let (_, _, h, w) = self.value(*x).dims4();
                    accumulate(&mut grads, *x, ops::from_tokens(&g, h, w));
                }
                Op::FromTokens(x) => {
                    accumulate(&mut grads, *x, ops::to_tokens(&g));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dgamma, dbeta) = ops::layer_norm_backward(&g, self.value(*gamma), xhat, inv_std);
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g, self.rg(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = ops::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        *heads,
                    );
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.rg(var) {
                            accumulate(&mut grads, var, d);
                        }
                    }
                }
                Op::BceMean { logits, targets } => {
                    let vx = self.value(*logits);
                    let scale = g.data[0];
                    let data = ops::bce_with_logits_grad(&vx.data, targets)
                        .into_iter()
                        .map(|d| d * scale)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(vx.shape.clone(), data));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot => *slot = Some(d),
    }
}
