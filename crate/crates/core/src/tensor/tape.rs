//! Reverse-mode differentiation over the ops the network uses.
//!
//! A [`Tape`] records every op as it is evaluated. [`Tape::backward`] sweeps
//! the records in reverse creation order (a valid reverse topological order,
//! since inputs always precede their consumers) and accumulates gradients
//! additively across fan-out.

use super::kernels::{self, BnCache, BnMode, RunningStats};
use super::param::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::lak::{self, Boundary, LakOptions, LocalAttentionMap};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub use super::kernels::BnMode as Mode;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
    },
    Relu {
        x: Var,
    },
    /// Output `index` of batch-norm group `group`.
    BatchNorm {
        group: usize,
        index: usize,
    },
    LakLogits {
        q: Var,
        k: Var,
        r: usize,
    },
    LakSoftmax {
        m: Var,
        channels: usize,
        r: usize,
        boundary: Boundary,
    },
    LakConv {
        m: Var,
        v: Var,
        r: usize,
        boundary: Boundary,
    },
    LakFused {
        q: Var,
        k: Var,
        v: Var,
        map: LocalAttentionMap,
    },
    MapToChannels {
        m: Var,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: Real,
    },
    CornerL1 {
        pred: Var,
        target: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct BnGroup {
    inputs: Vec<Var>,
    first_output: usize,
    gamma: Var,
    beta: Var,
    cache: BnCache,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bn_groups: Vec<BnGroup>,
}

/// Gradients of a scalar root with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like its value if unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g).expect("gradient shape matches value"),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A free input whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y, Op::Conv2d { x, w, b }, rg, "conv2d")
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv1x1(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y, Op::Conv1x1 { x, w, b }, rg, "conv1x1")
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2x2(self.value(x))?;
        let rg = self.rg(x);
        self.push(y, Op::MaxPool { x, argmax }, rg, "maxpool2x2")
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avgpool(self.value(x))?;
        let rg = self.rg(x);
        self.push(y, Op::AvgPool { x }, rg, "global_avgpool")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::relu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg, "relu")
    }

    /// Batch normalization across `xs`; returns one output per input.
    pub fn batchnorm(
        &mut self,
        xs: &[Var],
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        let (outs, cache) = {
            let inputs: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
            kernels::batchnorm(&inputs, self.value(gamma), self.value(beta), stats, mode)?
        };
        let rg = xs.iter().any(|&x| self.rg(x)) || self.rg(gamma) || self.rg(beta);
        let group = self.bn_groups.len();
        let first_output = self.nodes.len();
        let mut vars = Vec::with_capacity(outs.len());
        for (index, y) in outs.into_iter().enumerate() {
            vars.push(self.push(y, Op::BatchNorm { group, index }, rg, "batchnorm")?);
        }
        self.bn_groups.push(BnGroup {
            inputs: xs.to_vec(),
            first_output,
            gamma,
            beta,
            cache,
        });
        Ok(vars)
    }

    /// Raw local correlation map `[H, W, S, S]`.
    pub fn lak_logits(&mut self, q: Var, k: Var, r: usize) -> Result<Var> {
        let m = lak::local_attention_logits(self.value(q), self.value(k), r)?;
        let rg = self.rg(q) || self.rg(k);
        self.push(m.data, Op::LakLogits { q, k, r }, rg, "lak_logits")
    }

    pub fn lak_softmax(
        &mut self,
        m: Var,
        channels: usize,
        r: usize,
        boundary: Boundary,
    ) -> Result<Var> {
        let raw = self.as_map(m, r, false, Boundary::Mask);
        let p = lak::softmax_local_with(&raw, channels, boundary)?;
        let rg = self.rg(m);
        self.push(
            p.data,
            Op::LakSoftmax {
                m,
                channels,
                r,
                boundary,
            },
            rg,
            "lak_softmax",
        )
    }

    pub fn lak_conv(&mut self, m: Var, v: Var, r: usize, boundary: Boundary) -> Result<Var> {
        let map = self.as_map(m, r, true, boundary);
        let h = lak::local_attention_conv(&map, self.value(v))?;
        let rg = self.rg(m) || self.rg(v);
        self.push(h, Op::LakConv { m, v, r, boundary }, rg, "lak_conv")
    }

    pub fn lak_fused(&mut self, q: Var, k: Var, v: Var, opts: LakOptions) -> Result<Var> {
        let (h, map) = lak::lak_fused(self.value(q), self.value(k), self.value(v), opts)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(h, Op::LakFused { q, k, v, map }, rg, "lak_fused")
    }

    /// The normalized map saved by a [`Tape::lak_fused`] node.
    pub fn fused_map(&self, v: Var) -> Option<&LocalAttentionMap> {
        match &self.nodes[v.0].op {
            Op::LakFused { map, .. } => Some(map),
            _ => None,
        }
    }

    fn as_map(&self, m: Var, r: usize, normalized: bool, boundary: Boundary) -> LocalAttentionMap {
        LocalAttentionMap {
            data: self.value(m).clone(),
            radius: r,
            normalized,
            boundary,
        }
    }

    /// `[H, W, S, S]` to channels-first `[S*S, H, W]`.
    pub fn map_to_channels(&mut self, m: Var) -> Result<Var> {
        let y = map_to_channels(self.value(m))?;
        let rg = self.rg(m);
        self.push(y, Op::MapToChannels { m }, rg, "map_to_channels")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.axpy(1.0, self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "mul {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let y = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(y, Op::Scale { x, c }, rg, "scale")
    }

    /// `1/4 * sum_i |pred_i - target_i|` over 8 corner-offset components.
    pub fn corner_l1(&mut self, pred: Var, target: &[Real]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape(format!(
                "corner loss: {} predictions, {} targets",
                p.len(),
                target.len()
            )));
        }
        let l: Real = p
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .sum::<Real>()
            / 4.0;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(l),
            Op::CornerL1 {
                pred,
                target: target.to_vec(),
            },
            rg,
            "corner_l1",
        )
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::BatchNorm { group, index } = node.op {
                // all outputs of a group are consecutive and only consumed later,
                // so their gradients are final once the first one is reached
                if index == 0 {
                    self.bn_backward(group, &mut grads)?;
                }
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.node_backward(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::BatchNorm { .. } => {}
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), gy, self.rg(*x))?;
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
                accumulate(&mut grads[w.0], gw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (gx, gw, gb) = kernels::conv1x1_backward(self.value(*x), self.value(*w), gy)?;
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                accumulate(&mut grads[w.0], gw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = kernels::maxpool2x2_backward(self.value(*x).shape(), argmax, gy);
                accumulate(&mut grads[x.0], gx);
            }
            Op::AvgPool { x } => {
                let gx = kernels::global_avgpool_backward(self.value(*x).shape(), gy);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Relu { x } => {
                accumulate(&mut grads[x.0], kernels::relu_backward(self.value(*x), gy));
            }
            Op::LakLogits { q, k, r } => {
                let (gq, gk) =
                    lak::local_attention_logits_backward(self.value(*q), self.value(*k), *r, gy)?;
                accumulate(&mut grads[q.0], gq);
                accumulate(&mut grads[k.0], gk);
            }
            Op::LakSoftmax {
                channels,
                r,
                boundary,
                m,
            } => {
                let p = LocalAttentionMap {
                    data: node.value.clone(),
                    radius: *r,
                    normalized: true,
                    boundary: *boundary,
                };
                let gm = lak::softmax_local_backward(&p, *channels, gy)?;
                accumulate(&mut grads[m.0], gm);
            }
            Op::LakConv { m, v, r, boundary } => {
                let map = self.as_map(*m, *r, true, *boundary);
                let (gm, gv) = lak::local_attention_conv_backward(&map, self.value(*v), gy)?;
                accumulate(&mut grads[m.0], gm);
                accumulate(&mut grads[v.0], gv);
            }
            Op::LakFused { q, k, v, map } => {
                let (gq, gk, gv) = lak::lak_fused_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    map,
                    gy,
                )?;
                accumulate(&mut grads[q.0], gq);
                accumulate(&mut grads[k.0], gk);
                accumulate(&mut grads[v.0], gv);
            }
            Op::MapToChannels { m } => {
                let gm = channels_to_map(gy, self.value(*m).shape())?;
                accumulate(&mut grads[m.0], gm);
            }
            Op::Sum { x } => {
                let g = gy.data()[0];
                accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), g));
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[a.0], gy.clone());
                accumulate(&mut grads[b.0], gy.clone());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    va.shape(),
                    gy.data()
                        .iter()
                        .zip(vb.data())
                        .map(|(g, y)| g * y)
                        .collect(),
                )?;
                let gb = Tensor::new(
                    vb.shape(),
                    gy.data()
                        .iter()
                        .zip(va.data())
                        .map(|(g, x)| g * x)
                        .collect(),
                )?;
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Scale { x, c } => {
                accumulate(&mut grads[x.0], gy.map(|g| g * c));
            }
            Op::CornerL1 { pred, target } => {
                let g = gy.data()[0] / 4.0;
                let p = self.value(*pred);
                let data = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        if a > b {
                            g
                        } else if a < b {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[pred.0], Tensor::new(p.shape(), data)?);
            }
        }
        Ok(())
    }

    fn bn_backward(&self, group: usize, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = &self.bn_groups[group];
        let gys: Vec<Tensor> = (0..g.inputs.len())
            .map(|i| {
                let idx = g.first_output + i;
                grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()))
            })
            .collect();
        if grads[g.first_output..g.first_output + g.inputs.len()]
            .iter()
            .all(Option::is_none)
        {
            return Ok(());
        }
        let (gxs, ggamma, gbeta) =
            kernels::batchnorm_backward(&g.cache, self.value(g.gamma), &gys)?;
        for (x, gx) in g.inputs.iter().zip(gxs) {
            if self.rg(*x) {
                accumulate(&mut grads[x.0], gx);
            }
        }
        accumulate(&mut grads[g.gamma.0], ggamma);
        accumulate(&mut grads[g.beta.0], gbeta);
        Ok(())
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[idx]) {
                store.get_mut(*id).grad.axpy(1.0, g)?;
            }
        }
        Ok(())
    }
}

/// `[H, W, S, S]` to `[S*S, H, W]`.
pub fn map_to_channels(m: &Tensor) -> Result<Tensor> {
    let (h, w, s) = match m.shape()[..] {
        [h, w, s, s2] if s == s2 => (h, w, s),
        _ => {
            return Err(Error::shape(format!(
                "expected [H, W, S, S], got {:?}",
                m.shape()
            )))
        }
    };
    let ss = s * s;
    let hw = h * w;
    let mut out = vec![0.0; ss * hw];
    for p in 0..hw {
        for u in 0..ss {
            out[u * hw + p] = m.data()[p * ss + u];
        }
    }
    Tensor::new(&[ss, h, w], out)
}

/// Inverse of [`map_to_channels`].
pub fn channels_to_map(x: &Tensor, map_shape: &[usize]) -> Result<Tensor> {
    let (h, w, s) = (map_shape[0], map_shape[1], map_shape[2]);
    let ss = s * s;
    let hw = h * w;
    if x.shape() != [ss, h, w] {
        return Err(Error::shape(format!(
            "expected [{ss}, {h}, {w}], got {:?}",
            x.shape()
        )));
    }
    let mut out = vec![0.0; ss * hw];
    for u in 0..ss {
        for p in 0..hw {
            out[p * ss + u] = x.data()[u * hw + p];
        }
    }
    Tensor::new(map_shape, out)
}
