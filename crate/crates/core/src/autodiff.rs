//! Reverse-mode differentiation over the network op set.
//!
//! A [`Tape`] records values and the ops that produced them. Gradients
//! reach filter coefficients through the sampled basis: taps are linear in
//! the coefficients.

use crate::conv::{
    add_bias, correlate, correlate_input_grad, correlate_tap_grad, fold_tap_grad, orientation_pool,
    relu, ActShape, ExpandedBank, LayerKind, LayerSpec, NetworkSpec,
};
use crate::error::{Error, Result};
use crate::prox::soft_threshold;
use crate::tensor::PlanarImage;
use crate::unfold::DegradationOp;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv {
        input: NodeId,
        bank: ExpandedBank,
        offset: usize,
        n_filters: usize,
        nb: usize,
    },
    Bias {
        input: NodeId,
        bias: Vec<f64>,
        offset: usize,
    },
    Relu {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Pool {
        input: NodeId,
        order: usize,
    },
    SoftThreshold {
        input: NodeId,
        weight: f64,
    },
    /// `x - eta A^T (A x - y)`
    GradStep {
        x: NodeId,
        y: PlanarImage,
        op: DegradationOp,
        eta: f64,
    },
}

/// Recorded computation over planar values (group maps keep all `t*C`
/// channels).
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<PlanarImage>,
    param_count: usize,
    consumed: bool,
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// in the layout of [`NetworkSpec::params`]
    pub params: Vec<f64>,
    nodes: Vec<Option<PlanarImage>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it influenced the output.
    pub fn node(&self, id: NodeId) -> Option<&PlanarImage> {
        self.nodes.get(id).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<PlanarImage>, g: PlanarImage) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
    });
    Ok(())
}

fn grad_step_value(
    x: &PlanarImage,
    y: &PlanarImage,
    op: &DegradationOp,
    eta: f64,
) -> Result<PlanarImage> {
    let r = op.apply(x)?.zip_map(y, |a, b| a - b)?;
    let g = op.adjoint(&r)?;
    x.zip_map(&g, |a, b| a - eta * b)
}

impl Tape {
    /// A tape whose parameter gradients have `param_count` entries.
    pub fn new(param_count: usize) -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            param_count,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &PlanarImage {
        &self.values[id]
    }

    fn push(&mut self, op: Op, value: PlanarImage) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.values.len() - 1
    }

    fn check_node(&self, id: NodeId) -> Result<()> {
        if id >= self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "node {id} is not on the tape"
            )));
        }
        Ok(())
    }

    fn compute(&self, op: &Op) -> Result<PlanarImage> {
        let v = &self.values;
        Ok(match op {
            Op::Input => unreachable!("inputs are not recomputed"),
            Op::Conv { input, bank, .. } => {
                correlate(&v[*input], &bank.taps, bank.out_channels, bank.p)
            }
            Op::Bias { input, bias, .. } => add_bias(&v[*input], bias),
            Op::Relu { input } => relu(&v[*input]),
            Op::Add { a, b } => v[*a].zip_map(&v[*b], |x, y| x + y)?,
            Op::Pool { input, order } => orientation_pool(&v[*input], *order),
            Op::SoftThreshold { input, weight } => soft_threshold(&v[*input], *weight),
            Op::GradStep { x, y, op, eta } => grad_step_value(&v[*x], y, op, *eta)?,
        })
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.compute(&op)?;
        Ok(self.push(op, value))
    }

    pub fn input(&mut self, x: PlanarImage) -> NodeId {
        self.push(Op::Input, x)
    }

    /// Convolution with the layer's sampled bank; coefficient gradients land
    /// at `offset` onwards.
    pub fn conv(&mut self, input: NodeId, layer: &LayerSpec, offset: usize) -> Result<NodeId> {
        self.check_node(input)?;
        if !layer.kind.is_conv() {
            return Err(Error::InvalidArgument(format!(
                "{:?} is not a convolution",
                layer.kind
            )));
        }
        let bank = layer.expand();
        if self.values[input].channels() != bank.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} channels, got {}",
                bank.in_channels,
                self.values[input].channels()
            )));
        }
        let nb = layer.filters[0].coefficients().len();
        if offset + layer.filters.len() * nb > self.param_count {
            return Err(Error::Shape(
                "parameter offset beyond the tape's parameter count".into(),
            ));
        }
        self.record(Op::Conv {
            input,
            bank,
            offset,
            n_filters: layer.filters.len(),
            nb,
        })
    }

    /// Adds `bias[k mod C]` to channel `k`.
    pub fn bias(&mut self, input: NodeId, bias: &[f64], offset: usize) -> Result<NodeId> {
        self.check_node(input)?;
        if bias.is_empty() || self.values[input].channels() % bias.len() != 0 {
            return Err(Error::Shape(
                "bias length must divide the channel count".into(),
            ));
        }
        if offset + bias.len() > self.param_count {
            return Err(Error::Shape(
                "parameter offset beyond the tape's parameter count".into(),
            ));
        }
        self.record(Op::Bias {
            input,
            bias: bias.to_vec(),
            offset,
        })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check_node(input)?;
        self.record(Op::Relu { input })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node(a)?;
        self.check_node(b)?;
        self.record(Op::Add { a, b })
    }

    pub fn pool(&mut self, input: NodeId, order: usize) -> Result<NodeId> {
        self.check_node(input)?;
        if order == 0 || self.values[input].channels() % order != 0 {
            return Err(Error::Shape(format!(
                "cannot pool {} channels over {order} orientations",
                self.values[input].channels()
            )));
        }
        self.record(Op::Pool { input, order })
    }

    pub fn soft_threshold(&mut self, input: NodeId, weight: f64) -> Result<NodeId> {
        self.check_node(input)?;
        if !(weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold {weight} must be nonnegative"
            )));
        }
        self.record(Op::SoftThreshold { input, weight })
    }

    /// Gradient step on `1/2 |A x - y|^2`.
    pub fn grad_step(
        &mut self,
        x: NodeId,
        y: &PlanarImage,
        op: &DegradationOp,
        eta: f64,
    ) -> Result<NodeId> {
        self.check_node(x)?;
        self.record(Op::GradStep {
            x,
            y: y.clone(),
            op: op.clone(),
            eta,
        })
    }

    /// Records `net` applied to `x`, with the network's parameters starting at
    /// `base` in the gradient vector.
    pub fn network(&mut self, net: &NetworkSpec, x: NodeId, base: usize) -> Result<NodeId> {
        self.check_node(x)?;
        if self.values[x].channels() != net.input_channels() {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                net.input_channels(),
                self.values[x].channels()
            )));
        }
        let offsets = net.param_offsets();
        let mut acts = vec![x];
        for (i, layer) in net.layers().iter().enumerate() {
            let cur = acts[i];
            let off = base + offsets[i];
            let next = match layer.kind {
                LayerKind::Lift | LayerKind::GroupConv | LayerKind::PlainConv => {
                    self.conv(cur, layer, off)?
                }
                LayerKind::Bias => self.bias(cur, &layer.bias, off)?,
                LayerKind::ReLU => self.relu(cur)?,
                LayerKind::ResidualAdd { skip } => self.add(cur, acts[skip])?,
                LayerKind::OrientationPool => self.pool(cur, net.group().order())?,
            };
            acts.push(next);
        }
        Ok(*acts.last().expect("nonempty"))
    }

    /// Recomputes every non-input value from the recorded ops.
    pub fn replay(&self) -> Result<Vec<PlanarImage>> {
        let mut replayed = Tape {
            ops: Vec::new(),
            values: Vec::new(),
            param_count: self.param_count,
            consumed: false,
        };
        for (op, value) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Input => value.clone(),
                _ => replayed.compute(op)?,
            };
            replayed.push(op.clone(), v);
        }
        Ok(replayed.values)
    }

    /// Back-propagates `seed` (the gradient of the loss with respect to
    /// `output`). A tape supports a single backward pass.
    pub fn backward(&mut self, output: NodeId, seed: &PlanarImage) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.check_node(output)?;
        if !seed.same_shape(&self.values[output]) {
            return Err(Error::Shape("seed gradient must match the output".into()));
        }
        self.consumed = true;
        let mut params = vec![0.0; self.param_count];
        let mut grads: Vec<Option<PlanarImage>> = vec![None; self.values.len()];
        grads[output] = Some(seed.clone());
        for id in (0..=output).rev() {
            let Some(g) = grads[id].clone() else { continue };
            match &self.ops[id] {
                Op::Input => {}
                Op::Conv {
                    input,
                    bank,
                    offset,
                    n_filters,
                    nb,
                } => {
                    let x = &self.values[*input];
                    let tg = correlate_tap_grad(&g, x, bank.p);
                    let cg = fold_tap_grad(bank, &tg, *n_filters, *nb);
                    for (p, c) in params[*offset..offset + cg.len()].iter_mut().zip(&cg) {
                        *p += c;
                    }
                    let gi = correlate_input_grad(&g, &bank.taps, bank.in_channels, bank.p);
                    accumulate(&mut grads[*input], gi)?;
                }
                Op::Bias {
                    input,
                    bias,
                    offset,
                } => {
                    let c = bias.len();
                    for px in g.data().chunks_exact(g.channels()) {
                        for (k, v) in px.iter().enumerate() {
                            params[offset + k % c] += v;
                        }
                    }
                    accumulate(&mut grads[*input], g)?;
                }
                Op::Relu { input } => {
                    let x = &self.values[*input];
                    let gi = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads[*input], gi)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], g.clone())?;
                    accumulate(&mut grads[*b], g)?;
                }
                Op::Pool { input, order } => {
                    let x = &self.values[*input];
                    let c = x.channels() / order;
                    let mut data = Vec::with_capacity(x.data().len());
                    for px in g.data().chunks_exact(c) {
                        for _ in 0..*order {
                            data.extend(px.iter().map(|v| v / *order as f64));
                        }
                    }
                    accumulate(&mut grads[*input], x.with_data(data)?)?;
                }
                Op::SoftThreshold { input, weight } => {
                    let x = &self.values[*input];
                    let gi = g.zip_map(x, |gv, xv| if xv.abs() > *weight { gv } else { 0.0 })?;
                    accumulate(&mut grads[*input], gi)?;
                }
                Op::GradStep { x, op, eta, .. } => {
                    let ata = op.adjoint(&op.apply(&g)?)?;
                    let gi = g.zip_map(&ata, |a, b| a - eta * b)?;
                    accumulate(&mut grads[*x], gi)?;
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

/// Output shape check used by callers that record a network on a tape.
pub fn planar_output(net: &NetworkSpec) -> Result<usize> {
    match net.output_shape() {
        ActShape::Planar { channels } => Ok(channels),
        other => Err(Error::Shape(format!(
            "network ends in {other:?}, not a planar image"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

/// First-order optimiser with per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd { lr })
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_square_norm_gradient_is_the_input() {
        let x = PlanarImage::from_fn(3, 2, 2, 1.0, |i, j, k| (i + 2 * j) as f64 - k as f64);
        let mut tape = Tape::new(0);
        let id = tape.input(x.clone());
        let g = tape.backward(id, &x).unwrap();
        assert_eq!(g.node(id), Some(&x));
    }

    #[test]
    fn second_backward_is_rejected() {
        let x = PlanarImage::zeros(2, 2, 1, 1.0);
        let mut tape = Tape::new(0);
        let id = tape.input(x.clone());
        let r = tape.relu(id).unwrap();
        tape.backward(r, &x).unwrap();
        assert!(matches!(tape.backward(r, &x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut p = vec![1.0, -2.0];
        Optimizer::sgd(0.5).step(&mut p, &[2.0, -4.0]).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn first_adam_step_has_learning_rate_size() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut p, &[3.0, -1e-3]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-4);
    }
}
