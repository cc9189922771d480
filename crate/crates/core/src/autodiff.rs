//! Reverse-mode differentiation over the blind-spot primitives.
//!
//! Network code is written once against [`GraphBuilder`]. [`Eager`] evaluates
//! it directly and keeps nothing around; [`Tape`] records every intermediate
//! so gradients can be pulled back to parameters and to the input frames.
//! A recorded tape can be walked backward any number of times with different
//! output seeds, which is how per-pixel Jacobians are extracted.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::blindspot_ops::{self as ops, ConvKernel};
use crate::error::{Result, UdvdError};
use crate::scalar::Scalar;
use crate::tensor::PlaneTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named convolution kernels. Every use of a `ParamId` reads the same
/// storage, so shared layers accumulate gradient from all of their uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kernels: Vec<ConvKernel<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            kernels: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kernel: ConvKernel<T>) -> ParamId {
        self.names.push(name.into());
        self.kernels.push(kernel);
        ParamId(self.kernels.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernel(&self, id: ParamId) -> &ConvKernel<T> {
        &self.kernels[id.0]
    }

    pub fn kernel_mut(&mut self, id: ParamId) -> &mut ConvKernel<T> {
        &mut self.kernels[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ConvKernel<T>)> {
        self.kernels
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (k, n))| (ParamId(i), n.as_str(), k))
    }

    pub fn kernels_mut(&mut self) -> impl Iterator<Item = &mut ConvKernel<T>> {
        self.kernels.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn weight_count(&self) -> usize {
        self.kernels.iter().map(|k| k.data.len()).sum()
    }

    /// Zeroed gradient buffers, one per kernel.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.kernels
            .iter()
            .map(|k| vec![T::zero(); k.data.len()])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kernels: self
                .kernels
                .iter()
                .map(|k| ConvKernel {
                    out_channels: k.out_channels,
                    in_channels: k.in_channels,
                    kh: k.kh,
                    kw: k.kw,
                    data: k.data.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Operations the network is assembled from.
pub trait GraphBuilder<T: Scalar> {
    type Var: Clone;

    fn params(&self) -> &ParamStore<T>;
    fn shape(&self, x: &Self::Var) -> (usize, usize, usize);
    fn conv(&mut self, x: &Self::Var, p: ParamId) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn pool(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn upsample(&mut self, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    fn rotate(&mut self, x: &Self::Var, quarter_turns: usize) -> Self::Var;
    fn causal_offset(&mut self, x: &Self::Var) -> Self::Var;
}

fn check_conv<T: Scalar>(kernel: &ConvKernel<T>, shape: (usize, usize, usize)) -> Result<()> {
    if kernel.in_channels != shape.0 {
        return Err(UdvdError::shape(format!(
            "conv expects {} input channels, got {}",
            kernel.in_channels, shape.0
        )));
    }
    if kernel.kh % 2 == 0 || kernel.kw % 2 == 0 {
        return Err(UdvdError::shape(format!(
            "kernel {}x{} unusable on {}x{} plane",
            kernel.kh, kernel.kw, shape.1, shape.2
        )));
    }
    Ok(())
}

/// Direct evaluation without recording.
pub struct Eager<'a, T: Scalar> {
    params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Eager<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self { params }
    }
}

impl<'a, T: Scalar> GraphBuilder<T> for Eager<'a, T> {
    type Var = Rc<PlaneTensor<T>>;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn shape(&self, x: &Self::Var) -> (usize, usize, usize) {
        x.shape()
    }

    fn conv(&mut self, x: &Self::Var, p: ParamId) -> Result<Self::Var> {
        let kernel = self.params.kernel(p);
        check_conv(kernel, x.shape())?;
        Ok(Rc::new(ops::shift_conv2d_unchecked(x, kernel)))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(ops::relu(x))
    }

    fn pool(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(ops::offset_maxpool(x)?))
    }

    fn upsample(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(ops::nearest_upsample(x))
    }

    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var> {
        let parts: Vec<&PlaneTensor<T>> = xs.iter().map(|x| x.as_ref()).collect();
        Ok(Rc::new(PlaneTensor::concat(&parts)?))
    }

    fn rotate(&mut self, x: &Self::Var, quarter_turns: usize) -> Self::Var {
        if quarter_turns % 4 == 0 {
            return x.clone();
        }
        Rc::new(ops::rotate90(x, quarter_turns))
    }

    fn causal_offset(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(ops::causal_offset(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: NodeId, p: ParamId },
    Relu(NodeId),
    Pool { x: NodeId, source: Vec<u32> },
    Upsample(NodeId),
    Concat(Vec<NodeId>),
    Rotate { x: NodeId, quarter_turns: usize },
    CausalOffset(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: PlaneTensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recording evaluator.
pub struct Tape<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    track_params: bool,
    detect_kinks: bool,
    kinks: usize,
}

/// Gradients pulled back to the leaves that asked for them.
#[derive(Debug)]
pub struct LeafGrads<T> {
    grads: Vec<(NodeId, PlaneTensor<T>)>,
}

impl<T: Scalar> LeafGrads<T> {
    pub fn get(&self, leaf: NodeId) -> Option<&PlaneTensor<T>> {
        self.grads.iter().find(|(id, _)| *id == leaf).map(|(_, g)| g)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<PlaneTensor<T>> {
        let pos = self.grads.iter().position(|(id, _)| *id == leaf)?;
        Some(self.grads.swap_remove(pos).1)
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// `track_params`: record enough to produce parameter gradients.
    pub fn new(params: &'a ParamStore<T>, track_params: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            track_params,
            detect_kinks: false,
            kinks: 0,
        }
    }

    /// Count ReLU inputs sitting exactly on zero and max-pool ties, the
    /// points where the network is not differentiable.
    pub fn with_kink_detection(mut self) -> Self {
        self.detect_kinks = true;
        self
    }

    pub fn kinks(&self) -> usize {
        self.kinks
    }

    pub fn leaf(&mut self, value: PlaneTensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &PlaneTensor<T> {
        &self.nodes[id.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: PlaneTensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Pull `seeds` (gradients w.r.t. recorded nodes) back through the tape.
    ///
    /// Parameter gradients are added into `param_grads` when given; leaf
    /// gradients are returned for leaves created with `requires_grad`.
    pub fn backward(
        &self,
        seeds: &[(NodeId, &PlaneTensor<T>)],
        mut param_grads: Option<&mut [Vec<T>]>,
    ) -> LeafGrads<T> {
        let mut grads: Vec<Option<PlaneTensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(
                self.nodes[id.0].value.shape(),
                g.shape(),
                "seed shape mismatch"
            );
            accumulate(&mut grads[id.0], (*g).clone());
        }
        let mut leaves = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    if let Some(g) = grads[i].take() {
                        leaves.push((NodeId(i), g));
                    }
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, p } => {
                    let kernel = self.params.kernel(*p);
                    let kg = match param_grads.as_deref_mut() {
                        Some(pg) if self.track_params => Some(pg[p.0].as_mut_slice()),
                        _ => None,
                    };
                    let want = self.needs(*x);
                    if let Some(dx) = ops::shift_conv2d_backward(self.value(*x), kernel, &g, kg, want)
                    {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], ops::relu_backward(&node.value, &g));
                    }
                }
                Op::Pool { x, source } => {
                    if self.needs(*x) {
                        let dx = ops::offset_maxpool_backward(self.value(*x).shape(), source, &g);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Upsample(x) => {
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], ops::nearest_upsample_backward(&g));
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for part in parts {
                        let c = self.value(*part).channels();
                        if self.needs(*part) {
                            accumulate(&mut grads[part.0], g.channel_range(start, c));
                        }
                        start += c;
                    }
                }
                Op::Rotate { x, quarter_turns } => {
                    if self.needs(*x) {
                        let back = ops::rotate90(&g, ops::inverse_turns(*quarter_turns));
                        accumulate(&mut grads[x.0], back);
                    }
                }
                Op::CausalOffset(x) => {
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], ops::causal_offset_backward(&g));
                    }
                }
            }
        }
        LeafGrads { grads: leaves }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<PlaneTensor<T>>, g: PlaneTensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'a, T: Scalar> GraphBuilder<T> for Tape<'a, T> {
    type Var = NodeId;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn shape(&self, x: &NodeId) -> (usize, usize, usize) {
        self.value(*x).shape()
    }

    fn conv(&mut self, x: &NodeId, p: ParamId) -> Result<NodeId> {
        let kernel = self.params.kernel(p);
        let input = self.value(*x);
        check_conv(kernel, input.shape())?;
        let out = ops::shift_conv2d_unchecked(input, kernel);
        if self.detect_kinks {
            self.kinks += ops::count_exact_zero_outputs(input, kernel, &out);
        }
        let rg = self.needs(*x) || self.track_params;
        Ok(self.push(out, Op::Conv { x: *x, p }, rg))
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let out = ops::relu(self.value(*x));
        let rg = self.needs(*x);
        self.push(out, Op::Relu(*x), rg)
    }

    fn pool(&mut self, x: &NodeId) -> Result<NodeId> {
        let input = self.value(*x);
        let (h, w) = (input.height(), input.width());
        if h % 2 != 0 || w % 2 != 0 {
            return Err(UdvdError::shape(format!(
                "offset max-pool needs even dims, got {h}x{w}"
            )));
        }
        let (out, source, ties) = ops::offset_maxpool_indexed(input);
        if self.detect_kinks {
            self.kinks += ties;
        }
        let rg = self.needs(*x);
        Ok(self.push(out, Op::Pool { x: *x, source }, rg))
    }

    fn upsample(&mut self, x: &NodeId) -> NodeId {
        let out = ops::nearest_upsample(self.value(*x));
        let rg = self.needs(*x);
        self.push(out, Op::Upsample(*x), rg)
    }

    fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&PlaneTensor<T>> = xs.iter().map(|x| self.value(*x)).collect();
        let out = PlaneTensor::concat(&parts)?;
        let rg = xs.iter().any(|x| self.needs(*x));
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    fn rotate(&mut self, x: &NodeId, quarter_turns: usize) -> NodeId {
        if quarter_turns % 4 == 0 {
            return *x;
        }
        let out = ops::rotate90(self.value(*x), quarter_turns);
        let rg = self.needs(*x);
        self.push(
            out,
            Op::Rotate {
                x: *x,
                quarter_turns: quarter_turns % 4,
            },
            rg,
        )
    }

    fn causal_offset(&mut self, x: &NodeId) -> NodeId {
        let out = ops::causal_offset(self.value(*x));
        let rg = self.needs(*x);
        self.push(out, Op::CausalOffset(*x), rg)
    }
}
