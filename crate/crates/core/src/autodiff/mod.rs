//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable op whose inputs depend on a tracked
//! leaf, in execution order. [`Var::backward`] walks the record once in reverse,
//! accumulating gradients (fan-out adds). Ops on untracked values are not
//! recorded, so a tape built with [`Tape::no_grad`] keeps no intermediates alive.
//!
//! Tapes and vars use `Rc` and stay on the thread that created them.

mod gradcheck;
mod nn;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

pub use gradcheck::{grad_check, GradCheck, GradCheckOptions};
pub use nn::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Computes input gradients from the output gradient. The flags say which
/// inputs are tracked; entries for untracked inputs may be `None`.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct Inner<T> {
    recording: bool,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    branches: Branches,
}

/// Branch decisions of the non-smooth ops (relu, abs, clamp, max pooling),
/// in execution order.
#[derive(Clone, Debug, Default)]
pub(crate) struct BranchLog(Rc<Vec<Vec<u32>>>);

#[derive(Default)]
enum Branches {
    /// Every op takes its natural branch.
    #[default]
    Free,
    Record(Vec<Vec<u32>>),
    /// Ops reuse logged decisions; `flips` counts ops whose natural choice differed.
    Replay { log: BranchLog, cursor: usize, flips: usize },
}

/// Ordered record of executed ops.
pub struct Tape<T>(Rc<RefCell<Inner<T>>>);

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape on which leaves are never tracked (inference).
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape(Rc::new(RefCell::new(Inner {
            recording,
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            branches: Branches::Free,
        })))
    }

    /// Starts logging branch decisions of non-smooth ops.
    pub(crate) fn record_branches(&self) {
        self.0.borrow_mut().branches = Branches::Record(Vec::new());
    }

    pub(crate) fn take_branches(&self) -> BranchLog {
        match std::mem::take(&mut self.0.borrow_mut().branches) {
            Branches::Record(log) => BranchLog(Rc::new(log)),
            _ => BranchLog::default(),
        }
    }

    /// A no-grad tape whose non-smooth ops repeat the decisions in `log`, so the
    /// computed function stays on one smooth piece.
    pub(crate) fn replaying(log: BranchLog) -> Self {
        let tape = Self::no_grad();
        tape.0.borrow_mut().branches = Branches::Replay { log, cursor: 0, flips: 0 };
        tape
    }

    /// Ops on a replaying tape whose natural branch differed from the log.
    pub(crate) fn branch_flips(&self) -> usize {
        match &self.0.borrow().branches {
            Branches::Replay { flips, .. } => *flips,
            _ => 0,
        }
    }

    /// Branch codes a non-smooth op should use, given its natural ones.
    pub(crate) fn branches(&self, natural: Vec<u32>) -> Vec<u32> {
        let mut inner = self.0.borrow_mut();
        match &mut inner.branches {
            Branches::Free => natural,
            Branches::Record(log) => {
                log.push(natural.clone());
                natural
            }
            Branches::Replay { log, cursor, flips } => {
                let logged = log.0.get(*cursor);
                *cursor += 1;
                match logged {
                    Some(l) if l.len() == natural.len() => {
                        if *l != natural {
                            *flips += 1;
                        }
                        l.clone()
                    }
                    _ => {
                        *flips += 1;
                        natural
                    }
                }
            }
        }
    }

    pub fn is_recording(&self) -> bool {
        self.0.borrow().recording
    }

    /// Number of recorded ops, leaves included.
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked leaf (untracked on a no-grad tape).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let mut inner = self.0.borrow_mut();
        let node = if inner.recording {
            inner.nodes.push(Node { inputs: Vec::new(), backward: None });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Var { tape: self.clone(), node, value: Rc::new(value) }
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { tape: self.clone(), node: None, value: Rc::new(value) }
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.0.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// A tensor value living on a tape.
pub struct Var<T> {
    tape: Tape<T>,
    node: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var { tape: self.tape.clone(), node: self.node, value: Rc::clone(&self.value) }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Whether gradients will flow to this value.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Accumulated gradient after [`Var::backward`], same shape as the value.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let id = self.node?;
        self.tape.0.borrow().grads.get(id).and_then(|g| g.clone())
    }

    /// Back-propagates from this scalar through the whole tape.
    pub fn backward(&self) -> Result<()> {
        if self.value.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        let Some(root) = self.node else {
            return Err(Error::invalid("loss does not depend on any tracked value"));
        };
        let mut inner = self.tape.0.borrow_mut();
        if inner.backward_done {
            return Err(Error::BackwardTwice);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::from_parts(self.shape().to_vec(), vec![T::one()]));
        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(ig)) = (input, ig) else { continue };
                match &mut grads[*input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        inner.grads = grads;
        inner.backward_done = true;
        Ok(())
    }

    /// Records an op producing `value` from `inputs`.
    pub(crate) fn record(
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<T>> {
        let tape = inputs[0].tape.clone();
        for v in &inputs[1..] {
            if v.node.is_some() && !tape.same(&v.tape) {
                return Err(Error::invalid("op mixes values from different tapes"));
            }
        }
        let tracked = inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            let mut inner = tape.0.borrow_mut();
            inner.nodes.push(Node {
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Ok(Var { tape, node, value: Rc::new(value) })
    }

    /// Same tape, new untracked value.
    pub fn constant_like(&self, value: Tensor<T>) -> Var<T> {
        self.tape.constant(value)
    }

    /// Untracked copy of this value.
    pub fn detach(&self) -> Var<T> {
        Var { tape: self.tape.clone(), node: None, value: Rc::clone(&self.value) }
    }
}
