use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Element, Tensor};

type BackwardFn<E> = Box<dyn FnOnce(&Tensor<E>, &mut GradSink<E>)>;

struct Node<E: Element> {
    len: usize,
    backward: Option<BackwardFn<E>>,
}

/// Records a computation so that gradients can be pulled back through it.
///
/// Every value produced through a [`Var`] bound to this tape is appended as a
/// node; [`Tape::backward`] walks the nodes in reverse creation order. Nodes
/// whose inputs are all untracked never store a backward closure, so an
/// inference pass costs no more than the forward arithmetic.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, E: Element> {
    tape: &'t Tape<E>,
    slot: Slot,
    value: Rc<Tensor<E>>,
}

/// Identity of a node as seen from a backward closure.
#[derive(Clone, Copy, Debug)]
pub struct Slot {
    id: usize,
    tracked: bool,
}

impl Slot {
    pub fn tracked(&self) -> bool {
        self.tracked
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, len: usize, backward: Option<BackwardFn<E>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { len, backward });
        nodes.len() - 1
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.wrap(Rc::new(value), false)
    }

    /// A value whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.wrap(Rc::new(value), true)
    }

    fn wrap(&self, value: Rc<Tensor<E>>, tracked: bool) -> Var<'_, E> {
        let id = self.push(value.len(), None);
        Var {
            tape: self,
            slot: Slot { id, tracked },
            value,
        }
    }

    /// Records the result of a custom operation.
    ///
    /// `backward` receives the gradient with respect to `value` and must
    /// accumulate into the slots of `parents` through the [`GradSink`]. It is
    /// dropped without being called when no parent is tracked.
    pub fn record<F>(&self, value: Tensor<E>, parents: &[&Var<'_, E>], backward: F) -> Var<'_, E>
    where
        F: FnOnce(&Tensor<E>, &mut GradSink<E>) + 'static,
    {
        let tracked = parents.iter().any(|p| p.slot.tracked);
        let len = value.len();
        let backward: Option<BackwardFn<E>> = if tracked {
            Some(Box::new(backward))
        } else {
            None
        };
        let id = self.push(len, backward);
        Var {
            tape: self,
            slot: Slot { id, tracked },
            value: Rc::new(value),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// Consumes the recorded closures: a tape supports a single backward pass.
    pub fn backward(&self, root: &Var<'_, E>) -> Gradients<E> {
        assert_eq!(root.value.len(), 1, "backward root must be a scalar");
        let mut nodes = self.nodes.borrow_mut();
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        if root.slot.tracked {
            sink.grads[root.slot.id] = Some(vec![E::one()]);
        }
        for id in (0..=root.slot.id).rev() {
            let Some(backward) = nodes[id].backward.take() else {
                continue;
            };
            let Some(grad) = sink.grads[id].take() else {
                continue;
            };
            debug_assert_eq!(grad.len(), nodes[id].len);
            // Only the data of the incoming gradient matters to the closures;
            // they know the shape of their own output.
            let grad = Tensor::from_parts(vec![grad.len()], grad);
            backward(&grad, &mut sink);
        }
        Gradients { grads: sink.grads }
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<E>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn tracked(&self) -> bool {
        self.slot.tracked
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, E> {
        self.tape.wrap(self.value.clone(), false)
    }
}

/// Accumulator handed to backward closures.
pub struct GradSink<E: Element> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> GradSink<E> {
    /// Runs `f` on the (zero-initialised on first use) gradient buffer of
    /// `slot`, which holds `len` elements. Untracked slots are skipped.
    pub fn accumulate(&mut self, slot: Slot, len: usize, f: impl FnOnce(&mut [E])) {
        if !slot.tracked {
            return;
        }
        let buf = self.grads[slot.id].get_or_insert_with(|| vec![E::zero(); len]);
        debug_assert_eq!(buf.len(), len);
        f(buf);
    }

    /// Adds `values` element-wise into the gradient of `slot`.
    pub fn add(&mut self, slot: Slot, values: &[E]) {
        self.accumulate(slot, values.len(), |g| {
            for (g, &v) in g.iter_mut().zip(values) {
                *g += v;
            }
        });
    }
}

/// Gradients collected by [`Tape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient with respect to `var`, shaped like its value. Tracked
    /// variables the loss does not depend on yield zeros; untracked ones `None`.
    pub fn get(&self, var: &Var<'_, E>) -> Option<Tensor<E>> {
        if !var.slot.tracked {
            return None;
        }
        let shape = var.shape().to_vec();
        Some(match &self.grads[var.slot.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }

    /// Like [`Gradients::get`] but moves the buffer out.
    pub fn take(&mut self, var: &Var<'_, E>) -> Option<Tensor<E>> {
        if !var.slot.tracked {
            return None;
        }
        let shape = var.shape().to_vec();
        Some(match self.grads[var.slot.id].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(shape),
        })
    }
}
