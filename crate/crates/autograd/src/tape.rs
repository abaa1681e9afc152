use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::Array2;

use crate::Float;

/// Maps the output gradient to one optional gradient per parent. The mask
/// says which parents need a gradient; entries for the others may be `None`.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Array2<F>, &[bool]) -> Vec<Option<Array2<F>>>>;

struct Node<F: Float> {
    value: Rc<Array2<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

/// Append-only record of evaluated operations.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Float> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.value();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &v.dim())
            .finish()
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, node: Node<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input. Its gradient is retained by `backward`.
    pub fn leaf(&self, value: Array2<F>) -> Var<'_, F> {
        self.insert(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Array2<F>) -> Var<'_, F> {
        self.insert(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub(crate) fn push(
        &self,
        value: Array2<F>,
        parents: Vec<usize>,
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.insert(Node {
            value: Rc::new(value),
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array2<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of a `1 × 1` root with respect to every leaf.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let shape = root.value().dim();
        assert_eq!(shape, (1, 1), "backward root must be a 1x1 scalar");
        self.backward_seeded(&[(root, Array2::ones((1, 1)))])
    }

    /// Reverse pass starting from explicit output gradients.
    ///
    /// Several seeds may be given; their contributions are summed. Only
    /// leaf gradients are kept in the result.
    pub fn backward_seeded(&self, seeds: &[(Var<'_, F>, Array2<F>)]) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (var, seed) in seeds {
            assert!(std::ptr::eq(var.tape, self), "seed from another tape");
            assert_eq!(
                seed.dim(),
                nodes[var.id].value.dim(),
                "seed shape must match its node"
            );
            accumulate(&mut grads[var.id], seed.clone());
            top = top.max(var.id);
        }
        if seeds.is_empty() {
            return Gradients { grads };
        }
        for id in (0..=top).rev() {
            let node = &nodes[id];
            if node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = back(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if !needed {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.dim(), nodes[p].value.dim(), "gradient shape");
                    accumulate(&mut grads[p], pg);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<F: Float>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by a reverse pass.
pub struct Gradients<F: Float> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient for `var`, or `None` if nothing flowed into it.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Array2<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> Array2<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.value().dim()),
        }
    }
}

impl<'t, F: Float> Var<'t, F> {
    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Array2<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// The single entry of a `1 × 1` value.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
