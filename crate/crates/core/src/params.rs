//! Parameter traversal shared by every trainable component.
//!
//! `bind`, `visit` and `visit_mut` walk the same tensors in the same order.
//! Binding pulls one tape variable per tensor from `next`, which either
//! creates a fresh leaf or hands out variables supplied by a caller (the
//! gradient oracle binds a model onto its own perturbed leaves this way).

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub trait Params {
    type Vars;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> Self::Vars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    /// Registers every parameter as a fresh leaf.
    fn bind_leaves(&self, tape: &mut Tape) -> Self::Vars {
        self.bind(&mut |t| tape.leaf(t.clone()))
    }

    /// Registers every parameter as a constant.
    fn bind_constants(&self, tape: &mut Tape) -> Self::Vars {
        self.bind(&mut |t| tape.constant(t.clone()))
    }

    /// Binds onto existing variables, in traversal order.
    ///
    /// Panics when a variable's shape disagrees with the parameter it stands
    /// for, which means the traversal orders have drifted apart.
    fn bind_from(&self, tape: &Tape, vars: &mut dyn Iterator<Item = Var>) -> Self::Vars {
        self.bind(&mut |t| {
            let v = vars.next().expect("enough variables for every parameter");
            assert_eq!(tape.value(v).shape(), t.shape(), "parameter order mismatch");
            v
        })
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }
}

#[cfg(test)]
pub(crate) fn assert_consistent_order<P: Params>(p: &mut P) {
    let shapes: Vec<Vec<usize>> = p
        .param_tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut mut_shapes = Vec::new();
    p.visit_mut(&mut |t| mut_shapes.push(t.shape().to_vec()));
    assert_eq!(shapes, mut_shapes);
    let mut tape = Tape::new();
    let _ = p.bind_leaves(&mut tape);
    let bound: Vec<Vec<usize>> = (0..tape.len())
        .map(|i| tape.records()[i].output)
        .map(|v| tape.value(v).shape().to_vec())
        .collect();
    assert_eq!(shapes, bound);
}
