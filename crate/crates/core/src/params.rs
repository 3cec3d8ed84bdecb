//! Named parameter traversal shared by the optimizer, audits and checkpoints.

use crate::tensor::Tensor;

/// A module exposing its tensors under stable dotted paths.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn count_params(m: &dyn Parameterized) -> usize {
    let mut n = 0;
    m.visit(&mut |_, t| n += t.numel());
    n
}

pub fn count_learnable(m: &dyn Parameterized) -> usize {
    let mut n = 0;
    m.visit(&mut |_, t| {
        if t.requires_grad() {
            n += t.numel();
        }
    });
    n
}

/// Number of tensors currently holding a gradient buffer.
pub fn grad_buffers(m: &dyn Parameterized) -> usize {
    let mut n = 0;
    m.visit(&mut |_, t| n += usize::from(t.grad().is_some()));
    n
}

/// Owned copy of a module's parameters in visiting order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn snapshot(m: &dyn Parameterized) -> Self {
        let mut entries = vec![];
        m.visit(&mut |p, t| entries.push((p.to_owned(), t.detached())));
        Self { entries }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same paths, shapes and bit patterns.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((pa, a), (pb, b))| pa == pb && a.bit_eq(b))
    }
}
