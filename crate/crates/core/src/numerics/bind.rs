use std::cell::RefCell;

use super::params::ParamSet;
use super::tape::{Grads, Tape, Var};
use crate::scalar::Scalar;

/// Lazily places parameters on a tape and maps their adjoints back to a
/// [`ParamSet`] with the same layout.
pub struct Bound<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    params: &'a ParamSet<T>,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamSet<T>) -> Self {
        Self {
            tape,
            params,
            vars: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    /// Tape handle for the named parameter, recorded on first use.
    pub fn p(&self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.vars.borrow()[idx] {
            return v;
        }
        let v = self.tape.leaf(self.params.expect(name).clone());
        self.vars.borrow_mut()[idx] = Some(v);
        v
    }

    /// Gradient set aligned with the bound parameters; unused entries are zero.
    pub fn grads(&self, grads: &Grads<T>) -> ParamSet<T> {
        let mut out = self.params.zeros_like();
        let vars = self.vars.borrow();
        let names: Vec<String> = self.params.names().map(str::to_owned).collect();
        for (i, name) in names.iter().enumerate() {
            if let Some(v) = vars[i] {
                out.get_mut(name).unwrap().assign(&grads.wrt(v));
            }
        }
        out
    }
}
