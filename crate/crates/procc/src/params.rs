//! Named parameter storage, update scopes, and optimizer steps.
//!
//! Parameters are addressed by dotted string paths ("phi_o.l0.w"). A
//! [`Scope`] selects a subset by prefix; an optimizer step touches exactly
//! the selected entries and leaves every other parameter bit-identical,
//! which is the contract the staged training procedure relies on.

use std::collections::BTreeMap;

use crate::tensor::{KernelError, Tensor2};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Map from parameter name to (value, gradient). Gradient shape always
/// matches the value shape; names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2) -> Result<(), KernelError> {
        if self.entries.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2, KernelError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2, KernelError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2, KernelError> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor2) -> Result<(), KernelError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "set_value",
                left: entry.value.shape(),
                right: value.shape(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            for g in entry.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &Tensor2) -> Result<(), KernelError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| KernelError::UnknownParam(name.to_string()))?;
        if entry.grad.shape() != grad.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "accumulate_grad",
                left: entry.grad.shape(),
                right: grad.shape(),
            });
        }
        for (g, s) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += s;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Clone of all values, keyed by name. Used for best-epoch restoration and
    /// for byte-level scoping checks.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor2> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Tensor2>) {
        for (name, value) in snapshot {
            if let Some(entry) = self.entries.get_mut(name) {
                entry.value = value.clone();
            }
        }
    }

    /// True when every parameter matched by `scope` is bit-identical to the
    /// snapshot.
    pub fn bits_eq_within(&self, snapshot: &BTreeMap<String, Tensor2>, scope: &Scope) -> bool {
        self.entries
            .iter()
            .filter(|(name, _)| scope.matches(name))
            .all(|(name, entry)| {
                snapshot
                    .get(name)
                    .map(|t| t.bits_eq(&entry.value))
                    .unwrap_or(false)
            })
    }
}

/// Prefix-based parameter selection: "phi_o" matches "phi_o" itself and
/// everything under "phi_o.".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    prefixes: Vec<String>,
}

impl Scope {
    pub fn new<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Scope {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| {
            name.strip_prefix(p.as_str())
                .is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
        })
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    /// Complement check helper: names NOT selected by this scope.
    pub fn excludes(&self, name: &str) -> bool {
        !self.matches(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    /// Plain gradient descent, the update rule as written in the staged
    /// procedure.
    Sgd,
    /// Adaptive-moment descent; the default for actual training runs.
    Adam,
}

/// Per-parameter optimizer state: first/second moment accumulators plus a
/// step counter, and the scalar hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub mode: OptimizerMode,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl OptimState {
    pub fn new(mode: OptimizerMode, lr: f64) -> Self {
        OptimState {
            lr,
            mode,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter selected by `scope`, using the
    /// gradients currently in the store. Parameters outside the scope are not
    /// written at all. Errors if any scope prefix selects nothing.
    pub fn step(&mut self, store: &mut ParamStore, scope: &Scope) -> Result<(), KernelError> {
        for prefix in scope.prefixes() {
            let sub = Scope::new([prefix.clone()]);
            if !store.names().any(|n| sub.matches(n)) {
                return Err(KernelError::UnknownParam(prefix.clone()));
            }
        }
        self.step += 1;
        let t = self.step;
        let names: Vec<String> = store
            .names()
            .filter(|n| scope.matches(n))
            .map(str::to_string)
            .collect();
        for name in names {
            let entry = store.entries.get_mut(&name).expect("name from iteration");
            match self.mode {
                OptimizerMode::Sgd => {
                    for (w, g) in entry.value.data_mut().iter_mut().zip(entry.grad.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerMode::Adam => {
                    let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                        (
                            Tensor2::zeros(entry.value.rows(), entry.value.cols()),
                            Tensor2::zeros(entry.value.rows(), entry.value.cols()),
                        )
                    });
                    let bc1 = 1.0 - self.beta1.powi(t as i32);
                    let bc2 = 1.0 - self.beta2.powi(t as i32);
                    for ((w, g), (mi, vi)) in entry
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(entry.grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_param_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("phi_o.l0.w", Tensor2::filled(2, 2, 1.0)).unwrap();
        s.insert("phi_s.l0.w", Tensor2::filled(2, 2, 2.0)).unwrap();
        s
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = two_param_store();
        let before = store.snapshot();
        let mut opt = OptimState::new(OptimizerMode::Sgd, 0.1);
        opt.step(&mut store, &Scope::new(["phi_o", "phi_s"])).unwrap();
        assert!(store.bits_eq_within(&before, &Scope::new(["phi_o", "phi_s"])));
    }

    #[test]
    fn plain_descent_definition() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::filled(1, 1, 1.0)).unwrap();
        store
            .accumulate_grad("w", &Tensor2::filled(1, 1, 0.5))
            .unwrap();
        let mut opt = OptimState::new(OptimizerMode::Sgd, 0.1);
        opt.step(&mut store, &Scope::new(["w"])).unwrap();
        assert!((store.value("w").unwrap().get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn step_touches_exactly_the_scope() {
        let mut store = two_param_store();
        store
            .accumulate_grad("phi_o.l0.w", &Tensor2::filled(2, 2, 1.0))
            .unwrap();
        store
            .accumulate_grad("phi_s.l0.w", &Tensor2::filled(2, 2, 1.0))
            .unwrap();
        let before = store.snapshot();
        let mut opt = OptimState::new(OptimizerMode::Adam, 0.01);
        opt.step(&mut store, &Scope::new(["phi_o"])).unwrap();
        assert!(store.bits_eq_within(&before, &Scope::new(["phi_s"])));
        assert!(!store.bits_eq_within(&before, &Scope::new(["phi_o"])));
    }

    #[test]
    fn scope_prefix_matching_is_segment_aware() {
        let scope = Scope::new(["phi_o"]);
        assert!(scope.matches("phi_o"));
        assert!(scope.matches("phi_o.l0.w"));
        assert!(!scope.matches("phi_other.l0.w"));
    }

    #[test]
    fn unmatched_scope_prefix_errors() {
        let mut store = two_param_store();
        let mut opt = OptimState::new(OptimizerMode::Sgd, 0.1);
        let err = opt.step(&mut store, &Scope::new(["phi_x"])).unwrap_err();
        assert!(matches!(err, KernelError::UnknownParam(p) if p == "phi_x"));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::filled(1, 1, 1.0)).unwrap();
        store
            .accumulate_grad("w", &Tensor2::filled(1, 1, 2.0))
            .unwrap();
        let mut opt = OptimState::new(OptimizerMode::Adam, 0.05);
        opt.step(&mut store, &Scope::new(["w"])).unwrap();
        assert!(store.value("w").unwrap().get(0, 0) < 1.0);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::zeros(1, 1)).unwrap();
        assert!(matches!(
            store.insert("w", Tensor2::zeros(1, 1)),
            Err(KernelError::DuplicateParam(_))
        ));
    }
}
