use super::{Scalar, Tensor, TensorError};

/// Index of a parameter group inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Ordered collection of named trainable tensors.
///
/// Group order is part of the model layout: it fixes checkpoint order and
/// optimizer buffer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<F> {
    groups: Vec<ParamGroup<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.groups.iter().all(|g| g.name != name),
            "duplicate parameter group {name}"
        );
        self.groups.push(ParamGroup { name, value });
        ParamId(self.groups.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.groups[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.groups[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.groups[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.groups.iter().position(|g| g.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup<F>] {
        &self.groups
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.groups.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups.iter().all(|g| g.value.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    value: g.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every group's value with the same-named group from `other`.
    ///
    /// Both stores must hold exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &Params<F>) -> Result<(), TensorError> {
        if other.len() != self.len() {
            return Err(TensorError::ParamLayout(format!(
                "expected {} groups, found {}",
                self.len(),
                other.len()
            )));
        }
        for g in &mut self.groups {
            let src = other
                .find(&g.name)
                .ok_or_else(|| TensorError::ParamLayout(format!("missing group {}", g.name)))?;
            let src = other.get(src);
            if src.shape() != g.value.shape() {
                return Err(TensorError::ParamLayout(format!(
                    "group {} has shape {:?}, expected {:?}",
                    g.name,
                    src.shape(),
                    g.value.shape()
                )));
            }
            g.value = src.clone();
        }
        Ok(())
    }
}
