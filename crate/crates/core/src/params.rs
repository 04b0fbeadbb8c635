//! Named access to the trainable tensors of a model.

use crate::tensor::Tensor;

/// A collection of named trainable leaves, listed in a fixed order.
///
/// The order is part of the contract: initialization, checkpoints and the
/// optimizer all walk parameters in this order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<(String, &Tensor)>;

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grads(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }
}

/// Appends `prefix.field` entries for each listed field.
macro_rules! push_params {
    ($out:ident, $prefix:expr, ref $self_:ident . { $($field:ident),+ $(,)? }) => {
        $( $out.push((format!("{}{}", $prefix, stringify!($field)), &$self_.$field)); )+
    };
    ($out:ident, $prefix:expr, mut $self_:ident . { $($field:ident),+ $(,)? }) => {
        $( $out.push((format!("{}{}", $prefix, stringify!($field)), &mut $self_.$field)); )+
    };
}
pub(crate) use push_params;

/// Loose set of named leaves; handy for checking small computations.
#[derive(Debug, Default, Clone)]
pub struct ParamList(pub Vec<(String, Tensor)>);

impl ParamList {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.0.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl Parameterized for ParamList {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}
