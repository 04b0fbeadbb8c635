//! Central finite-difference check of analytic gradients.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of every vector-Jacobian product it is used to verify.

use crate::error::Result;
use crate::params::Parameterized;
use crate::tensor::Tensor;

/// Agreement between analytic and numeric gradients for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, zero_floor)` over the checked entries.
    pub rel_error: f64,
    pub checked: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries: Option<usize>,
    /// Gradient norms below this count as zero. Some gradients vanish
    /// identically (e.g. a bias shared by every softmax logit), leaving only
    /// finite-difference noise on the numeric side.
    pub zero_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries: None,
            zero_floor: 1e-6,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(floor)
}

/// Compares `backward()` against central differences of `loss` for every
/// parameter of `model`.
pub fn check_gradients<M, F>(
    model: &mut M,
    loss: F,
    options: GradCheckOptions,
) -> Result<Vec<GroupReport>>
where
    M: Parameterized + ?Sized,
    F: Fn(&M) -> Result<Tensor>,
{
    model.zero_grads();
    {
        let value = loss(model)?;
        value.backward()?;
    }
    let analytic: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|(_, t)| t.grad().clone().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (group, name) in names.iter().enumerate() {
        let numel = analytic[group].len();
        let indices: Vec<usize> = match options.max_entries {
            Some(limit) if limit < numel => (0..limit).map(|i| i * numel / limit).collect(),
            _ => (0..numel).collect(),
        };
        let mut numeric = Vec::with_capacity(indices.len());
        for &index in &indices {
            let original = model.parameters()[group].1.data()[index];
            let mut eval_at = |value: f64| -> Result<f64> {
                model.parameters_mut()[group].1.data_mut()?[index] = value;
                loss(model)?.item()
            };
            let plus = eval_at(original + options.step)?;
            let minus = eval_at(original - options.step)?;
            eval_at(original)?;
            numeric.push((plus - minus) / (2.0 * options.step));
        }
        let picked: Vec<f64> = indices.iter().map(|&i| analytic[group][i]).collect();
        reports.push(GroupReport {
            name: name.clone(),
            rel_error: relative_error(&picked, &numeric, options.zero_floor),
            checked: indices.len(),
            analytic_norm: norm(&picked),
            numeric_norm: norm(&numeric),
        });
    }
    Ok(reports)
}
