//! Scale-invariant SNR and the permutation-invariant training objective.
//!
//! `si_snr` zero-means both signals, projects the estimate onto the target,
//! and reports `10·log10(‖s‖² / ‖e‖²)` clipped from above at 30 dB. The small
//! constant guarding the residual energy is taken relative to the estimate's
//! energy, so the value is exactly invariant to the estimate's gain.

use crate::error::{Error, Result};
use crate::tensor::{custom_op, Tensor};

/// Guard in the projection and residual denominators.
pub const SI_SNR_EPS: f64 = 1e-8;
/// Upper clip of the metric, in dB.
pub const SI_SNR_CLIP_DB: f64 = 30.0;

/// Keeps silent estimates finite without affecting any audible signal.
const FLOOR: f64 = 1e-300;
const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(est: &[f64], target: &[f64]) -> Result<()> {
    if est.is_empty() || est.len() != target.len() {
        return Err(Error::usage(format!(
            "si_snr needs equal nonempty lengths, got {} and {}",
            est.len(),
            target.len()
        )));
    }
    Ok(())
}

/// SI-SNR value in dB and its gradient with respect to `est`.
///
/// The gradient is zero where the clip is active.
pub fn si_snr_with_grad(est: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(est, target)?;
    let e0 = centered(est);
    let t0 = centered(target);
    let tt = dot(&t0, &t0);
    if tt == 0.0 {
        return Err(Error::InvalidReference(
            "target is zero after removing its mean".into(),
        ));
    }
    let denom = tt + SI_SNR_EPS;
    let alpha = dot(&e0, &t0) / denom;
    let noise: Vec<f64> = e0.iter().zip(&t0).map(|(e, t)| e - alpha * t).collect();
    let signal_energy = alpha * alpha * tt + FLOOR;
    let noise_energy = dot(&noise, &noise) + SI_SNR_EPS * dot(&e0, &e0) + FLOOR;
    let raw = DB * (signal_energy / noise_energy).ln();
    if raw >= SI_SNR_CLIP_DB {
        return Ok((SI_SNR_CLIP_DB, vec![0.0; est.len()]));
    }

    let nt = dot(&noise, &t0);
    let mut grad: Vec<f64> = (0..est.len())
        .map(|i| {
            let d_signal = 2.0 * alpha * tt * t0[i] / denom;
            let d_noise = 2.0 * noise[i] - 2.0 * nt * t0[i] / denom + 2.0 * SI_SNR_EPS * e0[i];
            DB * (d_signal / signal_energy - d_noise / noise_energy)
        })
        .collect();
    // back through the mean removal
    let mean = grad.iter().sum::<f64>() / grad.len() as f64;
    grad.iter_mut().for_each(|g| *g -= mean);
    Ok((raw, grad))
}

pub fn si_snr(est: &[f64], target: &[f64]) -> Result<f64> {
    Ok(si_snr_with_grad(est, target)?.0)
}

/// `si_snr(est, target) − si_snr(mixture, target)`.
pub fn si_snr_improvement(est: &[f64], mixture: &[f64], target: &[f64]) -> Result<f64> {
    Ok(si_snr(est, target)? - si_snr(mixture, target)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    /// Negative mean SI-SNR under `best_perm`.
    pub loss: f64,
    /// `best_perm[i]` is the target assigned to estimate `i`.
    pub best_perm: Vec<usize>,
    /// SI-SNR of each estimate against its assigned target, in estimate order.
    pub per_source_si_snr: Vec<f64>,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Pairwise SI-SNR `table[i][j]` of estimate `i` against target `j`, with gradients.
type PairTable = Vec<Vec<(f64, Vec<f64>)>>;

fn pair_table<E: AsRef<[f64]>, T: AsRef<[f64]>>(ests: &[E], targets: &[T]) -> Result<PairTable> {
    if ests.len() != targets.len() || ests.is_empty() {
        return Err(Error::usage(format!(
            "pit_loss needs matching source counts, got {} estimates and {} targets",
            ests.len(),
            targets.len()
        )));
    }
    ests.iter()
        .map(|e| {
            targets
                .iter()
                .map(|t| si_snr_with_grad(e.as_ref(), t.as_ref()))
                .collect()
        })
        .collect()
}

fn best_assignment(table: &PairTable) -> PitResult {
    let n = table.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| table[i][j].0).sum();
        let mean = total / n as f64;
        if best.as_ref().is_none_or(|(b, _)| mean > *b) {
            best = Some((mean, perm));
        }
    }
    let (mean, best_perm) = best.expect("at least one permutation");
    PitResult {
        loss: -mean,
        per_source_si_snr: best_perm
            .iter()
            .enumerate()
            .map(|(i, &j)| table[i][j].0)
            .collect(),
        best_perm,
    }
}

/// Utterance-level PIT: the assignment maximizing mean SI-SNR, ties going to
/// the lexicographically smallest permutation.
pub fn pit_loss<E: AsRef<[f64]>, T: AsRef<[f64]>>(ests: &[E], targets: &[T]) -> Result<PitResult> {
    Ok(best_assignment(&pair_table(ests, targets)?))
}

/// Differentiable PIT loss for estimates `[Ns, T]`.
pub fn pit_loss_tensor<T: AsRef<[f64]>>(
    ests: &Tensor,
    targets: &[T],
) -> Result<(Tensor, PitResult)> {
    let &[ns, len] = ests.shape() else {
        return Err(Error::usage(format!(
            "estimates must be [Ns, T], got {:?}",
            ests.shape()
        )));
    };
    let rows: Vec<&[f64]> = ests.data().chunks_exact(len).collect();
    let table = pair_table(&rows, targets)?;
    let result = best_assignment(&table);
    let mut grad = Vec::with_capacity(ns * len);
    for (i, &j) in result.best_perm.iter().enumerate() {
        grad.extend(table[i][j].1.iter().map(|g| -g / ns as f64));
    }
    let loss = custom_op(
        &[ests],
        vec![result.loss],
        &[1],
        Box::new(move |up| vec![grad.iter().map(|g| g * up[0]).collect()]),
    )?;
    Ok((loss, result))
}

/// Mean PIT-aligned SI-SNR improvement of `ests` over the unprocessed mixture.
pub fn mean_si_snri<E: AsRef<[f64]>, T: AsRef<[f64]>>(
    ests: &[E],
    mixture: &[f64],
    targets: &[T],
) -> Result<f64> {
    let pit = pit_loss(ests, targets)?;
    let mut total = 0.0;
    for (i, &j) in pit.best_perm.iter().enumerate() {
        total += pit.per_source_si_snr[i] - si_snr(mixture, targets[j].as_ref())?;
    }
    Ok(total / ests.len() as f64)
}
