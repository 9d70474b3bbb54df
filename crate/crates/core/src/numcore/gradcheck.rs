//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::ParamSet;
use crate::error::{MaaError, Result};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Tensors with at most this many entries are swept in full.
    pub full_sweep_limit: usize,
    /// Coordinates probed per larger tensor.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-4,
            tol: 1e-4,
            full_sweep_limit: 4096,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub probed: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `loss` computes the scalar loss and accumulates gradients into the
/// parameters without zeroing them first. Gradients are zeroed here before the
/// analytic pass. Parameter values are restored exactly after every probe;
/// gradients are left in an unspecified state.
pub fn finite_diff_gradcheck<M, F>(
    model: &mut M,
    mut loss: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    M: ParamSet<f64>,
    F: FnMut(&mut M) -> Result<f64>,
{
    model.zero_grads();
    loss(model)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::with_capacity(analytic.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let coords: Vec<usize> = if n <= cfg.full_sweep_limit {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.samples_per_tensor.min(n)).into_vec();
            c.sort_unstable();
            c
        };
        let name = model.params()[pi].name.clone();
        let mut worst = (0.0f64, 0usize);
        for &i in &coords {
            let original = model.params()[pi].value.data()[i];
            let plus = probe(model, &mut loss, pi, i, original + cfg.eps, &name)?;
            let minus = probe(model, &mut loss, pi, i, original - cfg.eps, &name)?;
            model.params_mut()[pi].value.data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(fd, grads[i]);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        per_param.push(ParamCheck {
            name,
            max_rel_err: worst.0,
            worst_index: worst.1,
            probed: coords.len(),
        });
    }

    let (max_rel_err, worst_param) = per_param
        .iter()
        .fold((0.0f64, String::new()), |acc, p| {
            if p.max_rel_err > acc.0 || acc.1.is_empty() {
                (p.max_rel_err, p.name.clone())
            } else {
                acc
            }
        });
    Ok(GradcheckReport {
        max_rel_err,
        worst_param,
        per_param,
        tol: cfg.tol,
    })
}

fn probe<M, F>(model: &mut M, loss: &mut F, pi: usize, i: usize, v: f64, name: &str) -> Result<f64>
where
    M: ParamSet<f64>,
    F: FnMut(&mut M) -> Result<f64>,
{
    model.params_mut()[pi].value.data_mut()[i] = v;
    match loss(model) {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(_) | Err(MaaError::NonFinite { .. }) => Err(MaaError::Probe {
            param: name.to_string(),
        }),
        Err(e) => Err(e),
    }
}
