//! Training objectives and their gradients.
//!
//! Each loss returns its value together with the gradient with respect to
//! its direct inputs (predicted distributions, contrastive embeddings, or
//! cluster vectors). The trainer seeds these into the encoder tape.
//!
//! The contrastive family is evaluated in log space: all exponentials are
//! taken relative to a per-anchor shift, so small temperatures cannot
//! overflow.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::tensor::{dot, l2_norm, log_sum_exp};

/// Lower clamp applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyper {
    /// η, smoothing factor of the masked-entity loss.
    pub smoothing: f64,
    /// τ, class prior probability.
    pub class_prior: f64,
    /// β, hard-negative concentration.
    pub concentration: f64,
    /// t
    pub temperature: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            smoothing: 0.075,
            class_prior: 0.1,
            concentration: 1.0,
            temperature: 0.5,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if !(0.0..1.0).contains(&self.class_prior) {
            return Err(Error::Config(format!("class_prior {} outside [0, 1)", self.class_prior)));
        }
        if !(self.concentration >= 0.0) {
            return Err(Error::Config("concentration must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn clamped_ln(x: f64) -> (f64, bool) {
    if x < LOG_CLAMP {
        (LOG_CLAMP.ln(), true)
    } else {
        (x.ln(), false)
    }
}

/// Masked-entity loss with the smoothing term applied to every non-target
/// entry:
///
/// `−(1/N) Σ_i Σ_j [ y_ij (1−η) log ŷ_ij + (1−y_ij) η log(1−ŷ_ij) ]`
///
/// Returns the loss and ∂L/∂ŷ.
pub fn masked_entity_loss(
    preds: &[Vec<f64>],
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} outside [0, 1)")));
    }
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, &t) in preds.iter().zip(targets) {
        if t >= p.len() {
            return Err(Error::InvalidArgument(format!("target {t} outside {} entities", p.len())));
        }
        let mut g = vec![0.0; p.len()];
        for (j, &y) in p.iter().enumerate() {
            if j == t {
                let (l, clamped) = clamped_ln(y);
                loss -= (1.0 - smoothing) * l;
                if !clamped {
                    g[j] = -(1.0 - smoothing) / (y * n);
                }
            } else if smoothing > 0.0 {
                let (l, clamped) = clamped_ln(1.0 - y);
                loss -= smoothing * l;
                if !clamped {
                    g[j] = smoothing / ((1.0 - y) * n);
                }
            }
        }
        grads.push(g);
    }
    Ok((loss / n, grads))
}

/// KL(ỹ‖ŷ) = Σ ỹ (log ỹ − log ŷ) for one pair, plus ∂/∂ŷ. The teacher side
/// receives no gradient.
pub fn distillation_loss(teacher: &[f64], student: &[f64]) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} entries, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.len()];
    for (j, (&q, &p)) in teacher.iter().zip(student).enumerate() {
        if q == 0.0 {
            continue;
        }
        let (lq, _) = clamped_ln(q);
        let (lp, clamped) = clamped_ln(p);
        loss += q * (lq - lp);
        if !clamped {
            grad[j] = -q / p;
        }
    }
    Ok((loss, grad))
}

/// Batch mean of [`distillation_loss`]; gradients are scaled accordingly.
pub fn distillation_loss_batch(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Shape("teacher and student batches differ".into()));
    }
    let n = teacher.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(teacher.len());
    for (q, p) in teacher.iter().zip(student) {
        let (l, g) = distillation_loss(q, p)?;
        total += l;
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    Ok((total / n, grads))
}

/// Result of the contrastive family of losses.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// l_i for each sample.
    pub per_sample: Vec<f64>,
    /// log R_i⁻ for each sample.
    pub log_negative_mass: Vec<f64>,
    /// True where the `e^{−1/t}` floor replaced the debiased estimate.
    pub floor_active: Vec<bool>,
    /// ∂L/∂z_i
    pub grad: Vec<Vec<f64>>,
}

/// Hard-negative-weighted, debiased contrastive loss over `2N` unit vectors
/// where `(z_{2i}, z_{2i+1})` are positive pairs (0-based).
///
/// For anchor `i` with partner `j` and the `n = 2N−2` remaining samples:
///
/// ```text
/// R̃ = n Σ_k e^{(1+β)s_ik/t} / Σ_k e^{β s_ik/t}
/// R  = max((R̃ − n τ e^{s_ij/t}) / (1−τ), e^{−1/t})
/// l_i = −log(e^{s_ij/t} / (e^{s_ij/t} + R))
/// ```
pub fn contrastive_loss(z: &[Vec<f64>], hyper: &LossHyper) -> Result<ContrastiveOutput> {
    for (i, v) in z.iter().enumerate() {
        let norm = l2_norm(v);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "embedding {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    contrastive_unchecked(z, hyper)
}

/// [`contrastive_loss`] without the unit-norm check, for callers that
/// normalise internally.
pub fn contrastive_unchecked(z: &[Vec<f64>], hyper: &LossHyper) -> Result<ContrastiveOutput> {
    let count = z.len();
    if count < 4 || count % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "need an even number of at least 4 samples (N >= 2 pairs), got {count}"
        )));
    }
    if !(0.0..1.0).contains(&hyper.class_prior) || !(hyper.temperature > 0.0) {
        return Err(Error::InvalidArgument("need 0 <= tau < 1 and t > 0".into()));
    }
    let dim = z[0].len();
    if z.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let t = hyper.temperature;
    let tau = hyper.class_prior;
    let beta = hyper.concentration;
    let n = (count - 2) as f64;

    let sims: Vec<Vec<f64>> = (0..count)
        .map(|i| (0..count).map(|k| dot(&z[i], &z[k])).collect())
        .collect();
    let mut ds = vec![vec![0.0; count]; count];
    let mut per_sample = Vec::with_capacity(count);
    let mut log_negative_mass = Vec::with_capacity(count);
    let mut floor_active = Vec::with_capacity(count);

    for i in 0..count {
        let j = i ^ 1;
        let negs: Vec<usize> = (0..count).filter(|&k| k != i && k != j).collect();
        let a: Vec<f64> = negs.iter().map(|&k| (1.0 + beta) * sims[i][k] / t).collect();
        let b: Vec<f64> = negs.iter().map(|&k| beta * sims[i][k] / t).collect();
        let log_a = log_sum_exp(&a);
        let log_b = log_sum_exp(&b);
        let log_rt = n.ln() + log_a - log_b;
        let sp = sims[i][j] / t;
        let floor = -1.0 / t;
        let shift = sp.max(log_rt).max(floor);
        let e = (sp - shift).exp();
        let rt = (log_rt - shift).exp();
        let f = (floor - shift).exp();
        let raw = (rt - n * tau * e) / (1.0 - tau);
        let active = raw > f;
        let r = if active { raw } else { f };
        let denom = e + r;
        let l = denom.ln() + shift - sp;
        per_sample.push(l);
        log_negative_mass.push(r.ln() + shift);
        floor_active.push(!active);

        let dr_dsp = if active { -n * tau * e / (1.0 - tau) } else { 0.0 };
        ds[i][j] += (-1.0 + (e + dr_dsp) / denom) / t;
        if active {
            let w_log: Vec<f64> = a.iter().map(|x| x - log_a).collect();
            let v_log: Vec<f64> = b.iter().map(|x| x - log_b).collect();
            let scale = rt / (t * (1.0 - tau) * denom);
            for (idx, &k) in negs.iter().enumerate() {
                let w = w_log[idx].exp();
                let v = v_log[idx].exp();
                ds[i][k] += scale * ((1.0 + beta) * w - beta * v);
            }
        }
    }

    let mut grad = vec![vec![0.0; dim]; count];
    for i in 0..count {
        for k in 0..count {
            let g = ds[i][k];
            if g == 0.0 {
                continue;
            }
            for d in 0..dim {
                grad[i][d] += g * z[k][d];
                grad[k][d] += g * z[i][d];
            }
        }
    }
    Ok(ContrastiveOutput {
        loss: per_sample.iter().sum(),
        per_sample,
        log_negative_mass,
        floor_active,
        grad,
    })
}

/// Cluster-level contrastive loss.
///
/// `c` holds `2N` cluster vectors, consecutive rows forming positive pairs.
/// Odd-position rows build `C`, even-position rows `C′` (both `N × M`). Each
/// column is L2-normalised; the `2M` columns, ordered
/// `C[:,0], C′[:,0], C[:,1], …`, are fed to the contrastive formula so that
/// matching columns are positives. Returns the loss and ∂L/∂c.
pub fn clustering_loss(c: &[Vec<f64>], hyper: &LossHyper) -> Result<(f64, Vec<Vec<f64>>)> {
    if c.len() < 4 || c.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "need an even number of at least 4 rows (N >= 2 pairs), got {}",
            c.len()
        )));
    }
    let m = c[0].len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 clusters for negative columns, got {m}"
        )));
    }
    if c.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("cluster rows differ in width".into()));
    }
    let pairs = c.len() / 2;
    // columns[2k] = C[:,k], columns[2k+1] = C'[:,k]
    let mut raw_cols = Vec::with_capacity(2 * m);
    for k in 0..m {
        raw_cols.push((0..pairs).map(|p| c[2 * p][k]).collect::<Vec<f64>>());
        raw_cols.push((0..pairs).map(|p| c[2 * p + 1][k]).collect::<Vec<f64>>());
    }
    let norms: Vec<f64> = raw_cols.iter().map(|v| l2_norm(v).max(1e-12)).collect();
    let unit: Vec<Vec<f64>> = raw_cols
        .iter()
        .zip(&norms)
        .map(|(v, n)| v.iter().map(|x| x / n).collect())
        .collect();
    let out = contrastive_unchecked(&unit, hyper)?;

    let mut grad = vec![vec![0.0; m]; c.len()];
    for (col, (u, g)) in unit.iter().zip(&out.grad).enumerate() {
        let k = col / 2;
        let parity = col % 2;
        let proj = dot(u, g);
        for p in 0..pairs {
            grad[2 * p + parity][k] += (g[p] - u[p] * proj) / norms[col];
        }
    }
    Ok((out.loss, grad))
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be positive")));
    }
    Ok(())
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares `analytic` with central differences of `loss` at `x` on up to
/// `probes` randomly chosen coordinates. Returns the maximum of
/// `|g_analytic − g_fd| / max(1e-8, |g_fd|)`.
pub fn gradient_check_slice<F>(
    mut loss: F,
    x: &[f64],
    analytic: &[f64],
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_step(step)?;
    if analytic.len() != x.len() {
        return Err(Error::Shape("gradient and point differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, x.len(), probes.min(x.len()));
    let mut point = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in coords {
        let orig = point[k];
        point[k] = orig + step;
        let up = loss(&point)?;
        point[k] = orig - step;
        let down = loss(&point)?;
        point[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Undefined(format!("non-finite loss probing coordinate {k}")));
        }
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// [`gradient_check_slice`] over every scalar of a [`ParamSet`].
pub fn gradient_check<F>(
    mut loss: F,
    params: &ParamSet,
    analytic: &Grads,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    check_step(step)?;
    let total = params.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, total, probes.min(total));
    let mut point = params.clone();
    let mut worst: f64 = 0.0;
    for k in coords {
        let (t, off) = params.locate(k).expect("coordinate in range");
        let orig = params.tensor(t).as_slice()[off];
        point.tensor_mut(t).as_mut_slice()[off] = orig + step;
        let up = loss(&point)?;
        point.tensor_mut(t).as_mut_slice()[off] = orig - step;
        let down = loss(&point)?;
        point.tensor_mut(t).as_mut_slice()[off] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Undefined(format!(
                "non-finite loss probing {}[{off}]",
                params.name(t)
            )));
        }
        worst = worst.max(relative_error(analytic.flat(k), (up - down) / (2.0 * step)));
    }
    Ok(worst)
}
