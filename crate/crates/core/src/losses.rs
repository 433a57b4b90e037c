//! Training objectives: L1/L2 regression terms, the piecewise custom
//! regression loss (CLF), the accumulated FAG-Net loss (ALF), KL divergence
//! variants for the variational bottleneck, and the FGC-Net total loss.

use crate::error::{Error, Result};
use crate::metrics::EvalBatch;

/// Weights of the custom regression loss.
///
/// Inside the window (`|a-p| <= window`) the penalty is linear with slope
/// `varphi`; beyond it the error is cubed and `varphi` is added. `psi`
/// scales all three ALF terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClfParams {
    pub varphi: f64,
    /// Window in whole years below which the penalty stays linear.
    pub window: u32,
    pub psi: f64,
}

impl Default for ClfParams {
    fn default() -> Self {
        ClfParams {
            varphi: 0.1,
            window: 3,
            psi: 1.0,
        }
    }
}

impl ClfParams {
    pub fn validate(&self) -> Result<()> {
        if !self.varphi.is_finite() || !self.psi.is_finite() {
            return Err(Error::InvalidConfig("loss weights must be finite".into()));
        }
        if self.psi < 0.0 {
            return Err(Error::InvalidConfig("loss.psi must be >= 0".into()));
        }
        if !(0.0001..=0.3).contains(&self.varphi) {
            log::warn!(
                "loss.varphi = {} is outside the stated range [0.0001, 0.3]",
                self.varphi
            );
        }
        Ok(())
    }
}

/// Per-sample piecewise penalty.
fn clf_term(distance: f64, params: &ClfParams) -> f64 {
    if distance <= params.window as f64 {
        distance * params.varphi
    } else {
        distance * distance * distance + params.varphi
    }
}

/// Custom loss: mean of the piecewise per-sample penalty.
pub fn clf_loss(batch: &EvalBatch, params: &ClfParams) -> Result<f64> {
    params.validate()?;
    let sum: f64 = batch.distances().iter().map(|&d| clf_term(d, params)).sum();
    Ok(sum / batch.len() as f64)
}

/// Derivative of [`clf_loss`] with respect to each predicted value.
///
/// The kink at `d == window` uses the inside-window branch, matching the
/// `d <= window` case split of the loss itself.
pub fn clf_loss_grad(batch: &EvalBatch, params: &ClfParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = batch.len() as f64;
    Ok(batch
        .actual()
        .iter()
        .zip(batch.predicted())
        .map(|(a, p)| {
            let d = (a - p).abs();
            let sign = if p >= a { 1.0 } else { -1.0 };
            let dd = if d <= params.window as f64 {
                params.varphi
            } else {
                3.0 * d * d
            };
            sign * dd / n
        })
        .collect())
}

/// Accumulated loss: `(psi*L1 + psi*L2 + psi*CLF) / 3` with L1/L2 as mean
/// absolute / mean squared error.
pub fn alf_loss(batch: &EvalBatch, params: &ClfParams) -> Result<f64> {
    let n = batch.len() as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (a, p) in batch.actual().iter().zip(batch.predicted()) {
        let d = a - p;
        l1 += d.abs();
        l2 += d * d;
    }
    l1 /= n;
    l2 /= n;
    let clf = clf_loss(batch, params)?;
    Ok(params.psi * (l1 + l2 + clf) / 3.0)
}

/// Derivative of [`alf_loss`] with respect to each predicted value.
pub fn alf_loss_grad(batch: &EvalBatch, params: &ClfParams) -> Result<Vec<f64>> {
    let n = batch.len() as f64;
    let clf_grad = clf_loss_grad(batch, params)?;
    Ok(batch
        .actual()
        .iter()
        .zip(batch.predicted())
        .zip(clf_grad)
        .map(|((a, p), gc)| {
            let sign = if p >= a { 1.0 } else { -1.0 };
            let g_l1 = sign / n;
            let g_l2 = 2.0 * (p - a) / n;
            params.psi * (g_l1 + g_l2 + gc) / 3.0
        })
        .collect())
}

/// Which closed-form KL expression to use.
///
/// `Standard` is the usual Gaussian-vs-unit-prior divergence
/// `0.5 * sum(sigma^2 + mu^2 - 1 - ln sigma^2)` and is nonnegative.
/// `Paper` keeps the printed `exp(sigma^2)` in place of `ln sigma^2`, which
/// is negative at the prior; it is retained for fidelity experiments only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlVariant {
    #[default]
    Standard,
    Paper,
}

impl std::str::FromStr for KlVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(KlVariant::Standard),
            "paper" => Ok(KlVariant::Paper),
            other => Err(Error::InvalidConfig(format!(
                "unknown kl variant `{other}` (expected `paper` or `standard`)"
            ))),
        }
    }
}

/// Per-dimension Gaussian moments of a latent posterior.
#[derive(Clone, Debug)]
pub struct LatentMoments {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl LatentMoments {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::InvalidInput(format!(
                "mu/sigma length mismatch: {} vs {}",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(
                "sigma entries must be positive and finite".into(),
            ));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("mu entries must be finite".into()));
        }
        Ok(LatentMoments { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// KL divergence of the latent posterior from the unit prior, summed over
/// latent dimensions.
pub fn kl_divergence(moments: &LatentMoments, variant: KlVariant) -> f64 {
    kl_divergence_raw(&moments.mu, &moments.sigma, variant)
}

/// Slice-level KL used by the training path (inputs already validated).
pub(crate) fn kl_divergence_raw(mu: &[f64], sigma: &[f64], variant: KlVariant) -> f64 {
    let mut sum = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        let s2 = s * s;
        let tail = match variant {
            KlVariant::Standard => s2.ln(),
            KlVariant::Paper => s2.exp(),
        };
        sum += s2 + m * m - 1.0 - tail;
    }
    0.5 * sum
}

/// Gradients of [`kl_divergence`] with respect to mu and sigma.
pub(crate) fn kl_divergence_grad_raw(
    mu: &[f64],
    sigma: &[f64],
    variant: KlVariant,
) -> (Vec<f64>, Vec<f64>) {
    let d_mu: Vec<f64> = mu.iter().map(|&m| m).collect();
    let d_sigma: Vec<f64> = sigma
        .iter()
        .map(|&s| match variant {
            KlVariant::Standard => s - 1.0 / s,
            KlVariant::Paper => s - s * (s * s).exp(),
        })
        .collect();
    (d_mu, d_sigma)
}

/// FGC-Net total loss: mean of reconstruction L1, discriminator L2 and KL.
pub fn tlf_fgc_loss(recon_l1: f64, disc_l2: f64, kl: f64) -> Result<f64> {
    for (name, v) in [("recon_l1", recon_l1), ("disc_l2", disc_l2), ("kl", kl)] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} is not finite: {v}")));
        }
    }
    Ok((recon_l1 + disc_l2 + kl) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(actual: &[f64], predicted: &[f64]) -> EvalBatch {
        EvalBatch::new(actual.to_vec(), predicted.to_vec()).unwrap()
    }

    fn params(varphi: f64, window: u32, psi: f64) -> ClfParams {
        ClfParams { varphi, window, psi }
    }

    #[test]
    fn clf_piecewise_values() {
        let p = params(0.1, 3, 1.0);
        // d = 2 stays inside the window
        assert!((clf_loss(&batch(&[10.0], &[12.0]), &p).unwrap() - 0.2).abs() < 1e-15);
        // d = 0
        assert_eq!(clf_loss(&batch(&[7.0], &[7.0]), &p).unwrap(), 0.0);
        // d = [2, 5]: (0.2 + 125.1) / 2
        let v = clf_loss(&batch(&[10.0, 10.0], &[12.0, 15.0]), &p).unwrap();
        assert!((v - 62.65).abs() < 1e-12);
    }

    #[test]
    fn clf_boundary_uses_linear_branch() {
        let p = params(0.2, 3, 1.0);
        let at = clf_loss(&batch(&[0.0], &[3.0]), &p).unwrap();
        assert!((at - 0.6).abs() < 1e-15);
        let above = clf_loss(&batch(&[0.0], &[3.0 + 1e-9]), &p).unwrap();
        assert!(above > 27.0);
    }

    #[test]
    fn clf_penalty_jump_grid() {
        // Just above the window the cubic penalty dominates the linear one
        // whenever window >= 1 and varphi <= 0.3.
        for window in 1..=8u32 {
            for &varphi in &[0.0001, 0.05, 0.1, 0.3] {
                let j = window as f64;
                let below = j * varphi;
                let above = j * j * j + varphi;
                assert!(above > below, "window={window} varphi={varphi}");
            }
        }
    }

    #[test]
    fn clf_gradient_matches_central_differences() {
        let p = params(0.1, 3, 1.0);
        let actual = 50.0;
        for &d in &[0.5, 2.9, 3.1, 10.0] {
            let predicted = actual + d;
            let b = batch(&[actual], &[predicted]);
            let g = clf_loss_grad(&b, &p).unwrap()[0];
            let h = 1e-6;
            let up = clf_loss(&batch(&[actual], &[predicted + h]), &p).unwrap();
            let down = clf_loss(&batch(&[actual], &[predicted - h]), &p).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "d={d}: analytic {g} vs fd {fd}");
        }
        // Mirror side: predicted below actual flips the sign.
        let b = batch(&[actual], &[actual - 10.0]);
        let g = clf_loss_grad(&b, &p).unwrap()[0];
        assert!(g < 0.0);
    }

    #[test]
    fn alf_substitution() {
        let p = params(0.1, 3, 1.0);
        let v = alf_loss(&batch(&[10.0], &[12.0]), &p).unwrap();
        assert!((v - (2.0 + 4.0 + 0.2) / 3.0).abs() < 1e-12);
        assert_eq!(alf_loss(&batch(&[4.0, 5.0], &[4.0, 5.0]), &p).unwrap(), 0.0);
        let zero_psi = params(0.1, 3, 0.0);
        assert_eq!(alf_loss(&batch(&[10.0], &[99.0]), &zero_psi).unwrap(), 0.0);
    }

    #[test]
    fn alf_homogeneous_in_psi() {
        let b = batch(&[10.0, 40.0, 70.0], &[12.0, 35.0, 71.0]);
        let base = alf_loss(&b, &params(0.1, 3, 1.0)).unwrap();
        for &psi in &[0.25, 0.5, 2.0, 7.5] {
            let scaled = alf_loss(&b, &params(0.1, 3, psi)).unwrap();
            assert!((scaled - psi * base).abs() < 1e-12 * (1.0 + scaled.abs()));
        }
    }

    #[test]
    fn alf_gradient_matches_central_differences() {
        let p = params(0.1, 2, 1.3);
        let actual = [30.0, 60.0];
        let predicted = [31.5, 66.0];
        let b = batch(&actual, &predicted);
        let g = alf_loss_grad(&b, &p).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut up = predicted;
            up[i] += h;
            let mut down = predicted;
            down[i] -= h;
            let fd = (alf_loss(&batch(&actual, &up), &p).unwrap()
                - alf_loss(&batch(&actual, &down), &p).unwrap())
                / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-6, "i={i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn kl_values() {
        let prior = LatentMoments::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(kl_divergence(&prior, KlVariant::Standard), 0.0);
        let paper = kl_divergence(&prior, KlVariant::Paper);
        assert!((paper - 0.5 * (1.0 - 1.0 - std::f64::consts::E)).abs() < 1e-12);
        assert!((paper + 1.3591).abs() < 1e-4);

        let shifted = LatentMoments::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_divergence(&shifted, KlVariant::Standard) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_bad_sigma() {
        assert!(LatentMoments::new(vec![0.0], vec![0.0]).is_err());
        assert!(LatentMoments::new(vec![0.0], vec![-1.0]).is_err());
        assert!(LatentMoments::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn kl_gradients_match_central_differences() {
        let mu = [0.3, -1.2];
        let sigma = [0.7, 1.9];
        for variant in [KlVariant::Standard, KlVariant::Paper] {
            let (gm, gs) = kl_divergence_grad_raw(&mu, &sigma, variant);
            let h = 1e-6;
            for i in 0..2 {
                let mut up = mu.to_vec();
                up[i] += h;
                let mut dn = mu.to_vec();
                dn[i] -= h;
                let fd = (kl_divergence_raw(&up, &sigma, variant)
                    - kl_divergence_raw(&dn, &sigma, variant))
                    / (2.0 * h);
                assert!((gm[i] - fd).abs() < 1e-6);

                let mut up = sigma.to_vec();
                up[i] += h;
                let mut dn = sigma.to_vec();
                dn[i] -= h;
                let fd = (kl_divergence_raw(&mu, &up, variant)
                    - kl_divergence_raw(&mu, &dn, variant))
                    / (2.0 * h);
                assert!((gs[i] - fd).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn standard_kl_nonnegative_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let dim = rng.gen_range(1..6);
            let mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let sigma: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.01..5.0)).collect();
            let kl = kl_divergence_raw(&mu, &sigma, KlVariant::Standard);
            assert!(kl >= -1e-12, "kl={kl} mu={mu:?} sigma={sigma:?}");
        }
    }

    #[test]
    fn tlf_mean_of_terms() {
        assert_eq!(tlf_fgc_loss(3.0, 6.0, 0.0).unwrap(), 3.0);
        assert_eq!(tlf_fgc_loss(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(tlf_fgc_loss(1.0, 1.0, 1.0).unwrap(), 1.0);
        // symmetric under permutation
        let a = tlf_fgc_loss(0.5, 2.0, 4.0).unwrap();
        let b = tlf_fgc_loss(4.0, 0.5, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(tlf_fgc_loss(f64::NAN, 0.0, 0.0).is_err());
        assert!(tlf_fgc_loss(0.0, f64::INFINITY, 0.0).is_err());
    }
}
