//! Influence-function construction and inference: the corrected summands
//! kappa and chi, the representer fits, the plug-in variance, confidence
//! intervals, the pairs bootstrap, and the efficiency-loss diagnostic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::PointEstimates;
use crate::nuisance::LinearFit;
use crate::smd::{solve_smd, AffineResidual, OptimOptions, SmdProblem, WeightFit};

/// The fitted pieces entering kappa.
pub struct KappaComponents<'a> {
    pub b1: &'a LinearFit,
    pub b2: &'a LinearFit,
    pub gamma: &'a LinearFit,
    pub eta: &'a LinearFit,
}

/// kappa_i = eta(X_i) + b1(X_i)(1-T_i){gamma(M_i,X_i) - eta(X_i)}
///         + b2(M_i,X_i) T_i {Y_i - gamma(M_i,X_i)},
/// computed where R_i = 1 and zero elsewhere (masked covariates never enter
/// an R = 1 weighted average).
pub fn kappa_values(data: &Dataset, comps: &KappaComponents) -> Result<Vec<f64>> {
    let mx = data.mediator_covariate_rows();
    let xs = data.covariate_rows();
    let gamma = comps.gamma.evaluate_design(&comps.gamma.basis.design_matrix(&mx)?)?;
    let b2 = comps.b2.evaluate_design(&comps.b2.basis.design_matrix(&mx)?)?;
    let eta = comps.eta.evaluate_design(&comps.eta.basis.design_matrix(&xs)?)?;
    let b1 = comps.b1.evaluate_design(&comps.b1.basis.design_matrix(&xs)?)?;
    let mut out = vec![0.0; data.len()];
    for i in 0..data.len() {
        if data.r[i] == 1 {
            let t = data.t[i] as f64;
            out[i] = eta[i]
                + b1[i] * (1.0 - t) * (gamma[i] - eta[i])
                + b2[i] * t * (data.y[i] - gamma[i]);
        }
    }
    Ok(out)
}

/// chi_i^(t) = I(T_i=t) e_t(X_i) {Y_i - mu(t, X_i)} + mu(t, X_i), where R_i=1.
pub fn chi_values(
    data: &Dataset,
    inverse_propensity: &LinearFit,
    mu: &LinearFit,
    t: u8,
) -> Result<Vec<f64>> {
    let xs = data.covariate_rows();
    let e = inverse_propensity
        .evaluate_design(&inverse_propensity.basis.design_matrix(&xs)?)?;
    let mu_v = mu.evaluate_design(&mu.basis.design_matrix(&xs)?)?;
    let mut out = vec![0.0; data.len()];
    for i in 0..data.len() {
        if data.r[i] == 1 {
            let ind = (data.t[i] == t) as u8 as f64;
            out[i] = ind * e[i] * (data.y[i] - mu_v[i]) + mu_v[i];
        }
    }
    Ok(out)
}

/// Solve the representer problem on the linear span of the weight sieve:
/// minimize (2n)^-1 sum_i [Ehat{R rho | W_i}]^2 - n^-1 sum_i target_i rho_i.
/// The same solver serves rho (target R kappa) and the varsigma fits
/// (target R chi), differing only in the target vector.
pub fn fit_representer(
    data: &Dataset,
    conditioning_points: &[Vec<f64>],
    instrument_basis: &BasisSpec,
    parameter_basis: &BasisSpec,
    target_values: &[f64],
) -> Result<WeightFit> {
    let n = data.len();
    if target_values.len() != n {
        return Err(Error::DimensionMismatch {
            what: "representer target",
            expected: n,
            got: target_values.len(),
        });
    }
    let offset = vec![0.0; n];
    let slope: Vec<f64> = data.r.iter().map(|&r| r as f64).collect();
    let linear: Vec<f64> = target_values
        .iter()
        .zip(&data.r)
        .map(|(&k, &r)| r as f64 * k)
        .collect();
    let problem = SmdProblem::new(
        AffineResidual { offset, slope },
        conditioning_points,
        instrument_basis,
        &data.weight_rows(),
        parameter_basis,
        crate::basis::LinkSpec::identity(),
        Some(&data.t),
        Some(linear),
        None,
        "representer fit",
    )?;
    solve_smd(&problem, None, &OptimOptions::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Theta,
    Alpha0,
    Alpha1,
    Nie,
    Nde,
    Ate,
}

impl Estimand {
    pub const ALL: [Estimand; 6] = [
        Estimand::Theta,
        Estimand::Alpha0,
        Estimand::Alpha1,
        Estimand::Nie,
        Estimand::Nde,
        Estimand::Ate,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Estimand::Theta => "theta",
            Estimand::Alpha0 => "alpha0",
            Estimand::Alpha1 => "alpha1",
            Estimand::Nie => "nie",
            Estimand::Nde => "nde",
            Estimand::Ate => "ate",
        }
    }

    pub fn pick(&self, est: &PointEstimates) -> f64 {
        match self {
            Estimand::Theta => est.theta,
            Estimand::Alpha0 => est.alpha0,
            Estimand::Alpha1 => est.alpha1,
            Estimand::Nie => est.nie,
            Estimand::Nde => est.nde,
            Estimand::Ate => est.ate,
        }
    }
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Plugin,
    BootstrapNormal,
    BootstrapPercentile,
}

/// One estimand's point, standard error, and 95% confidence interval.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EstimateLine {
    pub estimand: Estimand,
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: CiMethod,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    pub weight_normalization: f64,
    pub weight_normalization_warning: bool,
    pub delta_criterion: f64,
    pub degenerate_variance: bool,
    pub bootstrap_failures: usize,
    pub notes: Vec<String>,
}

/// Point estimates and confidence intervals for every estimand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceReport {
    pub n: usize,
    pub lines: Vec<EstimateLine>,
    pub diagnostics: ReportDiagnostics,
}

impl InferenceReport {
    pub fn line(&self, estimand: Estimand, method: CiMethod) -> Option<&EstimateLine> {
        self.lines
            .iter()
            .find(|l| l.estimand == estimand && l.method == method)
    }

    pub fn plugin(&self, estimand: Estimand) -> Option<&EstimateLine> {
        self.line(estimand, CiMethod::Plugin)
    }
}

/// Influence-function evaluations for the fitted sample.
#[derive(Clone, Debug)]
pub struct InfluenceVectors {
    pub psi: Vec<f64>,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
    /// Ehat{R rho | W_i}, the representer projection entering psi.
    pub representer_projection: Vec<f64>,
}

pub struct InfluenceInputs<'a> {
    pub rdelta: &'a [f64],
    pub kappa: &'a [f64],
    pub chi0: &'a [f64],
    pub chi1: &'a [f64],
    /// Series projections of R*rho, R*varsigma0, R*varsigma1 on the
    /// conditioning set (zero vectors in the complete-data regime).
    pub nu_rho: &'a [f64],
    pub nu_varsigma0: &'a [f64],
    pub nu_varsigma1: &'a [f64],
    pub estimates: &'a PointEstimates,
}

const Z_975: f64 = 1.96;

/// Build the influence vectors and the plug-in report:
/// psi_i = R_i d_i kappa_i - theta + nu_i (1 - R_i d_i), and analogously for
/// phi^(t); SEs are sqrt(mean(iv^2))/sqrt(n) with the influence differences
/// for NIE/NDE/ATE.
pub fn influence_and_variance(inputs: &InfluenceInputs) -> (InfluenceVectors, InferenceReport) {
    let n = inputs.rdelta.len();
    let nf = n as f64;
    let est = inputs.estimates;
    let mut psi = vec![0.0; n];
    let mut phi0 = vec![0.0; n];
    let mut phi1 = vec![0.0; n];
    for i in 0..n {
        let rd = inputs.rdelta[i];
        psi[i] = rd * inputs.kappa[i] - est.theta + inputs.nu_rho[i] * (1.0 - rd);
        phi0[i] = rd * inputs.chi0[i] - est.alpha0 + inputs.nu_varsigma0[i] * (1.0 - rd);
        phi1[i] = rd * inputs.chi1[i] - est.alpha1 + inputs.nu_varsigma1[i] * (1.0 - rd);
    }
    let mean_sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / nf;
    let diff_mean_sq =
        |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / nf;

    let variances = [
        (Estimand::Theta, est.theta, mean_sq(&psi)),
        (Estimand::Alpha0, est.alpha0, mean_sq(&phi0)),
        (Estimand::Alpha1, est.alpha1, mean_sq(&phi1)),
        (Estimand::Nie, est.nie, diff_mean_sq(&phi1, &psi)),
        (Estimand::Nde, est.nde, diff_mean_sq(&psi, &phi0)),
        (Estimand::Ate, est.ate, diff_mean_sq(&phi1, &phi0)),
    ];
    let mut degenerate = false;
    let lines = variances
        .iter()
        .map(|&(estimand, point, var)| {
            let se = (var / nf).sqrt();
            if se == 0.0 {
                degenerate = true;
            }
            EstimateLine {
                estimand,
                point,
                se,
                ci_low: point - Z_975 * se,
                ci_high: point + Z_975 * se,
                method: CiMethod::Plugin,
            }
        })
        .collect();
    let report = InferenceReport {
        n,
        lines,
        diagnostics: ReportDiagnostics {
            degenerate_variance: degenerate,
            ..Default::default()
        },
    };
    (
        InfluenceVectors {
            psi,
            phi0,
            phi1,
            representer_projection: inputs.nu_rho.to_vec(),
        },
        report,
    )
}

/// Type-7 quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn split_seed(master: u64, index: u64) -> u64 {
    // SplitMix64 step keyed by index.
    let mut s = master.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15));
    s = (s ^ (s >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94D049BB133111EB);
    s ^ (s >> 31)
}

/// Pairs (row-resampling) bootstrap around an arbitrary estimator pipeline.
/// Deterministic for a given seed. Resamples on which the pipeline fails are
/// skipped and counted; more than 10% failures aborts.
pub fn bootstrap_ci<F>(
    data: &Dataset,
    pipeline: F,
    full_sample_estimates: &PointEstimates,
    replicates: usize,
    seed: u64,
) -> Result<InferenceReport>
where
    F: Fn(&Dataset) -> Result<PointEstimates> + Sync,
{
    if replicates == 0 {
        return Err(Error::InvalidConfig("bootstrap needs at least 1 replicate".into()));
    }
    let n = data.len();
    let outcomes: Vec<Option<PointEstimates>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha12Rng::seed_from_u64(split_seed(seed, b as u64));
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            pipeline(&data.subset(&indices)).ok()
        })
        .collect();
    let successes: Vec<PointEstimates> = outcomes.iter().copied().flatten().collect();
    let failed = replicates - successes.len();
    if failed * 10 > replicates {
        return Err(Error::BootstrapUnstable {
            failed,
            total: replicates,
        });
    }
    let mut lines = Vec::new();
    let mut degenerate = false;
    for estimand in Estimand::ALL {
        let point = estimand.pick(full_sample_estimates);
        let mut draws: Vec<f64> = successes.iter().map(|e| estimand.pick(e)).collect();
        let bn = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / bn;
        let sd = if draws.len() > 1 {
            (draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (bn - 1.0)).sqrt()
        } else {
            degenerate = true;
            0.0
        };
        lines.push(EstimateLine {
            estimand,
            point,
            se: sd,
            ci_low: point - Z_975 * sd,
            ci_high: point + Z_975 * sd,
            method: CiMethod::BootstrapNormal,
        });
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lines.push(EstimateLine {
            estimand,
            point,
            se: sd,
            ci_low: quantile_sorted(&draws, 0.025),
            ci_high: quantile_sorted(&draws, 0.975),
            method: CiMethod::BootstrapPercentile,
        });
    }
    Ok(InferenceReport {
        n,
        lines,
        diagnostics: ReportDiagnostics {
            degenerate_variance: degenerate,
            bootstrap_failures: failed,
            ..Default::default()
        },
    })
}

/// Estimated efficiency loss due to missingness, and its ingredients.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EfficiencyLoss {
    /// mean (delta_i - 1)(kappa_i - nu_i)^2 over the latent sample.
    pub loss: f64,
    /// Monte Carlo standard error of that mean.
    pub loss_se: f64,
    /// Complete-data variance bound mean (kappa_i - theta)^2.
    pub sigma2_full: f64,
}

/// Plug-in evaluation of the loss term: requires latent (complete-data)
/// evaluations of the weight and of kappa, plus the representer projection
/// from the missing-data fit.
pub fn efficiency_loss(
    delta_star: &[f64],
    kappa_star: &[f64],
    theta_star: f64,
    nu: &[f64],
) -> EfficiencyLoss {
    let n = delta_star.len() as f64;
    let terms: Vec<f64> = delta_star
        .iter()
        .zip(kappa_star)
        .zip(nu)
        .map(|((&d, &k), &v)| (d - 1.0) * (k - v) * (k - v))
        .collect();
    let loss = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - loss) * (t - loss)).sum::<f64>() / (n - 1.0);
    let sigma2_full = kappa_star
        .iter()
        .map(|&k| (k - theta_star) * (k - theta_star))
        .sum::<f64>()
        / n;
    EfficiencyLoss {
        loss,
        loss_se: (var / n).sqrt(),
        sigma2_full,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
    }

    #[test]
    fn split_seed_varies_and_is_stable() {
        assert_eq!(split_seed(7, 1), split_seed(7, 1));
        assert_ne!(split_seed(7, 1), split_seed(7, 2));
        assert_ne!(split_seed(7, 1), split_seed(8, 1));
    }

    #[test]
    fn plugin_ci_width_is_exact() {
        let n = 100;
        let est = PointEstimates {
            theta: 1.0,
            alpha0: 0.5,
            alpha1: 2.0,
            nie: 1.0,
            nde: 0.5,
            ate: 1.5,
        };
        let rdelta = vec![1.0; n];
        let kappa: Vec<f64> = (0..n).map(|i| 1.0 + ((i % 7) as f64 - 3.0) * 0.1).collect();
        let zeros = vec![0.0; n];
        let chi0 = vec![0.5; n];
        let chi1 = vec![2.0; n];
        let (iv, report) = influence_and_variance(&InfluenceInputs {
            rdelta: &rdelta,
            kappa: &kappa,
            chi0: &chi0,
            chi1: &chi1,
            nu_rho: &zeros,
            nu_varsigma0: &zeros,
            nu_varsigma1: &zeros,
            estimates: &est,
        });
        let line = report.plugin(Estimand::Theta).unwrap();
        let sigma2 = iv.psi.iter().map(|p| p * p).sum::<f64>() / n as f64;
        let expected_half = Z_975 * (sigma2 / n as f64).sqrt();
        assert_eq!(line.ci_high - line.ci_low, 2.0 * expected_half);
        assert!(report.plugin(Estimand::Alpha0).unwrap().se == 0.0);
        assert!(report.diagnostics.degenerate_variance);
    }

    #[test]
    fn efficiency_loss_zero_when_delta_is_one() {
        let delta = vec![1.0; 50];
        let kappa: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let nu = vec![0.3; 50];
        let out = efficiency_loss(&delta, &kappa, 0.245, &nu);
        assert_eq!(out.loss, 0.0);
        assert!(out.sigma2_full > 0.0);
    }
}
