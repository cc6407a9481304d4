//! Post-hoc probability calibration: temperature scaling and vector scaling,
//! fitted by minimising validation negative log-likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.9;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationKind {
    None,
    Temperature,
    Vector,
}

impl std::str::FromStr for CalibrationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "temp" | "temperature" => Ok(Self::Temperature),
            "vector" => Ok(Self::Vector),
            other => Err(format!("unknown calibration method `{other}` (expected none, temp or vector)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Calibrator {
    None,
    Temperature { temperature: f64 },
    Vector { scale: Vec<f64>, bias: Vec<f64> },
}

impl Default for Calibrator {
    fn default() -> Self {
        Calibrator::None
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Calibrator {
    pub fn kind(&self) -> CalibrationKind {
        match self {
            Calibrator::None => CalibrationKind::None,
            Calibrator::Temperature { .. } => CalibrationKind::Temperature,
            Calibrator::Vector { .. } => CalibrationKind::Vector,
        }
    }

    /// Calibrated logits before the softmax.
    pub fn scaled_logits(&self, logits: &[f64]) -> Result<Vec<f64>> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("logits must be non-empty and finite".into()));
        }
        Ok(match self {
            Calibrator::None => logits.to_vec(),
            Calibrator::Temperature { temperature } => logits.iter().map(|z| z / temperature).collect(),
            Calibrator::Vector { scale, bias } => {
                if scale.len() != logits.len() || bias.len() != logits.len() {
                    return Err(Error::DimensionMismatch {
                        expected: scale.len(),
                        got: logits.len(),
                    });
                }
                logits
                    .iter()
                    .zip(scale)
                    .zip(bias)
                    .map(|((z, a), b)| a * z + b)
                    .collect()
            }
        })
    }

    pub fn apply(&self, logits: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.scaled_logits(logits)?))
    }

    /// Mean negative log-likelihood on labelled logits.
    pub fn nll(&self, logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (z, &y) in logits.iter().zip(labels) {
            let s = self.scaled_logits(z)?;
            total += log_sum_exp(&s) - s[y];
        }
        Ok(total / logits.len() as f64)
    }
}

/// Confidence (max probability) and argmax of a probability vector.
pub fn confidence(probabilities: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    (best, probabilities[best])
}

/// Inclusive gate: a prediction is delivered when `confidence >= threshold`.
pub fn abstains(confidence: f64, threshold: f64) -> bool {
    confidence < threshold
}

fn validate(logits: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Calibration(format!(
            "need a non-empty validation set with one label per row ({} rows, {} labels)",
            logits.len(),
            labels.len()
        )));
    }
    let c = logits[0].len();
    if c < 2 {
        return Err(Error::Calibration("calibration needs at least two classes".into()));
    }
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != c {
            return Err(Error::DimensionMismatch { expected: c, got: z.len() });
        }
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("non-finite validation logits".into()));
        }
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Calibration(
            "validation set holds a single class; calibration is degenerate".into(),
        ));
    }
    Ok(c)
}

/// Outcome of a fit, with the optimiser's final state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub calibrator: Calibrator,
    pub nll_before: f64,
    pub nll_after: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

pub fn fit(kind: CalibrationKind, logits: &[Vec<f64>], labels: &[usize]) -> Result<FitReport> {
    validate(logits, labels)?;
    let nll_before = Calibrator::None.nll(logits, labels)?;
    match kind {
        CalibrationKind::None => Ok(FitReport {
            calibrator: Calibrator::None,
            nll_before,
            nll_after: nll_before,
            iterations: 0,
            gradient_norm: 0.0,
        }),
        CalibrationKind::Temperature => {
            let (beta, iterations, g) = fit_inverse_temperature(logits, labels);
            let calibrator = Calibrator::Temperature { temperature: 1.0 / beta };
            Ok(FitReport {
                nll_after: calibrator.nll(logits, labels)?,
                calibrator,
                nll_before,
                iterations,
                gradient_norm: g,
            })
        }
        CalibrationKind::Vector => {
            let (beta, t_iters, _) = fit_inverse_temperature(logits, labels);
            let (scale, bias, iterations, g) = fit_vector(logits, labels, beta);
            let calibrator = Calibrator::Vector { scale, bias };
            Ok(FitReport {
                nll_after: calibrator.nll(logits, labels)?,
                calibrator,
                nll_before,
                iterations: t_iters + iterations,
                gradient_norm: g,
            })
        }
    }
}

/// Newton's method on `beta = 1/T`; the NLL is convex in `beta`.
/// Returns `(beta, iterations, |gradient|)`.
fn fit_inverse_temperature(logits: &[Vec<f64>], labels: &[usize]) -> (f64, usize, f64) {
    let n = logits.len() as f64;
    let objective = |beta: f64| -> f64 {
        logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let s: Vec<f64> = z.iter().map(|v| v * beta).collect();
                log_sum_exp(&s) - s[y]
            })
            .sum::<f64>()
            / n
    };
    let derivatives = |beta: f64| -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        for (z, &y) in logits.iter().zip(labels) {
            let p = softmax(&z.iter().map(|v| v * beta).collect::<Vec<_>>());
            let mean: f64 = p.iter().zip(z).map(|(p, z)| p * z).sum();
            let var: f64 = p.iter().zip(z).map(|(p, z)| p * (z - mean).powi(2)).sum();
            g += mean - z[y];
            h += var;
        }
        (g / n, h / n)
    };
    let mut beta = 1.0;
    let mut grad = derivatives(beta).0;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && grad.abs() > GRADIENT_TOLERANCE {
        iterations += 1;
        let (g, h) = derivatives(beta);
        let mut step = if h > 1e-12 { -g / h } else { -g };
        let f0 = objective(beta);
        // backtrack to keep beta positive and the objective decreasing
        let mut accepted = false;
        for _ in 0..60 {
            let cand = beta + step;
            if cand > 0.0 && objective(cand) <= f0 + 1e-4 * g * step {
                beta = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        grad = derivatives(beta).0;
        if !accepted {
            break;
        }
    }
    (beta, iterations, grad.abs())
}

/// Damped Newton on the diagonal scale and bias, warm-started at the
/// temperature solution so the result is never worse than it.
fn fit_vector(logits: &[Vec<f64>], labels: &[usize], beta: f64) -> (Vec<f64>, Vec<f64>, usize, f64) {
    let c = logits[0].len();
    let n = logits.len() as f64;
    let objective = |theta: &DVector<f64>| -> f64 {
        logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let s: Vec<f64> = (0..c).map(|k| theta[k] * z[k] + theta[c + k]).collect();
                log_sum_exp(&s) - s[y]
            })
            .sum::<f64>()
            / n
    };
    let derivatives = |theta: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(2 * c);
        let mut h = DMatrix::zeros(2 * c, 2 * c);
        for (z, &y) in logits.iter().zip(labels) {
            let s: Vec<f64> = (0..c).map(|k| theta[k] * z[k] + theta[c + k]).collect();
            let p = softmax(&s);
            // d s_k / d theta: scale_k -> z_k, bias_k -> 1
            for k in 0..c {
                let r = p[k] - if k == y { 1.0 } else { 0.0 };
                g[k] += r * z[k];
                g[c + k] += r;
            }
            for a in 0..c {
                for b in 0..c {
                    let w = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] };
                    h[(a, b)] += w * z[a] * z[b];
                    h[(a, c + b)] += w * z[a];
                    h[(c + a, b)] += w * z[b];
                    h[(c + a, c + b)] += w;
                }
            }
        }
        (g / n, h / n)
    };
    let mut theta = DVector::from_fn(2 * c, |i, _| if i < c { beta } else { 0.0 });
    let mut iterations = 0;
    let (mut g, _) = derivatives(&theta);
    while iterations < MAX_ITERATIONS && g.norm() > GRADIENT_TOLERANCE {
        iterations += 1;
        let (grad, mut hess) = derivatives(&theta);
        // bias directions are shift-invariant, so the Hessian is singular without damping
        for i in 0..2 * c {
            hess[(i, i)] += 1e-9;
        }
        let dir = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -&grad,
        };
        let f0 = objective(&theta);
        let slope = grad.dot(&dir);
        let dir = if slope < 0.0 { dir } else { -grad.clone() };
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &dir * t;
            if objective(&cand) <= f0 + 1e-4 * t * slope {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        g = derivatives(&theta).0;
        if !accepted {
            break;
        }
    }
    let scale = theta.rows(0, c).iter().cloned().collect();
    let bias = theta.rows(c, c).iter().cloned().collect();
    (scale, bias, iterations, g.norm())
}

/// Expected calibration error with equal-width confidence bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub ece: f64,
    pub bins: Vec<EceBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

pub fn expected_calibration_error(probabilities: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<EceReport> {
    if probabilities.is_empty() || probabilities.len() != labels.len() || bins == 0 {
        return Err(Error::Calibration("ECE needs labelled probabilities and at least one bin".into()));
    }
    let mut acc = vec![(0usize, 0.0f64, 0usize); bins];
    for (p, &y) in probabilities.iter().zip(labels) {
        let (pred, conf) = confidence(p);
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        acc[b].0 += 1;
        acc[b].1 += conf;
        acc[b].2 += usize::from(pred == y);
    }
    let n = probabilities.len() as f64;
    let mut ece = 0.0;
    let bins_out = acc
        .iter()
        .enumerate()
        .map(|(i, &(count, conf_sum, correct))| {
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum / count as f64, correct as f64 / count as f64)
            };
            ece += count as f64 / n * (mean_confidence - accuracy).abs();
            EceBin {
                lower: i as f64 / bins as f64,
                upper: (i + 1) as f64 / bins as f64,
                count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(EceReport { ece, bins: bins_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Draws labels from softmax(z) so `z` is calibrated by construction.
    fn calibrated_set(n: usize, c: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = softmax(&z);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = c - 1;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    y = k;
                    break;
                }
            }
            logits.push(z);
            labels.push(y);
        }
        (logits, labels)
    }

    #[test]
    fn identity_calibrators() {
        let z = [2.0, -1.0, 0.5];
        let plain = softmax(&z);
        assert_eq!(Calibrator::None.apply(&z).unwrap(), plain);
        let t = Calibrator::Temperature { temperature: 1.0 }.apply(&z).unwrap();
        let v = Calibrator::Vector { scale: vec![1.0; 3], bias: vec![0.0; 3] }.apply(&z).unwrap();
        for i in 0..3 {
            assert!((t[i] - plain[i]).abs() < 1e-15);
            assert!((v[i] - plain[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn large_temperature_is_near_uniform() {
        let p = Calibrator::Temperature { temperature: 1e9 }.apply(&[5.0, 0.0, -2.0, 1.0]).unwrap();
        assert!((confidence(&p).1 - 0.25).abs() < 1e-6);
    }

    #[test]
    fn low_temperature_sharpens() {
        let z = [2.0, 0.0];
        let base = confidence(&softmax(&z)).1;
        let sharp = confidence(&Calibrator::Temperature { temperature: 0.5 }.apply(&z).unwrap()).1;
        assert!(sharp > base);
        assert!((sharp - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Calibrator::None.apply(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn calibrated_logits_give_unit_temperature() {
        let (z, y) = calibrated_set(4000, 4, 1);
        let r = fit(CalibrationKind::Temperature, &z, &y).unwrap();
        let Calibrator::Temperature { temperature } = r.calibrator else { panic!() };
        assert!((temperature - 1.0).abs() < 0.05, "T = {temperature}");
        assert!(r.gradient_norm <= GRADIENT_TOLERANCE);
    }

    #[test]
    fn doubled_logits_give_temperature_two() {
        let (z, y) = calibrated_set(4000, 4, 2);
        let doubled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let r = fit(CalibrationKind::Temperature, &doubled, &y).unwrap();
        let Calibrator::Temperature { temperature } = r.calibrator else { panic!() };
        assert!((temperature - 2.0).abs() < 0.1, "T = {temperature}");
    }

    #[test]
    fn vector_not_worse_than_temperature() {
        let (z, y) = calibrated_set(600, 3, 3);
        let t = fit(CalibrationKind::Temperature, &z, &y).unwrap();
        let v = fit(CalibrationKind::Vector, &z, &y).unwrap();
        assert!(v.nll_after <= t.nll_after + 1e-6);
    }

    #[test]
    fn single_class_validation_is_degenerate() {
        let z = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        assert!(matches!(fit(CalibrationKind::Temperature, &z, &[0, 0]), Err(Error::Calibration(_))));
    }

    #[test]
    fn inclusive_gate() {
        assert!(!abstains(0.9, 0.9));
        assert!(abstains(0.89, 0.9));
    }

    #[test]
    fn ece_perfect_bins() {
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = expected_calibration_error(&p, &[0, 1], 10).unwrap();
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.bins[9].count, 2);
    }

    #[test]
    fn serde_round_trip() {
        let c = Calibrator::Vector { scale: vec![1.5, 0.5], bias: vec![0.0, -1.0] };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"kind\":\"vector\""));
        assert_eq!(serde_json::from_str::<Calibrator>(&s).unwrap(), c);
    }
}
