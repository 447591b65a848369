//! Out-of-distribution scores and threshold calibration.
//!
//! Every score is oriented so that larger means "more in-distribution"; an
//! instance is accepted as known when `score >= threshold`.

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax_with_temperature, LogMaxSoftmax, MlpClassifier};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Minimum number of in-distribution scores accepted by [`calibrate_threshold`].
pub const MIN_CALIBRATION_SCORES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "msp")]
    Msp,
    #[serde(rename = "odin")]
    Odin,
    #[serde(rename = "maha")]
    Mahalanobis,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Msp => "msp",
            DetectorKind::Odin => "odin",
            DetectorKind::Mahalanobis => "maha",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(DetectorKind::Msp),
            "odin" => Ok(DetectorKind::Odin),
            "maha" => Ok(DetectorKind::Mahalanobis),
            other => Err(Error::Parameter(format!("unknown detector kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub temperature: f64,
    pub epsilon: f64,
    /// Set by calibration.
    pub threshold: Option<f64>,
    pub tpr_target: f64,
}

impl DetectorConfig {
    pub const ODIN_TEMPERATURE: f64 = 1000.0;
    pub const ODIN_EPSILON: f64 = 0.0014;
    pub const MAHALANOBIS_EPSILON: f64 = 0.001;
    pub const TPR_TARGET: f64 = 0.95;

    /// Defaults for `kind`: T = 1000 and ε = 0.0014 for ODIN, ε = 0.001 for
    /// Mahalanobis, TPR target 0.95 for all.
    pub fn new(kind: DetectorKind) -> Self {
        let (temperature, epsilon) = match kind {
            DetectorKind::Msp => (1.0, 0.0),
            DetectorKind::Odin => (Self::ODIN_TEMPERATURE, Self::ODIN_EPSILON),
            DetectorKind::Mahalanobis => (1.0, Self::MAHALANOBIS_EPSILON),
        };
        Self {
            kind,
            temperature,
            epsilon,
            threshold: None,
            tpr_target: Self::TPR_TARGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tpr_target > 0.0 && self.tpr_target < 1.0) {
            return Err(Error::Parameter(format!(
                "tpr_target must lie in (0, 1), got {}",
                self.tpr_target
            )));
        }
        Ok(())
    }
}

/// Class means and shared precision in a network's feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisParams {
    pub class_means: Vec<Vec<f64>>,
    /// Row-major inverse of the regularised tied covariance.
    pub shared_precision: Vec<Vec<f64>>,
}

impl MahalanobisParams {
    pub fn dim(&self) -> usize {
        self.shared_precision.len()
    }

    /// `-(z - mu)^T P (z - mu)` for every class.
    fn neg_distances(&self, z: &[f64]) -> Vec<f64> {
        self.class_means
            .iter()
            .map(|mu| {
                let diff: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
                -quadratic_form(&self.shared_precision, &diff)
            })
            .collect()
    }

    /// `max_c -(z - mu_c)^T P (z - mu_c)` and the maximising class.
    pub fn confidence(&self, z: &[f64]) -> (f64, usize) {
        let d = self.neg_distances(z);
        let c = argmax(&d);
        (d[c], c)
    }
}

fn quadratic_form(m: &[Vec<f64>], v: &[f64]) -> f64 {
    m.iter()
        .zip(v)
        .map(|(row, vi)| vi * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Maximum softmax probability at T = 1.
pub fn msp_score(net: &MlpClassifier, x: &[f64]) -> Result<f64> {
    let p = softmax_with_temperature(&net.forward(x)?, 1.0)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// ODIN: step the input by `epsilon` along the sign of the gradient of the
/// log max-softmax at temperature `T`, then take the max softmax of the
/// perturbed input at the same temperature.
pub fn odin_score(net: &MlpClassifier, x: &[f64], temperature: f64, epsilon: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let perturbed;
    let input = if epsilon == 0.0 {
        x
    } else {
        let grad = net.input_gradient(x, &LogMaxSoftmax { temperature })?;
        // x - eps * sign(-grad)
        perturbed = x
            .iter()
            .zip(&grad)
            .map(|(xi, g)| xi - epsilon * sign(-g))
            .collect::<Vec<_>>();
        &perturbed
    };
    let p = softmax_with_temperature(&net.forward(input)?, temperature)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Class means and tied covariance (pooled, denominator `N - k`) of the
/// network's penultimate features, regularised with `1e-3 * trace / d` on the
/// diagonal.
pub fn fit_mahalanobis(net: &MlpClassifier, data: &Dataset) -> Result<MahalanobisParams> {
    let dim = net
        .feature_dim()
        .ok_or_else(|| Error::Structure("Mahalanobis fit needs a hidden layer".into()))?;
    let counts = data.class_counts();
    if counts.is_empty() {
        return Err(Error::Data("cannot fit Mahalanobis parameters on no data".into()));
    }
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Data(format!("class {c} has {n} instance(s); need >= 2")));
    }
    let classes: Vec<_> = counts.keys().copied().collect();
    let mut sums = vec![vec![0.0; dim]; classes.len()];
    let mut feats = Vec::with_capacity(data.len());
    for inst in data.iter() {
        let f = net.extract_features(&inst.features)?;
        let c = classes.binary_search(&inst.class_label).expect("class listed");
        sums[c].iter_mut().zip(&f).for_each(|(s, v)| *s += v);
        feats.push((c, f));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(counts.values())
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for (c, f) in &feats {
        let diff: Vec<f64> = f.iter().zip(&means[*c]).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += diff[i] * diff[j];
            }
        }
    }
    let denom = (data.len() - classes.len()) as f64;
    cov /= denom;
    let lambda = 1e-3 * cov.trace() / dim as f64;
    for i in 0..dim {
        cov[(i, i)] += lambda;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("tied covariance is singular after regularisation".into()))?;
    let inv = chol.inverse();
    let precision = (0..dim)
        .map(|i| (0..dim).map(|j| 0.5 * (inv[(i, j)] + inv[(j, i)])).collect())
        .collect::<Vec<Vec<f64>>>();
    if precision.iter().flatten().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numeric("non-finite precision matrix".into()));
    }
    Ok(MahalanobisParams {
        class_means: means,
        shared_precision: precision,
    })
}

/// Negative Mahalanobis distance to the closest class mean after an input
/// step of size `epsilon` that increases that confidence.
pub fn mahalanobis_score(
    params: &MahalanobisParams,
    net: &MlpClassifier,
    x: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if net.feature_dim() != Some(params.dim()) {
        return Err(Error::InputShape {
            expected: params.dim(),
            got: net.feature_dim().unwrap_or(0),
        });
    }
    if epsilon == 0.0 {
        let z = net.extract_features(x)?;
        return Ok(params.confidence(&z).0);
    }
    let (_, grad) = net.feature_input_gradient(x, |z| {
        let (_, c) = params.confidence(z);
        let diff: Vec<f64> = z.iter().zip(&params.class_means[c]).map(|(a, b)| a - b).collect();
        // d/dz of -(z - mu)^T P (z - mu) = -2 P (z - mu) for symmetric P
        params
            .shared_precision
            .iter()
            .map(|row| -2.0 * row.iter().zip(&diff).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    })?;
    let perturbed: Vec<f64> = x
        .iter()
        .zip(&grad)
        .map(|(xi, g)| xi + epsilon * sign(*g))
        .collect();
    let z = net.extract_features(&perturbed)?;
    Ok(params.confidence(&z).0)
}

/// Lower-interpolated `(1 - tpr_target)` quantile of the in-distribution scores.
pub fn calibrate_threshold(id_scores: &[f64], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target < 1.0) {
        return Err(Error::Parameter(format!(
            "tpr_target must lie in (0, 1), got {tpr_target}"
        )));
    }
    if id_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::Calibration(format!(
            "{} scores; need at least {MIN_CALIBRATION_SCORES}",
            id_scores.len()
        )));
    }
    if id_scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Calibration("NaN score".into()));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut idx = ((1.0 - tpr_target) * (n - 1) as f64).floor() as usize;
    // guard against rounding in the product above
    while idx > 0 && ((n - sorted.partition_point(|s| *s < sorted[idx])) as f64) < tpr_target * n as f64 {
        idx -= 1;
    }
    Ok(sorted[idx])
}

/// A detector bound to the network it scores with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    pub mahalanobis: Option<MahalanobisParams>,
}

impl Detector {
    /// Fits any distribution parameters on `fit_data` and calibrates the
    /// threshold on `calibration` scores.
    pub fn fit(
        config: DetectorConfig,
        net: &MlpClassifier,
        fit_data: &Dataset,
        calibration: &Dataset,
    ) -> Result<Self> {
        config.validate()?;
        let mahalanobis = match config.kind {
            DetectorKind::Mahalanobis => Some(fit_mahalanobis(net, fit_data)?),
            _ => None,
        };
        let mut det = Detector { config, mahalanobis };
        let scores = calibration
            .iter()
            .map(|i| det.score(net, &i.features))
            .collect::<Result<Vec<_>>>()?;
        det.config.threshold = Some(calibrate_threshold(&scores, det.config.tpr_target)?);
        Ok(det)
    }

    pub fn score(&self, net: &MlpClassifier, x: &[f64]) -> Result<f64> {
        match self.config.kind {
            DetectorKind::Msp => msp_score(net, x),
            DetectorKind::Odin => odin_score(net, x, self.config.temperature, self.config.epsilon),
            DetectorKind::Mahalanobis => {
                let params = self
                    .mahalanobis
                    .as_ref()
                    .ok_or_else(|| Error::State("Mahalanobis detector not fitted".into()))?;
                mahalanobis_score(params, net, x, self.config.epsilon)
            }
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        self.config
            .threshold
            .ok_or_else(|| Error::State("detector threshold not calibrated".into()))
    }

    /// `score >= threshold`.
    pub fn accepts(&self, net: &MlpClassifier, x: &[f64]) -> Result<bool> {
        let threshold = self.threshold()?;
        Ok(self.score(net, x)? >= threshold)
    }

    pub fn to_dump(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let det: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        det.config.validate()?;
        Ok(det)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consultancy {
    Known,
    Unknown,
}

/// Stage one: is `x` known to the general model?
pub fn consultancy_decision(
    detector: &Detector,
    net: &MlpClassifier,
    x: &[f64],
) -> Result<Consultancy> {
    Ok(if detector.accepts(net, x)? {
        Consultancy::Known
    } else {
        Consultancy::Unknown
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::LabeledInstance;
    use crate::ids::{ClassLabel, DomainId, InstanceId};
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_feature_net() -> MlpClassifier {
        MlpClassifier::from_parts(
            vec![2, 2, 2],
            Activation::Relu,
            vec![0, 1],
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0; 2], vec![0.0; 2]],
        )
        .unwrap()
    }

    fn labelled(points: &[(f64, f64, u32)]) -> Dataset {
        Dataset::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &(a, b, c))| LabeledInstance {
                    id: InstanceId(i as u64),
                    features: vec![a, b],
                    class_label: ClassLabel(c),
                    domain_id: DomainId(0),
                })
                .collect(),
        )
    }

    fn fit_fixture() -> Dataset {
        labelled(&[(0.0, 0.0, 0), (2.0, 0.0, 0), (0.0, 2.0, 1), (2.0, 2.0, 1)])
    }

    #[test]
    fn msp_examples() {
        let net = MlpClassifier::from_parts(
            vec![3, 3],
            Activation::Relu,
            vec![0, 1, 2],
            vec![vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0; 3]],
        )
        .unwrap();
        assert!((msp_score(&net, &[4.0, 4.0, 4.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let expected = 1.0 / (1.0 + 2.0 * (-10.0f64).exp());
        let s = msp_score(&net, &[10.0, 0.0, 0.0]).unwrap();
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.99991).abs() < 1e-5);
    }

    #[test]
    fn odin_degenerate_reductions() {
        let net = MlpClassifier::new(&[2, 4, 3], &[0, 1, 2], Activation::Relu, 3).unwrap();
        let x = [0.3, -1.1];
        assert_eq!(odin_score(&net, &x, 1.0, 0.0).unwrap(), msp_score(&net, &x).unwrap());
        let p = softmax_with_temperature(&net.forward(&x).unwrap(), 1000.0).unwrap();
        let max = p.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(odin_score(&net, &x, 1000.0, 0.0).unwrap(), max);
    }

    #[test]
    fn odin_matches_manual_pipeline() {
        let net = MlpClassifier::new(&[2, 4, 2], &[0, 1], Activation::Relu, 12).unwrap();
        let x = [0.3, 0.7];
        let (t, eps) = (1000.0, 0.01);
        // manual: finite-difference gradient of log max-softmax at T, then perturb
        let f = |v: &[f64]| {
            let z = net.forward(v).unwrap();
            let p = softmax_with_temperature(&z, t).unwrap();
            p[argmax(&z)].ln()
        };
        let h = 1e-6;
        let g: Vec<f64> = (0..2)
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect();
        let xt: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + eps * gi.signum()).collect();
        let p = softmax_with_temperature(&net.forward(&xt).unwrap(), t).unwrap();
        let expected = p.iter().copied().fold(f64::MIN, f64::max);
        let got = odin_score(&net, &x, t, eps).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn mahalanobis_fit_hand_computed() {
        let params = fit_mahalanobis(&identity_feature_net(), &fit_fixture()).unwrap();
        assert_eq!(params.class_means, vec![vec![1.0, 0.0], vec![1.0, 2.0]]);
        // pooled scatter diag(4, 0) over N - k = 2 -> diag(2, 0); lambda = 1e-3 * 2 / 2
        let lambda = 1e-3;
        let p = &params.shared_precision;
        assert!((p[0][0] - 1.0 / (2.0 + lambda)).abs() < 1e-12);
        assert!((p[1][1] - 1.0 / lambda).abs() < 1e-6);
        assert!(p[0][1].abs() < 1e-12 && p[1][0].abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_score_hand_computed() {
        let net = identity_feature_net();
        let params = fit_mahalanobis(&net, &fit_fixture()).unwrap();
        let p = &params.shared_precision;
        // x = (1, 1): diff to A = (0, 1), to B = (0, -1)
        let d_a = p[1][1];
        let d_b = p[1][1];
        let s = mahalanobis_score(&params, &net, &[1.0, 1.0], 0.0).unwrap();
        assert!((s - (-d_a).max(-d_b)).abs() < 1e-9);
        assert_eq!(mahalanobis_score(&params, &net, &[1.0, 0.0], 0.0).unwrap(), 0.0);
        assert_eq!(mahalanobis_score(&params, &net, &[1.0, 2.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_single_class_and_errors() {
        let net = identity_feature_net();
        let one_class = labelled(&[(0.0, 0.0, 0), (1.0, 2.0, 0), (2.0, 1.0, 0)]);
        assert_eq!(fit_mahalanobis(&net, &one_class).unwrap().class_means.len(), 1);
        let lonely = labelled(&[(0.0, 0.0, 0), (1.0, 2.0, 0), (2.0, 1.0, 1)]);
        assert!(matches!(fit_mahalanobis(&net, &lonely), Err(Error::Data(_))));
        let constant = labelled(&[(1.0, 1.0, 0), (1.0, 1.0, 0)]);
        assert!(matches!(fit_mahalanobis(&net, &constant), Err(Error::Numeric(_))));
    }

    #[test]
    fn precision_symmetric_positive_definite_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in 0..50u64 {
            let net = MlpClassifier::new(&[3, 5, 2], &[0, 1], Activation::Relu, seed).unwrap();
            let pts: Vec<(f64, f64, u32)> = (0..30)
                .map(|i| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), i % 2))
                .collect();
            let data = Dataset::new(
                pts.iter()
                    .enumerate()
                    .map(|(i, &(a, b, c))| LabeledInstance {
                        id: InstanceId(i as u64),
                        features: vec![a, b, a * b],
                        class_label: ClassLabel(c),
                        domain_id: DomainId(0),
                    })
                    .collect(),
            );
            let Ok(params) = fit_mahalanobis(&net, &data) else {
                continue; // all-dead features: singular by construction
            };
            let p = &params.shared_precision;
            let m = DMatrix::from_fn(p.len(), p.len(), |i, j| p[i][j]);
            assert!((&m - m.transpose()).amax() < 1e-9);
            let eig = m.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|v| *v > 0.0), "seed {seed}");
        }
    }

    #[test]
    fn calibration_examples() {
        let scores: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(calibrate_threshold(&scores, 0.95).unwrap(), 5.0);
        assert_eq!(calibrate_threshold(&[0.7; 25], 0.95).unwrap(), 0.7);
        assert!(matches!(
            calibrate_threshold(&[1.0; 19], 0.95),
            Err(Error::Calibration(_))
        ));
        assert!(calibrate_threshold(&scores, 1.0).is_err());
    }

    #[test]
    fn calibration_achieves_target_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(20..400);
            let tpr = rng.random_range(0.5..0.99);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(-3.0f64..3.0) * 4.0).round() / 4.0)
                .collect();
            let d = calibrate_threshold(&scores, tpr).unwrap();
            let frac = scores.iter().filter(|s| **s >= d).count() as f64 / n as f64;
            assert!(frac >= tpr);
        }
    }

    #[test]
    fn consultancy_boundary_and_state() {
        let net = identity_feature_net();
        let mut det = Detector {
            config: DetectorConfig::new(DetectorKind::Msp),
            mahalanobis: None,
        };
        let x = [0.4, 0.1];
        assert!(matches!(
            consultancy_decision(&det, &net, &x),
            Err(Error::State(_))
        ));
        det.config.threshold = Some(msp_score(&net, &x).unwrap());
        assert_eq!(consultancy_decision(&det, &net, &x).unwrap(), Consultancy::Known);
    }

    #[test]
    fn detector_dump_round_trip() {
        let net = identity_feature_net();
        let data = labelled(
            &(0..40)
                .map(|i| ((i % 7) as f64 * 0.3, (i % 5) as f64 * 0.4, (i % 2) as u32))
                .collect::<Vec<_>>(),
        );
        let det = Detector::fit(DetectorConfig::new(DetectorKind::Mahalanobis), &net, &data, &data)
            .unwrap();
        let back = Detector::from_dump(&det.to_dump().unwrap()).unwrap();
        assert_eq!(det, back);
    }
}
