//! Logistic psychometric function and its fit to delay-perception responses.

use serde::{Deserialize, Serialize};
use std::io::Read;
use thiserror::Error;

/// Delays presented in the perception experiment, in ms.
pub const STUDY_LATENCIES_MS: [f64; 8] = [60.0, 80.0, 90.0, 100.0, 110.0, 120.0, 130.0, 150.0];
/// Published (k, x0) for the turn-on and turn-off conditions.
pub const TURN_ON_FIT: (f64, f64) = (0.0316, 110.64);
pub const TURN_OFF_FIT: (f64, f64) = (0.0346, 112.33);
/// Participants per delay.
pub const PARTICIPANTS: u32 = 14;

const GRID_K: usize = 61;
const GRID_X0: usize = 201;
const MAX_ITER: usize = 500;
const GRAD_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("bad response file: {0}")]
    Input(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Percent positive responses, `100 / (1 + exp(-k (x - x0)))`.
pub fn sigmoid(x: f64, k: f64, x0: f64) -> f64 {
    100.0 / (1.0 + (-k * (x - x0)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponsePoint {
    pub latency_ms: f64,
    /// Percent of trials with a positive response.
    pub positive_pct: f64,
    pub n_trials: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseData {
    pub points: Vec<ResponsePoint>,
}

impl ResponseData {
    /// Noise-free responses at `latencies` from the given parameters.
    pub fn from_model(latencies: &[f64], k: f64, x0: f64, n_trials: u32) -> Self {
        Self {
            points: latencies
                .iter()
                .map(|&x| ResponsePoint {
                    latency_ms: x,
                    positive_pct: sigmoid(x, k, x0),
                    n_trials,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let mut xs: Vec<f64> = self.points.iter().map(|p| p.latency_ms).collect();
        xs.sort_by(f64::total_cmp);
        if xs.windows(2).any(|w| w[0] == w[1]) {
            return Err(FitError::DegenerateData("latencies must be distinct".into()));
        }
        if xs.len() < 3 {
            return Err(FitError::DegenerateData(format!("need at least 3 latencies, got {}", xs.len())));
        }
        if let Some(p) = self.points.iter().find(|p| !(0.0..=100.0).contains(&p.positive_pct) || !p.latency_ms.is_finite()) {
            return Err(FitError::DegenerateData(format!("invalid point {p:?}")));
        }
        if self.points.iter().any(|p| p.n_trials == 0) {
            return Err(FitError::DegenerateData("every point needs at least one trial".into()));
        }
        let first = self.points[0].positive_pct;
        if self.points.iter().all(|p| p.positive_pct == first) {
            return Err(FitError::DegenerateData("all responses identical".into()));
        }
        Ok(())
    }

    /// CSV with header `latency_ms,positives,trials`.
    pub fn from_csv<R: Read>(r: R) -> Result<Self, FitError> {
        #[derive(Deserialize)]
        struct Row {
            latency_ms: f64,
            positives: u32,
            trials: u32,
        }
        let mut points = Vec::new();
        for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
            let row: Row = row?;
            if row.trials == 0 || row.positives > row.trials {
                return Err(FitError::Input(format!(
                    "{} positives of {} trials at {} ms",
                    row.positives, row.trials, row.latency_ms
                )));
            }
            points.push(ResponsePoint {
                latency_ms: row.latency_ms,
                positive_pct: 100.0 * row.positives as f64 / row.trials as f64,
                n_trials: row.trials,
            });
        }
        Ok(Self { points })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Trial-weighted least squares on percentages.
    #[default]
    LeastSquares,
    /// Binomial maximum likelihood.
    MaxLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub k: f64,
    pub x0: f64,
    /// Weighted sum of squared percentage errors.
    pub sse: f64,
    pub n_points: usize,
}

impl PsychometricFit {
    /// Latency perceived with 50% probability.
    pub fn threshold(&self) -> f64 {
        self.x0
    }
}

pub fn threshold(fit: &PsychometricFit) -> f64 {
    fit.threshold()
}

/// Objective value, gradient and Gauss-Newton (or Fisher) curvature in (k, x0).
fn objective(data: &ResponseData, method: FitMethod, k: f64, x0: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let mut f = 0.0;
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for p in &data.points {
        let d = p.latency_ms - x0;
        let s = 1.0 / (1.0 + (-k * d).exp());
        let ds = s * (1.0 - s);
        // derivatives of s with respect to k and x0
        let j = [ds * d, -ds * k];
        let w = p.n_trials as f64;
        match method {
            FitMethod::LeastSquares => {
                let r = p.positive_pct - 100.0 * s;
                f += w * r * r;
                for a in 0..2 {
                    g[a] -= 2.0 * w * r * 100.0 * j[a];
                    for b in 0..2 {
                        h[a][b] += 2.0 * w * 1e4 * j[a] * j[b];
                    }
                }
            }
            FitMethod::MaxLikelihood => {
                let y = p.positive_pct / 100.0;
                let s = s.clamp(1e-300, 1.0 - 1e-16);
                f -= w * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
                // d(-ll)/dz = w (s - y), with dz/dk = d and dz/dx0 = -k
                let dz = [d, -k];
                for a in 0..2 {
                    g[a] += w * (s - y) * dz[a];
                    for b in 0..2 {
                        h[a][b] += w * ds * dz[a] * dz[b];
                    }
                }
            }
        }
    }
    (f, g, h)
}

pub fn fit(data: &ResponseData) -> Result<PsychometricFit, FitError> {
    fit_with(data, FitMethod::LeastSquares)
}

/// Grid search over (k, x0) followed by Levenberg-Marquardt refinement.
pub fn fit_with(data: &ResponseData, method: FitMethod) -> Result<PsychometricFit, FitError> {
    data.validate()?;
    let lo = data.points.iter().map(|p| p.latency_ms).fold(f64::INFINITY, f64::min) - 50.0;
    let hi = data.points.iter().map(|p| p.latency_ms).fold(f64::NEG_INFINITY, f64::max) + 50.0;

    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..GRID_K {
        let k = 1e-3 * 1e3f64.powf(i as f64 / (GRID_K - 1) as f64);
        for j in 0..GRID_X0 {
            let x0 = lo + (hi - lo) * j as f64 / (GRID_X0 - 1) as f64;
            let f = objective(data, method, k, x0).0;
            if f < best.0 {
                best = (f, k, x0);
            }
        }
    }

    let (mut f, mut k, mut x0) = best;
    let mut lambda = 1e-3;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let (_, g, h) = objective(data, method, k, x0);
        grad_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if grad_norm < GRAD_TOL {
            return Ok(finish(data, k, x0));
        }
        let mut improved = false;
        while lambda < 1e16 {
            let a = [[h[0][0] * (1.0 + lambda), h[0][1]], [h[1][0], h[1][1] * (1.0 + lambda)]];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det.abs() > 0.0 && det.is_finite() {
                let dk = -(a[1][1] * g[0] - a[0][1] * g[1]) / det;
                let dx = -(a[0][0] * g[1] - a[1][0] * g[0]) / det;
                let fk = objective(data, method, k + dk, x0 + dx).0;
                if fk < f {
                    k += dk;
                    x0 += dx;
                    f = fk;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    break;
                }
                if fk == f && (dk.abs() <= 1e-15 * k.abs().max(1.0) && dx.abs() <= 1e-15 * x0.abs().max(1.0)) {
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            // no representable step lowers the objective: stationary point at machine precision
            return Ok(finish(data, k, x0));
        }
    }
    Err(FitError::NoConvergence {
        iterations: MAX_ITER,
        grad_norm,
    })
}

fn finish(data: &ResponseData, k: f64, x0: f64) -> PsychometricFit {
    PsychometricFit {
        k,
        x0,
        sse: objective(data, FitMethod::LeastSquares, k, x0).0,
        n_points: data.points.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Binomial, Distribution};

    fn reference(k: f64, x0: f64) -> ResponseData {
        ResponseData::from_model(&STUDY_LATENCIES_MS, k, x0, PARTICIPANTS)
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(110.64, 0.0316, 110.64), 50.0);
        let hand = 100.0 / (1.0 + (-0.0316f64 * 39.36).exp());
        assert!((sigmoid(150.0, 0.0316, 110.64) - hand).abs() < 1e-12);
        assert!((sigmoid(150.0, 0.0316, 110.64) - 77.62).abs() < 0.01);
        assert!(sigmoid(-1e6, 0.0316, 110.64) < 1e-9);
        assert!(sigmoid(1e6, 0.0316, 110.64) > 100.0 - 1e-9);
    }

    proptest! {
        #[test]
        fn sigmoid_monotone_and_point_symmetric(k in 1e-3f64..1.0, x0 in 0.0f64..200.0, d in 0.0f64..100.0, x in -100.0f64..300.0) {
            prop_assert!((sigmoid(x0 + d, k, x0) + sigmoid(x0 - d, k, x0) - 100.0).abs() < 1e-9);
            prop_assert!(sigmoid(x + 1.0, k, x0) >= sigmoid(x, k, x0));
            let y = sigmoid(x, k, x0);
            prop_assert!((0.0..=100.0).contains(&y));
        }
    }

    #[test]
    fn recovers_turn_on_parameters() {
        let (k, x0) = TURN_ON_FIT;
        let f = fit(&reference(k, x0)).unwrap();
        assert!((f.k - k).abs() < 1e-4, "{f:?}");
        assert!((f.x0 - x0).abs() < 0.01, "{f:?}");
        assert!((threshold(&f) - 110.6).abs() < 0.05);
        assert!(f.sse < 1e-12);
        assert!(threshold(&f) > 59.5);
    }

    #[test]
    fn recovers_turn_off_parameters() {
        let (k, x0) = TURN_OFF_FIT;
        let f = fit(&reference(k, x0)).unwrap();
        assert!((f.k - k).abs() < 1e-4 && (f.x0 - x0).abs() < 0.01, "{f:?}");
        assert!((threshold(&f) - 112.3).abs() < 0.05);
        assert!(threshold(&f) > 46.5);
    }

    #[test]
    fn symmetric_data_about_100() {
        let pts = [(70.0, 10.0), (85.0, 30.0), (100.0, 50.0), (115.0, 70.0), (130.0, 90.0)];
        let data = ResponseData {
            points: pts
                .iter()
                .map(|&(x, y)| ResponsePoint {
                    latency_ms: x,
                    positive_pct: y,
                    n_trials: 10,
                })
                .collect(),
        };
        assert!((fit(&data).unwrap().threshold() - 100.0).abs() < 1e-6);
        assert!((fit_with(&data, FitMethod::MaxLikelihood).unwrap().threshold() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn shift_moves_threshold_only() {
        let data = reference(0.0316, 110.64);
        let base = fit(&data).unwrap();
        for c in [-30.0, 17.5, 100.0] {
            let mut shifted = data.clone();
            shifted.points.iter_mut().for_each(|p| p.latency_ms += c);
            let f = fit(&shifted).unwrap();
            assert!((f.x0 - (base.x0 + c)).abs() < 1e-6);
            assert!((f.k - base.k).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let flat = ResponseData::from_model(&STUDY_LATENCIES_MS, 0.0, 100.0, 14);
        assert!(matches!(fit(&flat), Err(FitError::DegenerateData(_))));
        let two = ResponseData::from_model(&[60.0, 80.0], 0.03, 70.0, 14);
        assert!(matches!(fit(&two), Err(FitError::DegenerateData(_))));
        let mut dup = reference(0.03, 100.0);
        dup.points[1].latency_ms = dup.points[0].latency_ms;
        assert!(fit(&dup).is_err());
    }

    #[test]
    fn binomial_noise_median_threshold() {
        let (k, x0) = TURN_ON_FIT;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut ls = Vec::new();
        let mut ml = Vec::new();
        for _ in 0..200 {
            let data = ResponseData {
                points: STUDY_LATENCIES_MS
                    .iter()
                    .map(|&x| {
                        let p = sigmoid(x, k, x0) / 100.0;
                        let s = Binomial::new(PARTICIPANTS as u64, p).unwrap().sample(&mut rng);
                        ResponsePoint {
                            latency_ms: x,
                            positive_pct: 100.0 * s as f64 / PARTICIPANTS as f64,
                            n_trials: PARTICIPANTS,
                        }
                    })
                    .collect(),
            };
            ls.push(fit(&data).unwrap().x0);
            ml.push(fit_with(&data, FitMethod::MaxLikelihood).unwrap().x0);
        }
        for v in [&mut ls, &mut ml] {
            v.sort_by(f64::total_cmp);
            let median = (v[99] + v[100]) / 2.0;
            assert!((median - x0).abs() < 5.0, "median {median}");
        }
    }

    #[test]
    fn csv_input() {
        let text = "latency_ms,positives,trials\n60,1,14\n100,6,14\n150,11,14\n";
        let d = ResponseData::from_csv(text.as_bytes()).unwrap();
        assert_eq!(d.points.len(), 3);
        assert!((d.points[1].positive_pct - 600.0 / 14.0).abs() < 1e-12);
        assert!(ResponseData::from_csv("latency_ms,positives,trials\n60,15,14\n".as_bytes()).is_err());
    }
}
