//! Synthetic drifting classification data, one timeline per client.
//!
//! Class means sit on circles in consecutive feature pairs and rotate by a
//! fixed angle every period. Each client draws labels from its own class
//! prior, so clients differ in label mix while sharing the same drift.

use std::f64::consts::PI;

use ndarray::{concatenate, Array2, Axis};
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::selection::SampleId;

/// Labeled samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<SampleId>,
}

impl Dataset {
    pub fn empty(features: usize) -> Self {
        Dataset { features: Array2::zeros((0, features)), labels: Vec::new(), ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.feature_dim() != other.feature_dim() {
            return Err(Error::DimensionMismatch { expected: self.feature_dim(), got: other.feature_dim() });
        }
        Ok(Dataset {
            features: concatenate(Axis(0), &[self.features.view(), other.features.view()])
                .expect("matching column counts"),
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            ids: self.ids.iter().chain(&other.ids).cloned().collect(),
        })
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Rows whose id is in `ids`, in dataset order.
    pub fn select_ids(&self, ids: &[SampleId]) -> Dataset {
        let wanted: std::collections::HashSet<&SampleId> = ids.iter().collect();
        let rows: Vec<usize> = (0..self.len()).filter(|&i| wanted.contains(&self.ids[i])).collect();
        self.select_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDriftConfig {
    pub clients: usize,
    pub periods: usize,
    pub features: usize,
    pub classes: usize,
    /// Dirichlet concentration of the per-client class priors; large means homogeneous clients.
    pub concentration: f64,
    /// Rotation of every class mean per period, in radians.
    pub drift_angle: f64,
    pub samples_per_period: usize,
    /// Held-out test samples per client-period, as a fraction of `samples_per_period`.
    pub test_fraction: f64,
    /// Radius of the class-mean circles.
    pub class_radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDriftConfig {
    fn default() -> Self {
        SyntheticDriftConfig {
            clients: 20,
            periods: 5,
            features: 10,
            classes: 5,
            concentration: 1.0,
            drift_angle: 0.5,
            samples_per_period: 200,
            test_fraction: 0.25,
            class_radius: 1.5,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticDriftConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.clients, self.periods, self.features, self.classes, self.samples_per_period];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument("clients, periods, features, classes and samples must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::InvalidArgument("concentration must be positive".into()));
        }
        if !(0.0..=PI).contains(&self.drift_angle) {
            return Err(Error::InvalidArgument(format!("drift angle {} outside [0, pi]", self.drift_angle)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction.is_finite()) {
            return Err(Error::InvalidArgument("test_fraction must be positive".into()));
        }
        if !(self.class_radius >= 0.0 && self.noise_std > 0.0) {
            return Err(Error::InvalidArgument("class_radius must be >= 0 and noise_std > 0".into()));
        }
        Ok(())
    }

    pub fn test_samples(&self) -> usize {
        ((self.samples_per_period as f64 * self.test_fraction).round() as usize).max(1)
    }

    /// Mean of `class` in period `t` (0-based).
    pub fn class_mean(&self, class: usize, t: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.features];
        let base = 2.0 * PI * class as f64 / self.classes as f64 + t as f64 * self.drift_angle;
        for plane in 0..self.features / 2 {
            // each plane gets its own fixed phase so classes are not collinear across planes
            let angle = base + plane as f64 * 0.7;
            mean[2 * plane] = self.class_radius * angle.cos();
            mean[2 * plane + 1] = self.class_radius * angle.sin();
        }
        mean
    }
}

/// One client's training data for every period.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientTimeline {
    pub client_id: String,
    pub class_prior: Vec<f64>,
    pub periods: Vec<Dataset>,
}

impl ClientTimeline {
    pub fn sizes(&self) -> Vec<usize> {
        self.periods.iter().map(Dataset::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftData {
    pub clients: Vec<ClientTimeline>,
    /// Held-out test set per period, pooled over clients.
    pub test_sets: Vec<Dataset>,
}

impl DriftData {
    /// All test sets pooled.
    pub fn pooled_test_set(&self) -> Result<Dataset> {
        let features = self.test_sets.first().map_or(0, Dataset::feature_dim);
        self.test_sets.iter().try_fold(Dataset::empty(features), |acc, t| acc.concat(t))
    }
}

pub fn client_name(m: usize) -> String {
    format!("client{m:03}")
}

/// Generates every client's timeline and the per-period test sets.
pub fn gen_drift_data(cfg: &SyntheticDriftConfig) -> Result<DriftData> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let gamma = Gamma::new(cfg.concentration, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let means: Vec<Vec<Vec<f64>>> =
        (0..cfg.periods).map(|t| (0..cfg.classes).map(|c| cfg.class_mean(c, t)).collect()).collect();

    let mut clients = Vec::with_capacity(cfg.clients);
    let mut test_parts: Vec<Vec<Dataset>> = vec![Vec::with_capacity(cfg.clients); cfg.periods];
    for m in 0..cfg.clients {
        let name = client_name(m);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, m as u64));
        // Dirichlet prior as normalized Gamma draws
        let raw: Vec<f64> = (0..cfg.classes).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        let prior: Vec<f64> = if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / cfg.classes as f64; cfg.classes]
        };
        let labels = WeightedIndex::new(&prior).map_err(|e| Error::InvalidArgument(e.to_string()))?;

        let draw = |t: usize, n: usize, tag: &str, rng: &mut ChaCha8Rng| -> Dataset {
            let mut features = Array2::zeros((n, cfg.features));
            let mut ys = Vec::with_capacity(n);
            let mut ids = Vec::with_capacity(n);
            for i in 0..n {
                let y = labels.sample(rng);
                for (f, mu) in means[t][y].iter().enumerate() {
                    features[[i, f]] = mu + noise.sample(rng);
                }
                ys.push(y);
                ids.push(SampleId::new(format!("{name}/{tag}{}/{i}", t + 1)));
            }
            Dataset { features, labels: ys, ids }
        };
        let mut periods = Vec::with_capacity(cfg.periods);
        for (t, tests) in test_parts.iter_mut().enumerate() {
            periods.push(draw(t, cfg.samples_per_period, "p", &mut rng));
            tests.push(draw(t, cfg.test_samples(), "test", &mut rng));
        }
        clients.push(ClientTimeline { client_id: name, class_prior: prior, periods });
    }
    let test_sets = test_parts
        .into_iter()
        .map(|parts| parts.iter().try_fold(Dataset::empty(cfg.features), |acc, p| acc.concat(p)))
        .collect::<Result<_>>()?;
    Ok(DriftData { clients, test_sets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDriftConfig {
        SyntheticDriftConfig { clients: 3, periods: 3, samples_per_period: 40, ..SyntheticDriftConfig::default() }
    }

    #[test]
    fn shapes_and_ids() {
        let data = gen_drift_data(&small()).unwrap();
        assert_eq!(data.clients.len(), 3);
        assert_eq!(data.test_sets.len(), 3);
        assert_eq!(data.test_sets[0].len(), 30);
        let c = &data.clients[1];
        assert_eq!(c.sizes(), vec![40, 40, 40]);
        assert_eq!(c.periods[2].ids[5].as_str(), "client001/p3/5");
        assert!((c.class_prior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_drift_data(&small()).unwrap(), gen_drift_data(&small()).unwrap());
        let other = SyntheticDriftConfig { seed: 9, ..small() };
        assert_ne!(gen_drift_data(&small()).unwrap(), gen_drift_data(&other).unwrap());
    }

    #[test]
    fn zero_drift_keeps_class_means() {
        let cfg = SyntheticDriftConfig { drift_angle: 0.0, ..small() };
        for c in 0..cfg.classes {
            assert_eq!(cfg.class_mean(c, 0), cfg.class_mean(c, 4));
        }
        let drifting = small();
        assert_ne!(drifting.class_mean(0, 0), drifting.class_mean(0, 1));
    }

    #[test]
    fn huge_concentration_gives_near_identical_priors() {
        let cfg = SyntheticDriftConfig { concentration: 1e6, ..small() };
        let data = gen_drift_data(&cfg).unwrap();
        for c in &data.clients {
            for p in &c.class_prior {
                assert!((p - 0.2).abs() < 0.01, "{p}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(gen_drift_data(&SyntheticDriftConfig { drift_angle: 4.0, ..small() }).is_err());
        assert!(gen_drift_data(&SyntheticDriftConfig { clients: 0, ..small() }).is_err());
    }

    #[test]
    fn select_ids_keeps_dataset_order() {
        let data = gen_drift_data(&small()).unwrap();
        let p = &data.clients[0].periods[0];
        let picked = p.select_ids(&[p.ids[7].clone(), p.ids[2].clone()]);
        assert_eq!(picked.ids, vec![p.ids[2].clone(), p.ids[7].clone()]);
        assert_eq!(picked.features.row(1), p.features.row(7));
    }
}
