//! Synthetic clustered regression data.
//!
//! Inputs are isotropic Gaussian clusters whose means sit on a sphere;
//! each cluster carries a scalar regression target. This is the controlled
//! environment used by the kernel study and the grokking demo.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::SampleId;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataConfig {
    pub num_clusters: usize,
    pub dim: usize,
    pub samples_per_cluster: usize,
    /// Cluster means are drawn uniformly on a sphere of this radius.
    pub mean_radius: f64,
    /// Isotropic standard deviation within each cluster.
    pub cluster_std: f64,
    /// Standard deviation of per-sample noise added to the cluster target.
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for ClusterDataConfig {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            dim: 100,
            samples_per_cluster: 25,
            mean_radius: 5.0,
            cluster_std: 1.0,
            target_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: SampleId,
    pub cluster: usize,
    pub features: Array1<T>,
    pub target: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

/// A dense (ids, inputs, targets) view ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<T> {
    pub ids: Vec<SampleId>,
    pub inputs: Array2<T>,
    pub targets: Vec<T>,
}

impl<T: Real> Dataset<T> {
    pub fn generate(cfg: &ClusterDataConfig) -> Result<Self> {
        if cfg.num_clusters == 0 || cfg.dim == 0 || cfg.samples_per_cluster == 0 {
            return Err(Error::InvalidConfig(
                "cluster data needs at least one cluster, one dimension, one sample".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

        let mut samples = Vec::with_capacity(cfg.num_clusters * cfg.samples_per_cluster);
        for cluster in 0..cfg.num_clusters {
            // Mean: normalized Gaussian direction scaled to the sphere radius.
            let raw: Vec<f64> = (0..cfg.dim).map(|_| normal(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let mean: Vec<f64> = raw.iter().map(|v| v / norm * cfg.mean_radius).collect();
            let base_target = normal(&mut rng);

            for s in 0..cfg.samples_per_cluster {
                let features = Array1::from_iter(
                    mean.iter()
                        .map(|m| T::of(m + cfg.cluster_std * normal(&mut rng))),
                );
                let target = T::of(base_target + cfg.target_noise * normal(&mut rng));
                samples.push(Sample {
                    id: SampleId::new(format!("c{cluster:02}-s{s:04}")),
                    cluster,
                    features,
                    target,
                });
            }
        }
        Ok(Self { samples })
    }

    /// Split each cluster: the first `train_fraction` of its samples train,
    /// the rest are held out. Deterministic by construction.
    pub fn split(&self, train_fraction: f64) -> Result<(LabeledSet<T>, LabeledSet<T>)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::ThresholdOutOfRange {
                value: train_fraction,
                range: "[0, 1]",
            });
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        let mut by_cluster: Vec<Vec<&Sample<T>>> = Vec::new();
        for s in &self.samples {
            if s.cluster >= by_cluster.len() {
                by_cluster.resize_with(s.cluster + 1, Vec::new);
            }
            by_cluster[s.cluster].push(s);
        }
        for members in &by_cluster {
            let k = (members.len() as f64 * train_fraction).round() as usize;
            for (i, s) in members.iter().enumerate() {
                if i < k {
                    train.push(*s);
                } else {
                    held.push(*s);
                }
            }
        }
        Ok((Self::pack(&train), Self::pack(&held)))
    }

    pub fn as_labeled(&self) -> LabeledSet<T> {
        Self::pack(&self.samples.iter().collect::<Vec<_>>())
    }

    fn pack(samples: &[&Sample<T>]) -> LabeledSet<T> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut inputs = Array2::zeros((samples.len(), dim));
        let mut ids = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            inputs.row_mut(i).assign(&s.features);
            ids.push(s.id.clone());
            targets.push(s.target);
        }
        LabeledSet {
            ids,
            inputs,
            targets,
        }
    }
}

impl<T: Real> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Population standard deviation of the targets, used as the label scale
    /// for the surrogate accuracy rule.
    pub fn target_scale(&self) -> T {
        if self.targets.is_empty() {
            return T::zero();
        }
        let n = T::of(self.targets.len() as f64);
        let mean = self.targets.iter().copied().sum::<T>() / n;
        let var = self
            .targets
            .iter()
            .map(|t| (*t - mean) * (*t - mean))
            .sum::<T>()
            / n;
        var.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ClusterDataConfig {
        ClusterDataConfig {
            num_clusters: 3,
            dim: 5,
            samples_per_cluster: 4,
            seed: 9,
            ..ClusterDataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::<f64>::generate(&small_cfg()).unwrap();
        let b = Dataset::<f64>::generate(&small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cluster_means_sit_near_sphere() {
        let cfg = ClusterDataConfig {
            num_clusters: 4,
            dim: 50,
            samples_per_cluster: 40,
            seed: 1,
            ..ClusterDataConfig::default()
        };
        let ds = Dataset::<f64>::generate(&cfg).unwrap();
        for cluster in 0..4 {
            let members: Vec<_> = ds.samples.iter().filter(|s| s.cluster == cluster).collect();
            let mut mean = vec![0.0; cfg.dim];
            for s in &members {
                for (m, v) in mean.iter_mut().zip(s.features.iter()) {
                    *m += v / members.len() as f64;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Empirical mean of 40 unit-variance points: within ~3/sqrt(40) of 5.
            assert!((norm - 5.0).abs() < 1.0, "cluster mean norm {norm}");
        }
    }

    #[test]
    fn split_respects_fraction_per_cluster() {
        let ds = Dataset::<f64>::generate(&small_cfg()).unwrap();
        let (train, held) = ds.split(0.75).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(held.len(), 3);
    }
}
