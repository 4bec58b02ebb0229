//! Synthetic retrieval data.
//!
//! Each instance draws two latent prototype directions (its "modes"); every
//! sample of that instance emits local features that alternate between the
//! two modes plus isotropic noise. Mean pooling blurs the two modes
//! together, while second-order and codebook pooling can keep them apart,
//! which is exactly the regime the training harness is meant to probe.
//!
//! Samples are split 50/50 into train and eval halves per instance, so
//! every eval query has at least one same-instance gallery match.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pooling::FeatureSet;
use crate::rng::SeedSplitter;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Generation parameters for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_instances: usize,
    pub samples_per_instance: usize,
    /// Raw feature dimension (before the model's reduction map).
    pub raw_dim: usize,
    /// Local feature locations per sample.
    pub locations: usize,
    /// Scale of the instance prototype directions.
    pub cluster_spread: f64,
    /// Scale of the per-location isotropic noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances < 2 {
            return Err(Error::input("dataset", "need at least 2 instances"));
        }
        if self.samples_per_instance < 2 {
            return Err(Error::input("dataset", "need at least 2 samples per instance"));
        }
        if self.raw_dim == 0 || self.locations == 0 {
            return Err(Error::input("dataset", "raw_dim and locations must be positive"));
        }
        Ok(())
    }
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_instances: 16,
            samples_per_instance: 4,
            raw_dim: 128,
            locations: 16,
            cluster_spread: 1.0,
            noise_scale: 0.4,
            seed: 0,
        }
    }
}

/// One labelled sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FeatureSet,
    pub instance: u64,
}

/// A generated dataset, already split into train and eval halves.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn train_labels(&self) -> Vec<u64> {
        self.train.iter().map(|s| s.instance).collect()
    }
}

/// Generates the dataset described by `spec`, deterministically.
///
/// Per instance: two prototype directions scaled by `cluster_spread`; per
/// sample: location `m` takes prototype `m mod 2` plus
/// `noise_scale`-scaled Gaussian noise. With `noise_scale = 0` all samples
/// of an instance are identical.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let splitter = SeedSplitter::new(spec.seed);
    let mut rng = splitter.stream("dataset");
    let d = spec.raw_dim;

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for inst in 0..spec.n_instances {
        // the instance's two latent modes
        let modes: [Vec<f64>; 2] = [unit_gaussian(d, &mut rng), unit_gaussian(d, &mut rng)];
        for s in 0..spec.samples_per_instance {
            let mut cols = Matrix::zeros(d, spec.locations);
            for m in 0..spec.locations {
                let proto = &modes[m % 2];
                let mut col = vec![0.0; d];
                for k in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    col[k] = spec.cluster_spread * proto[k] + spec.noise_scale * noise;
                }
                cols.set_col(m, &col);
            }
            let sample = Sample {
                features: FeatureSet::new(cols)?,
                instance: inst as u64,
            };
            // 50/50 split by sample parity
            if s % 2 == 0 {
                train.push(sample);
            } else {
                eval.push(sample);
            }
        }
    }
    Ok(Dataset { train, eval })
}

fn unit_gaussian(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    crate::linalg::l2_normalize_in_place(&mut v, crate::linalg::DEFAULT_EPS);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, seed: u64) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_instances: 2,
            samples_per_instance: 4,
            raw_dim: 8,
            locations: 6,
            cluster_spread: 4.0,
            noise_scale: noise,
            seed,
        }
    }

    #[test]
    fn zero_noise_makes_samples_identical() {
        let ds = generate_dataset(&spec(0.0, 1)).unwrap();
        let first = &ds.train[0];
        let second = ds
            .eval
            .iter()
            .find(|s| s.instance == first.instance)
            .unwrap();
        assert_eq!(
            first.features.columns().data(),
            second.features.columns().data()
        );
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_dataset(&spec(0.3, 7)).unwrap();
        let b = generate_dataset(&spec(0.3, 7)).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.features.columns().data(), y.features.columns().data());
            assert_eq!(x.instance, y.instance);
        }
    }

    #[test]
    fn separated_instances_are_nearest_centroid_separable() {
        // spread >> noise: mean-pooled raw features classify perfectly
        let ds = generate_dataset(&spec(0.05, 3)).unwrap();
        let mean_pool = |s: &Sample| -> Vec<f64> {
            let d = s.features.dim();
            let mut acc = vec![0.0; d];
            for m in 0..s.features.count() {
                for (a, v) in acc.iter_mut().zip(s.features.columns().col(m)) {
                    *a += v;
                }
            }
            let inv = 1.0 / s.features.count() as f64;
            acc.iter().map(|v| v * inv).collect()
        };
        // centroids from train means
        let mut centroids: Vec<(u64, Vec<f64>)> = Vec::new();
        for inst in 0..2u64 {
            let members: Vec<Vec<f64>> = ds
                .train
                .iter()
                .filter(|s| s.instance == inst)
                .map(mean_pool)
                .collect();
            let d = members[0].len();
            let mut c = vec![0.0; d];
            for m in &members {
                for (a, v) in c.iter_mut().zip(m) {
                    *a += v;
                }
            }
            for a in c.iter_mut() {
                *a /= members.len() as f64;
            }
            centroids.push((inst, c));
        }
        let sq = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        for s in ds.eval.iter() {
            let p = mean_pool(s);
            let nearest = centroids
                .iter()
                .min_by(|(_, c1), (_, c2)| sq(&p, c1).partial_cmp(&sq(&p, c2)).unwrap())
                .unwrap()
                .0;
            assert_eq!(nearest, s.instance);
        }
    }

    #[test]
    fn split_gives_every_instance_both_halves() {
        let ds = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        for inst in 0..16u64 {
            assert!(ds.train.iter().any(|s| s.instance == inst));
            assert!(ds.eval.iter().any(|s| s.instance == inst));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(0.1, 1);
        s.n_instances = 1;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec(0.1, 1);
        s.samples_per_instance = 1;
        assert!(generate_dataset(&s).is_err());
    }
}
