//! Synthetic telemetry with a planted feature-to-prototype map.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::config::ExperimentConfig;
use crate::encoding::PrototypeSet;
use crate::error::{Error, Result};
use crate::projection::{FeatureVector, LocalDataset, ProjectionMatrix, Scaler};
use crate::rng::{gaussian_vec, keyed_rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TestSample {
    pub sample_id: usize,
    pub features: FeatureVector,
    pub is_novel: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Standardized, labeled, seen concepts only.
    pub train: Vec<FeatureVector>,
    /// Standardized; every novel sample plus the held-out share of seen ones.
    pub test: Vec<TestSample>,
    pub scaler: Scaler,
    /// Planted map on standardized features: `planted · g_a = z_a`.
    pub planted: ProjectionMatrix,
    /// Largest entry of `planted · G − Z`.
    pub planting_residual: f64,
}

/// Draws one generator per concept inside the span of the prototypes,
/// rendered isometrically into feature space, then samples around each
/// generator with Gaussian noise.
pub fn generate_synthetic_dataset(cfg: &ExperimentConfig, prototypes: &PrototypeSet) -> Result<SyntheticData> {
    let (d, k) = (cfg.dimensions.d, cfg.dimensions.k);
    let c = prototypes.len();
    if c == 0 {
        return Err(Error::Empty("prototype set"));
    }
    if prototypes.dim() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: prototypes.dim(),
            context: "prototype dimension vs config k",
        });
    }
    if c > d.min(k) {
        return Err(Error::InvalidArgument(format!(
            "{c} concepts cannot be planted exactly with d = {d}, k = {k}; raise both to at least {c}"
        )));
    }
    let novel: BTreeSet<&str> = cfg.concepts.novel.iter().map(String::as_str).collect();
    for id in &novel {
        if prototypes.get(id).is_none() {
            return Err(Error::UnknownLabel((*id).to_owned()));
        }
    }
    let seed = cfg.seed.to_string();

    let mut z = DMatrix::zeros(k, c);
    for (j, p) in prototypes.iter().enumerate() {
        z.column_mut(j).copy_from_slice(&p.fused.values);
    }
    let v = z.clone().qr().q();
    let u_raw = DMatrix::from_column_slice(d, c, &gaussian_vec(&mut keyed_rng(&[&seed, "render"]), d * c));
    let u = u_raw.qr().q();
    let mean_norm = prototypes.iter().map(|p| p.fused.norm()).sum::<f64>() / c as f64;
    let g = (&u * v.transpose() * &z) * ((d as f64).sqrt() / mean_norm);

    let pinv = g
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let planted_raw = &z * pinv;
    let planting_residual = (&planted_raw * &g - &z).amax();

    let mean_d = prototypes.iter().map(|p| p.disagreement).sum::<f64>() / c as f64;
    let n = cfg.data.samples_per_concept;
    let n_test = (cfg.data.test_fraction * n as f64).round() as usize;
    let mut train = Vec::new();
    let mut test_raw = Vec::new();
    for (j, p) in prototypes.iter().enumerate() {
        let id = p.concept_id.as_str();
        let sigma = if cfg.data.noise_scales_with_disagreement && mean_d > 0.0 {
            cfg.data.noise_std * p.disagreement / mean_d
        } else {
            cfg.data.noise_std
        };
        let mut rng = keyed_rng(&[&seed, "sample", id]);
        let samples: Vec<FeatureVector> = (0..n)
            .map(|_| {
                let noise = gaussian_vec(&mut rng, d);
                let values = g.column(j).iter().zip(&noise).map(|(gi, e)| gi + sigma * e).collect();
                FeatureVector::labeled(values, id)
            })
            .collect::<Result<_>>()?;
        let is_novel = novel.contains(id);
        let mut held = vec![is_novel; n];
        if !is_novel {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut keyed_rng(&[&seed, "split", id]));
            for &i in &idx[..n_test] {
                held[i] = true;
            }
        }
        for (s, h) in samples.into_iter().zip(held) {
            if h {
                test_raw.push((s, is_novel));
            } else {
                train.push(s);
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }

    let scaler = Scaler::fit(&train)?;
    for s in train.iter_mut() {
        scaler.apply(s)?;
    }
    let mut test = Vec::with_capacity(test_raw.len());
    for (sample_id, (mut s, is_novel)) in test_raw.into_iter().enumerate() {
        scaler.apply(&mut s)?;
        test.push(TestSample {
            sample_id,
            features: s,
            is_novel,
        });
    }
    let scales = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&scaler.scales));
    let planted = ProjectionMatrix::new(planted_raw * scales)?;
    Ok(SyntheticData {
        train,
        test,
        scaler,
        planted,
        planting_residual,
    })
}

const PARTITION_RETRIES: usize = 100;

/// Dirichlet label-skew split of `pool` over `n` clients.
pub fn partition_non_iid(pool: &[FeatureVector], n: usize, beta: f64, seed: u64) -> Result<Vec<LocalDataset>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    if pool.len() < n {
        return Err(Error::InvalidArgument(format!(
            "pool of {} samples cannot cover {n} clients",
            pool.len()
        )));
    }
    let mut labels: Vec<&str> = pool.iter().map(|s| s.label.as_deref().unwrap_or("")).collect();
    labels.sort_unstable();
    labels.dedup();
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let seed = seed.to_string();

    for attempt in 0..PARTITION_RETRIES {
        let attempt = attempt.to_string();
        let mut owner = vec![0usize; pool.len()];
        for label in &labels {
            let mut idx: Vec<usize> = (0..pool.len())
                .filter(|&i| pool[i].label.as_deref().unwrap_or("") == *label)
                .collect();
            let mut rng = keyed_rng(&[&seed, "partition", &attempt, label]);
            idx.shuffle(&mut rng);
            let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|x| *x /= total);
            } else {
                p = vec![1.0 / n as f64; n];
            }
            let mut start = 0;
            let mut acc = 0.0;
            for (client, share) in p.iter().enumerate() {
                acc += share;
                let end = if client + 1 == n {
                    idx.len()
                } else {
                    ((acc * idx.len() as f64).round() as usize).clamp(start, idx.len())
                };
                for &i in &idx[start..end] {
                    owner[i] = client;
                }
                start = end;
            }
        }
        let mut parts: Vec<Vec<FeatureVector>> = vec![Vec::new(); n];
        for (i, s) in pool.iter().enumerate() {
            parts[owner[i]].push(s.clone());
        }
        if parts.iter().all(|p| !p.is_empty()) {
            return Ok(parts
                .into_iter()
                .enumerate()
                .map(|(i, s)| LocalDataset::new(i, s))
                .collect());
        }
    }
    Err(Error::InvalidArgument(format!(
        "no partition with every client non-empty after {PARTITION_RETRIES} draws; raise beta or lower the client count"
    )))
}
