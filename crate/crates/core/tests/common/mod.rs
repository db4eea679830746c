#![allow(dead_code)]

use fedsem::encoding::{AttackPrototype, PrototypeSet, SemanticEmbedding};
use fedsem::projection::{FeatureVector, LocalDataset};
use fedsem::rng::{gaussian_vec, keyed_rng};

/// `c` random prototypes of dimension `k`, ids `c0..`.
pub fn random_prototypes(c: usize, k: usize, key: &str) -> PrototypeSet {
    let items = (0..c)
        .map(|j| {
            let mut rng = keyed_rng(&[key, "proto", &j.to_string()]);
            let members = ["e0", "e1", "e2"]
                .iter()
                .map(|e| SemanticEmbedding::new(*e, gaussian_vec(&mut rng, k)).unwrap())
                .collect();
            AttackPrototype::from_members(format!("c{j}"), members).unwrap()
        })
        .collect();
    PrototypeSet::new(items).unwrap()
}

/// `per_concept` samples around a random centre for each prototype.
pub fn random_dataset(protos: &PrototypeSet, d: usize, per_concept: usize, noise: f64, key: &str) -> LocalDataset {
    let mut samples = Vec::new();
    for p in protos.iter() {
        let mut rng = keyed_rng(&[key, "data", &p.concept_id]);
        let centre = gaussian_vec(&mut rng, d);
        for _ in 0..per_concept {
            let e = gaussian_vec(&mut rng, d);
            let v = centre.iter().zip(&e).map(|(c, e)| c + noise * e).collect();
            samples.push(FeatureVector::labeled(v, p.concept_id.clone()).unwrap());
        }
    }
    LocalDataset::new(0, samples)
}
