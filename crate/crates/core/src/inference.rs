//! Zero-shot attribution and zero-day scoring.

use serde::{Deserialize, Serialize};

use crate::encoding::{l2_norm, PrototypeSet};
use crate::error::{Error, Result};
use crate::projection::{project_values, FeatureVector, ProjectionMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroDayAssessment {
    pub attributed_concept: String,
    pub confidence: f64,
    pub zds: f64,
    pub disagreement_used: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisagreementMode {
    /// Stored prototype disagreement as is.
    #[default]
    Raw,
    /// Disagreement rescaled to [0, 1] over the prototype set.
    MinMax,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "cosine operands",
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Nearest fused prototype by cosine. Exact ties go to the smallest id.
pub fn attribute(z_hat: &[f64], prototypes: &PrototypeSet) -> Result<(String, f64)> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set"));
    }
    if l2_norm(z_hat) == 0.0 {
        return Err(Error::Abstain);
    }
    let mut best: Option<(&str, f64)> = None;
    for p in prototypes.iter() {
        let c = cosine_similarity(z_hat, &p.fused.values)?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((&p.concept_id, c));
        }
    }
    let (id, c) = best.expect("non-empty prototype set");
    Ok((id.to_owned(), c))
}

pub fn zero_day_score(disagreement: f64, confidence: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    if !(disagreement >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "disagreement must be >= 0, got {disagreement}"
        )));
    }
    Ok(lambda * disagreement + (1.0 - lambda) * (1.0 - confidence))
}

/// Disagreement of `concept_id` under `mode`.
pub fn scored_disagreement(prototypes: &PrototypeSet, concept_id: &str, mode: DisagreementMode) -> Result<f64> {
    let raw = prototypes
        .get(concept_id)
        .ok_or_else(|| Error::UnknownLabel(concept_id.to_owned()))?
        .disagreement;
    Ok(match mode {
        DisagreementMode::Raw => raw,
        DisagreementMode::MinMax => {
            let (lo, hi) = prototypes
                .iter()
                .map(|p| p.disagreement)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
            if hi > lo {
                (raw - lo) / (hi - lo)
            } else {
                0.0
            }
        }
    })
}

pub fn assess(
    x: &FeatureVector,
    w: &ProjectionMatrix,
    prototypes: &PrototypeSet,
    lambda: f64,
    mode: DisagreementMode,
) -> Result<ZeroDayAssessment> {
    if w.k() != prototypes.dim() {
        return Err(Error::DimensionMismatch {
            expected: prototypes.dim(),
            actual: w.k(),
            context: "projection rows vs prototype dimension",
        });
    }
    let z_hat = project_values(w, &x.values)?;
    let (concept, confidence) = attribute(&z_hat, prototypes)?;
    let d = scored_disagreement(prototypes, &concept, mode)?;
    let zds = zero_day_score(d, confidence, lambda)?;
    Ok(ZeroDayAssessment {
        attributed_concept: concept,
        confidence,
        zds,
        disagreement_used: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{AttackPrototype, SemanticEmbedding};
    use nalgebra::DMatrix;

    fn proto(id: &str, members: &[&[f64]]) -> AttackPrototype {
        AttackPrototype::from_members(
            id,
            members
                .iter()
                .map(|v| SemanticEmbedding::new("t", v.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.707107).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroNorm)
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn attribute_examples() {
        let set = PrototypeSet::new(vec![
            proto("a", &[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]),
            proto("b", &[&[0.0, 2.0, 0.0], &[0.0, 2.0, 0.0]]),
        ])
        .unwrap();
        assert_eq!(attribute(&[0.0, 2.0, 0.0], &set).unwrap(), ("b".to_owned(), 1.0));
        let (id, c) = attribute(&[0.2, 0.9, 0.1], &set).unwrap();
        let (id7, c7) = attribute(&[1.4, 6.3, 0.7], &set).unwrap();
        assert_eq!(id, id7);
        assert!((c - c7).abs() < 1e-15);
        assert!(matches!(attribute(&[0.0; 3], &set), Err(Error::Abstain)));
        assert!(matches!(
            attribute(&[1.0; 3], &PrototypeSet::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let set = PrototypeSet::new(vec![
            proto("zeta", &[&[0.0, 1.0], &[0.0, 1.0]]),
            proto("alpha", &[&[1.0, 0.0], &[1.0, 0.0]]),
        ])
        .unwrap();
        assert_eq!(attribute(&[1.0, 1.0], &set).unwrap().0, "alpha");
    }

    #[test]
    fn zds_examples() {
        assert_eq!(zero_day_score(0.7, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(zero_day_score(0.7, 0.3, 1.0).unwrap(), 0.7);
        assert!((zero_day_score(0.2, 0.9, 0.5).unwrap() - 0.15).abs() < 1e-15);
        assert!(zero_day_score(0.2, 0.9, 1.5).is_err());
        assert!(zero_day_score(0.2, 0.9, -0.1).is_err());
    }

    #[test]
    fn assess_examples() {
        let set = PrototypeSet::new(vec![
            proto("a", &[&[1.0, 0.0], &[1.0, 0.0]]),
            proto("b", &[&[0.0, 1.0], &[0.0, 2.0]]),
        ])
        .unwrap();
        let id = ProjectionMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let x = FeatureVector::new(vec![1.0, 0.0], None).unwrap();
        for lambda in [0.0, 0.3, 1.0] {
            let a = assess(&x, &id, &set, lambda, DisagreementMode::Raw).unwrap();
            assert_eq!(a.attributed_concept, "a");
            assert_eq!(a.zds, 0.0);
        }

        // projection orthogonal to the only prototype
        let single = PrototypeSet::new(vec![proto("a", &[&[1.0, 0.0], &[1.0, 0.0]])]).unwrap();
        let y = FeatureVector::new(vec![0.0, 1.0], None).unwrap();
        let a = assess(&y, &id, &single, 0.0, DisagreementMode::Raw).unwrap();
        assert_eq!(a.zds, 1.0);

        let zero = FeatureVector::new(vec![0.0, 0.0], None).unwrap();
        assert!(matches!(
            assess(&zero, &id, &set, 0.5, DisagreementMode::Raw),
            Err(Error::Abstain)
        ));
    }

    #[test]
    fn lower_confidence_and_higher_disagreement_raise_zds() {
        let a = zero_day_score(0.1, 0.9, 0.5).unwrap();
        let b = zero_day_score(0.4, 0.6, 0.5).unwrap();
        assert!(b > a);
    }

    #[test]
    fn min_max_mode_rescales() {
        let set = PrototypeSet::new(vec![
            proto("a", &[&[1.0, 0.0], &[1.0, 0.0]]),
            proto("b", &[&[0.0, 1.0], &[0.0, 2.0]]),
            proto("c", &[&[0.0, 1.0], &[0.0, 3.0]]),
        ])
        .unwrap();
        assert_eq!(scored_disagreement(&set, "a", DisagreementMode::MinMax).unwrap(), 0.0);
        assert_eq!(scored_disagreement(&set, "b", DisagreementMode::MinMax).unwrap(), 0.5);
        assert_eq!(scored_disagreement(&set, "c", DisagreementMode::MinMax).unwrap(), 1.0);
        assert_eq!(scored_disagreement(&set, "c", DisagreementMode::Raw).unwrap(), 2.0);
    }
}
