//! Attack behaviors injected between clients and the server, and
//! inference-time evasion crafting.

use std::fmt;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{AttackEvent, ClientId, ReportInterceptor, RoundContext};
use crate::projection::{FeatureVector, ProjectionMatrix};
use crate::rng::{gaussian_vec, keyed_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    PoisonRandom,
    PoisonSignflip,
    PoisonScale,
    LieAboutLoss,
    Dropout,
    Evasion,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::PoisonRandom => "poison_random",
            AttackKind::PoisonSignflip => "poison_signflip",
            AttackKind::PoisonScale => "poison_scale",
            AttackKind::LieAboutLoss => "lie_about_loss",
            AttackKind::Dropout => "dropout",
            AttackKind::Evasion => "evasion",
        }
    }

    pub fn is_poison(self) -> bool {
        matches!(
            self,
            AttackKind::PoisonRandom | AttackKind::PoisonSignflip | AttackKind::PoisonScale
        )
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_steps() -> usize {
    50
}

fn default_step_size() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub kind: AttackKind,
    /// For evasion, the fraction of seen test samples that are crafted.
    #[serde(alias = "fraction")]
    pub fraction_of_clients: f64,
    /// For evasion, the L2 perturbation budget.
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
    /// poison_random only: magnitude is a multiple of the honest update's
    /// Frobenius norm.
    #[serde(default)]
    pub relative_magnitude: bool,
    /// First round in which the attack is active.
    #[serde(default)]
    pub start_round: usize,
    /// Evasion target concept; its fused prototype plays the benign embedding.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
}

impl AttackScenario {
    pub fn new(kind: AttackKind, fraction_of_clients: f64, magnitude: f64, seed: u64) -> Self {
        Self {
            kind,
            fraction_of_clients,
            magnitude,
            seed,
            relative_magnitude: false,
            start_round: 0,
            target: None,
            steps: default_steps(),
            step_size: default_step_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction_of_clients) {
            return Err(Error::Config(format!(
                "{}: fraction must be in [0, 1], got {}",
                self.kind, self.fraction_of_clients
            )));
        }
        if !(self.magnitude >= 0.0) {
            return Err(Error::Config(format!(
                "{}: magnitude must be >= 0, got {}",
                self.kind, self.magnitude
            )));
        }
        if self.kind == AttackKind::Evasion {
            if self.target.is_none() {
                return Err(Error::Config("evasion: target concept is required".into()));
            }
            if !(self.step_size > 0.0) {
                return Err(Error::Config("evasion: step_size must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// `ceil(fraction · n)` clients, at least one when fraction > 0, drawn by
/// a seeded shuffle and returned in ascending order.
pub fn select_clients(n: usize, fraction: f64, seed: u64, kind: AttackKind) -> Vec<ClientId> {
    let count = if fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    };
    let mut ids: Vec<ClientId> = (0..n).collect();
    ids.shuffle(&mut keyed_rng(&[&seed.to_string(), "select", kind.as_str()]));
    let mut chosen = ids[..count.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn poison_update(w: &ProjectionMatrix, kind: AttackKind, magnitude: f64, seed: u64) -> Result<ProjectionMatrix> {
    if !(magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "magnitude must be >= 0, got {magnitude}"
        )));
    }
    match kind {
        AttackKind::PoisonRandom => {
            if magnitude == 0.0 {
                return Ok(w.clone());
            }
            let noise = gaussian_vec(&mut keyed_rng(&[&seed.to_string(), "poison"]), w.k() * w.d());
            let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
            let noise = nalgebra::DMatrix::from_row_slice(w.k(), w.d(), &noise) * (magnitude / norm);
            ProjectionMatrix::new(w.matrix() + noise)
        }
        AttackKind::PoisonSignflip => ProjectionMatrix::new(w.matrix() * -magnitude),
        AttackKind::PoisonScale => ProjectionMatrix::new(w.matrix() * magnitude),
        other => Err(Error::UnsupportedAttack(other.as_str())),
    }
}

/// Squared distance between the projection of `x` and the target.
pub fn evasion_objective(w: &ProjectionMatrix, x: &[f64], target: &[f64]) -> f64 {
    let r = w.matrix() * DVector::from_column_slice(x) - DVector::from_column_slice(target);
    r.norm_squared()
}

/// Projected gradient descent toward `z_benign`, keeping the perturbation
/// inside an L2 ball of radius `budget` around `x_mal`.
pub fn craft_evasion(
    x_mal: &FeatureVector,
    w: &ProjectionMatrix,
    z_benign: &[f64],
    steps: usize,
    step_size: f64,
    budget: f64,
) -> Result<FeatureVector> {
    if !(budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be >= 0, got {budget}")));
    }
    if !(step_size > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be > 0, got {step_size}"
        )));
    }
    if x_mal.dim() != w.d() || z_benign.len() != w.k() {
        return Err(Error::DimensionMismatch {
            expected: w.d(),
            actual: x_mal.dim(),
            context: "evasion input",
        });
    }
    let origin = DVector::from_column_slice(&x_mal.values);
    let target = DVector::from_column_slice(z_benign);
    let wm = w.matrix();
    let mut x = origin.clone();
    for _ in 0..steps {
        let grad = wm.tr_mul(&(wm * &x - &target)) * 2.0;
        x -= grad * step_size;
        let delta = &x - &origin;
        let norm = delta.norm();
        if norm > budget {
            x = &origin + delta * (budget / norm);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evasion iterate"));
        }
    }
    FeatureVector::new(x.as_slice().to_vec(), x_mal.label.clone())
}

fn event_seed(scenario_seed: u64, round: usize, client: ClientId) -> u64 {
    keyed_rng(&[&scenario_seed.to_string(), &round.to_string(), &client.to_string()]).next_u64()
}

/// Transforms the selected clients' reports for this round. Poisoned
/// clients report the loss of the matrix they actually submit.
pub fn apply_scenario(
    ctx: &mut RoundContext<'_>,
    scenario: &AttackScenario,
    selected: &[ClientId],
) -> Result<Vec<AttackEvent>> {
    let mut events = Vec::new();
    if ctx.round < scenario.start_round || scenario.kind == AttackKind::Evasion {
        return Ok(events);
    }
    for &id in selected {
        let Some(slot) = ctx.updates.get_mut(id) else {
            return Err(Error::InvalidArgument(format!("selected client {id} out of range")));
        };
        let Some(mut update) = slot.take() else {
            continue;
        };
        let mut magnitude = scenario.magnitude;
        match scenario.kind {
            AttackKind::Dropout => {
                events.push(AttackEvent {
                    round: ctx.round,
                    client_id: Some(id),
                    kind: scenario.kind.as_str().into(),
                    magnitude,
                });
                continue;
            }
            AttackKind::LieAboutLoss => update.loss *= magnitude,
            kind => {
                if kind == AttackKind::PoisonRandom && scenario.relative_magnitude {
                    magnitude *= update.weights.frobenius_norm();
                }
                update.weights = poison_update(
                    &update.weights,
                    kind,
                    magnitude,
                    event_seed(scenario.seed, ctx.round, id),
                )?;
                update.loss = ctx.evaluate(id, &update.weights)?;
            }
        }
        ctx.updates[id] = Some(update);
        events.push(AttackEvent {
            round: ctx.round,
            client_id: Some(id),
            kind: scenario.kind.as_str().into(),
            magnitude,
        });
    }
    Ok(events)
}

/// Applies a list of scenarios in order, each to its own client selection.
#[derive(Clone, Debug)]
pub struct AdversaryInjector {
    scenarios: Vec<(AttackScenario, Vec<ClientId>)>,
}

impl AdversaryInjector {
    pub fn new(scenarios: &[AttackScenario], clients: usize) -> Result<Self> {
        let mut out = Vec::new();
        for s in scenarios {
            s.validate()?;
            if s.kind == AttackKind::Evasion {
                continue;
            }
            let selected = select_clients(clients, s.fraction_of_clients, s.seed, s.kind);
            out.push((s.clone(), selected));
        }
        Ok(Self { scenarios: out })
    }

    pub fn selections(&self) -> impl Iterator<Item = (&AttackScenario, &[ClientId])> {
        self.scenarios.iter().map(|(s, c)| (s, c.as_slice()))
    }

    /// Clients touched by any update-level scenario.
    pub fn compromised(&self) -> Vec<ClientId> {
        let mut ids: Vec<ClientId> = self.scenarios.iter().flat_map(|(_, c)| c.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

impl ReportInterceptor for AdversaryInjector {
    fn intercept(&mut self, ctx: &mut RoundContext<'_>) -> Result<Vec<AttackEvent>> {
        let mut events = Vec::new();
        for (scenario, selected) in &self.scenarios {
            events.extend(apply_scenario(ctx, scenario, selected)?);
        }
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn w() -> ProjectionMatrix {
        ProjectionMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap()
    }

    #[test]
    fn poison_examples() {
        assert_eq!(poison_update(&w(), AttackKind::PoisonRandom, 0.0, 1).unwrap(), w());
        let flipped = poison_update(&w(), AttackKind::PoisonSignflip, 1.0, 1).unwrap();
        assert_eq!(flipped.matrix(), &(w().matrix() * -1.0));
        let p = poison_update(&w(), AttackKind::PoisonRandom, 5.0, 1).unwrap();
        assert!(((p.matrix() - w().matrix()).norm() - 5.0).abs() < 1e-9);
        let s = poison_update(&w(), AttackKind::PoisonScale, 3.0, 1).unwrap();
        assert_eq!(s.matrix(), &(w().matrix() * 3.0));
        assert!(matches!(
            poison_update(&w(), AttackKind::Dropout, 1.0, 1),
            Err(Error::UnsupportedAttack("dropout"))
        ));
    }

    #[test]
    fn selection_uses_ceiling_rule() {
        assert!(select_clients(10, 0.0, 3, AttackKind::Dropout).is_empty());
        assert_eq!(select_clients(10, 0.5, 3, AttackKind::Dropout).len(), 5);
        assert_eq!(select_clients(10, 0.2, 3, AttackKind::PoisonRandom).len(), 2);
        assert_eq!(select_clients(3, 0.01, 3, AttackKind::Dropout).len(), 1);
        assert_eq!(select_clients(4, 1.0, 3, AttackKind::Dropout), vec![0, 1, 2, 3]);
        assert_eq!(
            select_clients(10, 0.3, 9, AttackKind::Dropout),
            select_clients(10, 0.3, 9, AttackKind::Dropout)
        );
    }

    #[test]
    fn evasion_trivial_cases() {
        let id = ProjectionMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let x = FeatureVector::new(vec![0.4, -0.2], None).unwrap();
        assert_eq!(craft_evasion(&x, &id, &[0.4, -0.2], 10, 0.1, 1.0).unwrap(), x);
        assert_eq!(craft_evasion(&x, &id, &[3.0, 3.0], 0, 0.1, 1.0).unwrap(), x);
    }

    #[test]
    fn evasion_reaches_closed_form_optimum() {
        let w = ProjectionMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 1.5]).unwrap();
        let z = [1.0, -2.0];
        let x = FeatureVector::new(vec![0.0, 0.0], None).unwrap();
        let out = craft_evasion(&x, &w, &z, 2000, 0.05, f64::INFINITY).unwrap();
        let inv = w.matrix().clone().try_inverse().unwrap();
        let x_star = inv * DVector::from_column_slice(&z);
        assert!(evasion_objective(&w, &out.values, &z).sqrt() < 1e-6);
        assert!((DVector::from_column_slice(&out.values) - x_star).norm() < 1e-6);
    }

    #[test]
    fn evasion_respects_budget() {
        let id = ProjectionMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let x = FeatureVector::new(vec![0.0, 0.0], None).unwrap();
        let out = craft_evasion(&x, &id, &[10.0, 0.0], 100, 0.1, 0.5).unwrap();
        assert!((out.values[0] - 0.5).abs() < 1e-12);
        assert!(out.values[1].abs() < 1e-12);
    }
}
