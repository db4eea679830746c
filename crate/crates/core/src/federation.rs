//! Trust-weighted federated rounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::PrototypeSet;
use crate::error::{Error, Result};
use crate::projection::{local_loss, train_local_closed_form, train_local_gd, LocalDataset, ProjectionMatrix};

pub type ClientId = usize;

pub fn trust_score(loss: f64, epsilon: f64) -> Result<f64> {
    if loss.is_nan() || loss < 0.0 {
        return Err(Error::InvalidArgument(format!("loss must be >= 0, got {loss}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(1.0 / (loss + epsilon))
}

pub fn smooth_trust(u_prev: f64, tau: f64, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must be in [0, 1), got {gamma}")));
    }
    Ok(gamma * u_prev + (1.0 - gamma) * tau)
}

pub fn normalize_weights(u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::Empty("trust values"));
    }
    if let Some(bad) = u.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "trust values must be positive, got {bad}"
        )));
    }
    let total = kahan_sum(u.iter().copied());
    Ok(u.iter().map(|v| v / total).collect())
}

fn check_normalized(alpha: &[f64]) -> Result<()> {
    let total = kahan_sum(alpha.iter().copied());
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Unnormalized(total));
    }
    Ok(())
}

fn check_shapes(ws: &[&ProjectionMatrix], alpha: &[f64]) -> Result<(usize, usize)> {
    let first = ws.first().ok_or(Error::Empty("matrices"))?;
    if ws.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            expected: ws.len(),
            actual: alpha.len(),
            context: "weights vs matrices",
        });
    }
    let (k, d) = (first.k(), first.d());
    for w in ws {
        if w.k() != k || w.d() != d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                actual: w.k() * w.d(),
                context: "aggregated matrix shape",
            });
        }
    }
    Ok((k, d))
}

/// Weighted sum in list order, with Neumaier compensation per entry.
fn weighted_sum(ws: &[&ProjectionMatrix], alpha: &[f64], offset: Option<&ProjectionMatrix>) -> nalgebra::DMatrix<f64> {
    let (k, d) = (ws[0].k(), ws[0].d());
    let mut sum = nalgebra::DMatrix::<f64>::zeros(k, d);
    let mut comp = nalgebra::DMatrix::<f64>::zeros(k, d);
    for (w, a) in ws.iter().zip(alpha) {
        for idx in 0..k * d {
            let mut term = w.matrix()[idx];
            if let Some(o) = offset {
                term -= o.matrix()[idx];
            }
            let term = a * term;
            let s = sum[idx];
            let t = s + term;
            comp[idx] += if s.abs() >= term.abs() {
                (s - t) + term
            } else {
                (term - t) + s
            };
            sum[idx] = t;
        }
    }
    sum + comp
}

/// `Σ α_i W_i`, accumulated in the given order.
pub fn aggregate(ws: &[&ProjectionMatrix], alpha: &[f64]) -> Result<ProjectionMatrix> {
    check_shapes(ws, alpha)?;
    check_normalized(alpha)?;
    let out = weighted_sum(ws, alpha, None);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aggregate"));
    }
    ProjectionMatrix::new(out)
}

/// Shannon entropy in nats.
pub fn trust_entropy(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::InvalidArgument(format!("weights must be positive, got {bad}")));
    }
    check_normalized(alpha)?;
    let h = -kahan_sum(alpha.iter().map(|a| a * a.ln()));
    Ok(h.max(0.0))
}

/// Frobenius norm of `Σ α_i (W_i − W_prev)`.
pub fn aggregation_deviation(ws: &[&ProjectionMatrix], alpha: &[f64], w_prev: &ProjectionMatrix) -> Result<f64> {
    let (k, d) = check_shapes(ws, alpha)?;
    if w_prev.k() != k || w_prev.d() != d {
        return Err(Error::DimensionMismatch {
            expected: k * d,
            actual: w_prev.k() * w_prev.d(),
            context: "previous global matrix shape",
        });
    }
    Ok(weighted_sum(ws, alpha, Some(w_prev)).norm())
}

/// True iff the last `m` entries all have magnitude at most `epsilon_h`.
pub fn check_convergence(delta_history: &[f64], epsilon_h: f64, m: usize) -> bool {
    if m == 0 || delta_history.len() < m {
        return false;
    }
    delta_history[delta_history.len() - m..]
        .iter()
        .all(|d| d.abs() <= epsilon_h)
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        comp += if f64::abs(sum) >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    ClosedForm,
    GradientDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Trust,
    /// Forced uniform weights over reporting clients. Trust is still
    /// tracked and logged.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub convergence_tolerance: f64,
    pub convergence_window: usize,
    pub training_mode: TrainingMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub ridge: f64,
    pub weighting: Weighting,
    /// Exclude a client whose local training fails instead of aborting.
    pub exclude_failed_clients: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rounds: 20,
            gamma: 0.9,
            epsilon: 1e-8,
            convergence_tolerance: 1e-6,
            convergence_window: 3,
            training_mode: TrainingMode::GradientDescent,
            learning_rate: 1e-2,
            epochs: 200,
            ridge: 1e-6,
            weighting: Weighting::Trust,
            exclude_failed_clients: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("federation: {msg}")));
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.convergence_tolerance > 0.0) {
            return bad("convergence_tolerance must be > 0".into());
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0".into());
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub weights: ProjectionMatrix,
    pub loss: f64,
}

/// A federation member. `train` runs one round of local optimization from
/// the broadcast matrix; `evaluate` scores an arbitrary matrix on the
/// member's private data.
pub trait Participant: Sync {
    fn client_id(&self) -> ClientId;
    fn train(&self, round: usize, global: &ProjectionMatrix, prototypes: &PrototypeSet) -> Result<ClientUpdate>;
    fn evaluate(&self, weights: &ProjectionMatrix, prototypes: &PrototypeSet) -> Result<f64>;
}

/// Honest client holding a private dataset.
#[derive(Clone, Debug)]
pub struct LocalClient {
    pub dataset: LocalDataset,
    pub mode: TrainingMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub ridge: f64,
}

impl LocalClient {
    pub fn new(dataset: LocalDataset, config: &FederationConfig) -> Self {
        Self {
            dataset,
            mode: config.training_mode,
            learning_rate: config.learning_rate,
            epochs: config.epochs,
            ridge: config.ridge,
        }
    }
}

impl Participant for LocalClient {
    fn client_id(&self) -> ClientId {
        self.dataset.client_id
    }

    fn train(&self, _round: usize, global: &ProjectionMatrix, prototypes: &PrototypeSet) -> Result<ClientUpdate> {
        let (weights, loss) = match self.mode {
            TrainingMode::GradientDescent => {
                train_local_gd(global, &self.dataset, prototypes, self.learning_rate, self.epochs)?
            }
            TrainingMode::ClosedForm => train_local_closed_form(&self.dataset, prototypes, self.ridge)?,
        };
        Ok(ClientUpdate {
            client_id: self.client_id(),
            weights,
            loss,
        })
    }

    fn evaluate(&self, weights: &ProjectionMatrix, prototypes: &PrototypeSet) -> Result<f64> {
        local_loss(weights, &self.dataset, prototypes)
    }
}

/// Reports as they reach the server. `None` marks a client that did not
/// report this round.
pub struct RoundContext<'a> {
    pub round: usize,
    pub updates: Vec<Option<ClientUpdate>>,
    pub participants: &'a [&'a dyn Participant],
    pub prototypes: &'a PrototypeSet,
}

impl RoundContext<'_> {
    /// Loss of `weights` on client `client`'s own data.
    pub fn evaluate(&self, client: ClientId, weights: &ProjectionMatrix) -> Result<f64> {
        let p = self
            .participants
            .iter()
            .find(|p| p.client_id() == client)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown client {client}")))?;
        p.evaluate(weights, self.prototypes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEvent {
    pub round: usize,
    /// `None` for events not tied to a client.
    pub client_id: Option<ClientId>,
    pub kind: String,
    pub magnitude: f64,
}

/// Hook between client upload and server receipt.
pub trait ReportInterceptor {
    fn intercept(&mut self, ctx: &mut RoundContext<'_>) -> Result<Vec<AttackEvent>>;
}

pub struct NoInterception;

impl ReportInterceptor for NoInterception {
    fn intercept(&mut self, _ctx: &mut RoundContext<'_>) -> Result<Vec<AttackEvent>> {
        Ok(Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    pub client_id: ClientId,
    /// `None` when the client did not report.
    pub tau: Option<f64>,
    pub u: f64,
    /// `None` when the client did not report.
    pub alpha: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub t: usize,
    pub clients: Vec<TrustState>,
    pub entropy: f64,
    pub delta_entropy: f64,
    pub deviation_norm: f64,
    pub checksum: String,
    pub converged: bool,
    pub attacks: Vec<AttackEvent>,
}

impl RoundReport {
    pub fn alphas(&self) -> Vec<(ClientId, f64)> {
        self.clients
            .iter()
            .filter_map(|c| c.alpha.map(|a| (c.client_id, a)))
            .collect()
    }
}

/// Server state: the global matrix and per-client smoothed trust.
#[derive(Clone, Debug)]
pub struct Federation {
    config: FederationConfig,
    global: ProjectionMatrix,
    u: Vec<f64>,
    round: usize,
    entropy_history: Vec<f64>,
    delta_history: Vec<f64>,
    last_updates: Vec<Option<ClientUpdate>>,
}

impl Federation {
    pub fn new(config: FederationConfig, k: usize, d: usize) -> Result<Self> {
        config.validate()?;
        let n = config.clients;
        Ok(Self {
            config,
            global: ProjectionMatrix::zeros(k, d),
            u: vec![1.0; n],
            round: 0,
            entropy_history: Vec::new(),
            delta_history: Vec::new(),
            last_updates: Vec::new(),
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn global(&self) -> &ProjectionMatrix {
        &self.global
    }

    pub fn smoothed_trust(&self) -> &[f64] {
        &self.u
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn delta_history(&self) -> &[f64] {
        &self.delta_history
    }

    /// Updates received in the most recent round, indexed by client id.
    pub fn last_updates(&self) -> &[Option<ClientUpdate>] {
        &self.last_updates
    }

    pub fn run_round(
        &mut self,
        participants: &[&dyn Participant],
        prototypes: &PrototypeSet,
        interceptor: &mut dyn ReportInterceptor,
    ) -> Result<RoundReport> {
        let n = self.config.clients;
        if participants.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} participants, got {}",
                participants.len()
            )));
        }
        for (i, p) in participants.iter().enumerate() {
            if p.client_id() != i {
                return Err(Error::InvalidArgument(format!(
                    "participant at position {i} has id {}",
                    p.client_id()
                )));
            }
        }
        let t = self.round;
        let global = &self.global;
        let results: Vec<Result<ClientUpdate>> = participants
            .par_iter()
            .map(|p| p.train(t, global, prototypes))
            .collect();
        let mut updates = Vec::with_capacity(n);
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(u) => updates.push(Some(u)),
                Err(_) if self.config.exclude_failed_clients => updates.push(None),
                Err(e) => {
                    return Err(Error::Client {
                        client: i,
                        source: Box::new(e),
                    })
                }
            }
        }

        let mut ctx = RoundContext {
            round: t,
            updates,
            participants,
            prototypes,
        };
        let attacks = interceptor.intercept(&mut ctx)?;
        let updates = ctx.updates;

        let reporting: Vec<&ClientUpdate> = updates.iter().flatten().collect();
        if reporting.is_empty() {
            return Err(Error::NoReports(t));
        }
        let mut taus = vec![None; n];
        for upd in &reporting {
            let tau = trust_score(upd.loss, self.config.epsilon)?;
            self.u[upd.client_id] = smooth_trust(self.u[upd.client_id], tau, self.config.gamma)?;
            taus[upd.client_id] = Some(tau);
        }
        let alpha = match self.config.weighting {
            Weighting::Trust => {
                let us: Vec<f64> = reporting.iter().map(|r| self.u[r.client_id]).collect();
                normalize_weights(&us)?
            }
            Weighting::Uniform => vec![1.0 / reporting.len() as f64; reporting.len()],
        };
        let ws: Vec<&ProjectionMatrix> = reporting.iter().map(|r| &r.weights).collect();
        let deviation_norm = aggregation_deviation(&ws, &alpha, &self.global)?;
        let new_global = aggregate(&ws, &alpha)?;
        let entropy = trust_entropy(&alpha)?;
        let delta_entropy = match self.entropy_history.last() {
            Some(prev) => entropy - prev,
            None => 0.0,
        };

        let mut alpha_by_client = vec![None; n];
        for (r, a) in reporting.iter().zip(&alpha) {
            alpha_by_client[r.client_id] = Some(*a);
        }
        let clients = (0..n)
            .map(|i| TrustState {
                client_id: i,
                tau: taus[i],
                u: self.u[i],
                alpha: alpha_by_client[i],
                loss: updates[i].as_ref().map(|u| u.loss),
            })
            .collect();

        self.global = new_global;
        self.entropy_history.push(entropy);
        self.delta_history.push(delta_entropy);
        self.last_updates = updates;
        self.round += 1;
        let converged = check_convergence(
            &self.delta_history,
            self.config.convergence_tolerance,
            self.config.convergence_window,
        );
        Ok(RoundReport {
            t,
            clients,
            entropy,
            delta_entropy,
            deviation_norm,
            checksum: self.global.checksum(),
            converged,
            attacks,
        })
    }
}
