//! Scripted federations used to exercise trust dynamics in isolation.

use crate::encoding::PrototypeSet;
use crate::error::Result;
use crate::federation::{
    ClientId, ClientUpdate, Federation, FederationConfig, NoInterception, Participant, RoundReport,
};
use crate::projection::ProjectionMatrix;

/// Reports a fixed 1×1 matrix and a loss taken from a per-round script.
pub struct ScriptedClient {
    pub id: ClientId,
    pub loss: Box<dyn Fn(usize) -> f64 + Sync>,
}

impl Participant for ScriptedClient {
    fn client_id(&self) -> ClientId {
        self.id
    }

    fn train(&self, round: usize, _global: &ProjectionMatrix, _prototypes: &PrototypeSet) -> Result<ClientUpdate> {
        Ok(ClientUpdate {
            client_id: self.id,
            weights: ProjectionMatrix::from_row_slice(1, 1, &[self.id as f64])?,
            loss: (self.loss)(round),
        })
    }

    fn evaluate(&self, _weights: &ProjectionMatrix, _prototypes: &PrototypeSet) -> Result<f64> {
        Ok((self.loss)(0))
    }
}

/// Client 0's loss is `base · ratio^t`; every other client reports `base`.
pub fn geometric_loss_scenario(config: FederationConfig, base: f64, ratio: f64) -> Result<Vec<RoundReport>> {
    let clients: Vec<ScriptedClient> = (0..config.clients)
        .map(|id| ScriptedClient {
            id,
            loss: if id == 0 {
                Box::new(move |t: usize| base * ratio.powi(t as i32)) as Box<dyn Fn(usize) -> f64 + Sync>
            } else {
                Box::new(move |_| base)
            },
        })
        .collect();
    run_scripted(config, &clients)
}

pub fn run_scripted(config: FederationConfig, clients: &[ScriptedClient]) -> Result<Vec<RoundReport>> {
    let rounds = config.rounds;
    let mut fed = Federation::new(config, 1, 1)?;
    let refs: Vec<&dyn Participant> = clients.iter().map(|c| c as &dyn Participant).collect();
    let protos = PrototypeSet::default();
    (0..rounds)
        .map(|_| fed.run_round(&refs, &protos, &mut NoInterception))
        .collect()
}
