use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, Backbone, BackboneConfig};
use crate::checkpoint;
use crate::error::Result;
use crate::executor::FlopsLedger;
use crate::gate::{self, Gate, GateConfig};
use crate::params::ParamStore;
use crate::quant::BitOption;

/// Backbone, gating network and their shared parameter store.
#[derive(Clone, Debug)]
pub struct DfsModel {
    pub backbone: Backbone,
    pub gate: Gate,
    pub store: ParamStore,
    pub ledger: FlopsLedger,
}

impl DfsModel {
    /// Backbone and gate draw from independent streams of `seed`, so the
    /// backbone initialization does not depend on the gate configuration.
    pub fn new(backbone_cfg: BackboneConfig, gate_cfg: GateConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(backbone_cfg, &mut store, &mut rng)?;
        let mut gate_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let gate = Gate::new(gate_cfg, &backbone, &mut store, &mut gate_rng)?;
        let ledger = FlopsLedger::new(&backbone);
        Ok(Self {
            backbone,
            gate,
            store,
            ledger,
        })
    }

    pub fn options(&self) -> &[BitOption] {
        &self.gate.config.options
    }

    pub fn legal_options(&self, block: usize) -> Vec<BitOption> {
        self.backbone.options_for(block, self.options())
    }

    pub fn gated_blocks(&self) -> &[usize] {
        &self.ledger.gated_blocks
    }

    /// Lowest cp any routing can reach.
    pub fn cp_floor(&self) -> f64 {
        let cheapest: Vec<BitOption> = self
            .gated_blocks()
            .iter()
            .map(|&b| self.legal_options(b)[0])
            .collect();
        self.ledger.cp(&cheapest)
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.store.set_trainable(backbone::PREFIX, !frozen);
    }

    pub fn freeze_gate(&mut self, frozen: bool) {
        self.store.set_trainable(gate::PREFIX, !frozen);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Loads backbone parameters (required) and the gate when the file holds
    /// one of the same shape. A gate for another option set is ignored.
    pub fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let mut entries = checkpoint::load(path)?;
        let gate_fits = self
            .store
            .ids()
            .filter(|&id| self.store.name(id).starts_with(gate::PREFIX))
            .all(|id| {
                entries
                    .iter()
                    .any(|(n, t)| n == self.store.name(id) && t.shape() == self.store.get(id).shape())
            });
        if !gate_fits {
            entries.retain(|(n, _)| !n.starts_with(gate::PREFIX));
        }
        checkpoint::restore(&mut self.store, &entries, backbone::PREFIX)
    }

    /// Loads every parameter; all must be present.
    pub fn load_all(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        checkpoint::restore(&mut self.store, &entries, "")
    }
}
