//! A user type bundled with everything derived from it.

use crate::channel::{BeliefTable, ChannelModel};
use crate::index::{omega, whittle_closed_form, WhittleIndexTable};
use crate::reward::{max_belief_reward, RewardError, RewardModel};

#[derive(Debug, Clone)]
pub struct Arm {
    pub model: ChannelModel,
    pub rewards: RewardModel,
    pub table: BeliefTable,
    pub index: WhittleIndexTable,
    pub omega: Vec<f64>,
}

impl Arm {
    pub fn new(model: ChannelModel, rewards: RewardModel) -> Self {
        let table = BeliefTable::build(&model, rewards.tau_bar());
        let omega = omega(&model);
        let index = whittle_closed_form(&rewards, &omega);
        Self {
            model,
            rewards,
            table,
            index,
            omega,
        }
    }

    /// Max-belief rewards at truncation `tau_bar`.
    pub fn max_belief(model: ChannelModel, tau_bar: usize) -> Result<Self, RewardError> {
        let table = BeliefTable::build(&model, tau_bar);
        let rewards = max_belief_reward(&model, &table)?;
        Ok(Self::new(model, rewards))
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    pub fn tau_bar(&self) -> usize {
        self.table.tau_bar()
    }

    pub fn n_states(&self) -> usize {
        self.table.len()
    }

    /// Age used for ordering; the steady entry counts as one past the
    /// truncation.
    pub fn age_of(&self, s: usize) -> usize {
        match self.table.label(s) {
            crate::channel::BeliefLabel::Observed { age, .. } => age,
            crate::channel::BeliefLabel::Steady => self.tau_bar() + 1,
        }
    }

    pub fn channel_of(&self, s: usize) -> usize {
        match self.table.label(s) {
            crate::channel::BeliefLabel::Observed { channel, .. } => channel,
            crate::channel::BeliefLabel::Steady => self.k(),
        }
    }

    /// Index of flat state `s`.
    pub fn index_at(&self, s: usize) -> f64 {
        self.index.at(self.table.label(s))
    }
}
