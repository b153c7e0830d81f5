use std::io::{Read, Write};

use crate::bridge::{Bridge, GraphPayload, MessageBody};
use crate::episode::{Action, Episode, StepOutcome};
use crate::error::Result;

use super::Planner;

/// Defers every decision to a policy on the other end of a bridge.
pub struct ExternalPlanner<R, W> {
    bridge: Bridge<R, W>,
    reset_sent: bool,
}

impl<R: Read, W: Write> ExternalPlanner<R, W> {
    /// Performs the handshake before returning.
    pub fn connect(reader: R, writer: W) -> Result<Self> {
        let mut bridge = Bridge::new(reader, writer);
        bridge.handshake()?;
        Ok(Self {
            bridge,
            reset_sent: false,
        })
    }

    pub fn into_bridge(self) -> Bridge<R, W> {
        self.bridge
    }

    /// Next node for `agent` as chosen by the remote policy.
    pub fn plan_external(
        &mut self,
        episode: &Episode,
        agent: usize,
        partial: &[Option<Action>],
    ) -> Result<Option<usize>> {
        let obs = episode.observe(agent, partial)?;
        if !obs.mask.iter().any(|&f| f) {
            return Ok(None);
        }
        let index = self.bridge.request_action(&obs)?;
        Ok(Some(obs.neighbors[index]))
    }

    fn send_reset(&mut self, episode: &Episode) -> Result<()> {
        let cfg = episode.config();
        self.bridge.send(MessageBody::Reset {
            graph: GraphPayload::from(episode.map(0).as_ref()),
            num_agents: episode.num_agents(),
            team_budget: cfg.team_budget,
            interest_threshold: cfg.interest_threshold,
        })?;
        self.reset_sent = true;
        Ok(())
    }
}

impl<R: Read + Send, W: Write + Send> Planner for ExternalPlanner<R, W> {
    fn name(&self) -> String {
        "external".into()
    }

    fn plan_round(&mut self, episode: &mut Episode) -> Result<Vec<Option<Action>>> {
        if !self.reset_sent {
            self.send_reset(episode)?;
        }
        let mut actions: Vec<Option<Action>> = Vec::with_capacity(episode.num_agents());
        for agent in 0..episode.num_agents() {
            let next = self.plan_external(episode, agent, &actions)?;
            actions.push(next.map(Action::Node));
        }
        Ok(actions)
    }

    fn observe_outcome(&mut self, _episode: &Episode, outcome: &StepOutcome) -> Result<()> {
        for (agent, &reward) in outcome.rewards.iter().enumerate() {
            self.bridge.send(MessageBody::Reward { agent, reward })?;
        }
        if outcome.done {
            self.bridge.send(MessageBody::Done {
                termination: outcome.termination,
            })?;
        }
        Ok(())
    }
}

impl<R, W> std::fmt::Debug for ExternalPlanner<R, W> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalPlanner")
            .field("reset_sent", &self.reset_sent)
            .finish()
    }
}
