use std::collections::VecDeque;
use std::os::unix::net::UnixStream;
use std::sync::Arc;
use std::thread;

use maipp::bridge::{Bridge, MessageBody, PROTOCOL_NAME, PROTOCOL_VERSION};
use maipp::episode::{Action, Episode, EpisodeConfig, Maps};
use maipp::experiment::run_episode;
use maipp::field::{generate_field_spec, GenerationConfig, GroundTruth};
use maipp::planners::{ExternalPlanner, GreedyPlanner, PlannerConfig, PlannerKind};
use maipp::roadmap::build_prm;
use maipp::trace::{RoundRecord, TraceHeader, TraceWriter};
use maipp::{Error, Point};

fn fresh_episode(s: u64) -> Episode {
    let spec = generate_field_spec(s, &GenerationConfig::default()).unwrap();
    let truth = Arc::new(GroundTruth::new(spec, 30).unwrap());
    let map = Arc::new(build_prm(s, 200, 20, Point::new(0.3, 0.6)).unwrap());
    let cfg = EpisodeConfig {
        num_agents: 3,
        team_budget: 2.0,
        ..Default::default()
    };
    Episode::reset(truth, Maps::Shared(map), cfg, s).unwrap().0
}

/// Runs `planner` to the end and returns the round lines and chosen nodes.
fn traced(ep: &mut Episode, planner: &mut dyn maipp::planners::Planner) -> (Vec<u8>, Vec<usize>) {
    let header = TraceHeader::new("greedy", 0, ep);
    let mut writer = TraceWriter::new(Vec::new(), &header).unwrap();
    let mut chosen = Vec::new();
    run_episode(ep, planner, |ep, actions, outcome| {
        for a in actions.iter().flatten() {
            if let Action::Node(v) = a {
                chosen.push(*v);
            }
        }
        writer.write_round(&RoundRecord::capture(ep, actions, outcome))
    })
    .unwrap();
    (writer.finish().unwrap(), chosen)
}

struct PolicyLog {
    reset_nodes: usize,
    arity_ok: bool,
    rewards: usize,
    done: bool,
}

/// Policy process stand-in that replays `script` as neighbour indices.
fn scripted_policy(stream: UnixStream, mut script: VecDeque<usize>) -> PolicyLog {
    let mut bridge = Bridge::new(stream.try_clone().unwrap(), stream);
    let mut log = PolicyLog {
        reset_nodes: 0,
        arity_ok: true,
        rewards: 0,
        done: false,
    };
    while let Some(body) = bridge.recv().unwrap() {
        match body {
            MessageBody::Handshake { .. } => bridge
                .send(MessageBody::Handshake {
                    protocol: PROTOCOL_NAME.into(),
                    version: PROTOCOL_VERSION,
                    role: "policy".into(),
                })
                .unwrap(),
            MessageBody::Reset { graph, .. } => log.reset_nodes = graph.nodes.len(),
            MessageBody::Observation(obs) => {
                log.arity_ok &= obs.interest.len() == log.reset_nodes;
                let node = script.pop_front().expect("script ran out");
                let index = obs.neighbors.iter().position(|&n| n == node).unwrap();
                bridge
                    .send(MessageBody::Action {
                        agent: obs.agent,
                        index,
                    })
                    .unwrap();
            }
            MessageBody::Reward { .. } => log.rewards += 1,
            MessageBody::Done { .. } => {
                log.done = true;
                break;
            }
            _ => {}
        }
    }
    log
}

#[test]
fn scripted_policy_reproduces_greedy_trace() {
    for s in [1, 2] {
        let mut ep = fresh_episode(s);
        let mut greedy = GreedyPlanner::new(PlannerConfig::with_kind(PlannerKind::Greedy));
        let (want, chosen) = traced(&mut ep, &mut greedy);
        let rounds = ep.round();

        let (engine, policy) = UnixStream::pair().unwrap();
        let script: VecDeque<usize> = chosen.into_iter().collect();
        let handle = thread::spawn(move || scripted_policy(policy, script));
        let mut external = ExternalPlanner::connect(engine.try_clone().unwrap(), engine).unwrap();
        let mut ep = fresh_episode(s);
        let (got, _) = traced(&mut ep, &mut external);
        drop(external);
        let log = handle.join().unwrap();

        assert_eq!(
            String::from_utf8(got).unwrap(),
            String::from_utf8(want).unwrap()
        );
        assert_eq!(log.reset_nodes, 200);
        assert!(log.arity_ok);
        assert_eq!(log.rewards, 3 * rounds);
        assert!(log.done);
    }
}

#[test]
fn version_mismatch_fails_the_handshake() {
    let (engine, policy) = UnixStream::pair().unwrap();
    let handle = thread::spawn(move || {
        let mut b = Bridge::new(policy.try_clone().unwrap(), policy);
        b.recv().unwrap();
        b.send(MessageBody::Handshake {
            protocol: PROTOCOL_NAME.into(),
            version: PROTOCOL_VERSION + 1,
            role: "policy".into(),
        })
        .unwrap();
    });
    let err = ExternalPlanner::connect(engine.try_clone().unwrap(), engine).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    handle.join().unwrap();
}

#[test]
fn policy_hanging_up_is_a_protocol_error() {
    let (engine, policy) = UnixStream::pair().unwrap();
    drop(policy);
    let err = ExternalPlanner::connect(engine.try_clone().unwrap(), engine).unwrap_err();
    assert!(matches!(err, Error::Protocol(_) | Error::Io(_)));
}
