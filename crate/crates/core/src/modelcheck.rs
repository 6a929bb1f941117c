//! Bounded breadth-first exploration of the closed loop under perfect
//! perception. Every environment event branches; the controller pipeline
//! (perceive, confirm, refresh, move or wait) is one deterministic reaction,
//! so counterexamples come out as shortest event paths.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::controller::{self, ShieldVerdict};
use crate::perception::{self, DetectionClass};
use crate::worldmodel::{
    apply_event, check_safety, event_enabled, Aspect, Confirmation, Event, SafetyProperty,
    WorldState,
};

/// Controller variants under test. `IgnoreSignals` drops every signal bound
/// from the authority computation, which breaks the crossing property and is
/// used to show that the checker actually finds violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    Intact,
    IgnoreSignals,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Violated {
        property: SafetyProperty,
        path: Vec<String>,
    },
    BudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub verdict: Verdict,
    pub states_explored: usize,
}

/// Dedup key: exactly the fields that influence future behavior. Step
/// counters and tallies are deliberately left out so the space stays finite.
#[derive(Clone, PartialEq, Eq, Hash)]
struct Key {
    pos: u32,
    ma: u32,
    aspects: Vec<Aspect>,
    actives: Vec<bool>,
    confirmations: Vec<(u32, Confirmation)>,
    phantoms: Vec<(u32, Aspect)>,
}

fn key(state: &WorldState) -> Key {
    Key {
        pos: state.train_pos,
        ma: state.ma,
        aspects: state.signals.iter().map(|s| s.aspect).collect(),
        actives: state.derailers.iter().map(|d| d.active).collect(),
        confirmations: state.confirmations.iter().map(|(&k, &v)| (k, v)).collect(),
        phantoms: state.phantoms.iter().map(|(&k, &v)| (k, v)).collect(),
    }
}

fn refresh_mutated(state: &mut WorldState, cfg: &ScenarioConfig, mutation: Mutation) {
    match mutation {
        Mutation::Intact => controller::refresh(state, cfg),
        Mutation::IgnoreSignals => controller::refresh_ignoring_signals(state, cfg),
    }
}

/// The deterministic controller step: confirm whatever signal is in sight,
/// refresh the authority, then move if allowed.
fn reaction(
    state: &WorldState,
    cfg: &ScenarioConfig,
    mutation: Mutation,
) -> (WorldState, String, Vec<SafetyProperty>) {
    let mut next = state.clone();
    let mut label_parts = Vec::new();
    let truth = perception::ground_truth(state, cfg);
    if truth.class != DetectionClass::NoSignal {
        let det = perception::make_detection(state, cfg, truth.class);
        next = apply_event(&next, &Event::DetectCorrect, cfg).expect("detection event is enabled");
        if controller::shield_filter(&det, &next, cfg) == ShieldVerdict::Forwarded {
            controller::on_detection(&mut next, &det, cfg);
        } else {
            next.inbox = None;
        }
        label_parts.push(Event::DetectCorrect.to_string());
    }
    refresh_mutated(&mut next, cfg, mutation);
    let action = if event_enabled(&next, &Event::MoveForward, cfg) {
        Event::MoveForward
    } else {
        Event::UpdateOnly
    };
    let after = apply_event(&next, &action, cfg).expect("controller action is enabled");
    let violations = check_safety(&next, &action, &after, cfg);
    label_parts.push(action.to_string());
    (after, label_parts.join(" + "), violations)
}

/// Explores all states reachable from the initial one, up to `budget` stored
/// states, and reports the first safety violation found (shortest by BFS).
pub fn check(cfg: &ScenarioConfig, budget: usize, mutation: Mutation) -> CheckResult {
    let initial = WorldState::initial(cfg);
    let mut states = vec![initial.clone()];
    let mut parents: Vec<Option<(usize, String)>> = vec![None];
    let mut visited = HashMap::new();
    visited.insert(key(&initial), 0usize);
    let mut queue = VecDeque::from([0usize]);

    while let Some(u) = queue.pop_front() {
        let state = states[u].clone();
        if state.train_pos == cfg.route_length {
            continue;
        }

        let mut successors = Vec::new();
        for ev in state
            .signals
            .iter()
            .map(|s| Event::SwitchSignal(s.id))
            .chain(state.derailers.iter().map(|d| Event::ToggleDerailer(d.id)))
        {
            let mut after = apply_event(&state, &ev, cfg).expect("env events are always enabled");
            refresh_mutated(&mut after, cfg, mutation);
            let violations = check_safety(&state, &ev, &after, cfg);
            successors.push((after, ev.to_string(), violations));
        }
        successors.push(reaction(&state, cfg, mutation));

        for (after, label, violations) in successors {
            if let Some(&property) = violations.first() {
                let mut path = path_to(&parents, u);
                path.push(label);
                return CheckResult {
                    verdict: Verdict::Violated { property, path },
                    states_explored: states.len(),
                };
            }
            let k = key(&after);
            if !visited.contains_key(&k) {
                if states.len() >= budget {
                    return CheckResult {
                        verdict: Verdict::BudgetExceeded,
                        states_explored: states.len(),
                    };
                }
                visited.insert(k, states.len());
                states.push(after);
                parents.push(Some((u, label)));
                queue.push_back(states.len() - 1);
            }
        }
    }

    CheckResult {
        verdict: Verdict::Verified,
        states_explored: states.len(),
    }
}

fn path_to(parents: &[Option<(usize, String)>], mut v: usize) -> Vec<String> {
    let mut labels = Vec::new();
    while let Some((p, label)) = &parents[v] {
        labels.push(label.clone());
        v = *p;
    }
    labels.reverse();
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_preset_is_verified_within_budget() {
        let cfg = ScenarioConfig::small_preset();
        let result = check(&cfg, 1_000_000, Mutation::Intact);
        assert_eq!(result.verdict, Verdict::Verified);
        assert!(result.states_explored > 40, "{}", result.states_explored);
        assert!(
            result.states_explored < 1_000_000,
            "{}",
            result.states_explored
        );
    }

    #[test]
    fn ignoring_signal_bounds_breaks_the_crossing_property() {
        let cfg = ScenarioConfig::small_preset();
        let result = check(&cfg, 1_000_000, Mutation::IgnoreSignals);
        match result.verdict {
            Verdict::Violated { property, path } => {
                assert_eq!(property, SafetyProperty::Saf1);
                // Shortest counterexample: drive straight into the first
                // signal at 15, one move per step.
                assert_eq!(path.len(), cfg.signals[0].position as usize);
                assert!(path.last().unwrap().contains("CTRL_MoveForward"));
            }
            other => panic!("expected a violation, got {other:?}"),
        }
    }

    #[test]
    fn trivial_route_explores_a_handful_of_states() {
        let mut cfg = ScenarioConfig::small_preset();
        cfg.route_length = 1;
        cfg.signals.clear();
        cfg.derailers.clear();
        cfg.known_map.positions.clear();
        let result = check(&cfg, 1_000_000, Mutation::Intact);
        assert_eq!(result.verdict, Verdict::Verified);
        assert!(result.states_explored <= 8, "{}", result.states_explored);
    }

    #[test]
    fn tiny_budget_is_reported_as_exceeded() {
        let cfg = ScenarioConfig::small_preset();
        let result = check(&cfg, 10, Mutation::Intact);
        assert_eq!(result.verdict, Verdict::BudgetExceeded);
        assert_eq!(result.states_explored, 10);
    }

    #[test]
    fn mutation_names_round_trip_through_serde() {
        let text = serde_json::to_string(&Mutation::IgnoreSignals).unwrap();
        assert_eq!(text, "\"ignore-signals\"");
        let back: Mutation = serde_json::from_str(&text).unwrap();
        assert_eq!(back, Mutation::IgnoreSignals);
    }
}
