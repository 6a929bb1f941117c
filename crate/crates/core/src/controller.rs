//! Fail-safe movement-authority controller: position shield, belief updates
//! from accepted detections, and authority computation over the known map.

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::perception::{Detection, DetectionClass};
use crate::worldmodel::{Aspect, Confirmation, WorldState};

/// One mapped signal position the controller knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownPosition {
    pub id: u32,
    pub position: u32,
}

/// Static route knowledge handed to the controller and the shield.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownMap {
    pub positions: Vec<KnownPosition>,
    /// Association radius, in route units, between a reported position and a
    /// mapped signal.
    pub tolerance: u32,
}

impl KnownMap {
    pub fn from_signals(signals: &[crate::worldmodel::Signal], tolerance: u32) -> KnownMap {
        KnownMap {
            positions: signals
                .iter()
                .map(|s| KnownPosition {
                    id: s.id,
                    position: s.position,
                })
                .collect(),
            tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldVerdict {
    Forwarded,
    Ignored,
}

fn absdiff(a: u32, b: u32) -> u32 {
    a.max(b) - a.min(b)
}

/// Mapped signal ahead of the train matching the reported position within the
/// association radius; nearest match wins, lower position breaks ties.
fn associate(det: &Detection, state: &WorldState, cfg: &ScenarioConfig) -> Option<KnownPosition> {
    let tol = cfg.known_map.tolerance;
    cfg.known_map
        .positions
        .iter()
        .filter(|k| k.position > state.train_pos)
        .filter(|k| absdiff(det.reported_position, k.position) <= tol)
        .min_by_key(|k| (absdiff(det.reported_position, k.position), k.position))
        .copied()
}

/// Position shield: with the shield enabled, a detection passes through only
/// if it can be associated with a mapped signal ahead of the train.
pub fn shield_filter(det: &Detection, state: &WorldState, cfg: &ScenarioConfig) -> ShieldVerdict {
    if !cfg.shield {
        return ShieldVerdict::Forwarded;
    }
    if associate(det, state, cfg).is_some() {
        ShieldVerdict::Forwarded
    } else {
        ShieldVerdict::Ignored
    }
}

/// Folds one accepted-and-forwarded detection into the belief state and
/// recomputes the movement authority.
pub fn on_detection(state: &mut WorldState, det: &Detection, cfg: &ScenarioConfig) {
    debug_assert!(det.class != DetectionClass::NoSignal);
    state.inbox = None;
    if let Some(known) = associate(det, state, cfg) {
        let confirmation = match det.class {
            DetectionClass::Stop => Confirmation::ConfirmedStop,
            DetectionClass::Permission => Confirmation::ConfirmedPermission,
            DetectionClass::NoSignal => unreachable!(),
        };
        state.confirmations.insert(known.id, confirmation);
    } else if !cfg.shield {
        // No map entry nearby: remember a believed constraint at the reported
        // position. A permission overwrites (and thereby clears) a stop.
        let aspect = match det.class {
            DetectionClass::Stop => Aspect::Stop,
            DetectionClass::Permission => Aspect::Permission,
            DetectionClass::NoSignal => unreachable!(),
        };
        state.phantoms.insert(det.reported_position, aspect);
    }
    refresh(state, cfg);
}

/// Discards stale belief (passed signals, passed phantoms) and recomputes the
/// movement authority. Called on every controller activation.
pub fn refresh(state: &mut WorldState, cfg: &ScenarioConfig) {
    garbage_collect(state);
    state.ma = update_authority(state, cfg);
}

/// Variant of `refresh` for the mutation hook of the model checker: the
/// authority computation ignores every signal-derived constraint.
pub fn refresh_ignoring_signals(state: &mut WorldState, cfg: &ScenarioConfig) {
    garbage_collect(state);
    state.ma = authority(state, cfg, true);
}

fn garbage_collect(state: &mut WorldState) {
    let pos = state.train_pos;
    state.phantoms.retain(|&p, _| p > pos);
    let passed: Vec<u32> = state
        .signals
        .iter()
        .filter(|s| s.position <= pos)
        .map(|s| s.id)
        .collect();
    for id in passed {
        if let Some(c) = state.confirmations.get_mut(&id) {
            *c = Confirmation::Unconfirmed;
        }
    }
}

/// Movement authority from the current belief: the train may advance up to,
/// but never onto, the nearest constraining position ahead. Constraints are
/// strictly ahead (q > train_pos); mapped signals constrain unless confirmed
/// as permission, phantom stops always constrain, and active derailers are
/// read from the interlocking directly.
pub fn update_authority(state: &WorldState, cfg: &ScenarioConfig) -> u32 {
    authority(state, cfg, false)
}

fn authority(state: &WorldState, cfg: &ScenarioConfig, ignore_signals: bool) -> u32 {
    let pos = state.train_pos;
    let mut ma = cfg.route_length.saturating_sub(pos);
    let mut bound = |q: u32| {
        if q > pos {
            ma = ma.min(q - pos - 1);
        }
    };
    if !ignore_signals {
        for k in &cfg.known_map.positions {
            let confirmed_permission = state.confirmations.get(&k.id)
                == Some(&Confirmation::ConfirmedPermission);
            if !confirmed_permission {
                bound(k.position);
            }
        }
        for (&q, &aspect) in &state.phantoms {
            if aspect == Aspect::Stop {
                bound(q);
            }
        }
    }
    for d in &state.derailers {
        if d.active {
            bound(d.position);
        }
    }
    ma
}

/// Nearest constraining position ahead under the current belief, with the
/// belief that holds it closed. `None` when only the route end bounds.
pub fn nearest_constraint(state: &WorldState, cfg: &ScenarioConfig) -> Option<(u32, Constraint)> {
    let pos = state.train_pos;
    let mut best: Option<(u32, Constraint)> = None;
    let mut consider = |q: u32, c: Constraint| {
        if q > pos && best.map_or(true, |(bq, _)| q < bq) {
            best = Some((q, c));
        }
    };
    for k in &cfg.known_map.positions {
        match state.confirmations.get(&k.id).copied() {
            Some(Confirmation::ConfirmedPermission) => {}
            Some(Confirmation::ConfirmedStop) => consider(k.position, Constraint::ConfirmedStop),
            _ => consider(k.position, Constraint::Unconfirmed),
        }
    }
    for (&q, &aspect) in &state.phantoms {
        if aspect == Aspect::Stop {
            consider(q, Constraint::PhantomStop);
        }
    }
    for d in &state.derailers {
        if d.active {
            consider(d.position, Constraint::ActiveDerailer);
        }
    }
    best
}

/// Kind of belief closing the track at a constraining position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Unconfirmed,
    ConfirmedStop,
    PhantomStop,
    ActiveDerailer,
}

/// Mapped signal the perception channel is currently expected to report:
/// the nearest one within visibility ahead of the train.
pub fn expected_signal(state: &WorldState, cfg: &ScenarioConfig) -> Option<KnownPosition> {
    cfg.known_map
        .positions
        .iter()
        .filter(|k| k.position > state.train_pos)
        .filter(|k| k.position - state.train_pos <= cfg.visibility)
        .min_by_key(|k| k.position)
        .copied()
}
