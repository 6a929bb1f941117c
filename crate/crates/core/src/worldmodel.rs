//! Guarded-event world model: track layout state, event guards and effects,
//! and the ground-truth safety predicates checked on every applied event.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::perception::{self, Detection, DetectionClass};

/// Signal aspect as shown in the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Stop,
    Permission,
}

impl Aspect {
    pub fn flipped(self) -> Aspect {
        match self {
            Aspect::Stop => Aspect::Permission,
            Aspect::Permission => Aspect::Stop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signal {
    pub id: u32,
    pub position: u32,
    pub aspect: Aspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Derailer {
    pub id: u32,
    pub position: u32,
    pub active: bool,
}

/// Controller belief about one mapped signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confirmation {
    Unconfirmed,
    ConfirmedStop,
    ConfirmedPermission,
}

/// Ground-truth safety properties; any hit ends the run as a violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SafetyProperty {
    #[serde(rename = "SAF1")]
    Saf1,
    #[serde(rename = "SAF2")]
    Saf2,
    #[serde(rename = "SAF3")]
    Saf3,
    #[serde(rename = "SAF4")]
    Saf4,
    #[serde(rename = "SAF5")]
    Saf5,
}

impl SafetyProperty {
    pub const ALL: [SafetyProperty; 5] = [
        SafetyProperty::Saf1,
        SafetyProperty::Saf2,
        SafetyProperty::Saf3,
        SafetyProperty::Saf4,
        SafetyProperty::Saf5,
    ];

    pub fn description(self) -> &'static str {
        match self {
            SafetyProperty::Saf1 => "train crosses a signal showing Stop",
            SafetyProperty::Saf2 => "train crosses or lands on an active derailer",
            SafetyProperty::Saf3 => "train leaves the end of the route",
            SafetyProperty::Saf4 => "train moves without movement authority",
            SafetyProperty::Saf5 => "train reaches an obstacle position",
        }
    }
}

impl fmt::Display for SafetyProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            SafetyProperty::Saf1 => 1,
            SafetyProperty::Saf2 => 2,
            SafetyProperty::Saf3 => 3,
            SafetyProperty::Saf4 => 4,
            SafetyProperty::Saf5 => 5,
        };
        write!(f, "SAF{n}")
    }
}

/// Terminal classification of a run; `Running` means events still apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    ReachedEnd,
    HaltedAtStop,
    Stalled,
    Aborted,
    Violation(SafetyProperty),
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        self != RunStatus::Running
    }
}

/// Event descriptors. VIS events carry no payload; the concrete detection is
/// materialized from the current state when the event is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    DetectCorrect,
    DetectWrongStop,
    DetectWrongPermission,
    SwitchSignal(u32),
    ToggleDerailer(u32),
    MoveForward,
    UpdateOnly,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::DetectCorrect => write!(f, "VIS_DetectCorrectSignal"),
            Event::DetectWrongStop => write!(f, "VIS_DetectWrongStopSignal"),
            Event::DetectWrongPermission => write!(f, "VIS_DetectWrongPermissionSignal"),
            Event::SwitchSignal(id) => write!(f, "ENV_SwitchSignal({id})"),
            Event::ToggleDerailer(id) => write!(f, "ENV_ToggleDerailer({id})"),
            Event::MoveForward => write!(f, "CTRL_MoveForward"),
            Event::UpdateOnly => write!(f, "CTRL_UpdateOnly"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("event {0} is not enabled in the current state")]
    EventNotEnabled(String),
}

/// Full world state. Perception beliefs (confirmations, phantoms) live here
/// next to the ground truth so that single-state snapshots replay cleanly.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub train_pos: u32,
    /// Movement authority: how many unit moves the controller currently allows.
    pub ma: u32,
    pub signals: Vec<Signal>,
    pub derailers: Vec<Derailer>,
    /// Belief per mapped signal id.
    pub confirmations: BTreeMap<u32, Confirmation>,
    /// Believed constraints at positions without a map entry (shield off only).
    pub phantoms: BTreeMap<u32, Aspect>,
    pub status: RunStatus,
    pub step: u64,
    /// Consecutive steps without a position change.
    pub halted_steps: u32,
    /// Handoff slot written by VIS events and consumed by the controller.
    pub inbox: Option<Detection>,
    pub false_det_activated: u64,
    pub correct_det_activated: u64,
}

impl WorldState {
    /// Initial state for a scenario, with movement authority already computed.
    pub fn initial(cfg: &ScenarioConfig) -> WorldState {
        let mut state = WorldState {
            train_pos: 0,
            ma: 0,
            signals: cfg.signals.clone(),
            derailers: cfg.derailers.clone(),
            confirmations: cfg
                .known_map
                .positions
                .iter()
                .map(|k| (k.id, Confirmation::Unconfirmed))
                .collect(),
            phantoms: BTreeMap::new(),
            status: RunStatus::Running,
            step: 0,
            halted_steps: 0,
            inbox: None,
            false_det_activated: 0,
            correct_det_activated: 0,
        };
        state.ma = crate::controller::update_authority(&state, cfg);
        state
    }

    pub fn signal(&self, id: u32) -> Option<&Signal> {
        self.signals.iter().find(|s| s.id == id)
    }

    pub fn derailer(&self, id: u32) -> Option<&Derailer> {
        self.derailers.iter().find(|d| d.id == id)
    }

    /// True ground aspect at `position`, if a signal stands there.
    pub fn aspect_at(&self, position: u32) -> Option<Aspect> {
        self.signals
            .iter()
            .find(|s| s.position == position)
            .map(|s| s.aspect)
    }
}

/// Guard of a single event against the current state.
pub fn event_enabled(state: &WorldState, event: &Event, cfg: &ScenarioConfig) -> bool {
    if state.status.is_terminal() {
        return false;
    }
    match event {
        // A detection outcome is possible iff the (truth, detected) pair it
        // names can occur for the currently visible truth.
        Event::DetectCorrect => {
            perception::ground_truth(state, cfg).class != DetectionClass::NoSignal
        }
        Event::DetectWrongStop => {
            perception::ground_truth(state, cfg).class != DetectionClass::Stop
        }
        Event::DetectWrongPermission => {
            perception::ground_truth(state, cfg).class != DetectionClass::Permission
        }
        Event::SwitchSignal(id) => state.signal(*id).is_some(),
        Event::ToggleDerailer(id) => state.derailer(*id).is_some(),
        Event::MoveForward => state.ma >= 1 && state.train_pos < cfg.route_length,
        Event::UpdateOnly => true,
    }
}

/// All events whose guards hold, in a fixed enumeration order.
pub fn enabled_events(state: &WorldState, cfg: &ScenarioConfig) -> Vec<Event> {
    let mut events = Vec::new();
    if state.status.is_terminal() {
        return events;
    }
    for ev in [
        Event::DetectCorrect,
        Event::DetectWrongStop,
        Event::DetectWrongPermission,
    ] {
        if event_enabled(state, &ev, cfg) {
            events.push(ev);
        }
    }
    for s in &state.signals {
        events.push(Event::SwitchSignal(s.id));
    }
    for d in &state.derailers {
        events.push(Event::ToggleDerailer(d.id));
    }
    if event_enabled(state, &Event::MoveForward, cfg) {
        events.push(Event::MoveForward);
    }
    events.push(Event::UpdateOnly);
    events
}

/// Applies one event, returning the successor state. The input state is never
/// mutated. Applying a disabled event is a contract violation.
pub fn apply_event(
    state: &WorldState,
    event: &Event,
    cfg: &ScenarioConfig,
) -> Result<WorldState, WorldError> {
    if !event_enabled(state, event, cfg) {
        return Err(WorldError::EventNotEnabled(event.to_string()));
    }
    let mut next = state.clone();
    match event {
        Event::DetectCorrect | Event::DetectWrongStop | Event::DetectWrongPermission => {
            let truth = perception::ground_truth(state, cfg);
            let class = match event {
                Event::DetectCorrect => truth.class,
                Event::DetectWrongStop => DetectionClass::Stop,
                Event::DetectWrongPermission => DetectionClass::Permission,
                _ => unreachable!(),
            };
            let det = perception::make_detection(state, cfg, class);
            if det.correct {
                next.correct_det_activated += 1;
            } else {
                next.false_det_activated += 1;
            }
            next.inbox = Some(det);
        }
        Event::SwitchSignal(id) => {
            let sig = next.signals.iter_mut().find(|s| s.id == *id).unwrap();
            sig.aspect = sig.aspect.flipped();
        }
        Event::ToggleDerailer(id) => {
            let der = next.derailers.iter_mut().find(|d| d.id == *id).unwrap();
            der.active = !der.active;
        }
        Event::MoveForward => {
            next.train_pos += 1;
            next.ma -= 1;
        }
        Event::UpdateOnly => {}
    }
    Ok(next)
}

/// Checks the safety properties over one applied transition, against ground
/// truth only. Returns every violated property in ascending order.
pub fn check_safety(
    before: &WorldState,
    event: &Event,
    after: &WorldState,
    cfg: &ScenarioConfig,
) -> Vec<SafetyProperty> {
    let mut hits = Vec::new();
    let moved = matches!(event, Event::MoveForward);
    if moved {
        // A move p -> p+1 crosses q iff p < q <= p+1.
        let crossed = |q: u32| before.train_pos < q && q <= after.train_pos;
        if after
            .signals
            .iter()
            .any(|s| crossed(s.position) && s.aspect == Aspect::Stop)
        {
            hits.push(SafetyProperty::Saf1);
        }
        if after
            .derailers
            .iter()
            .any(|d| crossed(d.position) && d.active)
        {
            hits.push(SafetyProperty::Saf2);
        }
    }
    if after.train_pos > cfg.route_length {
        hits.push(SafetyProperty::Saf3);
    }
    if moved && before.ma < 1 {
        hits.push(SafetyProperty::Saf4);
    }
    if cfg.obstacles.contains(&after.train_pos) {
        hits.push(SafetyProperty::Saf5);
    }
    hits.sort();
    hits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;

    fn two_signal_cfg() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default_scenario();
        cfg.route_length = 100;
        cfg.signals = vec![
            Signal {
                id: 0,
                position: 60,
                aspect: Aspect::Stop,
            },
            Signal {
                id: 1,
                position: 80,
                aspect: Aspect::Permission,
            },
        ];
        cfg.derailers = vec![Derailer {
            id: 0,
            position: 70,
            active: false,
        }];
        cfg.known_map = crate::controller::KnownMap::from_signals(&cfg.signals, 5);
        cfg.validate().unwrap();
        cfg
    }

    // Guard enumeration on a fixed fixture, checked against the hand rule:
    // with a visible truth class t, the possible detection outcomes are
    // exactly {correct} plus the wrong classes other than t.
    #[test]
    fn enabled_events_on_visible_stop_fixture() {
        let cfg = two_signal_cfg();
        let mut state = WorldState::initial(&cfg);
        state.train_pos = 55; // signal 60 visible, shows Stop
        state.ma = 3;
        let events = enabled_events(&state, &cfg);
        assert!(events.contains(&Event::DetectCorrect));
        assert!(events.contains(&Event::DetectWrongPermission));
        // Detecting a stop signal here would be a correct detection, so the
        // wrong-stop outcome is impossible.
        assert!(!events.contains(&Event::DetectWrongStop));
        assert_eq!(
            events.iter().filter(|e| matches!(e, Event::SwitchSignal(_))).count(),
            2
        );
        assert_eq!(
            events
                .iter()
                .filter(|e| matches!(e, Event::ToggleDerailer(_)))
                .count(),
            1
        );
        assert!(events.contains(&Event::MoveForward));
        assert!(events.contains(&Event::UpdateOnly));
    }

    #[test]
    fn enabled_events_with_nothing_visible() {
        let cfg = two_signal_cfg();
        let mut state = WorldState::initial(&cfg);
        state.train_pos = 10;
        state.ma = 0;
        let events = enabled_events(&state, &cfg);
        assert!(!events.contains(&Event::DetectCorrect));
        assert!(events.contains(&Event::DetectWrongStop));
        assert!(events.contains(&Event::DetectWrongPermission));
        assert!(!events.contains(&Event::MoveForward));
        assert!(events.contains(&Event::UpdateOnly));
    }

    #[test]
    fn terminal_state_has_no_events() {
        let cfg = two_signal_cfg();
        let mut state = WorldState::initial(&cfg);
        state.status = RunStatus::ReachedEnd;
        assert!(enabled_events(&state, &cfg).is_empty());
    }

    #[test]
    fn switch_signal_is_an_involution() {
        let cfg = two_signal_cfg();
        let state = WorldState::initial(&cfg);
        let once = apply_event(&state, &Event::SwitchSignal(0), &cfg).unwrap();
        assert_eq!(once.signal(0).unwrap().aspect, Aspect::Permission);
        let twice = apply_event(&once, &Event::SwitchSignal(0), &cfg).unwrap();
        assert_eq!(twice.signals, state.signals);
    }

    #[test]
    fn move_forward_advances_and_consumes_authority() {
        let cfg = two_signal_cfg();
        let mut state = WorldState::initial(&cfg);
        state.train_pos = 5;
        state.ma = 3;
        let next = apply_event(&state, &Event::MoveForward, &cfg).unwrap();
        assert_eq!(next.train_pos, 6);
        assert_eq!(next.ma, 2);
    }

    #[test]
    fn disabled_move_is_a_contract_error() {
        let cfg = two_signal_cfg();
        let mut state = WorldState::initial(&cfg);
        state.ma = 0;
        let err = apply_event(&state, &Event::MoveForward, &cfg).unwrap_err();
        assert_eq!(
            err,
            WorldError::EventNotEnabled("CTRL_MoveForward".to_string())
        );
    }

    #[test]
    fn vis_event_fills_inbox_and_counts() {
        let cfg = two_signal_cfg();
        let mut state = WorldState::initial(&cfg);
        state.train_pos = 55; // truth Stop at 60
        let next = apply_event(&state, &Event::DetectCorrect, &cfg).unwrap();
        let det = next.inbox.as_ref().unwrap();
        assert_eq!(det.class, DetectionClass::Stop);
        assert_eq!(det.reported_position, 60); // 55 + d_fix
        assert!(det.correct);
        assert_eq!(next.correct_det_activated, 1);
        assert_eq!(next.false_det_activated, 0);

        let wrong = apply_event(&state, &Event::DetectWrongPermission, &cfg).unwrap();
        assert_eq!(wrong.false_det_activated, 1);
        assert!(!wrong.inbox.as_ref().unwrap().correct);
    }

    #[test]
    fn crossing_a_stop_signal_is_saf1() {
        let cfg = two_signal_cfg();
        let mut before = WorldState::initial(&cfg);
        before.train_pos = 59;
        before.ma = 1;
        let after = apply_event(&before, &Event::MoveForward, &cfg).unwrap();
        assert_eq!(
            check_safety(&before, &Event::MoveForward, &after, &cfg),
            vec![SafetyProperty::Saf1]
        );
    }

    #[test]
    fn landing_on_an_active_derailer_is_saf2() {
        let mut cfg = two_signal_cfg();
        cfg.derailers[0] = Derailer {
            id: 0,
            position: 20,
            active: true,
        };
        let mut before = WorldState::initial(&cfg);
        before.derailers = cfg.derailers.clone();
        before.train_pos = 19;
        before.ma = 1;
        let after = apply_event(&before, &Event::MoveForward, &cfg).unwrap();
        assert_eq!(
            check_safety(&before, &Event::MoveForward, &after, &cfg),
            vec![SafetyProperty::Saf2]
        );
    }

    #[test]
    fn moving_without_authority_is_saf4() {
        let cfg = two_signal_cfg();
        let mut before = WorldState::initial(&cfg);
        before.train_pos = 10;
        before.ma = 0;
        // Construct the after state by hand; the guard would normally refuse.
        let mut after = before.clone();
        after.train_pos = 11;
        assert_eq!(
            check_safety(&before, &Event::MoveForward, &after, &cfg),
            vec![SafetyProperty::Saf4]
        );
    }

    #[test]
    fn obstacle_position_is_saf5() {
        let mut cfg = two_signal_cfg();
        cfg.obstacles = vec![30];
        let mut before = WorldState::initial(&cfg);
        before.train_pos = 29;
        before.ma = 2;
        let after = apply_event(&before, &Event::MoveForward, &cfg).unwrap();
        assert_eq!(
            check_safety(&before, &Event::MoveForward, &after, &cfg),
            vec![SafetyProperty::Saf5]
        );
    }

    #[test]
    fn env_events_never_violate() {
        let cfg = two_signal_cfg();
        let before = WorldState::initial(&cfg);
        let after = apply_event(&before, &Event::SwitchSignal(0), &cfg).unwrap();
        assert!(check_safety(&before, &Event::SwitchSignal(0), &after, &cfg).is_empty());
    }

    #[test]
    fn departing_a_signal_position_crosses_nothing() {
        // Standing exactly at a signal: the crossing was judged on arrival,
        // leaving it again touches no q with p < q <= p+1 at q = p.
        let cfg = two_signal_cfg();
        let mut before = WorldState::initial(&cfg);
        before.train_pos = 60;
        before.ma = 5;
        let after = apply_event(&before, &Event::MoveForward, &cfg).unwrap();
        assert!(check_safety(&before, &Event::MoveForward, &after, &cfg).is_empty());
    }

    #[test]
    fn safety_property_metadata() {
        assert_eq!(SafetyProperty::Saf1.to_string(), "SAF1");
        assert_eq!(SafetyProperty::ALL.len(), 5);
        for p in SafetyProperty::ALL {
            assert!(!p.description().is_empty());
        }
    }
}
