//! Closed-loop engine: each step perceives the track ahead, pushes the
//! detection through the certificate checker and the shield, refreshes the
//! movement authority, and then lets either the environment or the train act.
//! Runs are seeded, traced as JSON lines, and byte-replayable.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certcontrol::{self, CertMode};
use crate::config::{PerceptionMode, ScenarioConfig};
use crate::controller::{self, Constraint, ShieldVerdict};
use crate::perception::{
    self, DetectionClass, ExternalClient, PerceptionError, SceneDescription, ScriptSource,
};
use crate::rng::Rng;
use crate::signvision::{self, GrayImage};
use crate::worldmodel::{
    apply_event, check_safety, event_enabled, Aspect, Confirmation, Event, RunStatus,
    SafetyProperty, WorldState,
};

/// Per-run perception backend, built from the config at run start.
pub enum PerceptionSource {
    Confusion,
    Cv,
    External(ExternalClient),
    Script(ScriptSource),
}

impl PerceptionSource {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<PerceptionSource, PerceptionError> {
        Ok(match cfg.perception.mode {
            PerceptionMode::Confusion => PerceptionSource::Confusion,
            PerceptionMode::Cv => PerceptionSource::Cv,
            PerceptionMode::External => PerceptionSource::External(ExternalClient::connect(
                &cfg.perception.endpoint,
                cfg.perception.timeout_ms,
            )?),
            PerceptionMode::Script => {
                PerceptionSource::Script(ScriptSource::new(cfg.perception.script.clone()))
            }
        })
    }
}

/// First line of every trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
}

impl TraceHeader {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> TraceHeader {
        TraceHeader {
            format: "railshield-trace".to_string(),
            version: 1,
            seed,
            config_hash: cfg.config_hash(),
        }
    }
}

/// Detection outcome of one step, as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: DetectionClass,
    pub true_class: DetectionClass,
    pub correct: bool,
    pub cert_accepted: bool,
    /// Absent when the certificate stage rejected the detection (the shield
    /// never saw it).
    pub shield_verdict: Option<ShieldVerdict>,
    pub reported_position: u32,
}

/// Ground truth and belief snapshot at the end of a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub pos: u32,
    pub ma: u32,
    /// Signal aspects in config order.
    pub aspects: Vec<Aspect>,
    /// Derailer active flags in config order.
    pub derailers: Vec<bool>,
    pub confirmations: BTreeMap<u32, Confirmation>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run: u64,
    pub step: u64,
    /// Name of the detection event that fired, or "none".
    pub event: String,
    /// Name of the environment/controller event of this step.
    pub action: String,
    pub detection: Option<DetectionRecord>,
    pub state: StateRecord,
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub distance: u32,
    pub safe: bool,
    pub reached_end: bool,
    pub terminal_status: RunStatus,
    pub steps: u64,
    pub false_det_activated: u64,
    pub correct_det_activated: u64,
    pub rejected_true: u64,
    pub rejected_false: u64,
    pub shield_ignored: u64,
    pub abort_reason: Option<String>,
}

impl RunResult {
    pub fn aborted(&self) -> bool {
        self.terminal_status == RunStatus::Aborted
    }
}

struct StepResult {
    next: WorldState,
    event: String,
    action: String,
    detection: Option<DetectionRecord>,
}

fn snapshot(state: &WorldState) -> StateRecord {
    StateRecord {
        pos: state.train_pos,
        ma: state.ma,
        aspects: state.signals.iter().map(|s| s.aspect).collect(),
        derailers: state.derailers.iter().map(|d| d.active).collect(),
        confirmations: state.confirmations.clone(),
        status: state.status,
    }
}

/// One closed-loop step. Draw order is fixed: detection sampling (or scene
/// rendering), certificate draw only when a choice is actually made, branch
/// draw, env target index draw.
fn step(
    state: &WorldState,
    cfg: &ScenarioConfig,
    rng: &mut Rng,
    source: &mut PerceptionSource,
    run_id: u64,
) -> Result<StepResult, PerceptionError> {
    debug_assert_eq!(state.status, RunStatus::Running);
    let truth = perception::ground_truth(state, cfg);
    let mut scene: Option<GrayImage> = None;
    let detected = match source {
        PerceptionSource::Confusion => {
            perception::sample_detection(truth.class, &cfg.perception.confusion, rng)
        }
        PerceptionSource::Cv => {
            let img = signvision::render_sign(truth.class, &cfg.perception.cv, rng);
            let class = signvision::weak_classify(&img);
            scene = Some(img);
            class
        }
        PerceptionSource::External(client) => client.perceive(
            run_id,
            state.step,
            SceneDescription {
                train_pos: state.train_pos,
                visible: truth.class,
            },
        )?,
        PerceptionSource::Script(script) => script.next_class(),
    };

    let mut next = state.clone();
    let mut event_name = "none".to_string();
    let mut detection = None;

    if let Some(vis) = perception::classify_outcome(truth.class, detected) {
        let det = perception::make_detection(state, cfg, detected);
        let accepted = match (&scene, cfg.cert) {
            (_, CertMode::Off) => true,
            (_, CertMode::NoStop) if det.class == DetectionClass::Stop => true,
            (Some(img), _) => certcontrol::certify_image(img, det.class),
            (None, _) => certcontrol::apply_certificate(&det, cfg.cert, &cfg.cert_model, rng),
        };
        let mut verdict = None;
        if accepted {
            // Only accepted detections activate a detection event.
            next = apply_event(&next, &vis, cfg).expect("detection event is enabled");
            let v = controller::shield_filter(&det, &next, cfg);
            if v == ShieldVerdict::Forwarded {
                controller::on_detection(&mut next, &det, cfg);
            } else {
                next.inbox = None;
            }
            verdict = Some(v);
            event_name = vis.to_string();
        }
        detection = Some(DetectionRecord {
            class: det.class,
            true_class: det.true_class,
            correct: det.correct,
            cert_accepted: accepted,
            shield_verdict: verdict,
            reported_position: det.reported_position,
        });
    }

    // The authority is refreshed before the move decision, so a move is always
    // taken against this step's belief.
    controller::refresh(&mut next, cfg);

    let action = if rng.uniform01() < cfg.p_env {
        let n_signals = next.signals.len();
        let n_targets = n_signals + next.derailers.len();
        if n_targets > 0 {
            let k = rng.below(n_targets as u64) as usize;
            if k < n_signals {
                Event::SwitchSignal(next.signals[k].id)
            } else {
                Event::ToggleDerailer(next.derailers[k - n_signals].id)
            }
        } else {
            Event::UpdateOnly
        }
    } else if event_enabled(&next, &Event::MoveForward, cfg) {
        Event::MoveForward
    } else {
        Event::UpdateOnly
    };

    let before = next;
    let mut after = apply_event(&before, &action, cfg).expect("phase-3 event is enabled");
    if matches!(action, Event::SwitchSignal(_) | Event::ToggleDerailer(_)) {
        controller::refresh(&mut after, cfg);
    }

    let violations = check_safety(&before, &action, &after, cfg);
    if let Some(&first) = violations.first() {
        after.status = RunStatus::Violation(first);
    }
    after.step += 1;
    if after.train_pos == state.train_pos {
        after.halted_steps += 1;
    } else {
        after.halted_steps = 0;
    }
    if after.status == RunStatus::Running {
        after.status = classify_termination(&after, cfg);
    }

    Ok(StepResult {
        next: after,
        event: event_name,
        action: action.to_string(),
        detection,
    })
}

/// Terminal-status rules: reaching the route end wins; arrival directly
/// before a phantom stop ends the run at once (there is nothing to wait for);
/// a mapped signal believed Stop is waited out for `halt_patience` steps
/// (the aspect may still flip) and then counts as a halt; any other lack of
/// progress for `halt_patience` steps, or hitting the step cap, is a stall.
fn classify_termination(state: &WorldState, cfg: &ScenarioConfig) -> RunStatus {
    if state.train_pos == cfg.route_length {
        return RunStatus::ReachedEnd;
    }
    let ahead = controller::nearest_constraint(state, cfg);
    let blocking = |kind: Constraint| {
        matches!(ahead, Some((q, k)) if q == state.train_pos + 1 && k == kind)
    };
    if state.ma == 0 && blocking(Constraint::PhantomStop) {
        return RunStatus::HaltedAtStop;
    }
    if state.halted_steps >= cfg.halt_patience {
        if blocking(Constraint::ConfirmedStop) || blocking(Constraint::PhantomStop) {
            return RunStatus::HaltedAtStop;
        }
        return RunStatus::Stalled;
    }
    if state.step >= cfg.max_steps {
        return RunStatus::Stalled;
    }
    RunStatus::Running
}

/// Runs one seeded simulation to termination. Trace records are collected
/// only when a buffer is supplied.
pub fn run(
    cfg: &ScenarioConfig,
    seed: u64,
    run_id: u64,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> RunResult {
    let mut rng = Rng::new(seed);
    let mut state = WorldState::initial(cfg);
    let mut rejected_true = 0u64;
    let mut rejected_false = 0u64;
    let mut shield_ignored = 0u64;
    let mut abort_reason = None;

    let mut source = match PerceptionSource::from_config(cfg) {
        Ok(s) => Some(s),
        Err(e) => {
            abort_reason = Some(e.to_string());
            state.status = RunStatus::Aborted;
            None
        }
    };

    while state.status == RunStatus::Running {
        let source = source.as_mut().expect("perception source exists while running");
        match step(&state, cfg, &mut rng, source, run_id) {
            Ok(res) => {
                if let Some(d) = &res.detection {
                    if !d.cert_accepted {
                        if d.correct {
                            rejected_true += 1;
                        } else {
                            rejected_false += 1;
                        }
                    }
                    if d.shield_verdict == Some(ShieldVerdict::Ignored) {
                        shield_ignored += 1;
                    }
                }
                if let Some(buf) = trace.as_deref_mut() {
                    buf.push(TraceRecord {
                        run: run_id,
                        step: res.next.step,
                        event: res.event.clone(),
                        action: res.action.clone(),
                        detection: res.detection.clone(),
                        state: snapshot(&res.next),
                    });
                }
                state = res.next;
            }
            Err(e) => {
                abort_reason = Some(e.to_string());
                state.status = RunStatus::Aborted;
            }
        }
    }

    RunResult {
        distance: state.train_pos,
        safe: !matches!(state.status, RunStatus::Violation(_)),
        reached_end: state.status == RunStatus::ReachedEnd,
        terminal_status: state.status,
        steps: state.step,
        false_det_activated: state.false_det_activated,
        correct_det_activated: state.correct_det_activated,
        rejected_true,
        rejected_false,
        shield_ignored,
        abort_reason,
    }
}

pub fn write_trace<W: Write>(
    out: &mut W,
    header: &TraceHeader,
    records: &[TraceRecord],
) -> io::Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_string(header: &TraceHeader, records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, header, records).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("trace is utf-8")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("trace is empty or missing its header line")]
    MissingHeader,
    #[error("trace header is malformed: {0}")]
    BadHeader(String),
    #[error("unsupported trace format {format:?} version {version}")]
    WrongFormat { format: String, version: u32 },
    #[error("config mismatch: trace recorded under {recorded}, current config hashes to {current}")]
    ConfigMismatch { recorded: String, current: String },
    #[error("trace line {line} is malformed: {message}")]
    BadRecord { line: usize, message: String },
    #[error("replay diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("independent safety check failed at step {step}: {detail}")]
    SafetyMismatch { step: u64, detail: String },
}

/// What a verified trace contained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplaySummary {
    pub steps: u64,
    pub violation: Option<SafetyProperty>,
}

/// Re-simulates a recorded trace under the given config and compares records
/// byte for byte, then re-derives the safety verdict of every transition from
/// the recorded ground truth alone.
pub fn replay_verify(trace_text: &str, cfg: &ScenarioConfig) -> Result<ReplaySummary, ReplayError> {
    let mut lines = trace_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or(ReplayError::MissingHeader)?;
    let header: TraceHeader =
        serde_json::from_str(header_line).map_err(|e| ReplayError::BadHeader(e.to_string()))?;
    if header.format != "railshield-trace" || header.version != 1 {
        return Err(ReplayError::WrongFormat {
            format: header.format,
            version: header.version,
        });
    }
    let current = cfg.config_hash();
    if header.config_hash != current {
        return Err(ReplayError::ConfigMismatch {
            recorded: header.config_hash,
            current,
        });
    }

    let mut recorded = Vec::new();
    for (line_no, line) in lines {
        let record: TraceRecord = serde_json::from_str(line).map_err(|e| ReplayError::BadRecord {
            line: line_no + 1,
            message: e.to_string(),
        })?;
        recorded.push((line.to_string(), record));
    }

    let run_id = recorded.first().map_or(0, |(_, r)| r.run);
    let mut replayed = Vec::new();
    run(cfg, header.seed, run_id, Some(&mut replayed));

    for (i, (line, record)) in recorded.iter().enumerate() {
        match replayed.get(i) {
            None => {
                return Err(ReplayError::Divergence {
                    step: record.step,
                    detail: "replay terminated earlier than the trace".to_string(),
                })
            }
            Some(fresh) => {
                let fresh_line = serde_json::to_string(fresh).expect("record serializes");
                if fresh_line != *line {
                    return Err(ReplayError::Divergence {
                        step: record.step,
                        detail: format!("recorded {line} but replay produced {fresh_line}"),
                    });
                }
            }
        }
    }
    if replayed.len() > recorded.len() {
        return Err(ReplayError::Divergence {
            step: replayed[recorded.len()].step,
            detail: "trace terminated earlier than the replay".to_string(),
        });
    }

    recheck_safety(&recorded, cfg)?;

    Ok(ReplaySummary {
        steps: recorded.last().map_or(0, |(_, r)| r.step),
        violation: recorded.last().and_then(|(_, r)| match r.state.status {
            RunStatus::Violation(p) => Some(p),
            _ => None,
        }),
    })
}

/// Re-evaluates the ground-truth safety properties over the recorded
/// transitions, independent of the engine's own verdicts.
fn recheck_safety(
    recorded: &[(String, TraceRecord)],
    cfg: &ScenarioConfig,
) -> Result<(), ReplayError> {
    let move_action = Event::MoveForward.to_string();
    let mut prev_pos = 0u32;
    let mut prev_step = 0u64;
    for (i, (_, r)) in recorded.iter().enumerate() {
        let s = &r.state;
        if r.step <= prev_step && i > 0 {
            return Err(ReplayError::SafetyMismatch {
                step: r.step,
                detail: "step numbers are not strictly increasing".to_string(),
            });
        }
        if s.pos < prev_pos {
            return Err(ReplayError::SafetyMismatch {
                step: r.step,
                detail: format!("train position decreased from {prev_pos} to {}", s.pos),
            });
        }
        let moved = r.action == move_action;
        let crossed = |q: u32| prev_pos < q && q <= s.pos;
        let mut found = Vec::new();
        if moved {
            // Env and move are exclusive within a step, so post-step aspects
            // and derailer states are the ones in force at the crossing.
            for (sig, &aspect) in cfg.signals.iter().zip(&s.aspects) {
                if crossed(sig.position) && aspect == Aspect::Stop {
                    found.push(SafetyProperty::Saf1);
                    break;
                }
            }
            for (der, &active) in cfg.derailers.iter().zip(&s.derailers) {
                if crossed(der.position) && active {
                    found.push(SafetyProperty::Saf2);
                    break;
                }
            }
        }
        if s.pos > cfg.route_length {
            found.push(SafetyProperty::Saf3);
        }
        if cfg.obstacles.contains(&s.pos) {
            found.push(SafetyProperty::Saf5);
        }
        found.sort();
        let recorded_violation = match s.status {
            RunStatus::Violation(p) => Some(p),
            _ => None,
        };
        match (found.first().copied(), recorded_violation) {
            (Some(f), Some(v)) if f == v => {}
            (None, None) => {}
            // SAF4 is a guard property on belief, not ground truth; it cannot
            // be re-derived from the trace and is covered by the byte compare.
            (None, Some(SafetyProperty::Saf4)) => {}
            (f, v) => {
                return Err(ReplayError::SafetyMismatch {
                    step: r.step,
                    detail: format!("re-check found {f:?}, trace records {v:?}"),
                })
            }
        }
        if recorded_violation.is_some() && i + 1 != recorded.len() {
            return Err(ReplayError::SafetyMismatch {
                step: r.step,
                detail: "violation recorded before the final step".to_string(),
            });
        }
        prev_pos = s.pos;
        prev_step = r.step;
    }
    Ok(())
}
