//! Perception channel: visibility-based ground truth, the stochastic
//! confusion model, detection outcome classification, and the external
//! line-delimited JSON perception protocol with its script adapter.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::rng::Rng;
use crate::worldmodel::{Aspect, Event, WorldState};

/// What the perception channel can report for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionClass {
    #[serde(rename = "none")]
    NoSignal,
    Stop,
    Permission,
}

impl DetectionClass {
    /// Fixed column order used by the confusion model and its sampler.
    pub const ORDER: [DetectionClass; 3] = [
        DetectionClass::NoSignal,
        DetectionClass::Stop,
        DetectionClass::Permission,
    ];

    pub fn index(self) -> usize {
        match self {
            DetectionClass::NoSignal => 0,
            DetectionClass::Stop => 1,
            DetectionClass::Permission => 2,
        }
    }
}

/// Row-stochastic 3x3 matrix: rows are true classes, columns detections,
/// both in the order none, stop, permission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionModel(pub [[f64; 3]; 3]);

impl ConfusionModel {
    /// Detection always equals truth.
    pub fn identity() -> ConfusionModel {
        ConfusionModel([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
    }

    pub fn row(&self, true_class: DetectionClass) -> &[f64; 3] {
        &self.0[true_class.index()]
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, row) in self.0.iter().enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("confusion row {i} has an entry outside [0, 1]"));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("confusion row {i} sums to {sum}, expected 1"));
            }
        }
        Ok(())
    }
}

/// Ground truth visible to the perception channel at the current position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub class: DetectionClass,
    /// Id of the visible signal, when one is visible.
    pub signal_id: Option<u32>,
}

/// The nearest signal strictly ahead within visibility determines the true
/// class; with nothing in range the truth is no-signal.
pub fn ground_truth(state: &WorldState, cfg: &ScenarioConfig) -> GroundTruth {
    let visible = state
        .signals
        .iter()
        .filter(|s| s.position > state.train_pos)
        .filter(|s| s.position - state.train_pos <= cfg.visibility)
        .min_by_key(|s| s.position);
    match visible {
        Some(s) => GroundTruth {
            class: match s.aspect {
                Aspect::Stop => DetectionClass::Stop,
                Aspect::Permission => DetectionClass::Permission,
            },
            signal_id: Some(s.id),
        },
        None => GroundTruth {
            class: DetectionClass::NoSignal,
            signal_id: None,
        },
    }
}

/// Samples a detected class from the confusion row of the true class with a
/// single uniform draw, walking the columns in fixed order.
pub fn sample_detection(
    true_class: DetectionClass,
    model: &ConfusionModel,
    rng: &mut Rng,
) -> DetectionClass {
    let row = model.row(true_class);
    let u = rng.uniform01();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return DetectionClass::ORDER[i];
        }
    }
    // Guard against accumulated rounding just below 1.
    DetectionClass::ORDER[2]
}

/// Maps a (truth, detected) pair onto the detection event it activates.
/// A no-signal detection activates nothing.
pub fn classify_outcome(true_class: DetectionClass, detected: DetectionClass) -> Option<Event> {
    match detected {
        DetectionClass::NoSignal => None,
        _ if detected == true_class => Some(Event::DetectCorrect),
        DetectionClass::Stop => Some(Event::DetectWrongStop),
        DetectionClass::Permission => Some(Event::DetectWrongPermission),
    }
}

/// One non-empty detection as handed to the certificate stage and the shield.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub class: DetectionClass,
    /// Detections are placed at a fixed offset in front of the train.
    pub reported_position: u32,
    pub true_class: DetectionClass,
    /// True iff the detected class equals a visible true class.
    pub correct: bool,
}

/// Builds the detection record for a detected class in the current state.
pub fn make_detection(state: &WorldState, cfg: &ScenarioConfig, class: DetectionClass) -> Detection {
    debug_assert!(class != DetectionClass::NoSignal);
    let truth = ground_truth(state, cfg);
    Detection {
        class,
        reported_position: state.train_pos + cfg.d_fix,
        true_class: truth.class,
        correct: class == truth.class && truth.class != DetectionClass::NoSignal,
    }
}

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("external perception connection failed: {0}")]
    Connect(std::io::Error),
    #[error("external perception i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("external perception timed out after {0} ms")]
    Timeout(u64),
    #[error("external perception sent a malformed response: {0}")]
    Malformed(String),
}

/// Request sent to an external perception service, one JSON object per line.
#[derive(Debug, Serialize)]
struct PerceiveRequest<'a> {
    r#type: &'a str,
    run: u64,
    step: u64,
    scene: SceneDescription,
}

/// Scene summary shipped to external perception services.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneDescription {
    pub train_pos: u32,
    pub visible: DetectionClass,
}

#[derive(Debug, Deserialize)]
struct DetectionResponse {
    r#type: String,
    class: DetectionClass,
    #[serde(default)]
    #[allow(dead_code)]
    confidence: f64,
}

/// Blocking client for the line-delimited JSON perception protocol.
pub struct ExternalClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    timeout_ms: u64,
}

impl ExternalClient {
    pub fn connect(endpoint: &str, timeout_ms: u64) -> Result<ExternalClient, PerceptionError> {
        let stream = TcpStream::connect(endpoint).map_err(PerceptionError::Connect)?;
        // One small request/response pair per step; Nagle would serialize
        // these against delayed ACKs.
        stream.set_nodelay(true).map_err(PerceptionError::Io)?;
        stream
            .set_read_timeout(Some(Duration::from_millis(timeout_ms)))
            .map_err(PerceptionError::Io)?;
        let reader = BufReader::new(stream.try_clone().map_err(PerceptionError::Io)?);
        Ok(ExternalClient {
            reader,
            writer: stream,
            timeout_ms,
        })
    }

    /// One request/response round trip.
    pub fn perceive(
        &mut self,
        run: u64,
        step: u64,
        scene: SceneDescription,
    ) -> Result<DetectionClass, PerceptionError> {
        let req = PerceiveRequest {
            r#type: "perceive",
            run,
            step,
            scene,
        };
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;

        let mut response = String::new();
        match self.reader.read_line(&mut response) {
            Ok(0) => return Err(PerceptionError::Malformed("connection closed".to_string())),
            Ok(_) => {}
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                return Err(PerceptionError::Timeout(self.timeout_ms));
            }
            Err(e) => return Err(PerceptionError::Io(e)),
        }
        let parsed: DetectionResponse = serde_json::from_str(response.trim_end())
            .map_err(|e| PerceptionError::Malformed(format!("{e}: {}", response.trim_end())))?;
        if parsed.r#type != "detection" {
            return Err(PerceptionError::Malformed(format!(
                "unexpected response type {:?}",
                parsed.r#type
            )));
        }
        Ok(parsed.class)
    }
}

/// Replays a recorded list of detection classes; reports no-signal once the
/// script is exhausted. Used for deterministic protocol and scenario tests.
#[derive(Debug, Clone)]
pub struct ScriptSource {
    classes: Vec<DetectionClass>,
    cursor: usize,
}

impl ScriptSource {
    pub fn new(classes: Vec<DetectionClass>) -> ScriptSource {
        ScriptSource { classes, cursor: 0 }
    }

    pub fn next_class(&mut self) -> DetectionClass {
        let c = self
            .classes
            .get(self.cursor)
            .copied()
            .unwrap_or(DetectionClass::NoSignal);
        self.cursor += 1;
        c
    }
}
