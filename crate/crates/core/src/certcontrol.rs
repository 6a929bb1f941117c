//! Certificate stage: a stochastic checker that accepts or rejects each raw
//! detection before it may activate a detection event. Acceptance odds depend
//! on whether the detection happens to be correct, which the checker cannot
//! observe directly; the model captures how discriminative it is.

use serde::{Deserialize, Serialize};

use crate::perception::{Detection, DetectionClass};
use crate::rng::Rng;
use crate::signvision::{self, GrayImage};

/// Where the certificate checker sits in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMode {
    /// Every detection passes through unchecked.
    Off,
    /// Stop detections bypass the checker: a spurious stop only makes the
    /// train more cautious, so rejecting it buys no safety.
    #[serde(rename = "nostop")]
    NoStop,
    /// Every detection is checked.
    On,
}

/// Acceptance probability per detected class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProbs {
    pub stop: f64,
    pub permission: f64,
}

impl ClassProbs {
    pub fn get(&self, class: DetectionClass) -> f64 {
        match class {
            DetectionClass::Stop => self.stop,
            DetectionClass::Permission => self.permission,
            DetectionClass::NoSignal => 0.0,
        }
    }
}

/// Acceptance model of the certificate checker, split by whether the
/// detection under test is actually correct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertModel {
    pub accept_true: ClassProbs,
    pub accept_false: ClassProbs,
}

impl Default for CertModel {
    fn default() -> CertModel {
        CertModel {
            accept_true: ClassProbs {
                stop: 0.2,
                permission: 0.9,
            },
            accept_false: ClassProbs {
                stop: 0.0,
                permission: 0.0,
            },
        }
    }
}

impl CertModel {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("accept_true.stop", self.accept_true.stop),
            ("accept_true.permission", self.accept_true.permission),
            ("accept_false.stop", self.accept_false.stop),
            ("accept_false.permission", self.accept_false.permission),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Runs the certificate checker on one raw detection. Consumes a random draw
/// only when the mode actually requires a check, so disabling the checker
/// leaves the rest of the stream untouched.
pub fn apply_certificate(det: &Detection, mode: CertMode, model: &CertModel, rng: &mut Rng) -> bool {
    match mode {
        CertMode::Off => true,
        CertMode::NoStop if det.class == DetectionClass::Stop => true,
        _ => {
            let probs = if det.correct {
                &model.accept_true
            } else {
                &model.accept_false
            };
            rng.bernoulli(probs.get(det.class))
        }
    }
}

/// Image-backed certificate used by the vision pipeline: re-examines the
/// rendered scene with the strict classifier and accepts only when it
/// independently reproduces the detected class.
pub fn certify_image(img: &GrayImage, detected: DetectionClass) -> bool {
    signvision::certify(img) == Some(detected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: DetectionClass, correct: bool) -> Detection {
        Detection {
            class,
            reported_position: 10,
            true_class: if correct { class } else { DetectionClass::NoSignal },
            correct,
        }
    }

    #[test]
    fn off_accepts_without_consuming_a_draw() {
        let model = CertModel::default();
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        assert!(apply_certificate(
            &det(DetectionClass::Stop, false),
            CertMode::Off,
            &model,
            &mut a
        ));
        // b drew nothing either, so the streams stay aligned.
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn no_stop_mode_passes_stops_unexamined() {
        let model = CertModel {
            accept_true: ClassProbs {
                stop: 0.0,
                permission: 0.0,
            },
            accept_false: ClassProbs {
                stop: 0.0,
                permission: 0.0,
            },
        };
        let mut a = Rng::new(3);
        let mut b = Rng::new(3);
        assert!(apply_certificate(
            &det(DetectionClass::Stop, true),
            CertMode::NoStop,
            &model,
            &mut a
        ));
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn no_stop_mode_still_checks_permissions() {
        let model = CertModel {
            accept_true: ClassProbs {
                stop: 1.0,
                permission: 0.0,
            },
            accept_false: ClassProbs {
                stop: 1.0,
                permission: 0.0,
            },
        };
        let mut rng = Rng::new(3);
        assert!(!apply_certificate(
            &det(DetectionClass::Permission, true),
            CertMode::NoStop,
            &model,
            &mut rng
        ));
    }

    #[test]
    fn extreme_probabilities_pin_the_outcome() {
        let always = CertModel {
            accept_true: ClassProbs {
                stop: 1.0,
                permission: 1.0,
            },
            accept_false: ClassProbs {
                stop: 1.0,
                permission: 1.0,
            },
        };
        let never = CertModel {
            accept_true: ClassProbs {
                stop: 0.0,
                permission: 0.0,
            },
            accept_false: ClassProbs {
                stop: 0.0,
                permission: 0.0,
            },
        };
        let mut rng = Rng::new(4);
        for class in [DetectionClass::Stop, DetectionClass::Permission] {
            for correct in [false, true] {
                assert!(apply_certificate(&det(class, correct), CertMode::On, &always, &mut rng));
                assert!(!apply_certificate(&det(class, correct), CertMode::On, &never, &mut rng));
            }
        }
    }

    #[test]
    fn acceptance_rates_follow_the_model() {
        let model = CertModel::default();
        let mut rng = Rng::new(21);
        let n = 20_000;
        let mut accepted = 0;
        for _ in 0..n {
            if apply_certificate(&det(DetectionClass::Permission, true), CertMode::On, &model, &mut rng)
            {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / n as f64;
        assert!((rate - 0.9).abs() < 0.01, "rate {rate}");

        let mut rejected_false = 0;
        for _ in 0..n {
            if !apply_certificate(&det(DetectionClass::Stop, false), CertMode::On, &model, &mut rng)
            {
                rejected_false += 1;
            }
        }
        assert_eq!(rejected_false, n);
    }

    #[test]
    fn validate_rejects_out_of_range_probabilities() {
        let mut m = CertModel::default();
        assert!(m.validate().is_ok());
        m.accept_true.stop = 1.2;
        assert!(m.validate().is_err());
        m.accept_true.stop = -0.1;
        assert!(m.validate().is_err());
    }

    #[test]
    fn mode_serialization_names() {
        assert_eq!(serde_json::to_string(&CertMode::Off).unwrap(), "\"off\"");
        assert_eq!(
            serde_json::to_string(&CertMode::NoStop).unwrap(),
            "\"nostop\""
        );
        assert_eq!(serde_json::to_string(&CertMode::On).unwrap(), "\"on\"");
    }
}
