use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated person. Coordinates are `(x, y)` in input pixels with pixel
/// centres at integer positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Person {
    #[serde(rename = "kp")]
    pub keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub present: Vec<bool>,
}

impl Person {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Annotated but not visible.
    pub fn is_occluded(&self, k: usize) -> bool {
        self.present[k] && !self.visible[k]
    }
}

/// Ground truth for one image: every person in it, which one is supervised,
/// and the reference lengths used by PCKh (head) and PCK (torso).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAnnotation {
    pub persons: Vec<Person>,
    pub active: usize,
    pub head_len: f64,
    pub torso_len: f64,
}

impl PoseAnnotation {
    pub fn active_person(&self) -> &Person {
        &self.persons[self.active]
    }

    /// Checks structural invariants for a `keypoints`-point skeleton and, when
    /// given, that present coordinates lie inside a `width × height` frame.
    pub fn validate(&self, keypoints: usize, frame: Option<(usize, usize)>) -> Result<()> {
        if self.active >= self.persons.len() {
            return Err(Error::Validation(format!(
                "active person {} out of range for {} persons",
                self.active,
                self.persons.len()
            )));
        }
        if !(self.head_len.is_finite() && self.head_len >= 0.0 && self.torso_len.is_finite() && self.torso_len >= 0.0) {
            return Err(Error::Validation("reference lengths must be finite and non-negative".into()));
        }
        for (pi, p) in self.persons.iter().enumerate() {
            if p.keypoints.len() != keypoints || p.visible.len() != keypoints || p.present.len() != keypoints {
                return Err(Error::Validation(format!(
                    "person {pi}: expected {keypoints} keypoints, got {}/{}/{} coordinates/visible/present",
                    p.keypoints.len(),
                    p.visible.len(),
                    p.present.len()
                )));
            }
            for k in 0..keypoints {
                if p.visible[k] && !p.present[k] {
                    return Err(Error::Validation(format!("person {pi}: keypoint {k} is visible but not present")));
                }
                if !p.present[k] {
                    continue;
                }
                let [x, y] = p.keypoints[k];
                if !(x.is_finite() && y.is_finite()) {
                    return Err(Error::Validation(format!("person {pi}: keypoint {k} has non-finite coordinates")));
                }
                if let Some((w, h)) = frame {
                    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                        return Err(Error::Validation(format!(
                            "person {pi}: keypoint {k} at ({x}, {y}) lies outside the {w}x{h} frame"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
