//! TOML schema for a rigged template.
//!
//! ```toml
//! weights = [[0, 0, 1.0], [1, 0, 0.25], [1, 1, 0.75]]  # vertex, joint, weight
//!
//! [[joint]]
//! name = "pelvis"
//! rest = [0.0, 0.0, 0.95]          # meters, z up
//! theta_min = [-0.3, -0.3, -0.8]   # axis-angle bounds, radians
//! theta_max = [0.3, 0.3, 0.8]
//!
//! [[joint]]
//! name = "spine1"
//! parent = "pelvis"
//! ...
//! ```
//!
//! Joints must be listed parents first.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BodyError, BodyModel, BodyParams, Joint, KinematicTree, PriorConfig};
use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown parent joint {parent:?} of {joint:?}")]
    UnknownParent { joint: String, parent: String },
    #[error("duplicate joint name {0:?}")]
    DuplicateJoint(String),
    #[error("theta range of joint {0:?} is inverted")]
    Range(String),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub rest: [f64; 3],
    pub theta_min: [f64; 3],
    pub theta_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyConfig {
    pub weights: Vec<(usize, usize, f64)>,
    #[serde(rename = "joint")]
    pub joints: Vec<JointConfig>,
}

impl BodyConfig {
    pub fn from_model(model: &BodyModel, prior: &PriorConfig) -> Self {
        let tree = &model.tree;
        let joints = tree
            .joints
            .iter()
            .enumerate()
            .map(|(k, j)| JointConfig {
                name: j.name.clone(),
                parent: j.parent.map(|p| tree.joints[p].name.clone()),
                rest: [j.rest.x, j.rest.y, j.rest.z],
                theta_min: prior.theta_min[k].into(),
                theta_max: prior.theta_max[k].into(),
            })
            .collect();
        let weights = tree
            .weights
            .iter()
            .enumerate()
            .flat_map(|(v, row)| row.iter().map(move |&(j, w)| (v, j, w)))
            .collect();
        BodyConfig { weights, joints }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("body config serializes")
    }

    pub fn read_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Builds the model for `template` and its pose/shape priors.
    pub fn build(&self, template: Mesh) -> Result<(BodyModel, PriorConfig), ConfigError> {
        let mut joints: Vec<Joint> = Vec::with_capacity(self.joints.len());
        for jc in &self.joints {
            if joints.iter().any(|j| j.name == jc.name) {
                return Err(ConfigError::DuplicateJoint(jc.name.clone()));
            }
            if (0..3).any(|a| jc.theta_min[a] > jc.theta_max[a]) {
                return Err(ConfigError::Range(jc.name.clone()));
            }
            let parent = match &jc.parent {
                None => None,
                Some(p) => Some(joints.iter().position(|j| &j.name == p).ok_or_else(|| {
                    ConfigError::UnknownParent {
                        joint: jc.name.clone(),
                        parent: p.clone(),
                    }
                })?),
            };
            joints.push(Joint {
                name: jc.name.clone(),
                parent,
                rest: Point3::from(jc.rest),
            });
        }
        let mut weights = vec![Vec::new(); template.vertex_count()];
        for &(v, j, w) in &self.weights {
            if v >= weights.len() {
                return Err(BodyError::WeightCount {
                    weights: v + 1,
                    vertices: template.vertex_count(),
                }
                .into());
            }
            weights[v].push((j, w));
        }
        let tree = KinematicTree::new(joints, weights)?;
        let prior = PriorConfig::from_ranges(
            self.joints.iter().map(|j| Vector3::from(j.theta_min)).collect(),
            self.joints.iter().map(|j| Vector3::from(j.theta_max)).collect(),
        );
        Ok((BodyModel::new(tree, template)?, prior))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    translation: [f64; 3],
    pose: Vec<[f64; 3]>,
    scale: Vec<[f64; 3]>,
}

impl BodyParams {
    /// Text form: `translation` (meters), then `pose` (axis-angle rows) and
    /// `scale` (per-segment axis scales).
    pub fn to_toml(&self) -> String {
        let file = ParamsFile {
            translation: self.translation.into(),
            pose: self.pose.iter().map(|&p| p.into()).collect(),
            scale: self.scale.iter().map(|&s| s.into()).collect(),
        };
        toml::to_string(&file).expect("params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: ParamsFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if file.pose.len() != file.scale.len() {
            return Err(ConfigError::Parse(format!(
                "{} pose rows but {} scale rows",
                file.pose.len(),
                file.scale.len()
            )));
        }
        Ok(BodyParams {
            pose: file.pose.into_iter().map(Vector3::from).collect(),
            translation: Vector3::from(file.translation),
            scale: file.scale.into_iter().map(Vector3::from).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
weights = [[0, 0, 1.0], [1, 0, 0.25], [1, 1, 0.75], [2, 1, 1.0]]

[[joint]]
name = "root"
rest = [0.0, 0.0, 0.0]
theta_min = [-1.0, -1.0, -1.0]
theta_max = [1.0, 1.0, 1.0]

[[joint]]
name = "arm"
parent = "root"
rest = [1.0, 0.0, 0.0]
theta_min = [0.0, 0.0, 0.0]
theta_max = [2.4, 0.0, 0.0]
"#;

    fn triangle() -> Mesh {
        Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(2.0, 0.5, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn parses_and_round_trips() {
        let cfg = BodyConfig::parse(SAMPLE).unwrap();
        let (model, prior) = cfg.build(triangle()).unwrap();
        assert_eq!(model.tree.joints[1].parent, Some(0));
        assert_eq!(prior.theta_star[1], Vector3::new(1.2, 0.0, 0.0));
        let again = BodyConfig::parse(&BodyConfig::from_model(&model, &prior).to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn params_round_trip_exactly() {
        let mut p = BodyParams::rest(2);
        p.pose[1] = Vector3::new(0.1, -0.7, 1.0 / 3.0);
        p.translation = Vector3::new(1e-17, 2.5, -0.3);
        p.scale[0].x = 1.234_567_890_123;
        assert_eq!(BodyParams::from_toml(&p.to_toml()).unwrap(), p);
    }

    #[test]
    fn rejects_unknown_parent() {
        let bad = SAMPLE.replace("parent = \"root\"", "parent = \"torso\"");
        let err = BodyConfig::parse(&bad).unwrap().build(triangle()).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownParent { .. }));
    }
}
