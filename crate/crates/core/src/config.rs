//! Environment constants and the JSON configuration document.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

/// Tabletop geometry, timing and grasp-rule constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkspaceConfig {
    pub x_half_extent: f64,
    pub y_half_extent: f64,
    pub table_z: f64,
    pub gripper_home: [f64; 3],
    pub control_hz: u32,
    pub physics_substeps: u32,
    pub horizon: u32,
    /// Maximum gripper translation per control step (m).
    pub translation_clamp: f64,
    pub max_width: f64,
    /// Maximum width change per control step (m).
    pub width_rate: f64,
    /// Commanded width below which a grasp can trigger.
    pub close_width: f64,
    /// Actual width above which a held object is released.
    pub release_width: f64,
    /// Planar capture slack added to the object radius.
    pub capture_margin: f64,
    /// Max vertical distance between gripper and table for a grasp.
    pub capture_height: f64,
    /// Planar reach threshold used by the Reach metric (inclusive).
    pub reach_threshold: f64,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self {
            x_half_extent: 0.175,
            y_half_extent: 0.25,
            table_z: 0.0,
            gripper_home: [0.0, -0.30, 0.10],
            control_hz: 20,
            physics_substeps: 5,
            horizon: 50,
            translation_clamp: 0.02,
            max_width: 0.08,
            width_rate: 0.04,
            close_width: 0.02,
            release_width: 0.04,
            capture_margin: 0.015,
            capture_height: 0.03,
            reach_threshold: 0.05,
        }
    }
}

impl WorkspaceConfig {
    pub fn control_dt(&self) -> f64 {
        1.0 / f64::from(self.control_hz)
    }

    pub fn episode_seconds(&self) -> f64 {
        f64::from(self.horizon) * self.control_dt()
    }

    pub fn physics_hz(&self) -> u32 {
        self.physics_substeps * self.control_hz
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.x_half_extent > 0.0 && self.y_half_extent > 0.0) {
            return bad("workspace extents must be positive");
        }
        if self.control_hz == 0 || self.physics_substeps == 0 || self.horizon == 0 {
            return bad("rates and horizon must be non-zero");
        }
        if (self.episode_seconds() - 2.5).abs() > 1e-9 {
            return bad("horizon / control_hz must span 2.5 s");
        }
        if self.physics_hz() != 100 {
            return bad("physics_substeps * control_hz must equal 100 Hz");
        }
        if !(self.translation_clamp > 0.0) {
            return bad("translation_clamp must be positive");
        }
        if !(self.max_width > 0.0 && self.width_rate > 0.0) {
            return bad("gripper width limits must be positive");
        }
        if !(self.close_width < self.release_width && self.release_width <= self.max_width) {
            return bad("close_width < release_width <= max_width required");
        }
        if self.gripper_home.iter().any(|v| !v.is_finite()) {
            return bad("gripper_home must be finite");
        }
        Ok(())
    }
}

/// The five graspable objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Apple,
    Orange,
    RubiksCube,
    Mug,
    LargeMarker,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 5] = [
        ObjectKind::Apple,
        ObjectKind::Orange,
        ObjectKind::RubiksCube,
        ObjectKind::Mug,
        ObjectKind::LargeMarker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Apple => "apple",
            ObjectKind::Orange => "orange",
            ObjectKind::RubiksCube => "rubiks_cube",
            ObjectKind::Mug => "mug",
            ObjectKind::LargeMarker => "large_marker",
        }
    }

    pub fn default_radius(self) -> f64 {
        match self {
            ObjectKind::Apple => 0.040,
            ObjectKind::Orange => 0.037,
            ObjectKind::RubiksCube => 0.035,
            ObjectKind::Mug => 0.045,
            ObjectKind::LargeMarker => 0.012,
        }
    }
}

impl std::fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub object_id: usize,
    pub name: ObjectKind,
    pub radius: f64,
}

impl ObjectSpec {
    pub fn standard_set() -> Vec<ObjectSpec> {
        ObjectKind::ALL
            .iter()
            .enumerate()
            .map(|(object_id, &name)| ObjectSpec { object_id, name, radius: name.default_radius() })
            .collect()
    }
}

/// Full environment configuration; its hash pins datasets and protocol sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(default)]
    pub workspace: WorkspaceConfig,
    #[serde(default = "ObjectSpec::standard_set")]
    pub objects: Vec<ObjectSpec>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { workspace: WorkspaceConfig::default(), objects: ObjectSpec::standard_set() }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        if self.objects.is_empty() || self.objects.len() > 5 {
            return Err(Error::InvalidConfig("scene needs 1 to 5 objects".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (i, spec) in self.objects.iter().enumerate() {
            if spec.object_id != i {
                return Err(Error::InvalidConfig(format!("object ids must be 0..n, got {} at {}", spec.object_id, i)));
            }
            if !(spec.radius > 0.0) {
                return Err(Error::InvalidConfig(format!("radius of {} must be positive", spec.name)));
            }
            if !names.insert(spec.name) {
                return Err(Error::InvalidConfig(format!("duplicate object {}", spec.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn spec(&self, object_id: usize) -> Option<&ObjectSpec> {
        self.objects.get(object_id)
    }

    pub fn max_radius(&self) -> f64 {
        self.objects.iter().map(|s| s.radius).fold(0.0, f64::max)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: EnvConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
