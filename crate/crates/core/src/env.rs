//! Kinematic tabletop: disc objects on a table, a point gripper with a width,
//! and attachment-based grasping.

use serde::{Deserialize, Serialize};

use crate::config::{ObjectSpec, WorkspaceConfig};
use crate::error::{Error, Result};
use crate::placement::PlacementSample;

pub type Vec3 = [f64; 3];

/// Cartesian delta action. Rotation components are carried but inert.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action7 {
    pub d_pos: [f32; 3],
    pub d_rot: [f32; 3],
    /// -1 closes the gripper fully, +1 opens it fully.
    pub grip: f32,
}

impl Action7 {
    pub const DIM: usize = 7;

    pub fn new(d_pos: [f32; 3], grip: f32) -> Self {
        Self { d_pos, d_rot: [0.0; 3], grip }
    }

    pub fn to_array(&self) -> [f32; 7] {
        let [x, y, z] = self.d_pos;
        let [a, b, c] = self.d_rot;
        [x, y, z, a, b, c, self.grip]
    }

    pub fn from_slice(v: &[f32]) -> Result<Self> {
        if v.len() != Self::DIM {
            return Err(Error::InvalidAction(format!("expected 7 components, got {}", v.len())));
        }
        let a = Self { d_pos: [v[0], v[1], v[2]], d_rot: [v[3], v[4], v[5]], grip: v[6] };
        a.check_finite()?;
        Ok(a)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidAction("non-finite component".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub target_id: usize,
    pub text: String,
}

impl Instruction {
    pub fn for_object(spec: &ObjectSpec) -> Self {
        Self { target_id: spec.object_id, text: format!("grasp the {}", spec.name.name()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub spec: ObjectSpec,
    pub position: Vec3,
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub position: Vec3,
    pub width: f64,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub workspace: WorkspaceConfig,
    /// Scene objects ordered by `object_id`.
    pub objects: Vec<ObjectState>,
    pub gripper: GripperState,
    pub instruction: Instruction,
    pub step: u32,
    pub grasp_any_latch: bool,
    /// Set once the instructed object has been attached.
    pub instructed_latch: bool,
    pub rng_seed: u64,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    /// Scene index of an object that attached during this step.
    pub attached: Option<usize>,
    pub released: Option<usize>,
    /// Scene index of the object held after this step.
    pub holding: Option<usize>,
    pub instructed_distance: f64,
    pub nearest_distance: f64,
    pub displacement: f64,
    pub done: bool,
}

/// Object positions with identities, as seen by a privileged expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedObs {
    pub object_ids: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub radii: Vec<f64>,
    pub instruction_onehot: Vec<f64>,
    pub gripper_position: Vec3,
    pub gripper_width: f64,
    pub holding: Option<usize>,
    pub step: u32,
    pub horizon: u32,
}

impl PrivilegedObs {
    pub fn target_slot(&self) -> usize {
        argmax(&self.instruction_onehot)
    }
}

/// Object positions in a per-episode shuffled order with no identity labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindObs {
    /// Identity of each one-hot entry; slot order is unrelated.
    pub object_ids: Vec<usize>,
    pub slots: Vec<[f64; 2]>,
    pub instruction_onehot: Vec<f64>,
    pub gripper_position: Vec3,
    pub gripper_width: f64,
    pub step: u32,
    pub horizon: u32,
}

impl BlindObs {
    pub fn instructed_id(&self) -> usize {
        self.object_ids[argmax(&self.instruction_onehot)]
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn planar(p: &Vec3) -> [f64; 2] {
    [p[0], p[1]]
}

fn planar_dist(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Builds the initial state of an episode.
pub fn reset(
    workspace: &WorkspaceConfig,
    specs: &[ObjectSpec],
    placement: &PlacementSample,
    instruction: &Instruction,
    seed: u64,
) -> Result<EnvState> {
    if specs.is_empty() || specs.len() > 5 {
        return Err(Error::InvalidConfig(format!("scene has {} objects", specs.len())));
    }
    if placement.positions.len() != specs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} placed positions for {} objects",
            placement.positions.len(),
            specs.len()
        )));
    }
    if !specs.iter().any(|s| s.object_id == instruction.target_id) {
        return Err(Error::InvalidInstruction { target_id: instruction.target_id });
    }
    let mut objects: Vec<ObjectState> = specs
        .iter()
        .zip(&placement.positions)
        .map(|(spec, p)| ObjectState {
            spec: spec.clone(),
            position: [p[0], p[1], workspace.table_z],
            attached: false,
        })
        .collect();
    objects.sort_by_key(|o| o.spec.object_id);
    Ok(EnvState {
        workspace: workspace.clone(),
        objects,
        gripper: GripperState { position: workspace.gripper_home, width: workspace.max_width, velocity: [0.0; 3] },
        instruction: instruction.clone(),
        step: 0,
        grasp_any_latch: false,
        instructed_latch: false,
        rng_seed: seed,
    })
}

impl EnvState {
    pub fn is_done(&self) -> bool {
        self.step >= self.workspace.horizon
    }

    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.attached)
    }

    pub fn instructed_index(&self) -> usize {
        self.objects
            .iter()
            .position(|o| o.spec.object_id == self.instruction.target_id)
            .expect("reset guarantees the instructed object is present")
    }

    pub fn instructed_distance(&self) -> f64 {
        planar_dist(&self.gripper.position, &self.objects[self.instructed_index()].position)
    }

    /// Advances one control step.
    pub fn step(&mut self, action: &Action7) -> Result<StepInfo> {
        if self.is_done() {
            return Err(Error::EpisodeOver { step: self.step, horizon: self.workspace.horizon });
        }
        action.check_finite()?;
        let ws = &self.workspace;

        let mut delta = action.d_pos.map(f64::from);
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > ws.translation_clamp {
            let s = ws.translation_clamp / norm;
            delta.iter_mut().for_each(|v| *v *= s);
        }
        let grip = f64::from(action.grip).clamp(-1.0, 1.0);
        let commanded_width = (grip + 1.0) / 2.0 * ws.max_width;
        let width_change = (commanded_width - self.gripper.width).clamp(-ws.width_rate, ws.width_rate);

        let start = self.gripper.position;
        let start_width = self.gripper.width;
        let held = self.held();
        let n = ws.physics_substeps;
        for k in 1..=n {
            let frac = f64::from(k) / f64::from(n);
            let mut p = [start[0] + delta[0] * frac, start[1] + delta[1] * frac, start[2] + delta[2] * frac];
            p[2] = p[2].max(ws.table_z);
            self.gripper.position = p;
            self.gripper.width = (start_width + width_change * frac).clamp(0.0, ws.max_width);
            if let Some(h) = held {
                self.objects[h].position = p;
            }
        }
        let end = self.gripper.position;
        let dt = ws.control_dt();
        self.gripper.velocity = [(end[0] - start[0]) / dt, (end[1] - start[1]) / dt, (end[2] - start[2]) / dt];

        let mut info = StepInfo { displacement: planar_dist(&start, &end).hypot(end[2] - start[2]), ..Default::default() };

        if let Some(h) = held {
            if self.gripper.width > ws.release_width {
                let obj = &mut self.objects[h];
                obj.attached = false;
                obj.position[2] = ws.table_z;
                info.released = Some(h);
            }
        }

        if self.held().is_none()
            && commanded_width < ws.close_width
            && (end[2] - ws.table_z).abs() <= ws.capture_height
        {
            let candidate = self
                .objects
                .iter()
                .enumerate()
                .filter(|(i, _)| info.released != Some(*i))
                .map(|(i, o)| (i, planar_dist(&end, &o.position), o.spec.radius))
                .filter(|&(_, d, r)| d <= r + ws.capture_margin)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _, _)) = candidate {
                let obj = &mut self.objects[i];
                obj.attached = true;
                obj.position = end;
                self.grasp_any_latch = true;
                if obj.spec.object_id == self.instruction.target_id {
                    self.instructed_latch = true;
                }
                info.attached = Some(i);
            }
        }

        self.step += 1;
        info.holding = self.held();
        info.instructed_distance = self.instructed_distance();
        info.nearest_distance = self
            .objects
            .iter()
            .map(|o| planar_dist(&end, &o.position))
            .fold(f64::INFINITY, f64::min);
        info.done = self.is_done();
        Ok(info)
    }

    /// 15-dim proprioceptive vector: position, identity quaternion (wxyz),
    /// linear velocity, zero angular velocity, one zero pad, gripper width.
    pub fn encode_state15(&self) -> [f32; 15] {
        let g = &self.gripper;
        let mut s = [0.0f32; 15];
        s[0] = g.position[0] as f32;
        s[1] = g.position[1] as f32;
        s[2] = g.position[2] as f32;
        s[3] = 1.0;
        s[7] = g.velocity[0] as f32;
        s[8] = g.velocity[1] as f32;
        s[9] = g.velocity[2] as f32;
        s[14] = g.width as f32;
        s
    }

    fn onehot(&self) -> Vec<f64> {
        let t = self.instructed_index();
        (0..self.objects.len()).map(|i| if i == t { 1.0 } else { 0.0 }).collect()
    }

    pub fn observe_privileged(&self) -> PrivilegedObs {
        PrivilegedObs {
            object_ids: self.objects.iter().map(|o| o.spec.object_id).collect(),
            positions: self.objects.iter().map(|o| planar(&o.position)).collect(),
            radii: self.objects.iter().map(|o| o.spec.radius).collect(),
            instruction_onehot: self.onehot(),
            gripper_position: self.gripper.position,
            gripper_width: self.gripper.width,
            holding: self.held(),
            step: self.step,
            horizon: self.workspace.horizon,
        }
    }

    /// Slot `k` reports the position of scene object `permutation[k]`.
    pub fn observe_identity_blind(&self, permutation: &[usize]) -> Result<BlindObs> {
        let n = self.objects.len();
        if permutation.len() != n {
            return Err(Error::Permutation(format!("length {} for {} objects", permutation.len(), n)));
        }
        let mut seen = vec![false; n];
        for &p in permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Permutation(format!("{permutation:?} is not a bijection on 0..{n}")));
            }
        }
        Ok(BlindObs {
            object_ids: self.objects.iter().map(|o| o.spec.object_id).collect(),
            slots: permutation.iter().map(|&k| planar(&self.objects[k].position)).collect(),
            instruction_onehot: self.onehot(),
            gripper_position: self.gripper.position,
            gripper_width: self.gripper.width,
            step: self.step,
            horizon: self.workspace.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EnvConfig, ObjectKind};
    use crate::placement::Regime;

    fn scene(positions: Vec<[f64; 2]>, target: usize) -> EnvState {
        let cfg = EnvConfig::default();
        let specs = cfg.objects[..positions.len()].to_vec();
        let placement = PlacementSample { positions, regime: Regime::FullRandom, region_assignment: None, seed: 0 };
        reset(&cfg.workspace, &specs, &placement, &Instruction::for_object(&specs[target]), 0).unwrap()
    }

    fn far_scene() -> EnvState {
        scene(vec![[0.1, 0.15], [-0.1, 0.15], [0.0, 0.0], [-0.1, -0.15], [0.1, -0.15]], 0)
    }

    #[test]
    fn reset_puts_gripper_home() {
        let s = far_scene();
        assert_eq!(s.gripper.position, [0.0, -0.30, 0.10]);
        assert_eq!(s.gripper.width, 0.08);
        assert_eq!(s.step, 0);
        assert!(!s.grasp_any_latch);
        assert!(s.objects.iter().all(|o| !o.attached));
    }

    #[test]
    fn instruction_outside_scene_is_rejected() {
        let cfg = EnvConfig::default();
        let placement = PlacementSample {
            positions: vec![[0.0, 0.0]; 5],
            regime: Regime::FullRandom,
            region_assignment: None,
            seed: 0,
        };
        let bad = Instruction { target_id: 7, text: "grasp the thing".into() };
        let err = reset(&cfg.workspace, &cfg.objects, &placement, &bad, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidInstruction { target_id: 7 }));
    }

    #[test]
    fn instruction_text_template() {
        let spec = ObjectSpec { object_id: 2, name: ObjectKind::RubiksCube, radius: 0.035 };
        assert_eq!(Instruction::for_object(&spec).text, "grasp the rubiks_cube");
    }

    #[test]
    fn translation_is_clamped() {
        let mut s = far_scene();
        s.step(&Action7::new([0.5, 0.0, 0.0], 1.0)).unwrap();
        assert!((s.gripper.position[0] - 0.02).abs() < 1e-12);
        assert_eq!(s.gripper.position[1], -0.30);
    }

    #[test]
    fn no_attachment_out_of_capture_radius() {
        // Gripper lowered onto the table 0.10 m from the nearest object.
        let mut s = scene(vec![[0.1, -0.30]], 0);
        s.gripper.position = [0.0, -0.30, 0.01];
        let info = s.step(&Action7::new([0.0; 3], -1.0)).unwrap();
        assert_eq!(info.attached, None);
        assert!(!s.grasp_any_latch);
    }

    #[test]
    fn attaches_within_radius_plus_margin() {
        // apple radius 0.040, planar distance 0.050 <= 0.055
        let mut s = scene(vec![[0.05, 0.0]], 0);
        s.gripper.position = [0.0, 0.0, 0.01];
        let info = s.step(&Action7::new([0.0; 3], -1.0)).unwrap();
        assert_eq!(info.attached, Some(0));
        assert!(s.objects[0].attached);
        assert_eq!(planar(&s.objects[0].position), planar(&s.gripper.position));
        assert!(s.grasp_any_latch);
    }

    #[test]
    fn too_high_gripper_cannot_grasp() {
        let mut s = scene(vec![[0.0, 0.0]], 0);
        s.gripper.position = [0.0, 0.0, 0.05];
        let info = s.step(&Action7::new([0.0; 3], -1.0)).unwrap();
        assert_eq!(info.attached, None);
    }

    #[test]
    fn opening_releases_and_latch_persists() {
        let mut s = scene(vec![[0.0, 0.0]], 0);
        s.gripper.position = [0.0, 0.0, 0.01];
        s.step(&Action7::new([0.0; 3], -1.0)).unwrap();
        s.step(&Action7::new([0.0, 0.0, 0.02], -1.0)).unwrap();
        assert!(s.objects[0].attached);
        assert!((s.objects[0].position[2] - 0.03).abs() < 1e-6);
        // width 0.0 -> 0.04 (not released) -> 0.08 (released)
        let i1 = s.step(&Action7::new([0.0; 3], 1.0)).unwrap();
        assert_eq!(i1.released, None);
        let i2 = s.step(&Action7::new([0.0; 3], 1.0)).unwrap();
        assert_eq!(i2.released, Some(0));
        assert_eq!(s.objects[0].position[2], 0.0);
        assert!(s.grasp_any_latch);
    }

    #[test]
    fn nearest_candidate_wins() {
        let mut s = scene(vec![[0.03, 0.0], [-0.05, 0.0]], 1);
        s.gripper.position = [0.0, 0.0, 0.0];
        let info = s.step(&Action7::new([0.0; 3], -1.0)).unwrap();
        assert_eq!(info.attached, Some(0));
    }

    #[test]
    fn stepping_past_horizon_fails() {
        let mut s = far_scene();
        for _ in 0..50 {
            s.step(&Action7::default()).unwrap();
        }
        assert!(s.is_done());
        assert!(matches!(s.step(&Action7::default()), Err(Error::EpisodeOver { .. })));
    }

    #[test]
    fn non_finite_action_rejected() {
        let mut s = far_scene();
        assert!(s.step(&Action7::new([f32::NAN, 0.0, 0.0], 0.0)).is_err());
        assert!(Action7::from_slice(&[0.0; 6]).is_err());
    }

    #[test]
    fn state15_layout() {
        let mut s = far_scene();
        s.gripper.position = [0.1, -0.2, 0.05];
        let v = s.encode_state15();
        assert_eq!(v, [0.1, -0.2, 0.05, 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.08]);
        let mut t = s.clone();
        t.gripper.width = 0.03;
        let w = t.encode_state15();
        let diff: Vec<usize> = (0..15).filter(|&i| v[i] != w[i]).collect();
        assert_eq!(diff, [14]);
    }

    #[test]
    fn velocity_reflects_displacement() {
        let mut s = far_scene();
        s.step(&Action7::new([0.0, 0.02, 0.0], 1.0)).unwrap();
        assert!((s.gripper.velocity[1] - 0.4).abs() < 1e-6);
        assert!((s.encode_state15()[8] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn privileged_observation() {
        let s = scene(vec![[0.1, 0.15], [-0.1, 0.15], [0.0, 0.0], [-0.1, -0.15], [0.1, -0.15]], 2);
        let obs = s.observe_privileged();
        assert_eq!(obs.instruction_onehot, [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(obs.positions[0], [0.1, 0.15]);
        let single = scene(vec![[0.0, 0.1]], 0).observe_privileged();
        assert_eq!(single.positions.len(), 1);
        assert_eq!(single.instruction_onehot, [1.0]);
    }

    #[test]
    fn blind_observation() {
        let s = far_scene();
        let priv_obs = s.observe_privileged();
        let id = s.observe_identity_blind(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(id.slots, priv_obs.positions);
        let rev = s.observe_identity_blind(&[4, 3, 2, 1, 0]).unwrap();
        assert_eq!(rev.slots[0], priv_obs.positions[4]);
        assert_eq!(rev.instruction_onehot, priv_obs.instruction_onehot);
        assert!(s.observe_identity_blind(&[0, 1, 2]).is_err());
        assert!(s.observe_identity_blind(&[0, 0, 1, 2, 3]).is_err());
    }
}
