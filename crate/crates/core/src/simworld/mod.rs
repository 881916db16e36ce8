//! Deterministic 2D kinematic play kitchen.
//!
//! The world is a side view: `x` grows to the right and `y` grows upwards, so
//! lifting an item raises its `y` coordinate. Rasters are row-major with row 0
//! at the top of the workspace.

pub mod geometry;
mod scene;

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use geometry::Point;
pub use scene::{ObjectKind, ObjectSpec, SceneConfig, Workspace, SCENE_FORMAT_VERSION};

use crate::error::{Error, Result};

/// World units moved per unit of `dx`/`dy`.
pub const MOVE_SCALE: f64 = 0.05;
/// Radians turned per unit of `dθ`.
pub const TURN_SCALE: f64 = 0.25;
/// Gripper commands inside `(-GRIP_DEADBAND, GRIP_DEADBAND)` keep the current state.
pub const GRIP_DEADBAND: f64 = 0.25;
/// Grey level of arm pixels in the composite image.
pub const ARM_SHADE: f64 = 1.0;
/// Half extents of the gripper block around the end effector.
pub const GRIPPER_HALF: [f64; 2] = [0.045, 0.03];
/// Half width of the link from the top edge down to the gripper.
pub const LINK_HALF_WIDTH: f64 = 0.015;

/// Door success: fraction of the hinge range that must be swept.
pub const DOOR_SUCCESS_FRACTION: f64 = 0.6;
/// Lift success: height offset as a fraction of the workspace side.
pub const LIFT_SUCCESS_FRACTION: f64 = 0.1;
/// Push success: displacement as a fraction of the workspace side.
pub const PUSH_SUCCESS_FRACTION: f64 = 0.05;

pub const ACTION_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub gripper: Gripper,
}

impl ArmPose {
    pub fn position(&self) -> Point {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreePose {
    pub x: f64,
    pub y: f64,
    pub lifted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub arm: ArmPose,
    pub articulations: BTreeMap<String, f64>,
    /// Centroid position of each free item.
    pub free_poses: BTreeMap<String, FreePose>,
    pub time_step: u64,
}

/// `(dx, dy, dθ, grip)`, each clamped to `[-1, 1]` on use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn zero() -> Self {
        Action([0.0; ACTION_DIM])
    }

    pub fn new(dx: f64, dy: f64, dtheta: f64, grip: f64) -> Self {
        Action([dx, dy, dtheta, grip])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut a = [0.0; ACTION_DIM];
        a.copy_from_slice(&v[..ACTION_DIM]);
        Action(a)
    }

    pub fn clamped(&self) -> Self {
        // NaN components become 0 so that stepping stays total
        Action(self.0.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
    }
}

/// Layered raster: the composite camera image plus the two layers it is made of.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub size: usize,
    pub composite: Vec<f64>,
    pub agent_layer: Vec<bool>,
    pub env_layer: Vec<f64>,
}

impl Observation {
    /// Composite image average-pooled to `side x side`.
    pub fn downsampled(&self, side: usize) -> Result<Vec<f64>> {
        average_pool(&self.composite, self.size, side)
    }
}

/// Average-pools a square `size x size` image down to `side x side`.
pub fn average_pool(img: &[f64], size: usize, side: usize) -> Result<Vec<f64>> {
    if side == 0 || size % side != 0 || img.len() != size * size {
        return Err(Error::dims(
            format!("square image divisible into {side}x{side}"),
            format!("{} pixels at size {size}", img.len()),
        ));
    }
    let f = size / side;
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; side * side];
    for r in 0..size {
        for c in 0..size {
            out[(r / f) * side + c / f] += img[r * size + c];
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub object_id: String,
    pub center: Point,
    pub radius: f64,
}

/// Scene plus the rules that move it.
#[derive(Debug, Clone)]
pub struct Simulator {
    scene: SceneConfig,
}

impl Simulator {
    pub fn new(scene: SceneConfig) -> Result<Self> {
        scene.validate()?;
        Ok(Self { scene })
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn raster_size(&self) -> usize {
        self.scene.raster_size
    }

    /// One start region per object, centred on its rest centroid.
    pub fn regions(&self) -> Vec<RegionDescriptor> {
        self.scene
            .objects
            .iter()
            .map(|o| RegionDescriptor {
                object_id: o.id.clone(),
                center: o.rest_centroid(),
                radius: o.region_radius,
            })
            .collect()
    }

    pub fn region(&self, object_id: &str) -> Result<RegionDescriptor> {
        self.regions()
            .into_iter()
            .find(|r| r.object_id == object_id)
            .ok_or_else(|| Error::UnknownRegion(object_id.to_string()))
    }

    /// Objects at rest, arm uniformly inside the region disc.
    pub fn reset(&self, region: &RegionDescriptor, seed: u64) -> Result<WorldState> {
        if self.scene.object(&region.object_id).is_none() {
            return Err(Error::UnknownRegion(region.object_id.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = region.radius * rng.random::<f64>().sqrt();
        let phi = 2.0 * PI * rng.random::<f64>();
        let pos = self.scene.workspace.clamp([
            region.center[0] + r * phi.cos(),
            region.center[1] + r * phi.sin(),
        ]);
        Ok(self.rest_state(pos))
    }

    /// Every object at rest with the arm at `pos`, gripper open.
    pub fn rest_state(&self, pos: Point) -> WorldState {
        let mut articulations = BTreeMap::new();
        let mut free_poses = BTreeMap::new();
        for obj in &self.scene.objects {
            match &obj.kind {
                ObjectKind::HingedDoor { angle_range, .. } => {
                    articulations.insert(obj.id.clone(), angle_range[0]);
                }
                _ => {
                    let c = obj.rest_centroid();
                    free_poses.insert(
                        obj.id.clone(),
                        FreePose {
                            x: c[0],
                            y: c[1],
                            lifted: false,
                        },
                    );
                }
            }
        }
        WorldState {
            arm: ArmPose {
                x: pos[0],
                y: pos[1],
                theta: 0.0,
                gripper: Gripper::Open,
            },
            articulations,
            free_poses,
            time_step: 0,
        }
    }

    /// Current position of a door's handle point.
    pub fn handle_position(&self, obj: &ObjectSpec, angle: f64) -> Option<Point> {
        match &obj.kind {
            ObjectKind::HingedDoor {
                hinge,
                angle_range,
                handle,
                clockwise,
                ..
            } => {
                let sign = if *clockwise { -1.0 } else { 1.0 };
                Some(geometry::rotate_about(*handle, *hinge, sign * (angle - angle_range[0])))
            }
            _ => None,
        }
    }

    pub fn step(&self, state: &WorldState, action: &Action) -> WorldState {
        let a = action.clamped().0;
        let ws = &self.scene.workspace;
        let mut next = state.clone();
        let prev = state.arm.position();
        let target = ws.clamp([prev[0] + a[0] * MOVE_SCALE, prev[1] + a[1] * MOVE_SCALE]);
        let delta = geometry::sub(target, prev);
        let moving = delta != [0.0, 0.0];
        next.arm.x = target[0];
        next.arm.y = target[1];
        next.arm.theta = (state.arm.theta + a[2] * TURN_SCALE).clamp(-FRAC_PI_2, FRAC_PI_2);
        next.arm.gripper = if a[3] >= GRIP_DEADBAND {
            Gripper::Closed
        } else if a[3] <= -GRIP_DEADBAND {
            Gripper::Open
        } else {
            state.arm.gripper
        };
        let closed = next.arm.gripper == Gripper::Closed;
        let mut holding = state.free_poses.values().any(|p| p.lifted);

        for obj in &self.scene.objects {
            match &obj.kind {
                ObjectKind::HingedDoor {
                    hinge,
                    angle_range,
                    handle_radius,
                    clockwise,
                    ..
                } => {
                    if !moving {
                        continue;
                    }
                    let angle = state.articulations[&obj.id];
                    let handle = self.handle_position(obj, angle).expect("door");
                    if geometry::dist(prev, handle) > *handle_radius {
                        continue;
                    }
                    let r = geometry::sub(handle, *hinge);
                    let len = geometry::norm(r);
                    let sign = if *clockwise { -1.0 } else { 1.0 };
                    let tangent = [-sign * r[1] / len, sign * r[0] / len];
                    let swept = geometry::dot(delta, tangent) / len;
                    let new_angle = (angle + swept).clamp(angle_range[0], angle_range[1]);
                    next.articulations.insert(obj.id.clone(), new_angle);
                }
                ObjectKind::LiftableItem { grasp_radius } => {
                    let rest = obj.rest_centroid();
                    let pose = next.free_poses.get_mut(&obj.id).expect("item pose");
                    if pose.lifted {
                        if closed {
                            let p = ws.clamp([pose.x + delta[0], pose.y + delta[1]]);
                            pose.x = p[0];
                            pose.y = p[1];
                        } else {
                            // released: drops back onto its resting height
                            pose.lifted = false;
                            pose.y = rest[1];
                            holding = false;
                        }
                    } else if closed
                        && !holding
                        && geometry::dist(target, [pose.x, pose.y]) <= *grasp_radius
                    {
                        pose.lifted = true;
                        holding = true;
                    }
                }
                ObjectKind::FreestandingItem { contact_radius } => {
                    if !moving {
                        continue;
                    }
                    let pose = next.free_poses.get_mut(&obj.id).expect("item pose");
                    let c = [pose.x, pose.y];
                    let d = geometry::dist(target, c);
                    if d >= *contact_radius {
                        continue;
                    }
                    let dir = if d > 1e-12 {
                        geometry::sub(c, target).map(|v| v / d)
                    } else {
                        let n = geometry::norm(delta);
                        delta.map(|v| v / n)
                    };
                    let p = ws.clamp([
                        target[0] + dir[0] * contact_radius,
                        target[1] + dir[1] * contact_radius,
                    ]);
                    pose.x = p[0];
                    pose.y = p[1];
                }
            }
        }
        next.time_step = state.time_step + 1;
        next
    }

    /// Footprint of an object in world coordinates for the given state.
    pub fn object_polygon(&self, obj: &ObjectSpec, state: &WorldState) -> Vec<Point> {
        match &obj.kind {
            ObjectKind::HingedDoor {
                hinge,
                angle_range,
                clockwise,
                ..
            } => {
                let sign = if *clockwise { -1.0 } else { 1.0 };
                let angle = state.articulations[&obj.id];
                obj.polygon
                    .iter()
                    .map(|&p| geometry::rotate_about(p, *hinge, sign * (angle - angle_range[0])))
                    .collect()
            }
            _ => {
                let rest = obj.rest_centroid();
                let pose = &state.free_poses[&obj.id];
                geometry::translate(&obj.polygon, [pose.x - rest[0], pose.y - rest[1]])
            }
        }
    }

    /// Gripper block and link polygons of the arm.
    pub fn arm_polygons(&self, arm: &ArmPose) -> [Vec<Point>; 2] {
        let gripper = geometry::oriented_rect(
            arm.position(),
            GRIPPER_HALF[0],
            GRIPPER_HALF[1],
            arm.theta,
        );
        let top = self.scene.workspace.max[1];
        let link = vec![
            [arm.x - LINK_HALF_WIDTH, arm.y],
            [arm.x + LINK_HALF_WIDTH, arm.y],
            [arm.x + LINK_HALF_WIDTH, top],
            [arm.x - LINK_HALF_WIDTH, top],
        ];
        [gripper, link]
    }

    /// World coordinates of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        let ws = &self.scene.workspace;
        let n = self.scene.raster_size as f64;
        [
            ws.min[0] + (col as f64 + 0.5) * ws.width() / n,
            ws.max[1] - (row as f64 + 0.5) * ws.height() / n,
        ]
    }

    /// Calls `paint` for each pixel whose centre lies inside `poly`.
    fn rasterize(&self, poly: &[Point], mut paint: impl FnMut(usize)) {
        if poly.len() < 3 {
            return;
        }
        let ws = &self.scene.workspace;
        let n = self.scene.raster_size;
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in poly {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        let to_col = |x: f64| ((x - ws.min[0]) / ws.width() * n as f64).floor();
        let to_row = |y: f64| ((ws.max[1] - y) / ws.height() * n as f64).floor();
        let c0 = to_col(xmin).max(0.0) as usize;
        let c1 = (to_col(xmax).max(0.0) as usize).min(n - 1);
        let r0 = to_row(ymax).max(0.0) as usize;
        let r1 = (to_row(ymin).max(0.0) as usize).min(n - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if geometry::contains(poly, self.pixel_center(r, c)) {
                    paint(r * n + c);
                }
            }
        }
    }

    /// Environment layer alone (objects at their current poses).
    pub fn render_env(&self, state: &WorldState) -> Vec<f64> {
        let n = self.scene.raster_size;
        let mut env = vec![0.0; n * n];
        for obj in &self.scene.objects {
            let poly = self.object_polygon(obj, state);
            self.rasterize(&poly, |i| env[i] = obj.shade);
        }
        env
    }

    pub fn render_agent(&self, arm: &ArmPose) -> Vec<bool> {
        let n = self.scene.raster_size;
        let mut agent = vec![false; n * n];
        for poly in self.arm_polygons(arm) {
            self.rasterize(&poly, |i| agent[i] = true);
        }
        agent
    }

    pub fn render(&self, state: &WorldState) -> Observation {
        let env = self.render_env(state);
        let agent = self.render_agent(&state.arm);
        Observation {
            size: self.scene.raster_size,
            composite: compose(&env, &agent),
            agent_layer: agent,
            env_layer: env,
        }
    }

    pub fn success(&self, state: &WorldState, task_id: &str) -> Result<bool> {
        let obj = self
            .scene
            .object(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        let side = self.scene.workspace.side();
        Ok(match &obj.kind {
            ObjectKind::HingedDoor { angle_range, .. } => {
                let [lo, hi] = *angle_range;
                (state.articulations[&obj.id] - lo).abs() > DOOR_SUCCESS_FRACTION * (hi - lo)
            }
            ObjectKind::LiftableItem { .. } => {
                let pose = &state.free_poses[&obj.id];
                pose.lifted && pose.y - obj.rest_centroid()[1] > LIFT_SUCCESS_FRACTION * side
            }
            ObjectKind::FreestandingItem { .. } => {
                let pose = &state.free_poses[&obj.id];
                geometry::dist([pose.x, pose.y], obj.rest_centroid()) > PUSH_SUCCESS_FRACTION * side
            }
        })
    }

    /// Scripted state in which `task_id` is accomplished, used to render goal images.
    ///
    /// The arm rests where the manipulation would leave it (on the handle or the lifted
    /// item); `arm` only places it for pushed items.
    pub fn goal_state(&self, task_id: &str, arm: Point) -> Result<WorldState> {
        let obj = self
            .scene
            .object(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        let mut state = self.rest_state(arm);
        let side = self.scene.workspace.side();
        match &obj.kind {
            ObjectKind::HingedDoor { angle_range, .. } => {
                state.articulations.insert(obj.id.clone(), angle_range[1]);
                if let Some(h) = self.handle_position(obj, angle_range[1]) {
                    state.arm.x = h[0];
                    state.arm.y = h[1];
                }
            }
            ObjectKind::LiftableItem { .. } => {
                let c = obj.rest_centroid();
                let p = self.scene.workspace.clamp([c[0], c[1] + 2.0 * LIFT_SUCCESS_FRACTION * side]);
                state.free_poses.insert(
                    obj.id.clone(),
                    FreePose {
                        x: p[0],
                        y: p[1],
                        lifted: true,
                    },
                );
                state.arm.x = p[0];
                state.arm.y = p[1];
                state.arm.gripper = Gripper::Closed;
            }
            ObjectKind::FreestandingItem { .. } => {
                let c = obj.rest_centroid();
                let p = self.scene.workspace.clamp([c[0] + 2.0 * PUSH_SUCCESS_FRACTION * side, c[1]]);
                state.free_poses.insert(
                    obj.id.clone(),
                    FreePose {
                        x: p[0],
                        y: p[1],
                        lifted: false,
                    },
                );
            }
        }
        Ok(state)
    }
}

/// Composite = environment layer with arm pixels painted on top.
pub fn compose(env: &[f64], agent: &[bool]) -> Vec<f64> {
    env.iter()
        .zip(agent)
        .map(|(&e, &a)| if a { ARM_SHADE } else { e })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> Simulator {
        Simulator::new(SceneConfig::kitchen1()).unwrap()
    }

    fn door_handle_state(sim: &Simulator) -> WorldState {
        let door = sim.scene().object("door").unwrap();
        let h = sim.handle_position(door, 0.0).unwrap();
        sim.rest_state(h)
    }

    #[test]
    fn reset_places_arm_inside_region() {
        let sim = sim();
        for region in sim.regions() {
            for seed in 0..50 {
                let s = sim.reset(&region, seed).unwrap();
                let d = geometry::dist(s.arm.position(), region.center);
                assert!(d <= region.radius + 1e-12, "{} seed {seed}: {d}", region.object_id);
            }
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let sim = sim();
        let region = sim.region("door").unwrap();
        assert_eq!(sim.reset(&region, 7).unwrap(), sim.reset(&region, 7).unwrap());
        assert_ne!(sim.reset(&region, 7).unwrap(), sim.reset(&region, 8).unwrap());
    }

    #[test]
    fn reset_rejects_foreign_region() {
        let sim = sim();
        let bogus = RegionDescriptor {
            object_id: "fridge".into(),
            center: [0.5, 0.5],
            radius: 0.1,
        };
        assert!(matches!(sim.reset(&bogus, 7), Err(Error::UnknownRegion(_))));
    }

    #[test]
    fn zero_action_only_advances_time() {
        let sim = sim();
        let mut s = door_handle_state(&sim);
        s.arm.gripper = Gripper::Closed;
        let next = sim.step(&s, &Action::zero());
        let mut expect = s.clone();
        expect.time_step += 1;
        assert_eq!(next, expect);
    }

    #[test]
    fn oversized_actions_clamp() {
        let sim = sim();
        let s = door_handle_state(&sim);
        let big = sim.step(&s, &Action::new(5.0, -5.0, 5.0, 5.0));
        let unit = sim.step(&s, &Action::new(1.0, -1.0, 1.0, 1.0));
        assert_eq!(big, unit);
    }

    #[test]
    fn pushing_handle_opens_door() {
        let sim = sim();
        let door = sim.scene().object("door").unwrap();
        let s = door_handle_state(&sim);
        // independent contact oracle: arm within handle radius, motion along +y is the
        // tangent of a counter-clockwise door lying along +x from its hinge
        let handle = sim.handle_position(door, 0.0).unwrap();
        let ObjectKind::HingedDoor { hinge, handle_radius, .. } = door.kind else { unreachable!() };
        assert!(geometry::dist(s.arm.position(), handle) <= handle_radius);
        let expected = MOVE_SCALE / geometry::dist(handle, hinge);
        let next = sim.step(&s, &Action::new(0.0, 1.0, 0.0, 0.0));
        let angle = next.articulations["door"];
        assert!(angle > 0.0);
        assert!((angle - expected).abs() < 1e-12);
    }

    #[test]
    fn door_away_from_handle_does_not_move() {
        let sim = sim();
        let s = sim.rest_state([0.5, 0.9]);
        let next = sim.step(&s, &Action::new(0.0, 1.0, 0.0, 0.0));
        assert_eq!(next.articulations["door"], 0.0);
    }

    #[test]
    fn door_opening_reaches_success_and_stays() {
        let sim = sim();
        let mut s = door_handle_state(&sim);
        let mut was = false;
        for _ in 0..20 {
            let door = sim.scene().object("door").unwrap();
            let h = sim.handle_position(door, s.articulations["door"]).unwrap();
            // follow the handle tangent
            let r = geometry::sub(h, [0.55, 0.55]);
            let n = geometry::norm(r);
            s = sim.step(&s, &Action::new(-r[1] / n, r[0] / n, 0.0, 0.0));
            let now = sim.success(&s, "door").unwrap();
            assert!(!was || now, "door success must be monotone while opening");
            was = now;
        }
        assert!(was);
        assert!(s.articulations["door"] <= FRAC_PI_2);
    }

    #[test]
    fn closing_gripper_over_knife_lifts_it() {
        let sim = sim();
        let knife = sim.scene().object("knife").unwrap().rest_centroid();
        let s = sim.rest_state(knife);
        let s = sim.step(&s, &Action::new(0.0, 0.0, 0.0, 1.0));
        assert!(s.free_poses["knife"].lifted);
        let mut s2 = s.clone();
        for _ in 0..3 {
            s2 = sim.step(&s2, &Action::new(0.0, 1.0, 0.0, 1.0));
        }
        assert!((s2.free_poses["knife"].y - knife[1] - 3.0 * MOVE_SCALE).abs() < 1e-12);
        assert!(sim.success(&s2, "knife").unwrap());
        // release drops it back to the counter
        let s3 = sim.step(&s2, &Action::new(0.0, 0.0, 0.0, -1.0));
        assert!(!s3.free_poses["knife"].lifted);
        assert_eq!(s3.free_poses["knife"].y, knife[1]);
        assert!(!sim.success(&s3, "knife").unwrap());
    }

    #[test]
    fn closing_far_from_knife_grabs_nothing() {
        let sim = sim();
        let s = sim.rest_state([0.5, 0.2]);
        let s = sim.step(&s, &Action::new(0.0, 0.0, 0.0, 1.0));
        assert!(s.free_poses.values().all(|p| !p.lifted));
    }

    #[test]
    fn pot_is_pushed_on_contact() {
        let sim = Simulator::new(SceneConfig::kitchen2()).unwrap();
        let pot = sim.scene().object("pot").unwrap().rest_centroid();
        let mut s = sim.rest_state([pot[0] - 0.1, pot[1]]);
        for _ in 0..4 {
            s = sim.step(&s, &Action::new(1.0, 0.0, 0.0, 0.0));
        }
        let p = s.free_poses["pot"];
        assert!(p.x > pot[0]);
        assert!(sim.success(&s, "pot").unwrap());
    }

    #[test]
    fn success_predicates() {
        let sim = sim();
        let rest = sim.rest_state([0.5, 0.9]);
        for task in ["door", "knife", "pan"] {
            assert!(!sim.success(&rest, task).unwrap());
        }
        let mut s = rest.clone();
        s.articulations.insert("door".into(), 0.9 * FRAC_PI_2);
        assert!(sim.success(&s, "door").unwrap());
        s.articulations.insert("door".into(), 0.5 * FRAC_PI_2);
        assert!(!sim.success(&s, "door").unwrap());

        let knife = sim.scene().object("knife").unwrap().rest_centroid();
        let mut s = rest.clone();
        s.free_poses.insert(
            "knife".into(),
            FreePose {
                x: knife[0],
                y: knife[1] + 0.15,
                lifted: true,
            },
        );
        assert!(sim.success(&s, "knife").unwrap());
        s.free_poses.get_mut("knife").unwrap().lifted = false;
        assert!(!sim.success(&s, "knife").unwrap());
        assert!(matches!(sim.success(&rest, "sink"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn goal_states_satisfy_their_task() {
        for scene in [SceneConfig::kitchen1(), SceneConfig::kitchen2()] {
            let sim = Simulator::new(scene).unwrap();
            for obj in &sim.scene().objects {
                let g = sim.goal_state(&obj.id, [0.5, 0.95]).unwrap();
                assert!(sim.success(&g, &obj.id).unwrap(), "{}", obj.id);
            }
        }
    }

    #[test]
    fn empty_scene_renders_blank_environment() {
        let sim = Simulator::new(SceneConfig::empty()).unwrap();
        let obs = sim.render(&sim.rest_state([0.5, 0.5]));
        assert!(obs.env_layer.iter().all(|&v| v == 0.0));
        assert!(obs.agent_layer.iter().any(|&a| a));
        assert!(sim.regions().is_empty());
    }

    #[test]
    fn square_rasterizes_to_its_area() {
        let n = 64;
        for side in [0.1, 0.17, 0.3] {
            let mut scene = SceneConfig::empty();
            let (x0, y0) = (0.213, 0.377);
            scene.objects.push(ObjectSpec {
                id: "box".into(),
                kind: ObjectKind::FreestandingItem { contact_radius: 0.01 },
                polygon: vec![[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]],
                shade: 0.5,
                region_radius: 0.05,
            });
            let sim = Simulator::new(scene).unwrap();
            let env = sim.render_env(&sim.rest_state([0.9, 0.9]));
            let count = env.iter().filter(|&&v| v > 0.0).count() as f64;
            let px = side * n as f64;
            let area = px * px;
            let perimeter = 4.0 * px;
            assert!((count - area).abs() <= perimeter, "side {side}: {count} vs {area}");
        }
    }

    #[test]
    fn agent_drawn_on_top() {
        let sim = sim();
        let door = sim.scene().object("door").unwrap().rest_centroid();
        let obs = sim.render(&sim.rest_state(door));
        let mut overlap = 0;
        for i in 0..obs.composite.len() {
            if obs.agent_layer[i] {
                assert_eq!(obs.composite[i], ARM_SHADE);
                if obs.env_layer[i] > 0.0 {
                    overlap += 1;
                }
            } else {
                assert_eq!(obs.composite[i], obs.env_layer[i]);
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn regions_sit_on_centroids() {
        let sim = sim();
        let regions = sim.regions();
        assert_eq!(regions.len(), 3);
        let door = &regions[0];
        let c = geometry::centroid(&sim.scene().objects[0].polygon);
        assert_eq!(door.center, c);
        assert!((c[0] - 0.675).abs() < 1e-12 && (c[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = average_pool(&img, 4, 2).unwrap();
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        assert!(average_pool(&img, 4, 3).is_err());
    }
}
