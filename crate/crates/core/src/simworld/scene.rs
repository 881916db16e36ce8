use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{self, Point};
use crate::error::{Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Axis-aligned workspace rectangle in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Point,
    pub max: Point,
}

impl Workspace {
    pub fn unit() -> Self {
        Self {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    /// Length used to scale success thresholds.
    pub fn side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn clamp(&self, p: Point) -> Point {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }
}

/// Object behaviour and its kinematic parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectKind {
    /// Panel rotating about `hinge`; the handle zone is a disc around `handle`
    /// (given at rest) that travels with the panel.
    HingedDoor {
        hinge: Point,
        angle_range: [f64; 2],
        handle: Point,
        handle_radius: f64,
        #[serde(default)]
        clockwise: bool,
    },
    /// Picked up when the gripper closes within `grasp_radius` of the centroid.
    LiftableItem { grasp_radius: f64 },
    /// Pushed away when the arm comes within `contact_radius` of the centroid.
    FreestandingItem { contact_radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: ObjectKind,
    pub polygon: Vec<Point>,
    /// Grey level in the environment layer.
    #[serde(default = "default_shade")]
    pub shade: f64,
    /// Radius of the start region placed at the centroid.
    #[serde(default = "default_region_radius")]
    pub region_radius: f64,
}

fn default_shade() -> f64 {
    0.6
}

fn default_region_radius() -> f64 {
    0.08
}

impl ObjectSpec {
    pub fn rest_centroid(&self) -> Point {
        geometry::centroid(&self.polygon)
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ObjectKind::HingedDoor { .. } => "hinged_door",
            ObjectKind::LiftableItem { .. } => "liftable_item",
            ObjectKind::FreestandingItem { .. } => "freestanding_item",
        }
    }
}

fn default_raster() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub workspace: Workspace,
    #[serde(default = "default_raster")]
    pub raster_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

fn default_version() -> u32 {
    SCENE_FORMAT_VERSION
}

impl SceneConfig {
    pub fn empty() -> Self {
        Self {
            version: SCENE_FORMAT_VERSION,
            name: "empty".into(),
            workspace: Workspace::unit(),
            raster_size: 64,
            seed: 0,
            objects: Vec::new(),
        }
    }

    /// First play kitchen: a cabinet door, a knife on the counter and a hanging pan.
    pub fn kitchen1() -> Self {
        Self {
            version: SCENE_FORMAT_VERSION,
            name: "kitchen1".into(),
            workspace: Workspace::unit(),
            raster_size: 64,
            seed: 0,
            objects: vec![
                ObjectSpec {
                    id: "door".into(),
                    kind: ObjectKind::HingedDoor {
                        hinge: [0.55, 0.55],
                        angle_range: [0.0, FRAC_PI_2],
                        handle: [0.78, 0.55],
                        handle_radius: 0.1,
                        clockwise: false,
                    },
                    polygon: vec![[0.55, 0.53], [0.80, 0.53], [0.80, 0.57], [0.55, 0.57]],
                    shade: 0.55,
                    region_radius: 0.08,
                },
                ObjectSpec {
                    id: "knife".into(),
                    kind: ObjectKind::LiftableItem { grasp_radius: 0.05 },
                    polygon: vec![[0.12, 0.20], [0.32, 0.20], [0.32, 0.23], [0.12, 0.23]],
                    shade: 0.85,
                    region_radius: 0.08,
                },
                ObjectSpec {
                    id: "pan".into(),
                    kind: ObjectKind::LiftableItem { grasp_radius: 0.06 },
                    polygon: vec![[0.15, 0.78], [0.27, 0.78], [0.27, 0.86], [0.15, 0.86]],
                    shade: 0.7,
                    region_radius: 0.08,
                },
            ],
        }
    }

    /// Second play kitchen: top shelf and fridge doors plus a pot.
    pub fn kitchen2() -> Self {
        Self {
            version: SCENE_FORMAT_VERSION,
            name: "kitchen2".into(),
            workspace: Workspace::unit(),
            raster_size: 64,
            seed: 0,
            objects: vec![
                ObjectSpec {
                    id: "shelf".into(),
                    kind: ObjectKind::HingedDoor {
                        hinge: [0.20, 0.80],
                        angle_range: [0.0, FRAC_PI_2],
                        handle: [0.40, 0.80],
                        handle_radius: 0.08,
                        clockwise: true,
                    },
                    polygon: vec![[0.20, 0.78], [0.42, 0.78], [0.42, 0.82], [0.20, 0.82]],
                    shade: 0.5,
                    region_radius: 0.08,
                },
                ObjectSpec {
                    id: "fridge".into(),
                    kind: ObjectKind::HingedDoor {
                        hinge: [0.85, 0.25],
                        angle_range: [0.0, FRAC_PI_2],
                        handle: [0.85, 0.50],
                        handle_radius: 0.06,
                        clockwise: true,
                    },
                    polygon: vec![[0.83, 0.25], [0.87, 0.25], [0.87, 0.52], [0.83, 0.52]],
                    shade: 0.6,
                    region_radius: 0.08,
                },
                ObjectSpec {
                    id: "pot".into(),
                    kind: ObjectKind::FreestandingItem {
                        contact_radius: 0.06,
                    },
                    polygon: vec![[0.35, 0.25], [0.47, 0.25], [0.47, 0.35], [0.35, 0.35]],
                    shade: 0.75,
                    region_radius: 0.1,
                },
            ],
        }
    }

    /// Built-in scene by name.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "kitchen1" => Ok(Self::kitchen1()),
            "kitchen2" => Ok(Self::kitchen2()),
            "empty" => Ok(Self::empty()),
            other => Err(Error::Config(format!("unknown built-in scene `{other}`"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scene: SceneConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("scene file: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scene {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn object(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENE_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported scene version {} (expected {SCENE_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.raster_size < 16 {
            return Err(Error::Config("raster_size must be at least 16".into()));
        }
        if self.workspace.width() <= 0.0 || self.workspace.height() <= 0.0 {
            return Err(Error::Config("workspace must have positive extent".into()));
        }
        let mut seen = HashSet::new();
        for obj in &self.objects {
            if !seen.insert(obj.id.as_str()) {
                return Err(Error::Config(format!("duplicate object id `{}`", obj.id)));
            }
            if !geometry::is_simple(&obj.polygon) {
                return Err(Error::Config(format!("polygon of `{}` is not simple", obj.id)));
            }
            if !obj.polygon.iter().all(|&p| self.workspace.contains(p)) {
                return Err(Error::Config(format!("`{}` lies outside the workspace", obj.id)));
            }
            if !(0.0..=1.0).contains(&obj.shade) || obj.shade == 0.0 {
                return Err(Error::Config(format!("shade of `{}` must be in (0, 1]", obj.id)));
            }
            if obj.region_radius <= 0.0 {
                return Err(Error::Config(format!("region radius of `{}` must be > 0", obj.id)));
            }
            match &obj.kind {
                ObjectKind::HingedDoor {
                    angle_range,
                    handle_radius,
                    ..
                } => {
                    let [lo, hi] = *angle_range;
                    if !(0.0 <= lo && lo < hi && hi <= PI) {
                        return Err(Error::Config(format!(
                            "hinge range of `{}` must satisfy 0 <= lo < hi <= pi",
                            obj.id
                        )));
                    }
                    if *handle_radius <= 0.0 {
                        return Err(Error::Config(format!("handle radius of `{}` must be > 0", obj.id)));
                    }
                }
                ObjectKind::LiftableItem { grasp_radius: r }
                | ObjectKind::FreestandingItem { contact_radius: r } => {
                    if *r <= 0.0 {
                        return Err(Error::Config(format!("radius of `{}` must be > 0", obj.id)));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in ["kitchen1", "kitchen2", "empty"] {
            SceneConfig::builtin(name).unwrap().validate().unwrap();
        }
        assert!(SceneConfig::builtin("garage").is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let scene = SceneConfig::kitchen1();
        let text = scene.to_toml_string();
        assert!(text.contains("kind = \"hinged_door\""));
        assert_eq!(SceneConfig::from_toml_str(&text).unwrap(), scene);
    }

    #[test]
    fn rejects_bad_scenes() {
        let mut s = SceneConfig::kitchen1();
        s.raster_size = 8;
        assert!(s.validate().is_err());

        let mut s = SceneConfig::kitchen1();
        s.objects[1].id = "door".into();
        assert!(s.validate().is_err());

        let mut s = SceneConfig::kitchen1();
        s.objects[1].polygon = vec![[0.0, 0.0], [0.1, 0.1], [0.1, 0.0], [0.0, 0.1]];
        assert!(s.validate().is_err());

        let mut s = SceneConfig::kitchen1();
        s.objects[1].polygon[0] = [1.5, 0.2];
        assert!(s.validate().is_err());

        let mut s = SceneConfig::kitchen1();
        if let ObjectKind::HingedDoor { angle_range, .. } = &mut s.objects[0].kind {
            *angle_range = [0.0, 4.0];
        }
        assert!(s.validate().is_err());

        let mut s = SceneConfig::kitchen1();
        s.version = 7;
        assert!(s.validate().is_err());
    }
}
