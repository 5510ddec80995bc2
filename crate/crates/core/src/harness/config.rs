use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::ctrl::Gains;
use crate::sim::{MaterialLibrary, SimConfig};
use crate::taskctl::{OptConfig, TaskLossKind};
use crate::ttnpb::{OnlineConfig, Scaling, TrainConfig};

/// Random-walk standard deviations: torque targets and normal-force target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSetting {
    pub theta: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub materials: Vec<String>,
    pub sigmas: Vec<SigmaSetting>,
    pub steps: usize,
    /// Unrecorded ticks of basic input at the start point.
    pub settle_ticks: usize,
    /// Start height above the nominal surface, mm.
    pub hover_mm: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            materials: ["desk", "paper", "plastic", "foam", "cardboard"].map(String::from).to_vec(),
            sigmas: vec![SigmaSetting { theta: 10.0, z: 30.0 }, SigmaSetting { theta: 3.0, z: 10.0 }],
            steps: 1000,
            settle_ticks: 15,
            hover_mm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub stroke_mm: f64,
    pub pitch_mm: f64,
    pub speed_mm_s: f64,
    /// Number of stroke lines; the lateral shift turns back at the last.
    pub lanes: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { stroke_mm: 120.0, pitch_mm: 20.0, speed_mm_s: 30.0, lanes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizeConfig {
    pub material: String,
    /// Material whose trained PB is the starting point; zero PB if absent.
    pub init: Option<String>,
    pub steps: usize,
    pub sigma: SigmaSetting,
}

impl Default for RecognizeConfig {
    fn default() -> Self {
        Self { material: "cardboard".into(), init: None, steps: 500, sigma: SigmaSetting { theta: 10.0, z: 30.0 } }
    }
}

/// Which PB the predictive controller uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PbMode {
    /// The trained PB of the material under the pad.
    Correct,
    /// The trained PB of another material.
    Wrong(String),
    /// No predictive control: constant basic input.
    Basic,
}

impl FromStr for PbMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "correct" => Ok(Self::Correct),
            "basic" => Ok(Self::Basic),
            _ => match s.strip_prefix("wrong:") {
                Some(name) if !name.is_empty() => Ok(Self::Wrong(name.to_string())),
                _ => Err(format!("unknown PB mode `{s}` (correct, wrong:<material>, basic)")),
            },
        }
    }
}

impl TryFrom<String> for PbMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PbMode> for String {
    fn from(m: PbMode) -> String {
        m.to_string()
    }
}

impl std::fmt::Display for PbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Correct => write!(f, "correct"),
            Self::Wrong(m) => write!(f, "wrong:{m}"),
            Self::Basic => write!(f, "basic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub material: String,
    pub loss: TaskLossKind,
    pub pb: PbMode,
    pub steps: usize,
    /// Leading ticks left out of the metric averages.
    pub warmup: usize,
    /// Past steps replayed to rebuild the recurrent state each tick.
    pub context: usize,
    pub lambda: f64,
    /// Also adapt the PB online while controlling.
    pub online_pb: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            material: "foam".into(),
            loss: TaskLossKind::TrackNormal,
            pb: PbMode::Correct,
            steps: 600,
            warmup: 20,
            context: 10,
            lambda: 0.01,
            online_pb: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Material library file; the built-in library when absent.
    pub material_library: Option<PathBuf>,
    pub collect: CollectConfig,
    pub trajectory: TrajectoryConfig,
    pub sim: SimConfig,
    pub gains: Gains,
    pub scaling: Scaling,
    pub train: TrainConfig,
    pub online: OnlineConfig,
    pub recognize: RecognizeConfig,
    pub control: ControlConfig,
    pub opt: OptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            material_library: None,
            collect: CollectConfig::default(),
            trajectory: TrajectoryConfig::default(),
            sim: SimConfig::default(),
            gains: Gains::default(),
            scaling: Scaling::default(),
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            recognize: RecognizeConfig::default(),
            control: ControlConfig::default(),
            opt: OptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn library(&self) -> Result<MaterialLibrary, HarnessError> {
        match &self.material_library {
            Some(p) => MaterialLibrary::load(p).map_err(|e| HarnessError::Config(e.to_string())),
            None => Ok(MaterialLibrary::builtin()),
        }
    }

    /// Checks ranges and that every referenced material exists.
    pub fn validate(&self) -> Result<MaterialLibrary, HarnessError> {
        let lib = self.library()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        let mut names: Vec<&str> = self.collect.materials.iter().map(String::as_str).collect();
        names.push(&self.recognize.material);
        names.push(&self.control.material);
        names.extend(self.recognize.init.as_deref());
        if let PbMode::Wrong(m) = &self.control.pb {
            names.push(m);
        }
        for n in names {
            if lib.get(n).is_none() {
                return bad(format!("unknown material `{n}`"));
            }
        }
        if self.collect.materials.is_empty() || self.collect.sigmas.is_empty() {
            return bad("collect needs at least one material and one sigma setting".into());
        }
        let sigmas = self.collect.sigmas.iter().chain([&self.recognize.sigma]);
        if sigmas.into_iter().any(|s| !(s.theta >= 0.0 && s.z >= 0.0)) {
            return bad("sigma settings must be non-negative".into());
        }
        let t = &self.trajectory;
        if !(t.stroke_mm > 0.0 && t.pitch_mm > 0.0 && t.speed_mm_s > 0.0) || t.lanes == 0 {
            return bad("trajectory stroke, pitch, speed and lanes must be positive".into());
        }
        if !(self.collect.hover_mm >= 0.0) {
            return bad("hover height must be non-negative".into());
        }
        let tr = &self.train;
        if tr.window == 0 || tr.stride == 0 || tr.batch == 0 || !(tr.lr > 0.0) {
            return bad("train window, stride, batch and lr must be positive".into());
        }
        let on = &self.online;
        if on.capacity < 2 || on.threshold > on.capacity || !(on.lr > 0.0) || !(on.decay >= 0.0) {
            return bad("online buffer needs capacity >= 2, threshold <= capacity, lr > 0 and decay >= 0".into());
        }
        if !(self.control.lambda >= 0.0) {
            return bad("smoothness weight must be non-negative".into());
        }
        self.opt.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(lib)
    }
}
