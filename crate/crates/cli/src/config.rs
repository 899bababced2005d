//! Run configuration: one TOML file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vertplan_core::eval::PhantomConfig;
use vertplan_core::geometry::Vec3;
use vertplan_core::optimize::FitConfig;
use vertplan_core::scenario::Rig;

use crate::error::{Category, CliError, ResultExt};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub deterministic: bool,
    pub phantom: PhantomSection,
    pub ssm: SsmSection,
    pub drr: DrrSection,
    pub fit: FitConfig,
    pub plan: PlanSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            deterministic: true,
            phantom: PhantomSection::default(),
            ssm: SsmSection::default(),
            drr: DrrSection::default(),
            fit: FitConfig::default(),
            plan: PlanSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Training shapes.
    pub count: usize,
    pub latent_dims: usize,
    /// Point spacing on the phantom surface (mm).
    pub spacing: f64,
    pub interior: bool,
    /// Held-out posed cases written under `cases/`.
    pub cases: usize,
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            count: 50,
            latent_dims: 8,
            spacing: p.spacing,
            interior: p.interior,
            cases: 20,
            max_rotation_deg: 5.0,
            max_translation_mm: 5.0,
        }
    }
}

impl PhantomSection {
    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            spacing: self.spacing,
            interior: self.interior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmSection {
    pub modes: usize,
    pub region_label: String,
}

impl Default for SsmSection {
    fn default() -> Self {
        Self {
            modes: vertplan_core::ssm::DEFAULT_MODES,
            region_label: "L1".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RigKind {
    Fitting,
    Planning,
    Clinical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Renderer {
    /// Exact path lengths through the mesh.
    Raycast,
    /// The differentiable splat renderer (needs a model and parameters).
    Splat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrrSection {
    pub rig: RigKind,
    pub renderer: Renderer,
    pub separation_deg: f64,
    pub isocenter: [f64; 3],
    /// Attenuation per mm of path length.
    pub density: f64,
    /// Additive Gaussian pixel noise, as a fraction of the image maximum.
    pub image_noise: f64,
    pub landmark_noise_px: f64,
    pub line_noise_px: f64,
    /// `pgm` or `png`.
    pub image_format: String,
}

impl Default for DrrSection {
    fn default() -> Self {
        Self {
            rig: RigKind::Planning,
            renderer: Renderer::Raycast,
            separation_deg: 90.0,
            isocenter: [0.0; 3],
            density: 1.0,
            image_noise: 0.0,
            landmark_noise_px: 1.0,
            line_noise_px: 1.0,
            image_format: "pgm".into(),
        }
    }
}

impl DrrSection {
    pub fn rig(&self) -> Rig {
        match self.rig {
            RigKind::Fitting => Rig::fitting(),
            RigKind::Planning => Rig::planning(),
            RigKind::Clinical => Rig::clinical(),
        }
    }

    pub fn isocenter(&self) -> Vec3 {
        Vec3::from(self.isocenter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub diameter: f64,
    pub clearance_threshold: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            diameter: vertplan_core::planning::DEFAULT_DIAMETER,
            clearance_threshold: vertplan_core::planning::DEFAULT_CLEARANCE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub voxel_spacing: f64,
    pub nsd_tau: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            voxel_spacing: 1.0,
            nsd_tau: vertplan_core::eval::DEFAULT_NSD_TAU,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).context(Category::Io, &format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).context(Category::Config, "config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::new(Category::Config, m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.fit.validate().context(Category::Config, "[fit]")?;
        if self.phantom.count < 2 || self.phantom.latent_dims == 0 {
            return bad("[phantom] needs count >= 2 and latent_dims >= 1".into());
        }
        if !(self.phantom.spacing > 0.0) {
            return bad("[phantom] spacing must be positive".into());
        }
        if self.ssm.modes == 0 {
            return bad("[ssm] modes must be positive".into());
        }
        let d = &self.drr;
        if !(d.density > 0.0) || d.image_noise < 0.0 || d.landmark_noise_px < 0.0 || d.line_noise_px < 0.0 {
            return bad("[drr] density must be positive and noise levels non-negative".into());
        }
        if !matches!(d.image_format.as_str(), "pgm" | "png") {
            return bad(format!("[drr] image_format must be pgm or png, got {}", d.image_format));
        }
        if !(self.plan.diameter > 0.0) || !(self.plan.clearance_threshold >= 0.0) {
            return bad("[plan] diameter must be positive and clearance_threshold non-negative".into());
        }
        if !(self.eval.nsd_tau >= 0.0) {
            return bad("[eval] nsd_tau must be non-negative".into());
        }
        Ok(())
    }

    /// Canonical TOML text of the effective configuration.
    pub fn serialized(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
