//! Structured-text (TOML) experiment configuration: one file drives
//! synthesis, reconstruction, and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::fields::PhantomConfig;
use crate::geometry::{Camera, GridGeometry};
use crate::neural::{EncodingConfig, MlpConfig};
use crate::optimize::{LossConfig, Regularizer};
use crate::render::{build_ils, IlsKernel, RenderMode};
use crate::spectra::{load_line_database, KappaEvaluator, KappaTable, WavenumberGrid};
use crate::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub dims: [usize; 3],
    pub species: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectraSection {
    /// Line database path, relative to the config file.
    pub line_db: String,
    pub eta_min: f64,
    pub eta_max: f64,
    pub lbl_step: f64,
    pub ils_fwhm: f64,
    /// "exact" or "table".
    #[serde(default = "default_evaluator")]
    pub evaluator: String,
    #[serde(default = "default_table_knots")]
    pub table_knots: usize,
}

fn default_evaluator() -> String {
    "table".into()
}

fn default_table_knots() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub origin: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub focal_length: f64,
    pub sensor_halfwidth: f64,
    pub pixels: [usize; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub t_ambient: f64,
    pub t_peak: f64,
    pub base_radius: f64,
    pub spread_rate: f64,
    pub pool_radius: f64,
    pub flame_height: f64,
    #[serde(default)]
    pub fuel: String,
    pub x_peak: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub t_floor: f64,
    pub t_ceil: f64,
    /// Multiplicative init-noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise_frac: f64,
}

fn default_noise() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralSection {
    #[serde(default = "default_frequencies")]
    pub frequencies: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_n_coarse")]
    pub n_coarse: usize,
    #[serde(default = "default_n_fine")]
    pub n_fine: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
}

fn default_frequencies() -> usize {
    10
}
fn default_hidden_dim() -> usize {
    64
}
fn default_hidden_layers() -> usize {
    4
}
fn default_n_coarse() -> usize {
    64
}
fn default_n_fine() -> usize {
    64
}
fn default_pretrain_epochs() -> usize {
    300
}
fn default_pretrain_lr() -> f64 {
    1e-2
}

impl Default for NeuralSection {
    fn default() -> Self {
        Self {
            frequencies: default_frequencies(),
            hidden_dim: default_hidden_dim(),
            hidden_layers: default_hidden_layers(),
            n_coarse: default_n_coarse(),
            n_fine: default_n_fine(),
            pretrain_epochs: default_pretrain_epochs(),
            pretrain_lr: default_pretrain_lr(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    #[serde(default = "default_lambda")]
    pub lambda_reg: f64,
    #[serde(default = "default_lr_vg")]
    pub learning_rate_vg: f64,
    #[serde(default = "default_lr_nn")]
    pub learning_rate_nn: f64,
    pub epochs: usize,
    #[serde(default)]
    pub minibatch_rays_vg: Option<usize>,
    #[serde(default)]
    pub minibatch_rays_nn: Option<usize>,
    /// Adaptive first-order optimizer for the neural path.
    #[serde(default)]
    pub adaptive_nn: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    0.001
}
fn default_lr_vg() -> f64 {
    1e-2
}
fn default_lr_nn() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub spectra: SpectraSection,
    #[serde(rename = "camera")]
    pub cameras: Vec<CameraSection>,
    pub phantom: PhantomSection,
    pub bounds: BoundsSection,
    #[serde(default)]
    pub neural: NeuralSection,
    pub optimize: OptimizeSection,
}

/// Resolved runtime scene: geometry, forward-model pieces, cameras.
pub struct Scene {
    pub geom: GridGeometry,
    pub species: Vec<String>,
    pub cameras: Vec<Camera>,
    pub evaluator: KappaEvaluator,
    pub kernel: IlsKernel,
    pub phantom: PhantomConfig,
    pub config: ExperimentConfig,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Build the runtime scene; `config_dir` anchors relative paths.
    pub fn build(self, config_dir: &Path) -> Result<Scene> {
        let geom = GridGeometry::new(self.scene.box_min, self.scene.box_max, self.scene.dims)?;
        let species = self.scene.species.clone();
        if species.is_empty() {
            return Err(Error::Config("scene.species must not be empty".into()));
        }
        for s in self.phantom.x_peak.keys() {
            if !species.contains(s) {
                return Err(Error::Config(format!(
                    "phantom.x_peak species `{s}` is not in scene.species"
                )));
            }
        }
        if self.bounds.t_ceil <= self.bounds.t_floor || self.bounds.t_floor <= 0.0 {
            return Err(Error::Config("need bounds.t_ceil > bounds.t_floor > 0".into()));
        }
        let grid = WavenumberGrid::new(
            self.spectra.eta_min,
            self.spectra.eta_max,
            self.spectra.lbl_step,
        )?;
        let db_path = config_dir.join(&self.spectra.line_db);
        let db = load_line_database(&db_path)?;
        let evaluator = match self.spectra.evaluator.as_str() {
            "exact" => KappaEvaluator::Exact {
                species: species.clone(),
                db,
                grid: grid.clone(),
            },
            "table" => KappaEvaluator::Table(KappaTable::build(
                &species,
                &grid,
                &db,
                self.bounds.t_floor,
                self.bounds.t_ceil,
                self.spectra.table_knots,
            )?),
            other => {
                return Err(Error::Config(format!(
                    "spectra.evaluator must be `exact` or `table`, got `{other}`"
                )))
            }
        };
        let kernel = build_ils(self.spectra.ils_fwhm, &grid)?;
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for c in &self.cameras {
            let camera = Camera {
                origin: c.origin,
                look_at: c.look_at,
                up: c.up,
                focal_length: c.focal_length,
                sensor_halfwidth: c.sensor_halfwidth,
                pixels_x: c.pixels[0],
                pixels_y: c.pixels[1],
            };
            camera.validate()?;
            cameras.push(camera);
        }
        if cameras.is_empty() {
            return Err(Error::Config("at least one [[camera]] is required".into()));
        }
        let phantom = PhantomConfig {
            t_ambient: self.phantom.t_ambient,
            t_peak: self.phantom.t_peak,
            base_radius: self.phantom.base_radius,
            spread_rate: self.phantom.spread_rate,
            pool_radius: self.phantom.pool_radius,
            flame_height: self.phantom.flame_height,
            x_peak: self.phantom.x_peak.clone(),
            fuel: self.phantom.fuel.clone(),
        };
        phantom.validate()?;
        Ok(Scene {
            geom,
            species,
            cameras,
            evaluator,
            kernel,
            phantom,
            config: self,
        })
    }
}

impl Scene {
    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            num_frequencies: self.config.neural.frequencies,
            include_identity: true,
        }
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            hidden_dim: self.config.neural.hidden_dim,
            hidden_layers: self.config.neural.hidden_layers,
        }
    }

    pub fn hierarchical_mode(&self) -> RenderMode {
        RenderMode::Hierarchical {
            n_coarse: self.config.neural.n_coarse,
            n_fine: self.config.neural.n_fine,
        }
    }

    pub fn loss_config(&self, regularizer: Regularizer, neural: bool, seed: u64) -> LossConfig {
        let o = &self.config.optimize;
        LossConfig {
            lambda_reg: o.lambda_reg,
            regularizer,
            learning_rate: if neural {
                o.learning_rate_nn
            } else {
                o.learning_rate_vg
            },
            epochs: o.epochs,
            minibatch_rays: if neural {
                o.minibatch_rays_nn
            } else {
                o.minibatch_rays_vg
            },
            seed,
            adaptive: neural && o.adaptive_nn,
        }
    }
}

/// Load and build in one step.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let cfg = load_config(path)?;
    let dir = path.parent().map(PathBuf::from).unwrap_or_default();
    cfg.build(&dir)
}
