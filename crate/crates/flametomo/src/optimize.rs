//! Loss assembly (Eq. 1 style L2 data term + weighted regularizer),
//! gradient-descent loop, and epoch bookkeeping.

use std::time::Instant;

use crate::autodiff::{Differentiable, ParamVector, Tape};
use crate::geometry::{self, Camera, GridGeometry, Ray};
use crate::neural::{ad_penalty_node, Adam, NeuralRepresentation};
use crate::render::{
    plan_fine_samples, ray_seed, render_ray_taped, IlsKernel, Measurement, RenderMode, SceneRep,
};
use crate::spectra::KappaEvaluator;
use crate::voxel::{fd_penalty_node, PenaltyKind, VoxelRepresentation};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    None,
    Tikhonov,
    TotalVariation,
}

impl Regularizer {
    fn kind(self) -> Option<PenaltyKind> {
        match self {
            Regularizer::None => None,
            Regularizer::Tikhonov => Some(PenaltyKind::Tikhonov),
            Regularizer::TotalVariation => Some(PenaltyKind::TotalVariation),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub regularizer: Regularizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_rays: Option<usize>,
    pub seed: u64,
    /// Adaptive first-order updates (Adam) instead of plain GD; intended
    /// for the neural path, off for acceptance runs.
    pub adaptive: bool,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_reg < 0.0 {
            return Err(Error::Config("lambda_reg must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.minibatch_rays == Some(0) {
            return Err(Error::Config("minibatch_rays must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub penalty: f64,
    pub total: f64,
    pub epoch_ms: f64,
    pub mem_bytes: usize,
}

/// The optimized scene representation.
#[derive(Debug, Clone)]
pub enum Representation {
    Voxel(VoxelRepresentation),
    Neural(NeuralRepresentation),
}

impl Representation {
    pub fn theta(&self) -> &ParamVector {
        match self {
            Representation::Voxel(v) => &v.theta,
            Representation::Neural(n) => &n.theta,
        }
    }

    pub fn theta_mut(&mut self) -> &mut ParamVector {
        match self {
            Representation::Voxel(v) => &mut v.theta,
            Representation::Neural(n) => &mut n.theta,
        }
    }

    pub fn as_scene(&self) -> SceneRep<'_> {
        match self {
            Representation::Voxel(v) => SceneRep::Voxel(v),
            Representation::Neural(n) => SceneRep::Neural(n),
        }
    }
}

/// One reconstruction problem: scene, forward-model pieces, target
/// measurement, and the per-epoch sampling state (minibatch, RNG seeds,
/// penalty points) that keeps loss evaluations reproducible within an
/// epoch.
pub struct ReconstructionProblem {
    pub rep: Representation,
    pub bounds: GridGeometry,
    pub evaluator: KappaEvaluator,
    pub kernel: IlsKernel,
    pub mode: RenderMode,
    pub measurement: Measurement,
    pub cfg: LossConfig,
    rays: Vec<(usize, usize, usize, Ray)>,
    epoch_seed: u64,
    active_rays: Vec<usize>,
    frozen_fine: Vec<Option<Vec<f64>>>,
    penalty_points: Vec<[f64; 3]>,
}

impl ReconstructionProblem {
    pub fn new(
        rep: Representation,
        bounds: GridGeometry,
        evaluator: KappaEvaluator,
        kernel: IlsKernel,
        mode: RenderMode,
        measurement: Measurement,
        cfg: LossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if kernel.output_grid != measurement.output_grid {
            return Err(Error::Shape(
                "measurement output grid differs from the ILS kernel's".into(),
            ));
        }
        let mut rays = Vec::new();
        for (c, camera) in measurement.cameras.iter().enumerate() {
            for (i, ray) in geometry::generate_rays(camera)?.into_iter().enumerate() {
                rays.push((c, i / camera.pixels_x, i % camera.pixels_x, ray));
            }
        }
        let mut problem = Self {
            rep,
            bounds,
            evaluator,
            kernel,
            mode,
            measurement,
            cfg,
            rays,
            epoch_seed: 0,
            active_rays: Vec::new(),
            frozen_fine: Vec::new(),
            penalty_points: Vec::new(),
        };
        problem.prepare_epoch(0)?;
        Ok(problem)
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.measurement.cameras
    }

    /// Fix the sampling state for one epoch: minibatch ray subset,
    /// hierarchical resampling seed, frozen fine-sample positions, and the
    /// penalty-point subset for the neural regularizer. Loss evaluations
    /// are pure (and smooth in the parameters) given this state.
    pub fn prepare_epoch(&mut self, epoch: usize) -> Result<()> {
        self.epoch_seed = self
            .cfg
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        let mut rng = ChaCha8Rng::seed_from_u64(self.epoch_seed);
        let n = self.rays.len();
        self.active_rays = match self.cfg.minibatch_rays {
            Some(m) if m < n => {
                let mut order: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let mut batch = order[..m].to_vec();
                batch.sort_unstable();
                batch
            }
            _ => (0..n).collect(),
        };
        if matches!(self.rep, Representation::Neural(_))
            && self.cfg.regularizer != Regularizer::None
        {
            // Spatial penalty sampled on a random 10% of voxel centers.
            let cells = self.bounds.n_cells();
            let count = (cells / 10).max(1);
            let d = self.bounds.dims;
            let mut picked = Vec::with_capacity(count);
            for _ in 0..count {
                let c = rng.gen_range(0..cells);
                picked.push(self.bounds.cell_center([
                    c % d[0],
                    (c / d[0]) % d[1],
                    c / (d[0] * d[1]),
                ]));
            }
            self.penalty_points = picked;
        }
        // Freeze the hierarchical fine-sample positions at this epoch's
        // parameters so the loss is smooth in theta for the whole epoch.
        let scene = self.rep.as_scene();
        let mut frozen = Vec::with_capacity(self.active_rays.len());
        for &ri in &self.active_rays {
            frozen.push(plan_fine_samples(
                &scene,
                &self.bounds,
                &self.evaluator,
                &self.mode,
                &self.rays[ri].3,
                ray_seed(self.epoch_seed, ri as u64),
            )?);
        }
        self.frozen_fine = frozen;
        Ok(())
    }

    fn with_theta(&self, theta: &[f64]) -> Representation {
        let mut rep = self.rep.clone();
        rep.theta_mut().values.copy_from_slice(theta);
        rep
    }

    /// Data term, penalty, and (optionally) the full gradient at the
    /// given parameters under the current epoch state.
    fn eval(&self, theta: &[f64], want_grad: bool) -> Result<(f64, f64, Option<Vec<f64>>)> {
        let rep = self.with_theta(theta);
        let scene = rep.as_scene();
        let mut data = 0.0;
        let mut grad = if want_grad {
            Some(vec![0.0; theta.len()])
        } else {
            None
        };
        for (slot, &ri) in self.active_rays.iter().enumerate() {
            let (cam, py, px, ray) = &self.rays[ri];
            let g = self.measurement.spectrum(*cam, *py, *px);
            let mut tape = Tape::new();
            let leaf = if want_grad {
                tape.leaf(theta.to_vec())
            } else {
                tape.constant(theta.to_vec())
            };
            let tr = render_ray_taped(
                &mut tape,
                leaf,
                &scene,
                &self.bounds,
                &self.evaluator,
                &self.kernel,
                &self.mode,
                ray,
                ray_seed(self.epoch_seed, ri as u64),
                self.frozen_fine[slot].as_deref(),
            )?;
            let resid = tape.sub_const(tr.output, g)?;
            let sq = tape.square(resid);
            let mut loss = tape.sum(sq);
            if let Some(coarse) = tr.coarse_output {
                let resid = tape.sub_const(coarse, g)?;
                let sq = tape.square(resid);
                let cl = tape.sum(sq);
                loss = tape.add(loss, cl)?;
            }
            data += tape.scalar(loss);
            if let Some(grad) = grad.as_mut() {
                let adj = tape.backward(loss);
                for (g, a) in grad.iter_mut().zip(&adj[leaf]) {
                    *g += a;
                }
            }
        }
        let mut penalty = 0.0;
        if let Some(kind) = self.cfg.regularizer.kind() {
            let mut tape = Tape::new();
            let leaf = if want_grad {
                tape.leaf(theta.to_vec())
            } else {
                tape.constant(theta.to_vec())
            };
            let node = match &rep {
                Representation::Voxel(v) => fd_penalty_node(v, &mut tape, leaf, kind)?,
                Representation::Neural(n) => {
                    ad_penalty_node(n, &mut tape, leaf, &self.penalty_points, kind)?
                }
            };
            penalty = tape.scalar(node);
            if let Some(grad) = grad.as_mut() {
                let adj = tape.backward(node);
                for (g, a) in grad.iter_mut().zip(&adj[leaf]) {
                    *g += self.cfg.lambda_reg * a;
                }
            }
        }
        Ok((data, penalty, grad))
    }

    /// The total loss as a differentiable function of the parameters.
    pub fn loss(&self) -> TotalLoss<'_> {
        TotalLoss { problem: self }
    }
}

pub struct TotalLoss<'a> {
    problem: &'a ReconstructionProblem,
}

impl Differentiable for TotalLoss<'_> {
    fn param_len(&self) -> usize {
        self.problem.rep.theta().len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        let (data, penalty, _) = self.problem.eval(theta, false)?;
        Ok(data + self.problem.cfg.lambda_reg * penalty)
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (data, penalty, grad) = self.problem.eval(theta, true)?;
        Ok((data + self.problem.cfg.lambda_reg * penalty, grad.unwrap()))
    }
}

/// Plain gradient-descent update; rejects non-finite gradient entries
/// with the offending parameter slice named.
pub fn gd_step(theta: &mut ParamVector, gradient: &[f64], learning_rate: f64) -> Result<()> {
    if gradient.len() != theta.len() {
        return Err(Error::Shape(format!(
            "gradient length {} does not match parameters ({})",
            gradient.len(),
            theta.len()
        )));
    }
    for (i, g) in gradient.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                slice: theta.slice_name(i).to_string(),
            });
        }
    }
    for (t, g) in theta.values.iter_mut().zip(gradient) {
        *t -= learning_rate * g;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReconstructionOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch at which the loss went non-finite; the representation holds
    /// the last good parameters in that case.
    pub diverged_at: Option<usize>,
}

/// Run the epoch loop: render, loss, gradient, step. The problem's
/// representation is updated in place; on a non-finite loss the last
/// good parameters are restored and the divergence epoch reported.
pub fn run_reconstruction(problem: &mut ReconstructionProblem) -> Result<ReconstructionOutcome> {
    let mut history = Vec::with_capacity(problem.cfg.epochs);
    let mem_bytes = problem.rep.theta().len() * std::mem::size_of::<f64>();
    let mut adam = problem
        .cfg
        .adaptive
        .then(|| Adam::new(problem.rep.theta().len(), problem.cfg.learning_rate));
    let mut last_good = problem.rep.theta().values.clone();
    let mut diverged_at = None;
    for epoch in 0..problem.cfg.epochs {
        let start = Instant::now();
        problem.prepare_epoch(epoch)?;
        let theta = problem.rep.theta().values.clone();
        let (data, penalty, grad) = problem.eval(&theta, true)?;
        let total = data + problem.cfg.lambda_reg * penalty;
        if !total.is_finite() {
            problem.rep.theta_mut().values.copy_from_slice(&last_good);
            diverged_at = Some(epoch);
            break;
        }
        last_good = theta;
        let grad = grad.unwrap();
        match adam.as_mut() {
            Some(adam) => {
                for g in &grad {
                    if !g.is_finite() {
                        return Err(Error::NonFiniteGradient {
                            slice: "adaptive step".into(),
                        });
                    }
                }
                adam.step(&mut problem.rep.theta_mut().values, &grad);
            }
            None => gd_step(problem.rep.theta_mut(), &grad, problem.cfg.learning_rate)?,
        }
        history.push(EpochRecord {
            epoch,
            data_loss: data,
            penalty,
            total,
            epoch_ms: start.elapsed().as_secs_f64() * 1e3,
            mem_bytes,
        });
    }
    Ok(ReconstructionOutcome {
        history,
        diverged_at,
    })
}

/// History CSV in the documented `epoch,data_loss,penalty,total,
/// epoch_ms,mem_bytes` layout.
pub fn write_history(history: &[EpochRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,data_loss,penalty,total,epoch_ms,mem_bytes")?;
    for r in history {
        writeln!(
            f,
            "{},{:.10e},{:.10e},{:.10e},{:.3},{}",
            r.epoch, r.data_loss, r.penalty, r.total, r.epoch_ms, r.mem_bytes
        )?;
    }
    Ok(())
}
