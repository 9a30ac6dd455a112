//! Voxel-grid representation: raw parameter storage with sigmoid
//! squashing into physical bounds, nearest-cell sampling, noisy
//! initialization from a ground-truth field, and finite-difference
//! regularizer penalties.

use crate::autodiff::{NodeId, ParamVector, Tape};
use crate::fields::{GridField, ThermochemState};
use crate::geometry::GridGeometry;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Margin used when encoding values that sit on the bounds; keeps the
/// logit finite.
const ENCODE_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Tikhonov,
    TotalVariation,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(ENCODE_MARGIN, 1.0 - ENCODE_MARGIN);
    (p / (1.0 - p)).ln()
}

/// Voxel-grid scene representation. Parameters are stored raw and
/// squashed through a sigmoid into [t_floor, t_ceil] for temperature and
/// [0, 1] for mole fractions; the layout is field-major (all T, then each
/// species block), x-fastest within a block.
#[derive(Debug, Clone)]
pub struct VoxelRepresentation {
    pub geom: GridGeometry,
    pub species_list: Vec<String>,
    pub theta: ParamVector,
    pub t_floor: f64,
    pub t_ceil: f64,
}

impl VoxelRepresentation {
    pub fn layout(geom: &GridGeometry, species: &[String]) -> Vec<(String, std::ops::Range<usize>)> {
        let n = geom.n_cells();
        let mut layout = vec![("voxel.T".to_string(), 0..n)];
        for (s, name) in species.iter().enumerate() {
            layout.push((format!("voxel.X.{name}"), (s + 1) * n..(s + 2) * n));
        }
        layout
    }

    pub fn new(
        geom: GridGeometry,
        species_list: Vec<String>,
        t_floor: f64,
        t_ceil: f64,
    ) -> Result<Self> {
        if t_ceil <= t_floor || t_floor <= 0.0 {
            return Err(Error::Config("need t_ceil > t_floor > 0".into()));
        }
        let n = geom.n_cells() * (1 + species_list.len());
        let layout = Self::layout(&geom, &species_list);
        Ok(Self {
            theta: ParamVector::new(vec![0.0; n], layout)?,
            geom,
            species_list,
            t_floor,
            t_ceil,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.geom.n_cells()
    }

    pub fn n_fields(&self) -> usize {
        1 + self.species_list.len()
    }

    /// Flat parameter index of field `f` (0 = T) at cell `c`.
    pub fn param_index(&self, f: usize, c: usize) -> usize {
        f * self.n_cells() + c
    }

    pub fn decode_t(&self, raw: f64) -> f64 {
        self.t_floor + (self.t_ceil - self.t_floor) * sigmoid(raw)
    }

    pub fn decode_cell(&self, cell: usize) -> ThermochemState {
        let t = self.decode_t(self.theta.values[self.param_index(0, cell)]);
        let x = (0..self.species_list.len())
            .map(|s| sigmoid(self.theta.values[self.param_index(s + 1, cell)]))
            .collect();
        ThermochemState { t, x }
    }

    /// Encode a physical state into raw parameters for one cell.
    pub fn encode_cell(&mut self, cell: usize, state: &ThermochemState) {
        let t_norm = (state.t - self.t_floor) / (self.t_ceil - self.t_floor);
        let idx = self.param_index(0, cell);
        self.theta.values[idx] = logit(t_norm);
        for (s, &x) in state.x.iter().enumerate() {
            let idx = self.param_index(s + 1, cell);
            self.theta.values[idx] = logit(x);
        }
    }

    /// Piecewise-constant sampling: the containing cell's decoded state,
    /// or the ambient state (t_floor, X = 0) outside the box.
    pub fn sample(&self, point: [f64; 3]) -> ThermochemState {
        if !self.geom.contains(point) {
            return ThermochemState {
                t: self.t_floor,
                x: vec![0.0; self.species_list.len()],
            };
        }
        let idx = self.geom.cell_of(point);
        self.decode_cell(self.geom.flat_index(idx))
    }

    /// Decode every cell into a grid field.
    pub fn to_grid(&self) -> GridField {
        let data = (0..self.n_cells()).map(|c| self.decode_cell(c)).collect();
        GridField {
            geom: self.geom.clone(),
            species_list: self.species_list.clone(),
            data,
        }
    }

    /// Normalized state node (sigmoid of the raw parameters) for one
    /// cell: component 0 is (T - t_floor)/(t_ceil - t_floor), the rest
    /// are mole fractions.
    pub fn taped_state(&self, tape: &mut Tape, theta: NodeId, cell: usize) -> Result<NodeId> {
        let indices = (0..self.n_fields())
            .map(|f| self.param_index(f, cell))
            .collect();
        let gathered = tape.gather(theta, indices)?;
        Ok(tape.sigmoid_node(gathered))
    }
}

/// Build a voxel representation by encoding a ground-truth field with
/// multiplicative Gaussian noise: v -> v (1 + noise_frac z), clamped
/// into bounds.
pub fn init_from_truth(
    truth: &GridField,
    t_floor: f64,
    t_ceil: f64,
    noise_frac: f64,
    seed: u64,
) -> Result<VoxelRepresentation> {
    truth.validate()?;
    let mut rep = VoxelRepresentation::new(
        truth.geom.clone(),
        truth.species_list.clone(),
        t_floor,
        t_ceil,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 {
        // Box-Muller; one draw per call, discarding the pair partner to
        // keep the stream layout simple.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let n = truth.data.len();
    for c in 0..n {
        let state = &truth.data[c];
        let t_noisy = (state.t * (1.0 + noise_frac * normal())).clamp(t_floor, t_ceil);
        let mut x_noisy = Vec::with_capacity(state.x.len());
        for &x in &state.x {
            x_noisy.push((x * (1.0 + noise_frac * normal())).clamp(0.0, 1.0));
        }
        rep.encode_cell(
            c,
            &ThermochemState {
                t: t_noisy,
                x: x_noisy,
            },
        );
    }
    Ok(rep)
}

/// Finite-difference regularizer on the normalized fields, built on a
/// tape so its gradient flows into the raw parameters.
///
/// TV is the sum over fields and directions of the mean of |D_d f|/dd;
/// Tikhonov uses the squared directional derivative instead.
pub fn fd_penalty_node(
    rep: &VoxelRepresentation,
    tape: &mut Tape,
    theta: NodeId,
    kind: PenaltyKind,
) -> Result<NodeId> {
    let dims = rep.geom.dims;
    let sp = rep.geom.spacing();
    let n = rep.n_cells();
    let mut total: Option<NodeId> = None;
    for f in 0..rep.n_fields() {
        let base = f * n;
        let indices: Vec<usize> = (base..base + n).collect();
        let raw = tape.gather(theta, indices)?;
        let field = tape.sigmoid_node(raw);
        for d in 0..3 {
            if dims[d] < 2 {
                continue;
            }
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let mut nb = [i, j, k];
                        nb[d] += 1;
                        if nb[d] >= dims[d] {
                            continue;
                        }
                        lo.push(rep.geom.flat_index([i, j, k]));
                        hi.push(rep.geom.flat_index(nb));
                    }
                }
            }
            let f_lo = tape.gather(field, lo)?;
            let f_hi = tape.gather(field, hi)?;
            let diff = tape.sub(f_hi, f_lo)?;
            let scaled = tape.scale(diff, 1.0 / sp[d]);
            let contrib = match kind {
                PenaltyKind::TotalVariation => {
                    let a = tape.abs(scaled);
                    tape.mean(a)
                }
                PenaltyKind::Tikhonov => {
                    let s = tape.square(scaled);
                    tape.mean(s)
                }
            };
            total = Some(match total {
                None => contrib,
                Some(t) => tape.add(t, contrib)?,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.constant(vec![0.0])))
}

/// Plain penalty value.
pub fn fd_penalty(rep: &VoxelRepresentation, kind: PenaltyKind) -> Result<f64> {
    let mut tape = Tape::new();
    let theta = tape.constant(rep.theta.values.clone());
    let node = fd_penalty_node(rep, &mut tape, theta, kind)?;
    Ok(tape.scalar(node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, Differentiable};
    use rand::Rng;

    fn small_geom() -> GridGeometry {
        GridGeometry::new([0.0; 3], [1.0; 3], [4, 4, 4]).unwrap()
    }

    fn species() -> Vec<String> {
        vec!["CO2".into(), "H2O".into()]
    }

    #[test]
    fn zero_theta_decodes_to_midpoint() {
        let rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        let state = rep.decode_cell(0);
        assert!((state.t - 1125.0).abs() < 1e-12);
        assert!(state.x.iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn large_theta_saturates_at_ceiling() {
        let mut rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        let idx = rep.param_index(0, 0);
        rep.theta.values[idx] = 60.0;
        assert!((rep.decode_cell(0).t - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        let state = ThermochemState {
            t: 765.4321,
            x: vec![0.123456789, 0.87654321],
        };
        rep.encode_cell(5, &state);
        let back = rep.decode_cell(5);
        assert!((back.t - state.t).abs() < 1e-9 * state.t);
        for (a, b) in back.x.iter().zip(&state.x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_constant_within_cell_and_tie_break() {
        let mut rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        for c in 0..rep.n_cells() {
            rep.encode_cell(
                c,
                &ThermochemState {
                    t: 300.0 + c as f64,
                    x: vec![0.1, 0.2],
                },
            );
        }
        let a = rep.sample([0.05, 0.05, 0.05]);
        let b = rep.sample([0.2, 0.2, 0.2]);
        assert_eq!(a, b);
        // Point exactly on the shared x-face of cells (0,..) and (1,..)
        // belongs to the higher-index cell.
        let on_face = rep.sample([0.25, 0.05, 0.05]);
        let c1 = rep.decode_cell(rep.geom.flat_index([1, 0, 0]));
        assert_eq!(on_face, c1);
        // Outside the box: ambient.
        let outside = rep.sample([2.0, 0.0, 0.0]);
        assert_eq!(outside.t, 250.0);
        assert!(outside.x.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sample_matches_floor_index_oracle() {
        let rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let expected = [
                ((p[0] * 4.0).floor() as usize).min(3),
                ((p[1] * 4.0).floor() as usize).min(3),
                ((p[2] * 4.0).floor() as usize).min(3),
            ];
            assert_eq!(rep.geom.cell_of(p), expected);
        }
    }

    #[test]
    fn init_zero_noise_encodes_truth() {
        let geom = small_geom();
        let truth = crate::fields::GridField {
            geom: geom.clone(),
            species_list: species(),
            data: (0..64)
                .map(|c| ThermochemState {
                    t: 400.0 + 10.0 * c as f64,
                    x: vec![0.05, 0.10],
                })
                .collect(),
        };
        let rep = init_from_truth(&truth, 250.0, 2000.0, 0.0, 1).unwrap();
        for c in 0..64 {
            let s = rep.decode_cell(c);
            assert!((s.t - truth.data[c].t).abs() < 1e-9 * truth.data[c].t);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let truth = crate::fields::GridField {
            geom: small_geom(),
            species_list: species(),
            data: vec![
                ThermochemState {
                    t: 500.0,
                    x: vec![0.2, 0.3]
                };
                64
            ],
        };
        let a = init_from_truth(&truth, 250.0, 2000.0, 0.2, 9).unwrap();
        let b = init_from_truth(&truth, 250.0, 2000.0, 0.2, 9).unwrap();
        assert_eq!(a.theta.values, b.theta.values);
    }

    #[test]
    fn init_noise_ratio_statistics() {
        let geom = GridGeometry::new([0.0; 3], [1.0; 3], [16, 16, 16]).unwrap();
        let truth = crate::fields::GridField {
            geom: geom.clone(),
            species_list: vec![],
            data: vec![
                ThermochemState {
                    t: 900.0,
                    x: vec![]
                };
                4096
            ],
        };
        let rep = init_from_truth(&truth, 250.0, 2000.0, 0.2, 4).unwrap();
        let mut ratios = Vec::new();
        for c in 0..4096 {
            let v = rep.decode_cell(c).t;
            if v > 255.0 && v < 1995.0 {
                ratios.push(v / 900.0 - 1.0);
            }
        }
        assert!(ratios.len() >= 4000);
        let mean: f64 = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let var: f64 =
            ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / ratios.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.2).abs() < 0.02, "noise std {std}");
    }

    #[test]
    fn penalty_zero_for_constant_field() {
        let rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        assert_eq!(fd_penalty(&rep, PenaltyKind::TotalVariation).unwrap(), 0.0);
        assert_eq!(fd_penalty(&rep, PenaltyKind::Tikhonov).unwrap(), 0.0);
    }

    #[test]
    fn penalty_hand_values_two_cells() {
        // 2x1x1 grid, dx = 0.5 m, normalized T values (0, 1).
        let geom = GridGeometry::new([0.0; 3], [1.0, 0.5, 0.5], [2, 1, 1]).unwrap();
        let mut rep = VoxelRepresentation::new(geom, vec![], 250.0, 2000.0).unwrap();
        rep.theta.values[0] = -60.0; // sigmoid -> 0
        rep.theta.values[1] = 60.0; // sigmoid -> 1
        let tv = fd_penalty(&rep, PenaltyKind::TotalVariation).unwrap();
        let tk = fd_penalty(&rep, PenaltyKind::Tikhonov).unwrap();
        assert!((tv - 2.0).abs() < 1e-9, "TV {tv}");
        assert!((tk - 4.0).abs() < 1e-9, "Tikhonov {tk}");
    }

    struct PenaltyLoss {
        rep: VoxelRepresentation,
        kind: PenaltyKind,
    }
    impl Differentiable for PenaltyLoss {
        fn param_len(&self) -> usize {
            self.rep.theta.len()
        }
        fn value(&self, theta: &[f64]) -> crate::Result<f64> {
            let mut tape = Tape::new();
            let leaf = tape.constant(theta.to_vec());
            let node = fd_penalty_node(&self.rep, &mut tape, leaf, self.kind)?;
            Ok(tape.scalar(node))
        }
        fn value_and_grad(&self, theta: &[f64]) -> crate::Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let leaf = tape.leaf(theta.to_vec());
            let node = fd_penalty_node(&self.rep, &mut tape, leaf, self.kind)?;
            let adj = tape.backward(node);
            Ok((tape.scalar(node), adj[leaf].clone()))
        }
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let mut rep = VoxelRepresentation::new(small_geom(), species(), 250.0, 2000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for v in rep.theta.values.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let coords: Vec<usize> = (0..rep.theta.len()).step_by(13).collect();
        for kind in [PenaltyKind::Tikhonov, PenaltyKind::TotalVariation] {
            let loss = PenaltyLoss {
                rep: rep.clone(),
                kind,
            };
            let err = check_gradient(&loss, &rep.theta, &coords, 1e-5).unwrap();
            assert!(err < 1e-6, "{kind:?} gradient error {err}");
        }
    }
}
