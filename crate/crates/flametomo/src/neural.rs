//! Neural implicit field: positional encoding, coarse/fine MLPs with
//! softplus hidden layers and sigmoid-squashed heads, hierarchical ray
//! sampling, pretraining, and autodiff spatial regularizers.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::autodiff::{NodeId, ParamVector, Tape};
use crate::fields::{GridField, ThermochemState};
use crate::geometry::Ray;
use crate::voxel::PenaltyKind;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_identity: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 10,
            include_identity: true,
        }
    }
}

impl EncodingConfig {
    pub fn dim(&self) -> usize {
        (if self.include_identity { 3 } else { 0 }) + 6 * self.num_frequencies
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(Error::Config("need at least one encoding frequency".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            hidden_layers: 4,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("MLP dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Coarse,
    Fine,
}

impl Network {
    pub fn slice_name(self) -> &'static str {
        match self {
            Network::Coarse => "nn.coarse",
            Network::Fine => "nn.fine",
        }
    }
}

/// Sinusoidal positional encoding of a point already normalized to
/// [-1, 1]^3: optional identity, then per coordinate and frequency k the
/// pair sin(2^k pi x), cos(2^k pi x).
pub fn positional_encoding(x: [f64; 3], cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    if cfg.include_identity {
        out.extend_from_slice(&x);
    }
    for c in x {
        for k in 0..cfg.num_frequencies {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * c;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// d(encoding)/d(normalized coordinate d) at the same point.
fn encoding_jacobian_col(x: [f64; 3], cfg: &EncodingConfig, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    if cfg.include_identity {
        for c in 0..3 {
            out.push(if c == d { 1.0 } else { 0.0 });
        }
    }
    for (c, &xc) in x.iter().enumerate() {
        for k in 0..cfg.num_frequencies {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            if c == d {
                out.push(f * (f * xc).cos());
                out.push(-f * (f * xc).sin());
            } else {
                out.push(0.0);
                out.push(0.0);
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One weight matrix + bias within the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_start: usize,
    b_start: usize,
    in_dim: usize,
    out_dim: usize,
}

/// Coarse + fine implicit field over an axis-aligned box, sharing one
/// architecture. Heads are squashed exactly as the voxel decode.
#[derive(Debug, Clone)]
pub struct NeuralRepresentation {
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub species_list: Vec<String>,
    pub t_floor: f64,
    pub t_ceil: f64,
    pub encoding: EncodingConfig,
    pub mlp: MlpConfig,
    pub theta: ParamVector,
}

impl NeuralRepresentation {
    pub fn n_outputs(&self) -> usize {
        1 + self.species_list.len()
    }

    fn layer_dims(enc: &EncodingConfig, mlp: &MlpConfig, n_out: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![(enc.dim(), mlp.hidden_dim)];
        for _ in 1..mlp.hidden_layers {
            dims.push((mlp.hidden_dim, mlp.hidden_dim));
        }
        dims.push((mlp.hidden_dim, n_out));
        dims
    }

    pub fn params_per_network(enc: &EncodingConfig, mlp: &MlpConfig, n_species: usize) -> usize {
        Self::layer_dims(enc, mlp, 1 + n_species)
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }

    /// Fresh representation with fan-in-scaled uniform initialization.
    pub fn new(
        box_min: [f64; 3],
        box_max: [f64; 3],
        species_list: Vec<String>,
        t_floor: f64,
        t_ceil: f64,
        encoding: EncodingConfig,
        mlp: MlpConfig,
        seed: u64,
    ) -> Result<Self> {
        encoding.validate()?;
        mlp.validate()?;
        if t_ceil <= t_floor || t_floor <= 0.0 {
            return Err(Error::Config("need t_ceil > t_floor > 0".into()));
        }
        for d in 0..3 {
            if box_max[d] <= box_min[d] {
                return Err(Error::Config("degenerate box".into()));
            }
        }
        let per_net = Self::params_per_network(&encoding, &mlp, species_list.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(2 * per_net);
        for _ in 0..2 {
            for (in_dim, out_dim) in Self::layer_dims(&encoding, &mlp, 1 + species_list.len()) {
                let scale = 1.0 / (in_dim as f64).sqrt();
                for _ in 0..in_dim * out_dim {
                    values.push(rng.gen_range(-scale..scale));
                }
                for _ in 0..out_dim {
                    values.push(0.0);
                }
            }
        }
        let layout = vec![
            ("nn.coarse".to_string(), 0..per_net),
            ("nn.fine".to_string(), per_net..2 * per_net),
        ];
        Ok(Self {
            box_min,
            box_max,
            species_list,
            t_floor,
            t_ceil,
            encoding,
            mlp,
            theta: ParamVector::new(values, layout)?,
        })
    }

    fn layers(&self, which: Network) -> Vec<LayerSpec> {
        let base = self.theta.slice_range(which.slice_name()).unwrap().start;
        let mut specs = Vec::new();
        let mut offset = base;
        for (in_dim, out_dim) in Self::layer_dims(&self.encoding, &self.mlp, self.n_outputs()) {
            specs.push(LayerSpec {
                w_start: offset,
                b_start: offset + in_dim * out_dim,
                in_dim,
                out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        specs
    }

    pub fn normalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for d in 0..3 {
            out[d] = 2.0 * (p[d] - self.box_min[d]) / (self.box_max[d] - self.box_min[d]) - 1.0;
        }
        out
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|d| p[d] >= self.box_min[d] && p[d] <= self.box_max[d])
    }

    /// Plain (untaped) forward pass; returns normalized outputs
    /// (component 0 is the normalized temperature).
    pub fn forward_normalized(&self, which: Network, point: [f64; 3]) -> Vec<f64> {
        let enc = positional_encoding(self.normalize_point(point), &self.encoding);
        let theta = &self.theta.values;
        let mut act = enc;
        let specs = self.layers(which);
        let last = specs.len() - 1;
        for (l, spec) in specs.iter().enumerate() {
            let mut next = Vec::with_capacity(spec.out_dim);
            for o in 0..spec.out_dim {
                let row = &theta[spec.w_start + o * spec.in_dim..spec.w_start + (o + 1) * spec.in_dim];
                let mut acc = theta[spec.b_start + o];
                for (w, a) in row.iter().zip(&act) {
                    acc += w * a;
                }
                next.push(if l == last { sigmoid(acc) } else { softplus(acc) });
            }
            act = next;
        }
        act
    }

    /// Physical state at a point; ambient outside the box, matching the
    /// voxel representation's convention.
    pub fn field_eval(&self, which: Network, point: [f64; 3]) -> ThermochemState {
        if !self.contains(point) {
            return ThermochemState {
                t: self.t_floor,
                x: vec![0.0; self.species_list.len()],
            };
        }
        let out = self.forward_normalized(which, point);
        ThermochemState {
            t: self.t_floor + (self.t_ceil - self.t_floor) * out[0],
            x: out[1..].to_vec(),
        }
    }

    fn taped_layer_params(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        spec: &LayerSpec,
    ) -> Result<(NodeId, NodeId)> {
        let w_idx: Vec<usize> = (spec.w_start..spec.w_start + spec.in_dim * spec.out_dim).collect();
        let b_idx: Vec<usize> = (spec.b_start..spec.b_start + spec.out_dim).collect();
        Ok((tape.gather(theta, w_idx)?, tape.gather(theta, b_idx)?))
    }

    /// Batched taped forward pass over points inside the box. Returns the
    /// normalized-output node with shape (1 + S) x batch, row-major, and
    /// optionally the three input-Jacobian nodes d(outputs)/d(physical
    /// coordinate), each of the same shape.
    pub fn taped_forward(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        which: Network,
        points: &[[f64; 3]],
        want_input_jac: bool,
    ) -> Result<(NodeId, Option<[NodeId; 3]>)> {
        let batch = points.len();
        if batch == 0 {
            return Err(Error::Shape("taped_forward: empty batch".into()));
        }
        let enc_dim = self.encoding.dim();
        // Column j holds the encoding of point j.
        let mut input = vec![0.0; enc_dim * batch];
        let mut jac: Vec<Vec<f64>> = vec![vec![0.0; enc_dim * batch]; 3];
        for (j, &p) in points.iter().enumerate() {
            let xn = self.normalize_point(p);
            for (r, v) in positional_encoding(xn, &self.encoding).into_iter().enumerate() {
                input[r * batch + j] = v;
            }
            if want_input_jac {
                for d in 0..3 {
                    // Chain through the [-1,1] normalization.
                    let scale = 2.0 / (self.box_max[d] - self.box_min[d]);
                    for (r, v) in encoding_jacobian_col(xn, &self.encoding, d)
                        .into_iter()
                        .enumerate()
                    {
                        jac[d][r * batch + j] = v * scale;
                    }
                }
            }
        }
        let mut act = tape.constant(input);
        let mut jac_nodes: Vec<NodeId> = if want_input_jac {
            jac.into_iter().map(|m| tape.constant(m)).collect()
        } else {
            Vec::new()
        };
        let specs = self.layers(which);
        let last = specs.len() - 1;
        for (l, spec) in specs.iter().enumerate() {
            let (w, b) = self.taped_layer_params(tape, theta, spec)?;
            let lin = tape.matmul(w, act, spec.out_dim, spec.in_dim, batch)?;
            let pre = tape.add_bias_cols(lin, b, spec.out_dim, batch)?;
            for jn in &mut jac_nodes {
                *jn = tape.matmul(w, *jn, spec.out_dim, spec.in_dim, batch)?;
            }
            if l == last {
                act = tape.sigmoid_node(pre);
                if want_input_jac {
                    let dout = tape.sigmoid_deriv_node(pre);
                    for jn in &mut jac_nodes {
                        *jn = tape.mul(dout, *jn)?;
                    }
                }
            } else {
                act = tape.softplus_node(pre);
                if want_input_jac {
                    // softplus' = sigmoid of the pre-activation.
                    let dact = tape.sigmoid_node(pre);
                    for jn in &mut jac_nodes {
                        *jn = tape.mul(dact, *jn)?;
                    }
                }
            }
        }
        let jac_out = if want_input_jac {
            Some([jac_nodes[0], jac_nodes[1], jac_nodes[2]])
        } else {
            None
        };
        Ok((act, jac_out))
    }
}

/// Stratified sampling of `n` t-values along a hitting ray: one uniform
/// draw in each equal sub-interval of [t_near, t_far].
pub fn stratified_samples(ray: &Ray, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Domain("need at least one stratified sample".into()));
    }
    if !(ray.t_far > ray.t_near) {
        return Err(Error::Domain("stratified_samples on a non-hitting ray".into()));
    }
    let span = ray.t_far - ray.t_near;
    Ok((0..n)
        .map(|i| ray.t_near + span * (i as f64 + rng.gen::<f64>()) / n as f64)
        .collect())
}

/// NeRF-style importance weights from Planck-mean absorption per coarse
/// sample: alpha_i = 1 - exp(-kappa_i delta_i), w_i = alpha_i prod_{j<i}
/// (1 - alpha_j).
pub fn importance_weights(kappa_planck: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if kappa_planck.len() != deltas.len() {
        return Err(Error::Shape("importance_weights: length mismatch".into()));
    }
    let mut trans = 1.0;
    let mut weights = Vec::with_capacity(deltas.len());
    for (&k, &d) in kappa_planck.iter().zip(deltas) {
        let alpha = 1.0 - (-k * d).exp();
        weights.push(alpha * trans);
        trans *= 1.0 - alpha;
    }
    Ok(weights)
}

/// Inverse-CDF sampling of `n_f` t-values from the piecewise-constant
/// density proportional to `weights` over the bins given by `edges`
/// (len = weights.len() + 1, increasing). Zero total weight falls back to
/// the uniform density; the flag reports that. Output is sorted.
pub fn importance_resample(
    weights: &[f64],
    edges: &[f64],
    n_f: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, bool)> {
    if edges.len() != weights.len() + 1 {
        return Err(Error::Shape("importance_resample: edges/weights mismatch".into()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Domain("negative importance weight".into()));
    }
    let total: f64 = weights.iter().sum();
    let fallback = total <= 0.0;
    let uniform = 1.0 / weights.len() as f64;
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += if fallback { uniform } else { w / total };
        cdf.push(acc);
    }
    let mut samples = Vec::with_capacity(n_f);
    for _ in 0..n_f {
        let u: f64 = rng.gen();
        let bin = cdf.partition_point(|&c| c <= u).min(weights.len() - 1);
        let lo = if bin == 0 { 0.0 } else { cdf[bin - 1] };
        let hi = cdf[bin];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        samples.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((samples, fallback))
}

/// Autodiff spatial regularizer: mean over points of the summed
/// per-field, per-direction |gradient| (TV) or squared gradient
/// (Tikhonov), applied to both networks' normalized outputs.
pub fn ad_penalty_node(
    rep: &NeuralRepresentation,
    tape: &mut Tape,
    theta: NodeId,
    points: &[[f64; 3]],
    kind: PenaltyKind,
) -> Result<NodeId> {
    let batch = points.len();
    let mut total: Option<NodeId> = None;
    for which in [Network::Coarse, Network::Fine] {
        let (_, jac) = rep.taped_forward(tape, theta, which, points, true)?;
        for jn in jac.unwrap() {
            let raw = match kind {
                PenaltyKind::TotalVariation => tape.abs(jn),
                PenaltyKind::Tikhonov => tape.square(jn),
            };
            let s = tape.sum(raw);
            let contrib = tape.scale(s, 1.0 / batch as f64);
            total = Some(match total {
                None => contrib,
                Some(t) => tape.add(t, contrib)?,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.constant(vec![0.0])))
}

pub fn ad_penalty(
    rep: &NeuralRepresentation,
    points: &[[f64; 3]],
    kind: PenaltyKind,
) -> Result<f64> {
    let mut tape = Tape::new();
    let theta = tape.constant(rep.theta.values.clone());
    let node = ad_penalty_node(rep, &mut tape, theta, points, kind)?;
    Ok(tape.scalar(node))
}

/// Adam optimizer state (used by pretraining and, behind a flag, the
/// neural reconstruction path).
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    pub(crate) fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

/// Overfit both networks to a grid field (normalized values) at its
/// voxel centers with Adam on minibatches. Returns the final full-lattice
/// fit MSE of the fine network.
pub fn pretrain_to_field(
    rep: &mut NeuralRepresentation,
    target: &GridField,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<f64> {
    target.validate()?;
    if target.species_list != rep.species_list {
        return Err(Error::Config("pretraining target species mismatch".into()));
    }
    let n_out = rep.n_outputs();
    let n_cells = target.geom.n_cells();
    let centers: Vec<[f64; 3]> = (0..n_cells)
        .map(|c| {
            let d = target.geom.dims;
            target.geom.cell_center([c % d[0], (c / d[0]) % d[1], c / (d[0] * d[1])])
        })
        .collect();
    let t_range = rep.t_ceil - rep.t_floor;
    // Row-major (1 + S) x n_cells normalized target.
    let mut target_norm = vec![0.0; n_out * n_cells];
    for (c, state) in target.data.iter().enumerate() {
        target_norm[c] = ((state.t - rep.t_floor) / t_range).clamp(0.0, 1.0);
        for (s, &x) in state.x.iter().enumerate() {
            target_norm[(s + 1) * n_cells + c] = x.clamp(0.0, 1.0);
        }
    }
    let batch_size = n_cells.min(1024);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_cells).collect();
    let mut cursor = n_cells; // force an initial shuffle
    let mut adam = Adam::new(rep.theta.len(), learning_rate);
    for epoch in 0..epochs {
        if cursor + batch_size > n_cells {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..cursor + batch_size].to_vec();
        cursor += batch_size;
        let pts: Vec<[f64; 3]> = batch.iter().map(|&c| centers[c]).collect();
        let mut tgt = vec![0.0; n_out * batch_size];
        for (j, &c) in batch.iter().enumerate() {
            for f in 0..n_out {
                tgt[f * batch_size + j] = target_norm[f * n_cells + c];
            }
        }
        let mut tape = Tape::new();
        let theta = tape.leaf(rep.theta.values.clone());
        let mut loss: Option<NodeId> = None;
        for which in [Network::Coarse, Network::Fine] {
            let (out, _) = rep.taped_forward(&mut tape, theta, which, &pts, false)?;
            let resid = tape.sub_const(out, &tgt)?;
            let sq = tape.square(resid);
            let m = tape.mean(sq);
            loss = Some(match loss {
                None => m,
                Some(l) => tape.add(l, m)?,
            });
        }
        let loss = loss.unwrap();
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let adj = tape.backward(loss);
        adam.step(&mut rep.theta.values, &adj[theta]);
    }
    // Full-lattice fine-network fit MSE.
    let mut mse = 0.0;
    for (c, &p) in centers.iter().enumerate() {
        let out = rep.forward_normalized(Network::Fine, p);
        for (f, &o) in out.iter().enumerate() {
            let r = o - target_norm[f * n_cells + c];
            mse += r * r;
        }
    }
    Ok(mse / (n_out * n_cells) as f64)
}

/// Write an `NNFIELD v1` checkpoint.
pub fn write_checkpoint(rep: &NeuralRepresentation, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "NNFIELD v1")?;
    writeln!(
        f,
        "arch frequencies={} identity={} hidden={} layers={} species={}",
        rep.encoding.num_frequencies,
        rep.encoding.include_identity as u8,
        rep.mlp.hidden_dim,
        rep.mlp.hidden_layers,
        rep.species_list.join(",")
    )?;
    writeln!(f, "bounds t_floor={:.10e} t_ceil={:.10e}", rep.t_floor, rep.t_ceil)?;
    writeln!(
        f,
        "box {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
        rep.box_min[0], rep.box_min[1], rep.box_min[2], rep.box_max[0], rep.box_max[1], rep.box_max[2]
    )?;
    writeln!(f, "params {}", rep.theta.len())?;
    for v in &rep.theta.values {
        writeln!(f, "{v:.8e}")?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn kv<'a>(tok: &'a str, key: &str, path: &Path, line: usize) -> Result<&'a str> {
    tok.strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| parse_err(path, line, format!("expected {key}=...")))
}

/// Read an `NNFIELD v1` checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<NeuralRepresentation> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String)> {
        lines
            .next()
            .map(|(i, l)| Ok((i + 1, l?)))
            .unwrap_or_else(|| Err(parse_err(path, 0, format!("missing {expect} line"))))
    };
    let (ln, header) = next("header")?;
    if header.trim() != "NNFIELD v1" {
        return Err(parse_err(path, ln, "expected `NNFIELD v1` header"));
    }
    let (ln, arch) = next("arch")?;
    let toks: Vec<&str> = arch.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "arch" {
        return Err(parse_err(path, ln, "malformed arch line"));
    }
    let freq: usize = kv(toks[1], "frequencies", path, ln)?
        .parse()
        .map_err(|_| parse_err(path, ln, "bad frequencies"))?;
    let identity = kv(toks[2], "identity", path, ln)? == "1";
    let hidden: usize = kv(toks[3], "hidden", path, ln)?
        .parse()
        .map_err(|_| parse_err(path, ln, "bad hidden"))?;
    let layers: usize = kv(toks[4], "layers", path, ln)?
        .parse()
        .map_err(|_| parse_err(path, ln, "bad layers"))?;
    let species: Vec<String> = {
        let s = kv(toks[5], "species", path, ln)?;
        if s.is_empty() {
            Vec::new()
        } else {
            s.split(',').map(str::to_string).collect()
        }
    };
    let (ln, bounds) = next("bounds")?;
    let toks: Vec<&str> = bounds.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "bounds" {
        return Err(parse_err(path, ln, "malformed bounds line"));
    }
    let t_floor: f64 = kv(toks[1], "t_floor", path, ln)?
        .parse()
        .map_err(|_| parse_err(path, ln, "bad t_floor"))?;
    let t_ceil: f64 = kv(toks[2], "t_ceil", path, ln)?
        .parse()
        .map_err(|_| parse_err(path, ln, "bad t_ceil"))?;
    let (ln, boxline) = next("box")?;
    let toks: Vec<&str> = boxline.split_whitespace().collect();
    if toks.len() != 7 || toks[0] != "box" {
        return Err(parse_err(path, ln, "malformed box line"));
    }
    let vals: Vec<f64> = toks[1..]
        .iter()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, ln, "bad box coordinate"))?;
    let (ln, pline) = next("params")?;
    let count: usize = pline
        .strip_prefix("params ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(path, ln, "malformed params line"))?;
    let mut values = Vec::with_capacity(count);
    for (i, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        values.push(
            t.parse::<f64>()
                .map_err(|_| parse_err(path, i + 1, "bad parameter value"))?,
        );
    }
    if values.len() != count {
        return Err(parse_err(
            path,
            0,
            format!("expected {count} parameters, found {}", values.len()),
        ));
    }
    let encoding = EncodingConfig {
        num_frequencies: freq,
        include_identity: identity,
    };
    let mlp = MlpConfig {
        hidden_dim: hidden,
        hidden_layers: layers,
    };
    let per_net = NeuralRepresentation::params_per_network(&encoding, &mlp, species.len());
    if count != 2 * per_net {
        return Err(parse_err(
            path,
            0,
            format!("architecture implies {} parameters, file has {count}", 2 * per_net),
        ));
    }
    let layout = vec![
        ("nn.coarse".to_string(), 0..per_net),
        ("nn.fine".to_string(), per_net..2 * per_net),
    ];
    Ok(NeuralRepresentation {
        box_min: [vals[0], vals[1], vals[2]],
        box_max: [vals[3], vals[4], vals[5]],
        species_list: species,
        t_floor,
        t_ceil,
        encoding,
        mlp,
        theta: ParamVector::new(values, layout)?,
    })
}
