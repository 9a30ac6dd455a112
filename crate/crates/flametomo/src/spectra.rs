//! Spectral physics: Planck emission, line-by-line absorption
//! coefficients, the Planck-mean scalar used for importance sampling,
//! and a tabulated fast path for the absorption coefficient.

use crate::fields::ThermochemState;
use crate::{Error, Result};
use std::path::Path;

/// Planck constant [J s].
const PLANCK_H: f64 = 6.62607015e-34;
/// Speed of light [m/s].
const LIGHT_C: f64 = 2.99792458e8;
/// Boltzmann constant [J/K].
const BOLTZMANN_K: f64 = 1.380649e-23;

/// First radiation constant for wavenumber in cm^-1:
/// I_b = C1 eta^3 / (exp(C2 eta / T) - 1), [W m^-2 sr^-1 (cm^-1)^-1].
pub const C1: f64 = 2.0 * PLANCK_H * LIGHT_C * LIGHT_C * 1.0e8;
/// Second radiation constant h c / k_B in [cm K].
pub const C2: f64 = 100.0 * PLANCK_H * LIGHT_C / BOLTZMANN_K;

/// Uniform wavenumber grid [cm^-1].
#[derive(Debug, Clone, PartialEq)]
pub struct WavenumberGrid {
    pub eta_min: f64,
    pub eta_max: f64,
    pub step: f64,
    pub count: usize,
}

impl WavenumberGrid {
    pub fn new(eta_min: f64, eta_max: f64, step: f64) -> Result<Self> {
        if eta_min <= 0.0 || eta_max <= eta_min || step <= 0.0 {
            return Err(Error::Domain(format!(
                "invalid wavenumber grid [{eta_min}, {eta_max}] step {step}"
            )));
        }
        let n = (eta_max - eta_min) / step;
        if (n - n.round()).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "step {step} does not evenly divide [{eta_min}, {eta_max}]"
            )));
        }
        Ok(Self {
            eta_min,
            eta_max,
            step,
            count: n.round() as usize + 1,
        })
    }

    pub fn point(&self, i: usize) -> f64 {
        self.eta_min + i as f64 * self.step
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(move |i| self.point(i))
    }

    /// Trapezoid quadrature of sampled values over the grid.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.count);
        if self.count < 2 {
            return 0.0;
        }
        let interior: f64 = values[1..self.count - 1].iter().sum();
        self.step * (0.5 * (values[0] + values[self.count - 1]) + interior)
    }
}

/// One spectral line record.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLine {
    pub species: String,
    /// Line-center wavenumber [cm^-1].
    pub center: f64,
    /// Line intensity at T_ref [cm^-2 atm^-1].
    pub strength_ref: f64,
    /// Lower-state energy [cm^-1].
    pub lower_energy: f64,
    /// Lorentz half-width at T_ref and 1 atm [cm^-1].
    pub halfwidth_ref: f64,
    /// Temperature exponent of the strength power law.
    pub temp_exponent: f64,
}

/// Immutable line database with reference conditions.
#[derive(Debug, Clone)]
pub struct LineDatabase {
    pub lines: Vec<SpectralLine>,
    pub species_list: Vec<String>,
    pub t_ref: f64,
    pub pressure: f64,
}

impl LineDatabase {
    pub fn validate(&self) -> Result<()> {
        if self.t_ref <= 0.0 || self.pressure <= 0.0 {
            return Err(Error::Domain("T_ref and pressure must be positive".into()));
        }
        for line in &self.lines {
            if line.strength_ref < 0.0 || line.halfwidth_ref <= 0.0 || line.center <= 0.0 {
                return Err(Error::Domain(format!(
                    "invalid line record for {} at {}",
                    line.species, line.center
                )));
            }
            if !self.species_list.contains(&line.species) {
                return Err(Error::Domain(format!(
                    "line species {} missing from species list",
                    line.species
                )));
            }
        }
        Ok(())
    }
}

/// Blackbody spectral radiance at wavenumber `eta` [cm^-1] and
/// temperature `t` [K].
pub fn planck_intensity(t: f64, eta: f64) -> Result<f64> {
    if t <= 0.0 || eta <= 0.0 {
        return Err(Error::Domain(format!(
            "planck_intensity requires positive T and eta (got T={t}, eta={eta})"
        )));
    }
    Ok(C1 * eta * eta * eta / ((C2 * eta / t).exp() - 1.0))
}

/// Blackbody radiance and its temperature derivative over a grid.
pub fn planck_vec_with_deriv(t: f64, grid: &WavenumberGrid) -> (Vec<f64>, Vec<f64>) {
    let mut ib = Vec::with_capacity(grid.count);
    let mut dib = Vec::with_capacity(grid.count);
    for eta in grid.points() {
        let x = C2 * eta / t;
        let em1 = x.exp() - 1.0;
        let v = C1 * eta * eta * eta / em1;
        ib.push(v);
        // dI/dT = I * (x/T) * e^x / (e^x - 1)
        dib.push(v * (x / t) * (em1 + 1.0) / em1);
    }
    (ib, dib)
}

/// Absorption coefficient evaluation: value, temperature derivative and
/// per-species unit spectra (the mole-fraction partials).
#[derive(Debug, Clone)]
pub struct KappaEval {
    /// kappa_eta [m^-1], length = grid count.
    pub kappa: Vec<f64>,
    /// d kappa / dT [m^-1 K^-1].
    pub dkappa_dt: Vec<f64>,
    /// d kappa / dX_s per scene species [m^-1].
    pub unit: Vec<Vec<f64>>,
}

/// Per-species unit absorption spectrum (kappa at X_s = 1) and its
/// temperature derivative. The density factor is the ideal-gas number
/// density at the database pressure relative to T_ref, i.e. T_ref / T.
fn unit_spectrum(
    species: &str,
    t: f64,
    grid: &WavenumberGrid,
    db: &LineDatabase,
    want_deriv: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; grid.count];
    let mut du = if want_deriv {
        vec![0.0; grid.count]
    } else {
        Vec::new()
    };
    let n_factor = db.t_ref / t;
    let dn_factor = -n_factor / t;
    // m^-1 from cm^-1, times partial-pressure scale.
    let scale = 100.0 * db.pressure;
    for line in db.lines.iter().filter(|l| l.species == species) {
        let s = line.strength_ref
            * (db.t_ref / t).powf(line.temp_exponent)
            * (-C2 * line.lower_energy * (1.0 / t - 1.0 / db.t_ref)).exp();
        let ds_dt = s * (-line.temp_exponent / t + C2 * line.lower_energy / (t * t));
        let gamma = line.halfwidth_ref * (db.t_ref / t).sqrt() * db.pressure;
        let dgamma_dt = -0.5 * gamma / t;
        let a = scale * n_factor * s;
        let b = scale * (dn_factor * s + n_factor * ds_dt);
        let c = scale * n_factor * s * dgamma_dt;
        let g2 = gamma * gamma;
        let inv_pi = std::f64::consts::FRAC_1_PI;
        for (i, eta) in grid.points().enumerate() {
            let delta = eta - line.center;
            let d2 = delta * delta;
            let denom = d2 + g2;
            let phi = inv_pi * gamma / denom;
            u[i] += a * phi;
            if want_deriv {
                let dphi_dgamma = inv_pi * (d2 - g2) / (denom * denom);
                du[i] += b * phi + c * dphi_dgamma;
            }
        }
    }
    (u, du)
}

/// Spectral absorption coefficient kappa_eta [m^-1] for a thermochemical
/// state. Species absent from the database contribute zero.
pub fn absorption_spectrum(
    state: &ThermochemState,
    species: &[String],
    grid: &WavenumberGrid,
    db: &LineDatabase,
) -> Result<Vec<f64>> {
    Ok(absorption_with_derivs(state, species, grid, db, false)?.kappa)
}

/// Absorption coefficient with analytic temperature derivative and
/// per-species partials.
pub fn absorption_with_derivs(
    state: &ThermochemState,
    species: &[String],
    grid: &WavenumberGrid,
    db: &LineDatabase,
    want_deriv: bool,
) -> Result<KappaEval> {
    if state.t <= 0.0 {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    if grid.count == 0 {
        return Err(Error::Domain("empty wavenumber grid".into()));
    }
    if state.x.len() != species.len() {
        return Err(Error::Shape(format!(
            "state holds {} mole fractions for {} species",
            state.x.len(),
            species.len()
        )));
    }
    let mut kappa = vec![0.0; grid.count];
    let mut dkappa_dt = vec![0.0; grid.count];
    let mut unit = Vec::with_capacity(species.len());
    for (s, name) in species.iter().enumerate() {
        let (u, du) = unit_spectrum(name, state.t, grid, db, want_deriv);
        for i in 0..grid.count {
            kappa[i] += state.x[s] * u[i];
            if want_deriv {
                dkappa_dt[i] += state.x[s] * du[i];
            }
        }
        unit.push(u);
    }
    Ok(KappaEval {
        kappa,
        dkappa_dt,
        unit,
    })
}

/// Planck-mean absorption coefficient over the working band:
/// integral(kappa_eta I_b_eta) / integral(I_b_eta), trapezoid rule.
pub fn planck_mean_kappa(
    state: &ThermochemState,
    species: &[String],
    grid: &WavenumberGrid,
    db: &LineDatabase,
) -> Result<f64> {
    let kappa = absorption_spectrum(state, species, grid, db)?;
    let (ib, _) = planck_vec_with_deriv(state.t, grid);
    Ok(planck_mean_of(&kappa, &ib, grid))
}

/// Planck-mean of a precomputed kappa spectrum against a blackbody
/// weighting on the same grid.
pub fn planck_mean_of(kappa: &[f64], ib: &[f64], grid: &WavenumberGrid) -> f64 {
    let weighted: Vec<f64> = kappa.iter().zip(ib).map(|(k, b)| k * b).collect();
    let num = grid.trapezoid(&weighted);
    let den = grid.trapezoid(ib);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Tabulated absorption evaluator: per-species unit spectra sampled on a
/// uniform temperature lattice, interpolated with a Catmull-Rom spline
/// (C1 in T, so gradients stay finite-difference consistent).
#[derive(Debug, Clone)]
pub struct KappaTable {
    pub t_min: f64,
    pub t_max: f64,
    pub n_knots: usize,
    pub grid: WavenumberGrid,
    /// data[species][knot * grid.count + eta]
    data: Vec<Vec<f64>>,
}

impl KappaTable {
    pub fn build(
        species: &[String],
        grid: &WavenumberGrid,
        db: &LineDatabase,
        t_min: f64,
        t_max: f64,
        n_knots: usize,
    ) -> Result<Self> {
        if n_knots < 4 || t_max <= t_min {
            return Err(Error::Config("kappa table needs >= 4 knots and t_max > t_min".into()));
        }
        let mut data = vec![vec![0.0; n_knots * grid.count]; species.len()];
        let h = (t_max - t_min) / (n_knots - 1) as f64;
        for k in 0..n_knots {
            let t = t_min + k as f64 * h;
            for (s, name) in species.iter().enumerate() {
                let (u, _) = unit_spectrum(name, t, grid, db, false);
                data[s][k * grid.count..(k + 1) * grid.count].copy_from_slice(&u);
            }
        }
        Ok(Self {
            t_min,
            t_max,
            n_knots,
            grid: grid.clone(),
            data,
        })
    }

    fn knot(&self, species: usize, k: usize) -> &[f64] {
        let n = self.grid.count;
        &self.data[species][k * n..(k + 1) * n]
    }

    /// Interpolated evaluation with temperature derivative.
    pub fn eval(&self, state: &ThermochemState) -> KappaEval {
        let n = self.grid.count;
        let n_species = self.data.len();
        let h = (self.t_max - self.t_min) / (self.n_knots - 1) as f64;
        let pos = ((state.t - self.t_min) / h).clamp(0.0, (self.n_knots - 1) as f64);
        let k1 = (pos.floor() as usize).min(self.n_knots - 2);
        let s = pos - k1 as f64;
        let k0 = k1.saturating_sub(1);
        let k2 = k1 + 1;
        let k3 = (k1 + 2).min(self.n_knots - 1);
        // Catmull-Rom basis and its derivative in s.
        let (s2, s3) = (s * s, s * s * s);
        let w0 = -0.5 * s3 + s2 - 0.5 * s;
        let w1 = 1.5 * s3 - 2.5 * s2 + 1.0;
        let w2 = -1.5 * s3 + 2.0 * s2 + 0.5 * s;
        let w3 = 0.5 * s3 - 0.5 * s2;
        let dw0 = (-1.5 * s2 + 2.0 * s - 0.5) / h;
        let dw1 = (4.5 * s2 - 5.0 * s) / h;
        let dw2 = (-4.5 * s2 + 4.0 * s + 0.5) / h;
        let dw3 = (1.5 * s2 - s) / h;
        let mut kappa = vec![0.0; n];
        let mut dkappa_dt = vec![0.0; n];
        let mut unit = Vec::with_capacity(n_species);
        for sp in 0..n_species {
            let (p0, p1, p2, p3) = (
                self.knot(sp, k0),
                self.knot(sp, k1),
                self.knot(sp, k2),
                self.knot(sp, k3),
            );
            let x = state.x[sp];
            let mut u = vec![0.0; n];
            for i in 0..n {
                let v = w0 * p0[i] + w1 * p1[i] + w2 * p2[i] + w3 * p3[i];
                let dv = dw0 * p0[i] + dw1 * p1[i] + dw2 * p2[i] + dw3 * p3[i];
                u[i] = v.max(0.0);
                kappa[i] += x * u[i];
                if u[i] > 0.0 || v >= 0.0 {
                    dkappa_dt[i] += x * dv;
                }
            }
            unit.push(u);
        }
        KappaEval {
            kappa,
            dkappa_dt,
            unit,
        }
    }
}

/// Absorption-coefficient evaluation strategy shared by the voxel and
/// hierarchical render paths.
#[derive(Debug, Clone)]
pub enum KappaEvaluator {
    /// Direct line-by-line evaluation per state.
    Exact {
        species: Vec<String>,
        db: LineDatabase,
        grid: WavenumberGrid,
    },
    /// Interpolated table (built once per run from the exact path).
    Table(KappaTable),
}

impl KappaEvaluator {
    pub fn grid(&self) -> &WavenumberGrid {
        match self {
            KappaEvaluator::Exact { grid, .. } => grid,
            KappaEvaluator::Table(table) => &table.grid,
        }
    }

    pub fn eval(&self, state: &ThermochemState) -> Result<KappaEval> {
        match self {
            KappaEvaluator::Exact { species, db, grid } => {
                absorption_with_derivs(state, species, grid, db, true)
            }
            KappaEvaluator::Table(table) => Ok(table.eval(state)),
        }
    }
}

/// Parse the plain-text line database format.
///
/// Header: `LINEDB v1 T_ref=<K> P=<atm>`, then one whitespace-separated
/// record per line: species, center, strength_ref, lower_energy,
/// halfwidth_ref, temp_exponent. `#` starts a comment.
pub fn parse_line_database(text: &str, path: &str) -> Result<LineDatabase> {
    let mut lines_iter = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (header_no, header) = lines_iter.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 0,
        msg: "empty line database".into(),
    })?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != "LINEDB" || tokens[1] != "v1" {
        return Err(Error::Parse {
            path: path.into(),
            line: header_no,
            msg: "expected header 'LINEDB v1 T_ref=<K> P=<atm>'".into(),
        });
    }
    let parse_kv = |tok: &str, key: &str, line: usize| -> Result<f64> {
        tok.strip_prefix(key)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.into(),
                line,
                msg: format!("expected {key}<value>, got '{tok}'"),
            })
    };
    let t_ref = parse_kv(tokens[2], "T_ref=", header_no)?;
    let pressure = parse_kv(tokens[3], "P=", header_no)?;

    let mut lines = Vec::new();
    let mut species_list: Vec<String> = Vec::new();
    for (no, row) in lines_iter {
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::Parse {
                path: path.into(),
                line: no,
                msg: format!("expected 6 fields, got {}", f.len()),
            });
        }
        let species = f[0].to_string();
        if !species
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
            || !species.chars().next().unwrap().is_ascii_alphabetic()
        {
            return Err(Error::Parse {
                path: path.into(),
                line: no,
                msg: format!("unknown species tag '{species}'"),
            });
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: no,
                msg: format!("bad number '{}'", f[i]),
            })
        };
        let line = SpectralLine {
            species: species.clone(),
            center: num(1)?,
            strength_ref: num(2)?,
            lower_energy: num(3)?,
            halfwidth_ref: num(4)?,
            temp_exponent: num(5)?,
        };
        if line.center <= 0.0 || line.strength_ref < 0.0 || line.halfwidth_ref <= 0.0 {
            return Err(Error::Parse {
                path: path.into(),
                line: no,
                msg: "line record violates invariants (center > 0, strength >= 0, halfwidth > 0)"
                    .into(),
            });
        }
        if !species_list.contains(&species) {
            species_list.push(species);
        }
        lines.push(line);
    }
    let db = LineDatabase {
        lines,
        species_list,
        t_ref,
        pressure,
    };
    db.validate()?;
    Ok(db)
}

/// Load and validate a line database file.
pub fn load_line_database<P: AsRef<Path>>(path: P) -> Result<LineDatabase> {
    let text = std::fs::read_to_string(&path)?;
    parse_line_database(&text, &path.as_ref().display().to_string())
}
