//! Ground-truth phantom generation, grid-field persistence, and
//! reconstruction-quality metrics.

use crate::geometry::GridGeometry;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Temperature plus species mole fractions at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermochemState {
    /// Temperature [K].
    pub t: f64,
    /// Mole fraction per scene species, each in [0, 1].
    pub x: Vec<f64>,
}

/// Axis-aligned box of cells holding one state per cell, x-fastest.
#[derive(Debug, Clone)]
pub struct GridField {
    pub geom: GridGeometry,
    pub species_list: Vec<String>,
    pub data: Vec<ThermochemState>,
}

impl GridField {
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.geom.n_cells() {
            return Err(Error::Shape(format!(
                "grid holds {} states for {} cells",
                self.data.len(),
                self.geom.n_cells()
            )));
        }
        for (i, s) in self.data.iter().enumerate() {
            if s.x.len() != self.species_list.len() {
                return Err(Error::Shape(format!(
                    "cell {i} holds {} mole fractions for {} species",
                    s.x.len(),
                    self.species_list.len()
                )));
            }
            if s.t <= 0.0 || !s.t.is_finite() {
                return Err(Error::Domain(format!("cell {i} temperature {}", s.t)));
            }
            if s.x.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Domain(format!("cell {i} mole fraction out of [0,1]")));
            }
        }
        Ok(())
    }
}

/// Analytic buoyant-plume phantom parameters.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub t_ambient: f64,
    pub t_peak: f64,
    /// Plume Gaussian radius at the pool surface [m].
    pub base_radius: f64,
    /// Linear radial spread growth rate [1/m].
    pub spread_rate: f64,
    /// Pool radius controlling the fuel column [m].
    pub pool_radius: f64,
    /// Height of peak temperature [m].
    pub flame_height: f64,
    /// Peak mole fraction per species id.
    pub x_peak: BTreeMap<String, f64>,
    /// Species treated as fuel (concentrated at the pool, decaying with z).
    pub fuel: String,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_ambient <= 0.0 || self.t_peak < self.t_ambient {
            return Err(Error::Config("need t_peak >= t_ambient > 0".into()));
        }
        if self.base_radius <= 0.0 || self.pool_radius <= 0.0 || self.flame_height <= 0.0 {
            return Err(Error::Config("phantom radii and height must be positive".into()));
        }
        if self.x_peak.values().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Config("peak mole fractions must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Smooth rise-and-decay vertical profile, maximum 1 at z = flame_height.
    pub fn height_profile(&self, z: f64) -> f64 {
        let zeta = (z / self.flame_height).max(0.0);
        zeta * (1.0 - zeta).exp()
    }

    /// Gaussian plume radius at height z.
    pub fn sigma(&self, z: f64) -> f64 {
        self.base_radius * (1.0 + self.spread_rate * z.max(0.0))
    }

    /// Phantom state at a physical point; the plume axis is x = y = 0.
    pub fn state_at(&self, p: [f64; 3], species: &[String]) -> ThermochemState {
        let r2 = p[0] * p[0] + p[1] * p[1];
        let z = p[2];
        let sigma = self.sigma(z);
        let radial = (-r2 / (2.0 * sigma * sigma)).exp();
        let h = self.height_profile(z);
        let t = self.t_ambient + (self.t_peak - self.t_ambient) * radial * h;
        let x = species
            .iter()
            .map(|s| {
                let peak = self.x_peak.get(s).copied().unwrap_or(0.0);
                if *s == self.fuel {
                    let pool = (-r2 / (2.0 * self.pool_radius * self.pool_radius)).exp();
                    peak * pool * (-3.0 * z / self.flame_height).exp()
                } else {
                    peak * radial * h
                }
            })
            .collect();
        ThermochemState { t, x }
    }
}

/// Sample the phantom at every cell center.
pub fn make_phantom(
    config: &PhantomConfig,
    geom: &GridGeometry,
    species: &[String],
) -> Result<GridField> {
    config.validate()?;
    let mut data = Vec::with_capacity(geom.n_cells());
    for k in 0..geom.dims[2] {
        for j in 0..geom.dims[1] {
            for i in 0..geom.dims[0] {
                data.push(config.state_at(geom.cell_center([i, j, k]), species));
            }
        }
    }
    let field = GridField {
        geom: geom.clone(),
        species_list: species.to_vec(),
        data,
    };
    field.validate()?;
    Ok(field)
}

/// Serialize a grid field to the FLAMEGRID text format.
pub fn write_grid<P: AsRef<Path>>(field: &GridField, path: P) -> Result<()> {
    field.validate()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "FLAMEGRID v1")?;
    writeln!(
        out,
        "dims {} {} {}",
        field.geom.dims[0], field.geom.dims[1], field.geom.dims[2]
    )?;
    writeln!(
        out,
        "box {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
        field.geom.box_min[0],
        field.geom.box_min[1],
        field.geom.box_min[2],
        field.geom.box_max[0],
        field.geom.box_max[1],
        field.geom.box_max[2]
    )?;
    writeln!(out, "species {}", field.species_list.join(" "))?;
    for state in &field.data {
        write!(out, "{:.10e}", state.t)?;
        for &x in &state.x {
            write!(out, " {:.10e}", x)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Read a FLAMEGRID text file.
pub fn read_grid<P: AsRef<Path>>(path: P) -> Result<GridField> {
    let name = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(&path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut expect = |what: &str| {
        lines
            .next()
            .ok_or_else(|| perr(0, format!("missing {what}")))
    };
    let (no, header) = expect("header")?;
    if header != "FLAMEGRID v1" {
        return Err(perr(no, "expected 'FLAMEGRID v1'".into()));
    }
    let (no, dims_line) = expect("dims line")?;
    let dims_tok: Vec<&str> = dims_line.split_whitespace().collect();
    if dims_tok.len() != 4 || dims_tok[0] != "dims" {
        return Err(perr(no, "expected 'dims Nx Ny Nz'".into()));
    }
    let mut dims = [0usize; 3];
    for d in 0..3 {
        dims[d] = dims_tok[d + 1]
            .parse()
            .map_err(|_| perr(no, format!("bad dim '{}'", dims_tok[d + 1])))?;
    }
    let (no, box_line) = expect("box line")?;
    let box_tok: Vec<&str> = box_line.split_whitespace().collect();
    if box_tok.len() != 7 || box_tok[0] != "box" {
        return Err(perr(no, "expected 'box xmin ymin zmin xmax ymax zmax'".into()));
    }
    let mut bounds = [0.0f64; 6];
    for d in 0..6 {
        bounds[d] = box_tok[d + 1]
            .parse()
            .map_err(|_| perr(no, format!("bad bound '{}'", box_tok[d + 1])))?;
    }
    let (no, species_line) = expect("species line")?;
    let species_tok: Vec<&str> = species_line.split_whitespace().collect();
    if species_tok.is_empty() || species_tok[0] != "species" {
        return Err(perr(no, "expected 'species <id...>'".into()));
    }
    let species_list: Vec<String> = species_tok[1..].iter().map(|s| s.to_string()).collect();

    let geom = GridGeometry::new(
        [bounds[0], bounds[1], bounds[2]],
        [bounds[3], bounds[4], bounds[5]],
        dims,
    )?;
    let n_cells = geom.n_cells();
    let mut data = Vec::with_capacity(n_cells);
    for cell in 0..n_cells {
        let (no, row) = lines
            .next()
            .ok_or_else(|| perr(0, format!("truncated file: missing cell {cell}")))?;
        let vals: Vec<&str> = row.split_whitespace().collect();
        if vals.len() != 1 + species_list.len() {
            return Err(perr(
                no,
                format!(
                    "cell {cell}: expected {} values, got {}",
                    1 + species_list.len(),
                    vals.len()
                ),
            ));
        }
        let mut nums = Vec::with_capacity(vals.len());
        for v in vals {
            nums.push(
                v.parse::<f64>()
                    .map_err(|_| perr(no, format!("cell {cell}: bad value '{v}'")))?,
            );
        }
        data.push(ThermochemState {
            t: nums[0],
            x: nums[1..].to_vec(),
        });
    }
    let field = GridField {
        geom,
        species_list,
        data,
    };
    field.validate()?;
    Ok(field)
}

/// Normalized per-field mean squared error of a reconstruction against
/// ground truth. Both fields are normalized by the truth's min/max; a
/// degenerate truth range falls back to unnormalized MSE with a flag.
#[derive(Debug, Clone)]
pub struct FieldMse {
    pub name: String,
    pub mse: f64,
    /// Set when the truth field had zero range and the value is absolute.
    pub unnormalized: bool,
}

pub fn normalized_mse(recon: &GridField, truth: &GridField) -> Result<Vec<FieldMse>> {
    if recon.geom != truth.geom || recon.species_list != truth.species_list {
        return Err(Error::Shape(
            "reconstruction and truth grids do not match".into(),
        ));
    }
    let n = truth.data.len() as f64;
    let n_fields = 1 + truth.species_list.len();
    let mut out = Vec::with_capacity(n_fields);
    for f in 0..n_fields {
        let get = |state: &ThermochemState| if f == 0 { state.t } else { state.x[f - 1] };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &truth.data {
            lo = lo.min(get(s));
            hi = hi.max(get(s));
        }
        let range = hi - lo;
        let degenerate = range <= 0.0;
        let mut sum = 0.0;
        for (r, t) in recon.data.iter().zip(&truth.data) {
            let d = if degenerate {
                get(r) - get(t)
            } else {
                (get(r) - lo) / range - (get(t) - lo) / range
            };
            sum += d * d;
        }
        out.push(FieldMse {
            name: if f == 0 {
                "T".into()
            } else {
                truth.species_list[f - 1].clone()
            },
            mse: sum / n,
            unnormalized: degenerate,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_config() -> PhantomConfig {
        let mut x_peak = BTreeMap::new();
        x_peak.insert("CO2".to_string(), 0.10);
        x_peak.insert("H2O".to_string(), 0.10);
        x_peak.insert("CH4".to_string(), 0.15);
        PhantomConfig {
            t_ambient: 300.0,
            t_peak: 1500.0,
            base_radius: 0.12,
            spread_rate: 1.0,
            pool_radius: 0.1,
            flame_height: 0.5,
            x_peak,
            fuel: "CH4".into(),
        }
    }

    fn species() -> Vec<String> {
        vec!["CO2".into(), "H2O".into(), "CH4".into()]
    }

    fn default_geom() -> GridGeometry {
        GridGeometry::new([-0.5, -0.5, 0.0], [0.5, 0.5, 1.0], [16, 16, 16]).unwrap()
    }

    #[test]
    fn flat_config_gives_uniform_temperature() {
        let mut cfg = default_config();
        cfg.t_peak = cfg.t_ambient;
        let field = make_phantom(&cfg, &default_geom(), &species()).unwrap();
        assert!(field.data.iter().all(|s| s.t == cfg.t_ambient));
    }

    #[test]
    fn phantom_peak_matches_formula_scan() {
        let cfg = default_config();
        let geom = default_geom();
        let field = make_phantom(&cfg, &geom, &species()).unwrap();
        let max_t = field.data.iter().map(|s| s.t).fold(0.0_f64, f64::max);
        // Exhaustive formula scan over all cell centers.
        let mut expected: f64 = 0.0;
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    expected = expected.max(cfg.state_at(geom.cell_center([i, j, k]), &species()).t);
                }
            }
        }
        assert_eq!(max_t, expected);
        assert!(max_t > cfg.t_ambient && max_t <= cfg.t_peak);
    }

    #[test]
    fn phantom_rotation_invariant_on_symmetric_grid() {
        let cfg = default_config();
        let geom = default_geom();
        let field = make_phantom(&cfg, &geom, &species()).unwrap();
        let n = geom.dims[0];
        for k in 0..geom.dims[2] {
            for j in 0..n {
                for i in 0..n {
                    // 90 degree rotation about the plume axis: (i,j) -> (j, n-1-i)
                    let a = &field.data[geom.flat_index([i, j, k])];
                    let b = &field.data[geom.flat_index([j, n - 1 - i, k])];
                    assert!((a.t - b.t).abs() < 1e-9);
                    for (xa, xb) in a.x.iter().zip(&b.x) {
                        assert!((xa - xb).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn grid_roundtrip_single_cell() {
        let geom = GridGeometry::new([0.0; 3], [1.0; 3], [1, 1, 1]).unwrap();
        let field = GridField {
            geom,
            species_list: vec!["CO2".into()],
            data: vec![ThermochemState {
                t: 1234.56789,
                x: vec![0.123456789],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.grid");
        write_grid(&field, &path).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(back.data[0].t, field.data[0].t);
        assert_eq!(back.data[0].x, field.data[0].x);
    }

    #[test]
    fn grid_roundtrip_phantom_16() {
        let field = make_phantom(&default_config(), &default_geom(), &species()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phantom.grid");
        write_grid(&field, &path).unwrap();
        let back = read_grid(&path).unwrap();
        for (a, b) in field.data.iter().zip(&back.data) {
            assert!((a.t - b.t).abs() <= 1e-9 * a.t.abs());
            for (xa, xb) in a.x.iter().zip(&b.x) {
                assert!((xa - xb).abs() <= 1e-9 * xa.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn truncated_file_reports_cell() {
        let field = make_phantom(&default_config(), &default_geom(), &species()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.grid");
        write_grid(&field, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(100).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, cut).unwrap();
        match read_grid(&path) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("cell"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mse_zero_for_identical_fields() {
        let field = make_phantom(&default_config(), &default_geom(), &species()).unwrap();
        let mse = normalized_mse(&field, &field).unwrap();
        assert!(mse.iter().all(|m| m.mse == 0.0 && !m.unnormalized));
    }

    #[test]
    fn mse_single_voxel_full_range_offset() {
        let geom = GridGeometry::new([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
        let mut truth_data = Vec::new();
        for i in 0..8 {
            truth_data.push(ThermochemState {
                t: 300.0 + 100.0 * i as f64, // range 700
                x: vec![],
            });
        }
        let truth = GridField {
            geom: geom.clone(),
            species_list: vec![],
            data: truth_data.clone(),
        };
        let mut recon = truth.clone();
        recon.data[3].t += 700.0; // off by the full truth range
        let mse = normalized_mse(&recon, &truth).unwrap();
        assert!((mse[0].mse - 0.125).abs() < 1e-12);
    }

    #[test]
    fn mse_degenerate_truth_flagged() {
        let geom = GridGeometry::new([0.0; 3], [1.0; 3], [1, 1, 2]).unwrap();
        let truth = GridField {
            geom: geom.clone(),
            species_list: vec![],
            data: vec![
                ThermochemState { t: 400.0, x: vec![] },
                ThermochemState { t: 400.0, x: vec![] },
            ],
        };
        let mut recon = truth.clone();
        recon.data[0].t = 401.0;
        let mse = normalized_mse(&recon, &truth).unwrap();
        assert!(mse[0].unnormalized);
        assert!((mse[0].mse - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn phantom_states_always_valid(
            t_ambient in 200.0..600.0f64,
            dt in 0.0..1800.0f64,
            base_radius in 0.02..0.4f64,
            spread in 0.0..3.0f64,
            pool in 0.02..0.4f64,
            height in 0.1..1.0f64,
            xc in 0.0..0.5f64,
            xf in 0.0..0.5f64,
        ) {
            let mut x_peak = BTreeMap::new();
            x_peak.insert("CO2".to_string(), xc);
            x_peak.insert("CH4".to_string(), xf);
            let cfg = PhantomConfig {
                t_ambient,
                t_peak: t_ambient + dt,
                base_radius,
                spread_rate: spread,
                pool_radius: pool,
                flame_height: height,
                x_peak,
                fuel: "CH4".into(),
            };
            let geom = GridGeometry::new([-0.5, -0.5, 0.0], [0.5, 0.5, 1.0], [6, 6, 6]).unwrap();
            let field = make_phantom(&cfg, &geom, &["CO2".to_string(), "CH4".to_string()]).unwrap();
            field.validate().unwrap();
        }
    }
}
