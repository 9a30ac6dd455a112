//! Cameras, ray generation, bounding-box intersection and exact voxel
//! traversal (Amanatides & Woo DDA).

use crate::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

/// Ideal pinhole camera with a square-pixel sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub origin: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub focal_length: f64,
    pub sensor_halfwidth: f64,
    pub pixels_x: usize,
    pub pixels_y: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.focal_length <= 0.0 {
            return Err(Error::Domain("focal_length must be positive".into()));
        }
        if self.pixels_x == 0 || self.pixels_y == 0 {
            return Err(Error::Domain("pixel counts must be >= 1".into()));
        }
        let fwd = sub(self.look_at, self.origin);
        if norm(cross(fwd, self.up)) < 1e-12 {
            return Err(Error::Domain(
                "up vector parallel to viewing direction".into(),
            ));
        }
        Ok(())
    }
}

/// A ray with unit direction and (optional) path-parameter bounds.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// Axis-aligned voxel grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub box_min: Vec3,
    pub box_max: Vec3,
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(box_min: Vec3, box_max: Vec3, dims: [usize; 3]) -> Result<Self> {
        for d in 0..3 {
            if box_max[d] <= box_min[d] {
                return Err(Error::Domain("box_max must exceed box_min".into()));
            }
            if dims[d] == 0 {
                return Err(Error::Domain("grid dims must be >= 1".into()));
            }
        }
        Ok(Self {
            box_min,
            box_max,
            dims,
        })
    }

    pub fn spacing(&self) -> Vec3 {
        [
            (self.box_max[0] - self.box_min[0]) / self.dims[0] as f64,
            (self.box_max[1] - self.box_min[1]) / self.dims[1] as f64,
            (self.box_max[2] - self.box_min[2]) / self.dims[2] as f64,
        ]
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat cell index, x-fastest.
    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    pub fn cell_center(&self, idx: [usize; 3]) -> Vec3 {
        let sp = self.spacing();
        [
            self.box_min[0] + (idx[0] as f64 + 0.5) * sp[0],
            self.box_min[1] + (idx[1] as f64 + 0.5) * sp[1],
            self.box_min[2] + (idx[2] as f64 + 0.5) * sp[2],
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|d| p[d] >= self.box_min[d] && p[d] <= self.box_max[d])
    }

    /// Cell containing `p`. Points on a shared face belong to the
    /// higher-index cell; points on the outer boundary are clamped in.
    pub fn cell_of(&self, p: Vec3) -> [usize; 3] {
        let sp = self.spacing();
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let f = ((p[d] - self.box_min[d]) / sp[d]).floor();
            idx[d] = (f.max(0.0) as usize).min(self.dims[d] - 1);
        }
        idx
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.box_max, self.box_min)
    }
}

/// One traversed cell: index, chord length and midpoint path parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub cell: [usize; 3],
    pub length: f64,
    pub midpoint_t: f64,
}

/// One ray per pixel in row-major order, each passing through its pixel
/// center projected through the pinhole.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.validate()?;
    let fwd = normalize(sub(camera.look_at, camera.origin));
    let right = normalize(cross(fwd, camera.up));
    let up = cross(right, fwd);
    let pitch = 2.0 * camera.sensor_halfwidth / camera.pixels_x as f64;
    let halfheight = 0.5 * pitch * camera.pixels_y as f64;
    let mut rays = Vec::with_capacity(camera.pixels_x * camera.pixels_y);
    for row in 0..camera.pixels_y {
        let v = halfheight - (row as f64 + 0.5) * pitch;
        for col in 0..camera.pixels_x {
            let u = -camera.sensor_halfwidth + (col as f64 + 0.5) * pitch;
            let dir = normalize(add(
                scale(fwd, camera.focal_length),
                add(scale(right, u), scale(up, v)),
            ));
            rays.push(Ray {
                origin: camera.origin,
                direction: dir,
                t_near: 0.0,
                t_far: f64::INFINITY,
            });
        }
    }
    Ok(rays)
}

/// Slab-method ray/box intersection. Returns `None` on a miss; the near
/// parameter is clamped to be non-negative.
pub fn intersect_aabb(ray: &Ray, geom: &GridGeometry) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for d in 0..3 {
        let dir = ray.direction[d];
        if dir.abs() < 1e-300 {
            if ray.origin[d] < geom.box_min[d] || ray.origin[d] > geom.box_max[d] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir;
        let mut ta = (geom.box_min[d] - ray.origin[d]) * inv;
        let mut tb = (geom.box_max[d] - ray.origin[d]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Amanatides & Woo voxel traversal. Segments are ordered by increasing
/// path parameter, contiguous, and their lengths sum to the chord length.
/// The entry parameter is nudged forward by `1e-12 * extent` so that
/// face/edge/corner entries do not produce zero-length segments.
pub fn traverse_voxels(ray: &Ray, geom: &GridGeometry) -> Vec<Segment> {
    let (t_near, t_far) = match intersect_aabb(ray, geom) {
        Some(hit) => hit,
        None => return Vec::new(),
    };
    let extent = norm(geom.extent());
    let nudge = 1e-12 * extent;
    let t_start = t_near + nudge;
    if t_start >= t_far {
        return Vec::new();
    }

    let sp = geom.spacing();
    let p = add(ray.origin, scale(ray.direction, t_start));
    let mut cell = geom.cell_of(p);
    let mut step = [0i64; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut t_max = [f64::INFINITY; 3];
    for d in 0..3 {
        let dir = ray.direction[d];
        if dir > 1e-300 {
            step[d] = 1;
            t_delta[d] = sp[d] / dir;
            let boundary = geom.box_min[d] + (cell[d] as f64 + 1.0) * sp[d];
            t_max[d] = (boundary - ray.origin[d]) / dir;
        } else if dir < -1e-300 {
            step[d] = -1;
            t_delta[d] = -sp[d] / dir;
            let boundary = geom.box_min[d] + cell[d] as f64 * sp[d];
            t_max[d] = (boundary - ray.origin[d]) / dir;
        }
    }

    let mut segments = Vec::new();
    let mut t_curr = t_start;
    loop {
        let mut axis = 0;
        for d in 1..3 {
            if t_max[d] < t_max[axis] {
                axis = d;
            }
        }
        let t_next = t_max[axis].min(t_far);
        if t_next > t_curr {
            segments.push(Segment {
                cell,
                length: t_next - t_curr,
                midpoint_t: 0.5 * (t_curr + t_next),
            });
        }
        if t_max[axis] >= t_far {
            break;
        }
        t_curr = t_next;
        t_max[axis] += t_delta[axis];
        let next = cell[axis] as i64 + step[axis];
        if next < 0 || next >= geom.dims[axis] as i64 {
            break;
        }
        cell[axis] = next as usize;
    }
    segments
}
