//! Parametric shape families rasterised on the voxel lattice.
//!
//! All parameters are in lattice units (voxels). Vertical is `y`. Every shape
//! is centred in the lattice on its bounding box.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassRole;
use crate::seed::rng_for;
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    BoxStack,
    TableLike,
    Cylinder,
    LBracket,
    WingBody,
    Ring,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::BoxStack,
        Family::TableLike,
        Family::Cylinder,
        Family::LBracket,
        Family::WingBody,
        Family::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::BoxStack => "box-stack",
            Family::TableLike => "table-like",
            Family::Cylinder => "cylinder",
            Family::LBracket => "l-bracket",
            Family::WingBody => "wing-body",
            Family::Ring => "ring",
        }
    }

    /// Parameter names with a flag telling whether the value is rounded to an
    /// integer voxel count.
    pub fn parameters(self) -> &'static [(&'static str, bool)] {
        match self {
            Family::BoxStack => &[
                ("levels", true),
                ("width", true),
                ("depth", true),
                ("level_height", true),
                ("shrink", true),
            ],
            Family::TableLike => &[
                ("width", true),
                ("depth", true),
                ("height", true),
                ("top", true),
                ("leg", true),
            ],
            Family::Cylinder => &[("radius", false), ("height", true)],
            Family::LBracket => &[
                ("length", true),
                ("height", true),
                ("thickness", true),
                ("depth", true),
            ],
            Family::WingBody => &[
                ("length", true),
                ("body", false),
                ("span", true),
                ("chord", true),
                ("tail", true),
            ],
            Family::Ring => &[("radius", false), ("tube", false)],
        }
    }

    /// Default parameter ranges as fractions of the resolution.
    fn default_fractions(self) -> &'static [(&'static str, f64, f64)] {
        match self {
            Family::BoxStack => &[
                ("levels", 2.0 / 32.0, 4.0 / 32.0),
                ("width", 0.5, 0.85),
                ("depth", 0.5, 0.85),
                ("level_height", 0.12, 0.22),
                ("shrink", 0.04, 0.12),
            ],
            Family::TableLike => &[
                ("width", 0.6, 0.9),
                ("depth", 0.45, 0.8),
                ("height", 0.4, 0.7),
                ("top", 0.06, 0.12),
                ("leg", 0.06, 0.12),
            ],
            Family::Cylinder => &[("radius", 0.15, 0.4), ("height", 0.4, 0.9)],
            Family::LBracket => &[
                ("length", 0.5, 0.9),
                ("height", 0.5, 0.9),
                ("thickness", 0.12, 0.25),
                ("depth", 0.3, 0.7),
            ],
            Family::WingBody => &[
                ("length", 0.7, 0.95),
                ("body", 0.07, 0.13),
                ("span", 0.6, 0.95),
                ("chord", 0.15, 0.3),
                ("tail", 0.12, 0.25),
            ],
            Family::Ring => &[("radius", 0.22, 0.33), ("tube", 0.06, 0.13)],
        }
    }

    /// Default ranges scaled to resolution `r`, never below one voxel.
    pub fn default_ranges(self, r: usize) -> BTreeMap<String, ParamRange> {
        let r = r as f64;
        self.default_fractions()
            .iter()
            .map(|&(name, lo, hi)| {
                let range = if name == "levels" {
                    ParamRange::new(lo * 32.0, hi * 32.0)
                } else {
                    ParamRange::new((lo * r).max(1.0), (hi * r).max(1.0))
                };
                (name.to_string(), range)
            })
            .collect()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.replace('_', "-"))
            .ok_or_else(|| Error::Configuration(format!("unknown shape family {s}")))
    }
}

/// Closed interval `[lo, hi]` a parameter is drawn from uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub class_id: String,
    pub family: Family,
    pub param_ranges: BTreeMap<String, ParamRange>,
    pub role: ClassRole,
    pub seed: u64,
}

impl SynthClassSpec {
    /// A class of `family` using the default ranges at resolution `r`.
    pub fn new(class_id: &str, family: Family, role: ClassRole, r: usize, seed: u64) -> Self {
        Self {
            class_id: class_id.to_string(),
            family,
            param_ranges: family.default_ranges(r),
            role,
            seed,
        }
    }

    /// Replaces the range of one parameter.
    pub fn with_range(mut self, name: &str, range: ParamRange) -> Self {
        self.param_ranges.insert(name.to_string(), range);
        self
    }

    /// Shifts both ends of a parameter's range by `delta`.
    pub fn shifted(mut self, name: &str, delta: f64) -> Self {
        if let Some(r) = self.param_ranges.get_mut(name) {
            r.lo += delta;
            r.hi += delta;
        }
        self
    }

    /// Scales every range about its midpoint by `factor`.
    pub fn with_spread(mut self, factor: f64) -> Self {
        for r in self.param_ranges.values_mut() {
            let mid = 0.5 * (r.lo + r.hi);
            let half = 0.5 * r.width() * factor;
            *r = ParamRange::new(mid - half, mid + half);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.param_ranges.is_empty() {
            return Err(Error::Configuration(format!(
                "class {} has no parameter ranges",
                self.class_id
            )));
        }
        for (name, _) in self.family.parameters() {
            let r = self
                .param_ranges
                .get(*name)
                .ok_or_else(|| Error::Generation {
                    parameter: name.to_string(),
                    message: format!("missing range for {} family", self.family),
                })?;
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return Err(Error::Generation {
                    parameter: name.to_string(),
                    message: format!("invalid range [{}, {}]", r.lo, r.hi),
                });
            }
        }
        Ok(())
    }

    /// Draws one parameter vector.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<BTreeMap<String, f64>> {
        self.validate()?;
        let mut out = BTreeMap::new();
        for &(name, integer) in self.family.parameters() {
            let r = self.param_ranges[name];
            let v = if r.width() > 0.0 {
                rng.random_range(r.lo..=r.hi)
            } else {
                r.lo
            };
            out.insert(name.to_string(), if integer { v.round() } else { v });
        }
        Ok(out)
    }
}

/// `n` shapes of the class; item `i` uses a generator derived from
/// `(seed, class_id, i)`.
pub fn generate_class(
    spec: &SynthClassSpec,
    n: usize,
    seed: u64,
    resolution: usize,
) -> Result<Vec<VoxelGrid>> {
    if n == 0 {
        return Err(Error::Parameter("generate_class needs n ≥ 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &["shape", &spec.class_id, &i.to_string()]);
            let params = spec.sample(&mut rng)?;
            rasterize(spec.family, &params, resolution)
        })
        .collect()
}

/// Axis-aligned integer box `[x0, x1) × [y0, y1) × [z0, z1)` in local
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

impl Cuboid {
    fn centered_xz(w: i64, d: i64, y0: i64, h: i64) -> Self {
        Self {
            min: [-(w / 2), y0, -(d / 2)],
            max: [w - w / 2, y0 + h, d - d / 2],
        }
    }
}

enum Primitive {
    Boxes(Vec<Cuboid>),
    Implicit(Box<dyn Fn(f64, f64, f64) -> bool>),
}

fn positive(params: &BTreeMap<String, f64>, name: &str, min: f64) -> Result<f64> {
    let v = params[name];
    if v < min {
        return Err(Error::Generation {
            parameter: name.to_string(),
            message: format!("value {v} is below {min}, the shape would be empty"),
        });
    }
    Ok(v)
}

fn build(family: Family, p: &BTreeMap<String, f64>) -> Result<Primitive> {
    Ok(match family {
        Family::BoxStack => {
            let levels = positive(p, "levels", 1.0)? as i64;
            let w = positive(p, "width", 1.0)? as i64;
            let d = positive(p, "depth", 1.0)? as i64;
            let h = positive(p, "level_height", 1.0)? as i64;
            let s = p["shrink"].max(0.0) as i64;
            let mut boxes = Vec::new();
            for i in 0..levels {
                let (wi, di) = (w - i * s, d - i * s);
                if wi < 1 || di < 1 {
                    return Err(Error::Generation {
                        parameter: "shrink".into(),
                        message: format!("level {i} has no footprint"),
                    });
                }
                boxes.push(Cuboid::centered_xz(wi, di, i * h, h));
            }
            Primitive::Boxes(boxes)
        }
        Family::TableLike => {
            let w = positive(p, "width", 1.0)? as i64;
            let d = positive(p, "depth", 1.0)? as i64;
            let h = positive(p, "height", 1.0)? as i64;
            let top = positive(p, "top", 1.0)? as i64;
            let leg = positive(p, "leg", 1.0)? as i64;
            if 2 * leg > w.min(d) {
                return Err(Error::Generation {
                    parameter: "leg".into(),
                    message: format!("legs of {leg} voxels do not fit a {w}×{d} top"),
                });
            }
            if top >= h {
                return Err(Error::Generation {
                    parameter: "top".into(),
                    message: format!(
                        "top thickness {top} leaves no room for legs under height {h}"
                    ),
                });
            }
            let mut boxes = vec![Cuboid::centered_xz(w, d, h - top, top)];
            let top_box = boxes[0];
            for (x0, z0) in [
                (top_box.min[0], top_box.min[2]),
                (top_box.max[0] - leg, top_box.min[2]),
                (top_box.min[0], top_box.max[2] - leg),
                (top_box.max[0] - leg, top_box.max[2] - leg),
            ] {
                boxes.push(Cuboid {
                    min: [x0, 0, z0],
                    max: [x0 + leg, h - top, z0 + leg],
                });
            }
            Primitive::Boxes(boxes)
        }
        Family::LBracket => {
            let len = positive(p, "length", 1.0)? as i64;
            let h = positive(p, "height", 1.0)? as i64;
            let t = positive(p, "thickness", 1.0)? as i64;
            let d = positive(p, "depth", 1.0)? as i64;
            Primitive::Boxes(vec![
                Cuboid {
                    min: [0, 0, 0],
                    max: [len, t, d],
                },
                Cuboid {
                    min: [0, 0, 0],
                    max: [t, h, d],
                },
            ])
        }
        Family::Cylinder => {
            let r = positive(p, "radius", f64::MIN_POSITIVE)?;
            let h = positive(p, "height", 1.0)?;
            Primitive::Implicit(Box::new(move |x, y, z| {
                x * x + z * z <= r * r && y.abs() <= h / 2.0
            }))
        }
        Family::WingBody => {
            let len = positive(p, "length", 1.0)?;
            let body = positive(p, "body", f64::MIN_POSITIVE)?;
            let span = positive(p, "span", 1.0)?;
            let chord = positive(p, "chord", 1.0)?;
            let tail = p["tail"].max(0.0);
            Primitive::Implicit(Box::new(move |x, y, z| {
                let fuselage = x.abs() <= len / 2.0 && y * y + z * z <= body * body;
                let wing = x.abs() <= chord / 2.0 && z.abs() <= span / 2.0 && y.abs() <= 1.0;
                let fin = x <= -len / 2.0 + chord / 2.0
                    && x >= -len / 2.0
                    && y >= 0.0
                    && y <= body + tail
                    && z.abs() <= 1.0;
                fuselage || wing || fin
            }))
        }
        Family::Ring => {
            let big = positive(p, "radius", f64::MIN_POSITIVE)?;
            let tube = positive(p, "tube", f64::MIN_POSITIVE)?;
            Primitive::Implicit(Box::new(move |x, y, z| {
                let q = (x * x + z * z).sqrt() - big;
                q * q + y * y <= tube * tube
            }))
        }
    })
}

/// The largest parameter is blamed when a shape leaves the lattice.
fn largest_param(family: Family, p: &BTreeMap<String, f64>) -> String {
    family
        .parameters()
        .iter()
        .map(|(n, _)| *n)
        .max_by(|a, b| p[*a].total_cmp(&p[*b]))
        .unwrap_or("resolution")
        .to_string()
}

/// Rasterises one parameter vector of `family` at resolution `r`.
pub fn rasterize(family: Family, params: &BTreeMap<String, f64>, r: usize) -> Result<VoxelGrid> {
    let prim = build(family, params)?;
    let mut grid = VoxelGrid::empty(r)?;
    let ri = r as i64;
    let out_of_lattice = |extent: i64| Error::Generation {
        parameter: largest_param(family, params),
        message: format!("shape extent {extent} exceeds the {r}³ lattice"),
    };
    match prim {
        Primitive::Boxes(boxes) => {
            let mut lo = [i64::MAX; 3];
            let mut hi = [i64::MIN; 3];
            for b in &boxes {
                for a in 0..3 {
                    lo[a] = lo[a].min(b.min[a]);
                    hi[a] = hi[a].max(b.max[a]);
                }
            }
            let mut off = [0i64; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                if extent > ri {
                    return Err(out_of_lattice(extent));
                }
                off[a] = (ri - extent) / 2 - lo[a];
            }
            for b in &boxes {
                for x in b.min[0]..b.max[0] {
                    for y in b.min[1]..b.max[1] {
                        for z in b.min[2]..b.max[2] {
                            grid.set(
                                (x + off[0]) as usize,
                                (y + off[1]) as usize,
                                (z + off[2]) as usize,
                                true,
                            );
                        }
                    }
                }
            }
        }
        Primitive::Implicit(inside) => {
            // Sample on a lattice centred at the origin twice as wide as R
            // so the occupied extent can be measured before placement.
            let span = ri;
            let mut cells = Vec::new();
            for x in -span..span {
                for y in -span..span {
                    for z in -span..span {
                        let (fx, fy, fz) = (x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
                        if inside(fx, fy, fz) {
                            cells.push([x, y, z]);
                        }
                    }
                }
            }
            if cells.is_empty() {
                return Err(Error::Generation {
                    parameter: family.parameters()[0].0.to_string(),
                    message: "shape has no voxel centres inside it".into(),
                });
            }
            let mut lo = [i64::MAX; 3];
            let mut hi = [i64::MIN; 3];
            for v in &cells {
                for a in 0..3 {
                    lo[a] = lo[a].min(v[a]);
                    hi[a] = hi[a].max(v[a] + 1);
                }
            }
            let mut off = [0i64; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                if extent > ri {
                    return Err(out_of_lattice(extent));
                }
                off[a] = (ri - extent) / 2 - lo[a];
            }
            for v in cells {
                grid.set(
                    (v[0] + off[0]) as usize,
                    (v[1] + off[1]) as usize,
                    (v[2] + off[2]) as usize,
                    true,
                );
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::Generation {
            parameter: family.parameters()[0].0.to_string(),
            message: "shape is empty".into(),
        });
    }
    Ok(grid)
}
