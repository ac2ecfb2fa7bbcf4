//! Seeded synthetic point generators for seven distribution families.
//!
//! A [`DistributionSpec`] has a compact text form used by the CLI, config
//! files and dataset metadata:
//!
//! ```text
//! uniform
//! gaussian(sigma=0.1,cx=0.5,cy=0.5)
//! diagonal(p=0.5,buffer=0.05,theta=0)
//! sierpinski
//! bit(p=0.2,digits=16)
//! parcel(dither=0.2)
//! mixed(0.4*gaussian,0.3*diagonal,0.3*uniform)
//! ```
//!
//! Omitted parameters take their defaults; a bare `mixed` is the
//! gaussian/diagonal/uniform combination at weights 0.4/0.3/0.3.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point, PointSet};
use crate::rng::{Seed, SeededRng};

const SIERPINSKI_VERTICES: [Point; 3] = [
    Point::new(0.5, 0.0),
    Point::new(0.0, 1.0),
    Point::new(1.0, 1.0),
];
const SIERPINSKI_BURN_IN: usize = 20;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Uniform,
    Gaussian,
    Diagonal,
    Sierpinski,
    Bit,
    Parcel,
    Mixed,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Uniform,
        Family::Gaussian,
        Family::Diagonal,
        Family::Sierpinski,
        Family::Bit,
        Family::Parcel,
        Family::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Uniform => "uniform",
            Family::Gaussian => "gaussian",
            Family::Diagonal => "diagonal",
            Family::Sierpinski => "sierpinski",
            Family::Bit => "bit",
            Family::Parcel => "parcel",
            Family::Mixed => "mixed",
        }
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
        let lower = s.trim().to_ascii_lowercase();
        Family::ALL
            .into_iter()
            .find(|f| f.name() == lower)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistributionSpec {
    Uniform,
    /// Independent normals around `(mean_x, mean_y)`, rejected outside the unit square.
    Gaussian {
        mean_x: f64,
        mean_y: f64,
        std_dev: f64,
    },
    /// Points on `y = x` with probability `on_line`, otherwise displaced
    /// perpendicular to it by `N(0, buffer)`; the pattern is rotated by
    /// `rotation` radians about the center of the unit square.
    Diagonal {
        on_line: f64,
        buffer: f64,
        rotation: f64,
    },
    Sierpinski,
    /// Each coordinate is a `digits`-bit binary fraction whose bits are set
    /// with probability `prob`.
    Bit { prob: f64, digits: u32 },
    /// Centers of a recursive longest-side split of the unit square.
    Parcel { dither: f64 },
    Mixed(Vec<(DistributionSpec, f64)>),
}

impl DistributionSpec {
    pub fn gaussian() -> Self {
        DistributionSpec::Gaussian {
            mean_x: 0.5,
            mean_y: 0.5,
            std_dev: 0.1,
        }
    }

    pub fn diagonal() -> Self {
        DistributionSpec::Diagonal {
            on_line: 0.5,
            buffer: 0.05,
            rotation: 0.0,
        }
    }

    pub fn bit() -> Self {
        DistributionSpec::Bit {
            prob: 0.2,
            digits: 16,
        }
    }

    pub fn parcel() -> Self {
        DistributionSpec::Parcel { dither: 0.2 }
    }

    pub fn mixed() -> Self {
        DistributionSpec::Mixed(vec![
            (Self::gaussian(), 0.4),
            (Self::diagonal(), 0.3),
            (DistributionSpec::Uniform, 0.3),
        ])
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Uniform => DistributionSpec::Uniform,
            Family::Gaussian => Self::gaussian(),
            Family::Diagonal => Self::diagonal(),
            Family::Sierpinski => DistributionSpec::Sierpinski,
            Family::Bit => Self::bit(),
            Family::Parcel => Self::parcel(),
            Family::Mixed => Self::mixed(),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            DistributionSpec::Uniform => Family::Uniform,
            DistributionSpec::Gaussian { .. } => Family::Gaussian,
            DistributionSpec::Diagonal { .. } => Family::Diagonal,
            DistributionSpec::Sierpinski => Family::Sierpinski,
            DistributionSpec::Bit { .. } => Family::Bit,
            DistributionSpec::Parcel { .. } => Family::Parcel,
            DistributionSpec::Mixed(_) => Family::Mixed,
        }
    }

    /// Parameter list as `key=value` pairs, without the family name.
    pub fn params_string(&self) -> String {
        let s = self.to_string();
        match s.find('(') {
            Some(i) => s[i + 1..s.len() - 1].to_string(),
            None => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{name}={v} outside [0,1]")))
            }
        };
        match self {
            DistributionSpec::Uniform | DistributionSpec::Sierpinski => Ok(()),
            DistributionSpec::Gaussian {
                mean_x,
                mean_y,
                std_dev,
            } => {
                unit("cx", *mean_x)?;
                unit("cy", *mean_y)?;
                if !(std_dev.is_finite() && *std_dev > 0.0) {
                    return invalid(format!("sigma={std_dev} must be positive"));
                }
                Ok(())
            }
            DistributionSpec::Diagonal {
                on_line,
                buffer,
                rotation,
            } => {
                unit("p", *on_line)?;
                if !(buffer.is_finite() && *buffer >= 0.0) {
                    return invalid(format!("buffer={buffer} must be nonnegative"));
                }
                if !rotation.is_finite() {
                    return invalid(format!("theta={rotation} must be finite"));
                }
                Ok(())
            }
            DistributionSpec::Bit { prob, digits } => {
                unit("p", *prob)?;
                if !(1..=52).contains(digits) {
                    return invalid(format!("digits={digits} outside 1..=52"));
                }
                Ok(())
            }
            DistributionSpec::Parcel { dither } => {
                if !(0.0..0.5).contains(dither) {
                    return invalid(format!("dither={dither} outside [0,0.5)"));
                }
                Ok(())
            }
            DistributionSpec::Mixed(children) => {
                if children.len() < 2 {
                    return invalid("mixed needs at least two children".into());
                }
                for (child, w) in children {
                    if !(w.is_finite() && *w > 0.0) {
                        return invalid(format!("mixed weight {w} must be positive"));
                    }
                    child.validate()?;
                }
                let total: f64 = children.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                    return invalid(format!("mixed weights sum to {total}, not 1"));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionSpec::Uniform => write!(f, "uniform"),
            DistributionSpec::Sierpinski => write!(f, "sierpinski"),
            DistributionSpec::Gaussian {
                mean_x,
                mean_y,
                std_dev,
            } => write!(f, "gaussian(sigma={std_dev},cx={mean_x},cy={mean_y})"),
            DistributionSpec::Diagonal {
                on_line,
                buffer,
                rotation,
            } => write!(f, "diagonal(p={on_line},buffer={buffer},theta={rotation})"),
            DistributionSpec::Bit { prob, digits } => write!(f, "bit(p={prob},digits={digits})"),
            DistributionSpec::Parcel { dither } => write!(f, "parcel(dither={dither})"),
            DistributionSpec::Mixed(children) => {
                write!(f, "mixed(")?;
                for (i, (child, w)) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{w}*{child}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl From<DistributionSpec> for String {
    fn from(spec: DistributionSpec) -> String {
        spec.to_string()
    }
}

impl TryFrom<String> for DistributionSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for DistributionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = parse_spec(s.trim())?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Splits `s` on top-level commas (ignoring commas nested in parentheses).
fn split_top_level(s: &str) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::InvalidSpec(format!("unbalanced `)` in `{s}`")));
                }
            }
            ',' if depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::InvalidSpec(format!("unbalanced `(` in `{s}`")));
    }
    parts.push(s[start..].trim());
    Ok(parts)
}

fn parse_spec(s: &str) -> Result<DistributionSpec> {
    let (name, args) = match s.find('(') {
        Some(open) => {
            if !s.ends_with(')') {
                return Err(Error::InvalidSpec(format!("missing `)` in `{s}`")));
            }
            (&s[..open], Some(&s[open + 1..s.len() - 1]))
        }
        None => (s, None),
    };
    let family: Family = name.parse()?;
    let args = args.map(str::trim).filter(|a| !a.is_empty());

    if family == Family::Mixed {
        let Some(args) = args else {
            return Ok(DistributionSpec::mixed());
        };
        let children = split_top_level(args)?
            .into_iter()
            .map(|part| {
                let (w, child) = part.split_once('*').ok_or_else(|| {
                    Error::InvalidSpec(format!("mixed child `{part}` must be `weight*spec`"))
                })?;
                let w: f64 = w
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidSpec(format!("bad weight `{w}`")))?;
                Ok((parse_spec(child.trim())?, w))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(DistributionSpec::Mixed(children));
    }

    let mut spec = DistributionSpec::default_for(family);
    let Some(args) = args else {
        return Ok(spec);
    };
    for kv in split_top_level(args)? {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidSpec(format!("parameter `{kv}` must be `key=value`")))?;
        let key = key.trim();
        let value = value.trim();
        let real = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad value `{value}` for `{key}`")))
        };
        let unknown = || Error::InvalidSpec(format!("unknown parameter `{key}` for {family}"));
        match &mut spec {
            DistributionSpec::Gaussian {
                mean_x,
                mean_y,
                std_dev,
            } => match key {
                "sigma" => *std_dev = real()?,
                "cx" => *mean_x = real()?,
                "cy" => *mean_y = real()?,
                _ => return Err(unknown()),
            },
            DistributionSpec::Diagonal {
                on_line,
                buffer,
                rotation,
            } => match key {
                "p" => *on_line = real()?,
                "buffer" => *buffer = real()?,
                "theta" => *rotation = real()?,
                _ => return Err(unknown()),
            },
            DistributionSpec::Bit { prob, digits } => match key {
                "p" => *prob = real()?,
                "digits" => {
                    *digits = value.parse().map_err(|_| {
                        Error::InvalidSpec(format!("bad value `{value}` for `digits`"))
                    })?
                }
                _ => return Err(unknown()),
            },
            DistributionSpec::Parcel { dither } => match key {
                "dither" => *dither = real()?,
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        }
    }
    Ok(spec)
}

/// Generates `n` points in the unit square. Identical `(spec, n, seed)`
/// triples produce identical output.
pub fn generate(spec: &DistributionSpec, n: usize, seed: Seed) -> Result<PointSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    Ok(PointSet::from_vec_unchecked(generate_points(spec, n, seed)))
}

/// Weighted union of `children`; child `i` contributes `round(w_i * n)`
/// points, the last child takes the remainder, and the union is shuffled.
pub fn generate_mixed(
    children: &[(DistributionSpec, f64)],
    n: usize,
    seed: Seed,
) -> Result<PointSet> {
    generate(&DistributionSpec::Mixed(children.to_vec()), n, seed)
}

fn generate_points(spec: &DistributionSpec, n: usize, seed: Seed) -> Vec<Point> {
    let mut rng = SeededRng::new(seed);
    match spec {
        DistributionSpec::Uniform => (0..n)
            .map(|_| Point::new(rng.uniform(), rng.uniform()))
            .collect(),
        DistributionSpec::Gaussian {
            mean_x,
            mean_y,
            std_dev,
        } => (0..n)
            .map(|_| loop {
                let x = mean_x + std_dev * rng.normal();
                let y = mean_y + std_dev * rng.normal();
                if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                    break Point::new(x, y);
                }
            })
            .collect(),
        DistributionSpec::Diagonal {
            on_line,
            buffer,
            rotation,
        } => {
            let (sin, cos) = rotation.sin_cos();
            (0..n)
                .map(|_| {
                    let t = rng.uniform();
                    let mut p = if rng.bernoulli(*on_line) {
                        Point::new(t, t)
                    } else {
                        let d = buffer * rng.normal() / std::f64::consts::SQRT_2;
                        Point::new(clip(t - d), clip(t + d))
                    };
                    if *rotation != 0.0 {
                        let (dx, dy) = (p.x - 0.5, p.y - 0.5);
                        p = Point::new(
                            clip(0.5 + cos * dx - sin * dy),
                            clip(0.5 + sin * dx + cos * dy),
                        );
                    }
                    p
                })
                .collect()
        }
        DistributionSpec::Sierpinski => {
            let mut p = SIERPINSKI_VERTICES[0];
            let mut out = Vec::with_capacity(n);
            for i in 0..n + SIERPINSKI_BURN_IN {
                let v = SIERPINSKI_VERTICES[rng.below(3) as usize];
                p = Point::new((p.x + v.x) / 2.0, (p.y + v.y) / 2.0);
                if i >= SIERPINSKI_BURN_IN {
                    out.push(p);
                }
            }
            out
        }
        DistributionSpec::Bit { prob, digits } => {
            let coord = |rng: &mut SeededRng| {
                (1..=*digits)
                    .filter(|_| rng.bernoulli(*prob))
                    .map(|i| 0.5f64.powi(i as i32))
                    .sum::<f64>()
            };
            (0..n)
                .map(|_| {
                    let x = coord(&mut rng);
                    let y = coord(&mut rng);
                    Point::new(x, y)
                })
                .collect()
        }
        DistributionSpec::Parcel { dither } => parcel_centers(n, *dither, &mut rng),
        DistributionSpec::Mixed(children) => {
            let mut out = Vec::with_capacity(n);
            let mut assigned = 0usize;
            for (i, (child, w)) in children.iter().enumerate() {
                let count = if i + 1 == children.len() {
                    n - assigned
                } else {
                    ((w * n as f64).round() as usize).min(n - assigned)
                };
                assigned += count;
                if count > 0 {
                    out.extend(generate_points(child, count, seed.derive(&[i as u64])));
                }
            }
            SeededRng::new(seed.derive(&[u64::MAX])).shuffle(&mut out);
            out
        }
    }
}

fn clip(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

struct Parcel {
    bbox: BBox,
    area: f64,
    order: usize,
}

impl PartialEq for Parcel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Parcel {}

impl PartialOrd for Parcel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Parcel {
    // Max-heap on area; among equal areas, the older parcel first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.area
            .total_cmp(&other.area)
            .then_with(|| other.order.cmp(&self.order))
    }
}

fn parcel_centers(n: usize, dither: f64, rng: &mut SeededRng) -> Vec<Point> {
    let mut heap = BinaryHeap::with_capacity(n);
    heap.push(Parcel {
        bbox: BBox::unit(),
        area: 1.0,
        order: 0,
    });
    let mut next_order = 1;
    while heap.len() < n {
        let Parcel { bbox, .. } = heap.pop().expect("heap is never empty");
        let frac = rng.uniform_in(0.5 - dither, 0.5 + dither);
        let (a, b) = if bbox.width() >= bbox.height() {
            let cut = bbox.min_x + frac * bbox.width();
            (
                BBox { max_x: cut, ..bbox },
                BBox { min_x: cut, ..bbox },
            )
        } else {
            let cut = bbox.min_y + frac * bbox.height();
            (
                BBox { max_y: cut, ..bbox },
                BBox { min_y: cut, ..bbox },
            )
        };
        for part in [a, b] {
            heap.push(Parcel {
                area: part.area(),
                bbox: part,
                order: next_order,
            });
            next_order += 1;
        }
    }
    let mut parcels = heap.into_vec();
    parcels.sort_by_key(|p| p.order);
    parcels
        .into_iter()
        .map(|p| {
            Point::new(
                (p.bbox.min_x + p.bbox.max_x) / 2.0,
                (p.bbox.min_y + p.bbox.max_y) / 2.0,
            )
        })
        .collect()
}
