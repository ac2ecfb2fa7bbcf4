//! Range counting, uniform sampling without replacement, the sample-scaled
//! selectivity estimator and its accuracy metric.

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point, PointSet};
use crate::rng::{Seed, SeededRng};

/// Cells per side of the counting index.
pub const INDEX_CELLS: usize = 64;

/// Query workloads and mean-accuracy defaults.
pub const DEFAULT_QUERIES: usize = 50;
pub const DEFAULT_DRAWS: usize = 5;

/// A square range query whose area is `q` times the area of the dataset MBR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySpec {
    pub bbox: BBox,
    pub q: f64,
}

impl QuerySpec {
    pub fn centered(center: Point, q: f64, data_mbr: &BBox) -> Result<Self> {
        check_unit_interval("q", q)?;
        let side = (q * data_mbr.area()).sqrt();
        Ok(Self {
            bbox: BBox::square(center, side),
            q,
        })
    }
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name}={v} outside (0,1]")))
    }
}

/// Exact count of points inside the query box (linear scan).
pub fn ground_truth(data: &PointSet, query: &QuerySpec) -> u64 {
    count_in(data.points(), &query.bbox)
}

fn count_in(points: &[Point], bbox: &BBox) -> u64 {
    points.iter().filter(|p| bbox.contains(**p)).count() as u64
}

/// Equi-width bin of `v` along an axis starting at `lo` of length `len`.
/// Values at or past the upper edge land in the last bin.
#[inline]
pub(crate) fn bin_of(v: f64, lo: f64, len: f64, bins: usize) -> usize {
    if len <= 0.0 {
        return 0;
    }
    let t = (v - lo) / len * bins as f64;
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Uniform grid over the dataset MBR with per-cell point lists and per-cell
/// tight bounds; counts agree exactly with [`ground_truth`].
#[derive(Debug, Clone)]
pub struct GridIndex {
    extent: BBox,
    cells: usize,
    /// Points grouped by cell; cell `c` owns `points[starts[c]..starts[c + 1]]`.
    points: Vec<Point>,
    starts: Vec<usize>,
    bounds: Vec<Option<BBox>>,
}

impl GridIndex {
    pub fn build(data: &PointSet) -> Result<Self> {
        Self::with_cells(data, INDEX_CELLS)
    }

    pub fn with_cells(data: &PointSet, cells: usize) -> Result<Self> {
        let extent = data.mbr()?;
        let cells = cells.max(1);
        let cell_of = |p: &Point| {
            let i = bin_of(p.y, extent.min_y, extent.height(), cells);
            let j = bin_of(p.x, extent.min_x, extent.width(), cells);
            i * cells + j
        };
        let mut starts = vec![0usize; cells * cells + 1];
        for p in data {
            starts[cell_of(p) + 1] += 1;
        }
        for c in 0..cells * cells {
            starts[c + 1] += starts[c];
        }
        let mut cursor = starts.clone();
        let mut points = vec![Point::new(0.0, 0.0); data.len()];
        let mut bounds: Vec<Option<BBox>> = vec![None; cells * cells];
        for p in data {
            let c = cell_of(p);
            points[cursor[c]] = *p;
            cursor[c] += 1;
            match &mut bounds[c] {
                Some(b) => b.expand(*p),
                slot => *slot = Some(BBox::of_point(*p)),
            }
        }
        Ok(Self {
            extent,
            cells,
            points,
            starts,
            bounds,
        })
    }

    pub fn extent(&self) -> &BBox {
        &self.extent
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, bbox: &BBox) -> u64 {
        if !self.extent.intersects(bbox) {
            return 0;
        }
        let e = &self.extent;
        let j0 = bin_of(bbox.min_x, e.min_x, e.width(), self.cells);
        let j1 = bin_of(bbox.max_x, e.min_x, e.width(), self.cells);
        let i0 = bin_of(bbox.min_y, e.min_y, e.height(), self.cells);
        let i1 = bin_of(bbox.max_y, e.min_y, e.height(), self.cells);
        let mut total = 0u64;
        for i in i0..=i1 {
            for j in j0..=j1 {
                let c = i * self.cells + j;
                let Some(cell_box) = &self.bounds[c] else {
                    continue;
                };
                let slice = &self.points[self.starts[c]..self.starts[c + 1]];
                if bbox.contains_box(cell_box) {
                    total += slice.len() as u64;
                } else if bbox.intersects(cell_box) {
                    total += count_in(slice, bbox);
                }
            }
        }
        total
    }
}

/// Sample size for ratio `sigma`: `max(1, round(sigma * n))`.
pub fn sample_size(n: usize, sigma: f64) -> Result<usize> {
    check_unit_interval("sigma", sigma)?;
    Ok(((sigma * n as f64).round() as usize).clamp(1, n.max(1)))
}

/// Draws distinct indices uniformly without replacement (Floyd's algorithm),
/// reusing a membership bitmap across draws.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    taken: Vec<u64>,
    chosen: Vec<usize>,
}

impl IndexSampler {
    pub fn new(n: usize) -> Self {
        Self {
            taken: vec![0; n.div_ceil(64)],
            chosen: Vec::new(),
        }
    }

    /// Returns `s` distinct indices from `0..n`, in draw order.
    pub fn draw(&mut self, n: usize, s: usize, rng: &mut SeededRng) -> &[usize] {
        assert!(s <= n && n <= self.taken.len() * 64);
        for &i in &self.chosen {
            self.taken[i / 64] &= !(1 << (i % 64));
        }
        self.chosen.clear();
        for j in n - s..n {
            let t = rng.below(j as u64 + 1) as usize;
            let pick = if self.taken[t / 64] & (1 << (t % 64)) != 0 { j } else { t };
            self.taken[pick / 64] |= 1 << (pick % 64);
            self.chosen.push(pick);
        }
        &self.chosen
    }
}

/// Uniform sample of `max(1, round(sigma * n))` distinct points.
pub fn draw_sample(data: &PointSet, sigma: f64, seed: Seed) -> Result<PointSet> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    let s = sample_size(n, sigma)?;
    let mut sampler = IndexSampler::new(n);
    let mut rng = SeededRng::new(seed);
    let points = sampler
        .draw(n, s, &mut rng)
        .iter()
        .map(|&i| data.points()[i])
        .collect();
    Ok(PointSet::from_vec_unchecked(points))
}

/// Scaled sample count `k * n / s`.
pub fn estimate_selectivity(sample: &PointSet, s: usize, n: usize, query: &QuerySpec) -> f64 {
    scale_count(ground_truth(sample, query), s, n)
}

#[inline]
fn scale_count(k: u64, s: usize, n: usize) -> f64 {
    k as f64 * (n as f64 / s as f64)
}

/// `max(0, 1 - |truth - estimate| / truth)`.
pub fn accuracy(estimate: f64, truth: u64) -> Result<f64> {
    if truth == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let truth = truth as f64;
    Ok((1.0 - (truth - estimate).abs() / truth).max(0.0))
}

/// `m` square queries of area `q * area(data_mbr)` with centers uniform over
/// the MBR. Queries may overhang the MBR.
pub fn random_query_workload(
    data_mbr: &BBox,
    q: f64,
    m: usize,
    seed: Seed,
) -> Result<Vec<QuerySpec>> {
    check_unit_interval("q", q)?;
    let mut rng = SeededRng::new(seed);
    (0..m)
        .map(|_| {
            let cx = rng.uniform_in(data_mbr.min_x, data_mbr.max_x);
            let cy = rng.uniform_in(data_mbr.min_y, data_mbr.max_y);
            QuerySpec::centered(Point::new(cx, cy), q, data_mbr)
        })
        .collect()
}

/// A dataset paired with its counting index, reusable across many
/// mean-accuracy measurements.
#[derive(Debug, Clone)]
pub struct IndexedPointSet {
    data: PointSet,
    index: GridIndex,
}

impl IndexedPointSet {
    pub fn new(data: PointSet) -> Result<Self> {
        let index = GridIndex::build(&data)?;
        Ok(Self { data, index })
    }

    pub fn data(&self) -> &PointSet {
        &self.data
    }

    pub fn mbr(&self) -> &BBox {
        self.index.extent()
    }

    pub fn ground_truth(&self, query: &QuerySpec) -> u64 {
        self.index.count(&query.bbox)
    }

    /// Mean accuracy over `m` queries and `r` sample draws per query.
    ///
    /// The workload comes from `seed.derive([0])`; draw `d` for query `i`
    /// uses `seed.derive([1, i, d])`. Queries with an empty ground truth are
    /// skipped.
    pub fn mean_accuracy(&self, sigma: f64, q: f64, m: usize, r: usize, seed: Seed) -> Result<f64> {
        if m == 0 || r == 0 {
            return Err(Error::InvalidArgument("m and r must be at least 1".into()));
        }
        let n = self.data.len();
        let s = sample_size(n, sigma)?;
        let queries = random_query_workload(self.mbr(), q, m, seed.derive(&[0]))?;
        let points = self.data.points();
        let mut sampler = IndexSampler::new(n);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (qi, query) in queries.iter().enumerate() {
            let truth = self.ground_truth(query);
            if truth == 0 {
                continue;
            }
            for d in 0..r {
                let k = if s == n {
                    truth
                } else {
                    let mut rng = SeededRng::new(seed.derive(&[1, qi as u64, d as u64]));
                    sampler
                        .draw(n, s, &mut rng)
                        .iter()
                        .filter(|&&i| query.bbox.contains(points[i]))
                        .count() as u64
                };
                total += accuracy(scale_count(k, s, n), truth)?;
                pairs += 1;
            }
        }
        if pairs == 0 {
            return Err(Error::NoNonemptyQueries);
        }
        Ok(total / pairs as f64)
    }
}

/// Mean accuracy of the sample-based estimate over a random workload.
pub fn measure_mean_accuracy(
    data: &PointSet,
    sigma: f64,
    q: f64,
    m: usize,
    r: usize,
    seed: Seed,
) -> Result<f64> {
    IndexedPointSet::new(data.clone())?.mean_accuracy(sigma, q, m, r, seed)
}
