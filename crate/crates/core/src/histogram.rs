//! Equi-width `h x h` frequency grids over a dataset's bounding rectangle.

use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BBox, PointSet};
use crate::io::write_atomic;
use crate::selectivity::bin_of;

/// Resolutions the model architecture supports.
pub const SUPPORTED_SIZES: [usize; 6] = [1, 4, 8, 16, 32, 64];

/// Normalized cell frequencies, row-major with row 0 the lowest `y` band.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGrid {
    h: usize,
    extent: BBox,
    values: Vec<f64>,
}

impl HistogramGrid {
    pub fn new(h: usize, extent: BBox, values: Vec<f64>) -> Result<Self> {
        if h == 0 || values.len() != h * h {
            return Err(Error::InvalidArgument(format!(
                "histogram needs h*h values (h={h}, got {})",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "histogram values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { h, extent, values })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn extent(&self) -> &BBox {
        &self.extent
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value of the cell in row `row` (y band) and column `col` (x band).
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.h + col]
    }

    /// Row-major copy of the cell values.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), |w| {
            let e = &self.extent;
            writeln!(w, "h={}", self.h)?;
            writeln!(w, "extent={},{},{},{}", e.min_x, e.min_y, e.max_x, e.max_y)?;
            for row in self.values.chunks(self.h) {
                let line: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            Ok(())
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut next = |what: &str| -> Result<String> {
            match lines.next() {
                Some(line) => line.map_err(|e| Error::io(path, e)),
                None => Err(Error::parse(path, format!("missing {what}"))),
            }
        };
        let h: usize = next("h line")?
            .trim()
            .strip_prefix("h=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, "line 1 must be `h=<int>`"))?;
        let extent_line = next("extent line")?;
        let bounds: Vec<f64> = extent_line
            .trim()
            .strip_prefix("extent=")
            .map(|v| v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>())
            .and_then(|r| r.ok())
            .filter(|b: &Vec<f64>| b.len() == 4)
            .ok_or_else(|| Error::parse(path, "line 2 must be `extent=<min_x>,<min_y>,<max_x>,<max_y>`"))?;
        let extent = BBox::new(bounds[0], bounds[1], bounds[2], bounds[3])
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let mut values = Vec::with_capacity(h * h);
        for row in 0..h {
            let line = next("histogram row")?;
            let parsed: Vec<f64> = line
                .trim()
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("row {row}: bad number")))?;
            if parsed.len() != h {
                return Err(Error::parse(path, format!("row {row}: expected {h} values")));
            }
            values.extend(parsed);
        }
        Self::new(h, extent, values).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Cell counts over the MBR; points on the upper edges fold into the last
/// row/column.
pub fn cell_counts(data: &PointSet, h: usize) -> Result<(BBox, Vec<u64>)> {
    if h == 0 {
        return Err(Error::InvalidArgument("h must be at least 1".into()));
    }
    let extent = data.mbr()?;
    let mut counts = vec![0u64; h * h];
    for p in data {
        let row = bin_of(p.y, extent.min_y, extent.height(), h);
        let col = bin_of(p.x, extent.min_x, extent.width(), h);
        counts[row * h + col] += 1;
    }
    Ok((extent, counts))
}

/// Count-normalized `h x h` histogram of `data`.
pub fn build_histogram(data: &PointSet, h: usize) -> Result<HistogramGrid> {
    let (extent, counts) = cell_counts(data, h)?;
    let n = data.len() as f64;
    let values = counts.into_iter().map(|c| c as f64 / n).collect();
    Ok(HistogramGrid { h, extent, values })
}

pub fn flatten(grid: &HistogramGrid) -> Vec<f64> {
    grid.flatten()
}
