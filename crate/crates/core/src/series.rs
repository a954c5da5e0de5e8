//! Dense containers for per-path and per-type time series.
//!
//! Paths flagged by the flow engine stay in the containers (so indices line
//! up with the ensemble) but are marked inactive; summaries skip them.

use serde::Serialize;

/// Values indexed by `[path][step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSeries {
    paths: usize,
    len: usize,
    data: Vec<f64>,
    active: Vec<bool>,
}

impl PathSeries {
    pub fn filled(paths: usize, len: usize, value: f64) -> Self {
        Self {
            paths,
            len,
            data: vec![value; paths * len],
            active: vec![true; paths],
        }
    }

    /// Build from per-path rows of equal length.
    pub fn from_rows(rows: Vec<Vec<f64>>, active: Vec<bool>) -> Self {
        let paths = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        assert_eq!(active.len(), paths, "activity mask length");
        let mut data = Vec::with_capacity(paths * len);
        for r in &rows {
            assert_eq!(r.len(), len, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { paths, len, data, active }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, p: usize, j: usize) -> f64 {
        self.data[p * self.len + j]
    }

    #[inline]
    pub fn set(&mut self, p: usize, j: usize, v: f64) {
        self.data[p * self.len + j] = v;
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.len..(p + 1) * self.len]
    }

    pub fn row_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.len..(p + 1) * self.len]
    }

    pub fn is_active(&self, p: usize) -> bool {
        self.active[p]
    }

    pub fn activity(&self) -> &[bool] {
        &self.active
    }

    pub fn active_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.paths).filter(|&p| self.active[p])
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            paths: self.paths,
            len: self.len,
            data: self.data.iter().map(|&v| f(v)).collect(),
            active: self.active.clone(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.paths, self.len), (other.paths, other.len));
        Self {
            paths: self.paths,
            len: self.len,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            active: self
                .active
                .iter()
                .zip(&other.active)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// Cross-path mean at step `j` over active paths.
    pub fn mean_at(&self, j: usize) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for p in self.active_paths() {
            s += self.get(p, j);
            n += 1;
        }
        s / n as f64
    }

    /// Largest absolute value over active paths and all steps.
    pub fn max_abs(&self) -> f64 {
        self.active_paths()
            .flat_map(|p| self.row(p).iter().copied())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Summary quantiles across active paths at step `j`.
    pub fn summary_at(&self, j: usize) -> Summary {
        let mut v: Vec<f64> = self.active_paths().map(|p| self.get(p, j)).collect();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Summary {
            mean,
            q05: quantile(&v, 0.05),
            q50: quantile(&v, 0.50),
            q95: quantile(&v, 0.95),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Values indexed by `[path][type][step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeSeries {
    paths: usize,
    types: usize,
    len: usize,
    data: Vec<f64>,
}

impl TypeSeries {
    pub fn filled(paths: usize, types: usize, len: usize, value: f64) -> Self {
        Self {
            paths,
            types,
            len,
            data: vec![value; paths * types * len],
        }
    }

    /// Build from per-path blocks laid out `[type][step]`.
    pub fn from_blocks(blocks: Vec<Vec<f64>>, types: usize, len: usize) -> Self {
        let paths = blocks.len();
        let mut data = Vec::with_capacity(paths * types * len);
        for b in &blocks {
            assert_eq!(b.len(), types * len, "block size");
            data.extend_from_slice(b);
        }
        Self { paths, types, len, data }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize, j: usize) -> f64 {
        self.data[(p * self.types + k) * self.len + j]
    }

    #[inline]
    pub fn set(&mut self, p: usize, k: usize, j: usize, v: f64) {
        self.data[(p * self.types + k) * self.len + j] = v;
    }

    pub fn trajectory(&self, p: usize, k: usize) -> &[f64] {
        let o = (p * self.types + k) * self.len;
        &self.data[o..o + self.len]
    }

    pub fn block(&self, p: usize) -> &[f64] {
        let o = p * self.types * self.len;
        &self.data[o..o + self.types * self.len]
    }
}
