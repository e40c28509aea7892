//! Dense ensemble storage: `paths × nodes × width` arrays of reals.

use crate::error::{DsdeError, Result};

/// Row-major ensemble array indexed by `(path, node, component)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArray {
    paths: usize,
    nodes: usize,
    width: usize,
    data: Vec<f64>,
}

impl PathArray {
    pub fn zeros(paths: usize, nodes: usize, width: usize) -> Self {
        Self {
            paths,
            nodes,
            width,
            data: vec![0.0; paths * nodes * width],
        }
    }

    pub fn from_vec(paths: usize, nodes: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != paths * nodes * width {
            return Err(DsdeError::ShapeMismatch(format!(
                "expected {} values for {paths}x{nodes}x{width}, got {}",
                paths * nodes * width,
                data.len()
            )));
        }
        Ok(Self {
            paths,
            nodes,
            width,
            data,
        })
    }

    /// Builds an array by evaluating `fill(path, node)` which must return `width` values.
    pub fn from_fn<F>(paths: usize, nodes: usize, width: usize, mut fill: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut out = Self::zeros(paths, nodes, width);
        for p in 0..paths {
            for i in 0..nodes {
                let v = fill(p, i);
                debug_assert_eq!(v.len(), width);
                out.get_mut(p, i).copy_from_slice(&v);
            }
        }
        out
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.paths, self.nodes, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, path: usize, node: usize) -> usize {
        (path * self.nodes + node) * self.width
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize) -> &[f64] {
        let o = self.offset(path, node);
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn get_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let o = self.offset(path, node);
        let w = self.width;
        &mut self.data[o..o + w]
    }

    /// All nodes of one path, `nodes × width` contiguous values.
    pub fn path(&self, path: usize) -> &[f64] {
        let o = path * self.nodes * self.width;
        &self.data[o..o + self.nodes * self.width]
    }

    pub fn path_mut(&mut self, path: usize) -> &mut [f64] {
        let len = self.nodes * self.width;
        let o = path * len;
        &mut self.data[o..o + len]
    }

    /// Copies the values at `node` for every path into a `paths × width` buffer.
    pub fn node_slice(&self, node: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.paths * self.width);
        for p in 0..self.paths {
            out.extend_from_slice(self.get(p, node));
        }
        out
    }

    pub fn set_node_slice(&mut self, node: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.paths * self.width);
        for p in 0..self.paths {
            let w = self.width;
            self.get_mut(p, node)
                .copy_from_slice(&values[p * w..(p + 1) * w]);
        }
    }

    /// Node order reversed: node `i` of the result is node `nodes-1-i` of `self`.
    pub fn reversed_nodes(&self) -> Self {
        let mut out = Self::zeros(self.paths, self.nodes, self.width);
        for p in 0..self.paths {
            for i in 0..self.nodes {
                out.get_mut(p, i)
                    .copy_from_slice(self.get(p, self.nodes - 1 - i));
            }
        }
        out
    }

    /// Concatenates the components of two arrays with identical path/node counts.
    pub fn hstack(&self, other: &Self) -> Result<Self> {
        if self.paths != other.paths || self.nodes != other.nodes {
            return Err(DsdeError::ShapeMismatch(format!(
                "cannot stack {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let width = self.width + other.width;
        let mut out = Self::zeros(self.paths, self.nodes, width);
        for p in 0..self.paths {
            for i in 0..self.nodes {
                let dst = out.get_mut(p, i);
                dst[..self.width].copy_from_slice(self.get(p, i));
                dst[self.width..].copy_from_slice(other.get(p, i));
            }
        }
        Ok(out)
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Self, b: f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self {
            paths: self.paths,
            nodes: self.nodes,
            width: self.width,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-node, per-component mean over paths (`nodes × width`).
    pub fn mean_over_paths(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes * self.width];
        for p in 0..self.paths {
            for (o, v) in out.iter_mut().zip(self.path(p)) {
                *o += v;
            }
        }
        let n = self.paths.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Per-node, per-component standard error of the path mean.
    pub fn stderr_over_paths(&self) -> Vec<f64> {
        let mean = self.mean_over_paths();
        let mut ss = vec![0.0; self.nodes * self.width];
        for p in 0..self.paths {
            for ((s, v), m) in ss.iter_mut().zip(self.path(p)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let n = self.paths as f64;
        if self.paths < 2 {
            return vec![0.0; ss.len()];
        }
        ss.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}
