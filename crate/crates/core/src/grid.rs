//! Uniform tensor grids on boxes `[-R, R]^d` and scalar fields sampled on them.

use crate::expr::{Expression, Program};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unsupported dimension d={0}; only d in {{1, 2}} is implemented")]
    Dimension(usize),
    #[error("2R/h = {0} is not an even integer; the origin must be a node")]
    Alignment(f64),
    #[error("subgrid radius {sub} does not nest in radius {outer}")]
    Nesting { sub: f64, outer: f64 },
    #[error("non-finite field value at node {node}")]
    NonFinite { node: usize },
}

/// Uniform grid on the box `[-R, R]^d` with spacing `h`.
///
/// `2R/h` is an even integer so the per-dimension node count is odd and the
/// origin is the central node. Cells are the `h`-boxes centered at nodes;
/// boundary cells carry half volume per clipped dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    radius: f64,
    h: f64,
    n_per_dim: usize,
}

impl Grid {
    pub fn new(dim: usize, radius: f64, h: f64) -> Result<Arc<Grid>, GridError> {
        if dim == 0 || dim > 2 {
            return Err(GridError::Dimension(dim));
        }
        let ratio = 2.0 * radius / h;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) || (rounded as i64) % 2 != 0 {
            return Err(GridError::Alignment(ratio));
        }
        Ok(Arc::new(Grid {
            dim,
            radius,
            h,
            n_per_dim: rounded as usize + 1,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_per_dim(&self) -> usize {
        self.n_per_dim
    }

    pub fn node_count(&self) -> usize {
        self.n_per_dim.pow(self.dim as u32)
    }

    /// Index of the origin node.
    pub fn origin(&self) -> usize {
        let mid = self.n_per_dim / 2;
        match self.dim {
            1 => mid,
            _ => mid * self.n_per_dim + mid,
        }
    }

    #[inline]
    pub fn multi_index(&self, node: usize) -> [usize; 2] {
        match self.dim {
            1 => [node, 0],
            _ => [node / self.n_per_dim, node % self.n_per_dim],
        }
    }

    #[inline]
    pub fn flat_index(&self, mi: [usize; 2]) -> usize {
        match self.dim {
            1 => mi[0],
            _ => mi[0] * self.n_per_dim + mi[1],
        }
    }

    /// Coordinates of a node; entries beyond `dim` are zero.
    #[inline]
    pub fn coord(&self, node: usize) -> [f64; 2] {
        let mi = self.multi_index(node);
        let mut out = [0.0; 2];
        for k in 0..self.dim {
            out[k] = -self.radius + mi[k] as f64 * self.h;
        }
        out
    }

    /// Cell volume with half-cells at the boundary.
    pub fn cell_volume(&self, node: usize) -> f64 {
        let mi = self.multi_index(node);
        let mut v = self.h.powi(self.dim as i32);
        for k in 0..self.dim {
            if mi[k] == 0 || mi[k] == self.n_per_dim - 1 {
                v *= 0.5;
            }
        }
        v
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let mi = self.multi_index(node);
        (0..self.dim).any(|k| mi[k] == 0 || mi[k] == self.n_per_dim - 1)
    }

    /// Euclidean norm of the node coordinates.
    pub fn node_norm(&self, node: usize) -> f64 {
        let c = self.coord(node);
        (c[0] * c[0] + c[1] * c[1]).sqrt()
    }

    /// Nearest node to a point (must be inside the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut mi = [0usize; 2];
        for k in 0..self.dim {
            let j = ((x[k] + self.radius) / self.h).round();
            mi[k] = j.clamp(0.0, (self.n_per_dim - 1) as f64) as usize;
        }
        self.flat_index(mi)
    }

    /// A concentric subgrid with the same spacing and radius `sub_radius`.
    pub fn subgrid(&self, sub_radius: f64) -> Result<Arc<Grid>, GridError> {
        if sub_radius > self.radius + 1e-12 {
            return Err(GridError::Nesting {
                sub: sub_radius,
                outer: self.radius,
            });
        }
        Grid::new(self.dim, sub_radius, self.h)
    }

    /// Map a node of a nested concentric subgrid to this grid's flat index.
    pub fn embed_from(&self, sub: &Grid, sub_node: usize) -> usize {
        debug_assert_eq!(self.dim, sub.dim);
        debug_assert!((self.h - sub.h).abs() < 1e-12);
        let off = (self.n_per_dim - sub.n_per_dim) / 2;
        let mi = sub.multi_index(sub_node);
        self.flat_index([mi[0] + off, mi[1] + off.min(self.n_per_dim)])
    }

    /// Nodes of this grid lying inside the closed ball of radius `rho`.
    pub fn nodes_within(&self, rho: f64) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&i| self.node_norm(i) <= rho + 1e-12)
            .collect()
    }
}

/// Values on grid nodes at one time.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub grid: Arc<Grid>,
    pub time: f64,
    pub values: Vec<f64>,
}

impl FieldSample {
    pub fn new(grid: Arc<Grid>, time: f64, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        FieldSample { grid, time, values }
    }

    pub fn constant(grid: Arc<Grid>, time: f64, c: f64) -> Self {
        let n = grid.node_count();
        FieldSample::new(grid, time, vec![c; n])
    }

    /// Sample an expression on the grid.
    pub fn from_expression(grid: Arc<Grid>, time: f64, e: &Expression) -> Self {
        Self::from_program(grid, time, &e.compile())
    }

    pub fn from_program(grid: Arc<Grid>, time: f64, p: &Program) -> Self {
        let d = grid.dim();
        let values = (0..grid.node_count())
            .map(|i| {
                let c = grid.coord(i);
                p.eval(time, &c[..d])
            })
            .collect();
        FieldSample::new(grid, time, values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn assert_finite(&self) -> Result<(), GridError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(node) => Err(GridError::NonFinite { node }),
            None => Ok(()),
        }
    }

    /// Volume-weighted total (the discrete integral over the box).
    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.grid.cell_volume(i))
            .sum()
    }

    /// Restrict to a concentric subgrid of radius `rho`.
    pub fn restrict(&self, rho: f64) -> Result<FieldSample, GridError> {
        let sub = self.grid.subgrid(rho)?;
        let values = (0..sub.node_count())
            .map(|i| self.values[self.grid.embed_from(&sub, i)])
            .collect();
        Ok(FieldSample::new(sub, self.time, values))
    }

    /// Max absolute difference against another field on the same grid layout.
    pub fn sup_diff(&self, other: &FieldSample) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// CSV export: `# ` metadata lines then `t,x1[,x2],value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# grid d={} R={} h={} nodes={}",
            self.grid.dim(),
            self.grid.radius(),
            self.grid.h(),
            self.grid.node_count()
        );
        let header = if self.grid.dim() == 1 {
            "t,x1,value"
        } else {
            "t,x1,x2,value"
        };
        let _ = writeln!(out, "{header}");
        for (i, v) in self.values.iter().enumerate() {
            let c = self.grid.coord(i);
            if self.grid.dim() == 1 {
                let _ = writeln!(out, "{},{},{}", self.time, c[0], v);
            } else {
                let _ = writeln!(out, "{},{},{},{}", self.time, c[0], c[1], v);
            }
        }
        out
    }
}
