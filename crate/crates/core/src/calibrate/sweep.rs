//! Loss vectors over a descending threshold grid, built once from per-query
//! loss curves and walked in either direction.

use crate::metrics::{loss_curves, Metric};
use crate::model::{CurveDiagnostics, Dataset};
use crate::error::Result;

/// A change to one query's loss when the sweep reaches a grid point.
#[derive(Debug, Clone, Copy)]
struct Change {
    query: u32,
    old: f64,
    new: f64,
}

/// Per-grid-point loss vectors, stored as deltas between neighbours.
///
/// The vector at grid index `g` is the all-ones vector (empty sets) with
/// every change in buckets `0..=g` applied in order.
#[derive(Debug, Clone)]
pub(crate) struct LossSweep {
    grid: Vec<f64>,
    changes: Vec<Vec<Change>>,
    version: Vec<u32>,
    bottom: Vec<f64>,
    mean_size: Vec<f64>,
    breakpoints: Vec<f64>,
    diagnostics: CurveDiagnostics,
}

impl LossSweep {
    /// `grid` must be strictly descending.
    pub(crate) fn build(calib: &Dataset, metric: Metric, grid: GridBuilder) -> Result<Self> {
        let curves = loss_curves(calib, metric)?;
        let m = calib.len();

        let mut breakpoints: Vec<f64> = curves
            .iter()
            .flat_map(|c| c.steps().iter().map(|&(t, _)| t))
            .collect();
        breakpoints.sort_by(|a, b| b.total_cmp(a));
        breakpoints.dedup();
        let grid = grid.build(&breakpoints);

        let mut changes: Vec<Vec<Change>> = vec![Vec::new(); grid.len()];
        for (q, curve) in curves.iter().enumerate() {
            let mut prev = 1.0;
            for &(tau, loss) in curve.steps() {
                let g = grid.partition_point(|&x| x > tau);
                if g < grid.len() {
                    changes[g].push(Change {
                        query: q as u32,
                        old: prev,
                        new: loss,
                    });
                }
                prev = loss;
            }
        }

        let mut version = Vec::with_capacity(grid.len());
        let mut v = 0u32;
        let mut bottom = vec![1.0; m];
        for bucket in &changes {
            if !bucket.is_empty() {
                v += 1;
            }
            version.push(v);
            for c in bucket {
                bottom[c.query as usize] = c.new;
            }
        }

        let mut scores: Vec<f64> = calib
            .records()
            .iter()
            .flat_map(|r| r.candidates().iter().map(|c| c.calibrated_score))
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let mut kept = 0usize;
        let mean_size = grid
            .iter()
            .map(|&tau| {
                while kept < scores.len() && scores[kept] >= tau {
                    kept += 1;
                }
                kept as f64 / m.max(1) as f64
            })
            .collect();

        let diagnostics = CurveDiagnostics {
            queries: m,
            non_monotone_queries: curves.iter().filter(|c| !c.is_monotone()).count(),
            unreachable_gold_queries: calib.unreachable_gold_count(),
        };
        Ok(LossSweep {
            grid,
            changes,
            version,
            bottom,
            mean_size,
            breakpoints,
            diagnostics,
        })
    }

    pub(crate) fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub(crate) fn len(&self) -> usize {
        self.grid.len()
    }

    pub(crate) fn mean_size(&self) -> &[f64] {
        &self.mean_size
    }

    /// Distinct loss-curve breakpoints, descending.
    pub(crate) fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub(crate) fn diagnostics(&self) -> &CurveDiagnostics {
        &self.diagnostics
    }

    /// Identifier shared by grid points with the same loss vector.
    pub(crate) fn version(&self, g: usize) -> u32 {
        self.version[g]
    }

    /// Visits grid points from the largest threshold down.
    pub(crate) fn walk_down(&self, mut visit: impl FnMut(usize, &[f64])) {
        let mut losses = vec![1.0; self.bottom.len()];
        for (g, bucket) in self.changes.iter().enumerate() {
            for c in bucket {
                losses[c.query as usize] = c.new;
            }
            visit(g, &losses);
        }
    }

    /// Visits grid points from the smallest threshold up until `visit`
    /// returns false.
    pub(crate) fn walk_up(&self, mut visit: impl FnMut(usize, &[f64]) -> bool) {
        let mut losses = self.bottom.clone();
        for g in (0..self.grid.len()).rev() {
            if !visit(g, &losses) {
                return;
            }
            for c in self.changes[g].iter().rev() {
                losses[c.query as usize] = c.old;
            }
        }
    }

    /// Loss vector at the smallest threshold.
    pub(crate) fn bottom(&self) -> &[f64] {
        &self.bottom
    }
}

/// Descending threshold grid specification.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum GridBuilder {
    Fixed(Vec<f64>),
    /// `{1, 0}` plus every loss-curve breakpoint.
    Breakpoints,
}

impl GridBuilder {
    fn build(self, breakpoints: &[f64]) -> Vec<f64> {
        match self {
            GridBuilder::Fixed(g) => g,
            GridBuilder::Breakpoints => {
                let mut g = Vec::with_capacity(breakpoints.len() + 2);
                g.push(1.0);
                g.extend(breakpoints.iter().copied().filter(|&t| t < 1.0 && t > 0.0));
                g.push(0.0);
                g
            }
        }
    }
}
