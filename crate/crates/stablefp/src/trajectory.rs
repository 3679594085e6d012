//! Time-indexed sequences of density slices.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::grid::{lp_norm, Field, Grid, GridError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least one slice")]
    Empty,
    #[error("{times} times but {slices} slices")]
    LengthMismatch { times: usize, slices: usize },
    #[error("times must be strictly increasing")]
    NotIncreasing,
    #[error("slices live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Per-slice summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDiagnostics {
    pub time: f64,
    pub mass: f64,
    pub min: f64,
    /// Named norms attached after the fact, e.g. `("B^0.5_{1,1}", 0.73)`.
    pub norms: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTrajectory {
    times: Vec<f64>,
    slices: Vec<Field>,
    diagnostics: Vec<SliceDiagnostics>,
}

impl DensityTrajectory {
    pub fn new(times: Vec<f64>, slices: Vec<Field>) -> Result<Self, TrajectoryError> {
        if slices.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        if times.len() != slices.len() {
            return Err(TrajectoryError::LengthMismatch {
                times: times.len(),
                slices: slices.len(),
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrajectoryError::NotIncreasing);
        }
        let g = *slices[0].grid();
        if slices.iter().any(|s| *s.grid() != g) {
            return Err(TrajectoryError::GridMismatch);
        }
        let diagnostics = times
            .iter()
            .zip(&slices)
            .map(|(&time, s)| SliceDiagnostics {
                time,
                mass: s.integral(),
                min: s.min(),
                norms: Vec::new(),
            })
            .collect();
        Ok(DensityTrajectory {
            times,
            slices,
            diagnostics,
        })
    }

    /// Uniform time grid `t = s_0 < ... < s_m = T` with `m + 1` nodes.
    pub fn uniform_times(t: f64, big_t: f64, m: usize) -> Vec<f64> {
        let h = (big_t - t) / m as f64;
        (0..=m).map(|i| t + i as f64 * h).collect()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }

    pub fn slice(&self, i: usize) -> &Field {
        &self.slices[i]
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.slices[0].grid()
    }

    pub fn diagnostics(&self) -> &[SliceDiagnostics] {
        &self.diagnostics
    }

    /// Index of the node equal to `s` up to a relative tolerance.
    pub fn node_index(&self, s: f64) -> Option<usize> {
        let span = (self.times[self.times.len() - 1] - self.times[0])
            .abs()
            .max(1.0);
        self.times
            .iter()
            .position(|&x| (x - s).abs() <= 1e-9 * span)
    }

    /// Attaches a named per-slice norm computed by `f`.
    pub fn record_norm<E>(
        &mut self,
        name: &str,
        f: impl Fn(&Field) -> Result<f64, E>,
    ) -> Result<(), E> {
        for (diag, s) in self.diagnostics.iter_mut().zip(&self.slices) {
            let v = f(s)?;
            diag.norms.push((name.to_string(), v));
        }
        Ok(())
    }

    /// Returns a copy with slice `i` replaced.
    pub fn with_slice(&self, i: usize, slice: Field) -> Result<Self, TrajectoryError> {
        let mut slices = self.slices.clone();
        slices[i] = slice;
        DensityTrajectory::new(self.times.clone(), slices)
    }

    /// Maximum over slices of the L1 distance to `other`.
    pub fn sup_l1_distance(&self, other: &DensityTrajectory) -> Result<f64, TrajectoryError> {
        if self.len() != other.len() {
            return Err(TrajectoryError::LengthMismatch {
                times: self.len(),
                slices: other.len(),
            });
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.slices.iter().zip(&other.slices) {
            let d = lp_norm(&a.sub(b)?, 1.0)?;
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Writes one dump per slice plus `index.csv` (slice, time, mass, min, norms).
    pub fn write_dir(&self, dir: &Path) -> Result<(), TrajectoryError> {
        let io = |e: std::io::Error| TrajectoryError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut index = std::fs::File::create(dir.join("index.csv")).map_err(io)?;
        let norm_names: Vec<String> = self.diagnostics[0]
            .norms
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let mut header = String::from("slice,time,mass,min");
        for n in &norm_names {
            header.push(',');
            header.push_str(&csv_escape(n));
        }
        writeln!(index, "{header}").map_err(io)?;
        for (i, (s, diag)) in self.slices.iter().zip(&self.diagnostics).enumerate() {
            let tagged = s.clone().with_tag(format!("s={:?}", diag.time));
            tagged.save(&dir.join(format!("slice_{i:05}.field")))?;
            let mut row = format!("{i},{:?},{:?},{:?}", diag.time, diag.mass, diag.min);
            for (_, v) in &diag.norms {
                row.push_str(&format!(",{v:?}"));
            }
            writeln!(index, "{row}").map_err(io)?;
        }
        Ok(())
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        let g = Grid::new(1, 32, 3.0).unwrap();
        let f = Field::gaussian(&g, &[0.0], 0.1);
        assert_eq!(
            DensityTrajectory::new(vec![], vec![]),
            Err(TrajectoryError::Empty)
        );
        assert_eq!(
            DensityTrajectory::new(vec![0.0, 0.0], vec![f.clone(), f.clone()]),
            Err(TrajectoryError::NotIncreasing)
        );
        let traj = DensityTrajectory::new(vec![0.0, 0.5], vec![f.clone(), f]).unwrap();
        assert!((traj.diagnostics()[1].mass - 1.0).abs() < 1e-6);
        assert_eq!(traj.node_index(0.5), Some(1));
        assert_eq!(traj.node_index(0.25), None);
    }

    #[test]
    fn write_dir_emits_index_and_dumps() {
        let g = Grid::new(1, 32, 2.0).unwrap();
        let f = Field::gaussian(&g, &[0.0], 0.2);
        let mut traj = DensityTrajectory::new(vec![0.0, 0.1], vec![f.clone(), f]).unwrap();
        traj.record_norm("L2", |s| lp_norm(s, 2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        traj.write_dir(dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert!(index.starts_with("slice,time,mass,min,L2\n"));
        assert_eq!(index.lines().count(), 3);
        let back = Field::load(&dir.path().join("slice_00001.field")).unwrap();
        assert_eq!(back.values(), traj.slice(1).values());
        assert_eq!(back.tag(), Some("s=0.1"));
    }
}
