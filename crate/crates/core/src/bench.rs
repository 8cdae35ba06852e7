//! Wall-clock scaling harness for the exact and approximate score paths.
//!
//! For every `(rows, cols, moments)` cell of a [`BenchGrid`], a Gaussian
//! matrix is drawn from a seed derived from the cell shape (so all moment
//! counts see the identical matrix), then each path runs once as warm-up
//! and `repeats` more times for the median. Timed sections run strictly
//! serially; nothing else computes while a measurement is in flight.
//! Results serialize to a fixed-header CSV that [`parse_csv`] reads back.

use crate::linalg::{derive_seed, DenseMatrix};
use crate::scores::{self, EesConfig, ScoreError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("csv parse error at line {line}: {problem}")]
    CsvParse { line: usize, problem: String },
}

/// Sweep definition for the scaling benchmark.
#[derive(Debug, Clone)]
pub struct BenchGrid {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub moments: Vec<usize>,
    /// Measured repetitions per cell (after one warm-up); medians are
    /// taken over these.
    pub repeats: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Template for the approximate path; `moments` and `seed` are
    /// overridden per cell.
    pub ees: EesConfig,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            rows: vec![1000],
            cols: vec![100],
            moments: vec![20],
            repeats: 3,
            seed: 0,
            alpha: scores::DEFAULT_ALPHA,
            ees: EesConfig {
                // Square-ish cells put the power method on a nearly
                // gapless spectrum edge; a loose tolerance keeps its
                // iteration count representative instead of unbounded.
                power_tol: 1e-4,
                power_max_iter: 20_000,
                ..EesConfig::default()
            },
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.rows.is_empty() || self.cols.is_empty() || self.moments.is_empty() {
            return Err(BenchError::InvalidGrid(
                "rows, cols, and moments lists must be non-empty".into(),
            ));
        }
        if self.rows.iter().chain(&self.cols).any(|&v| v == 0) {
            return Err(BenchError::InvalidGrid("sizes must be positive".into()));
        }
        if self.cols.iter().any(|&k| k < 2) {
            return Err(BenchError::InvalidGrid(
                "cols must be >= 2 for covariance scoring".into(),
            ));
        }
        if self.repeats < 3 {
            return Err(BenchError::InvalidGrid("repeats must be >= 3".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(BenchError::InvalidGrid("alpha must be positive".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &r in &self.rows {
            for &c in &self.cols {
                for &m in &self.moments {
                    out.push((r, c, m));
                }
            }
        }
        out
    }
}

/// One successful grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub rows: usize,
    pub cols: usize,
    pub elements: usize,
    pub moments: usize,
    pub exact_seconds: f64,
    pub ees_seconds: f64,
    pub exact_value: f64,
    pub ees_value: f64,
}

/// Per-cell result; failed cells carry the error and the sweep continues.
#[derive(Debug)]
pub struct CellOutcome {
    pub rows: usize,
    pub cols: usize,
    pub moments: usize,
    pub outcome: Result<BenchRecord, ScoreError>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run_cell(grid: &BenchGrid, rows: usize, cols: usize, moments: usize) -> Result<BenchRecord, ScoreError> {
    // Matrix depends on the shape only: every moment count times the same
    // input, so their timings differ only through the series length.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        grid.seed,
        (rows as u64) << 24 ^ cols as u64,
    ));
    let e = DenseMatrix::gaussian(rows, cols, &mut rng);
    let cfg = EesConfig {
        moments,
        seed: derive_seed(grid.seed, (rows as u64) << 40 ^ (cols as u64) << 16 ^ moments as u64),
        ..grid.ees.clone()
    };

    // Warm-up, excluded from the medians.
    let _ = scores::exact_eigenscore(&e, grid.alpha)?;
    let _ = scores::efficient_eigenscore(&e, &cfg)?;

    let mut exact_times = Vec::with_capacity(grid.repeats);
    let mut ees_times = Vec::with_capacity(grid.repeats);
    let mut exact_value = 0.0;
    let mut ees_value = 0.0;
    for _ in 0..grid.repeats {
        let r = scores::exact_eigenscore(&e, grid.alpha)?;
        exact_times.push(r.elapsed_seconds);
        exact_value = r.value;
    }
    for _ in 0..grid.repeats {
        let r = scores::efficient_eigenscore(&e, &cfg)?;
        ees_times.push(r.elapsed_seconds);
        ees_value = r.value;
    }
    Ok(BenchRecord {
        rows,
        cols,
        elements: rows * cols,
        moments,
        exact_seconds: median(exact_times),
        ees_seconds: median(ees_times),
        exact_value,
        ees_value,
    })
}

/// Run every cell of the grid serially. Failures are reported per cell and
/// do not stop the sweep.
pub fn run_grid(grid: &BenchGrid) -> Result<Vec<CellOutcome>, BenchError> {
    grid.validate()?;
    Ok(grid
        .cells()
        .into_iter()
        .map(|(rows, cols, moments)| CellOutcome {
            rows,
            cols,
            moments,
            outcome: run_cell(grid, rows, cols, moments),
        })
        .collect())
}

pub const CSV_HEADER: &str =
    "rows,cols,elements,moments,exact_seconds,ees_seconds,exact_value,ees_value";

/// Render successful records as CSV with the fixed schema header.
pub fn format_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        // f64 Display is shortest-round-trip, so parse_csv recovers the
        // exact bits.
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.rows,
            r.cols,
            r.elements,
            r.moments,
            r.exact_seconds,
            r.ees_seconds,
            r.exact_value,
            r.ees_value
        );
    }
    out
}

/// Parse CSV produced by [`format_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>, BenchError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(BenchError::CsvParse {
                line: 1,
                problem: format!("unexpected header {header:?}"),
            })
        }
        None => {
            return Err(BenchError::CsvParse {
                line: 1,
                problem: "empty input".into(),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(BenchError::CsvParse {
                line: idx + 1,
                problem: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|e| BenchError::CsvParse {
                line: idx + 1,
                problem: format!("{what}: {e}"),
            })
        };
        let parse_f64 = |s: &str, what: &str| {
            s.trim().parse::<f64>().map_err(|e| BenchError::CsvParse {
                line: idx + 1,
                problem: format!("{what}: {e}"),
            })
        };
        records.push(BenchRecord {
            rows: parse_usize(fields[0], "rows")?,
            cols: parse_usize(fields[1], "cols")?,
            elements: parse_usize(fields[2], "elements")?,
            moments: parse_usize(fields[3], "moments")?,
            exact_seconds: parse_f64(fields[4], "exact_seconds")?,
            ees_seconds: parse_f64(fields[5], "ees_seconds")?,
            exact_value: parse_f64(fields[6], "exact_value")?,
            ees_value: parse_f64(fields[7], "ees_value")?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_grid_produces_one_row() {
        let grid = BenchGrid {
            rows: vec![200],
            cols: vec![16],
            moments: vec![8],
            repeats: 3,
            seed: 1,
            ..BenchGrid::default()
        };
        let outcomes = run_grid(&grid).unwrap();
        assert_eq!(outcomes.len(), 1);
        let rec = outcomes[0].outcome.as_ref().unwrap();
        assert_eq!(rec.elements, 3200);
        assert!(rec.exact_seconds >= 0.0 && rec.ees_seconds >= 0.0);
        let csv = format_csv(&[rec.clone()]);
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let records = vec![
            BenchRecord {
                rows: 100,
                cols: 10,
                elements: 1000,
                moments: 20,
                exact_seconds: 0.001234,
                ees_seconds: 0.000987,
                exact_value: -1.2345678901234567,
                ees_value: -0.07654321,
            },
            BenchRecord {
                rows: 5000,
                cols: 2000,
                elements: 10_000_000,
                moments: 50,
                exact_seconds: 3.25,
                ees_seconds: 1.5,
                exact_value: 7.0,
                ees_value: -0.25,
            },
        ];
        let csv = format_csv(&records);
        let back = parse_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a, b);
            assert_eq!(a.exact_value.to_bits(), b.exact_value.to_bits());
        }
    }

    #[test]
    fn csv_parser_rejects_malformed_input() {
        assert!(matches!(
            parse_csv(""),
            Err(BenchError::CsvParse { line: 1, .. })
        ));
        assert!(parse_csv("wrong,header\n").is_err());
        let bad_fields = format!("{CSV_HEADER}\n1,2,3\n");
        assert!(parse_csv(&bad_fields).is_err());
        let bad_number = format!("{CSV_HEADER}\n1,2,2,4,x,0.1,0.2,0.3\n");
        assert!(parse_csv(&bad_number).is_err());
    }

    #[test]
    fn grid_validation() {
        let mut grid = BenchGrid::default();
        grid.repeats = 2;
        assert!(grid.validate().is_err());
        let mut grid = BenchGrid::default();
        grid.cols = vec![1];
        assert!(grid.validate().is_err());
        let mut grid = BenchGrid::default();
        grid.rows = vec![];
        assert!(grid.validate().is_err());
    }

    #[test]
    fn same_shape_cells_share_their_matrix() {
        // Two moment counts at one shape must score the same exact value
        // (identical matrix), while the EES series length differs.
        let grid = BenchGrid {
            rows: vec![150],
            cols: vec![12],
            moments: vec![4, 16],
            repeats: 3,
            seed: 9,
            ..BenchGrid::default()
        };
        let outcomes = run_grid(&grid).unwrap();
        assert_eq!(outcomes.len(), 2);
        let a = outcomes[0].outcome.as_ref().unwrap();
        let b = outcomes[1].outcome.as_ref().unwrap();
        assert_eq!(a.exact_value.to_bits(), b.exact_value.to_bits());
        assert_ne!(a.moments, b.moments);
    }

    #[test]
    fn deterministic_values_across_runs() {
        let grid = BenchGrid {
            rows: vec![120],
            cols: vec![10],
            moments: vec![10],
            repeats: 3,
            seed: 4,
            ..BenchGrid::default()
        };
        let a = run_grid(&grid).unwrap();
        let b = run_grid(&grid).unwrap();
        let ra = a[0].outcome.as_ref().unwrap();
        let rb = b[0].outcome.as_ref().unwrap();
        assert_eq!(ra.exact_value.to_bits(), rb.exact_value.to_bits());
        assert_eq!(ra.ees_value.to_bits(), rb.ees_value.to_bits());
    }
}
