//! In-slice electric field of a birdcage coil loaded by a phantom.
//!
//! The out-of-plane component `E` of a 2D TM field obeys
//! `∇²E + k²E = −jωμ₀J` with `k² = ω²μ₀ε₀εr − jωμ₀σ`. The grid is
//! discretized with the 5-point stencil, each row scaled by `h²`; the shield
//! is a perfect conductor (`E = 0` on cells at or beyond `shield_radius`) and
//! each rung is a unit line current injected into the cell that contains it.

mod b1;
pub mod solver;

use num_complex::Complex64;
use thiserror::Error;

pub use b1::{b1_magnitude_at, line_current_field, unloaded_b1};
pub use solver::{bicgstab, dense_solve, CsrMatrix, SolveStats, SolverOptions, DENSE_LIMIT};

use crate::phantom::{placement_fits, CoilModel, PhantomError, Placement, TissueGrid};
use crate::raster::{Grid2, GridSpec};

pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;
pub const EPS0: f64 = 8.854_187_8128e-12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("degenerate grid: shield spans {0:.2} cells across, need at least 2")]
    DegenerateGrid(f64),
    #[error("rung {0} lies outside the simulation grid or shield")]
    RungOutsideDomain(usize),
    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("dense oracle limited to {limit} unknowns, got {0}", limit = DENSE_LIMIT)]
    DenseTooLarge(usize),
    #[error("singular system")]
    Singular,
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

/// Assembled `A e = b` on the full cell grid (row-major). Rows of cells on
/// or outside the shield are identity rows with zero right-hand side and are
/// decoupled from the interior.
#[derive(Debug, Clone)]
pub struct HelmholtzSystem {
    pub spec: GridSpec,
    pub matrix: CsrMatrix,
    pub rhs: Vec<Complex64>,
    pub inside: Grid2<bool>,
    pub frequency_mhz: f64,
}

/// Complex squared wavenumber of a cell.
pub fn wavenumber_sq(omega: f64, rel_permittivity: f64, conductivity: f64) -> Complex64 {
    Complex64::new(omega * omega * MU0 * EPS0 * rel_permittivity, -omega * MU0 * conductivity)
}

/// Places the phantom and assembles the system.
pub fn assemble_system(
    phantom: &TissueGrid,
    coil: &CoilModel,
    placement: &Placement,
) -> Result<HelmholtzSystem, FieldError> {
    coil.validate()?;
    if !placement_fits(phantom, coil, placement) {
        return Err(PhantomError::PlacementOutsideCoil {
            x: placement.offset_x,
            y: placement.offset_y,
        }
        .into());
    }
    assemble_placed(&phantom.placed(placement), coil)
}

/// Assembles the system for a grid whose tissue is already in coil
/// coordinates.
pub fn assemble_placed(grid: &TissueGrid, coil: &CoilModel) -> Result<HelmholtzSystem, FieldError> {
    let spec = grid.spec;
    let h = spec.cell_size;
    let across = 2.0 * coil.shield_radius / h;
    if across < 2.0 {
        return Err(FieldError::DegenerateGrid(across));
    }
    let (w, ht) = (spec.width, spec.height);
    let inside = Grid2::from_fn(w, ht, |x, y| {
        spec.center_x(x).hypot(spec.center_y(y)) < coil.shield_radius
    });
    let omega = coil.omega();
    let h2 = h * h;
    let one = Complex64::new(1.0, 0.0);

    let mut rows = Vec::with_capacity(w * ht);
    for y in 0..ht {
        for x in 0..w {
            let i = y * w + x;
            if !inside[(x, y)] {
                rows.push(vec![(i, one)]);
                continue;
            }
            let t = grid.properties_at(x, y);
            let diag = Complex64::new(-4.0, 0.0) + h2 * wavenumber_sq(omega, t.rel_permittivity, t.conductivity);
            let mut row = vec![(i, diag)];
            if x > 0 && inside[(x - 1, y)] {
                row.push((i - 1, one));
            }
            if x + 1 < w && inside[(x + 1, y)] {
                row.push((i + 1, one));
            }
            if y > 0 && inside[(x, y - 1)] {
                row.push((i - w, one));
            }
            if y + 1 < ht && inside[(x, y + 1)] {
                row.push((i + w, one));
            }
            rows.push(row);
        }
    }

    let mut rhs = vec![Complex64::new(0.0, 0.0); w * ht];
    // h² · (−jωμ₀) · I / h²
    let src = Complex64::new(0.0, -omega * MU0);
    for (k, (pos, &amp)) in coil.rung_positions().into_iter().zip(&coil.drive).enumerate() {
        let (cx, cy) = spec.cell_at(pos.0, pos.1).ok_or(FieldError::RungOutsideDomain(k))?;
        if !inside[(cx, cy)] {
            return Err(FieldError::RungOutsideDomain(k));
        }
        rhs[cy * w + cx] += src * amp;
    }

    Ok(HelmholtzSystem {
        spec,
        matrix: CsrMatrix::from_rows(rows),
        rhs,
        inside,
        frequency_mhz: coil.frequency_mhz,
    })
}

impl HelmholtzSystem {
    /// Same operator with the right-hand side multiplied by `factor`.
    pub fn scaled_source(&self, factor: Complex64) -> Self {
        let mut s = self.clone();
        for v in &mut s.rhs {
            *v *= factor;
        }
        s
    }

    fn to_grid(&self, mut e: Vec<Complex64>) -> Grid2<Complex64> {
        for (v, &inside) in e.iter_mut().zip(self.inside.iter()) {
            if !inside {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        Grid2::from_vec(self.spec.width, self.spec.height, e).expect("system size matches grid")
    }
}

/// Iterative solve of the assembled system.
pub fn solve_field(
    system: &HelmholtzSystem,
    opts: &SolverOptions,
) -> Result<(Grid2<Complex64>, SolveStats), FieldError> {
    let (e, stats) = bicgstab(&system.matrix, &system.rhs, opts)?;
    log::debug!(
        "field solve {}x{} @ {} MHz: {} iterations, residual {:.3e}",
        system.spec.width,
        system.spec.height,
        system.frequency_mhz,
        stats.iterations,
        stats.relative_residual
    );
    Ok((system.to_grid(e), stats))
}

/// Dense direct solve; oracle for grids up to 48×48.
pub fn solve_field_dense(system: &HelmholtzSystem) -> Result<Grid2<Complex64>, FieldError> {
    let e = dense_solve(&system.matrix, &system.rhs)?;
    Ok(system.to_grid(e))
}

#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub e_field: Grid2<Complex64>,
    /// normalized to 1 at its maximum inside the rung circle
    pub b1_unloaded: Grid2<f64>,
    pub frequency_mhz: f64,
    pub placement: Placement,
    pub stats: SolveStats,
}

/// Assemble and solve for one placement and attach the unloaded B1 map.
pub fn compute_field(
    phantom: &TissueGrid,
    coil: &CoilModel,
    placement: &Placement,
    opts: &SolverOptions,
) -> Result<FieldSolution, FieldError> {
    let system = assemble_system(phantom, coil, placement)?;
    let (e_field, stats) = solve_field(&system, opts)?;
    Ok(FieldSolution {
        e_field,
        b1_unloaded: unloaded_b1(coil, &phantom.spec),
        frequency_mhz: coil.frequency_mhz,
        placement: *placement,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{FieldStrength, TissueTable, BACKGROUND, MUSCLE};

    fn vacuum(cells: usize, extent: f64) -> TissueGrid {
        TissueGrid {
            spec: GridSpec::square(cells, extent),
            slice_thickness: 0.005,
            classes: Grid2::filled(cells, cells, BACKGROUND),
            tissues: TissueTable::for_frequency(128.0),
        }
    }

    #[test]
    fn zero_drive_gives_zero_rhs_and_field() {
        let mut coil = FieldStrength::ThreeT.coil();
        coil.drive.iter_mut().for_each(|d| *d = Complex64::new(0.0, 0.0));
        let sys = assemble_placed(&vacuum(32, 0.7), &coil).unwrap();
        assert!(sys.rhs.iter().all(|v| v.norm() == 0.0));
        let (e, _) = solve_field(&sys, &SolverOptions::default()).unwrap();
        assert!(e.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn vacuum_rows_are_laplacian_plus_k0() {
        let coil = FieldStrength::ThreeT.coil();
        let g = vacuum(32, 0.7);
        let sys = assemble_placed(&g, &coil).unwrap();
        let h = g.spec.cell_size;
        let w = coil.omega();
        let k0h2 = w * w * MU0 * EPS0 * h * h;
        for &(x, y) in &[(16, 16), (10, 20), (5, 16), (16, 27), (20, 9)] {
            let i = y * 32 + x;
            assert!(sys.inside[(x, y)]);
            assert!((sys.matrix.get(i, i) - Complex64::new(-4.0 + k0h2, 0.0)).norm() < 1e-15);
            for j in [i - 1, i + 1, i - 32, i + 32] {
                assert_eq!(sys.matrix.get(i, j), Complex64::new(1.0, 0.0));
            }
            assert_eq!(sys.matrix.row(i).count(), 5);
        }
    }

    #[test]
    fn conductive_cell_diagonal_imaginary_part() {
        let coil = FieldStrength::SevenT.coil();
        let spec = GridSpec::square(32, 0.37);
        let g = TissueGrid::uniform_disc(spec, 0.05, MUSCLE, TissueTable::for_frequency(297.0));
        let sys = assemble_placed(&g, &coil).unwrap();
        let i = 16 * 32 + 16;
        let sigma = 0.77;
        let h = spec.cell_size;
        let expect = -coil.omega() * MU0 * sigma * h * h;
        assert!((sys.matrix.get(i, i).im - expect).abs() <= 1e-15 * expect.abs());
    }

    #[test]
    fn outside_shield_is_exactly_zero() {
        let coil = FieldStrength::SevenT.coil();
        let spec = GridSpec::square(32, 0.37);
        let g = TissueGrid::uniform_disc(spec, 0.08, MUSCLE, TissueTable::for_frequency(297.0));
        let sys = assemble_placed(&g, &coil).unwrap();
        let (e, _) = solve_field(&sys, &SolverOptions::default()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if !sys.inside[(x, y)] {
                    assert_eq!(e[(x, y)], Complex64::new(0.0, 0.0));
                }
                assert!(e[(x, y)].re.is_finite() && e[(x, y)].im.is_finite());
            }
        }
    }

    #[test]
    fn degenerate_grid_rejected() {
        let coil = CoilModel::birdcage(4, 0.01, 0.012, 128.0).unwrap();
        let g = vacuum(4, 0.7);
        assert!(matches!(assemble_placed(&g, &coil), Err(FieldError::DegenerateGrid(_))));
    }

    #[test]
    fn linear_in_source_amplitude() {
        let coil = FieldStrength::SevenT.coil();
        let spec = GridSpec::square(32, 0.37);
        let g = TissueGrid::uniform_disc(spec, 0.08, MUSCLE, TissueTable::for_frequency(297.0));
        let sys = assemble_placed(&g, &coil).unwrap();
        let opts = SolverOptions::default();
        let (e1, _) = solve_field(&sys, &opts).unwrap();
        let scale = e1.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for alpha in [Complex64::new(2.0, 0.0), Complex64::new(0.0, 1.0)] {
            let (ea, _) = solve_field(&sys.scaled_source(alpha), &opts).unwrap();
            for (a, b) in ea.iter().zip(e1.iter()) {
                assert!((a - alpha * b).norm() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn point_source_decays_with_distance() {
        // one rung far from the others' influence: single-source problem on
        // a large vacuum grid, sampled along a ray from the source toward the
        // center, stopping well short of the shield
        let spec = GridSpec::square(96, 0.7);
        let g = vacuum(96, 0.7);
        let mut coil = FieldStrength::ThreeT.coil();
        coil.drive.iter_mut().for_each(|d| *d = Complex64::new(0.0, 0.0));
        coil.drive[0] = Complex64::new(1.0, 0.0);
        let sys = assemble_placed(&g, &coil).unwrap();
        let (e, _) = solve_field(&sys, &SolverOptions::default()).unwrap();
        let (sx, sy) = spec.cell_at(coil.rung_radius, 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for step in 1..20 {
            let v = e[(sx - step, sy)].norm();
            assert!(v < prev, "not decaying at step {step}");
            prev = v;
        }
    }
}
