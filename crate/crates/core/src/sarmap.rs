//! Pointwise and mass-averaged specific absorption rate.

use num_complex::Complex64;
use thiserror::Error;

use crate::phantom::{rasterize_mask, TissueGrid};
use crate::raster::Grid2;

/// One gram, in kg.
pub const ONE_GRAM: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SarError {
    #[error("raster is {got_w}x{got_h}, tissue grid is {want_w}x{want_h}")]
    ShapeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("target mass must be positive, got {0}")]
    InvalidTargetMass(f64),
    #[error("tissue mask is empty")]
    EmptyMask,
}

fn check_shape<T>(r: &Grid2<T>, grid: &TissueGrid) -> Result<(), SarError> {
    if r.same_shape(&grid.classes) {
        Ok(())
    } else {
        Err(SarError::ShapeMismatch {
            got_w: r.width(),
            got_h: r.height(),
            want_w: grid.classes.width(),
            want_h: grid.classes.height(),
        })
    }
}

/// σ|E|²/(2ρ) on tissue cells, 0 on background.
pub fn pointwise_sar(e_field: &Grid2<Complex64>, grid: &TissueGrid) -> Result<Grid2<f64>, SarError> {
    check_shape(e_field, grid)?;
    Ok(Grid2::from_fn(grid.spec.width, grid.spec.height, |x, y| {
        if !grid.is_tissue(x, y) {
            return 0.0;
        }
        let t = grid.properties_at(x, y);
        t.conductivity * e_field[(x, y)].norm_sqr() / (2.0 * t.density)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassAverage {
    pub values: Grid2<f64>,
    /// cells whose region hit the grid edge before gathering the target mass
    pub flagged: Grid2<bool>,
}

/// Square-growth mass averaging.
///
/// Around each tissue cell, Chebyshev rings of radius 0, 1, 2, ... are added
/// (cells of a ring visited row-major) until the gathered tissue mass reaches
/// `target_mass`. If the square touches the grid edge first, the partial
/// average is kept and the cell is flagged. Background cells carry no mass
/// and get 0.
pub fn mass_average(
    pointwise: &Grid2<f64>,
    grid: &TissueGrid,
    target_mass: f64,
) -> Result<MassAverage, SarError> {
    check_shape(pointwise, grid)?;
    if !(target_mass > 0.0) || !target_mass.is_finite() {
        return Err(SarError::InvalidTargetMass(target_mass));
    }
    let (w, h) = (grid.spec.width, grid.spec.height);
    let mass = Grid2::from_fn(w, h, |x, y| grid.cell_mass(x, y));
    let mut values = Grid2::filled(w, h, 0.0);
    let mut flagged = Grid2::filled(w, h, false);

    for cy in 0..h {
        for cx in 0..w {
            if mass[(cx, cy)] <= 0.0 {
                continue;
            }
            let (mut m_sum, mut sm_sum) = (0.0, 0.0);
            let mut r = 0usize;
            loop {
                let y0 = cy.saturating_sub(r);
                let y1 = (cy + r).min(h - 1);
                let x0 = cx.saturating_sub(r);
                let x1 = (cx + r).min(w - 1);
                for y in y0..=y1 {
                    let full_row = cy.abs_diff(y) == r;
                    let mut visit = |x: usize| {
                        let m = mass[(x, y)];
                        if m > 0.0 {
                            m_sum += m;
                            sm_sum += pointwise[(x, y)] * m;
                        }
                    };
                    if full_row {
                        (x0..=x1).for_each(&mut visit);
                    } else {
                        if cx >= r {
                            visit(cx - r);
                        }
                        if r > 0 && cx + r < w {
                            visit(cx + r);
                        }
                    }
                }
                if m_sum >= target_mass {
                    break;
                }
                if cx <= r || cy <= r || cx + r >= w - 1 || cy + r >= h - 1 {
                    flagged[(cx, cy)] = true;
                    break;
                }
                r += 1;
            }
            values[(cx, cy)] = if m_sum > 0.0 { sm_sum / m_sum } else { 0.0 };
        }
    }
    Ok(MassAverage { values, flagged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SarMap {
    pub pointwise: Grid2<f64>,
    pub averaged_1g: Grid2<f64>,
    pub flagged: Grid2<bool>,
    pub mask: Grid2<u8>,
    pub peak_local: f64,
    pub global_avg: f64,
}

impl SarMap {
    pub fn compute(e_field: &Grid2<Complex64>, grid: &TissueGrid) -> Result<Self, SarError> {
        Self::with_target_mass(e_field, grid, ONE_GRAM)
    }

    pub fn with_target_mass(
        e_field: &Grid2<Complex64>,
        grid: &TissueGrid,
        target_mass: f64,
    ) -> Result<Self, SarError> {
        let pointwise = pointwise_sar(e_field, grid)?;
        Self::from_pointwise(pointwise, grid, target_mass)
    }

    pub fn from_pointwise(pointwise: Grid2<f64>, grid: &TissueGrid, target_mass: f64) -> Result<Self, SarError> {
        let avg = mass_average(&pointwise, grid, target_mass)?;
        let mask = rasterize_mask(grid);
        if mask.iter().all(|&m| m == 0) {
            return Err(SarError::EmptyMask);
        }
        let peak_local = avg
            .values
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v)
            .fold(0.0, f64::max);
        let (mut sm, mut m) = (0.0, 0.0);
        for y in 0..grid.spec.height {
            for x in 0..grid.spec.width {
                let cm = grid.cell_mass(x, y);
                sm += pointwise[(x, y)] * cm;
                m += cm;
            }
        }
        Ok(Self {
            pointwise,
            averaged_1g: avg.values,
            flagged: avg.flagged,
            mask,
            peak_local,
            global_avg: if m > 0.0 { sm / m } else { 0.0 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SarSummary {
    pub peak_local: f64,
    pub global_avg: f64,
    /// peak-local to global ratio; absent when no power is deposited
    pub ratio: Option<f64>,
}

pub fn summarize(sar: &SarMap) -> SarSummary {
    SarSummary {
        peak_local: sar.peak_local,
        global_avg: sar.global_avg,
        ratio: (sar.global_avg > 0.0).then(|| sar.peak_local / sar.global_avg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{TissueTable, BACKGROUND, MUSCLE};
    use crate::raster::GridSpec;

    fn uniform_grid(n: usize, cell: f64, density: f64) -> TissueGrid {
        let mut tissues = TissueTable::for_frequency(128.0);
        tissues.entries[MUSCLE as usize].density = density;
        TissueGrid {
            spec: GridSpec {
                width: n,
                height: n,
                cell_size: cell,
            },
            slice_thickness: 0.005,
            classes: Grid2::filled(n, n, MUSCLE),
            tissues,
        }
    }

    #[test]
    fn pointwise_formula() {
        let mut g = uniform_grid(3, 0.01, 1000.0);
        g.tissues.entries[MUSCLE as usize].conductivity = 1.0;
        g.classes[(0, 0)] = BACKGROUND;
        let e = Grid2::filled(3, 3, Complex64::new(0.6, 0.8));
        let s = pointwise_sar(&e, &g).unwrap();
        assert!((s[(1, 1)] - 5.0e-4).abs() < 1e-18);
        assert_eq!(s[(0, 0)], 0.0);

        g.tissues.entries[MUSCLE as usize].conductivity = 0.0;
        let s = pointwise_sar(&e, &g).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = uniform_grid(4, 0.01, 1000.0);
        let e = Grid2::filled(3, 4, Complex64::new(1.0, 0.0));
        assert!(matches!(pointwise_sar(&e, &g), Err(SarError::ShapeMismatch { .. })));
        let p = Grid2::filled(4, 4, 1.0);
        assert!(matches!(mass_average(&p, &g, 0.0), Err(SarError::InvalidTargetMass(_))));
    }

    #[test]
    fn uniform_sar_is_preserved_in_interior() {
        let g = uniform_grid(21, 0.01, 1000.0);
        let p = Grid2::filled(21, 21, 0.37);
        let avg = mass_average(&p, &g, ONE_GRAM).unwrap();
        for y in 5..16 {
            for x in 5..16 {
                assert!((avg.values[(x, y)] - 0.37).abs() <= 1e-12);
                assert!(!avg.flagged[(x, y)]);
            }
        }
    }

    #[test]
    fn single_hot_cell_spreads_over_region() {
        // cell mass 1000 * 1e-4 * 5e-3 = 0.5 g: 1 g needs the 3x3 square
        let g = uniform_grid(11, 0.01, 1000.0);
        let mut p = Grid2::filled(11, 11, 0.0);
        p[(5, 5)] = 9.0;
        let avg = mass_average(&p, &g, ONE_GRAM).unwrap();
        assert!((avg.values[(5, 5)] - 9.0 / 9.0).abs() < 1e-15);
        assert!((avg.values[(4, 4)] - 1.0).abs() < 1e-15);
        assert_eq!(avg.values[(7, 5)], 0.0);
    }

    #[test]
    fn edge_cells_are_flagged_with_partial_average() {
        let g = uniform_grid(6, 0.01, 1000.0);
        let p = Grid2::from_fn(6, 6, |x, y| (x + y) as f64);
        let avg = mass_average(&p, &g, ONE_GRAM).unwrap();
        assert!(avg.flagged[(0, 3)]);
        // corner: only the cell itself was gathered
        assert_eq!(avg.values[(0, 0)], 0.0);
        assert!(!avg.flagged[(2, 2)]);
    }

    #[test]
    fn tiny_target_mass_is_identity() {
        let g = uniform_grid(8, 0.01, 1000.0);
        let p = Grid2::from_fn(8, 8, |x, y| (x * 3 + y) as f64 * 0.1);
        let avg = mass_average(&p, &g, 1e-9).unwrap();
        assert_eq!(avg.values, p);
    }

    #[test]
    fn summary_ratio() {
        let g = uniform_grid(9, 0.01, 1000.0);
        let uniform = SarMap::from_pointwise(Grid2::filled(9, 9, 2.0), &g, ONE_GRAM).unwrap();
        let s = summarize(&uniform);
        assert!((s.ratio.unwrap() - 1.0).abs() < 1e-12);

        let zero = SarMap::from_pointwise(Grid2::filled(9, 9, 0.0), &g, ONE_GRAM).unwrap();
        assert_eq!(summarize(&zero).ratio, None);

        // hot cell h at the center: peak = h/9 (3x3 region),
        // global = h/81 (equal masses), ratio = 9
        let mut p = Grid2::filled(9, 9, 0.0);
        p[(4, 4)] = 81.0;
        let hot = SarMap::from_pointwise(p, &g, ONE_GRAM).unwrap();
        let s = summarize(&hot);
        assert!((s.peak_local - 9.0).abs() < 1e-12);
        assert!((s.global_avg - 1.0).abs() < 1e-12);
        assert!((s.ratio.unwrap() - 9.0).abs() < 1e-12);
    }
}
