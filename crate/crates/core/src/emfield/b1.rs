//! Unloaded B1 from the coil rungs treated as infinite line currents.

use num_complex::Complex64;

use crate::phantom::CoilModel;
use crate::raster::{Grid2, GridSpec};

/// Transverse field phasor of one line current at `rung` seen from `point`,
/// in units of μ₀/(2π): B = I · ẑ × d / |d|², d = point − rung.
pub fn line_current_field(rung: (f64, f64), current: Complex64, point: (f64, f64)) -> (Complex64, Complex64) {
    let dx = point.0 - rung.0;
    let dy = point.1 - rung.1;
    let d2 = dx * dx + dy * dy;
    (current * (-dy / d2), current * (dx / d2))
}

/// Magnitude of the co-rotating circular component of the summed rung field
/// at `point`, unnormalized. With rung phases advancing as +2πk/N the
/// excitation component is (Bx − iBy)/2.
pub fn b1_magnitude_at(coil: &CoilModel, point: (f64, f64)) -> f64 {
    let (mut bx, mut by) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    for (rung, &i) in coil.rung_positions().into_iter().zip(&coil.drive) {
        let (fx, fy) = line_current_field(rung, i, point);
        bx += fx;
        by += fy;
    }
    (bx - Complex64::i() * by).norm() / 2.0
}

/// B1 magnitude map over the grid, scaled so the maximum over cells inside
/// the rung circle equals 1. Cells that contain a rung take the value of
/// their nearest rung-free 4-neighbour.
pub fn unloaded_b1(coil: &CoilModel, spec: &GridSpec) -> Grid2<f64> {
    let mut rung_cell = Grid2::filled(spec.width, spec.height, false);
    for (x, y) in coil.rung_positions() {
        if let Some(c) = spec.cell_at(x, y) {
            rung_cell[c] = true;
        }
    }
    let raw = Grid2::from_fn(spec.width, spec.height, |x, y| {
        if rung_cell[(x, y)] {
            f64::NAN
        } else {
            b1_magnitude_at(coil, (spec.center_x(x), spec.center_y(y)))
        }
    });
    let mut b1 = raw.clone();
    for y in 0..spec.height {
        for x in 0..spec.width {
            if !rung_cell[(x, y)] {
                continue;
            }
            let (cx, cy) = (spec.center_x(x), spec.center_y(y));
            let mut best: Option<(f64, f64)> = None;
            let neighbours = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (nx, ny) in neighbours {
                if nx >= spec.width || ny >= spec.height || rung_cell[(nx, ny)] {
                    continue;
                }
                let d = (spec.center_x(nx) - cx).hypot(spec.center_y(ny) - cy);
                // ties broken toward the coil center
                let r = spec.center_x(nx).hypot(spec.center_y(ny));
                let key = d + 1e-9 * r;
                if best.is_none_or(|(k, _)| key < k) {
                    best = Some((key, raw[(nx, ny)]));
                }
            }
            b1[(x, y)] = best.map_or(0.0, |(_, v)| v);
        }
    }
    let peak = (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| (x, y)))
        .filter(|&(x, y)| spec.center_x(x).hypot(spec.center_y(y)) < coil.rung_radius)
        .map(|c| b1[c])
        .fold(0.0_f64, f64::max);
    if peak > 0.0 {
        for v in b1.as_mut_slice() {
            *v /= peak;
        }
    }
    b1
}
