//! Synthetic 2D tissue phantoms, birdcage coil geometry and the placement
//! sweep that moves a phantom around inside the coil.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{parse_value, ConfigError, KeyValues};
use crate::raster::{Grid2, GridSpec};

pub const BACKGROUND: u8 = 0;
pub const FAT: u8 = 1;
pub const MUSCLE: u8 = 2;
pub const BONE: u8 = 3;
pub const CSF: u8 = 4;

/// Version stamp of the built-in tissue property values.
pub const TISSUE_TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid coil: {0}")]
    InvalidCoil(String),
    #[error("invalid tissue grid: {0}")]
    InvalidGrid(String),
    #[error("no placement keeps the phantom inside the coil")]
    NoValidPlacement,
    #[error("placement ({x:.4}, {y:.4}) m puts tissue outside the rung radius")]
    PlacementOutsideCoil { x: f64, y: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// The two field-strength presets of the position sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldStrength {
    ThreeT,
    SevenT,
}

impl FieldStrength {
    pub fn larmor_mhz(self) -> f64 {
        match self {
            FieldStrength::ThreeT => 128.0,
            FieldStrength::SevenT => 297.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            FieldStrength::ThreeT => 0,
            FieldStrength::SevenT => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FieldStrength::ThreeT),
            1 => Some(FieldStrength::SevenT),
            _ => None,
        }
    }

    /// 16-rung body coil in a 60 cm bore at 3T; 16-rung head coil at 7T.
    pub fn coil(self) -> CoilModel {
        let (rung, shield) = match self {
            FieldStrength::ThreeT => (0.30, 0.34),
            FieldStrength::SevenT => (0.14, 0.17),
        };
        CoilModel::birdcage(16, rung, shield, self.larmor_mhz()).expect("preset coil is valid")
    }

    /// Square simulation grid covering the shield with a 3% margin.
    pub fn grid_spec(self, cells: usize) -> GridSpec {
        GridSpec::square(cells, 2.0 * self.coil().shield_radius * 1.03)
    }

    pub fn phantom_spec(self, cells: usize) -> PhantomSpec {
        let grid = self.grid_spec(cells);
        let tissues = TissueTable::for_frequency(self.larmor_mhz());
        match self {
            FieldStrength::ThreeT => PhantomSpec {
                grid,
                slice_thickness: 0.005,
                semi_axis_x: Interval::new(0.12, 0.15),
                semi_axis_y: Interval::new(0.08, 0.10),
                fat_thickness: Interval::new(0.01, 0.02),
                inclusion_count: (1, 4),
                inclusion_radius: Interval::new(0.015, 0.04),
                area_fraction: Interval::new(0.05, 0.11),
                tissues,
            },
            FieldStrength::SevenT => PhantomSpec {
                grid,
                slice_thickness: 0.005,
                semi_axis_x: Interval::new(0.07, 0.085),
                semi_axis_y: Interval::new(0.055, 0.07),
                // scalp and skull as one low-conductivity shell
                fat_thickness: Interval::new(0.008, 0.014),
                inclusion_count: (1, 4),
                inclusion_radius: Interval::new(0.01, 0.025),
                area_fraction: Interval::new(0.085, 0.17),
                tissues,
            },
        }
    }

    /// Default translation sweep (meters). At 3T every offset fits the
    /// largest preset phantom; at 7T the extreme corners may be filtered.
    pub fn default_ranges(self) -> PlacementRanges {
        match self {
            FieldStrength::ThreeT => PlacementRanges {
                x: Interval::new(-0.07, 0.07),
                y: Interval::new(-0.05, 0.05),
            },
            FieldStrength::SevenT => PlacementRanges {
                x: Interval::new(-0.035, 0.035),
                y: Interval::new(-0.025, 0.025),
            },
        }
    }
}

impl fmt::Display for FieldStrength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldStrength::ThreeT => "3T",
            FieldStrength::SevenT => "7T",
        })
    }
}

impl FromStr for FieldStrength {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "3T" => Ok(FieldStrength::ThreeT),
            "7T" => Ok(FieldStrength::SevenT),
            _ => Err(format!("unknown field preset {s:?} (expected 3T or 7T)")),
        }
    }
}

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueProperties {
    pub class_id: u8,
    pub name: String,
    /// S/m
    pub conductivity: f64,
    /// kg/m^3; background mass is always treated as zero
    pub density: f64,
    pub rel_permittivity: f64,
}

impl TissueProperties {
    fn new(class_id: u8, name: &str, conductivity: f64, density: f64, rel_permittivity: f64) -> Self {
        Self {
            class_id,
            name: name.to_string(),
            conductivity,
            density,
            rel_permittivity,
        }
    }

    fn check(&self) -> Result<(), PhantomError> {
        let ok = self.conductivity >= 0.0
            && self.rel_permittivity >= 1.0
            && (self.class_id == BACKGROUND || self.density > 0.0)
            && self.conductivity.is_finite()
            && self.density.is_finite()
            && self.rel_permittivity.is_finite();
        if !ok {
            return Err(PhantomError::InvalidGrid(format!(
                "tissue `{}` has non-physical properties",
                self.name
            )));
        }
        if self.class_id == BACKGROUND && self.conductivity != 0.0 {
            return Err(PhantomError::InvalidGrid(
                "background must have zero conductivity".into(),
            ));
        }
        Ok(())
    }
}

/// Indexed by class id; entry 0 is background air.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueTable {
    pub version: u32,
    pub entries: Vec<TissueProperties>,
}

impl TissueTable {
    /// Built-in values. Muscle is dispersive between 128 and 297 MHz; the
    /// other tissues use one value set for both.
    pub fn for_frequency(frequency_mhz: f64) -> Self {
        let (muscle_sigma, muscle_eps) = if frequency_mhz >= 200.0 {
            (0.77, 58.0)
        } else {
            (0.72, 63.0)
        };
        Self {
            version: TISSUE_TABLE_VERSION,
            entries: vec![
                TissueProperties::new(BACKGROUND, "air", 0.0, 0.0, 1.0),
                TissueProperties::new(FAT, "fat", 0.07, 911.0, 12.0),
                TissueProperties::new(MUSCLE, "muscle", muscle_sigma, 1090.0, muscle_eps),
                TissueProperties::new(BONE, "bone", 0.06, 1908.0, 14.0),
                TissueProperties::new(CSF, "csf", 2.14, 1007.0, 72.0),
            ],
        }
    }

    pub fn get(&self, class_id: u8) -> Option<&TissueProperties> {
        self.entries.get(class_id as usize)
    }

    /// Applies `tissue.<name>.<conductivity|density|permittivity>` keys.
    /// Keys without the `tissue.` prefix are ignored.
    pub fn apply_overrides(&mut self, kv: &KeyValues) -> Result<(), PhantomError> {
        for (key, value) in kv {
            let Some(rest) = key.strip_prefix("tissue.") else {
                continue;
            };
            let (name, prop) = rest
                .split_once('.')
                .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            let entry = self
                .entries
                .iter_mut()
                .find(|e| e.name == name)
                .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            let v: f64 = parse_value(key, value)?;
            match prop {
                "conductivity" => entry.conductivity = v,
                "density" => entry.density = v,
                "permittivity" => entry.rel_permittivity = v,
                _ => return Err(ConfigError::UnknownKey(key.clone()).into()),
            }
            entry.check()?;
        }
        Ok(())
    }
}

/// Parameters of the randomized phantom generator. Lengths in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub slice_thickness: f64,
    pub semi_axis_x: Interval,
    pub semi_axis_y: Interval,
    pub fat_thickness: Interval,
    /// inclusive range of interior inclusions, at most 4
    pub inclusion_count: (usize, usize),
    pub inclusion_radius: Interval,
    /// accepted range of the non-background area fraction
    pub area_fraction: Interval,
    pub tissues: TissueTable,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        for (name, iv) in [
            ("semi_axis_x", self.semi_axis_x),
            ("semi_axis_y", self.semi_axis_y),
            ("fat_thickness", self.fat_thickness),
            ("inclusion_radius", self.inclusion_radius),
            ("area_fraction", self.area_fraction),
        ] {
            if !iv.is_valid() || iv.min < 0.0 {
                return bad(&format!("{name} must be a finite non-negative range"));
            }
        }
        if self.grid.width == 0 || self.grid.height == 0 || !(self.grid.cell_size > 0.0) {
            return bad("grid must be non-empty with positive cell size");
        }
        if !(self.slice_thickness > 0.0) {
            return bad("slice_thickness must be positive");
        }
        if self.semi_axis_x.min <= 0.0 || self.semi_axis_y.min <= 0.0 {
            return bad("semi-axes must be positive");
        }
        if self.semi_axis_x.max > self.grid.half_extent_x()
            || self.semi_axis_y.max > self.grid.half_extent_y()
        {
            return bad("outer ellipse larger than grid");
        }
        if self.fat_thickness.max >= self.semi_axis_x.min.min(self.semi_axis_y.min) {
            return bad("fat layer thicker than the smallest semi-axis");
        }
        let (lo, hi) = self.inclusion_count;
        if lo > hi || hi > 4 {
            return bad("inclusion count range must satisfy min <= max <= 4");
        }
        if self.tissues.entries.len() <= CSF as usize {
            return bad("tissue table lacks the built-in classes");
        }
        for t in &self.tissues.entries {
            t.check()?;
        }
        Ok(())
    }

    /// Overrides from a key=value config. Recognized keys: `slice_thickness`,
    /// `<range>_min` / `<range>_max` for `semi_axis_x`, `semi_axis_y`,
    /// `fat_thickness`, `inclusion_radius`, `area_fraction`, `inclusions_min`,
    /// `inclusions_max`, and `tissue.<name>.<property>`.
    pub fn apply_overrides(&mut self, kv: &KeyValues) -> Result<(), PhantomError> {
        for (key, value) in kv {
            if key.starts_with("tissue.") {
                continue;
            }
            match key.as_str() {
                "slice_thickness" => self.slice_thickness = parse_value(key, value)?,
                "inclusions_min" => self.inclusion_count.0 = parse_value(key, value)?,
                "inclusions_max" => self.inclusion_count.1 = parse_value(key, value)?,
                _ => {
                    let (range, end) = key
                        .rsplit_once('_')
                        .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
                    let iv = match range {
                        "semi_axis_x" => &mut self.semi_axis_x,
                        "semi_axis_y" => &mut self.semi_axis_y,
                        "fat_thickness" => &mut self.fat_thickness,
                        "inclusion_radius" => &mut self.inclusion_radius,
                        "area_fraction" => &mut self.area_fraction,
                        _ => return Err(ConfigError::UnknownKey(key.clone()).into()),
                    };
                    let v: f64 = parse_value(key, value)?;
                    match end {
                        "min" => iv.min = v,
                        "max" => iv.max = v,
                        _ => return Err(ConfigError::UnknownKey(key.clone()).into()),
                    }
                }
            }
        }
        self.tissues.apply_overrides(kv)?;
        self.validate()
    }
}

/// Rasterized phantom: a class id per cell plus the property table.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueGrid {
    pub spec: GridSpec,
    pub slice_thickness: f64,
    pub classes: Grid2<u8>,
    pub tissues: TissueTable,
}

impl TissueGrid {
    pub fn new(
        spec: GridSpec,
        slice_thickness: f64,
        classes: Grid2<u8>,
        tissues: TissueTable,
    ) -> Result<Self, PhantomError> {
        let g = Self {
            spec,
            slice_thickness,
            classes,
            tissues,
        };
        g.validate()?;
        Ok(g)
    }

    /// Uniform single-tissue disc, handy for hand-built cases.
    pub fn uniform_disc(spec: GridSpec, radius: f64, class_id: u8, tissues: TissueTable) -> Self {
        let classes = Grid2::from_fn(spec.width, spec.height, |x, y| {
            if spec.center_x(x).hypot(spec.center_y(y)) < radius {
                class_id
            } else {
                BACKGROUND
            }
        });
        Self {
            spec,
            slice_thickness: 0.005,
            classes,
            tissues,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.classes.width() != self.spec.width || self.classes.height() != self.spec.height {
            return Err(PhantomError::InvalidGrid("class raster does not match grid spec".into()));
        }
        if !(self.spec.cell_size > 0.0) || !(self.slice_thickness > 0.0) {
            return Err(PhantomError::InvalidGrid(
                "cell size and slice thickness must be positive".into(),
            ));
        }
        let n = self.tissues.entries.len();
        if let Some(&c) = self.classes.iter().find(|&&c| c as usize >= n) {
            return Err(PhantomError::InvalidGrid(format!(
                "class id {c} outside property table of {n} entries"
            )));
        }
        if self.tissue_cell_count() == 0 {
            return Err(PhantomError::InvalidGrid("no tissue cells".into()));
        }
        for t in &self.tissues.entries {
            t.check()?;
        }
        Ok(())
    }

    #[inline]
    pub fn properties_at(&self, x: usize, y: usize) -> &TissueProperties {
        &self.tissues.entries[self.classes[(x, y)] as usize]
    }

    #[inline]
    pub fn is_tissue(&self, x: usize, y: usize) -> bool {
        self.classes[(x, y)] != BACKGROUND
    }

    /// Mass of one cell in kg (zero for background).
    #[inline]
    pub fn cell_mass(&self, x: usize, y: usize) -> f64 {
        if !self.is_tissue(x, y) {
            return 0.0;
        }
        self.properties_at(x, y).density * self.cell_volume()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spec.cell_size * self.spec.cell_size * self.slice_thickness
    }

    pub fn tissue_cell_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != BACKGROUND).count()
    }

    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &c in self.classes.iter() {
            seen[c as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Nearest-neighbour resampling of the phantom moved by `placement`.
    pub fn placed(&self, placement: &Placement) -> TissueGrid {
        let (s, c) = placement.rotation.sin_cos();
        let spec = self.spec;
        let classes = Grid2::from_fn(spec.width, spec.height, |x, y| {
            let px = spec.center_x(x) - placement.offset_x;
            let py = spec.center_y(y) - placement.offset_y;
            // inverse rotation
            let qx = c * px + s * py;
            let qy = -s * px + c * py;
            match spec.cell_at(qx, qy) {
                Some((sx, sy)) => self.classes[(sx, sy)],
                None => BACKGROUND,
            }
        });
        TissueGrid {
            spec,
            slice_thickness: self.slice_thickness,
            classes,
            tissues: self.tissues.clone(),
        }
    }

    /// Corner points of tissue cells that touch background (or the grid
    /// edge). The farthest tissue point from any center is one of these.
    pub fn boundary_corners(&self) -> Vec<(f64, f64)> {
        let (w, h) = (self.spec.width, self.spec.height);
        let half = self.spec.cell_size / 2.0;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.is_tissue(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !self.is_tissue(x - 1, y)
                    || !self.is_tissue(x + 1, y)
                    || !self.is_tissue(x, y - 1)
                    || !self.is_tissue(x, y + 1);
                if edge {
                    let (cx, cy) = (self.spec.center_x(x), self.spec.center_y(y));
                    for (dx, dy) in [(-half, -half), (half, -half), (-half, half), (half, half)] {
                        out.push((cx + dx, cy + dy));
                    }
                }
            }
        }
        out
    }
}

/// Birdcage coil: `rung_count` line currents on a circle inside a
/// cylindrical shield, driven in quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilModel {
    pub rung_count: usize,
    pub rung_radius: f64,
    pub shield_radius: f64,
    pub frequency_mhz: f64,
    pub drive: Vec<Complex64>,
}

impl CoilModel {
    /// Circularly polarized birdcage: rung `k` sits at angle 2πk/N and
    /// carries a unit current with phase 2πk/N.
    pub fn birdcage(
        rung_count: usize,
        rung_radius: f64,
        shield_radius: f64,
        frequency_mhz: f64,
    ) -> Result<Self, PhantomError> {
        let drive = (0..rung_count)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / rung_count as f64))
            .collect();
        let coil = Self {
            rung_count,
            rung_radius,
            shield_radius,
            frequency_mhz,
            drive,
        };
        coil.validate()?;
        Ok(coil)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.rung_count < 3 {
            return Err(PhantomError::InvalidCoil("need at least 3 rungs".into()));
        }
        if !(self.rung_radius > 0.0 && self.shield_radius > self.rung_radius) {
            return Err(PhantomError::InvalidCoil(
                "require shield_radius > rung_radius > 0".into(),
            ));
        }
        if !(self.frequency_mhz > 0.0 && self.frequency_mhz.is_finite()) {
            return Err(PhantomError::InvalidCoil("frequency must be positive".into()));
        }
        if self.drive.len() != self.rung_count {
            return Err(PhantomError::InvalidCoil("one drive amplitude per rung".into()));
        }
        Ok(())
    }

    pub fn rung_positions(&self) -> Vec<(f64, f64)> {
        (0..self.rung_count)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / self.rung_count as f64;
                (self.rung_radius * a.cos(), self.rung_radius * a.sin())
            })
            .collect()
    }

    /// Angular frequency in rad/s.
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_mhz * 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub offset_x: f64,
    pub offset_y: f64,
    pub rotation: f64,
}

impl Placement {
    pub const CENTERED: Placement = Placement {
        offset_x: 0.0,
        offset_y: 0.0,
        rotation: 0.0,
    };

    pub fn translation(offset_x: f64, offset_y: f64) -> Self {
        Self {
            offset_x,
            offset_y,
            rotation: 0.0,
        }
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (c * x - s * y + self.offset_x, s * x + c * y + self.offset_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementRanges {
    pub x: Interval,
    pub y: Interval,
}

/// Largest radius a tissue point may reach: one cell inside the rung circle,
/// so that rung source cells never overlap tissue after resampling.
pub fn tissue_radius_limit(coil: &CoilModel, spec: &GridSpec) -> f64 {
    coil.rung_radius - spec.cell_size
}

pub fn placement_fits(phantom: &TissueGrid, coil: &CoilModel, placement: &Placement) -> bool {
    let limit = tissue_radius_limit(coil, &phantom.spec);
    phantom.boundary_corners().iter().all(|&p| {
        let (x, y) = placement.apply(p);
        x.hypot(y) < limit
    })
}

fn linspace(iv: Interval, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(iv.min + iv.max) / 2.0];
    }
    (0..n)
        .map(|i| iv.min + (iv.max - iv.min) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Evenly spaced translations, rows (y) outer and columns (x) inner, keeping
/// only those where the whole phantom stays inside the coil.
pub fn enumerate_placements(
    phantom: &TissueGrid,
    coil: &CoilModel,
    ranges: PlacementRanges,
    counts: (usize, usize),
) -> Result<Vec<Placement>, PhantomError> {
    let (nx, ny) = counts;
    if nx == 0 || ny == 0 {
        return Err(PhantomError::InvalidSpec("placement counts must be >= 1".into()));
    }
    if !ranges.x.is_valid() || !ranges.y.is_valid() {
        return Err(PhantomError::InvalidSpec("placement ranges must be finite".into()));
    }
    let limit = tissue_radius_limit(coil, &phantom.spec);
    let corners = phantom.boundary_corners();
    let xs = linspace(ranges.x, nx);
    let mut out = Vec::with_capacity(nx * ny);
    for oy in linspace(ranges.y, ny) {
        for &ox in &xs {
            let p = Placement::translation(ox, oy);
            if corners.iter().all(|&c| {
                let (x, y) = p.apply(c);
                x.hypot(y) < limit
            }) {
                out.push(p);
            }
        }
    }
    if out.is_empty() {
        return Err(PhantomError::NoValidPlacement);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v <= 1.0
    }
}

const MAX_SHAPE_ATTEMPTS: usize = 64;

/// Deterministic phantom: a fat ellipse around a muscle ellipse holding
/// bone and CSF inclusions, all drawn from a ChaCha stream seeded by `seed`.
pub fn make_phantom(seed: u64, spec: &PhantomSpec) -> Result<TissueGrid, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = spec.grid;
    let total = (g.width * g.height) as f64;

    let mut chosen = None;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let a = spec.semi_axis_x.sample(&mut rng);
        let b = spec.semi_axis_y.sample(&mut rng);
        let outer = Ellipse {
            cx: 0.0,
            cy: 0.0,
            rx: a,
            ry: b,
            angle: 0.0,
        };
        let covered = (0..g.height)
            .flat_map(|y| (0..g.width).map(move |x| (x, y)))
            .filter(|&(x, y)| outer.contains(g.center_x(x), g.center_y(y)))
            .count();
        if spec.area_fraction.contains(covered as f64 / total) {
            chosen = Some(outer);
            break;
        }
    }
    let outer = chosen.ok_or_else(|| {
        PhantomError::InvalidSpec("area fraction bounds unreachable with the given semi-axes".into())
    })?;
    let fat = spec.fat_thickness.sample(&mut rng);
    let inner = Ellipse {
        rx: outer.rx - fat,
        ry: outer.ry - fat,
        ..outer
    };

    let (lo, hi) = spec.inclusion_count;
    let count = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut inclusions = Vec::with_capacity(count);
    for _ in 0..count {
        let class = if rng.random_bool(0.5) { BONE } else { CSF };
        let cap = 0.4 * inner.rx.min(inner.ry);
        let rx = spec.inclusion_radius.sample(&mut rng).min(cap);
        let ry = spec.inclusion_radius.sample(&mut rng).min(cap);
        let angle = rng.random_range(0.0..PI);
        let u = rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..2.0 * PI);
        let margin = rx.max(ry);
        let cx = (inner.rx - margin).max(0.0) * u * phi.cos();
        let cy = (inner.ry - margin).max(0.0) * u * phi.sin();
        inclusions.push((
            class,
            Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            },
        ));
    }

    let classes = Grid2::from_fn(g.width, g.height, |x, y| {
        let (px, py) = (g.center_x(x), g.center_y(y));
        if !outer.contains(px, py) {
            return BACKGROUND;
        }
        if !inner.contains(px, py) {
            return FAT;
        }
        inclusions
            .iter()
            .rev()
            .find(|(_, e)| e.contains(px, py))
            .map_or(MUSCLE, |(c, _)| *c)
    });
    TissueGrid::new(g, spec.slice_thickness, classes, spec.tissues.clone())
}

/// Binary tissue mask: 1 on tissue, 0 on background.
pub fn rasterize_mask(grid: &TissueGrid) -> Grid2<u8> {
    grid.classes.map(|&c| u8::from(c != BACKGROUND))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec3t() -> PhantomSpec {
        FieldStrength::ThreeT.phantom_spec(64)
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = make_phantom(7, &spec3t()).unwrap();
        let b = make_phantom(7, &spec3t()).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(8, &spec3t()).unwrap();
        assert_ne!(a.classes, c.classes);
    }

    #[test]
    fn zero_inclusions_gives_fat_and_muscle_only() {
        let mut spec = spec3t();
        spec.inclusion_count = (0, 0);
        let g = make_phantom(3, &spec).unwrap();
        assert_eq!(g.classes_present(), vec![BACKGROUND, FAT, MUSCLE]);
    }

    #[test]
    fn oversized_ellipse_rejected() {
        let mut spec = spec3t();
        spec.semi_axis_x.max = 1.0;
        assert!(matches!(make_phantom(1, &spec), Err(PhantomError::InvalidSpec(_))));
    }

    #[test]
    fn area_fraction_within_bounds_over_seed_sweep() {
        for field in [FieldStrength::ThreeT, FieldStrength::SevenT] {
            let spec = field.phantom_spec(64);
            for seed in 0..100 {
                let g = make_phantom(seed, &spec).unwrap();
                // count directly from the raw class buffer
                let mut n = 0usize;
                for &c in g.classes.as_slice() {
                    if c != 0 {
                        n += 1;
                    }
                }
                let frac = n as f64 / (64.0 * 64.0);
                assert!(
                    spec.area_fraction.contains(frac),
                    "{field} seed {seed}: fraction {frac}"
                );
            }
        }
    }

    #[test]
    fn property_table_closure() {
        for seed in 0..20 {
            let g = make_phantom(seed, &spec3t()).unwrap();
            let max = *g.classes.iter().max().unwrap() as usize;
            assert!(max < g.tissues.entries.len());
        }
    }

    #[test]
    fn mask_matches_class_test() {
        let g = make_phantom(7, &spec3t()).unwrap();
        let mask = rasterize_mask(&g);
        for y in 0..64 {
            for x in 0..64 {
                let expect = if g.classes.as_slice()[y * 64 + x] == 0 { 0 } else { 1 };
                assert_eq!(mask[(x, y)], expect);
            }
        }
        let sum: usize = mask.iter().map(|&v| v as usize).sum();
        assert_eq!(sum, g.tissue_cell_count());
    }

    #[test]
    fn all_background_mask_is_zero() {
        let spec = GridSpec::square(8, 0.1);
        let g = TissueGrid {
            spec,
            slice_thickness: 0.005,
            classes: Grid2::filled(8, 8, BACKGROUND),
            tissues: TissueTable::for_frequency(128.0),
        };
        assert!(rasterize_mask(&g).iter().all(|&v| v == 0));
        assert!(g.validate().is_err());
    }

    #[test]
    fn single_centered_placement() {
        let g = make_phantom(1, &spec3t()).unwrap();
        let coil = FieldStrength::ThreeT.coil();
        let ranges = PlacementRanges {
            x: Interval::new(-0.05, 0.05),
            y: Interval::new(-0.02, 0.02),
        };
        let p = enumerate_placements(&g, &coil, ranges, (1, 1)).unwrap();
        assert_eq!(p, vec![Placement::CENTERED]);
    }

    #[test]
    fn fourteen_by_sixteen_gives_224_positions() {
        let mut spec = spec3t();
        spec.semi_axis_x = Interval::new(0.08, 0.09);
        spec.semi_axis_y = Interval::new(0.06, 0.07);
        spec.area_fraction = Interval::new(0.0, 1.0);
        let g = make_phantom(2, &spec).unwrap();
        let coil = FieldStrength::ThreeT.coil();
        let ranges = FieldStrength::ThreeT.default_ranges();
        let p = enumerate_placements(&g, &coil, ranges, (14, 16)).unwrap();
        assert_eq!(p.len(), 224);
        // row-major: x varies fastest
        assert!(p[0].offset_y == p[13].offset_y && p[0].offset_x < p[1].offset_x);
        assert!(p[14].offset_y > p[13].offset_y);
    }

    #[test]
    fn filter_matches_brute_force_inclusion() {
        let g = make_phantom(4, &spec3t()).unwrap();
        let coil = FieldStrength::ThreeT.coil();
        let ranges = PlacementRanges {
            x: Interval::new(-0.16, 0.16),
            y: Interval::new(-0.16, 0.16),
        };
        let got = enumerate_placements(&g, &coil, ranges, (5, 5)).unwrap();
        assert!(got.len() < 25 && !got.is_empty());

        // brute force: every corner of every tissue cell
        let limit = coil.rung_radius - g.spec.cell_size;
        let half = g.spec.cell_size / 2.0;
        let mut expect = Vec::new();
        for iy in 0..5 {
            for ix in 0..5 {
                let ox = -0.16 + 0.08 * ix as f64;
                let oy = -0.16 + 0.08 * iy as f64;
                let mut inside = true;
                for y in 0..64 {
                    for x in 0..64 {
                        if g.classes[(x, y)] == 0 {
                            continue;
                        }
                        for (dx, dy) in [(-half, -half), (half, -half), (-half, half), (half, half)] {
                            let px = g.spec.center_x(x) + dx + ox;
                            let py = g.spec.center_y(y) + dy + oy;
                            if (px * px + py * py).sqrt() >= limit {
                                inside = false;
                            }
                        }
                    }
                }
                if inside {
                    expect.push((ox, oy));
                }
            }
        }
        assert_eq!(got.len(), expect.len());
        for (p, (ox, oy)) in got.iter().zip(&expect) {
            assert!((p.offset_x - ox).abs() < 1e-12 && (p.offset_y - oy).abs() < 1e-12);
        }
    }

    #[test]
    fn placed_tissue_stays_inside_rungs() {
        for field in [FieldStrength::ThreeT, FieldStrength::SevenT] {
            let coil = field.coil();
            for seed in 0..4 {
                let g = make_phantom(seed, &field.phantom_spec(64)).unwrap();
                for p in enumerate_placements(&g, &coil, field.default_ranges(), (4, 4)).unwrap() {
                    let placed = g.placed(&p);
                    for y in 0..64 {
                        for x in 0..64 {
                            if placed.is_tissue(x, y) {
                                let r = placed.spec.center_x(x).hypot(placed.spec.center_y(y));
                                assert!(r < coil.rung_radius);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn preset_sweeps_keep_every_3t_position() {
        let field = FieldStrength::ThreeT;
        let coil = field.coil();
        for seed in 0..16 {
            let g = make_phantom(seed, &field.phantom_spec(64)).unwrap();
            let p = enumerate_placements(&g, &coil, field.default_ranges(), (8, 8)).unwrap();
            assert_eq!(p.len(), 64, "seed {seed}");
        }
    }

    #[test]
    fn integer_shift_preserves_tissue_count() {
        let g = make_phantom(5, &spec3t()).unwrap();
        let h = g.spec.cell_size;
        let moved = g.placed(&Placement::translation(3.0 * h, -2.0 * h));
        assert_eq!(moved.tissue_cell_count(), g.tissue_cell_count());
        assert_eq!(moved.classes[(35, 30)], g.classes[(32, 32)]);
    }

    #[test]
    fn coil_drive_is_quadrature() {
        let coil = CoilModel::birdcage(8, 0.1, 0.12, 297.0).unwrap();
        for (k, d) in coil.drive.iter().enumerate() {
            assert!((d.norm() - 1.0).abs() < 1e-15);
            let want = 2.0 * PI * k as f64 / 8.0;
            let diff = (d.arg() - want).rem_euclid(2.0 * PI);
            assert!(diff < 1e-12 || (2.0 * PI - diff) < 1e-12);
        }
        assert!(CoilModel::birdcage(2, 0.1, 0.12, 128.0).is_err());
        assert!(CoilModel::birdcage(8, 0.12, 0.1, 128.0).is_err());
    }

    #[test]
    fn overrides_from_config_text() {
        let kv = crate::config::parse_kv(
            "inclusions_max = 2\nsemi_axis_x_min=0.13\ntissue.muscle.conductivity = 0.8\n",
        )
        .unwrap();
        let mut spec = spec3t();
        spec.apply_overrides(&kv).unwrap();
        assert_eq!(spec.inclusion_count.1, 2);
        assert_eq!(spec.semi_axis_x.min, 0.13);
        assert_eq!(spec.tissues.get(MUSCLE).unwrap().conductivity, 0.8);

        let bad = crate::config::parse_kv("nonsense_key = 1").unwrap();
        assert!(spec.apply_overrides(&bad).is_err());
        let neg = crate::config::parse_kv("tissue.fat.density = -1").unwrap();
        assert!(spec.apply_overrides(&neg).is_err());
    }
}
