//! Dataset generation: phantom seeds × placements → solved, averaged and
//! normalized samples.

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{KeyValues, Manifest};
use crate::dataset::{build_sample, RejectReason, Sample};
use crate::emfield::solver::SolverOptions;
use crate::emfield::{compute_field, FieldError};
use crate::phantom::{
    enumerate_placements, make_phantom, FieldStrength, PhantomError, PhantomSpec, Placement, PlacementRanges, TissueGrid,
};
use crate::sarmap::{summarize, SarError, SarMap, SarSummary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid generation settings: {0}")]
    Invalid(String),
    #[error("phantom seed {seed}: {source}")]
    Phantom {
        seed: u64,
        #[source]
        source: PhantomError,
    },
    #[error("phantom seed {seed}, placement ({x:.4}, {y:.4}): {source}")]
    Field {
        seed: u64,
        x: f64,
        y: f64,
        #[source]
        source: FieldError,
    },
    #[error("phantom seed {seed}: {source}")]
    Sar {
        seed: u64,
        #[source]
        source: SarError,
    },
    #[error("no samples built: {outside_coil} of {candidates} placements fall outside the coil, {rejected} rejected")]
    NothingBuilt {
        candidates: usize,
        outside_coil: usize,
        rejected: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub field: FieldStrength,
    pub grid: usize,
    /// placements along x and y
    pub positions: (usize, usize),
    pub phantom_seeds: usize,
    /// phantom `i` uses seed `base_seed + i`
    pub base_seed: u64,
    pub ranges: PlacementRanges,
    pub overrides: KeyValues,
    pub solver: SolverOptions,
}

impl GenerateConfig {
    pub fn new(field: FieldStrength, grid: usize, positions: (usize, usize), phantom_seeds: usize, base_seed: u64) -> Self {
        Self {
            field,
            grid,
            positions,
            phantom_seeds,
            base_seed,
            ranges: field.default_ranges(),
            overrides: KeyValues::new(),
            solver: SolverOptions::default(),
        }
    }

    pub fn candidates(&self) -> usize {
        self.positions.0 * self.positions.1 * self.phantom_seeds
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Invalid(m));
        if self.grid < 16 {
            return bad(format!("grid must be at least 16 cells, got {}", self.grid));
        }
        if self.positions.0 == 0 || self.positions.1 == 0 {
            return bad("position counts must be at least 1".into());
        }
        if self.phantom_seeds == 0 {
            return bad("at least one phantom seed is required".into());
        }
        if !self.ranges.x.is_valid() || !self.ranges.y.is_valid() {
            return bad("placement ranges must be finite with min <= max".into());
        }
        self.phantom_spec().map(|_| ())
    }

    /// Field preset phantom parameters with the overrides applied.
    pub fn phantom_spec(&self) -> Result<PhantomSpec, PipelineError> {
        let mut spec = self.field.phantom_spec(self.grid);
        spec.apply_overrides(&self.overrides)
            .map_err(|e| PipelineError::Invalid(format!("phantom config: {e}")))?;
        Ok(spec)
    }

    pub fn record(&self, m: &mut Manifest) {
        m.push("field", self.field)
            .push("grid", self.grid)
            .push("positions_x", self.positions.0)
            .push("positions_y", self.positions.1)
            .push("phantom_seeds", self.phantom_seeds)
            .push("base_seed", self.base_seed)
            .push("range_x_min", self.ranges.x.min)
            .push("range_x_max", self.ranges.x.max)
            .push("range_y_min", self.ranges.y.min)
            .push("range_y_max", self.ranges.y.max)
            .push("solver_tolerance", self.solver.tolerance)
            .push("solver_max_iterations", self.solver.max_iterations);
        for (k, v) in &self.overrides {
            m.push(format!("phantom.{k}"), v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutcome {
    pub samples: Vec<Sample>,
    /// peak-local and global SAR of each built sample, same order
    pub summaries: Vec<SarSummary>,
    pub candidates: usize,
    /// placements dropped because tissue would leave the coil
    pub outside_coil: usize,
    pub rejected: Vec<(u64, Placement, RejectReason)>,
}

impl GenerateOutcome {
    pub fn mean_peak_to_global(&self) -> Option<f64> {
        let r: Vec<f64> = self.summaries.iter().filter_map(|s| s.ratio).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

enum Built {
    Sample(Box<Sample>, SarSummary),
    Rejected(RejectReason),
}

fn build_one(
    cfg: &GenerateConfig,
    seed: u64,
    phantom: &TissueGrid,
    placement: &Placement,
) -> Result<Built, PipelineError> {
    let coil = cfg.field.coil();
    let field = compute_field(phantom, &coil, placement, &cfg.solver).map_err(|source| PipelineError::Field {
        seed,
        x: placement.offset_x,
        y: placement.offset_y,
        source,
    })?;
    let placed = phantom.placed(placement);
    let sar = SarMap::compute(&field.e_field, &placed).map_err(|source| PipelineError::Sar { seed, source })?;
    Ok(match build_sample(&placed, &field, &sar, cfg.field, seed) {
        Ok(s) => Built::Sample(Box::new(s), summarize(&sar)),
        Err(r) => Built::Rejected(r),
    })
}

/// Sweeps placements (y outer, x inner) for each phantom seed in turn.
/// Work runs in parallel; results keep this order.
pub fn generate(cfg: &GenerateConfig) -> Result<GenerateOutcome, PipelineError> {
    cfg.validate()?;
    let spec = cfg.phantom_spec()?;
    let coil = cfg.field.coil();
    let mut jobs: Vec<(u64, usize, Placement)> = Vec::new();
    let mut phantoms = Vec::with_capacity(cfg.phantom_seeds);
    let mut outside_coil = 0;
    let per_seed = cfg.positions.0 * cfg.positions.1;
    for i in 0..cfg.phantom_seeds {
        let seed = cfg.base_seed.wrapping_add(i as u64);
        let phantom = make_phantom(seed, &spec).map_err(|source| PipelineError::Phantom { seed, source })?;
        let placements = match enumerate_placements(&phantom, &coil, cfg.ranges, cfg.positions) {
            Ok(p) => p,
            Err(PhantomError::NoValidPlacement) => Vec::new(),
            Err(source) => return Err(PipelineError::Phantom { seed, source }),
        };
        outside_coil += per_seed - placements.len();
        jobs.extend(placements.into_iter().map(|p| (seed, i, p)));
        phantoms.push(phantom);
    }
    log::info!(
        "{}: {} candidates, {} outside the coil, solving {}",
        cfg.field,
        cfg.candidates(),
        outside_coil,
        jobs.len()
    );
    let built: Vec<Result<Built, PipelineError>> = jobs
        .par_iter()
        .map(|(seed, i, p)| build_one(cfg, *seed, &phantoms[*i], p))
        .collect();

    let mut out = GenerateOutcome {
        samples: Vec::new(),
        summaries: Vec::new(),
        candidates: cfg.candidates(),
        outside_coil,
        rejected: Vec::new(),
    };
    for ((seed, _, p), b) in jobs.iter().zip(built) {
        match b? {
            Built::Sample(s, summary) => {
                out.samples.push(*s);
                out.summaries.push(summary);
            }
            Built::Rejected(r) => out.rejected.push((*seed, *p, r)),
        }
    }
    if out.samples.is_empty() {
        return Err(PipelineError::NothingBuilt {
            candidates: out.candidates,
            outside_coil: out.outside_coil,
            rejected: out.rejected.len(),
        });
    }
    Ok(out)
}
