//! Pilot arrangements on a shared placement.
//!
//! Pilots occupy the first `K_p` cells in column-major order; data cells are
//! taken greedily in the same order wherever their channel spread avoids the
//! pilot spread. The archetypes differ only in the initial pilot values.

use std::collections::BTreeSet;

use crate::grid::{spread_cells, GridConfig, Placement};
use crate::linalg::{CVec, C64};
use crate::registry::{Named, Registry};
use crate::{DfrcError, Result};

pub trait PilotPattern: Named + Send + Sync {
    /// Unit-scale pilot values over `placement.pilot_indices`.
    fn pilots(&self, placement: &Placement) -> CVec;
}

/// Position (in pilot order) of the cell nearest the pilot block's centroid.
fn centre_pilot(placement: &Placement) -> usize {
    let cells: Vec<(f64, f64)> = placement
        .pilot_indices
        .iter()
        .map(|&i| {
            let (r, c) = placement.grid.cell(i);
            (r as f64, c as f64)
        })
        .collect();
    let n = cells.len() as f64;
    let (mr, mc) = cells.iter().fold((0.0, 0.0), |(a, b), (r, c)| (a + r / n, b + c / n));
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, (r, c)) in cells.iter().enumerate() {
        let d = (r - mr).powi(2) + (c - mc).powi(2);
        if d < best_d - 1e-12 {
            best = k;
            best_d = d;
        }
    }
    best
}

/// A single impulse at the centre of the pilot block.
pub struct Spike;

impl Named for Spike {
    fn name(&self) -> &'static str {
        "spike"
    }
}

impl PilotPattern for Spike {
    fn pilots(&self, placement: &Placement) -> CVec {
        let mut x = CVec::zeros(placement.num_pilots());
        if !x.is_empty() {
            x[centre_pilot(placement)] = C64::new(1.0, 0.0);
        }
        x
    }
}

/// Equal pilots on every pilot cell.
pub struct Flat;

impl Named for Flat {
    fn name(&self) -> &'static str {
        "flat"
    }
}

impl PilotPattern for Flat {
    fn pilots(&self, placement: &Placement) -> CVec {
        CVec::from_element(placement.num_pilots(), C64::new(1.0, 0.0))
    }
}

/// Equal pilots on a contiguous run of about a quarter of the pilot cells,
/// centred on the block.
pub struct Cluster;

impl Named for Cluster {
    fn name(&self) -> &'static str {
        "cluster"
    }
}

impl PilotPattern for Cluster {
    fn pilots(&self, placement: &Placement) -> CVec {
        let kp = placement.num_pilots();
        let mut x = CVec::zeros(kp);
        if kp == 0 {
            return x;
        }
        let len = kp.div_ceil(4);
        let start = centre_pilot(placement).saturating_sub(len / 2).min(kp - len);
        for k in start..start + len {
            x[k] = C64::new(1.0, 0.0);
        }
        x
    }
}

pub fn pilot_patterns() -> Registry<dyn PilotPattern> {
    let mut r: Registry<dyn PilotPattern> = Registry::new("pilot pattern");
    r.register(Box::new(Spike)).register(Box::new(Flat)).register(Box::new(Cluster));
    r
}

/// Guard-respecting placement for `K_p` pilots and `K_c` data cells.
pub fn generate_placement(grid: GridConfig, num_pilots: usize, num_data: usize, max_delay: usize, max_doppler: usize) -> Result<Placement> {
    grid.validate()?;
    let mn = grid.mn();
    if max_delay >= grid.m || max_doppler >= grid.n {
        return Err(DfrcError::Geometry(format!(
            "channel spread ({} x {}) must be smaller than the grid ({} x {})",
            max_delay + 1,
            max_doppler + 1,
            grid.m,
            grid.n
        )));
    }
    if num_pilots + num_data > mn {
        return Err(DfrcError::Geometry(format!(
            "{num_pilots} pilots + {num_data} data cells exceed the {mn}-cell grid"
        )));
    }
    let pilots: Vec<usize> = (0..num_pilots).collect();
    let pilot_spread: BTreeSet<usize> = spread_cells(&grid, &pilots, max_delay, max_doppler).into_iter().collect();
    let mut data = Vec::with_capacity(num_data);
    for idx in num_pilots..mn {
        if data.len() == num_data {
            break;
        }
        if spread_cells(&grid, &[idx], max_delay, max_doppler)
            .iter()
            .all(|c| !pilot_spread.contains(c))
        {
            data.push(idx);
        }
    }
    if data.len() < num_data {
        let pilot_cols = num_pilots.div_ceil(grid.m);
        return Err(DfrcError::Geometry(format!(
            "only {} of {num_data} data cells fit: the guard spans {} Doppler columns beyond {} pilot column(s) on a {}-column grid",
            data.len(),
            max_doppler,
            pilot_cols,
            grid.n
        )));
    }
    Placement::with_spread_rx(grid, pilots, data, max_delay, max_doppler)
}

/// Placement plus the named pattern's initial pilot values.
pub fn generate_pattern(
    kind: &str,
    grid: GridConfig,
    num_pilots: usize,
    num_data: usize,
    max_delay: usize,
    max_doppler: usize,
) -> Result<(Placement, CVec)> {
    let registry = pilot_patterns();
    let pattern = registry.get(kind)?;
    let placement = generate_placement(grid, num_pilots, num_data, max_delay, max_doppler)?;
    let pilots = pattern.pilots(&placement);
    Ok((placement, pilots))
}
