use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{build_dft_factor, dd_shift_with, GridConfig};
use crate::linalg::{CMat, C64};
use crate::{DfrcError, Result};

/// Pilot, data and receive index sets over the DD grid. Each list defines a
/// 0/1 column-selection matrix whose `k`-th column is the basis vector of the
/// `k`-th listed index. Cells in neither transmit list form the guard region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub grid: GridConfig,
    pub pilot_indices: Vec<usize>,
    pub data_indices: Vec<usize>,
    pub rx_pilot_indices: Vec<usize>,
    pub rx_data_indices: Vec<usize>,
}

impl Placement {
    pub fn new(
        grid: GridConfig,
        pilot_indices: Vec<usize>,
        data_indices: Vec<usize>,
        rx_pilot_indices: Vec<usize>,
        rx_data_indices: Vec<usize>,
    ) -> Result<Self> {
        let p = Placement {
            grid,
            pilot_indices,
            data_indices,
            rx_pilot_indices,
            rx_data_indices,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a placement whose receive sets are the delay-Doppler spreads of
    /// the transmit sets for a channel with maximum indices `(max_delay, max_doppler)`.
    pub fn with_spread_rx(
        grid: GridConfig,
        pilot_indices: Vec<usize>,
        data_indices: Vec<usize>,
        max_delay: usize,
        max_doppler: usize,
    ) -> Result<Self> {
        let rx_pilot = spread_cells(&grid, &pilot_indices, max_delay, max_doppler);
        let rx_data = spread_cells(&grid, &data_indices, max_delay, max_doppler);
        Self::new(grid, pilot_indices, data_indices, rx_pilot, rx_data)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let mn = self.grid.mn();
        for (name, list) in [
            ("pilot", &self.pilot_indices),
            ("data", &self.data_indices),
            ("rx_pilot", &self.rx_pilot_indices),
            ("rx_data", &self.rx_data_indices),
        ] {
            let mut seen = BTreeSet::new();
            for &i in list.iter() {
                if i >= mn {
                    return Err(DfrcError::InvalidPlacement(format!(
                        "{name} index {i} outside grid of {mn} cells"
                    )));
                }
                if !seen.insert(i) {
                    return Err(DfrcError::InvalidPlacement(format!("{name} index {i} repeated")));
                }
            }
        }
        let pilots: BTreeSet<_> = self.pilot_indices.iter().collect();
        if let Some(i) = self.data_indices.iter().find(|i| pilots.contains(i)) {
            return Err(DfrcError::InvalidPlacement(format!(
                "cell {i} is both pilot and data"
            )));
        }
        Ok(())
    }

    pub fn num_pilots(&self) -> usize {
        self.pilot_indices.len()
    }

    pub fn num_data(&self) -> usize {
        self.data_indices.len()
    }

    pub fn num_guard(&self) -> usize {
        self.grid.mn() - self.num_pilots() - self.num_data()
    }

    /// `K_p / (K_p + K_c)`.
    pub fn pilot_ratio(&self) -> f64 {
        let used = self.num_pilots() + self.num_data();
        if used == 0 {
            0.0
        } else {
            self.num_pilots() as f64 / used as f64
        }
    }

    /// Guard fraction of the grid, `(MN - K_p - K_c) / MN`.
    pub fn guard_ratio(&self) -> f64 {
        self.num_guard() as f64 / self.grid.mn() as f64
    }

    pub fn pilot_selection(&self) -> CMat {
        selection_matrix(self.grid.mn(), &self.pilot_indices)
    }

    pub fn data_selection(&self) -> CMat {
        selection_matrix(self.grid.mn(), &self.data_indices)
    }

    pub fn rx_pilot_selection(&self) -> CMat {
        selection_matrix(self.grid.mn(), &self.rx_pilot_indices)
    }

    pub fn rx_data_selection(&self) -> CMat {
        selection_matrix(self.grid.mn(), &self.rx_data_indices)
    }

    /// `x_DD = Φ_c x_c + Φ_p x_p`.
    pub fn assemble(&self, pilots: &[C64], data: &[C64]) -> Vec<C64> {
        assert_eq!(pilots.len(), self.num_pilots());
        assert_eq!(data.len(), self.num_data());
        let mut x = vec![C64::new(0.0, 0.0); self.grid.mn()];
        for (&i, &v) in self.pilot_indices.iter().zip(pilots) {
            x[i] = v;
        }
        for (&i, &v) in self.data_indices.iter().zip(data) {
            x[i] = v;
        }
        x
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("placement serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Placement = toml::from_str(text).map_err(|e| DfrcError::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

fn selection_matrix(mn: usize, indices: &[usize]) -> CMat {
    let mut s = CMat::zeros(mn, indices.len());
    for (col, &row) in indices.iter().enumerate() {
        s[(row, col)] = C64::new(1.0, 0.0);
    }
    s
}

/// Cells reached from `indices` by cyclic DD shifts `(0..=max_delay, 0..=max_doppler)`,
/// sorted ascending.
pub fn spread_cells(grid: &GridConfig, indices: &[usize], max_delay: usize, max_doppler: usize) -> Vec<usize> {
    let mut out = BTreeSet::new();
    for &idx in indices {
        let (r, c) = grid.cell(idx);
        for l in 0..=max_delay {
            for k in 0..=max_doppler {
                out.insert(grid.index((r + l) % grid.m, (c + k) % grid.n));
            }
        }
    }
    out.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// Pilot energy leaks into the data receive set (`Ψ_c^H T Φ_p ≠ 0`).
    PilotIntoData,
    /// Data energy leaks into the pilot receive set (`Ψ_p^H T Φ_c ≠ 0`).
    DataIntoPilot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuardViolation {
    pub delay: usize,
    pub doppler: usize,
    pub kind: ViolationKind,
    /// Row within the receive selection.
    pub row: usize,
    /// Column within the transmit selection.
    pub col: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GuardReport {
    pub violations: Vec<GuardViolation>,
}

impl GuardReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const LEAK_TOL: f64 = 1e-9;

/// Checks the guard-interval condition for every tap `(i, j)` with
/// `0 <= i <= max_delay`, `0 <= j <= max_doppler` by evaluating the
/// projected DD shift operators directly.
pub fn validate_guard(placement: &Placement, max_delay: usize, max_doppler: usize) -> GuardReport {
    let grid = &placement.grid;
    let f = build_dft_factor(grid);
    let phi_p = placement.pilot_selection();
    let phi_c = placement.data_selection();
    let psi_p = placement.rx_pilot_selection();
    let psi_c = placement.rx_data_selection();
    let mut report = GuardReport::default();
    for i in 0..=max_delay {
        for j in 0..=max_doppler {
            let t = dd_shift_with(grid, &f, i, j);
            let checks = [
                (ViolationKind::PilotIntoData, psi_c.adjoint() * &t * &phi_p),
                (ViolationKind::DataIntoPilot, psi_p.adjoint() * &t * &phi_c),
            ];
            for (kind, leak) in checks {
                for col in 0..leak.ncols() {
                    for row in 0..leak.nrows() {
                        if leak[(row, col)].norm() > LEAK_TOL {
                            report.violations.push(GuardViolation {
                                delay: i,
                                doppler: j,
                                kind,
                                row,
                                col,
                            });
                        }
                    }
                }
            }
        }
    }
    report
}
