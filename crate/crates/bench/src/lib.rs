//! Fixtures shared by the benchmarks.

use stoflow_core::ou::OuModel;
use stoflow_core::volume::{AaBox, CompactRegion, GridRule, QuadratureGrid};
use stoflow_core::DiffusionModel;

pub fn ou(dim: usize) -> DiffusionModel {
    OuModel::new(dim).expect("dimension >= 2").model()
}

/// Midpoint grid with `per_axis²` nodes on the unit square.
pub fn unit_square_grid(per_axis: usize) -> QuadratureGrid {
    let region = CompactRegion::new(vec![AaBox::unit(2)]).expect("unit box");
    QuadratureGrid::new(&region, GridRule::Midpoint { per_axis }).expect("grid")
}
