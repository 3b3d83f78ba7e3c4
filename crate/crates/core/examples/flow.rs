//! Integrates a smooth velocity field and checks what the regression relies
//! on: inverse consistency, Jacobian bookkeeping and mass conservation.

use gdr::density::{self, Action};
use gdr::flow::{FlowState, TimeGrid};
use gdr::grid::{self, GridGeometry, ScalarGrid, VectorGrid};
use gdr::kernel::MomentumField;

fn main() -> gdr::Result<()> {
    let g = GridGeometry::isotropic(&[64, 64], 1.0)?;
    let img = ScalarGrid::from_fn(g, |p| {
        let r = ((p[0] - 32.0).powi(2) + (p[1] - 30.0).powi(2)).sqrt();
        if r < 12.0 {
            1.0 + (std::f64::consts::PI * r / 12.0).cos()
        } else {
            0.0
        }
    });

    for k in [5, 10, 20] {
        let tg = TimeGrid::uniform(2, k)?;
        let mut w = MomentumField::zeros(g, tg.points());
        for x in w.w.iter_mut() {
            *x = VectorGrid::from_fn(g, |p| {
                let b = 4.0 * (-((p[0] - 32.0).powi(2) + (p[1] - 32.0).powi(2)) / 300.0).exp();
                vec![b, -0.5 * b]
            });
        }
        let v = w.w.clone();
        let flow = FlowState::solve(tg.clone(), w, v)?;
        let end = tg.points() - 1;

        let round_trip = grid::compose(&flow.phi[end], &flow.phi_inv[end])?;
        let warped = density::act(Action::Density, &img, &flow, end)?;
        println!(
            "k = {k:2}: |phi o phi^-1 - id| = {:.4} voxel, det range [{:.3}, {:.3}], mass change {:+.4}%",
            round_trip.max_norm(),
            flow.jac_inv[end].min(),
            flow.jac_inv[end].max(),
            100.0 * (warped.integral() / img.integral() - 1.0)
        );
    }
    Ok(())
}
