//! Tracks landmarks through a regression on a series with 5% slab dropout.

use gdr::metrics::mean_landmark_error;
use gdr::phantom::{apply_dropout, make_dropout_masks, propagate_landmarks, Phantom, PhantomSpec};
use gdr::regression::{run_multiresolution, Mode, RegressionConfig};

fn main() -> gdr::Result<()> {
    let p = Phantom::generate(&PhantomSpec { landmarks: 20, ..PhantomSpec::default() })?;
    let series = apply_dropout(&p.series, make_dropout_masks(&p.series, 0.05, 12.0, 0)?)?;
    let lm = p.truth.landmarks.as_ref().expect("landmarks requested");
    println!("before registration: {:.2} mm", mean_landmark_error(&lm.points, &lm.truth)?);

    for mode in [Mode::Gdr, Mode::Gir] {
        let r = run_multiresolution(&series, &RegressionConfig { mode, ..RegressionConfig::preset("desk-2d")? })?;
        let inverse = &r.flow.phi_inv[r.flow.time_grid.obs_index(lm.phase)];
        let moved = propagate_landmarks(&lm.points, inverse);
        println!("after {mode:?}: {:.2} mm", mean_landmark_error(&moved, &lm.truth)?);
    }
    Ok(())
}
