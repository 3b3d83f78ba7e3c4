//! Fits GDR and GIR to a clean phantom and compares the recovered lung
//! Jacobians with the truth.

use std::time::Instant;

use gdr::experiment::mean_lung_jacobian_error;
use gdr::phantom::{Phantom, PhantomSpec};
use gdr::regression::{run_multiresolution, Mode, RegressionConfig};

fn main() -> gdr::Result<()> {
    let p = Phantom::generate(&PhantomSpec::default())?;
    for mode in [Mode::Gdr, Mode::Gir] {
        let cfg = RegressionConfig { mode, ..RegressionConfig::preset("desk-2d")? };
        let start = Instant::now();
        let r = run_multiresolution(&p.series, &cfg)?;
        let err = mean_lung_jacobian_error(&r.jacobians, &p.truth)?;
        let level = r.levels.last().expect("at least one level");
        println!(
            "{mode:?}: lung Jacobian error {err:.4}, {} iterations ({:?}), cost {:.3e}, {:.1}s",
            level.iterations,
            level.termination,
            r.final_cost.total,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
