//! A reduced dropout sweep: a few levels, one repeat, both modes.

use gdr::experiment::{dropout_sweep, sweep_means, SweepOptions};
use gdr::phantom::{Phantom, PhantomSpec};
use gdr::regression::RegressionConfig;

fn main() -> gdr::Result<()> {
    let p = Phantom::generate(&PhantomSpec::default())?;
    let opts = SweepOptions { levels: vec![0.0, 0.2, 0.4], repeats: 1, ..SweepOptions::default() };
    let rows = dropout_sweep(&p.series, &p.truth, &RegressionConfig::preset("desk-2d")?, &opts)?;
    println!("mode  dropout  jacobian error");
    for (mode, level, mean) in sweep_means(&rows) {
        println!("{:4}  {level:6.0}%  {mean:.4}", format!("{mode:?}"));
    }
    Ok(())
}
