//! Generates a breathing phantom, writes it to disk and prints a summary of
//! its ground truth.
//!
//! ```text
//! cargo run --example phantom -- /tmp/phantom
//! ```

use std::path::PathBuf;

use gdr::io;
use gdr::phantom::{Phantom, PhantomSpec};

fn main() -> gdr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "phantom-out".into()));
    std::fs::create_dir_all(&out).expect("output directory is writable");

    let spec = PhantomSpec { landmarks: 10, ..PhantomSpec::default() };
    let p = Phantom::generate(&spec)?;
    io::write_series(&out, &p.series)?;
    io::write_truth(&out, &p.truth, Some(&spec))?;

    println!("{} phases on a {:?} grid, written to {}", p.series.len(), spec.dims, out.display());
    for (i, (img, jac)) in p.series.images().iter().zip(&p.truth.jacobians).enumerate() {
        println!(
            "phase {i}: diaphragm {:6.1} mm  mass {:9.1}  det range [{:.3}, {:.3}]",
            p.diaphragm_mm(i),
            img.integral(),
            jac.min(),
            jac.max()
        );
    }
    Ok(())
}
