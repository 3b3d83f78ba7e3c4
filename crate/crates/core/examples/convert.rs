//! Writes a phantom phase as a volume, converts it to HU and exports a
//! windowed slice for viewing.

use gdr::density;
use gdr::io::{self, Window};
use gdr::phantom::{Phantom, PhantomSpec};

fn main() -> gdr::Result<()> {
    let dir = tempfile_dir();
    let p = Phantom::generate(&PhantomSpec { dims: vec![64, 64], spacing_mm: 3.75, ..PhantomSpec::default() })?;
    let density_path = dir.join("phase0.vol");
    io::write_scalar(&density_path, &p.series.images()[0])?;

    let hu = density::density_to_hu(&io::read_scalar(&density_path)?);
    io::write_scalar(&dir.join("phase0_hu.vol"), &hu)?;
    let header = io::volume::read_header(&density_path)?;
    println!("{}", header.render().trim_end());

    let lung_window = Window::new(-1000.0, 200.0)?;
    io::export_slice(&hu, 2, 0, Some(lung_window), &dir.join("phase0.pgm"))?;
    let pgm = io::read_pgm(&dir.join("phase0.pgm"))?;
    println!("exported {}x{} slice with window {:?} to {}", pgm.width, pgm.height, pgm.window, dir.display());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("gdr-convert-example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    dir
}
