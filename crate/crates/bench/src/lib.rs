//! Shared inputs for the criterion benches.

use volt_core::laxnet::Tensor4;
use volt_core::voxgrid::derive_stream;
use volt_core::{Grid, Volume};

pub fn random_volume(nx: usize, ny: usize, nz: usize, seed: u64) -> Volume {
    let g = Grid::new(nx, ny, nz, 0.1, 0.1, 0.2).expect("positive dims");
    let mut s = derive_stream(seed, "bench", 0);
    Volume::from_fn(g, |_, _, _| s.next_f64())
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f32> {
    let n: usize = shape.iter().product();
    let mut s = derive_stream(seed, "bench", 1);
    Tensor4::from_vec(shape, (0..n).map(|_| s.uniform(-0.5, 0.5) as f32).collect()).expect("sized")
}
