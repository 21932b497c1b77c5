//! Rough forward/backward throughput of a backbone on random input.
//!
//! `cargo run --release -p wastewise-core --example throughput -- mobilenet_v2 8`

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wastewise_core::backbone;
use wastewise_core::nn::{Mode, Tensor};

fn main() {
    let mut args = std::env::args().skip(1);
    let id = args.next().unwrap_or_else(|| "mobilenet_v2".into());
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(8);
    let entry = backbone::lookup(&id).expect("registered backbone");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut g, _) = backbone::build::<f32>(entry, &mut rng);
    let shape = entry.input_shape();
    let x = Tensor::from_vec(n, shape, (0..n * shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect());

    let t = Instant::now();
    let y = g.infer(x.clone());
    println!("{id}: infer x{n}: {:?} ({:?})", t.elapsed(), y.shape);

    let t = Instant::now();
    let trace = g.forward(x, Mode::Train(&mut rng));
    let fwd = t.elapsed();
    let grad = Tensor::from_vec(n, g.output_shape(), vec![1e-3; n * g.output_shape().len()]);
    let t = Instant::now();
    g.backward(trace, grad, 1);
    println!("{id}: train forward x{n}: {fwd:?}, backward: {:?}", t.elapsed());
}
