use std::time::Instant;

use sk_unet::network::{Adam, Model, ModelConfig};
use sk_unet::{Float, Tensor};

fn main() {
    let size: usize = std::env::args().nth(1).map_or(96, |s| s.parse().unwrap());
    let cfg = ModelConfig { base_width: 8, depth: 4, ..ModelConfig::default() };
    let mut m = Model::build(&cfg).unwrap();
    println!("params {}", m.params.num_scalars());
    let x = Tensor::from_fn(&[4, 3, size, size], |i| ((i * 31) % 17) as Float / 17.0);
    let labels: Vec<u8> = (0..4 * size * size).map(|i| (i % 4) as u8).collect();
    let mut adam = Adam::new(1e-3, &m.params);
    for _ in 0..5 {
        let t = Instant::now();
        let mut tape = sk_unet::Tape::new();
        let p = m.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let lg = m.forward(&mut tape, &p, xv).unwrap();
        let t_f = t.elapsed();
        let l = sk_unet::network::segmentation_loss(&mut tape, lg, &labels, &[1.0; 4]).unwrap();
        tape.backward(l).unwrap();
        let g: Vec<_> = p.iter().map(|v| tape.grad_data(*v)).collect();
        adam.step(&mut m.params, &g);
        println!("fwd {:?} total {:?}", t_f, t.elapsed());
    }
}
