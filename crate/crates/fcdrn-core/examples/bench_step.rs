use fcdrn_core::blocks::Fwd;
use fcdrn_core::builder::{build, BuildConfig, VariantFamily};
use fcdrn_core::data::{generate_synthetic, SyntheticSpec};
use fcdrn_core::tensor::ops::{self, Target};
use fcdrn_core::tensor::Tape;
use fcdrn_core::train::{assemble_batch, RmsProp};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn main() {
    let mut cfg = BuildConfig::with_family(VariantFamily::P);
    cfg.scale = 0.25;
    cfg.set_blocks_per_stage(3);
    cfg.classes = 5;
    let model = build::<f32>(&cfg, 1).unwrap();
    let spec = SyntheticSpec { count: 8, canvas: 56, ..Default::default() };
    let set = generate_synthetic(&spec).unwrap();
    let refs: Vec<_> = set.iter().collect();
    let (x, labels) = assemble_batch::<f32>(&refs).unwrap();
    let params = model.trainable_params();
    let mut opt = RmsProp::<f32>::new(0.9, 1e-8, 1e-4);
    let mut rng = ChaCha20Rng::seed_from_u64(0);

    // forward only (eval)
    let t0 = Instant::now();
    for _ in 0..3 { model.forward_eval(&x).unwrap(); }
    println!("eval fwd batch8 56px: {:.3}s", t0.elapsed().as_secs_f64() / 3.0);

    // train step
    let t0 = Instant::now();
    for _ in 0..3 {
        let tape = Tape::new();
        let mut cx = Fwd::new(Some(&tape), true, &mut rng);
        let logits = model.forward(&mut cx, &x).unwrap();
        let loss = ops::softmax_cross_entropy(Some(&tape), &logits, Target::Hard { labels: &labels, void: None }).unwrap();
        model.zero_grads();
        tape.backward(&loss).unwrap();
        opt.step(&params, 1e-3).unwrap();
    }
    println!("train step batch8 56px: {:.3}s", t0.elapsed().as_secs_f64() / 3.0);

    // eval single 64px
    let spec = SyntheticSpec { count: 1, canvas: 64, ..Default::default() };
    let set = generate_synthetic(&spec).unwrap();
    let (x1, _) = assemble_batch::<f32>(&[&set[0]]).unwrap();
    let t0 = Instant::now();
    for _ in 0..3 { model.forward_eval(&x1).unwrap(); }
    println!("eval fwd batch1 64px: {:.3}s", t0.elapsed().as_secs_f64() / 3.0);
}
