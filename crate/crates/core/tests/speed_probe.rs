//! Ad-hoc throughput probe used to pick reduced-scale test configurations.
//! Ignored by default; run with `cargo test --test speed_probe -- --ignored`.

use std::time::Instant;

use ndarray::Array;
use pixveil::data::one_hot_matrix;
use pixveil::models::{FeatureSpec, ResNet, ResNetConfig, UNet, UNetConfig};
use pixveil::training::joint_step;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe(base_h: usize, base_psi: usize, batch: usize) {
    let h_cfg = UNetConfig {
        base_width: base_h,
        depth: 2,
        ..Default::default()
    };
    let psi_cfg = ResNetConfig {
        base_width: base_psi,
        blocks_per_stage: 1,
        num_classes: 10,
        ..Default::default()
    };
    let mut h: UNet<f32> = UNet::build(&h_cfg, 1).unwrap();
    let mut psi: ResNet<f32> = ResNet::build(&psi_cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array::from_shape_simple_fn((batch, 3, 32, 32), || rng.gen::<f32>());
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let targets = one_hot_matrix::<f32>(&labels, 10).unwrap();

    // warmup
    joint_step(&mut h, &mut psi, FeatureSpec::ClassifierStage { stage: 2 }, &x, &targets, 0.005, true, true).unwrap();
    let n = 6;
    let t0 = Instant::now();
    for _ in 0..n {
        joint_step(&mut h, &mut psi, FeatureSpec::ClassifierStage { stage: 2 }, &x, &targets, 0.005, true, true).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    let steps_per_epoch = (5000 + batch - 1) / batch;
    println!(
        "h w{base_h} / psi w{base_psi} batch {batch}: {:.3} s/step -> {:.1} s/epoch(5k), {:.1} min for 2x20 epochs",
        dt,
        dt * steps_per_epoch as f64,
        2.0 * 20.0 * dt * steps_per_epoch as f64 / 60.0
    );
}

#[test]
#[ignore = "manual sizing probe"]
fn step_timings() {
    probe(4, 4, 128);
    probe(6, 6, 128);
    probe(8, 8, 128);
}

#[test]
#[ignore = "manual component timings"]
fn component_timings() {
    use pixveil::models::Mode;
    let h_cfg = UNetConfig { base_width: 4, depth: 2, ..Default::default() };
    let psi_cfg = ResNetConfig { base_width: 4, blocks_per_stage: 1, num_classes: 10, ..Default::default() };
    let mut h: UNet<f32> = UNet::build(&h_cfg, 1).unwrap();
    let mut psi: ResNet<f32> = ResNet::build(&psi_cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array::from_shape_simple_fn((128, 3, 32, 32), || rng.gen::<f32>());

    let t = Instant::now();
    let n = 10;
    let mut xh = x.clone();
    for _ in 0..n { xh = h.forward(&x, Mode::Train).unwrap(); }
    println!("h.forward:    {:.4} s", t.elapsed().as_secs_f64() / n as f64);

    let t = Instant::now();
    for _ in 0..n { let _ = h.backward(&xh, false); }
    println!("h.backward:   {:.4} s", t.elapsed().as_secs_f64() / n as f64);

    let t = Instant::now();
    let mut logits = None;
    for _ in 0..n { logits = Some(psi.forward(&xh, Mode::Train).unwrap()); }
    println!("psi.forward:  {:.4} s", t.elapsed().as_secs_f64() / n as f64);
    let logits = logits.unwrap();

    let t = Instant::now();
    for _ in 0..n { let _ = psi.backward(&logits, false); }
    println!("psi.backward: {:.4} s", t.elapsed().as_secs_f64() / n as f64);

    let t = Instant::now();
    for _ in 0..n { let _ = psi.infer_prefix(&x, 2).unwrap(); }
    println!("phi prefix:   {:.4} s", t.elapsed().as_secs_f64() / n as f64);
}
