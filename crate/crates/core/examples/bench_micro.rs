use ndarray::Array4;
use patchinv_core::data_model::make_synthetic_dataset;
use patchinv_core::losses::*;
use patchinv_core::networks::*;
use patchinv_core::nn::ParamSet;
use patchinv_core::patch_ops::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn timeit<F: FnMut()>(name: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{name}: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let d = 64;
    let b = 8;
    let gw = 8;
    let gen = UNetGenerator::<f32>::new(GeneratorSpec::new(d, 1, 1, gw).unwrap(), &mut rng).unwrap();
    let mut gen2 = UNetGenerator::<f32>::new(GeneratorSpec::new(d, 1, 1, gw).unwrap(), &mut rng).unwrap();
    let mut critic = ConvCritic::<f32>::new(CriticSpec::new(d, 1, gw).unwrap(), &mut rng).unwrap();
    let x = Array4::<f32>::from_shape_fn((b, 1, d, d), |_| rng.random_range(-1.0..1.0f32));
    let y = Array4::<f32>::from_shape_fn((b, 1, d, d), |_| rng.random_range(-1.0..1.0f32));
    let cfgs: Vec<_> = (0..b).map(|_| sample_patch_config(&mut rng, d)).collect();
    let eps: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();

    timeit("gen forward (inference) batch8", 5, || {
        let _ = gen.forward(&x);
    });
    timeit("gen forward_cached batch8", 5, || {
        let _ = gen.forward_cached(&x);
    });
    let (_, cache) = gen.forward_cached(&x);
    let dimg = x.clone();
    let dsig = x.clone();
    timeit("gen backward batch8", 5, || {
        gen2.zero_grads();
        gen2.backward(&cache, &dimg, &dsig);
    });
    timeit("critic forward batch8", 10, || {
        let _ = critic.forward(&y);
    });
    let (_, ccache) = critic.forward_cached(&y);
    timeit("critic backward_params batch8", 10, || {
        critic.zero_grads();
        let seed = ndarray::Array1::ones(b);
        critic.backward_params(&ccache, &seed);
    });
    timeit("critic input_grad batch8", 10, || {
        let seed = ndarray::Array1::ones(b);
        let _ = critic.backward_input(&ccache, &seed);
    });
    timeit("patch batch8", 10, || {
        let _ = apply_patch_batch(&cfgs, &x);
    });
    timeit("critic_risk_backward", 3, || {
        critic.zero_grads();
        let _ = critic_risk_backward(&mut critic, &gen, &y, &x, 10.0, &cfgs, &eps, &Default::default()).unwrap();
    });
    timeit("generator_risk_backward", 3, || {
        gen2.zero_grads();
        let _ = generator_risk_backward(&mut gen2, &critic, &x, &cfgs, 10.0, PatchMode::UAPI, &Default::default()).unwrap();
    });
    let data = make_synthetic_dataset(7, 64, 64).unwrap();
    let _ = data;
}
