use ndarray::Array4;
use patchinv_core::nn::conv::Conv2d;
use patchinv_core::nn::layers::*;
use patchinv_core::nn::InstanceNorm;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn timeit<F: FnMut()>(name: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{name}: {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    // mix0-like: conv 8->8 @64x64, batch 8
    let conv = Conv2d::<f32>::new(8, 8, 3, 1, 1);
    let x = Array4::<f32>::from_shape_fn((8, 8, 64, 64), |_| rng.random_range(-1.0..1.0f32));
    timeit("conv 8->8 @64 fwd", 20, || { let _ = conv.forward(&x); });
    let mut conv2 = Conv2d::<f32>::new(8, 8, 3, 1, 1);
    let dy = x.clone();
    timeit("conv 8->8 @64 bwd", 10, || { conv2.zero_grads(); let _ = conv2.backward(&x, &dy); });
    // deeper: conv 64->64 @8x8
    let convd = Conv2d::<f32>::new(64, 64, 3, 1, 1);
    let xd = Array4::<f32>::from_shape_fn((8, 64, 8, 8), |_| rng.random_range(-1.0..1.0f32));
    timeit("conv 64->64 @8 fwd", 20, || { let _ = convd.forward(&xd); });
    // instance norm @64x64 c8
    let inorm = InstanceNorm::<f32>::new(8);
    timeit("instnorm c8 @64 fwd", 20, || { let _ = inorm.forward(&x); });
    let mut inorm2 = InstanceNorm::<f32>::new(8);
    timeit("instnorm c8 @64 bwd", 20, || { let _ = inorm2.backward(&x, &dy); });
    // upsample 32->64 c8
    let xu = Array4::<f32>::from_shape_fn((8, 8, 32, 32), |_| rng.random_range(-1.0..1.0f32));
    timeit("upsample2x c8 32->64", 20, || { let _ = upsample2x(&xu); });
    timeit("upsample2x bwd", 20, || { let _ = upsample2x_backward(&x); });
    let lr = LeakyRelu::new(0.2);
    timeit("lrelu @64 c8", 50, || { let _ = lr.forward(&x); });
    timeit("lrelu masked", 50, || { let _ = lr.masked(&x, &dy); });
    timeit("tanh fwd", 50, || { let _ = tanh_forward(&x); });
    timeit("concat c8+c8", 50, || { let _ = concat_channels(&x, &dy); });
}
