//! Central finite-difference oracle for network gradients.

use mpnet::nn::{self, stack_specs, Mlp, Mode};
use mpnet::RngStream;
use ndarray::Array2;
use rand::Rng;

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Below `ABS_FLOOR * max(1, |loss|)` the comparison becomes absolute: central
/// differences at `H` carry about `1e-10 * |loss|` of round-off.
pub const ABS_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = ABS_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_batch(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Random biases and slopes keep pre-activations of deep stacks well away from the
/// PReLU kink, where a step of `H` would otherwise straddle it.
fn generic_point(net: &mut Mlp, rng: &mut RngStream) {
    for l in &mut net.layers {
        l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        l.slope = rng.gen_range(0.1..0.4);
    }
}

fn perturb(net: &mut Mlp, index: usize, delta: f64) {
    *net.params_mut().nth(index).expect("index in range") += delta;
}

/// Planner loss: MSE of a dropout-active forward pass, masks replayed from `mask_seed`.
fn pnet_loss(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>, mask_seed: u64) -> f64 {
    let (out, _) = net
        .forward(x.view(), Mode::Train, &mut RngStream::new(mask_seed))
        .unwrap();
    nn::mse_loss(out.view(), y.view(), x.nrows()).unwrap()
}

/// Largest relative error between analytic and numeric gradients of the planner loss.
pub fn pnet_gradient_error(depth: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let hidden = vec![6; depth - 1];
    let mut net = Mlp::new(stack_specs(5, &hidden, 3, 0.2), &mut rng).unwrap();
    generic_point(&mut net, &mut rng);
    let x = random_batch(4, 5, &mut rng);
    let y = random_batch(4, 3, &mut rng);
    let mask_seed = seed.wrapping_add(1000);

    let (out, cache) = net
        .forward(x.view(), Mode::Train, &mut RngStream::new(mask_seed))
        .unwrap();
    let g_out = nn::mse_grad(out.view(), y.view(), x.nrows());
    let (grads, _) = net.backward(&cache, g_out.view()).unwrap();
    let analytic: Vec<f64> = grads.params().copied().collect();
    let loss = pnet_loss(&net, &x, &y, mask_seed);

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = net.clone();
        perturb(&mut plus, i, H);
        let mut minus = net.clone();
        perturb(&mut minus, i, -H);
        let numeric =
            (pnet_loss(&plus, &x, &y, mask_seed) - pnet_loss(&minus, &x, &y, mask_seed)) / (2.0 * H);
        worst = worst.max(rel_err(*a, numeric, loss));
    }
    worst
}

fn cae_loss_of(enc: &Mlp, dec: &Mlp, x: &Array2<f64>, lambda: f64) -> f64 {
    let mut r = RngStream::new(0);
    let (z, _) = enc.forward(x.view(), Mode::Train, &mut r).unwrap();
    let (xhat, _) = dec.forward(z.view(), Mode::Train, &mut r).unwrap();
    nn::cae_loss(x.view(), xhat.view(), enc, lambda, x.nrows()).unwrap()
}

/// Largest relative error for the reconstruction-plus-penalty loss over encoder and decoder.
pub fn cae_gradient_error(depth: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let lambda = 0.05;
    let enc_hidden = vec![7; depth - 1];
    let mut enc = Mlp::new(stack_specs(8, &enc_hidden, 3, 0.0), &mut rng).unwrap();
    let mut dec = Mlp::new(stack_specs(3, &enc_hidden, 8, 0.0), &mut rng).unwrap();
    generic_point(&mut enc, &mut rng);
    generic_point(&mut dec, &mut rng);
    let x = random_batch(3, 8, &mut rng);

    let mut r = RngStream::new(0);
    let (z, enc_cache) = enc.forward(x.view(), Mode::Train, &mut r).unwrap();
    let (xhat, dec_cache) = dec.forward(z.view(), Mode::Train, &mut r).unwrap();
    let g_out = nn::mse_grad(xhat.view(), x.view(), x.nrows());
    let (dec_grads, g_latent) = dec.backward(&dec_cache, g_out.view()).unwrap();
    let (mut enc_grads, _) = enc.backward(&enc_cache, g_latent.view()).unwrap();
    nn::add_weight_penalty_grad(&mut enc_grads, &enc, lambda);
    let loss = cae_loss_of(&enc, &dec, &x, lambda);

    let mut worst: f64 = 0.0;
    for (i, a) in enc_grads.params().enumerate() {
        let mut plus = enc.clone();
        perturb(&mut plus, i, H);
        let mut minus = enc.clone();
        perturb(&mut minus, i, -H);
        let numeric = (cae_loss_of(&plus, &dec, &x, lambda) - cae_loss_of(&minus, &dec, &x, lambda))
            / (2.0 * H);
        worst = worst.max(rel_err(*a, numeric, loss));
    }
    for (i, a) in dec_grads.params().enumerate() {
        let mut plus = dec.clone();
        perturb(&mut plus, i, H);
        let mut minus = dec.clone();
        perturb(&mut minus, i, -H);
        let numeric = (cae_loss_of(&enc, &plus, &x, lambda) - cae_loss_of(&enc, &minus, &x, lambda))
            / (2.0 * H);
        worst = worst.max(rel_err(*a, numeric, loss));
    }
    worst
}
