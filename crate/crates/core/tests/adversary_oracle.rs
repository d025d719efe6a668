mod common;

use common::{dense_loop, lrelu, rel_err, rng};
use proptest::prelude::*;
use rand::Rng;
use stylefield::adversary::{
    d_loss_var, gan_f, gan_losses, nerf_path_loss, nerf_path_loss_values, r1_penalty, Conv3, Discriminator,
    DiscriminatorConfig, D_FINAL,
};
use stylefield::camera::aligned_index_map;
use stylefield::params::{Ctx, Group, ParamStore};
use stylefield::tape::Mat;

fn small_d(target: usize, seed: u64) -> (ParamStore, Discriminator) {
    let cfg = DiscriminatorConfig {
        base_resolution: 4,
        target_resolution: target,
        channel_base: 64,
        channel_max: 6,
    };
    let mut store = ParamStore::new();
    let d = Discriminator::build(&mut store, &cfg, &mut rng(seed)).unwrap();
    // Nonzero biases everywhere so the oracle exercises them.
    let mut r = rng(seed + 100);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.param(id).name.ends_with(".bias") {
            store.get_mut(id).mapv_inplace(|_| r.random_range(-0.3..0.3));
        }
    }
    (store, d)
}

fn image(res: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    Mat::from_shape_simple_fn((res * res, 3), || r.random_range(-1.0..1.0))
}

/// Zero-padded 3×3 convolution, pixel-major, with nested loops.
fn conv_loop(store: &ParamStore, conv: &Conv3, x: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let w = store.get(conv.weight);
    let b = store.get(conv.bias);
    let (cout, cin) = (w.nrows(), x[0].len());
    let g = 1.0 / (conv.fan_in as f64).sqrt();
    let mut out = vec![vec![0.0; cout]; n * n];
    for y in 0..n {
        for xx in 0..n {
            for o in 0..cout {
                let mut acc = b[[0, o]];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= n as isize || sx >= n as isize {
                            continue;
                        }
                        let src = &x[sy as usize * n + sx as usize];
                        for c in 0..cin {
                            acc += w[[o, (ky * 3 + kx) * cin + c]] * g * src[c];
                        }
                    }
                }
                out[y * n + xx][o] = acc;
            }
        }
    }
    out
}

fn pool_loop(x: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let m = n / 2;
    let c = x[0].len();
    (0..m * m)
        .map(|p| {
            let (xx, y) = (p % m, p / m);
            (0..c)
                .map(|ch| {
                    0.25 * (x[(2 * y) * n + 2 * xx][ch]
                        + x[(2 * y) * n + 2 * xx + 1][ch]
                        + x[(2 * y + 1) * n + 2 * xx][ch]
                        + x[(2 * y + 1) * n + 2 * xx + 1][ch])
                })
                .collect()
        })
        .collect()
}

fn d_loop(store: &ParamStore, d: &Discriminator, img: &Mat, res: usize) -> f64 {
    let rgb = &d.from_rgb.iter().find(|(r, _)| *r == res).unwrap().1;
    let mut x: Vec<Vec<f64>> = (0..res * res)
        .map(|p| {
            dense_loop(store.get(rgb.weight), store.get(rgb.bias), &img.row(p).to_vec())
                .into_iter()
                .map(lrelu)
                .collect()
        })
        .collect();
    let mut n = res;
    while n > D_FINAL {
        let b = d.blocks.iter().find(|b| b.resolution == n).unwrap();
        let y: Vec<Vec<f64>> = conv_loop(store, &b.conv0, &x, n)
            .into_iter()
            .map(|v| v.into_iter().map(lrelu).collect())
            .collect();
        let y: Vec<Vec<f64>> = conv_loop(store, &b.conv1, &y, n)
            .into_iter()
            .map(|v| v.into_iter().map(lrelu).collect())
            .collect();
        x = pool_loop(&y, n);
        n /= 2;
    }
    let flat: Vec<f64> = x.into_iter().flatten().collect();
    let h: Vec<f64> = dense_loop(store.get(d.fc.weight), store.get(d.fc.bias), &flat)
        .into_iter()
        .map(lrelu)
        .collect();
    dense_loop(store.get(d.out.weight), store.get(d.out.bias), &h)[0]
}

#[test]
fn discriminator_matches_loop_oracle() {
    // 16 → 8 → 4: three resolution levels.
    let (store, d) = small_d(16, 1);
    for seed in 0..3 {
        let img = image(16, seed);
        let s = d.discriminate(&store, &img, 16).unwrap();
        assert!((s - d_loop(&store, &d, &img, 16)).abs() < 1e-5);
    }
    let img = image(8, 9);
    assert!((d.discriminate(&store, &img, 8).unwrap() - d_loop(&store, &d, &img, 8)).abs() < 1e-5);
}

#[test]
fn f_slope_at_zero_matches_finite_differences() {
    let h = 1e-5;
    let fd = (gan_f(h) - gan_f(-h)) / (2.0 * h);
    assert!(rel_err(fd, 0.5, 1e-12) < 1e-6);
}

/// Affine discriminator: nonnegative weights and large positive biases keep
/// every activation in its linear region for inputs in `[0, 1]`.
fn linear_d() -> (ParamStore, Discriminator) {
    let (mut store, d) = small_d(8, 3);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let bias = store.param(id).name.ends_with(".bias");
        store
            .get_mut(id)
            .mapv_inplace(|v| if bias { 5.0 } else { v.abs() });
    }
    (store, d)
}

#[test]
fn r1_of_linear_discriminator_is_gamma_times_squared_coefficients() {
    let (store, d) = linear_d();
    let res = 8;
    let gamma = 0.5;
    let mut r = rng(4);
    let real = Mat::from_shape_simple_fn((res * res, 3), || r.random_range(0.0..1.0));
    let zero = Mat::zeros((res * res, 3));
    let d0 = d.discriminate(&store, &zero, res).unwrap();
    let mut norm2 = 0.0;
    for p in 0..res * res {
        for c in 0..3 {
            let mut e = zero.clone();
            e[[p, c]] = 1.0;
            let a = d.discriminate(&store, &e, res).unwrap() - d0;
            norm2 += a * a;
        }
    }
    let mut ctx = Ctx::new(&store);
    let v = ctx.tape.leaf(real);
    let (pen, _) = r1_penalty(&mut ctx, &d, v, res, 1.0, gamma).unwrap();
    assert!(rel_err(ctx.tape.scalar(pen), gamma * norm2, 1e-12) < 1e-9);
}

#[test]
fn r1_parameter_gradient_matches_finite_differences() {
    let (store, d) = small_d(8, 5);
    let res = 8;
    let real = image(res, 6);
    let penalty = |s: &ParamStore| -> f64 {
        let mut ctx = Ctx::new(s);
        let v = ctx.tape.leaf(real.clone());
        let (p, _) = r1_penalty(&mut ctx, &d, v, res, 1.0, 0.5).unwrap();
        ctx.tape.scalar(p)
    };
    let ids = store.ids_in(&[Group::Discriminator]);
    let mut ctx = Ctx::new(&store);
    let v = ctx.tape.leaf(real.clone());
    let (p, _) = r1_penalty(&mut ctx, &d, v, res, 1.0, 0.5).unwrap();
    let grads = ctx.param_grads(p, &ids);
    let mut r = rng(7);
    let (mut checked, mut bad) = (0, 0);
    for (id, g) in ids.iter().zip(&grads) {
        for _ in 0..3 {
            let k = r.random_range(0..g.len());
            let (i, j) = (k / g.ncols(), k % g.ncols());
            let h = 1e-5;
            let mut plus = store.clone();
            plus.get_mut(*id)[[i, j]] += h;
            let mut minus = store.clone();
            minus.get_mut(*id)[[i, j]] -= h;
            let fd = (penalty(&plus) - penalty(&minus)) / (2.0 * h);
            checked += 1;
            if rel_err(g[[i, j]], fd, 1e-6) >= 1e-3 {
                bad += 1;
            }
        }
    }
    assert_eq!(bad, 0, "{bad} of {checked} entries disagree");
}

#[test]
fn discriminator_step_lowers_its_loss_on_a_frozen_batch() {
    let (mut store, d) = small_d(8, 8);
    let batch: Vec<(Mat, Mat)> = (0..4).map(|k| (image(8, 20 + k), image(8, 40 + k))).collect();
    let loss = |s: &ParamStore| -> (f64, Vec<Mat>) {
        let ids = s.ids_in(&[Group::Discriminator]);
        let mut total = 0.0;
        let mut acc: Vec<Mat> = ids.iter().map(|id| Mat::zeros(s.get(*id).dim())).collect();
        for (fake, real) in &batch {
            let mut ctx = Ctx::new(s);
            let (f, r) = (ctx.tape.leaf(fake.clone()), ctx.tape.leaf(real.clone()));
            let sf = d.forward(&mut ctx, f, 8, 1.0).unwrap();
            let sr = d.forward(&mut ctx, r, 8, 1.0).unwrap();
            let l = d_loss_var(&mut ctx, sf, sr);
            total += ctx.tape.scalar(l);
            for (a, g) in acc.iter_mut().zip(ctx.param_grads(l, &ids)) {
                *a += &g;
            }
        }
        (total, acc)
    };
    let (before, grads) = loss(&store);
    let ids = store.ids_in(&[Group::Discriminator]);
    for (id, g) in ids.iter().zip(&grads) {
        store.get_mut(*id).scaled_add(-1e-3, g);
    }
    let (after, _) = loss(&store);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn nerf_path_loss_matches_loop_oracle() {
    let (low, high) = (4, 16);
    let approx = image(high, 11);
    let nerf = image(low, 12);
    let map = aligned_index_map(low, high, 4);
    let pixels = vec![0, 3, 5, 9, 15];
    let mut want = 0.0;
    for &p in &pixels {
        let (x, y) = (p % low, p / low);
        let hp = (4 * y) * high + 4 * x;
        for c in 0..3 {
            want += (approx[[hp, c]] - nerf[[p, c]]).powi(2);
        }
    }
    want /= pixels.len() as f64;
    let empty = ParamStore::new();
    let mut ctx = Ctx::new(&empty);
    let (a, n) = (ctx.tape.leaf(approx.clone()), ctx.tape.leaf(nerf.clone()));
    let v = nerf_path_loss(&mut ctx, a, n, &map, &pixels).unwrap();
    assert!((ctx.tape.scalar(v) - want).abs() < 1e-7);
    assert!((nerf_path_loss_values(&approx, &nerf, &map, &pixels).unwrap() - want).abs() < 1e-7);
    assert!(nerf_path_loss_values(&approx, &nerf, &map, &[]).is_err());
}

proptest! {
    #[test]
    fn losses_stay_finite_at_any_score(f in -1e6f64..1e6, r in -1e6f64..1e6) {
        let (g, d) = gan_losses(&[f], &[r]);
        prop_assert!(g.is_finite() && d.is_finite());
        prop_assert!(g >= 0.0 && d >= 0.0);
    }

    #[test]
    fn nerf_path_loss_is_nonnegative_and_zero_on_agreement(seed in 0u64..500) {
        let approx = image(8, seed);
        let map = aligned_index_map(4, 8, 2);
        let nerf = Mat::from_shape_fn((16, 3), |(p, c)| approx[[map[p], c]]);
        let pixels: Vec<usize> = (0..16).collect();
        prop_assert_eq!(nerf_path_loss_values(&approx, &nerf, &map, &pixels).unwrap(), 0.0);
        let other = image(4, seed + 1);
        prop_assert!(nerf_path_loss_values(&approx, &other, &map, &pixels).unwrap() > 0.0);
    }
}
