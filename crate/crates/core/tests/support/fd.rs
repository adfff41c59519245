//! Central finite differences for gradient checks.

#![allow(dead_code)]

use canopyseg::net::layers::*;
use canopyseg::net::{backward_with_input, forward, init_model, NetConfig, NetParams, Tensor4};
use canopyseg::train::{focal_loss, FocalConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Relative error with an absolute floor: gradients that vanish analytically
/// (conv biases ahead of instance norm) show roundoff near 1e-10.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub const FLOOR: f64 = 1e-5;

pub fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every entry of `v`.
pub fn check(v: &mut Vec<f64>, analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        let keep = v[i];
        v[i] = keep + H;
        let up = loss(v);
        v[i] = keep - H;
        let down = loss(v);
        v[i] = keep;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

/// Returns `(name, worst error)` for each layer kernel.
pub fn layer_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (n, cin, cout, h, w) = (2, 3, 4, 6, 6);

    // conv3x3
    let mut x = random(&mut rng, n * cin * h * w);
    let mut wt = random(&mut rng, cout * cin * 9);
    let mut b = random(&mut rng, cout);
    let r = random(&mut rng, n * cout * h * w);
    let (_, cache) = conv3x3_forward(&Tensor4::from_vec([n, cin, h, w], x.clone()), &wt, &b);
    let (dx, dw, db) = conv3x3_backward(&cache, &wt, &Tensor4::from_vec([n, cout, h, w], r.clone()));
    let e1 = check(&mut x, &dx.data, |x| dot(&conv3x3_forward(&Tensor4::from_vec([n, cin, h, w], x.to_vec()), &wt, &b).0.data, &r));
    let xt = Tensor4::from_vec([n, cin, h, w], x.clone());
    let e2 = check(&mut wt, &dw, |wt| dot(&conv3x3_forward(&xt, wt, &b).0.data, &r));
    let e3 = check(&mut b, &db, |b| dot(&conv3x3_forward(&xt, &wt, b).0.data, &r));
    out.push(("conv3x3", e1.max(e2).max(e3)));

    // conv1x1
    let mut wt = random(&mut rng, cout * cin);
    let mut b = random(&mut rng, cout);
    let (dx, dw, db) = conv1x1_backward(&xt, &wt, &Tensor4::from_vec([n, cout, h, w], r.clone()));
    let e1 = check(&mut x, &dx.data, |x| dot(&conv1x1_forward(&Tensor4::from_vec([n, cin, h, w], x.to_vec()), &wt, &b).data, &r));
    let e2 = check(&mut wt, &dw, |wt| dot(&conv1x1_forward(&xt, wt, &b).data, &r));
    let e3 = check(&mut b, &db, |b| dot(&conv1x1_forward(&xt, &wt, b).data, &r));
    out.push(("conv1x1", e1.max(e2).max(e3)));

    // instance norm
    let mut scale = random(&mut rng, cin);
    let mut shift = random(&mut rng, cin);
    let rn = random(&mut rng, n * cin * h * w);
    let (_, cache) = instance_norm_forward(&xt, &scale, &shift, 1e-5);
    let (dx, ds, dt) = instance_norm_backward(&cache, &scale, &Tensor4::from_vec([n, cin, h, w], rn.clone()));
    let e1 = check(&mut x, &dx.data, |x| dot(&instance_norm_forward(&Tensor4::from_vec([n, cin, h, w], x.to_vec()), &scale, &shift, 1e-5).0.data, &rn));
    let e2 = check(&mut scale, &ds, |s| dot(&instance_norm_forward(&xt, s, &shift, 1e-5).0.data, &rn));
    let e3 = check(&mut shift, &dt, |t| dot(&instance_norm_forward(&xt, &scale, t, 1e-5).0.data, &rn));
    out.push(("instance_norm", e1.max(e2).max(e3)));

    // relu, away from the kink
    let mut xr: Vec<f64> = random(&mut rng, 64).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
    let rr = random(&mut rng, 64);
    let y = relu_forward(&Tensor4::from_vec([1, 1, 8, 8], xr.clone()));
    let dx = relu_backward(&y, &Tensor4::from_vec([1, 1, 8, 8], rr.clone()));
    out.push(("relu", check(&mut xr, &dx.data, |x| dot(&relu_forward(&Tensor4::from_vec([1, 1, 8, 8], x.to_vec())).data, &rr))));

    // maxpool on distinct values
    let mut xp: Vec<f64> = (0..n * cin * h * w).map(|i| ((i * 37) % 101) as f64 * 0.01 + rng.gen_range(0.0..0.001)).collect();
    let rp = random(&mut rng, n * cin * (h / 2) * (w / 2));
    let (_, arg) = maxpool_forward(&Tensor4::from_vec([n, cin, h, w], xp.clone()));
    let dx = maxpool_backward(&arg, [n, cin, h, w], &Tensor4::from_vec([n, cin, h / 2, w / 2], rp.clone()));
    out.push(("maxpool", check(&mut xp, &dx.data, |x| dot(&maxpool_forward(&Tensor4::from_vec([n, cin, h, w], x.to_vec())).0.data, &rp))));

    // transposed conv
    let mut wt = random(&mut rng, cin * cout * 4);
    let mut b = random(&mut rng, cout);
    let ru = random(&mut rng, n * cout * 2 * h * 2 * w);
    let (dx, dw, db) = upconv_backward(&xt, &wt, &Tensor4::from_vec([n, cout, 2 * h, 2 * w], ru.clone()));
    let e1 = check(&mut x, &dx.data, |x| dot(&upconv_forward(&Tensor4::from_vec([n, cin, h, w], x.to_vec()), &wt, &b).data, &ru));
    let e2 = check(&mut wt, &dw, |wt| dot(&upconv_forward(&xt, wt, &b).data, &ru));
    let e3 = check(&mut b, &db, |b| dot(&upconv_forward(&xt, &wt, b).data, &ru));
    out.push(("upconv", e1.max(e2).max(e3)));

    // concat / split
    let a = Tensor4::from_vec([n, 2, 3, 3], random(&mut rng, n * 18));
    let c = Tensor4::from_vec([n, 1, 3, 3], random(&mut rng, n * 9));
    let cat = concat(&a, &c);
    let (sa, sc) = split(&cat, 2);
    out.push(("concat", if sa == a && sc == c { 0.0 } else { f64::INFINITY }));
    out
}

/// Full network check: worst error over every parameter and every input
/// sample, with loss `sum(logits * r)`.
pub fn network_check(cfg: &NetConfig, dims: [usize; 4], seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: NetParams<f64> = init_model(cfg, seed).unwrap();
    // random affine norms so scale/shift gradients are nontrivial
    for t in params.tensors.iter_mut() {
        if t.name.ends_with("scale") || t.name.ends_with("shift") || t.name.ends_with("bias") {
            for v in t.data.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let mut x = random(&mut rng, dims.iter().product());
    let out_dims = [dims[0], cfg.out_channels, dims[2], dims[3]];
    let r = random(&mut rng, out_dims.iter().product());
    let xt = Tensor4::from_vec(dims, x.clone());
    let (_, tape) = forward(&params, cfg, &xt).unwrap();
    let (grads, dx) = backward_with_input(&params, cfg, &tape, &Tensor4::from_vec(out_dims, r.clone())).unwrap();

    let mut worst_param: f64 = 0.0;
    for ti in 0..params.tensors.len() {
        let mut data = params.tensors[ti].data.clone();
        let analytic = grads.tensors[ti].data.clone();
        let mut p = params.clone();
        let e = check(&mut data, &analytic, |d| {
            p.tensors[ti].data.copy_from_slice(d);
            dot(&forward(&p, cfg, &xt).unwrap().0.data, &r)
        });
        worst_param = worst_param.max(e);
    }
    let worst_input = check(&mut x, &dx.data, |x| dot(&forward(&params, cfg, &Tensor4::from_vec(dims, x.to_vec())).unwrap().0.data, &r));
    (worst_param, worst_input)
}

/// Focal loss check on random logits with labeled, unlabeled and cut-off pixels.
pub fn focal_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [1, 4, 8, 8];
    let mut z: Vec<f64> = (0..256).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<u8> = (0..64).map(|i| if i % 7 == 0 { 255 } else { rng.gen_range(0..4) }).collect();
    // force a few pixels deep below the cutoff
    for i in [3usize, 10, 20] {
        let t = labels[i] as usize;
        if t < 4 {
            z[t * 64 + i] = -8.0;
        }
    }
    let cfg = FocalConfig::default();
    let w = [0.7, 1.3, 1.9, 0.4];
    let (_, g) = focal_loss(&Tensor4::from_vec(dims, z.clone()), &labels, &cfg, &w).unwrap();
    check(&mut z, &g.data, |z| focal_loss(&Tensor4::from_vec(dims, z.to_vec()), &labels, &cfg, &w).unwrap().0)
}

/// Directional derivative along a random unit direction in parameter space,
/// analytic versus central difference.
pub fn network_directional_check(cfg: &NetConfig, dims: [usize; 4], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: NetParams<f64> = init_model(cfg, seed).unwrap();
    let x = Tensor4::from_vec(dims, random(&mut rng, dims.iter().product()));
    let out_dims = [dims[0], cfg.out_channels, dims[2], dims[3]];
    let r = random(&mut rng, out_dims.iter().product());
    let (_, tape) = forward(&params, cfg, &x).unwrap();
    let (grads, _) = backward_with_input(&params, cfg, &tape, &Tensor4::from_vec(out_dims, r.clone())).unwrap();
    let dir: Vec<Vec<f64>> = params.tensors.iter().map(|t| random(&mut rng, t.data.len())).collect();
    let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let analytic: f64 = grads.tensors.iter().zip(&dir).map(|(g, d)| dot(&g.data, d)).sum::<f64>() / norm;
    let at = |s: f64| {
        let mut p = params.clone();
        for (t, d) in p.tensors.iter_mut().zip(&dir) {
            for (v, dv) in t.data.iter_mut().zip(d) {
                *v += s * dv / norm;
            }
        }
        dot(&forward(&p, cfg, &x).unwrap().0.data, &r)
    };
    rel_err(analytic, (at(H) - at(-H)) / (2.0 * H))
}
