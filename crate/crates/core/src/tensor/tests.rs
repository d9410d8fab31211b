use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Direct sliding-window convolution, one output site at a time.
fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [n, ci, d, h, w] = x.dims5().unwrap();
    let [co, _, ks, _, _] = k.dims5().unwrap();
    let o = |e: usize| (e + 2 * pad - ks) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(w));
    let xi = |b: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[(((b * ci + c) * d + z as usize) * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = Vec::new();
    for bn in 0..n {
        for c_out in 0..co {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[c_out];
                        for c_in in 0..ci {
                            for kz in 0..ks {
                                for ky in 0..ks {
                                    for kx in 0..ks {
                                        let wv = k.data()
                                            [(((c_out * ci + c_in) * ks + kz) * ks + ky) * ks + kx];
                                        let z = (oz * stride + kz) as isize - pad as isize;
                                        let y = (oy * stride + ky) as isize - pad as isize;
                                        let xx = (ox * stride + kx) as isize - pad as isize;
                                        acc += wv * xi(bn, c_in, z, y, xx);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, od, oh, ow], out).unwrap()
}

/// Pointwise trilinear sample with explicit clamping.
fn trilinear_oracle(plane: &[f64], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let mut idx = [[0usize; 2]; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let c = pos[a].max(0.0).min(hi);
        let f = c.floor();
        idx[a][0] = f as usize;
        idx[a][1] = ((f as usize) + 1).min(dims[a] - 1);
        frac[a] = c - f;
    }
    let mut v = 0.0;
    for (cz, wz) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (cy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (cx, wx) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                let (z, y, x) = (idx[0][cz], idx[1][cy], idx[2][cx]);
                v += wz * wy * wx * plane[(z * dims[1] + y) * dims[2] + x];
            }
        }
    }
    v
}

fn eval_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let (xv, kv, bv) = (
        t.leaf(x.clone()).unwrap(),
        t.leaf(k.clone()).unwrap(),
        t.leaf(b.clone()).unwrap(),
    );
    let y = t.conv3d(xv, kv, bv, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::full(&[1, 1, 4, 4, 4], 1.0);
    let k = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
    let b = Tensor::zeros(&[1]);
    assert_eq!(eval_conv(&x, &k, &b, 1, 0).data(), x.data());
}

#[test]
fn conv_full_window_is_dot_product() {
    let x = random(&[1, 1, 3, 3, 3], 1, 1.0);
    let k = random(&[1, 1, 3, 3, 3], 2, 1.0);
    let b = Tensor::zeros(&[1]);
    let y = eval_conv(&x, &k, &b, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    let dot: f64 = x.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
    assert!((y.data()[0] - dot).abs() < 1e-12);
    let oracle = conv_oracle(&x, &k, b.data(), 1, 0);
    assert!((y.data()[0] - oracle.data()[0]).abs() < 1e-12);
}

#[test]
fn conv_strided_shape() {
    let x = random(&[1, 16, 8, 8, 8], 3, 1.0);
    let k = random(&[32, 16, 3, 3, 3], 4, 1.0);
    let b = Tensor::zeros(&[32]);
    assert_eq!(eval_conv(&x, &k, &b, 2, 1).shape(), &[1, 32, 4, 4, 4]);
}

#[test]
fn conv_matches_oracle_across_geometries() {
    for (i, &(stride, pad, ks)) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 1), (3, 2, 3)]
        .iter()
        .enumerate()
    {
        let x = random(&[2, 3, 5, 6, 7], 10 + i as u64, 1.0);
        let k = random(&[4, 3, ks, ks, ks], 20 + i as u64, 1.0);
        let b = random(&[4], 30 + i as u64, 1.0);
        let y = eval_conv(&x, &k, &b, stride, pad);
        let o = conv_oracle(&x, &k, b.data(), stride, pad);
        assert_eq!(y.shape(), o.shape());
        for (a, e) in y.data().iter().zip(o.data()) {
            assert!((a - e).abs() < 1e-12, "stride {} pad {}: {} vs {}", stride, pad, a, e);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 2, 4, 4, 4])).unwrap();
    let k = t.leaf(Tensor::zeros(&[1, 3, 3, 3, 3])).unwrap();
    let b = t.leaf(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(t.conv3d(x, k, b, 1, 1), Err(Error::Shape(_))));
    let k2 = t.leaf(Tensor::zeros(&[1, 2, 3, 3, 3])).unwrap();
    assert!(matches!(t.conv3d(x, k2, b, 0, 1), Err(Error::Argument(_))));
    let big = t.leaf(Tensor::zeros(&[1, 2, 7, 7, 7])).unwrap();
    assert!(matches!(t.conv3d(x, big, b, 1, 0), Err(Error::Shape(_))));
}

#[test]
fn non_finite_input_is_numeric_error() {
    let mut t = Tape::new();
    let bad = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
    assert!(matches!(t.leaf(bad), Err(Error::NumericState { .. })));
    let x = t.leaf(Tensor::full(&[1], 1000.0)).unwrap();
    assert!(matches!(t.exp(x), Err(Error::NumericState { op: "exp" })));
}

#[test]
fn leaky_relu_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap()).unwrap();
    let y = t.leaky_relu(x, 0.2).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, -0.2]);
    let p = t.leaf(Tensor::new(vec![3], vec![0.0, 1.5, 3.0]).unwrap()).unwrap();
    let q = t.leaky_relu(p, 0.2).unwrap();
    assert_eq!(t.value(q).data(), t.value(p).data());
    let r = t.leaf(Tensor::new(vec![1], vec![-3.0]).unwrap()).unwrap();
    let s = t.leaky_relu(r, 0.0).unwrap();
    assert_eq!(t.value(s).data(), &[0.0]);
    assert!(t.leaky_relu(r, 1.0).is_err());
}

fn upsample(x: &Tensor, f: usize) -> Tensor {
    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let y = t.upsample_trilinear(v, f).unwrap();
    t.value(y).clone()
}

#[test]
fn upsample_identity_and_constant() {
    let x = random(&[1, 2, 3, 4, 5], 7, 1.0);
    let y = upsample(&x, 1);
    assert_eq!(y.data(), x.data());
    let c = Tensor::full(&[1, 1, 3, 3, 3], 0.37);
    for f in [2, 3, 4] {
        assert!(upsample(&c, f).data().iter().all(|&v| v == 0.37));
    }
    let mut t = Tape::new();
    let v = t.leaf(x).unwrap();
    assert!(matches!(t.upsample_trilinear(v, 0), Err(Error::Argument(_))));
}

#[test]
fn upsample_ramp_matches_pointwise_oracle() {
    // value = 1*z + 2*y + 4*x on a 2x2x2 grid
    let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| {
        let (z, y, xx) = (i / 4, (i / 2) % 2, i % 2);
        z as f64 + 2.0 * y as f64 + 4.0 * xx as f64
    });
    let y = upsample(&x, 2);
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    for z in 0..4 {
        for yy in 0..4 {
            for xx in 0..4 {
                let src = |t: usize| (t as f64 + 0.5) / 2.0 - 0.5;
                let e = trilinear_oracle(x.data(), [2, 2, 2], [src(z), src(yy), src(xx)]);
                let a = y.data()[(z * 4 + yy) * 4 + xx];
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn warp_zero_field_is_identity() {
    let x = random(&[1, 2, 4, 5, 6], 8, 1.0);
    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let f = t.leaf(Tensor::zeros(&[1, 3, 4, 5, 6])).unwrap();
    let y = t.warp_trilinear(v, f).unwrap();
    assert_eq!(t.value(y).data(), x.data());
}

#[test]
fn warp_matches_pointwise_oracle() {
    let x = random(&[1, 2, 5, 6, 7], 9, 1.0);
    let phi = random(&[1, 3, 5, 6, 7], 10, 2.5);
    let mut t = Tape::new();
    let v = t.leaf(x.clone()).unwrap();
    let f = t.leaf(phi.clone()).unwrap();
    let y = t.warp_trilinear(v, f).unwrap();
    let vol = 5 * 6 * 7;
    for c in 0..2 {
        for p in 0..vol {
            let (z, yy, xx) = (p / 42, (p / 7) % 6, p % 7);
            let pos = [
                z as f64 + phi.data()[p],
                yy as f64 + phi.data()[vol + p],
                xx as f64 + phi.data()[2 * vol + p],
            ];
            let e = trilinear_oracle(&x.data()[c * vol..][..vol], [5, 6, 7], pos);
            assert!((t.value(y).data()[c * vol + p] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_sum_of_squares() {
    let mut t = Tape::new();
    let x = t
        .leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true))
        .unwrap();
    let s = t.square(x).unwrap();
    let y = t.sum(s).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    // second call accumulates
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_errors_and_unreachable_leaves() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[3], 1.0).with_requires_grad(true)).unwrap();
    let other = t.leaf(Tensor::full(&[3], 1.0).with_requires_grad(true)).unwrap();
    assert!(matches!(t.backward(x), Err(Error::Argument(_))));
    let c = t.constant(Tensor::full(&[3], 2.0)).unwrap();
    let sc = t.sum(c).unwrap();
    assert!(matches!(t.backward(sc), Err(Error::EmptyTape)));
    let sq = t.square(x).unwrap();
    let y = t.sum(sq).unwrap();
    t.backward(y).unwrap();
    assert!(t.grad(other).is_none());
    assert!(t.grad(c).is_none());
    let mut empty = Tape::new();
    assert!(matches!(empty.backward(Var(0)), Err(Error::EmptyTape)));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = random(&[1, 1, 4, 4, 4], 11, 1.0);
    let k = random(&[2, 1, 3, 3, 3], 12, 0.5);
    let b = random(&[2], 13, 0.5);
    let (kc, bc) = (k.clone(), b.clone());
    let wrt_input = move |t: &mut Tape, v: Var| {
        let kv = t.constant(kc.clone())?;
        let bv = t.constant(bc.clone())?;
        let y = t.conv3d(v, kv, bv, 1, 1)?;
        let y2 = t.square(y)?;
        t.sum(y2)
    };
    let r = finite_diff_check(wrt_input, &x, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);

    let (xc, bc) = (x.clone(), b.clone());
    let wrt_kernel = move |t: &mut Tape, v: Var| {
        let xv = t.constant(xc.clone())?;
        let bv = t.constant(bc.clone())?;
        let y = t.conv3d(xv, v, bv, 2, 1)?;
        let y2 = t.square(y)?;
        t.sum(y2)
    };
    let r = finite_diff_check(wrt_kernel, &k, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);

    let (xc, kc) = (x.clone(), k.clone());
    let wrt_bias = move |t: &mut Tape, v: Var| {
        let xv = t.constant(xc.clone())?;
        let kv = t.constant(kc.clone())?;
        let y = t.conv3d(xv, kv, v, 1, 0)?;
        let y2 = t.square(y)?;
        t.sum(y2)
    };
    let r = finite_diff_check(wrt_bias, &b, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    // values kept away from the leaky_relu kink at 0
    let x = Tensor::from_fn(&[1, 2, 2, 2, 3], |i| {
        let v = 0.1 + 0.07 * i as f64;
        if i % 3 == 0 { -v } else { v }
    });
    let other = random(&[1, 2, 2, 2, 3], 14, 1.0);
    let f = move |t: &mut Tape, v: Var| {
        let o = t.constant(other.clone())?;
        let a = t.mul(v, o)?;
        let b = t.sub(a, v)?;
        let c = t.leaky_relu(b, 0.2)?;
        let e = t.exp(v)?;
        let l = t.ln(e)?;
        let s = t.add(c, l)?;
        let s = t.scale(s, 1.7)?;
        let s = t.add_scalar(s, 0.3)?;
        let cat = t.concat(&[s, v])?;
        let sq = t.square(cat)?;
        t.mean(sq)
    };
    let r = finite_diff_check(f, &x, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    let x = random(&[1, 2, 2, 3, 2], 15, 1.0);
    let weights = random(&[1, 2, 4, 6, 4], 16, 1.0);
    let f = move |t: &mut Tape, v: Var| {
        let w = t.constant(weights.clone())?;
        let u = t.upsample_trilinear(v, 2)?;
        let p = t.mul(u, w)?;
        t.sum(p)
    };
    let r = finite_diff_check(f, &x, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);
}

/// Field whose fractional parts stay at least 0.02 from an integer and whose
/// targets stay inside the grid, so the trilinear map is smooth there.
fn interior_field(shape: [usize; 5], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, _, d, h, w] = shape;
    let vol = d * h * w;
    Tensor::from_fn(&[n, 3, d, h, w], |i| {
        let a = (i / vol) % 3;
        let p = i % vol;
        let coord = [p / (h * w), (p / w) % h, p % w][a] as f64;
        let extent = [d, h, w][a] as f64;
        loop {
            let off: f64 = rng.random_range(-1.4..1.4);
            let target = coord + off;
            let frac = target - target.floor();
            if target > 0.02 && target < extent - 1.02 && frac > 0.02 && frac < 0.98 {
                return off;
            }
        }
    })
}

#[test]
fn warp_gradients_match_finite_differences() {
    let x = random(&[1, 2, 4, 4, 4], 17, 1.0);
    let phi = interior_field([1, 2, 4, 4, 4], 18);
    let weights = random(&[1, 2, 4, 4, 4], 19, 1.0);
    let (pc, wc) = (phi.clone(), weights.clone());
    let wrt_volume = move |t: &mut Tape, v: Var| {
        let f = t.constant(pc.clone())?;
        let w = t.constant(wc.clone())?;
        let y = t.warp_trilinear(v, f)?;
        let p = t.mul(y, w)?;
        t.sum(p)
    };
    let r = finite_diff_check(wrt_volume, &x, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);
    let (xc, wc) = (x.clone(), weights.clone());
    let wrt_field = move |t: &mut Tape, v: Var| {
        let xv = t.constant(xc.clone())?;
        let w = t.constant(wc.clone())?;
        let y = t.warp_trilinear(xv, v)?;
        let p = t.mul(y, w)?;
        t.sum(p)
    };
    let r = finite_diff_check(wrt_field, &phi, 1e-3, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);
}

#[test]
fn warp_self_composition_gradient() {
    // the velocity integrator warps a field by itself
    let phi = interior_field([1, 3, 4, 4, 4], 20);
    let phi = Tensor::from_fn(phi.shape(), |i| phi.data()[i] * 0.5);
    let weights = random(&[1, 3, 4, 4, 4], 21, 1.0);
    let f = move |t: &mut Tape, v: Var| {
        let w = t.constant(weights.clone())?;
        let y = t.warp_trilinear(v, v)?;
        let c = t.add(v, y)?;
        let p = t.mul(c, w)?;
        t.sum(p)
    };
    let r = finite_diff_check(f, &phi, 1e-6, 1e-4, None).unwrap();
    assert!(r.passed, "{:?}", r);
}

#[test]
fn backward_is_linear() {
    let x = random(&[1, 1, 3, 3, 3], 22, 1.0).with_requires_grad(true);
    let k = random(&[1, 1, 3, 3, 3], 23, 1.0);
    let grads = |a: f64, b: f64| -> Vec<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone()).unwrap();
        let kv = t.constant(k.clone()).unwrap();
        let bv = t.constant(Tensor::zeros(&[1])).unwrap();
        let f = t.conv3d(xv, kv, bv, 1, 1).unwrap();
        let f = t.square(f).unwrap();
        let f = t.sum(f).unwrap();
        let g = t.exp(xv).unwrap();
        let g = t.sum(g).unwrap();
        let fa = t.scale(f, a).unwrap();
        let gb = t.scale(g, b).unwrap();
        let y = t.add(fa, gb).unwrap();
        t.backward(y).unwrap();
        t.grad(xv).unwrap().to_vec()
    };
    let (gf, gg, gc) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(2.5, -0.7));
    for i in 0..gf.len() {
        let e = 2.5 * gf[i] - 0.7 * gg[i];
        assert!((gc[i] - e).abs() <= 1e-12 * e.abs().max(1.0));
    }
}

#[test]
fn tensor_construction_contract() {
    assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
    let mut t = Tensor::zeros(&[2, 2]);
    t.accumulate_grad(&[1.0; 4]).unwrap();
    t.accumulate_grad(&[1.0; 4]).unwrap();
    assert_eq!(t.grad().unwrap(), &[2.0; 4]);
    assert!(t.accumulate_grad(&[1.0; 3]).is_err());
    assert!(Tensor::zeros(&[3]).item().is_err());
}

#[test]
fn deterministic_across_thread_counts() {
    let x = random(&[1, 4, 6, 6, 6], 24, 1.0);
    let k = random(&[5, 4, 3, 3, 3], 25, 1.0);
    let b = random(&[5], 26, 1.0);
    let run = || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone().with_requires_grad(true)).unwrap();
        let kv = t.leaf(k.clone().with_requires_grad(true)).unwrap();
        let bv = t.leaf(b.clone()).unwrap();
        let y = t.conv3d(xv, kv, bv, 2, 1).unwrap();
        let y = t.square(y).unwrap();
        let y = t.sum(y).unwrap();
        t.backward(y).unwrap();
        (t.grad(xv).unwrap().to_vec(), t.grad(kv).unwrap().to_vec())
    };
    let a = crate::par::with_threads(1, run);
    let b2 = crate::par::with_threads(3, run);
    assert_eq!(a, b2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn upsample_stays_in_envelope(seed in any::<u64>(), f in 1usize..4) {
        let x = random(&[1, 1, 3, 2, 4], seed, 5.0);
        let y = upsample(&x, f);
        prop_assert!(y.min() >= x.min() - 1e-12 && y.max() <= x.max() + 1e-12);
    }

    #[test]
    fn random_op_gradients_pass(seed in any::<u64>()) {
        let x = random(&[1, 2, 3, 3, 3], seed, 1.0);
        let k = random(&[3, 2, 3, 3, 3], seed ^ 1, 0.5);
        let f = move |t: &mut Tape, v: Var| {
            let kv = t.constant(k.clone())?;
            let bv = t.constant(Tensor::zeros(&[3]))?;
            let c = t.conv3d(v, kv, bv, 1, 1)?;
            let u = t.upsample_trilinear(c, 2)?;
            let e = t.scale(u, 0.5)?;
            let e = t.exp(e)?;
            t.mean(e)
        };
        let r = finite_diff_check(f, &x, 1e-3, 1e-4, None).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }
}
