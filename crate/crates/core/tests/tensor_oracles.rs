//! Forward ops against straightforward loop implementations.

use fbnet::tensor::{broadcast_shape, Conv2dParams, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops over output and kernel positions, plus the batch axis.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], p: Conv2dParams) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims4().unwrap();
    let [co, _, kh, kw] = w.dims4().unwrap();
    let span = |size: usize, k: usize| (size + 2 * p.padding - p.dilation * (k - 1) - 1) / p.stride + 1;
    let (oh, ow) = (span(h, kh), span(wd, kw));
    let mut out = vec![0.0; n * co * oh * ow];
    for bn in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * p.stride + i * p.dilation) as isize - p.padding as isize;
                                let ix = (xo * p.stride + j * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bn, c, iy as usize, ix as usize]) * w.at(&[o, c, i, j]);
                            }
                        }
                    }
                    out[((bn * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], p: Conv2dParams) -> fbnet::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::new(vec![b.len()], b.to_vec()).unwrap());
    let y = g.conv2d(xv, wv, Some(bv), p)?;
    Ok(g.value(y).clone())
}

#[test]
fn conv_random_batch_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = Conv2dParams {
        stride: 1,
        padding: 1,
        dilation: 1,
    };
    let got = conv(&x, &w, &b, p).unwrap();
    let want = naive_conv(&x, &w, &b, p);
    assert_eq!(got.shape(), want.shape());
    assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
}

#[test]
fn conv_exhaustive_small_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    for h in 1..=5 {
        for w in 1..=5 {
            for k in [1, 3] {
                for dilation in [1, 2] {
                    for stride in [1, 2] {
                        for padding in [0, 1, 2] {
                            let p = Conv2dParams {
                                stride,
                                padding,
                                dilation,
                            };
                            let x = random(&mut rng, &[1, 2, h, w]);
                            let wt = random(&mut rng, &[3, 2, k, k]);
                            let b = [0.1, -0.2, 0.3];
                            let extent = dilation * (k - 1) + 1;
                            let fits = h + 2 * padding >= extent && w + 2 * padding >= extent;
                            match conv(&x, &wt, &b, p) {
                                Ok(got) => {
                                    assert!(fits, "{h}×{w} k{k} d{dilation} p{padding} should be rejected");
                                    let want = naive_conv(&x, &wt, &b, p);
                                    assert_eq!(got.shape(), want.shape());
                                    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
                                    checked += 1;
                                }
                                Err(_) => assert!(!fits, "{h}×{w} k{k} d{dilation} p{padding} rejected"),
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 400);
}

/// Index-by-index tiling of both operands to the broadcast shape.
fn tiled(t: &Tensor<f64>, shape: &[usize]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let offset = shape.len() - t.rank();
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; shape.len()];
            for a in (0..shape.len()).rev() {
                idx[a] = rem % shape[a];
                rem /= shape[a];
            }
            let src: Vec<usize> = (0..t.rank())
                .map(|a| if t.shape()[a] == 1 { 0 } else { idx[a + offset] })
                .collect();
            t.at(&src)
        })
        .collect()
}

#[test]
fn broadcast_matches_tiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pairs: [(&[usize], &[usize]); 6] = [
        (&[2, 3, 4, 5], &[3, 1, 1]),
        (&[2, 3, 4, 5], &[1, 3, 1, 5]),
        (&[2, 1, 4, 1], &[1, 3, 1, 5]),
        (&[4, 5], &[5]),
        (&[1], &[2, 3]),
        (&[2, 3, 1, 1], &[2, 3, 4, 4]),
    ];
    for (sa, sb) in pairs {
        let a = random(&mut rng, sa);
        let b = random(&mut rng, sb);
        let shape = broadcast_shape(sa, sb).unwrap();
        let (ta, tb) = (tiled(&a, &shape), tiled(&b, &shape));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let sum = g.add(va, vb).unwrap();
        let prod = g.mul(va, vb).unwrap();
        assert_eq!(g.value(sum).shape(), shape.as_slice());
        for i in 0..ta.len() {
            assert_eq!(g.value(sum).data()[i], ta[i] + tb[i]);
            assert_eq!(g.value(prod).data()[i], ta[i] * tb[i]);
        }
    }
    assert!(broadcast_shape(&[2, 3], &[4, 3, 2]).is_err());
}

#[test]
fn bilinear_matches_half_pixel_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, &[1, 2, 3, 4]);
    for s in [2, 3, 8] {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.upsample_bilinear(v, s).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 2, 3 * s, 4 * s]);
        let coord = |o: usize, n: usize| {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            (lo, (lo + 1).min(n - 1), src - lo as f64)
        };
        for c in 0..2 {
            for oy in 0..3 * s {
                for ox in 0..4 * s {
                    let (y0, y1, fy) = coord(oy, 3);
                    let (x0, x1, fx) = coord(ox, 4);
                    let v = |yy, xx| x.at(&[0, c, yy, xx]);
                    let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                        + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                    assert!((out.at(&[0, c, oy, ox]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn nearest_upsample_repeats_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[2, 1, 2, 3]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.upsample_nearest(v, 3).unwrap();
    for n in 0..2 {
        for oy in 0..6 {
            for ox in 0..9 {
                assert_eq!(g.value(y).at(&[n, 0, oy, ox]), x.at(&[n, 0, oy / 3, ox / 3]));
            }
        }
    }
}
