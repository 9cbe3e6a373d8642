use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualshot::tensor::{conv2d, finite_diff_check_many, upsample2x, ConvGeometry, ConvParams, Fault, Graph, Shape, Tensor, Var};

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct definition: y[b,o,i,j] = bias[o] + sum x[b,c,i*s+u*d-p, j*s+v*d-p] * w[o,c,u,v].
fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f64], g: ConvGeometry) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let out_len = |len: usize, k: usize| (len + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
    let (oh, ow) = (out_len(xs.height, ws.height), out_len(xs.width, ws.width));
    let mut y = Tensor::zeros(Shape::new(xs.batch, ws.batch, oh, ow));
    for b in 0..xs.batch {
        for o in 0..ws.batch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..xs.channels {
                        for u in 0..ws.height {
                            for v in 0..ws.width {
                                let yy = (i * g.stride + u * g.dilation) as i64 - g.padding as i64;
                                let xx = (j * g.stride + v * g.dilation) as i64 - g.padding as i64;
                                if yy >= 0 && xx >= 0 && (yy as usize) < xs.height && (xx as usize) < xs.width {
                                    acc += x.at(b, c, yy as usize, xx as usize) * w.at(o, c, u, v);
                                }
                            }
                        }
                    }
                    y.set(b, o, i, j, acc);
                }
            }
        }
    }
    y
}

#[derive(Clone, Debug)]
struct ConvCase {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeometry,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..3, 1usize..4, 1usize..3, 0usize..3, any::<u64>())
        .prop_flat_map(|(batch, cin, cout, half, stride, dilation, padding, seed)| {
            // kernels have odd extents
            let k = 2 * half - 1;
            let extent = (k - 1) * dilation + 1;
            let min = extent.saturating_sub(2 * padding).max(1);
            (min..min + 7, min..min + 7).prop_map(move |(h, w)| ConvCase {
                batch,
                cin,
                cout,
                h,
                w,
                k,
                geom: ConvGeometry { stride, dilation, padding },
                seed,
            })
        })
}

fn params(c: &ConvCase, with_bias: bool) -> ConvParams {
    let kernel = random(Shape::new(c.cout, c.cin, c.k, c.k), c.seed ^ 1);
    let bias = if with_bias {
        random(Shape::new(1, c.cout, 1, 1), c.seed ^ 2).into_data()
    } else {
        vec![0.0; c.cout]
    };
    ConvParams {
        kernel,
        bias,
        stride: c.geom.stride,
        dilation: c.geom.dilation,
        padding: c.geom.padding,
    }
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_definition(c in conv_case()) {
        let p = params(&c, true);
        let x = random(Shape::new(c.batch, c.cin, c.h, c.w), c.seed);
        let y = conv2d(&x, &p).unwrap();
        let want = naive_conv(&x, &p.kernel, &p.bias, c.geom);
        prop_assert!(close(&y, &want, 1e-12), "{:?} vs {:?}", y.shape(), want.shape());
        // closed-form output size
        let len = |n: usize| (n + 2 * c.geom.padding - c.geom.dilation * (c.k - 1) - 1) / c.geom.stride + 1;
        prop_assert_eq!(y.shape(), Shape::new(c.batch, c.cout, len(c.h), len(c.w)));
    }

    #[test]
    fn conv_is_linear_without_bias(c in conv_case(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let p = params(&c, false);
        let s = Shape::new(c.batch, c.cin, c.h, c.w);
        let x = random(s, c.seed);
        let y = random(s, c.seed.wrapping_add(7));
        let lhs = conv2d(&x.scale_add(alpha, &y, beta).unwrap(), &p).unwrap();
        let rhs = conv2d(&x, &p).unwrap().scale_add(alpha, &conv2d(&y, &p).unwrap(), beta).unwrap();
        prop_assert!(lhs.data().iter().zip(rhs.data()).all(|(a, b)| (a - b).abs() <= 1e-10));
    }

    #[test]
    fn conv_gradient_matches_finite_differences(c in conv_case()) {
        let p = params(&c, true);
        let x = random(Shape::new(c.batch, c.cin, c.h, c.w), c.seed);
        let geom = c.geom;
        let r = finite_diff_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], geom)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &[x, p.kernel.clone(), p.bias_tensor()],
            1e-4,
            c.seed,
            Fault::None,
        ).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn upsample_matches_bilinear_definition(b in 1usize..3, ch in 1usize..3, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = random(Shape::new(b, ch, h, w), seed);
        let y = upsample2x(&x);
        prop_assert_eq!(y.shape(), Shape::new(b, ch, 2 * h, 2 * w));
        // sample at half-pixel centres, clamping to the border
        let coord = |o: usize, n: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(n - 1), s - lo as f64)
        };
        for bb in 0..b {
            for c in 0..ch {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        let (y0, y1, fy) = coord(i, h);
                        let (x0, x1, fx) = coord(j, w);
                        let top = x.at(bb, c, y0, x0) * (1.0 - fx) + x.at(bb, c, y0, x1) * fx;
                        let bot = x.at(bb, c, y1, x0) * (1.0 - fx) + x.at(bb, c, y1, x1) * fx;
                        let want = top * (1.0 - fy) + bot * fy;
                        prop_assert!((y.at(bb, c, i, j) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn composite_graph_gradients(h in 2usize..6, w in 2usize..6, seed in any::<u64>()) {
        // upsample, crop, concat, narrow, product, shifted relu and sum in one graph
        let a = random(Shape::new(1, 2, h, w), seed);
        let b = random(Shape::new(1, 2, 2 * h, 2 * w), seed ^ 3);
        let shift = random(Shape::new(1, 4, 2 * h - 1, 2 * w - 1), seed ^ 5).map(|v| v * 0.5);
        let r = finite_diff_check_many(
            |g: &mut Graph, v: &[Var]| {
                let up = g.upsample2x(v[0]);
                let cat = g.concat_channels(&[up, v[1]])?;
                let cut = g.crop(cat, 2 * h - 1, 2 * w - 1)?;
                let s = g.leaf(shift.clone());
                let moved = g.add(cut, s)?;
                let act = g.relu(moved);
                let left = g.narrow_channels(act, 0, 2)?;
                let right = g.narrow_channels(cut, 2, 2)?;
                let prod = g.mul(left, right)?;
                Ok(g.sum(prod))
            },
            &[a, b],
            1e-4,
            seed,
            Fault::None,
        ).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let c = ConvCase {
        batch: 2,
        cin: 3,
        cout: 4,
        h: 9,
        w: 7,
        k: 3,
        geom: ConvGeometry { stride: 2, dilation: 2, padding: 2 },
        seed: 99,
    };
    let p = params(&c, true);
    let x = random(Shape::new(2, 3, 9, 7), 4);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let k = g.leaf(p.kernel.clone());
        let b = g.leaf(p.bias_tensor());
        let y = g.conv2d(xv, k, b, c.geom).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(xv).unwrap().to_vec(), g.grad(k).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
