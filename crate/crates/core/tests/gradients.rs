//! Finite-difference verification for every differentiable operator, plus
//! the independent naive-convolution oracle. Everything runs in f64.

use bevdistill_core::geom::BitMask2D;
use bevdistill_core::nn::gradcheck::{check_gradient, FD_STEP, FD_TOLERANCE};
use bevdistill_core::nn::{Graph, Tensor};
use bevdistill_core::seeding::stream_rng;
use rand::Rng;

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn rand_vec_no_tie(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Assert analytic gradients match central differences for a scalar loss.
///
/// `loss` must rebuild the computation from scratch on every call; the
/// checker never touches the backward pass.
fn assert_fd(x: &[f64], mut loss: impl FnMut(&[f64]) -> f64, analytic: &[f64], what: &str) {
    let report = check_gradient(&mut loss, x, analytic, FD_STEP);
    assert!(
        report.max_rel_err < FD_TOLERANCE,
        "{what}: max rel err {} over {} entries",
        report.max_rel_err,
        report.checked
    );
}

/// Reduce an op output to a scalar with fixed random weights so asymmetric
/// gradient bugs cannot cancel.
fn weighted<'g>(out: &Tensor<'g, f64>, g: &'g Graph<f64>, seed: u64) -> Tensor<'g, f64> {
    let mut rng = stream_rng(seed, 1234);
    let w = rand_vec(&mut rng, out.len(), -1.0, 1.0);
    let w = g.constant(&out.shape().to_vec(), w);
    out.mul(&w).unwrap().sum_all()
}

#[test]
fn grad_add_sub_mul_scale() {
    let mut rng = stream_rng(100, 0);
    let n = 24;
    let xa = rand_vec(&mut rng, n, -1.0, 1.0);
    let xb = rand_vec(&mut rng, n, -1.0, 1.0);

    let run = |a: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let ta = g.leaf(&[4, 6], std::rc::Rc::new(a.to_vec()), true);
        let tb = g.leaf(&[4, 6], std::rc::Rc::new(b.to_vec()), true);
        let out = ta
            .add(&tb)
            .unwrap()
            .mul(&ta.sub(&tb).unwrap())
            .unwrap()
            .scale(0.7);
        let loss = weighted(&out, &g, 5);
        let mut grads = g.backward(&loss).unwrap();
        let ga = grads.take(ta.id()).unwrap();
        let gb = grads.take(tb.id()).unwrap();
        (loss.item(), ga, gb)
    };

    let (_, ga, gb) = run(&xa, &xb);
    assert_fd(&xa, |a| run(a, &xb).0, &ga, "add/sub/mul/scale wrt a");
    assert_fd(&xb, |b| run(&xa, b).0, &gb, "add/sub/mul/scale wrt b");
}

#[test]
fn grad_relu_sigmoid() {
    let mut rng = stream_rng(101, 0);
    let x = rand_vec_no_tie(&mut rng, 30);

    let run = |v: &[f64]| -> (f64, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(&[30], std::rc::Rc::new(v.to_vec()), true);
        let out = t.relu().add(&t.sigmoid()).unwrap();
        let loss = weighted(&out, &g, 6);
        let mut grads = g.backward(&loss).unwrap();
        (loss.item(), grads.take(t.id()).unwrap())
    };
    let (_, ga) = run(&x);
    assert_fd(&x, |v| run(v).0, &ga, "relu+sigmoid");
}

#[test]
fn grad_softmax_axis() {
    let mut rng = stream_rng(102, 0);
    // middle axis of a 3-d tensor
    let shape = [3usize, 4, 5];
    let x = rand_vec(&mut rng, 60, -2.0, 2.0);
    let run = |v: &[f64]| -> (f64, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(&shape, std::rc::Rc::new(v.to_vec()), true);
        let out = t.softmax_axis(1).unwrap();
        let loss = weighted(&out, &g, 7);
        let mut grads = g.backward(&loss).unwrap();
        (loss.item(), grads.take(t.id()).unwrap())
    };
    let (_, ga) = run(&x);
    assert_fd(&x, |v| run(v).0, &ga, "softmax_axis");
}

#[test]
fn softmax_properties() {
    let mut rng = stream_rng(102, 1);
    let g: Graph<f64> = Graph::new();
    let x = rand_vec(&mut rng, 2 * 7, -3.0, 3.0);
    let t = g.constant(&[7, 2], x.clone());
    let y = t.softmax_axis(1).unwrap();
    for row in y.data().chunks_exact(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
    // shift invariance
    let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
    let ts = g.constant(&[7, 2], shifted);
    let ys = ts.softmax_axis(1).unwrap();
    for (a, b) in y.data().iter().zip(ys.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // equal logits -> 0.5 / 0.5
    let eq = g.constant(&[1, 2], vec![0.3, 0.3]);
    let yq = eq.softmax_axis(1).unwrap();
    assert!((yq.data()[0] - 0.5).abs() < 1e-15);
    // direct formula oracle on a random 4-vector
    let v = rand_vec(&mut rng, 4, -2.0, 2.0);
    let tv = g.constant(&[4], v.clone());
    let yv = tv.softmax_axis(0).unwrap();
    let z: f64 = v.iter().map(|a| a.exp()).sum();
    for (got, want) in yv.data().iter().zip(v.iter().map(|a| a.exp() / z)) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn grad_max_last_axes() {
    let mut rng = stream_rng(103, 0);
    // distinct values so no entry is within 1e-3 of a tie
    let mut x: Vec<f64> = (0..24).map(|i| i as f64 * 0.11).collect();
    use rand::seq::SliceRandom;
    x.shuffle(&mut rng);
    let run = |v: &[f64]| -> (f64, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(&[2, 3, 2, 2], std::rc::Rc::new(v.to_vec()), true);
        let out = t.max_last_axes(2).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        let loss = weighted(&out, &g, 8);
        let mut grads = g.backward(&loss).unwrap();
        (loss.item(), grads.take(t.id()).unwrap())
    };
    let (_, ga) = run(&x);
    assert_fd(&x, |v| run(v).0, &ga, "max_last_axes");
}

#[test]
fn grad_concat_slice_reshape_spatial_mul() {
    let mut rng = stream_rng(104, 0);
    let xa = rand_vec(&mut rng, 4 * 3 * 2, -1.0, 1.0);
    let xb = rand_vec(&mut rng, 4 * 3 * 2, -1.0, 1.0);
    let xs = rand_vec(&mut rng, 4 * 3, -1.0, 1.0);

    let run = |a: &[f64], b: &[f64], s: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let ta = g.leaf(&[4, 3, 2], std::rc::Rc::new(a.to_vec()), true);
        let tb = g.leaf(&[4, 3, 2], std::rc::Rc::new(b.to_vec()), true);
        let ts = g.leaf(&[4, 3], std::rc::Rc::new(s.to_vec()), true);
        let cat = ta.concat_axis(&tb, 2).unwrap(); // [4,3,4]
        let sl = cat.slice_axis(2, 1, 3).unwrap(); // [4,3,3]
        let sm = sl.spatial_mul(&ts).unwrap();
        let rs = sm.reshape(&[4, 9]).unwrap();
        let loss = weighted(&rs, &g, 9);
        let mut grads = g.backward(&loss).unwrap();
        (
            loss.item(),
            grads.take(ta.id()).unwrap(),
            grads.take(tb.id()).unwrap(),
            grads.take(ts.id()).unwrap(),
        )
    };
    let (_, ga, gb, gs) = run(&xa, &xb, &xs);
    assert_fd(&xa, |v| run(v, &xb, &xs).0, &ga, "concat/slice wrt a");
    assert_fd(&xb, |v| run(&xa, v, &xs).0, &gb, "concat/slice wrt b");
    assert_fd(&xs, |v| run(&xa, &xb, v).0, &gs, "spatial_mul field");
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Independent naive convolution: quadruple loop, no shared code with the
/// engine.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    k: usize,
    cout: usize,
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = bias[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let iv = input[((iy as usize) * w + ix as usize) * cin + ci];
                            let kv = kernel[((ky * k + kx) * cin + ci) * cout + co];
                            acc += iv * kv;
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut rng = stream_rng(105, 0);
    for &stride in &[1usize, 2] {
        let (h, w, cin, k, cout) = (5, 5, 2, 3, 3);
        let input = rand_vec(&mut rng, h * w * cin, -1.0, 1.0);
        let kernel = rand_vec(&mut rng, k * k * cin * cout, -1.0, 1.0);
        let bias = rand_vec(&mut rng, cout, -0.5, 0.5);
        let g: Graph<f64> = Graph::new();
        let ti = g.constant(&[h, w, cin], input.clone());
        let tk = g.constant(&[k, k, cin, cout], kernel.clone());
        let tb = g.constant(&[cout], bias.clone());
        let out = ti.conv2d(&tk, &tb, stride).unwrap();
        let want = naive_conv(&input, h, w, cin, &kernel, k, cout, &bias, stride);
        assert_eq!(out.data().len(), want.len());
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "stride {stride}: {a} vs {b}");
        }
    }
}

#[test]
fn conv2d_identity_and_box_kernels() {
    let g: Graph<f64> = Graph::new();
    // 1x1 identity kernel, zero bias: output == input
    let input: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let ti = g.constant(&[3, 4, 1], input.clone());
    let tk = g.constant(&[1, 1, 1, 1], vec![1.0]);
    let tb = g.constant(&[1], vec![0.0]);
    let out = ti.conv2d(&tk, &tb, 1).unwrap();
    assert_eq!(out.data(), &input[..]);

    // 3x3 all-ones kernel on a constant-1 field: interior cells = 9
    let ones = g.constant(&[5, 5, 1], vec![1.0; 25]);
    let k9 = g.constant(&[3, 3, 1, 1], vec![1.0; 9]);
    let out = ones.conv2d(&k9, &tb, 1).unwrap();
    assert_eq!(out.data()[5 + 1], 9.0);
    assert_eq!(out.data()[2 * 5 + 2], 9.0);
    assert_eq!(out.data()[0], 4.0); // corner sees a 2x2 window
}

#[test]
fn conv2d_rejects_shape_mismatch_with_diagnostic() {
    let g: Graph<f64> = Graph::new();
    let ti = g.constant(&[3, 4, 2], vec![0.0; 24]);
    let tk = g.constant(&[3, 3, 5, 1], vec![0.0; 45]);
    let tb = g.constant(&[1], vec![0.0]);
    let err = ti.conv2d(&tk, &tb, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");
    assert!(err.contains("3x3x5x1"), "diagnostic should carry shapes: {err}");
}

#[test]
fn conv2d_is_linear_in_input() {
    let mut rng = stream_rng(105, 1);
    let g: Graph<f64> = Graph::new();
    let (h, w, cin, cout) = (6, 5, 3, 2);
    let kernel = g.constant(&[3, 3, cin, cout], rand_vec(&mut rng, 9 * cin * cout, -1.0, 1.0));
    let zero_b = g.constant(&[cout], vec![0.0; cout]);
    let x = rand_vec(&mut rng, h * w * cin, -1.0, 1.0);
    let y = rand_vec(&mut rng, h * w * cin, -1.0, 1.0);
    let (alpha, beta) = (0.37, -1.21);
    let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
    let cx = g
        .constant(&[h, w, cin], x)
        .conv2d(&kernel, &zero_b, 1)
        .unwrap();
    let cy = g
        .constant(&[h, w, cin], y)
        .conv2d(&kernel, &zero_b, 1)
        .unwrap();
    let cmix = g
        .constant(&[h, w, cin], mix)
        .conv2d(&kernel, &zero_b, 1)
        .unwrap();
    for i in 0..cmix.len() {
        let want = alpha * cx.data()[i] + beta * cy.data()[i];
        assert!((cmix.data()[i] - want).abs() < 1e-9);
    }
}

#[test]
fn grad_conv2d_all_inputs() {
    let mut rng = stream_rng(106, 0);
    for &stride in &[1usize, 2] {
        let (h, w, cin, k, cout) = (5, 4, 2, 3, 3);
        let input = rand_vec(&mut rng, h * w * cin, -1.0, 1.0);
        let kernel = rand_vec(&mut rng, k * k * cin * cout, -1.0, 1.0);
        let bias = rand_vec(&mut rng, cout, -0.5, 0.5);

        let run = |i: &[f64], kn: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let g: Graph<f64> = Graph::new();
            let ti = g.leaf(&[h, w, cin], std::rc::Rc::new(i.to_vec()), true);
            let tk = g.leaf(&[k, k, cin, cout], std::rc::Rc::new(kn.to_vec()), true);
            let tb = g.leaf(&[cout], std::rc::Rc::new(b.to_vec()), true);
            let out = ti.conv2d(&tk, &tb, stride).unwrap();
            let loss = weighted(&out, &g, 10);
            let mut grads = g.backward(&loss).unwrap();
            (
                loss.item(),
                grads.take(ti.id()).unwrap(),
                grads.take(tk.id()).unwrap(),
                grads.take(tb.id()).unwrap(),
            )
        };
        let (_, gi, gk, gb) = run(&input, &kernel, &bias);
        assert_fd(
            &input,
            |v| run(v, &kernel, &bias).0,
            &gi,
            &format!("conv2d stride {stride} wrt input"),
        );
        assert_fd(
            &kernel,
            |v| run(&input, v, &bias).0,
            &gk,
            &format!("conv2d stride {stride} wrt kernel"),
        );
        assert_fd(
            &bias,
            |v| run(&input, &kernel, v).0,
            &gb,
            &format!("conv2d stride {stride} wrt bias"),
        );
    }
}

// ---------------------------------------------------------------------------
// bilinear_sample
// ---------------------------------------------------------------------------

#[test]
fn bilinear_zero_offsets_is_identity() {
    let mut rng = stream_rng(107, 0);
    let g: Graph<f64> = Graph::new();
    let feat = rand_vec(&mut rng, 6 * 5 * 3, -1.0, 1.0);
    let tf = g.constant(&[6, 5, 3], feat.clone());
    let toff = g.constant(&[6, 5, 2], vec![0.0; 60]);
    let out = tf.bilinear_sample(&toff).unwrap();
    assert_eq!(out.data(), &feat[..]);
}

#[test]
fn bilinear_integer_shift_on_linear_field() {
    // field value = row index; offset (+1, 0) adds exactly 1 until the clamp
    let g: Graph<f64> = Graph::new();
    let (h, w) = (5, 4);
    let feat: Vec<f64> = (0..h * w).map(|p| (p / w) as f64).collect();
    let tf = g.constant(&[h, w, 1], feat);
    let mut off = vec![0.0; h * w * 2];
    for p in 0..h * w {
        off[p * 2] = 1.0;
    }
    let toff = g.constant(&[h, w, 2], off);
    let out = tf.bilinear_sample(&toff).unwrap();
    for i in 0..h {
        for j in 0..w {
            let want = ((i + 1).min(h - 1)) as f64;
            assert_eq!(out.data()[i * w + j], want);
        }
    }
}

#[test]
fn grad_bilinear_sample() {
    let mut rng = stream_rng(107, 1);
    let (h, w, c) = (5, 4, 2);
    let feat = rand_vec(&mut rng, h * w * c, -1.0, 1.0);
    // offsets strictly inside the grid and away from integer lattice lines
    let off: Vec<f64> = (0..h * w * 2)
        .map(|_| {
            let v: f64 = rng.random_range(-1.2..1.2);
            let frac = v - v.floor();
            if frac < 0.05 {
                v + 0.1
            } else if frac > 0.95 {
                v - 0.1
            } else {
                v
            }
        })
        .collect();

    let run = |f: &[f64], o: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let tf = g.leaf(&[h, w, c], std::rc::Rc::new(f.to_vec()), true);
        let to = g.leaf(&[h, w, 2], std::rc::Rc::new(o.to_vec()), true);
        let out = tf.bilinear_sample(&to).unwrap();
        let loss = weighted(&out, &g, 11);
        let mut grads = g.backward(&loss).unwrap();
        (
            loss.item(),
            grads.take(tf.id()).unwrap(),
            grads.take(to.id()).unwrap(),
        )
    };
    let (_, gf, go) = run(&feat, &off);
    assert_fd(&feat, |v| run(v, &off).0, &gf, "bilinear wrt feature");
    assert_fd(&off, |v| run(&feat, v).0, &go, "bilinear wrt offsets");
}

// ---------------------------------------------------------------------------
// masked_l1 and focal loss
// ---------------------------------------------------------------------------

#[test]
fn masked_l1_examples() {
    let g: Graph<f64> = Graph::new();
    let a = g.constant(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let b = g.constant(&[2, 2, 1], vec![0.0; 4]);
    let full = BitMask2D::ones(2, 2);
    let empty = BitMask2D::zeros(2, 2);
    assert_eq!(a.masked_l1(&b, &full).unwrap().item(), 2.5);
    assert_eq!(a.masked_l1(&b, &empty).unwrap().item(), 0.0);
    assert_eq!(a.masked_l1(&a, &full).unwrap().item(), 0.0);
}

#[test]
fn grad_masked_l1() {
    let mut rng = stream_rng(108, 0);
    let (h, w, c) = (3, 4, 2);
    let xa = rand_vec(&mut rng, h * w * c, 0.5, 1.5);
    let xb = rand_vec(&mut rng, h * w * c, -1.5, -0.5); // a - b bounded away from 0
    let mut mask = BitMask2D::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            if (i + j) % 2 == 0 {
                mask.set(i, j, true);
            }
        }
    }
    let run = |a: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let ta = g.leaf(&[h, w, c], std::rc::Rc::new(a.to_vec()), true);
        let tb = g.leaf(&[h, w, c], std::rc::Rc::new(b.to_vec()), true);
        let loss = ta.masked_l1(&tb, &mask).unwrap();
        let mut grads = g.backward(&loss).unwrap();
        (
            loss.item(),
            grads.take(ta.id()).unwrap(),
            grads.take(tb.id()).unwrap(),
        )
    };
    let (_, ga, gb) = run(&xa, &xb);
    assert_fd(&xa, |v| run(v, &xb).0, &ga, "masked_l1 wrt a");
    assert_fd(&xb, |v| run(&xa, v).0, &gb, "masked_l1 wrt b");
}

#[test]
fn grad_sigmoid_focal() {
    let mut rng = stream_rng(109, 0);
    let n = 40;
    let x = rand_vec(&mut rng, n, -3.0, 3.0);
    let targets: Vec<f64> = (0..n).map(|i| f64::from(i % 3 == 0)).collect();
    let run = |v: &[f64]| -> (f64, Vec<f64>) {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(&[n], std::rc::Rc::new(v.to_vec()), true);
        let loss = t.sigmoid_focal(&targets, 0.25, 2.0, 1.0 / 7.0).unwrap();
        let mut grads = g.backward(&loss).unwrap();
        (loss.item(), grads.take(t.id()).unwrap())
    };
    let (_, ga) = run(&x);
    assert_fd(&x, |v| run(v).0, &ga, "sigmoid_focal");
}

#[test]
fn focal_is_tiny_at_saturated_correct_logits() {
    let g: Graph<f64> = Graph::new();
    let logits = g.constant(&[4], vec![40.0, -40.0, 40.0, -40.0]);
    let targets = vec![1.0, 0.0, 1.0, 0.0];
    let loss = logits.sigmoid_focal(&targets, 0.25, 2.0, 1.0).unwrap();
    assert!(loss.item() < 1e-3, "loss {}", loss.item());
}

// ---------------------------------------------------------------------------
// graph mechanics
// ---------------------------------------------------------------------------

#[test]
fn fan_out_gradients_accumulate() {
    // y = relu(x) + 2x: one input feeds two consumers; gradients must sum.
    let x = vec![0.5, -0.5, 1.5];
    let g: Graph<f64> = Graph::new();
    let t = g.leaf(&[3], std::rc::Rc::new(x.clone()), true);
    let out = t.relu().add(&t.scale(2.0)).unwrap();
    let loss = out.sum_all();
    let mut grads = g.backward(&loss).unwrap();
    let gx = grads.take(t.id()).unwrap();
    assert_eq!(gx, vec![3.0, 2.0, 3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let g: Graph<f64> = Graph::new();
    let c = g.constant(&[2], vec![1.0, 2.0]);
    let t = g.leaf(&[2], std::rc::Rc::new(vec![3.0, 4.0]), true);
    let loss = c.mul(&t).unwrap().sum_all();
    let mut grads = g.backward(&loss).unwrap();
    assert!(grads.get(c.id()).is_none());
    assert_eq!(grads.take(t.id()).unwrap(), vec![1.0, 2.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let g: Graph<f64> = Graph::new();
    let t = g.leaf(&[2], std::rc::Rc::new(vec![1.0, 2.0]), true);
    assert!(g.backward(&t).is_err());
}
