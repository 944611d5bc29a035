#![allow(dead_code)]

use genrep::{Result, SeededRng, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Builds `sum(op(inputs) * R)` for a fixed random `R` so that every output
/// element carries a distinct weight.
fn weighted_loss(
    tape: &mut Tape,
    inputs: &[Tensor],
    weights_seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let r = random_tensor(&shape, &mut SeededRng::new(weights_seed));
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod)?;
    Ok((loss, vars))
}

/// Largest relative error between analytic gradients and central finite
/// differences over every element of every input.
pub fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let (loss, vars) = weighted_loss(&mut tape, inputs, 991, build).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = weighted_loss(&mut t, ins, 991, build).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).data().to_vec();
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Direct six-nested-loop convolution: stride 1, zero padding k/2.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * co * h * wd];
    for s in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * ci + c) * h + sy as usize) * wd + sx as usize;
                                let wi = ((o * ci + c) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((s * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], out).unwrap()
}

/// One checked operator with the shapes it is exercised on.
pub struct OpCase {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub shapes_checked: usize,
}

fn shapes4(rng: &mut SeededRng, count: usize) -> Vec<[usize; 4]> {
    (0..count)
        .map(|_| {
            [
                1 + rng.below(2),
                1 + rng.below(3),
                2 * (1 + rng.below(3)),
                2 * (1 + rng.below(3)),
            ]
        })
        .collect()
}

/// Finite-difference check of every differentiable operator on `count`
/// random shapes each.
pub fn check_all_operators(seed: u64, count: usize) -> Vec<OpCase> {
    let mut rng = SeededRng::new(seed);
    let mut cases = Vec::new();
    let mut run = |name: &'static str, inputs_per_shape: Vec<Vec<Tensor>>, build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        let mut worst: f64 = 0.0;
        for inputs in &inputs_per_shape {
            worst = worst.max(gradcheck(inputs, build));
        }
        cases.push(OpCase {
            name,
            max_rel_err: worst,
            shapes_checked: inputs_per_shape.len(),
        });
    };

    let shapes = shapes4(&mut rng, count);
    let same = |rng: &mut SeededRng, k: usize| -> Vec<Vec<Tensor>> {
        shapes.iter().map(|s| (0..k).map(|_| random_tensor(s, rng)).collect()).collect()
    };

    run("add", same(&mut rng, 2), &|t, v| t.add(v[0], v[1]));
    run("sub", same(&mut rng, 2), &|t, v| t.sub(v[0], v[1]));
    run("mul", same(&mut rng, 2), &|t, v| t.mul(v[0], v[1]));
    run("scale", same(&mut rng, 1), &|t, v| t.scale(v[0], -1.7));
    run("relu", same(&mut rng, 1), &|t, v| t.relu(v[0]));
    run("leaky_relu", same(&mut rng, 1), &|t, v| t.leaky_relu(v[0], 0.2));
    run("sigmoid", same(&mut rng, 1), &|t, v| t.sigmoid(v[0]));
    run("tanh", same(&mut rng, 1), &|t, v| t.tanh(v[0]));
    run("upsample_nearest", same(&mut rng, 1), &|t, v| t.upsample_nearest(v[0]));
    run("upsample_bilinear", same(&mut rng, 1), &|t, v| t.upsample_bilinear(v[0]));
    run("avg_pool", same(&mut rng, 1), &|t, v| t.avg_pool(v[0]));
    run("softmax_channels", same(&mut rng, 1), &|t, v| t.softmax_channels(v[0]));
    run("sum", same(&mut rng, 1), &|t, v| t.sum(v[0]));
    run("mean", same(&mut rng, 1), &|t, v| t.mean(v[0]));
    run("squared_norm", same(&mut rng, 1), &|t, v| t.squared_norm(v[0]));
    run("reshape", same(&mut rng, 1), &|t, v| {
        let n = t.value(v[0]).numel();
        t.reshape(v[0], vec![n])
    });
    run("dropout", same(&mut rng, 1), &|t, v| {
        let mut r = SeededRng::new(5);
        t.dropout(v[0], 0.5, Some(&mut r))
    });

    for k in [1usize, 3] {
        let inputs = shapes
            .iter()
            .map(|s| {
                let co = 1 + rng.below(3);
                vec![
                    random_tensor(s, &mut rng),
                    random_tensor(&[co, s[1], k, k], &mut rng),
                    random_tensor(&[co], &mut rng),
                ]
            })
            .collect();
        run(if k == 1 { "conv2d_1x1" } else { "conv2d_3x3" }, inputs, &|t, v| t.conv2d(v[0], v[1], Some(v[2])));
    }

    let inputs = (0..count)
        .map(|_| {
            let (n, fin, fout) = (1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5));
            vec![
                random_tensor(&[n, fin], &mut rng),
                random_tensor(&[fout, fin], &mut rng),
                random_tensor(&[fout], &mut rng),
            ]
        })
        .collect();
    run("affine", inputs, &|t, v| t.affine(v[0], v[1], v[2]));

    let bn_inputs = |rng: &mut SeededRng| -> Vec<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| {
                // batch statistics need at least two values per channel
                let s = [s[0].max(2), s[1], s[2], s[3]];
                vec![
                    random_tensor(&s, rng),
                    random_tensor(&[s[1]], rng),
                    random_tensor(&[s[1]], rng),
                ]
            })
            .collect()
    };
    run("batchnorm_train", bn_inputs(&mut rng), &|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2])?.0));
    run("batchnorm_eval", bn_inputs(&mut rng), &|t, v| {
        let c = t.value(v[1]).numel();
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.3 * i as f64).collect();
        t.batchnorm_eval(v[0], v[1], v[2], &mean, &var)
    });

    let inputs = shapes
        .iter()
        .map(|s| {
            vec![
                random_tensor(s, &mut rng),
                random_tensor(&[s[0], s[1]], &mut rng),
                random_tensor(&[s[0], s[1]], &mut rng),
            ]
        })
        .collect();
    run("channel_affine", inputs, &|t, v| t.channel_affine(v[0], v[1], v[2]));

    let inputs = shapes
        .iter()
        .map(|s| {
            let c2 = 1 + rng.below(3);
            vec![random_tensor(s, &mut rng), random_tensor(&[s[0], c2, s[2], s[3]], &mut rng)]
        })
        .collect();
    run("concat_channels", inputs, &|t, v| t.concat_channels(&[v[0], v[1]]));

    let inputs = shapes
        .iter()
        .map(|s| vec![random_tensor(&[s[0], s[1] + 2, s[2], s[3]], &mut rng)])
        .collect();
    run("slice_channels", inputs, &|t, v| t.slice_channels(v[0], 1, 2));

    let ce_shapes: Vec<[usize; 4]> = shapes.iter().map(|s| [s[0], 2 + s[1], s[2], s[3]]).collect();
    for s in &ce_shapes {
        let pixels = s[0] * s[2] * s[3];
        let targets: Vec<usize> = (0..pixels).map(|_| rng.below(s[1])).collect();
        let weights: Vec<f64> = (0..pixels).map(|p| if p % 3 == 2 { 0.0 } else { 1.0 }).collect();
        let inputs = vec![vec![random_tensor(s, &mut rng)]];
        run("cross_entropy", inputs, &move |t, v| t.cross_entropy(v[0], &targets, Some(&weights)));
    }
    merge_same_names(cases)
}

fn merge_same_names(cases: Vec<OpCase>) -> Vec<OpCase> {
    let mut out: Vec<OpCase> = Vec::new();
    for c in cases {
        if let Some(prev) = out.iter_mut().find(|p| p.name == c.name) {
            prev.max_rel_err = prev.max_rel_err.max(c.max_rel_err);
            prev.shapes_checked += c.shapes_checked;
        } else {
            out.push(c);
        }
    }
    out
}

pub fn latents(seed: u64, n: usize) -> Vec<genrep::generators::Latent> {
    genrep::projection::sample_latents(&mut SeededRng::new(seed), n).unwrap()
}

/// `||U(delta)[0..3]||^2` with `U` nearest-neighbour upsampling of a
/// `[C, r, r]` difference to 32x32, done by index arithmetic.
pub fn pyramid_closed_form(delta: &Tensor) -> f64 {
    let r = delta.shape()[1];
    let f = 32 / r;
    let mut s = 0.0;
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let v = delta.data()[(c * r + y / f) * r + x / f];
                s += v * v;
            }
        }
    }
    s
}

/// Worst absolute gap between `rec_loss` and the pyramid closed form over
/// `count` random (latent, stage, perturbation) triples of the linear-mode
/// procedural generator.
pub fn closed_form_gap(seed: u64, count: usize) -> f64 {
    use genrep::generators::{generate_with_activations, ProceduralGenerator};
    use genrep::layermatch::rec_loss;
    let g = ProceduralGenerator::default();
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for l in latents(seed ^ 0x5eed, count) {
        let m = 1 + rng.below(4);
        let (_, phi) = generate_with_activations(&g, &l).unwrap();
        let delta = random_tensor(phi.stage(m).shape(), &mut rng);
        let mut hat = phi.stage(m).clone();
        for (h, d) in hat.data_mut().iter_mut().zip(delta.data()) {
            *h += d;
        }
        let got = rec_loss(&g, &l, m, &hat).unwrap();
        worst = worst.max((got - pyramid_closed_form(&delta)).abs());
    }
    worst
}

/// Largest `L_rec` with the true stage substituted, over every stage of
/// `count` latents, for both head modes.
pub fn substitution_identity_worst(seed: u64, count: usize) -> f64 {
    use genrep::generators::{generate_with_activations, HeadMode, ProceduralGenerator};
    use genrep::layermatch::rec_loss;
    let mut worst: f64 = 0.0;
    for mode in [HeadMode::Linear, HeadMode::Nonlinear] {
        let g = ProceduralGenerator::new(mode);
        for l in latents(seed, count) {
            let (_, phi) = generate_with_activations(&g, &l).unwrap();
            for m in 1..=4 {
                worst = worst.max(rec_loss(&g, &l, m, phi.stage(m)).unwrap());
            }
        }
    }
    worst
}

/// Confusion counts, accuracy, per-class IoU and mean IoU over classes
/// present in the truth, by one direct pass over pixel pairs.
pub fn per_pixel_metrics(classes: usize, pairs: &[(Vec<u8>, Vec<u8>)]) -> (f64, Vec<f64>, f64) {
    let (mut tp, mut pred_n, mut true_n) = (vec![0u64; classes], vec![0u64; classes], vec![0u64; classes]);
    let (mut correct, mut total) = (0u64, 0u64);
    for (pred, truth) in pairs {
        for (&p, &t) in pred.iter().zip(truth) {
            total += 1;
            pred_n[p as usize] += 1;
            true_n[t as usize] += 1;
            if p == t {
                correct += 1;
                tp[p as usize] += 1;
            }
        }
    }
    let iou: Vec<f64> = (0..classes)
        .map(|c| {
            let union = pred_n[c] + true_n[c] - tp[c];
            if union == 0 { 0.0 } else { tp[c] as f64 / union as f64 }
        })
        .collect();
    let present: Vec<usize> = (0..classes).filter(|&c| true_n[c] > 0).collect();
    let miou = present.iter().map(|&c| iou[c]).sum::<f64>() / present.len() as f64;
    (correct as f64 / total as f64, iou, miou)
}
