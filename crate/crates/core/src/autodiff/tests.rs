use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Central finite differences (64-bit, step 1e-5) against the tape's
/// analytic gradients, relative error <= 1e-3.
fn check_grads(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "{name}: loss must be scalar");
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let eval = |mod_inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = mod_inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l)[0]
    };

    let h = 1e-5;
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.data.len() {
            let mut plus = inputs.to_vec();
            plus[i].data[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = analytic[i][e];
            let denom = ana.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (ana - numeric).abs() / denom <= 1e-3,
                "{name}: input {i} elem {e}: analytic {ana} vs numeric {numeric}"
            );
        }
    }
}

fn scalarize(tape: &mut Tape, v: Var, weights: &[f64]) -> Var {
    let numel = tape.value(v).len();
    let flat = tape.reshape(v, &[numel]);
    tape.dot_const(flat, weights)
}

fn weights_for(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn fd_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let w = weights_for(6, 100);
    check_grads("matmul", &[a, b], &|t, vs| {
        let c = t.matmul(vs[0], vs[1]);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_matmul_same_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[3, 3], &mut rng);
    let w = weights_for(9, 101);
    check_grads("matmul_xx", &[a], &|t, vs| {
        let c = t.matmul(vs[0], vs[0]);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&[3, 5], &mut rng);
    let w = weights_for(15, 102);
    check_grads("transpose", &[a], &|t, vs| {
        let c = t.transpose2d(vs[0]);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_add_mul_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 3], &mut rng);
    let w = weights_for(6, 103);
    check_grads("add", &[a.clone(), b.clone()], &|t, vs| {
        let c = t.add(vs[0], vs[1]);
        scalarize(t, c, &w)
    });
    check_grads("mul", &[a.clone(), b], &|t, vs| {
        let c = t.mul(vs[0], vs[1]);
        scalarize(t, c, &w)
    });
    check_grads("scale", &[a], &|t, vs| {
        let c = t.scale(vs[0], -2.5);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_add_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[4, 3], &mut rng);
    let bias = rand_tensor(&[3], &mut rng);
    let w = weights_for(12, 104);
    check_grads("add_bias", &[a, bias], &|t, vs| {
        let c = t.add_bias(vs[0], vs[1]);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_softmax_both_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&[3, 4], &mut rng);
    let w = weights_for(12, 105);
    check_grads("softmax_rows", &[a.clone()], &|t, vs| {
        let c = t.softmax(vs[0], 1);
        scalarize(t, c, &w)
    });
    check_grads("softmax_cols", &[a], &|t, vs| {
        let c = t.softmax(vs[0], 0);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&[3, 6], &mut rng);
    let gamma = rand_tensor(&[6], &mut rng);
    let beta = rand_tensor(&[6], &mut rng);
    let w = weights_for(18, 106);
    check_grads("layer_norm", &[a, gamma, beta], &|t, vs| {
        let c = t.layer_norm(vs[0], vs[1], vs[2], 1e-5);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&[4, 4], &mut rng);
    let w = weights_for(16, 107);
    check_grads("relu", &[a.clone()], &|t, vs| {
        let c = t.relu(vs[0]);
        scalarize(t, c, &w)
    });
    check_grads("gelu", &[a], &|t, vs| {
        let c = t.gelu(vs[0]);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = rand_tensor(&[5, 3], &mut rng);
    let ids = vec![2usize, 0, 2, 4];
    let w = weights_for(12, 108);
    check_grads("embedding", &[table], &|t, vs| {
        let c = t.embedding_lookup(vs[0], &ids);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_concat_slice_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 2], &mut rng);
    let w = weights_for(10, 109);
    check_grads("concat_cols", &[a.clone(), b], &|t, vs| {
        let c = t.concat(&[vs[0], vs[1]], 1);
        scalarize(t, c, &w)
    });
    let c2 = rand_tensor(&[3, 3], &mut rng);
    let w2 = weights_for(15, 110);
    check_grads("concat_rows", &[a.clone(), c2], &|t, vs| {
        let c = t.concat(&[vs[0], vs[1]], 0);
        scalarize(t, c, &w2)
    });
    let d = rand_tensor(&[4, 5], &mut rng);
    let w3 = weights_for(6, 111);
    check_grads("slice_cols", &[d.clone()], &|t, vs| {
        let c = t.slice(vs[0], 1, 1, 2);
        let c = t.slice(c, 0, 1, 3);
        scalarize(t, c, &w3)
    });
    let w4 = weights_for(20, 112);
    check_grads("reshape", &[d], &|t, vs| {
        let c = t.reshape(vs[0], &[2, 10]);
        scalarize(t, c, &w4)
    });
}

#[test]
fn fd_masked_fill_and_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 3], &mut rng);
    let mask: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
    let w = weights_for(9, 113);
    let m = mask.clone();
    // Moderate fill: a -1e30 fill would swamp the 1e-5 FD perturbation.
    check_grads("masked_fill", &[a.clone()], &|t, vs| {
        let c = t.masked_fill(vs[0], &m, -3.5);
        scalarize(t, c, &w)
    });
    let scale_mask: Vec<f64> = (0..9).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    check_grads("dropout", &[a], &|t, vs| {
        let c = t.dropout_mask(vs[0], scale_mask.clone());
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = rand_tensor(&[4, 6], &mut rng);
    let targets = vec![1u32, 5, 0, 3];
    check_grads("cross_entropy", &[logits.clone()], &|t, vs| {
        t.cross_entropy(vs[0], &targets, None)
    });
    let targets_ign = vec![1u32, 0, 2, 0];
    check_grads("cross_entropy_ignore", &[logits], &|t, vs| {
        t.cross_entropy(vs[0], &targets_ign, Some(0))
    });
}

#[test]
fn fd_gather_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = rand_tensor(&[3, 5], &mut rng);
    let targets = vec![4usize, 0, 2];
    let w = weights_for(3, 114);
    check_grads("gather_log_softmax", &[logits], &|t, vs| {
        let lp = t.gather_log_softmax(vs[0], &targets);
        t.dot_const(lp, &w)
    });
}

#[test]
fn fd_pillar_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let points = rand_tensor(&[6, 3], &mut rng);
    let empty = rand_tensor(&[3], &mut rng);
    // Cell 2 stays empty.
    let cells = vec![0usize, 0, 1, 3, 3, 3];
    let w = weights_for(12, 115);
    check_grads("pillar_pool", &[points, empty], &|t, vs| {
        let c = t.pillar_pool(vs[0], &cells, 4, vs[1]);
        scalarize(t, c, &w)
    });
}

#[test]
fn fd_im2col_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let grid = rand_tensor(&[12, 2], &mut rng); // 3 x 4 grid, 2 channels
    let kernel = rand_tensor(&[18, 2], &mut rng);
    let w = weights_for(24, 116);
    check_grads("im2col_conv", &[grid, kernel], &|t, vs| {
        let cols = t.im2col3x3(vs[0], 3, 4);
        let c = t.matmul(cols, vs[1]);
        scalarize(t, c, &w)
    });
}

#[test]
fn square_gradient_example() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x);
    tape.backward(y);
    assert_eq!(tape.grad(x), &[6.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut tape = Tape::new();
    let a = tape.leaf(rand_tensor(&[5, 7], &mut rng));
    let s = tape.softmax(a, 1);
    for row in tape.value(s).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let s0 = tape.softmax(a, 0);
    for j in 0..7 {
        let col: f64 = (0..5).map(|i| tape.value(s0)[i * 7 + j]).sum();
        assert!((col - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_analytic_values() {
    // Uniform logits over V classes -> ln V.
    let v = 6818usize;
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[2, v]));
    let loss = tape.cross_entropy(logits, &[17, 4242], None);
    assert!((tape.value(loss)[0] - (v as f64).ln()).abs() < 1e-12);
    assert!(((v as f64).ln() - 8.8273).abs() < 1e-4);

    // Dominant logit at the target -> loss ~ 0.
    let mut data = vec![0.0; 10];
    data[3] = 1e3;
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::from_vec(&[1, 10], data));
    let loss = tape.cross_entropy(logits, &[3], None);
    assert!(tape.value(loss)[0] < 1e-10);
}

#[test]
fn cross_entropy_ignores_marked_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let row = rand_tensor(&[1, 6], &mut rng);
    let two = Tensor::from_vec(&[2, 6], [row.data.clone(), vec![9.0; 6]].concat());

    let mut t1 = Tape::new();
    let l1 = t1.leaf(row);
    let loss1 = t1.cross_entropy(l1, &[2], None);

    let mut t2 = Tape::new();
    let l2 = t2.leaf(two);
    let loss2 = t2.cross_entropy(l2, &[2, 0], Some(0));

    assert_eq!(t1.value(loss1)[0], t2.value(loss2)[0]);
}

#[test]
fn masked_fill_gradient_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut tape = Tape::new();
    let a = tape.leaf(rand_tensor(&[2, 2], &mut rng));
    let mask = vec![true, false, false, true];
    let f = tape.masked_fill(a, &mask, -1e30);
    let s = tape.dot_const(f, &[1.0; 4]);
    tape.backward(s);
    assert_eq!(tape.grad(a), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn independent_subgraphs_get_independent_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let xa = rand_tensor(&[2, 2], &mut rng);
    let xb = rand_tensor(&[2, 2], &mut rng);

    let run_separate = |x: &Tensor| {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let sq = t.mul(v, v);
        let loss = t.dot_const(sq, &[1.0; 4]);
        t.backward(loss);
        t.grad(v).to_vec()
    };
    let ga = run_separate(&xa);
    let gb = run_separate(&xb);

    let mut t = Tape::new();
    let va = t.leaf(xa);
    let vb = t.leaf(xb);
    let sa = t.mul(va, va);
    let sb = t.mul(vb, vb);
    let la = t.dot_const(sa, &[1.0; 4]);
    let lb = t.dot_const(sb, &[1.0; 4]);
    let total = t.add(la, lb);
    t.backward(total);
    assert_eq!(t.grad(va), ga.as_slice());
    assert_eq!(t.grad(vb), gb.as_slice());
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let a = rand_tensor(&[3, 3], &mut rng);
    let b = rand_tensor(&[3, 3], &mut rng);
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.leaf(b.clone());
    let c = tape.matmul(va, vb);
    let d = tape.softmax(c, 1);
    let e = tape.gelu(d);
    let _ = tape.add(e, va);
    assert_eq!(tape.value(va), a.data.as_slice());
    assert_eq!(tape.value(vb), b.data.as_slice());
}

#[test]
#[should_panic(expected = "scalar loss")]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 2]));
    tape.backward(a);
}

#[test]
#[should_panic(expected = "mismatch")]
fn shape_mismatch_panics_with_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    let _ = tape.matmul(a, b);
}

#[test]
fn adamw_zero_grad_is_identity_without_decay() {
    let mut p = vec![1.0, -2.0, 3.0];
    let g = vec![0.0; 3];
    let mut st = AdamState::new(3);
    let hp = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    adamw_step(&mut p, &g, &mut st, 1e-3, &hp);
    assert_eq!(p, vec![1.0, -2.0, 3.0]);
}

#[test]
fn adamw_first_step_opposes_gradient_sign() {
    let mut p = vec![0.5, 0.5];
    let g = vec![2.0, -3.0];
    let mut st = AdamState::new(2);
    let hp = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    adamw_step(&mut p, &g, &mut st, 1e-2, &hp);
    assert!(p[0] < 0.5 && p[1] > 0.5);
}

#[test]
fn adamw_deterministic_across_runs() {
    let run = || {
        let mut p = vec![0.1, 0.2, 0.3];
        let mut st = AdamState::new(3);
        let hp = AdamHyper::default();
        for step in 0..50 {
            let g: Vec<f64> = p.iter().map(|x| x * 0.3 + step as f64 * 1e-3).collect();
            adamw_step(&mut p, &g, &mut st, 1e-3, &hp);
        }
        p
    };
    assert_eq!(run(), run());
}

#[test]
fn cosine_warmup_schedule_endpoints() {
    let total = 1000;
    let base = 1e-3;
    assert_eq!(cosine_warmup_lr(0, total, base, 0.10), 0.0);
    assert!((cosine_warmup_lr(100, total, base, 0.10) - base).abs() < 1e-15);
    assert!(cosine_warmup_lr(total, total, base, 0.10).abs() < 1e-18);
    // Monotone rise through warmup, then decay.
    assert!(cosine_warmup_lr(50, total, base, 0.10) < base);
    assert!(cosine_warmup_lr(550, total, base, 0.10) < base);
    assert!(cosine_warmup_lr(550, total, base, 0.10) > cosine_warmup_lr(900, total, base, 0.10));
}
