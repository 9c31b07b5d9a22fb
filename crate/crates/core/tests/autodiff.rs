//! Finite-difference verification of every differentiable tape operation,
//! plus a mixed multi-layer network that routes gradients through all of
//! them at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glance_core::gradcheck::check_gradients;
use glance_core::tensor::{NodeId, Tape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(rng, shape.to_vec(), std).requiring_grad()
}

/// Random values kept away from zero so relu kinks cannot sit on the
/// perturbation interval.
fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(data, shape.to_vec()).requiring_grad()
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = randn(&mut rng, &[3, 4], 0.8);
        let b = randn(&mut rng, &[4, 2], 0.8);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let c = tape.matmul(ids[0], ids[1]);
            tape.sum(c)
        };
        check_gradients(&build, &[a, b], H, TOL).unwrap();
    }
}

#[test]
fn add_scale_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let a = rand_off_kink(&mut rng, &[2, 5]);
        let b = rand_off_kink(&mut rng, &[2, 5]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let s = tape.add(ids[0], ids[1]);
            let s = tape.scale(s, -1.7);
            let r = tape.relu(s);
            tape.sum(r)
        };
        check_gradients(&build, &[a, b], H, TOL).unwrap();
    }
}

#[test]
fn add_row_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, &[4, 3], 1.0);
    let bias = randn(&mut rng, &[3], 1.0);
    let build = |tape: &mut Tape, ids: &[NodeId]| {
        let y = tape.add_row(ids[0], ids[1]);
        let sq = tape.relu(y);
        tape.sum(sq)
    };
    check_gradients(&build, &[a, bias], H, TOL).unwrap();
}

#[test]
fn softmax_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let a = randn(&mut rng, &[3, 5], 1.5);
        let w = randn(&mut rng, &[5, 2], 1.0);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let s = tape.softmax_rows(ids[0]);
            let proj = tape.matmul(s, ids[1]);
            tape.sum(proj)
        };
        check_gradients(&build, &[a, w], H, TOL).unwrap();
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a = randn(&mut rng, &[3, 8], 1.2);
        let gain = randn(&mut rng, &[8], 0.5);
        let bias = randn(&mut rng, &[8], 0.5);
        let w = randn(&mut rng, &[8, 1], 1.0);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let n = tape.layer_norm_rows(ids[0], ids[1], ids[2]);
            let proj = tape.matmul(n, ids[3]);
            tape.sum(proj)
        };
        check_gradients(&build, &[a, gain, bias, w], H, TOL).unwrap();
    }
}

#[test]
fn transpose_reshape_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[3, 4], 1.0);
    let build = |tape: &mut Tape, ids: &[NodeId]| {
        let t = tape.transpose(ids[0]); // [4,3]
        let r = tape.reshape(t, [3, 4]);
        let m = tape.add(r, ids[1]);
        let sm = tape.softmax_rows(m);
        tape.sum(sm)
    };
    check_gradients(&build, &[a, b], H, TOL).unwrap();
}

#[test]
fn gather_slice_concat_replace_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = randn(&mut rng, &[6, 4], 1.0);
    let base = randn(&mut rng, &[5, 4], 1.0);
    let rows = randn(&mut rng, &[2, 4], 1.0);
    let build = |tape: &mut Tape, ids: &[NodeId]| {
        let g = tape.gather_rows(ids[0], &[1, 1, 4, 0, 5]); // duplicate index on purpose
        let merged = tape.replace_rows(ids[1], ids[2], &[0, 3]);
        let s = tape.add(g, merged);
        let left = tape.slice_cols(s, 0, 2);
        let right = tape.slice_cols(s, 2, 2);
        let swapped = tape.concat_cols(&[right, left]);
        let top = tape.slice_rows(swapped, 1, 3);
        let sm = tape.softmax_rows(top);
        tape.sum(sm)
    };
    check_gradients(&build, &[table, base, rows], H, TOL).unwrap();
}

#[test]
fn dropout_gradients_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = randn(&mut rng, &[4, 4], 1.0);
    // the builder reseeds its own rng, so every evaluation sees one mask
    let build = |tape: &mut Tape, ids: &[NodeId]| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(1234);
        let d = tape.dropout(ids[0], 0.3, &mut mask_rng);
        let s = tape.softmax_rows(d);
        tape.sum(s)
    };
    check_gradients(&build, &[a], H, TOL).unwrap();
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let logits = randn(&mut rng, &[4, 6], 1.5);
        let targets = vec![2usize, 0, 5, 3];
        let weights = vec![1.0, 0.0, 1.0, 1.0]; // one masked row
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            tape.cross_entropy_rows(ids[0], &targets, &weights)
        };
        check_gradients(&build, &[logits], H, TOL).unwrap();
    }
}

#[test]
fn ctc_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..10 {
        let l = 4 + case % 4;
        let logits = randn(&mut rng, &[l, 5], 1.0);
        let labels = vec![1usize, 3];
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            tape.ctc_nll(ids[0], &labels, 0).expect("feasible case")
        };
        check_gradients(&build, &[logits], H, TOL).unwrap();
    }
}

/// A three-block network exercising embeddings, layer norm, attention-style
/// softmax mixing, input replacement, dropout and both loss heads at once.
fn mini_network(tape: &mut Tape, ids: &[NodeId]) -> NodeId {
    let (table, wq, wk, wv, gain, bias, w_out) =
        (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]);
    let x = tape.gather_rows(table, &[0, 3, 1, 2]); // block 1: embed
    let x = tape.layer_norm_rows(x, gain, bias);

    // block 2: single-head attention
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 0.5);
    let probs = tape.softmax_rows(scores);
    let ctx = tape.matmul(probs, v);
    let x = tape.add(x, ctx);

    // block 3: replacement, dropout, projection, losses
    let rep = tape.gather_rows(table, &[4]);
    let x = tape.replace_rows(x, rep, &[2]);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
    let x = tape.dropout(x, 0.2, &mut mask_rng);
    let logits = tape.matmul(x, w_out);
    let ce = tape.cross_entropy_rows(logits, &[1, 0, 2, 1], &[1.0, 1.0, 0.0, 1.0]);
    let ctc = tape.ctc_nll(logits, &[1, 2], 0).expect("feasible");
    let ctc_scaled = tape.scale(ctc, 0.5);
    tape.add(ce, ctc_scaled)
}

#[test]
fn mini_network_gradients_across_seeds() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let inputs = vec![
            randn(&mut rng, &[5, d], 0.8),  // embedding table
            randn(&mut rng, &[d, d], 0.6),  // wq
            randn(&mut rng, &[d, d], 0.6),  // wk
            randn(&mut rng, &[d, d], 0.6),  // wv
            randn(&mut rng, &[d], 0.5),     // ln gain
            randn(&mut rng, &[d], 0.5),     // ln bias
            randn(&mut rng, &[d, 3], 0.8),  // output projection (3 classes incl. blank 0)
        ];
        check_gradients(&mini_network, &inputs, H, TOL)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}
