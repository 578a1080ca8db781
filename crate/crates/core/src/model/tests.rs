use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{check, FD_STEP};
use crate::graph::normalize;
use crate::stability::{block_relu, empirical_lipschitz, stack_lipschitz_bound, stack_relu};

fn tiny() -> ModelConfig {
    ModelConfig {
        context: 6,
        horizon: 4,
        channels: 3,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        graph_widths: vec![5, 4],
        dec_widths: vec![6],
        seed: 3,
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_a_bar(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut a = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i + 1..d {
            let w = if rng.random_bool(0.5) {
                rng.random_range(0.2..1.0)
            } else {
                0.0
            };
            a.row_mut(i)[j] = w;
            a.row_mut(j)[i] = w;
        }
    }
    normalize(&a)
}

/// Push `x` as a constant and return the matrix of `f(x)`.
fn run(model: &Model, x: &Matrix, f: impl FnOnce(&Model, &mut Tape, &[Var], Var) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let v = tape.constant(Tensor::from_matrix(x));
    let out = f(model, &mut tape, &vars, v).unwrap();
    tape.value(out).clone()
}

#[test]
fn config_validation_and_presets() {
    assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
    assert!(ModelConfig {
        graph_widths: vec![4, 0],
        ..tiny()
    }
    .validate()
    .is_err());
    let full = ModelConfig::preset("full", 48, 12, 8).unwrap();
    assert_eq!((full.d_model, full.n_heads, full.n_enc_layers), (64, 4, 2));
    let desk = ModelConfig::preset("desk", 48, 12, 8).unwrap();
    assert_eq!((desk.d_model, desk.n_heads, desk.n_enc_layers), (16, 2, 1));
    assert_eq!(
        (desk.graph_widths.clone(), desk.dec_widths.clone()),
        (vec![16, 16], vec![32])
    );
    assert!(ModelConfig::preset("huge", 48, 12, 8).is_err());
    let json = serde_json::to_string(&desk).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), desk);
}

#[test]
fn initial_rates() {
    let m = Model::new(tiny()).unwrap();
    assert!((m.kappa() - INIT_KAPPA).abs() < 1e-12);
    assert!((m.gamma() - INIT_GAMMA).abs() < 1e-12);
}

#[test]
fn lift_examples() {
    let m = Model::new(tiny()).unwrap();
    let c = m.config.clone();
    let zero = Matrix::zeros(c.context, c.channels);
    let out = run(&m, &zero, |m, t, v, x| m.lift_and_pe(t, v, x));
    let pe = m.params.get(m.params.slot("pe").unwrap()).clone();
    let per_channel = c.context * c.d_model;
    for i in 0..c.channels {
        assert_eq!(&out.data()[i * per_channel..(i + 1) * per_channel], pe.data());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = random_matrix(c.context, c.channels, &mut rng);
    for l in 0..c.context {
        x.row_mut(l)[2] = x.row(l)[0];
    }
    let base = run(&m, &x, |m, t, v, x| m.lift_and_pe(t, v, x));
    assert_eq!(base.data()[..per_channel], base.data()[2 * per_channel..]);

    let mut bumped = x.clone();
    bumped.row_mut(4)[1] += 0.5;
    let moved = run(&m, &bumped, |m, t, v, x| m.lift_and_pe(t, v, x));
    for (k, (a, b)) in base.data().iter().zip(moved.data()).enumerate() {
        let (ch, pos) = (k / per_channel, (k % per_channel) / c.d_model);
        assert_eq!(a != b, ch == 1 && pos == 4, "index {k}");
    }

    let wrong = Matrix::zeros(c.context + 1, c.channels);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let v = tape.constant(Tensor::from_matrix(&wrong));
    assert!(m.lift_and_pe(&mut tape, &vars, v).is_err());
}

#[test]
fn temporal_encoding_shape_and_sharing() {
    let cfg = ModelConfig::full_scale(10, 4, 3);
    let m = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = random_matrix(10, 3, &mut rng);
    for l in 0..10 {
        x.row_mut(l)[1] = x.row(l)[0];
    }
    let z = run(&m, &x, |m, t, v, x| {
        let h0 = m.lift_and_pe(t, v, x)?;
        m.temporal_encode(t, v, h0)
    });
    assert_eq!(z.shape(), &[3, 64]);
    assert_eq!(z.data()[..64], z.data()[64..128]);
    assert_ne!(z.data()[..64], z.data()[128..]);
}

#[test]
fn last_position_shortcut_matches_full_sequence() {
    let m = Model::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(6, 3, &mut rng);
    let fast = run(&m, &x, |m, t, v, x| {
        let h0 = m.lift_and_pe(t, v, x)?;
        m.temporal_encode(t, v, h0)
    });
    let slow = run(&m, &x, |m, t, v, x| {
        let mut h = m.lift_and_pe(t, v, x)?;
        for s in &m.slots.encoder {
            h = m.encoder_layer(t, v, s, h, false)?;
        }
        let last = t.slice(h, 1, 5, 1)?;
        t.reshape(last, &[3, 8])
    });
    for (a, b) in fast.data().iter().zip(slow.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn graph_block_degenerate_cases() {
    let mut m = Model::new(ModelConfig {
        graph_widths: vec![8],
        ..tiny()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random_matrix(3, 8, &mut rng);
    let w = random_matrix(8, 8, &mut rng);
    let zero = Matrix::zeros(8, 8);
    let eye = Matrix::identity(3);
    let encode = |m: &Model, a: &Matrix| {
        run(m, &z, |m, t, v, x| {
            let a = t.constant(Tensor::from_matrix(a));
            m.graph_encode(t, v, x, a)
        })
        .to_matrix()
        .unwrap()
    };
    let relu_zw = z.matmul(&w).unwrap().map(|v| v.max(0.0));

    m.set_graph_weights(0, &w, &zero).unwrap();
    assert_eq!(encode(&m, &eye), relu_zw);
    m.set_graph_weights(0, &zero, &w).unwrap();
    assert_eq!(encode(&m, &eye), relu_zw);

    let a_bar = random_a_bar(3, &mut rng);
    let u = random_matrix(8, 8, &mut rng);
    m.set_graph_weights(0, &w, &u).unwrap();
    let direct = block_relu(&z, &a_bar, &w, &u).unwrap();
    assert!(encode(&m, &a_bar).max_abs_diff(&direct) < 1e-12);
    assert!(m.set_graph_weights(0, &Matrix::zeros(8, 7), &u).is_err());
}

#[test]
fn graph_stack_within_lipschitz_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Model::new(ModelConfig {
        graph_widths: vec![6, 6, 6],
        d_model: 6,
        ..tiny()
    })
    .unwrap();
    let layers = m.graph_weights().unwrap();
    let bound = stack_lipschitz_bound(&layers).unwrap();
    for _ in 0..5 {
        let a_bar = random_a_bar(3, &mut rng);
        let emp = empirical_lipschitz(|z| stack_relu(z, &a_bar, &layers), 3, 6, 100, &mut rng).unwrap();
        assert!(emp <= bound * (1.0 + 1e-8), "{emp} > {bound}");
    }
}

#[test]
fn decode_shares_mlp_across_nodes() {
    let m = Model::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut h = random_matrix(3, 4, &mut rng);
    let first = h.row(0).to_vec();
    h.row_mut(2).copy_from_slice(&first);
    let y = run(&m, &h, |m, t, v, x| m.decode(t, v, x)).to_matrix().unwrap();
    assert_eq!(y.shape(), (4, 3));
    assert_eq!(y.column(0), y.column(2));
}

#[test]
fn forward_is_pure_and_shaped() {
    let m = Model::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(6, 3, &mut rng);
    let a = random_a_bar(3, &mut rng);
    let y1 = m.predict(&x, &a).unwrap();
    let y2 = m.predict(&x, &a).unwrap();
    assert_eq!(y1.shape(), (4, 3));
    assert_eq!(y1, y2);
    assert!(m.predict(&x, &Matrix::identity(4)).is_err());
}

#[test]
fn channel_permutation_equivariance() {
    let m = Model::new(ModelConfig { channels: 5, ..tiny() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_matrix(6, 5, &mut rng);
    let a = random_a_bar(5, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let y = m.predict(&x, &a).unwrap();
    let ap = Matrix::from_fn(5, 5, |i, j| a[(perm[i], perm[j])]);
    let yp = m.predict(&x.select_columns(&perm), &ap).unwrap();
    assert!(yp.max_abs_diff(&y.select_columns(&perm)) < 1e-12);
}

/// Random offsets keep zero-initialized biases off ReLU kinks.
fn jitter(p: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = p.data().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    Tensor::new(p.shape().to_vec(), data).unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::new(tiny()).unwrap();
    let a_bar = random_a_bar(3, &mut rng);
    let n_params = model.params.len();
    for trial in 0..3 {
        let x = random_matrix(6, 3, &mut rng);
        let probe = random_matrix(4, 3, &mut rng);
        let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, p)| jitter(p, &mut rng)).collect();
        inputs.push(Tensor::from_matrix(&x));
        let f = |t: &mut Tape, v: &[Var]| {
            let a = t.constant(Tensor::from_matrix(&a_bar));
            let y = model.forward(t, &v[..n_params], v[n_params], a)?;
            let p = t.constant(Tensor::from_matrix(&probe));
            let w = t.mul(y, p)?;
            Ok(t.sum(w))
        };
        let r = check(&inputs, f, FD_STEP, 1).unwrap();
        assert!(r.max_rel_err < 1e-4, "trial {trial}: {r:?}");
    }
}

#[test]
fn encoder_gradient_wrt_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::new(ModelConfig {
        n_enc_layers: 1,
        ..tiny()
    })
    .unwrap();
    let x = random_matrix(6, 3, &mut rng);
    let n = model.params.len();
    let params: Vec<Tensor> = model.params.iter().map(|(_, p)| p.clone()).collect();
    let f = |t: &mut Tape, v: &[Var]| {
        let consts: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
        let h0 = model.lift_and_pe(t, &consts, v[0])?;
        let z = model.temporal_encode(t, &consts, h0)?;
        Ok(t.sum(z))
    };
    let r = check(&[Tensor::from_matrix(&x)], f, FD_STEP, 1).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    assert_eq!(n, model.params.len());
}

#[test]
fn rebuild_from_params() {
    let m = Model::new(tiny()).unwrap();
    let again = Model::from_params(tiny(), &m.params).unwrap();
    assert_eq!(again, m);
    let other = Model::new(ModelConfig { d_model: 4, ..tiny() }).unwrap();
    assert!(Model::from_params(tiny(), &other.params).is_err());
}
