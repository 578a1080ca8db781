use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, FD_STEP};
use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn relu_value_and_mask() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x), vec![0.0, 0.0, 1.0]);
}

#[test]
fn softplus_derivative_is_sigmoid() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.0));
    let y = t.softplus(x);
    assert!((t.value(y).item() - 2f64.ln()).abs() < 1e-15);
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x), vec![0.5]);
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    assert_eq!(softplus_scalar(800.0), 800.0);
    assert!(softplus_scalar(-800.0) >= 0.0);
    assert!((inverse_softplus(softplus_scalar(0.2)) - 0.2).abs() < 1e-12);
}

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2, 3, 4]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x), vec![1.0; 24]);
}

#[test]
fn mean_squared_gradient() {
    let mut t = Tape::new();
    let xs = vec![0.5, -1.0, 2.0, 3.0];
    let cs = vec![1.0, 1.0, -1.0, 0.0];
    let x = t.param(Tensor::vector(xs.clone()));
    let c = t.constant(Tensor::vector(cs.clone()));
    let d = t.sub(x, c).unwrap();
    let sq = t.square(d);
    let l = t.mean(sq);
    let g = t.backward(l).unwrap();
    let expect: Vec<f64> = xs.iter().zip(&cs).map(|(x, c)| 2.0 * (x - c) / 4.0).collect();
    assert_eq!(g.wrt(x), expect);
    assert!(g.get(c).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(t.backward(x).is_err());
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = t.param(Tensor::vector(vec![3.0]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(unused), vec![0.0]);
}

#[test]
fn fan_out_accumulates() {
    // f = sum(x*x) + sum(3x) -> 2x + 3
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, -2.0]));
    let sq = t.mul(x, x).unwrap();
    let a = t.sum(sq);
    let three = t.scale(x, 3.0);
    let b = t.sum(three);
    let l = t.add(a, b).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(x), vec![5.0, -1.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.param(Tensor::zeros(&[3, 4]));
    let b = t.param(Tensor::zeros(&[3, 2]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("matmul") && msg.contains("[3, 4]") && msg.contains("[3, 2]"),
        "{msg}"
    );
    assert!(t.add(a, b).is_err());
}

#[test]
fn broadcast_bias_and_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let b = t.param(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let k = t.param(Tensor::scalar(2.0));
    let y = t.add(x, b).unwrap();
    let z = t.mul(y, k).unwrap();
    assert_eq!(t.value(z).data(), &[22.0, 44.0, 66.0, 28.0, 50.0, 72.0]);
    let s = t.sum(z);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(b), vec![4.0, 4.0, 4.0]);
    assert_eq!(g.wrt(k), vec![11.0 + 22.0 + 33.0 + 14.0 + 25.0 + 36.0]);
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let w = random(&[3, 2], &mut rng);
    let r = check(
        &[a, b],
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            let wv = t.constant(w.clone());
            let p = t.mul(c, wv)?;
            Ok(t.sum(p))
        },
        FD_STEP,
        1,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

/// Every primitive, on 20 random inputs each, through a random linear
/// functional so that all output coordinates matter.
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![3, 4], vec![4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 4], vec![1]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |t, v| Ok(t.scale(v[0], -0.7))),
        ("relu", vec![vec![6]], |t, v| Ok(t.relu(v[0]))),
        ("abs", vec![vec![6]], |t, v| Ok(t.abs(v[0]))),
        ("softplus", vec![vec![6]], |t, v| Ok(t.softplus(v[0]))),
        ("sigmoid", vec![vec![6]], |t, v| Ok(t.sigmoid(v[0]))),
        ("exp", vec![vec![6]], |t, v| Ok(t.exp(v[0]))),
        ("sqrt", vec![vec![6]], |t, v| {
            let sq = t.square(v[0]);
            let pos = t.shift(sq, 0.5);
            Ok(t.sqrt(pos))
        }),
        ("square", vec![vec![6]], |t, v| Ok(t.square(v[0]))),
        ("mean", vec![vec![2, 5]], |t, v| Ok(t.mean(v[0]))),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("transpose", vec![vec![2, 3, 4]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("slice", vec![vec![3, 5, 2]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("gather", vec![vec![7]], |t, v| t.gather(v[0], vec![0, 3, 3, 6, 1])),
        ("softmax", vec![vec![3, 5]], |t, v| Ok(t.softmax_rowwise(v[0]))),
        (
            "layernorm",
            vec![vec![3, 6]],
            |t, v| Ok(t.layernorm_rowwise(v[0], 1e-5)),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, shapes, build) in cases {
        for _ in 0..20 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            // Output shape of this case, for the probing weights.
            let mut probe = Tape::new();
            let pv: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
            let out = build(&mut probe, &pv).unwrap();
            let w = random(probe.shape(out), &mut rng);
            let r = check(
                &inputs,
                |t, v| {
                    let y = build(t, v)?;
                    let wv = t.constant(w.clone());
                    let p = t.mul(y, wv)?;
                    Ok(t.sum(p))
                },
                FD_STEP,
                1,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.param(random(&[5, 7], &mut rng));
        let b = t.param(random(&[7, 3], &mut rng));
        let c = t.matmul(a, b).unwrap();
        let s = t.softmax_rowwise(c);
        let l = t.layernorm_rowwise(s, 1e-5);
        let m = t.mean(l);
        let g = t.backward(m).unwrap();
        (t.value(c).data().to_vec(), g.wrt(a))
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut ps = ParamStore::new();
    ps.add("w", Tensor::scalar(0.0));
    let mut opt = Adam::new(AdamConfig::with_lr(0.1), &ps);
    opt.step(&mut ps, &[vec![1.0]]).unwrap();
    let w = ps.get(0).item();
    assert!((w + 0.1).abs() < 1e-8, "{w}");
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut ps = ParamStore::new();
    ps.add("w", Tensor::vector(vec![0.3, -0.2]));
    let before = ps.clone();
    let mut opt = Adam::new(AdamConfig::default(), &ps);
    opt.step(&mut ps, &[vec![0.0, 0.0]]).unwrap();
    assert_eq!(ps, before);
    assert_eq!(opt.first_moment(0), &[0.0, 0.0]);
    assert_eq!(opt.second_moment(0), &[0.0, 0.0]);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut ps = ParamStore::new();
    ps.add("a", Tensor::scalar(1.0));
    ps.add("decoder.w", Tensor::scalar(1.0));
    let before = ps.clone();
    let mut opt = Adam::new(AdamConfig::default(), &ps);
    let err = opt.step(&mut ps, &[vec![1.0], vec![f64::NAN]]).unwrap_err();
    assert!(err.to_string().contains("decoder.w"));
    assert_eq!(ps, before);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        ps.add("w", random(&[4, 3], &mut rng));
        let target = random(&[4, 3], &mut rng);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &ps);
        for _ in 0..100 {
            let mut t = Tape::new();
            let vars = ps.bind(&mut t);
            let c = t.constant(target.clone());
            let d = t.sub(vars[0], c).unwrap();
            let sq = t.square(d);
            let l = t.mean(sq);
            let g = t.backward(l).unwrap();
            let grads = ps.collect_grads(&g, &vars);
            opt.step(&mut ps, &grads).unwrap();
        }
        ps.get(0).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::new();
    ps.add("lift.w", random(&[1, 8], &mut rng));
    ps.add("enc.0.wq", random(&[8, 8], &mut rng));
    ps.add("raw_kappa", Tensor::scalar(-1.2));
    let ck = Checkpoint {
        meta: serde_json::json!({"seed": 7, "note": "x"}),
        params: ps,
    };
    let bytes = ck.to_bytes().unwrap();
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    assert_eq!(manifest["tensors"][1]["name"], "enc.0.wq");
    assert_eq!(manifest["tensors"][1]["offset"], 8);
    assert_eq!(manifest["tensors"][2]["shape"], serde_json::json!([1]));
    assert_eq!(bytes.len(), 8 + len + 8 * (8 + 64 + 1));
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
