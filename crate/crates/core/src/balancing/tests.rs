use super::*;
use crate::numerics::{gradcheck, GRADCHECK_EPS};
use proptest::prelude::*;

fn cfg(kind: BalancingKind) -> BalancerConfig {
    BalancerConfig {
        kind,
        ..BalancerConfig::default()
    }
}

fn randomize<F: Real>(p: &mut ParamSet<F>, seed: u64, std: f64) {
    let mut r = rng::stream(seed, "balancer-test");
    for t in p.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = F::from_f64_lossy(std * rng::normal(&mut r)));
    }
}

fn random_grid(seed: u64, tokens: usize, channels: usize) -> PatchGrid {
    let mut r = rng::stream(seed, "grid");
    let data = (0..tokens * channels).map(|_| rng::normal(&mut r) as f32).collect();
    PatchGrid::new(1, 1, tokens, channels, data).unwrap()
}

fn assert_simplex(w: &WeightVector) {
    assert!(w.as_slice().iter().all(|&a| a > 0.0));
    assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
}

#[test]
fn uniform_examples() {
    let w = uniform_weights(3).unwrap();
    assert_eq!(w.as_slice(), &[1.0 / 3.0; 3]);
    assert_eq!(uniform_weights(1).unwrap().as_slice(), &[1.0]);
    assert!(matches!(uniform_weights(0), Err(Error::Contract(_))));
    for t in 1..=16 {
        assert_simplex(&uniform_weights(t).unwrap());
    }
}

#[test]
fn mlp_zero_parameters_are_uniform() {
    let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Mlp), 8, &[4, 4, 4], 0).unwrap();
    randomize(b.params_mut(), 0, 0.0);
    let w = b.mlp_weights(&LossVector::detached(vec![0.3, 5.0, 1.0]).unwrap()).unwrap();
    for a in w.as_slice() {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn mlp_length_mismatch() {
    let b = Balancer::<f64>::init(&cfg(BalancingKind::Mlp), 8, &[4, 4], 0).unwrap();
    let l = LossVector::detached(vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(b.mlp_weights(&l), Err(Error::Dimension(_))));
}

#[test]
fn attn_identical_keys_are_uniform() {
    let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 6, &[5, 5, 5], 1).unwrap();
    randomize(b.params_mut(), 2, 1.0);
    let k0 = b.params().get("attn.k_map.0").clone();
    *b.params_mut().get_mut("attn.k_map.1") = k0.clone();
    *b.params_mut().get_mut("attn.k_map.2") = k0;
    let t = random_grid(3, 10, 5);
    let w = b
        .attn_weights(&random_grid(4, 10, 6), &[t.clone(), t.clone(), t])
        .unwrap();
    for a in w.as_slice() {
        assert!((a - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn attn_teacher_count_mismatch() {
    let b = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 6, &[5, 5], 1).unwrap();
    let r = b.attn_weights(&random_grid(1, 4, 6), &[random_grid(2, 4, 5)]);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

/// Independent dot-product routine for the attention logits.
fn reference_logits(b: &Balancer<f64>, student: &PatchGrid, teachers: &[PatchGrid]) -> Vec<f64> {
    let pool = |g: &PatchGrid| -> Vec<f64> {
        let c = g.channels();
        let mut m = vec![0.0; c];
        for tok in g.data().chunks(c) {
            for (o, v) in m.iter_mut().zip(tok) {
                *o += *v as f64;
            }
        }
        m.iter().map(|v| v / g.num_tokens() as f64).collect()
    };
    let project = |v: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        let d = w.shape()[1];
        (0..d).map(|j| v.iter().enumerate().map(|(i, x)| x * w.data()[i * d + j]).sum()).collect()
    };
    let q = project(&pool(student), b.params().get("attn.q_map"));
    teachers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let k = project(&pool(t), b.params().get(&format!("attn.k_map.{i}")));
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

#[test]
fn attn_argmax_matches_dot_product_oracle() {
    let chans = [5, 7, 3, 6];
    for draw in 0..100u64 {
        let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 8, &chans, draw).unwrap();
        randomize(b.params_mut(), draw, 1.0);
        let s = random_grid(draw * 7 + 1, 6, 8);
        let ts: Vec<_> = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| random_grid(draw * 7 + 2 + i as u64, 6, c))
            .collect();
        let w = b.attn_weights(&s, &ts).unwrap();
        let logits = reference_logits(&b, &s, &ts);
        assert_eq!(w.argmax(), argmax(&logits), "draw {draw}");
        // softmax of the scaled reference logits reproduces the weights
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| ((l - m) / (32f64).sqrt()).exp()).collect();
        let z: f64 = ex.iter().sum();
        for (a, e) in w.as_slice().iter().zip(&ex) {
            assert!((a - e / z).abs() < 1e-12);
        }
    }
}

#[test]
fn attn_common_shift_leaves_weights_unchanged() {
    // adding the same vector to every key map column shifts all logits by one constant
    // only when the pooled teacher inputs coincide; use equal pooled keys plus offsets
    let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 4, &[3, 3], 5).unwrap();
    randomize(b.params_mut(), 6, 1.0);
    let s = random_grid(1, 5, 4);
    let ts = [random_grid(2, 5, 3), random_grid(3, 5, 3)];
    let before = b.attn_weights(&s, &ts).unwrap();
    // append a constant channel of ones to every teacher and a shared key row
    let extend = |g: &PatchGrid| {
        let data: Vec<f32> = g.data().chunks(3).flat_map(|t| t.iter().copied().chain([1.0])).collect();
        PatchGrid::new(1, 1, 5, 4, data).unwrap()
    };
    let mut bigger = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 4, &[4, 4], 5).unwrap();
    *bigger.params_mut().get_mut("attn.q_map") = b.params().get("attn.q_map").clone();
    let mut r = rng::stream(9, "row");
    let shared: Vec<f64> = (0..32).map(|_| rng::normal(&mut r)).collect();
    for i in 0..2 {
        let name = format!("attn.k_map.{i}");
        let mut data = b.params().get(&name).data().to_vec();
        data.extend_from_slice(&shared);
        *bigger.params_mut().get_mut(&name) = Tensor::new(vec![4, 32], data).unwrap();
    }
    let after = bigger.attn_weights(&s, &[extend(&ts[0]), extend(&ts[1])]).unwrap();
    for (a, b) in before.as_slice().iter().zip(after.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn combine_examples() {
    let u = uniform_weights(3).unwrap();
    let l = LossVector::detached(vec![3.0, 6.0, 9.0]).unwrap();
    assert!((combine(&u, &l, 0.0).unwrap() - 6.0).abs() < 1e-12);
    assert!((entropy(u.as_slice()) - 3f64.ln()).abs() < 1e-9);
    let peaked = WeightVector::new(vec![1.0 - 2e-9, 1e-9, 1e-9]).unwrap();
    let l = LossVector::detached(vec![0.0, 4.0, 4.0]).unwrap();
    for c in [1e-1, 1e-3, 1e-6, 0.0] {
        assert!(combine(&peaked, &l, c).unwrap().abs() < 1e-7);
    }
    assert!(matches!(
        combine(&u, &LossVector::detached(vec![1.0]).unwrap(), 0.0),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn combine_on_tape_matches_values() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
    let ls: Vec<Var> = [1.0, 2.0, 4.0]
        .iter()
        .map(|&v| tape.constant(&Tensor::scalar(v)).unwrap())
        .collect();
    let out = combine_on_tape(&mut tape, a, &ls, 0.01).unwrap();
    let w = WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap();
    let l = LossVector::detached(vec![1.0, 2.0, 4.0]).unwrap();
    assert!((tape.scalar(out) - combine(&w, &l, 0.01).unwrap()).abs() < 1e-14);
}

#[test]
fn single_teacher_reduces_to_its_loss() {
    for kind in [BalancingKind::Uniform, BalancingKind::Mlp, BalancingKind::Attention] {
        let mut b = Balancer::<f64>::init(&cfg(kind), 4, &[3], 2).unwrap();
        randomize(b.params_mut(), 3, 1.0);
        let mut tape = Tape::new();
        let bound = b.params().bind(&mut tape).unwrap();
        let l = tape.constant(&Tensor::scalar(2.75)).unwrap();
        let alpha = match kind {
            BalancingKind::Uniform => b.uniform_on_tape(&mut tape).unwrap(),
            BalancingKind::Mlp => b.mlp_on_tape(&mut tape, &bound, &[2.75]).unwrap(),
            BalancingKind::Attention => {
                let s = tape.constant(&grid_matrix(&random_grid(1, 4, 4)).unwrap()).unwrap();
                let t = tape.constant(&grid_matrix(&random_grid(2, 4, 3)).unwrap()).unwrap();
                b.attn_on_tape(&mut tape, &bound, s, &[t]).unwrap()
            }
        };
        assert_eq!(tape.value(alpha), &[1.0]);
        let total = combine_on_tape(&mut tape, alpha, &[l], 0.01).unwrap();
        assert_eq!(tape.scalar(total), 2.75);
    }
}

#[test]
fn mlp_permutation_covariance() {
    let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Mlp), 4, &[2, 2, 2, 2], 0).unwrap();
    randomize(b.params_mut(), 8, 0.7);
    let perm = [2usize, 0, 3, 1];
    let mut pb = b.clone();
    let h = 16;
    let (w1, w2, b2) = (
        b.params().get("mlp.w1").data().to_vec(),
        b.params().get("mlp.w2").data().to_vec(),
        b.params().get("mlp.b2").data().to_vec(),
    );
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..h {
            pb.params_mut().get_mut("mlp.w1").data_mut()[j * 4 + dst] = w1[j * 4 + src];
            pb.params_mut().get_mut("mlp.w2").data_mut()[dst * h + j] = w2[src * h + j];
        }
        pb.params_mut().get_mut("mlp.b2").data_mut()[dst] = b2[src];
    }
    let l = vec![0.5, 1.5, 0.25, 3.0];
    let pl: Vec<f64> = perm.iter().map(|&s| l[s]).collect();
    let w = b.mlp_weights(&LossVector::detached(l).unwrap()).unwrap();
    let pw = pb.mlp_weights(&LossVector::detached(pl).unwrap()).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert!((pw.as_slice()[dst] - w.as_slice()[src]).abs() < 1e-15);
    }
}

#[test]
fn attn_permutation_covariance() {
    let chans = [3, 5, 4];
    let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 6, &chans, 0).unwrap();
    randomize(b.params_mut(), 10, 0.7);
    let s = random_grid(1, 8, 6);
    let ts: Vec<_> = chans.iter().enumerate().map(|(i, &c)| random_grid(20 + i as u64, 8, c)).collect();
    let perm = [1usize, 2, 0];
    let pchans: Vec<usize> = perm.iter().map(|&p| chans[p]).collect();
    let mut pb = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 6, &pchans, 0).unwrap();
    *pb.params_mut().get_mut("attn.q_map") = b.params().get("attn.q_map").clone();
    for (dst, &src) in perm.iter().enumerate() {
        *pb.params_mut().get_mut(&format!("attn.k_map.{dst}")) = b.params().get(&format!("attn.k_map.{src}")).clone();
    }
    let pts: Vec<_> = perm.iter().map(|&p| ts[p].clone()).collect();
    let w = b.attn_weights(&s, &ts).unwrap();
    let pw = pb.attn_weights(&s, &pts).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert!((pw.as_slice()[dst] - w.as_slice()[src]).abs() < 1e-15);
    }
}

#[test]
fn mlp_gradcheck() {
    for act in [Activation::Gelu, Activation::Relu] {
        let c = BalancerConfig {
            kind: BalancingKind::Mlp,
            activation: act,
            hidden: 6,
            ..BalancerConfig::default()
        };
        let mut b = Balancer::<f64>::init(&c, 4, &[1, 1, 1], 0).unwrap();
        randomize(b.params_mut(), 4, 0.8);
        let losses = [0.7, 1.9, 0.4];
        let inputs = b.params().tensors().to_vec();
        let report = gradcheck(
            &inputs,
            |tape, vars| {
                let bound = Bound(vars.to_vec());
                let a = b.mlp_on_tape(tape, &bound, &losses)?;
                let ls: Vec<Var> = losses
                    .iter()
                    .map(|&v| tape.constant(&Tensor::scalar(v)))
                    .collect::<Result<_>>()?;
                combine_on_tape(tape, a, &ls, 0.01)
            },
            200,
            1,
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{act:?} {report:?}");
    }
}

#[test]
fn attn_gradcheck() {
    let c = BalancerConfig {
        kind: BalancingKind::Attention,
        attn_dim: 4,
        ..BalancerConfig::default()
    };
    let mut b = Balancer::<f64>::init(&c, 5, &[3, 4], 0).unwrap();
    randomize(b.params_mut(), 5, 0.8);
    let s = grid_matrix::<f64>(&random_grid(1, 6, 5)).unwrap();
    let t0 = grid_matrix::<f64>(&random_grid(2, 6, 3)).unwrap();
    let t1 = grid_matrix::<f64>(&random_grid(3, 6, 4)).unwrap();
    let inputs = b.params().tensors().to_vec();
    let report = gradcheck(
        &inputs,
        |tape, vars| {
            let bound = Bound(vars.to_vec());
            let (sv, a, bb) = (tape.constant(&s)?, tape.constant(&t0)?, tape.constant(&t1)?);
            let alpha = b.attn_on_tape(tape, &bound, sv, &[a, bb])?;
            let ls = [tape.constant(&Tensor::scalar(1.3))?, tape.constant(&Tensor::scalar(0.4))?];
            combine_on_tape(tape, alpha, &ls, 0.01)
        },
        200,
        2,
        GRADCHECK_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    // logit gaps beyond ~745 underflow exp() to an exact zero, so parameter
    // scales stay in the range training actually visits
    fn mlp_weights_on_simplex(seed in any::<u64>(), t in 1usize..8, std in 0.0f64..1.0) {
        let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Mlp), 4, &vec![2; t], seed).unwrap();
        randomize(b.params_mut(), seed, std);
        let mut r = rng::stream(seed, "losses");
        let l: Vec<f64> = (0..t).map(|_| rng::normal(&mut r).abs() * 3.0).collect();
        assert_simplex(&b.mlp_weights(&LossVector::detached(l).unwrap()).unwrap());
    }

    #[test]
    fn attn_weights_on_simplex(seed in any::<u64>(), t in 1usize..6) {
        let chans: Vec<usize> = (0..t).map(|i| 2 + i).collect();
        let mut b = Balancer::<f64>::init(&cfg(BalancingKind::Attention), 4, &chans, seed).unwrap();
        randomize(b.params_mut(), seed, 1.0);
        let ts: Vec<_> = chans.iter().enumerate().map(|(i, &c)| random_grid(seed ^ i as u64, 4, c)).collect();
        assert_simplex(&b.attn_weights(&random_grid(seed, 4, 4), &ts).unwrap());
    }
}
