//! Reverse-mode vs central differences for every exported primitive.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

type Build = fn(&mut Graph<f64>, &[Var], &Shapes) -> Result<Var>;

#[derive(Clone, Copy, Debug)]
struct Shapes {
    n: usize,
    m: usize,
    k: usize,
}

/// Contracts `op(inputs)` against fixed random weights to obtain a scalar,
/// then compares the tape gradient with the finite-difference oracle.
fn check(inputs: Vec<Tensor<f64>>, shapes: Shapes, seed: u64, build: Build) -> f64 {
    let mut set = ParameterSet::new();
    for (i, t) in inputs.into_iter().enumerate() {
        set.insert(Parameter::new(format!("x{i}"), t, true)).unwrap();
    }
    let eval = |p: &ParameterSet<f64>, g: &mut Graph<f64>| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = p.iter().map(|param| g.leaf(param.value.clone(), true)).collect();
        let out = build(g, &vars, &shapes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.value(out).shape().to_vec();
        let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
        let prod = g.mul(out, w)?;
        Ok((g.sum(prod)?, vars))
    };
    let mut g = Graph::new();
    let (loss, vars) = eval(&set, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let fd = finite_difference_gradients(
        |p| {
            let mut g = Graph::new();
            let (loss, _) = eval(p, &mut g)?;
            Ok(g.value(loss).data()[0])
        },
        &set,
        1e-6,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for ((_, numeric), v) in fd.iter().zip(vars) {
        let zero = Tensor::zeros(numeric.shape());
        let analytic = grads.get(v).unwrap_or(&zero);
        for (&a, &b) in analytic.data().iter().zip(numeric.data()) {
            // below 1e-4 the central-difference roundoff dominates
            worst = worst.max(relative_error(a, b, 1e-4));
        }
    }
    worst
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn run(seed: u64, n: usize, m: usize, k: usize, arity: &[(usize, usize)], build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = Shapes { n, m, k };
    let inputs = arity.iter().map(|&(r, c)| rand_t(&[r, c], &mut rng)).collect();
    let worst = check(inputs, shapes, seed ^ 0x5eed, build);
    assert!(worst <= 1e-4, "max relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8, k in 1usize..=8) {
        run(seed, n, m, k, &[(n, k), (k, m)], |g, v, _| g.matmul(v[0], v[1]));
    }

    #[test]
    fn matmul_nt(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8, k in 1usize..=8) {
        run(seed, n, m, k, &[(n, k), (m, k)], |g, v, _| g.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn transpose_add_sub_mul_scale(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m), (m, n), (n, m)], |g, v, _| {
            let t = g.transpose(v[1])?;
            let a = g.add(v[0], t)?;
            let p = g.mul(a, v[2])?;
            let s = g.sub(p, v[0])?;
            g.scale(s, -1.5)
        });
    }

    #[test]
    fn row_broadcasts(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m), (1, m), (1, m)], |g, v, _| {
            let a = g.mul_row(v[0], v[1])?;
            g.add_row(a, v[2])
        });
    }

    #[test]
    fn layer_norm(seed in 0u64..1000, n in 1usize..=8, m in 2usize..=8) {
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.layer_norm(v[0], 1e-5));
    }

    #[test]
    fn quick_gelu(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.quick_gelu(v[0]));
    }

    #[test]
    fn softmax_and_log_softmax(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.softmax_rows(v[0]));
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.log_softmax_rows(v[0]));
    }

    #[test]
    fn reductions(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.mean_rows(v[0]));
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.sum_rows(v[0]));
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.mean(v[0]));
    }

    #[test]
    fn l2_normalize(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m)], |g, v, _| g.l2_normalize_rows(v[0], 1e-8));
    }

    #[test]
    fn slicing_and_concatenation(seed in 0u64..1000, n in 2usize..=8, m in 2usize..=8) {
        run(seed, n, m, 0, &[(n, m), (n, m)], |g, v, s| {
            let top = g.slice_rows(v[0], 1, s.n - 1)?;
            let left = g.slice_cols(top, 0, s.m - 1)?;
            let right = g.slice_rows(v[1], 0, s.n - 1)?;
            let right = g.slice_cols(right, 1, 1)?;
            let c = g.concat_cols(&[left, right])?;
            g.concat_rows(&[c, v[1]])
        });
    }

    #[test]
    fn gather_and_pick(seed in 0u64..1000, n in 1usize..=8, m in 1usize..=8) {
        run(seed, n, m, 0, &[(n, m)], |g, v, s| {
            let ids: Vec<usize> = (0..s.n + 2).map(|i| (i * 3) % s.n).collect();
            g.gather(v[0], &ids)
        });
        run(seed, n, m, 0, &[(n, m)], |g, v, s| {
            let cols: Vec<usize> = (0..s.n).map(|i| (i * 5) % s.m).collect();
            g.pick(v[0], &cols)
        });
    }

    #[test]
    fn masked_multi_head_attention(seed in 0u64..1000, n in 1usize..=8, heads in 1usize..=2) {
        let d = 4;
        run(seed, n, d, heads, &[(n, d), (n, d), (n, d)], |g, v, s| {
            let mut mask = Tensor::zeros(&[s.n, s.n]);
            for i in 0..s.n {
                for j in (i + 1)..s.n {
                    mask.data_mut()[i * s.n + j] = MASK_BLOCKED;
                }
            }
            let mask = g.constant(mask);
            g.multi_head_attention(v[0], v[1], v[2], Some(mask), s.k)
        });
    }
}

#[test]
fn graph_attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.multi_head_attention(qv, kv, vv, None, 1).unwrap();
    let direct = masked_self_attention(&q, &k, &v, None).unwrap();
    for (a, b) in g.value(out).data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn repeated_backward_is_identical_and_skips_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f32>::new();
    let w = g.leaf(Tensor::randn(&[3, 3], 1.0, &mut rng), true);
    let frozen = g.leaf(Tensor::randn(&[3, 3], 1.0, &mut rng), false);
    let h = g.matmul(w, frozen).unwrap();
    let h = g.layer_norm(h, 1e-5).unwrap();
    let s = g.softmax_rows(h).unwrap();
    let loss = g.sum(s).unwrap();
    let loss = g.scale(loss, 0.5).unwrap();
    let a = g.backward(loss).unwrap();
    let b = g.backward(loss).unwrap();
    assert_eq!(a.get(w).unwrap().data(), b.get(w).unwrap().data());
    assert!(a.get(frozen).is_none());
}

#[test]
fn backward_requires_scalar_output() {
    let mut g = Graph::<f32>::new();
    let w = g.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(g.backward(w).is_err());
}
