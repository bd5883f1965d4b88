//! Builders and finite-difference machinery shared by the integration suites.
#![allow(dead_code)]

use logoformer::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_attn(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttnParams {
    assert_eq!(d % heads, 0, "head count must divide the embedding width");
    let dh = d / heads;
    AttnParams {
        query: (0..heads).map(|_| uniform(rng, vec![d, dh], -0.5, 0.5)).collect(),
        key: (0..heads).map(|_| uniform(rng, vec![d, dh], -0.5, 0.5)).collect(),
        value: (0..heads).map(|_| uniform(rng, vec![d, dh], -0.5, 0.5)).collect(),
        output: uniform(rng, vec![d, d], -0.5, 0.5),
        ln_gain: uniform(rng, vec![d], 0.5, 1.5),
        ln_bias: uniform(rng, vec![d], -0.2, 0.2),
    }
}

pub fn random_mlp(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> MlpParams {
    MlpParams {
        w1: uniform(rng, vec![d, hidden], -0.5, 0.5),
        b1: uniform(rng, vec![hidden], -0.2, 0.2),
        w2: uniform(rng, vec![hidden, d], -0.5, 0.5),
        b2: uniform(rng, vec![d], -0.2, 0.2),
        ln_gain: uniform(rng, vec![d], 0.5, 1.5),
        ln_bias: uniform(rng, vec![d], -0.2, 0.2),
    }
}

/// MLP whose second layer is zeroed, so the whole sublayer adds nothing.
pub fn inert_mlp(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> MlpParams {
    let mut mlp = random_mlp(rng, d, hidden);
    mlp.w2 = Tensor::zeros(vec![hidden, d]).unwrap();
    mlp.b2 = Tensor::zeros(vec![d]).unwrap();
    mlp
}

pub fn random_block(
    rng: &mut ChaCha8Rng,
    d: usize,
    heads: usize,
    hidden: usize,
    pool: PoolParams,
) -> BlockParams {
    BlockParams {
        local: random_attn(rng, d, heads),
        global: random_attn(rng, d, heads),
        pool,
        mlp: random_mlp(rng, d, hidden),
    }
}

pub fn random_grid(rng: &mut ChaCha8Rng, f: usize, h: usize, w: usize, d: usize) -> TokenGrid {
    let tokens = uniform(rng, vec![f * h * w + 1, d], -1.0, 1.0);
    TokenGrid::new(tokens, f, h, w).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with the same floor the training gradient checker uses.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-6f64.max(a.abs()).max(b.abs())
}

const FD_STEP: f64 = 1e-5;

/// Max relative error between the tape gradient of `f` with respect to its
/// input and a central finite difference, where `f` maps the traced input to
/// a scalar tape node. The closure runs on fresh tapes for the perturbed
/// evaluations, so it must be deterministic in `x`.
pub fn fd_check<F>(x: &Tensor, f: F) -> f64
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x).unwrap();
    let out = f(&mut tape, &leaf);
    assert_eq!(out.numel(), 1, "finite-difference target must be scalar");
    let grads = tape.backward(&out).unwrap();
    let analytic = grads.wrt(&leaf).expect("input must receive a gradient").data().to_vec();

    let value_at = |data: &[f64]| -> f64 {
        let probe = Tensor::new(x.shape().to_vec(), data.to_vec()).unwrap();
        let mut t = Tape::new();
        let l = t.leaf(&probe).unwrap();
        f(&mut t, &l).item()
    };

    let mut worst = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let numeric = (value_at(&plus) - value_at(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// One entry of the per-operation gradient sweep.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel: f64,
}

/// Finite-difference checks every differentiable tape operation at small
/// random shapes. Returns one worst-case entry per operation.
pub fn per_op_checks() -> Vec<OpCheck> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, max_rel: f64| out.push(OpCheck { name, max_rel });

    let mut worst: f64;

    // matmul, left and right operands
    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let a = uniform(&mut r, vec![3, 4], -1.0, 1.0);
        let b = uniform(&mut r, vec![4, 2], -1.0, 1.0);
        let w = uniform(&mut r, vec![3, 2], -1.0, 1.0);
        worst = worst.max(fd_check(&a, |t, l| {
            let y = t.matmul(l, &b).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
        worst = worst.max(fd_check(&b, |t, l| {
            let y = t.matmul(&a, l).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("matmul", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(200 + seed);
        let x = uniform(&mut r, vec![3, 4], -1.0, 1.0);
        let w = uniform(&mut r, vec![4, 3], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.transpose(l).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("transpose", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(300 + seed);
        let a = uniform(&mut r, vec![2, 5], -1.0, 1.0);
        let b = uniform(&mut r, vec![2, 5], -1.0, 1.0);
        let w = uniform(&mut r, vec![2, 5], -1.0, 1.0);
        worst = worst.max(fd_check(&a, |t, l| {
            let y = t.add(l, &b).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
        worst = worst.max(fd_check(&b, |t, l| {
            let y = t.mul(&a, l).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("add/mul", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(400 + seed);
        let x = uniform(&mut r, vec![3, 4], -1.0, 1.0);
        let v = uniform(&mut r, vec![4], -1.0, 1.0);
        let w = uniform(&mut r, vec![3, 4], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.add_row_vec(l, &v).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
        worst = worst.max(fd_check(&v, |t, l| {
            let y = t.add_row_vec(&x, l).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("add_row_vec", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(500 + seed);
        let x = uniform(&mut r, vec![2, 6], -1.0, 1.0);
        let w = uniform(&mut r, vec![2, 6], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.scale(l, -1.7).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("scale", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(600 + seed);
        let x = uniform(&mut r, vec![3, 5], -2.0, 2.0);
        let w = uniform(&mut r, vec![3, 5], -1.0, 1.0);
        for axis in [0usize, 1] {
            worst = worst.max(fd_check(&x, |t, l| {
                let y = t.softmax(l, axis).unwrap();
                let p = t.mul(&y, &w).unwrap();
                t.sum(&p).unwrap()
            }));
        }
    }
    push("softmax", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(700 + seed);
        let x = uniform(&mut r, vec![3, 6], -1.0, 1.0);
        let gain = uniform(&mut r, vec![6], 0.5, 1.5);
        let bias = uniform(&mut r, vec![6], -0.3, 0.3);
        let w = uniform(&mut r, vec![3, 6], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.layer_norm(l, &gain, &bias, LN_EPS).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
        worst = worst.max(fd_check(&gain, |t, l| {
            let y = t.layer_norm(&x, l, &bias, LN_EPS).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
        worst = worst.max(fd_check(&bias, |t, l| {
            let y = t.layer_norm(&x, &gain, l, LN_EPS).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("layer_norm", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(800 + seed);
        let x = uniform(&mut r, vec![2, 7], -3.0, 3.0);
        let w = uniform(&mut r, vec![2, 7], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.gelu(l).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("gelu", worst);

    // select_rows with a repeated index, so gradients must accumulate
    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(900 + seed);
        let x = uniform(&mut r, vec![4, 3], -1.0, 1.0);
        let w = uniform(&mut r, vec![5, 3], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.select_rows(l, &[2, 0, 3, 2, 1]).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("select_rows", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(1000 + seed);
        let a = uniform(&mut r, vec![2, 3], -1.0, 1.0);
        let b = uniform(&mut r, vec![1, 3], -1.0, 1.0);
        let wr = uniform(&mut r, vec![3, 3], -1.0, 1.0);
        let c = uniform(&mut r, vec![2, 2], -1.0, 1.0);
        let wc = uniform(&mut r, vec![2, 5], -1.0, 1.0);
        worst = worst.max(fd_check(&a, |t, l| {
            let y = t.concat_rows(&[l, &b]).unwrap();
            let p = t.mul(&y, &wr).unwrap();
            t.sum(&p).unwrap()
        }));
        worst = worst.max(fd_check(&c, |t, l| {
            let y = t.concat_cols(&[&a, l]).unwrap();
            let p = t.mul(&y, &wc).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("concat_rows/cols", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(1100 + seed);
        let x = uniform(&mut r, vec![4, 6], -1.0, 1.0);
        let w = uniform(&mut r, vec![2, 12], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.reshape(l, vec![2, 12]).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("reshape", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(1200 + seed);
        let x = uniform(&mut r, vec![6, 4], -1.0, 1.0);
        let w = uniform(&mut r, vec![2, 4], -1.0, 1.0);
        worst = worst.max(fd_check(&x, |t, l| {
            let y = t.mean_pool_rows(l, 3).unwrap();
            let p = t.mul(&y, &w).unwrap();
            t.sum(&p).unwrap()
        }));
    }
    push("mean_pool_rows", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(1300 + seed);
        let x = uniform(&mut r, vec![5], -2.0, 2.0);
        worst = worst.max(fd_check(&x, |t, l| t.cross_entropy(l, 2).unwrap()));
    }
    push("cross_entropy", worst);

    worst = 0.0;
    for seed in 0..3u64 {
        let mut r = rng(1400 + seed);
        let x = uniform(&mut r, vec![5], -2.0, 2.0);
        worst = worst.max(fd_check(&x, |t, l| t.compact_term(l, 1).unwrap()));
    }
    push("compact_term", worst);

    out
}
