//! Random per-operator gradient-check cases.

use pdegen_core::autodiff::{
    grad_check, BatchNormState, Graph, LocalReducer, Mode, NodeId, Padding, Tensor, DEFAULT_STEP,
};
use pdegen_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of distinct operator cases understood by [`op_case`].
pub const OP_CASES: usize = 7;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Takes consecutive chunks of `point` as parameters of the given shapes.
pub fn params(g: &mut Graph<f64>, point: &[f64], shapes: &[&[usize]]) -> Vec<NodeId> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let id = g.param(t(s, &point[off..off + n]));
            off += n;
            id
        })
        .collect()
}

/// Weighted sum so every output entry carries a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = g.input(t(&shape, &random(&mut rng, n)));
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// One random case for each differentiable operator, returning the gradient
/// check error.
pub fn op_case(op: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(2..4usize);
    let c = rng.random_range(1..3usize);
    let h = rng.random_range(3..6usize);
    let w = rng.random_range(3..6usize);
    let n4 = b * c * h * w;
    let res = match op {
        0 => {
            let pad = if seed.is_multiple_of(2) { Padding::Same } else { Padding::Valid };
            let co = rng.random_range(1..3usize);
            let point = random(&mut rng, n4 + co * c * 9);
            grad_check(
                |g, p| {
                    let ps = params(g, p, &[&[b, c, h, w], &[co, c, 3, 3]]);
                    let y = g.conv2d(ps[0], ps[1], pad)?;
                    weighted_sum(g, y, seed)
                },
                &point,
                DEFAULT_STEP,
            )
        }
        1 => {
            let point = random(&mut rng, n4);
            grad_check(
                |g, p| {
                    let x = g.param(t(&[b, c, h, w], p));
                    let y = g.upsample2x(x)?;
                    weighted_sum(g, y, seed)
                },
                &point,
                DEFAULT_STEP,
            )
        }
        2 => {
            let mut point = random(&mut rng, n4 + 2 * c);
            for v in &mut point[n4..n4 + c] {
                *v += 1.5;
            }
            grad_check(
                |g, p| {
                    let ps = params(g, p, &[&[b, c, h, w], &[c], &[c]]);
                    let mut st = BatchNormState::new(c);
                    let y = g.batchnorm(
                        ps[0],
                        ps[1],
                        ps[2],
                        &mut st,
                        Mode::Train,
                        true,
                        &mut LocalReducer,
                    )?;
                    weighted_sum(g, y, seed)
                },
                &point,
                DEFAULT_STEP,
            )
        }
        3 => {
            let co = rng.random_range(1..4usize);
            let point = random(&mut rng, n4 + co * c + co);
            grad_check(
                |g, p| {
                    let ps = params(g, p, &[&[b, c, h, w], &[co, c], &[co]]);
                    let y = g.conv1x1(ps[0], ps[1], Some(ps[2]))?;
                    weighted_sum(g, y, seed)
                },
                &point,
                DEFAULT_STEP,
            )
        }
        4 => {
            let (fi, fo) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
            let point = random(&mut rng, b * fi + fo * fi + fo);
            grad_check(
                |g, p| {
                    let ps = params(g, p, &[&[b, fi], &[fo, fi], &[fo]]);
                    let y = g.dense(ps[0], ps[1], Some(ps[2]))?;
                    let r = g.relu(y)?;
                    let s = g.sigmoid(y)?;
                    let m = g.mul(r, s)?;
                    weighted_sum(g, m, seed)
                },
                &point,
                DEFAULT_STEP,
            )
        }
        5 => {
            let point = random(&mut rng, 2 * n4);
            grad_check(
                |g, p| {
                    let ps = params(g, p, &[&[b, c, h, w], &[b, c, h, w]]);
                    let a = g.add(ps[0], ps[1])?;
                    let s = g.sub(a, ps[1])?;
                    let m = g.mul(s, ps[1])?;
                    let k = g.scale(m, -1.7)?;
                    let cr = g.crop_interior(k)?;
                    weighted_sum(g, cr, seed)
                },
                &point,
                DEFAULT_STEP,
            )
        }
        _ => {
            let point = random(&mut rng, b * h * w + b * w);
            grad_check(
                |g, p| {
                    let ps = params(g, p, &[&[b, 1, h, w], &[b, w]]);
                    let row = g.first_row(ps[0])?;
                    let d = g.sub(row, ps[1])?;
                    let lb = g.sample_mean_square(d)?;
                    let li = g.sample_mean_square(ps[0])?;
                    let tot = g.add(li, lb)?;
                    let m = g.batch_mean(tot, b)?;
                    let r = g.reshape(ps[0], &[b, h * w])?;
                    let other = g.input(t(&[b, h * w], &vec![0.3; b * h * w]));
                    let e = g.mse(r, other)?;
                    g.add(m, e)
                },
                &point,
                DEFAULT_STEP,
            )
        }
    };
    res.unwrap()
}
