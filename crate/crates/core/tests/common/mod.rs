//! Shared helpers for the integration tests and the acceptance report.
#![allow(dead_code)]

use ebmforge::diffcore::{central_difference, Bindings, DiffError, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds the op under test from a flat input of `len` values.
pub type Build = fn(&mut Graph, NodeId) -> Result<NodeId, DiffError>;

pub struct OpCase {
    pub name: &'static str,
    pub len: usize,
    /// Inputs are drawn from `[lo, hi]`.
    pub lo: f64,
    pub hi: f64,
    pub build: Build,
}

fn part(g: &mut Graph, x: NodeId, start: usize, shape: &[usize]) -> Result<NodeId, DiffError> {
    let n: usize = shape.iter().product();
    g.gather(x, (start..start + n).collect::<Vec<_>>(), shape)
}

/// One case per graph op (division is composite but checked too).
pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, len: usize, lo: f64, hi: f64, build: Build) -> OpCase {
        OpCase { name, len, lo, hi, build }
    }
    vec![
        case("add", 6, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[3])?;
            let b = part(g, x, 3, &[3])?;
            g.add(a, b)
        }),
        case("sub", 6, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[3])?;
            let b = part(g, x, 3, &[3])?;
            g.sub(a, b)
        }),
        case("mul", 6, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[3])?;
            let b = part(g, x, 3, &[3])?;
            g.mul(a, b)
        }),
        case("div", 6, 0.5, 2.0, |g, x| {
            let a = part(g, x, 0, &[3])?;
            let b = part(g, x, 3, &[3])?;
            g.div(a, b)
        }),
        case("neg", 4, -2.0, 2.0, |g, x| g.neg(x)),
        case("scale", 4, -2.0, 2.0, |g, x| g.scale(x, -1.7)),
        case("add_scalar", 4, -2.0, 2.0, |g, x| {
            let y = g.add_scalar(x, 0.3)?;
            g.mul(y, y)
        }),
        case("matmul", 12, -1.5, 1.5, |g, x| {
            let a = part(g, x, 0, &[2, 3])?;
            let b = part(g, x, 6, &[3, 2])?;
            g.matmul(a, b)
        }),
        case("transpose", 6, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[2, 3])?;
            let t = g.transpose(a)?;
            g.mul(t, t)
        }),
        case("sum", 5, -2.0, 2.0, |g, x| {
            let s = g.sum(x)?;
            g.mul(s, s)
        }),
        case("mean", 5, -2.0, 2.0, |g, x| {
            let s = g.mean(x)?;
            g.mul(s, s)
        }),
        case("sum_to", 6, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[3, 2])?;
            let s = g.sum_to(a, &[1, 2])?;
            g.square(s)
        }),
        case("broadcast", 3, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[1, 3])?;
            let b = g.broadcast_to(a, &[2, 3])?;
            let w = g.constant(Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 0.3, 1.1, -1.2]).unwrap());
            let y = g.mul(b, w)?;
            g.square(y)
        }),
        case("reshape", 6, -2.0, 2.0, |g, x| {
            let a = g.reshape(x, &[2, 3])?;
            let t = g.transpose(a)?;
            let c = g.reshape(t, &[6])?;
            g.mul(c, x)
        }),
        case("sum_rows", 6, -2.0, 2.0, |g, x| {
            let a = part(g, x, 0, &[2, 3])?;
            let s = g.sum_rows(a)?;
            g.square(s)
        }),
        case("pow", 4, 0.5, 2.0, |g, x| g.pow(x, 2.5)),
        case("sqrt", 4, 0.5, 2.0, |g, x| g.sqrt(x)),
        case("exp", 4, -2.0, 2.0, |g, x| g.exp(x)),
        case("log", 4, 0.5, 3.0, |g, x| g.log(x)),
        case("softplus", 4, -3.0, 3.0, |g, x| g.softplus(x)),
        case("sigmoid", 4, -3.0, 3.0, |g, x| g.sigmoid(x)),
        case("tanh", 4, -2.0, 2.0, |g, x| g.tanh(x)),
        case("square", 4, -2.0, 2.0, |g, x| g.square(x)),
        case("l2_norm", 5, 0.2, 2.0, |g, x| g.l2_norm(x)),
        case("avg_pool2d", 16, -2.0, 2.0, |g, x| {
            let a = g.reshape(x, &[4, 4])?;
            let p = g.avg_pool2d(a, 2)?;
            g.square(p)
        }),
        case("upsample2d", 4, -2.0, 2.0, |g, x| {
            let a = g.reshape(x, &[2, 2])?;
            let u = g.upsample2d(a, 2)?;
            let w = g.constant(Tensor::new(vec![4, 4], (0..16).map(|i| 0.1 * i as f64 - 0.7).collect()).unwrap());
            let y = g.mul(u, w)?;
            g.square(y)
        }),
        case("gather", 4, -2.0, 2.0, |g, x| {
            let y = g.gather(x, vec![3, 0, 0, 2, 1], &[5])?;
            g.square(y)
        }),
        case("scatter_add", 5, -2.0, 2.0, |g, x| {
            let y = g.scatter_add(x, vec![1, 0, 1, 2, 1], &[3])?;
            g.square(y)
        }),
        case("clamp", 6, -2.0, 2.0, |g, x| {
            let a = g.reshape(x, &[3, 2])?;
            let c = g.clamp(a, &[-1.0, -2.5], &[1.0, 2.5])?;
            g.mul(c, a)
        }),
    ]
}

/// `Σ w ⊙ op(x)` with fixed pseudo-random weights, so every output entry
/// contributes to the scalar.
fn scalar_root(g: &mut Graph, case: &OpCase, x: NodeId) -> Result<NodeId, DiffError> {
    let y = (case.build)(g, x)?;
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + 0.37 * ((i * 7 + 3) % 5) as f64).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Scale-aware element error `|a − b| / (|b| + floor)`.
pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (y.abs() + floor))
        .fold(0.0, f64::max)
}

const FLOOR: f64 = 1e-3;

/// Worst first- and second-order errors over `cases` random points.
/// First order compares the reverse-mode gradient to central differences of
/// the forward pass; second order compares a Hessian-vector product built
/// by differentiating the gradient graph to central differences of that
/// gradient.
pub fn check_op(case: &OpCase, cases: usize, seed: u64) -> Result<(f64, f64), DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let point: Vec<f64> = (0..case.len).map(|_| rng.random_range(case.lo..case.hi)).collect();
        let v: Vec<f64> = (0..case.len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(point.clone()));
        let f = scalar_root(&mut g, case, x)?;
        let gx = g.gradient(f, &[x])?[0];
        let vn = g.constant(Tensor::vector(v.clone()));
        let gv = g.mul(gx, vn)?;
        let gv = g.sum(gv)?;
        let hv = g.gradient(gv, &[x])?[0];

        let eval = |node: NodeId, p: &[f64]| -> Tensor {
            let mut b = Bindings::new();
            b.insert("x".into(), Tensor::vector(p.to_vec()));
            g.evaluate(node, &b).expect("re-evaluation")
        };
        let fd1 = central_difference(|p| eval(f, p).item(), &point, 1e-5)?;
        worst.0 = worst.0.max(max_rel(g.value(gx).data(), &fd1, FLOOR));

        let eps = 1e-5;
        let mut fd2 = Vec::with_capacity(case.len);
        for i in 0..case.len {
            let mut p = point.clone();
            p[i] += eps;
            let up = eval(gx, &p);
            p[i] -= 2.0 * eps;
            let down = eval(gx, &p);
            // Row i of the Hessian, contracted with v.
            let row: f64 = up
                .data()
                .iter()
                .zip(down.data())
                .zip(&v)
                .map(|((a, b), w)| (a - b) / (2.0 * eps) * w)
                .sum();
            fd2.push(row);
        }
        worst.1 = worst.1.max(max_rel(g.value(hv).data(), &fd2, FLOOR));
    }
    Ok(worst)
}
