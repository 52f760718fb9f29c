#![allow(dead_code)]

use decred::tensor::{Tape, Tensor, Var};
use decred::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    /// Inputs are drawn from this range.
    pub range: (f64, f64),
    pub build: OpFn,
}

pub fn random_tensor(shape: &[usize], range: (f64, f64), rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(range.0..range.1))
}

fn fixed(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(shape, (-1.0, 1.0), &mut rng)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(fixed(&shape, 99));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case(
    name: &'static str,
    shape: &[usize],
    range: (f64, f64),
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        input_shape: shape.to_vec(),
        range,
        build: Box::new(move |tape, x| {
            let y = f(tape, x)?;
            weighted_sum(tape, y)
        }),
    }
}

const STD: (f64, f64) = (-1.5, 1.5);

/// One entry per primitive op (and per differentiable operand).
pub fn primitive_ops() -> Vec<OpCase> {
    vec![
        case("matmul/lhs", &[3, 4], STD, |t, x| {
            let b = t.constant(fixed(&[4, 2], 1));
            t.matmul(x, b)
        }),
        case("matmul/rhs", &[3, 4], STD, |t, x| {
            let a = t.constant(fixed(&[2, 3], 2));
            t.matmul(a, x)
        }),
        case("add", &[2, 3], STD, |t, x| {
            let c = t.constant(fixed(&[2, 3], 3));
            t.add(x, c)
        }),
        case("sub", &[2, 3], STD, |t, x| {
            let c = t.constant(fixed(&[2, 3], 4));
            t.sub(c, x)
        }),
        case("mul", &[2, 3], STD, |t, x| {
            let c = t.constant(fixed(&[2, 3], 5));
            t.mul(x, c)
        }),
        case("mul/self", &[5], STD, |t, x| t.mul(x, x)),
        case("add_row/matrix", &[3, 4], STD, |t, x| {
            let r = t.constant(fixed(&[4], 6));
            t.add_row(x, r)
        }),
        case("add_row/row", &[4], STD, |t, x| {
            let m = t.constant(fixed(&[3, 4], 7));
            t.add_row(m, x)
        }),
        case("mul_row/matrix", &[3, 4], STD, |t, x| {
            let r = t.constant(fixed(&[4], 8));
            t.mul_row(x, r)
        }),
        case("mul_row/row", &[4], STD, |t, x| {
            let m = t.constant(fixed(&[3, 4], 9));
            t.mul_row(m, x)
        }),
        case("scale", &[4], STD, |t, x| Ok(t.scale(x, -2.5))),
        case("add_scalar", &[4], STD, |t, x| Ok(t.add_scalar(x, 0.75))),
        case("relu", &[6], STD, |t, x| Ok(t.relu(x))),
        case("exp", &[4], STD, |t, x| Ok(t.exp(x))),
        case("log", &[4], (0.2, 3.0), |t, x| Ok(t.log(x))),
        case("map/tanh", &[4], STD, |t, x| {
            Ok(t.map(x, f64::tanh, |v| 1.0 - v.tanh().powi(2)))
        }),
        case("softmax/last", &[3, 4], STD, |t, x| t.softmax(x, 1)),
        case("softmax/first", &[3, 4], STD, |t, x| t.softmax(x, 0)),
        case("softmax/middle", &[2, 3, 2], STD, |t, x| t.softmax(x, 1)),
        case("log_softmax/last", &[3, 4], STD, |t, x| t.log_softmax(x, 1)),
        case("log_softmax/first", &[3, 4], STD, |t, x| t.log_softmax(x, 0)),
        case("layer_norm/x", &[3, 5], STD, |t, x| {
            let g = t.constant(fixed(&[5], 10));
            let b = t.constant(fixed(&[5], 11));
            t.layer_norm(x, g, b, 1e-5)
        }),
        case("layer_norm/gamma", &[5], STD, |t, x| {
            let m = t.constant(fixed(&[3, 5], 12));
            let b = t.constant(fixed(&[5], 13));
            t.layer_norm(m, x, b, 1e-5)
        }),
        case("layer_norm/beta", &[5], STD, |t, x| {
            let m = t.constant(fixed(&[3, 5], 14));
            let g = t.constant(fixed(&[5], 15));
            t.layer_norm(m, g, x, 1e-5)
        }),
        case("embedding", &[5, 3], STD, |t, x| t.embedding(x, &[4, 0, 4, 2])),
        case("concat/rows", &[2, 3], STD, |t, x| {
            let c = t.constant(fixed(&[1, 3], 16));
            t.concat(&[c, x, x], 0)
        }),
        case("concat/cols", &[2, 3], STD, |t, x| {
            let c = t.constant(fixed(&[2, 2], 17));
            t.concat(&[x, c], 1)
        }),
        case("slice/rows", &[4, 3], STD, |t, x| t.slice(x, 0, 1, 3)),
        case("slice/cols", &[4, 3], STD, |t, x| t.slice(x, 1, 1, 3)),
        case("transpose", &[2, 3], STD, |t, x| t.transpose(x)),
        case("reshape", &[2, 3], STD, |t, x| t.reshape(x, &[3, 2])),
        case("dropout/train", &[8], STD, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            Ok(t.dropout(x, 0.3, true, &mut rng))
        }),
        case("sum", &[2, 3], STD, |t, x| Ok(t.sum(x))),
        case("mean", &[2, 3], STD, |t, x| t.mean(x)),
        case("sum_axis", &[2, 3, 2], STD, |t, x| t.sum_axis(x, 1)),
        case("gather", &[3, 4], STD, |t, x| t.gather(x, &[3, 0, 1])),
        case("masked_select", &[2, 3], STD, |t, x| {
            t.masked_select(x, &[true, false, true, true, false, true])
        }),
        case("unfold", &[5, 2], STD, |t, x| t.unfold(x, 3, 2, 1)),
    ]
}
