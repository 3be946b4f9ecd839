//! Central finite-difference checks (step 1e-3, relative tolerance 1e-4) for
//! every differentiable tape operation, each on at least three random shapes.
#![allow(dead_code)]

use nmtbench::numerics::{Graph, Tensor, Var};
use nmtbench::rng;

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
// Differences below this are accepted outright; at this scale round-off in
// the numeric derivative dominates.
const ABS_FLOOR: f64 = 1e-8;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[77]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng::unit(&mut r) * 2.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(weights ⊙ f(inputs))` so every output element gets a distinct
/// upstream gradient.
fn scalarize(g: &mut Graph, out: Var, seed: u64) -> Var {
    let w = g.constant(random(g.shape(out), seed ^ 0xabc));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

#[allow(clippy::needless_range_loop)]
fn check<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> Result<(), String>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = if g.value(out).len() == 1 && g.shape(out).is_empty() { out } else { scalarize(&mut g, out, seed) };
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = if g.value(out).len() == 1 && g.shape(out).is_empty() { out } else { scalarize(&mut g, out, seed) };
    let grads = g.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let diff = (analytic[i] - numeric).abs();
            let scale = analytic[i].abs().max(numeric.abs());
            if !(diff <= ABS_FLOOR || diff <= REL_TOL * scale) {
                return Err(format!("{name}: input {k} element {i}: analytic {} numeric {numeric}", analytic[i]));
            }
        }
    }
    Ok(())
}

pub fn matmul_plain_and_transposed() -> Result<(), String> {
    for (seed, (m, k, n)) in [(2, 3, 4), (1, 5, 2), (4, 2, 3)].into_iter().enumerate() {
        let s = seed as u64;
        check("matmul", &[random(&[m, k], s), random(&[k, n], s + 10)], s, |g, v| g.matmul(v[0], v[1]).unwrap())?;
        check("matmul_ta", &[random(&[k, m], s), random(&[k, n], s + 10)], s, |g, v| g.matmul_t(v[0], v[1], true, false).unwrap())?;
        check("matmul_tb", &[random(&[m, k], s), random(&[n, k], s + 10)], s, |g, v| g.matmul_t(v[0], v[1], false, true).unwrap())?;
        check("matmul_tt", &[random(&[k, m], s), random(&[n, k], s + 10)], s, |g, v| g.matmul_t(v[0], v[1], true, true).unwrap())?;
        check("bmm", &[random(&[2, m, k], s), random(&[2, k, n], s + 10)], s, |g, v| g.matmul(v[0], v[1]).unwrap())?;
        check("bmm_tb", &[random(&[3, m, k], s), random(&[3, n, k], s + 10)], s, |g, v| g.matmul_t(v[0], v[1], false, true).unwrap())?;
    }
    Ok(())
}

pub fn sum_of_matmul_matches_finite_differences() -> Result<(), String> {
    // d/dA sum(A·x) from the operation's own contract.
    check("sum_ax", &[random(&[3, 4], 5), random(&[4, 1], 6)], 0, |g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        g.sum(p)
    })?;
    Ok(())
}

pub fn elementwise_binary() -> Result<(), String> {
    for (s, shape) in [vec![3], vec![2, 3], vec![2, 2, 3]].into_iter().enumerate() {
        let s = s as u64;
        let ins = [random(&shape, s), random(&shape, s + 1)];
        check("add", &ins, s, |g, v| g.add(v[0], v[1]).unwrap())?;
        check("sub", &ins, s, |g, v| g.sub(v[0], v[1]).unwrap())?;
        check("mul", &ins, s, |g, v| g.mul(v[0], v[1]).unwrap())?;
    }
    Ok(())
}

pub fn elementwise_unary() -> Result<(), String> {
    for (s, shape) in [vec![4], vec![3, 2], vec![2, 3, 2]].into_iter().enumerate() {
        let s = s as u64;
        let x = [random(&shape, s)];
        check("scale", &x, s, |g, v| g.scale(v[0], -1.7))?;
        check("add_scalar", &x, s, |g, v| g.add_scalar(v[0], 0.3))?;
        check("one_minus", &x, s, |g, v| g.one_minus(v[0]))?;
        check("sigmoid", &x, s, |g, v| g.sigmoid(v[0]))?;
        check("tanh", &x, s, |g, v| g.tanh(v[0]))?;
        check("softmax", &x, s, |g, v| g.softmax(v[0]))?;
        check("sum", &x, s, |g, v| g.sum(v[0]))?;
        check("mean", &x, s, |g, v| g.mean(v[0]))?;
    }
    Ok(())
}

pub fn relu_away_from_kink() -> Result<(), String> {
    for (s, shape) in [vec![5], vec![2, 4], vec![3, 1, 2]].into_iter().enumerate() {
        let mut t = random(&shape, s as u64);
        // Keep inputs at least 0.1 from zero so the step never crosses the kink.
        t.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
        check("relu", &[t], s as u64, |g, v| g.relu(v[0]))?;
    }
    Ok(())
}

pub fn bias_and_layer_norm() -> Result<(), String> {
    for (s, shape) in [vec![2, 3], vec![4, 5], vec![2, 2, 4]].into_iter().enumerate() {
        let s = s as u64;
        let n = *shape.last().unwrap();
        check("add_bias", &[random(&shape, s), random(&[n], s + 3)], s, |g, v| g.add_bias(v[0], v[1]).unwrap())?;
        // Normalisation is scale-invariant but its third derivative grows as the
        // row variance shrinks; spread the inputs so the O(step²) truncation
        // error of the central difference stays below tolerance.
        let mut x = random(&shape, s);
        x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
        check("layer_norm", &[x, random(&[n], s + 3), random(&[n], s + 4)], s, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap())?;
    }
    Ok(())
}

pub fn embedding_gather() -> Result<(), String> {
    for (s, (vocab, width, ids)) in [(5, 3, vec![0u32, 4, 4, 2]), (3, 2, vec![1]), (7, 4, vec![6, 0, 1, 2, 6])].into_iter().enumerate() {
        check("embedding", &[random(&[vocab, width], s as u64)], s as u64, move |g, v| g.embedding(v[0], &ids).unwrap())?;
    }
    Ok(())
}

pub fn shape_ops() -> Result<(), String> {
    for (s, shape) in [vec![2, 3, 4], vec![1, 2, 3], vec![3, 1, 2]].into_iter().enumerate() {
        let s = s as u64;
        let x = [random(&shape, s)];
        let n: usize = shape.iter().product();
        check("reshape", &x, s, move |g, v| g.reshape(v[0], &[n]).unwrap())?;
        check("permute", &x, s, |g, v| g.permute(v[0], &[1, 0, 2]).unwrap())?;
        check("permute_rev", &x, s, |g, v| g.permute(v[0], &[2, 1, 0]).unwrap())?;
        let w = shape[2];
        check("slice_last", &x, s, move |g, v| g.slice_last(v[0], w / 2, w - w / 2).unwrap())?;
        let k = shape[1];
        check("select", &x, s, move |g, v| g.select(v[0], k - 1).unwrap())?;
    }
    for (s, shape) in [vec![2, 2, 3, 2], vec![1, 3, 2, 2], vec![2, 1, 2, 3]].into_iter().enumerate() {
        check("permute4", &[random(&shape, s as u64)], s as u64, |g, v| g.permute(v[0], &[0, 2, 1, 3]).unwrap())?;
    }
    Ok(())
}

pub fn concat_and_stack() -> Result<(), String> {
    for (s, (rows, w1, w2)) in [(2, 3, 1), (1, 2, 2), (3, 1, 4)].into_iter().enumerate() {
        let s = s as u64;
        check("concat", &[random(&[rows, w1], s), random(&[rows, w2], s + 1)], s, |g, v| g.concat(&[v[0], v[1]]).unwrap())?;
        check("stack", &[random(&[rows, w1], s), random(&[rows, w1], s + 1), random(&[rows, w1], s + 2)], s, |g, v| g.stack(&[v[0], v[1], v[2]]).unwrap())?;
    }
    Ok(())
}

pub fn cross_entropy_with_and_without_smoothing() -> Result<(), String> {
    for (s, (n, vocab, targets)) in [(3, 4, vec![0u32, 3, 1]), (2, 6, vec![5, 5]), (4, 3, vec![2, 0, 1, 0])].into_iter().enumerate() {
        let s = s as u64;
        let logits = [random(&[n, vocab], s)];
        let t = targets.clone();
        check("ce", &logits, s, move |g, v| g.cross_entropy(v[0], &t, 0.0, None).unwrap())?;
        let t = targets.clone();
        check("ce_smooth", &logits, s, move |g, v| g.cross_entropy(v[0], &t, 0.1, None).unwrap())?;
        let t = targets;
        check("ce_ignore", &logits, s, move |g, v| g.cross_entropy(v[0], &t, 0.1, Some(0)).unwrap())?;
    }
    Ok(())
}

/// A gated recurrent step `h' = (1 - z)·n + z·h` unrolled twice, the same
/// composition the recurrent model uses.
pub fn composite_recurrent_cell() -> Result<(), String> {
    for (s, (b, d_in, d)) in [(2, 3, 2), (1, 2, 3), (3, 2, 2)].into_iter().enumerate() {
        let s = s as u64;
        let ins = [random(&[b, d_in], s), random(&[b, d], s + 1), random(&[d_in, 3 * d], s + 2), random(&[d, 3 * d], s + 3), random(&[3 * d], s + 4)];
        check("gru", &ins, s, move |g, v| {
            let mut h = v[1];
            for _ in 0..2 {
                let xw = g.matmul(v[0], v[2]).unwrap();
                let xw = g.add_bias(xw, v[4]).unwrap();
                let hu = g.matmul(h, v[3]).unwrap();
                let xz = g.slice_last(xw, 0, d).unwrap();
                let xr = g.slice_last(xw, d, d).unwrap();
                let xn = g.slice_last(xw, 2 * d, d).unwrap();
                let hz = g.slice_last(hu, 0, d).unwrap();
                let hr = g.slice_last(hu, d, d).unwrap();
                let hn = g.slice_last(hu, 2 * d, d).unwrap();
                let z = g.add(xz, hz).unwrap();
                let z = g.sigmoid(z);
                let r = g.add(xr, hr).unwrap();
                let r = g.sigmoid(r);
                let rh = g.mul(r, hn).unwrap();
                let n = g.add(xn, rh).unwrap();
                let n = g.tanh(n);
                let keep = g.mul(z, h).unwrap();
                let oz = g.one_minus(z);
                let upd = g.mul(oz, n).unwrap();
                h = g.add(keep, upd).unwrap();
            }
            h
        })?;
    }
    Ok(())
}

/// Each evaluation draws the same mask, so dropout is a fixed linear map.
pub fn dropout_with_fixed_mask() -> Result<(), String> {
    for (s, shape) in [vec![6], vec![3, 4], vec![2, 2, 3]].into_iter().enumerate() {
        let s = s as u64;
        check("dropout", &[random(&shape, s)], s, move |g, v| g.dropout(v[0], 0.3, &mut rng::stream(s, &[9])).unwrap())?;
    }
    Ok(())
}

pub type Group = (&'static str, fn() -> Result<(), String>);

/// Every check group, by name.
pub const ALL: &[Group] = &[
    ("matmul_plain_and_transposed", matmul_plain_and_transposed),
    ("sum_of_matmul_matches_finite_differences", sum_of_matmul_matches_finite_differences),
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("relu_away_from_kink", relu_away_from_kink),
    ("bias_and_layer_norm", bias_and_layer_norm),
    ("embedding_gather", embedding_gather),
    ("shape_ops", shape_ops),
    ("concat_and_stack", concat_and_stack),
    ("cross_entropy_with_and_without_smoothing", cross_entropy_with_and_without_smoothing),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("composite_recurrent_cell", composite_recurrent_cell),
];
