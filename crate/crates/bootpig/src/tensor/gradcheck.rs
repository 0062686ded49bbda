//! Central finite-difference gradient checking.
//!
//! Runs at `f64` against the same op implementations the model uses. The
//! numeric differentiation path never touches the tape, so it is an
//! independent oracle for every backward formula.

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input index, flat element index, tape grad, finite-difference grad)
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Check tape gradients of `f` (a scalar-valued function of the inputs)
/// against central finite differences at every input element.
pub fn check_gradient<F>(
    f: F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(data, shape)| Tensor::leaf(data.clone(), shape, true))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::shape("gradcheck", "function under test must return a scalar"));
    }
    loss.backward()?;

    let eval = |points: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let consts: Vec<Tensor<f64>> = points
            .iter()
            .map(|(d, s)| Tensor::from_vec(d.clone(), s))
            .collect::<Result<_>>()?;
        Ok(f(&consts)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };

    for (ii, (data, _)) in inputs.iter().enumerate() {
        let tape_grad = leaves[ii]
            .grad()
            .unwrap_or_else(|| vec![0.0; data.len()]);
        for ei in 0..data.len() {
            let mut plus = inputs.to_vec();
            plus[ii].0[ei] += cfg.step;
            let mut minus = inputs.to_vec();
            minus[ii].0[ei] -= cfg.step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step);
            let ad = tape_grad[ei];
            let err = rel_err(ad, fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
            }
            if err > cfg.tolerance {
                report.failures.push((ii, ei, ad, fd));
            }
        }
    }
    Ok(report)
}

/// Deterministic pseudo-random tensor filler for gradcheck fixtures.
pub fn fill_uniform<E: Element>(rng: &mut impl rand::Rng, n: usize, lo: f64, hi: f64) -> Vec<E> {
    (0..n)
        .map(|_| E::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
        .collect()
}

// ---------------------------------------------------------------------------
// Full differentiable-op suite
// ---------------------------------------------------------------------------

/// Reduce an arbitrary tensor to a scalar through a fixed random projection,
/// so the finite-difference probe sees every output element.
fn scalarize(t: &Tensor<f64>, salt: u64) -> Result<Tensor<f64>> {
    use crate::tensor::ops;
    let mut r = crate::rng::seeded(salt ^ 0x5ca1_ab1e);
    let w: Vec<f64> = (0..t.numel()).map(|_| rand::Rng::gen::<f64>(&mut r) * 2.0 - 1.0).collect();
    let wt = Tensor::from_vec(w, t.shape())?;
    ops::sum_all(&ops::mul(t, &wt)?)
}

/// Check every differentiable op against central finite differences at
/// randomized small shapes (each axis at most 8). Returns one named report
/// per case; the suite passes when every report does.
pub fn run_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::tensor::ops;
    use rand::Rng;

    let cfg = GradCheckConfig::default();
    let mut r = crate::rng::seeded(seed);
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut salt = 0u64;

    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {{
            let inputs: Vec<(Vec<f64>, Vec<usize>)> = $inputs;
            out.push(($name.to_string(), check_gradient($f, &inputs, &cfg)?));
        }};
    }
    fn tensor_in(
        shape: Vec<usize>,
        r: &mut rand_chacha::ChaCha8Rng,
    ) -> (Vec<f64>, Vec<usize>) {
        let n: usize = shape.iter().product();
        (fill_uniform::<f64>(r, n, -1.0, 1.0), shape)
    }
    macro_rules! dims {
        ($lo:expr, $hi:expr) => {
            r.gen_range($lo..=$hi as usize)
        };
    }

    // elementwise binary ops, plus scalar broadcasting
    let (d0, d1) = (dims!(1, 8), dims!(1, 8));
    let pair = vec![tensor_in(vec![d0, d1], &mut r), tensor_in(vec![d0, d1], &mut r)];
    salt += 1;
    let s = salt;
    case!("add", pair.clone(), |t| scalarize(&ops::add(&t[0], &t[1])?, s));
    salt += 1;
    let s = salt;
    case!("sub", pair.clone(), |t| scalarize(&ops::sub(&t[0], &t[1])?, s));
    salt += 1;
    let s = salt;
    case!("mul", pair.clone(), |t| scalarize(&ops::mul(&t[0], &t[1])?, s));
    let scalar_pair = vec![tensor_in(vec![d0, d1], &mut r), tensor_in(vec![1], &mut r)];
    salt += 1;
    let s = salt;
    case!("mul_scalar_broadcast", scalar_pair.clone(), |t| {
        scalarize(&ops::mul(&t[0], &t[1])?, s)
    });
    salt += 1;
    let s = salt;
    case!("add_scalar_broadcast", scalar_pair, |t| {
        scalarize(&ops::add(&t[1], &t[0])?, s)
    });

    // unary ops
    let single = vec![tensor_in(vec![dims!(1, 8)], &mut r)];
    salt += 1;
    let s = salt;
    case!("scale", single.clone(), |t| scalarize(&ops::scale(&t[0], -1.3)?, s));
    salt += 1;
    let s = salt;
    case!("add_const", single.clone(), |t| {
        scalarize(&ops::add_const(&t[0], 0.7)?, s)
    });
    salt += 1;
    let s = salt;
    case!("silu", single, |t| scalarize(&ops::silu(&t[0])?, s));

    // matmul
    let (m, k, n) = (dims!(1, 8), dims!(1, 8), dims!(1, 8));
    let mm = vec![tensor_in(vec![m, k], &mut r), tensor_in(vec![k, n], &mut r)];
    salt += 1;
    let s = salt;
    case!("matmul", mm, |t| scalarize(&ops::matmul(&t[0], &t[1])?, s));

    // conv2d, padded with bias and strided without
    let (b, ci, co) = (dims!(1, 2), dims!(1, 3), dims!(1, 3));
    let (h, w) = (dims!(3, 6), dims!(3, 6));
    let conv = vec![
        tensor_in(vec![b, ci, h, w], &mut r),
        tensor_in(vec![co, ci, 3, 3], &mut r),
        tensor_in(vec![co], &mut r),
    ];
    salt += 1;
    let s = salt;
    case!("conv2d_pad1_bias", conv.clone(), |t| {
        scalarize(&ops::conv2d(&t[0], &t[1], Some(&t[2]), 1, 1)?, s)
    });
    salt += 1;
    let s = salt;
    case!("conv2d_stride2", conv[..2].to_vec(), |t| {
        scalarize(&ops::conv2d(&t[0], &t[1], None, 2, 0)?, s)
    });

    // softmax along both trailing axes
    let sm = vec![tensor_in(vec![dims!(1, 3), dims!(2, 6), dims!(2, 6)], &mut r)];
    salt += 1;
    let s = salt;
    case!("softmax_axis1", sm.clone(), |t| {
        scalarize(&ops::softmax(&t[0], 1)?, s)
    });
    salt += 1;
    let s = salt;
    case!("softmax_axis2", sm, |t| scalarize(&ops::softmax(&t[0], 2)?, s));

    // group norm
    let groups = dims!(1, 2);
    let ch = groups * dims!(1, 3);
    let gn = vec![
        tensor_in(vec![dims!(1, 2), ch, dims!(2, 4), dims!(2, 4)], &mut r),
        tensor_in(vec![ch], &mut r),
        tensor_in(vec![ch], &mut r),
    ];
    salt += 1;
    let s = salt;
    case!("group_norm", gn, |t| {
        scalarize(&ops::group_norm(&t[0], groups, &t[1], &t[2], 1e-5)?, s)
    });

    // structural ops
    let rows = dims!(1, 4);
    let cat = vec![
        tensor_in(vec![rows, dims!(1, 4)], &mut r),
        tensor_in(vec![rows, dims!(1, 4)], &mut r),
    ];
    salt += 1;
    let s = salt;
    case!("concat", cat, |t| {
        scalarize(&ops::concat(&[&t[0], &t[1]], 1)?, s)
    });
    let (sa, sb, sc) = (dims!(1, 4), dims!(1, 4), dims!(1, 4));
    let cube = vec![tensor_in(vec![sa, sb, sc], &mut r)];
    salt += 1;
    let s = salt;
    case!("reshape", cube.clone(), |t| {
        let n = t[0].numel();
        scalarize(&ops::reshape(&t[0], &[n])?, s)
    });
    salt += 1;
    let s = salt;
    case!("permute", cube.clone(), |t| {
        scalarize(&ops::permute(&t[0], &[2, 0, 1])?, s)
    });
    salt += 1;
    let s = salt;
    case!("select0", cube, |t| scalarize(&ops::select0(&t[0], 0)?, s));
    let img = vec![tensor_in(vec![dims!(1, 2), dims!(1, 2), dims!(1, 3), dims!(1, 3)], &mut r)];
    salt += 1;
    let s = salt;
    case!("upsample2x", img, |t| scalarize(&ops::upsample2x(&t[0])?, s));

    // embedding with a repeated id (scatter-add accumulation)
    let vocab = dims!(4, 8);
    let emb = vec![tensor_in(vec![vocab, dims!(1, 4)], &mut r)];
    salt += 1;
    let s = salt;
    case!("embedding", emb, |t| {
        scalarize(&ops::embedding(&t[0], &[2, 0, 2, 1])?, s)
    });

    // reductions and broadcasts
    let red = vec![tensor_in(vec![dims!(1, 4), dims!(1, 4)], &mut r)];
    case!("mean_all", red.clone(), |t| ops::mean_all(&t[0]));
    case!("sum_all", red, |t| ops::sum_all(&t[0]));
    let cols = dims!(1, 6);
    let rv = vec![
        tensor_in(vec![dims!(1, 6), cols], &mut r),
        tensor_in(vec![cols], &mut r),
    ];
    salt += 1;
    let s = salt;
    case!("add_rowvec", rv, |t| {
        scalarize(&ops::add_rowvec(&t[0], &t[1])?, s)
    });
    let (bb, cc) = (dims!(1, 3), dims!(1, 3));
    let bc = vec![
        tensor_in(vec![bb, cc, dims!(1, 3), dims!(1, 3)], &mut r),
        tensor_in(vec![bb, cc], &mut r),
    ];
    salt += 1;
    let s = salt;
    case!("add_batch_chan", bc, |t| {
        scalarize(&ops::add_batch_chan(&t[0], &t[1])?, s)
    });
    let mse_pair = vec![
        tensor_in(vec![dims!(1, 4), dims!(1, 4)], &mut r),
        Default::default(),
    ];
    let mut mse_pair = mse_pair;
    mse_pair[1] = tensor_in(mse_pair[0].1.clone(), &mut r);
    case!("mse", mse_pair, |t| ops::mse(&t[0], &t[1]));

    // a composed block-shaped fragment: conv -> group_norm -> silu -> softmax
    let frag = vec![
        tensor_in(vec![1, 2, 4, 4], &mut r),
        tensor_in(vec![4, 2, 3, 3], &mut r),
        tensor_in(vec![4], &mut r),
        tensor_in(vec![4], &mut r),
    ];
    salt += 1;
    let s = salt;
    case!("composed_fragment", frag, |t| {
        let y = ops::conv2d(&t[0], &t[1], None, 1, 1)?;
        let y = ops::group_norm(&y, 2, &t[2], &t[3], 1e-5)?;
        let y = ops::silu(&y)?;
        let y = ops::softmax(&y, 1)?;
        scalarize(&y, s)
    });

    Ok(out)
}
