//! Finite-difference gradient checking for the autodiff engine.
//!
//! `run_suite` probes every differentiable op at randomized small shapes and
//! compares tape gradients against central differences in f64. The same
//! harness also checks arbitrary user-composed functions, shown below with a
//! small attention-flavored expression.
//!
//! Run with: cargo run --example gradient_check

use bootpig::rng;
use bootpig::tensor::gradcheck::{check_gradient, fill_uniform, run_suite, GradCheckConfig};
use bootpig::tensor::ops;
use bootpig::Result;

fn main() -> Result<()> {
    // the full per-op suite, as run by `bootpig gradcheck`
    let started = std::time::Instant::now();
    for (name, rep) in run_suite(42)? {
        println!(
            "{}  {name:<22} max_rel_err {:.3e} ({} elements)",
            if rep.ok() { "pass" } else { "FAIL" },
            rep.max_rel_err,
            rep.checked
        );
    }
    println!("suite finished in {:.2}s\n", started.elapsed().as_secs_f64());

    // checking a custom composition: softmax(q k^T) v reduced to a scalar
    let mut r = rng::seeded(9);
    let inputs = [
        (fill_uniform::<f64>(&mut r, 3 * 4, -1.0, 1.0), vec![3, 4]),
        (fill_uniform::<f64>(&mut r, 3 * 4, -1.0, 1.0), vec![3, 4]),
        (fill_uniform::<f64>(&mut r, 3 * 2, -1.0, 1.0), vec![3, 2]),
    ];
    let rep = check_gradient(
        |t| {
            let logits = ops::matmul(&t[0], &ops::permute(&t[1], &[1, 0])?)?;
            let w = ops::softmax(&logits, 1)?;
            ops::mean_all(&ops::matmul(&w, &t[2])?)
        },
        &inputs,
        &GradCheckConfig::default(),
    )?;
    println!(
        "custom attention fragment: max_rel_err {:.3e} over {} elements -> {}",
        rep.max_rel_err,
        rep.checked,
        if rep.ok() { "pass" } else { "FAIL" }
    );
    Ok(())
}
