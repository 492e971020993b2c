//! Central finite-difference verification of every differentiable op.
//!
//! Used both by the unit tests and by the `gradcheck` CLI subcommand.
//! Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|),
//! evaluated entrywise; an op passes when the maximum over all entries and
//! all random instances stays within tolerance.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::rng::RngStream;
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// True for the deliberately corrupted fixture; its FAIL is expected
    /// and does not count against the suite.
    pub negative_control: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Check one scalar-valued builder against central differences on every
/// entry of every input. Returns the max relative error.
pub fn check_builder(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let forward = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).scalar_value())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zero(id)).collect();

    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= STEP;
            let numeric = (forward(&plus)? - forward(&minus)?) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], numeric));
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("random tensor")
}

/// Like `random_tensor` but keeps every entry away from a kink location
/// so that central differences are valid.
fn random_tensor_away_from(rng: &mut RngStream, rows: usize, cols: usize, kinks: &[f64]) -> Tensor {
    let mut t = random_tensor(rng, rows, cols);
    for x in t.data_mut() {
        while kinks.iter().any(|k| (*x - k).abs() < 10.0 * STEP) {
            *x = rng.uniform_in(-2.0, 2.0);
        }
    }
    t
}

/// Checks the straight-through Bernoulli: with fixed noise, the analytic
/// gradient must match finite differences of the relaxed probability.
fn check_gumbel(rng: &mut RngStream) -> Result<f64> {
    let logit = random_tensor(rng, 2, 3);
    let weights = random_tensor(rng, 2, 3);
    let tau = 0.7;
    let noise_rng = rng.split("gumbel-noise");

    let relaxed_at = |l: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new();
        let lid = g.leaf(l.clone());
        let node = g.gumbel_bernoulli(lid, tau, &mut noise_rng.clone())?;
        Ok(g.gumbel_relaxed(node).expect("relaxed stored").clone())
    };

    // Analytic gradient of sum(weights * gumbel(logit)).
    let mut g = Graph::new();
    let lid = g.leaf(logit.clone());
    let node = g.gumbel_bernoulli(lid, tau, &mut noise_rng.clone())?;
    let w = g.constant(weights.clone());
    let weighted = g.mul(node, w)?;
    let loss = g.sum(weighted);
    g.backward(loss);
    let analytic = g.grad_or_zero(lid);

    let mut worst = 0.0_f64;
    for e in 0..logit.len() {
        let mut plus = logit.clone();
        plus.data_mut()[e] += STEP;
        let mut minus = logit.clone();
        minus.data_mut()[e] -= STEP;
        let p = relaxed_at(&plus)?.data()[e];
        let m = relaxed_at(&minus)?.data()[e];
        let numeric = weights.data()[e] * (p - m) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[e], numeric));
    }
    Ok(worst)
}

/// Stop-gradient contract: upstream gradient is exactly zero.
fn check_stop_gradient(rng: &mut RngStream) -> Result<f64> {
    let x = random_tensor(rng, 2, 3);
    let mut g = Graph::new();
    let xid = g.leaf(x);
    let sg = g.stop_gradient(xid);
    let prod = g.mul(sg, xid)?;
    let loss = g.sum(prod);
    g.backward(loss);
    // d/dx sum(sg(x) * x) must equal x itself, not 2x.
    let got = g.grad_or_zero(xid);
    let want = g.value(xid).clone();
    let mut worst = 0.0_f64;
    for (a, b) in got.data().iter().zip(want.data()) {
        worst = worst.max(rel_err(*a, *b));
    }
    Ok(worst)
}

/// Run the whole suite: `instances` random instances per op.
pub fn finite_diff_suite(instances: usize, seed: u64) -> Vec<OpReport> {
    let mut rng = RngStream::from_seed(seed).split("gradcheck");
    let mut reports = Vec::new();

    // Each entry: (name, per-instance check returning max rel err).
    type Check<'a> = (&'a str, Box<dyn FnMut(&mut RngStream) -> Result<f64>>);
    let mut checks: Vec<Check> = vec![
        (
            "matmul",
            Box::new(|r| {
                let a = random_tensor(r, 3, 4);
                let b = random_tensor(r, 4, 2);
                let w = random_tensor(r, 3, 2);
                check_builder(&[a, b], &move |g, ids| {
                    let p = g.matmul(ids[0], ids[1])?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(p, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "add",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                let b = random_tensor(r, 2, 3);
                let w = random_tensor(r, 2, 3);
                check_builder(&[a, b], &move |g, ids| {
                    let s = g.add(ids[0], ids[1])?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "add_row",
            Box::new(|r| {
                let a = random_tensor(r, 3, 4);
                let b = random_tensor(r, 1, 4);
                let w = random_tensor(r, 3, 4);
                check_builder(&[a, b], &move |g, ids| {
                    let s = g.add_row(ids[0], ids[1])?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "sub",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                let b = random_tensor(r, 2, 3);
                let w = random_tensor(r, 2, 3);
                check_builder(&[a, b], &move |g, ids| {
                    let s = g.sub(ids[0], ids[1])?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "mul",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                let b = random_tensor(r, 2, 3);
                check_builder(&[a, b], &|g, ids| {
                    let m = g.mul(ids[0], ids[1])?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "mul_col",
            Box::new(|r| {
                let a = random_tensor(r, 3, 4);
                let c = random_tensor(r, 3, 1);
                let w = random_tensor(r, 3, 4);
                check_builder(&[a, c], &move |g, ids| {
                    let m = g.mul_col(ids[0], ids[1])?;
                    let wc = g.constant(w.clone());
                    let p = g.mul(m, wc)?;
                    Ok(g.sum(p))
                })
            }),
        ),
        (
            "scale",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                check_builder(&[a], &|g, ids| {
                    let s = g.scale(ids[0], -1.7);
                    Ok(g.sum(s))
                })
            }),
        ),
        (
            "relu",
            Box::new(|r| {
                let a = random_tensor_away_from(r, 2, 3, &[0.0]);
                let w = random_tensor(r, 2, 3);
                check_builder(&[a], &move |g, ids| {
                    let s = g.relu(ids[0]);
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "tanh",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                let w = random_tensor(r, 2, 3);
                check_builder(&[a], &move |g, ids| {
                    let s = g.tanh(ids[0]);
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "sigmoid",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                let w = random_tensor(r, 2, 3);
                check_builder(&[a], &move |g, ids| {
                    let s = g.sigmoid(ids[0]);
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "clamp",
            Box::new(|r| {
                let a = random_tensor_away_from(r, 2, 3, &[-1.0, 1.0]);
                let w = random_tensor(r, 2, 3);
                check_builder(&[a], &move |g, ids| {
                    let s = g.clamp(ids[0], -1.0, 1.0);
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "sum",
            Box::new(|r| {
                let a = random_tensor(r, 3, 2);
                check_builder(&[a], &|g, ids| Ok(g.sum(ids[0])))
            }),
        ),
        (
            "mean",
            Box::new(|r| {
                let a = random_tensor(r, 3, 2);
                check_builder(&[a], &|g, ids| Ok(g.mean(ids[0])))
            }),
        ),
        (
            "l1_norm",
            Box::new(|r| {
                let a = random_tensor_away_from(r, 3, 2, &[0.0]);
                check_builder(&[a], &|g, ids| Ok(g.l1_norm(ids[0])))
            }),
        ),
        (
            "row_sum",
            Box::new(|r| {
                let a = random_tensor(r, 3, 4);
                let w = random_tensor(r, 3, 1);
                check_builder(&[a], &move |g, ids| {
                    let s = g.row_sum(ids[0]);
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "concat",
            Box::new(|r| {
                let a = random_tensor(r, 2, 3);
                let b = random_tensor(r, 2, 2);
                let w = random_tensor(r, 2, 5);
                check_builder(&[a, b], &move |g, ids| {
                    let s = g.concat_cols(&[ids[0], ids[1]])?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "slice_cols",
            Box::new(|r| {
                let a = random_tensor(r, 2, 5);
                let w = random_tensor(r, 2, 2);
                check_builder(&[a], &move |g, ids| {
                    let s = g.slice_cols(ids[0], 1, 3)?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "categorical_nll",
            Box::new(|r| {
                let a = random_tensor(r, 3, 4);
                let targets = vec![r.index(4), r.index(4), r.index(4)];
                let w = random_tensor(r, 3, 1);
                check_builder(&[a], &move |g, ids| {
                    let s = g.categorical_nll(ids[0], &targets)?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        (
            "gaussian_nll",
            Box::new(|r| {
                let mean = random_tensor(r, 3, 2);
                let log_std = random_tensor(r, 3, 2);
                let target = random_tensor(r, 3, 2);
                let w = random_tensor(r, 3, 1);
                check_builder(&[mean, log_std], &move |g, ids| {
                    let s = g.gaussian_nll(ids[0], ids[1], &target)?;
                    let wc = g.constant(w.clone());
                    let m = g.mul(s, wc)?;
                    Ok(g.sum(m))
                })
            }),
        ),
        ("gumbel_bernoulli", Box::new(check_gumbel)),
        ("stop_gradient", Box::new(check_stop_gradient)),
    ];

    for (name, check) in checks.iter_mut() {
        let mut worst = 0.0_f64;
        let mut failed_err = None;
        for i in 0..instances {
            let mut r = rng.split_index(i as u64).split(name);
            match check(&mut r) {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    failed_err = Some(e);
                    break;
                }
            }
        }
        let passed = failed_err.is_none() && worst <= TOLERANCE;
        reports.push(OpReport {
            op: name.to_string(),
            max_rel_err: worst,
            tolerance: TOLERANCE,
            passed,
            negative_control: false,
        });
    }

    // Negative control: a deliberately corrupted analytic gradient (the true
    // one scaled by 1.5) must produce a FAIL row, demonstrating the suite
    // actually catches wrong gradients.
    {
        let mut r = rng.split("corrupted-fixture");
        let a = random_tensor_away_from(&mut r, 2, 3, &[0.0]);
        let mut worst = 0.0_f64;
        let mut g = Graph::new();
        let id = g.leaf(a.clone());
        let root = g.sum(id);
        g.backward(root);
        let corrupted = g.grad_or_zero(id).map(|x| x * 1.5);
        for e in 0..a.len() {
            let mut plus = a.clone();
            plus.data_mut()[e] += STEP;
            let mut minus = a.clone();
            minus.data_mut()[e] -= STEP;
            let numeric =
                (plus.data().iter().sum::<f64>() - minus.data().iter().sum::<f64>()) / (2.0 * STEP);
            worst = worst.max(rel_err(corrupted.data()[e], numeric));
        }
        reports.push(OpReport {
            op: "corrupted-fixture".to_string(),
            max_rel_err: worst,
            tolerance: TOLERANCE,
            passed: worst <= TOLERANCE,
            negative_control: true,
        });
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_100_instances() {
        let reports = finite_diff_suite(100, 42);
        for r in &reports {
            if r.negative_control {
                assert!(!r.passed, "negative control must fail");
            } else {
                assert!(
                    r.passed,
                    "{} failed: max rel err {} > {}",
                    r.op, r.max_rel_err, r.tolerance
                );
            }
        }
    }
}
