//! Central-difference verification of [`Graph::backward`].
//!
//! The loss is rebuilt in `f64` from an upcast copy of the parameters, so both
//! the analytic and the numeric gradient are free of `f32` rounding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Selects which coordinates are probed when a tensor is larger than
    /// `max_coords_per_param`.
    pub seed: u64,
    pub max_coords_per_param: usize,
    /// Denominator floor of the relative error, so that near-zero gradients are
    /// compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-4,
            seed: 0,
            max_coords_per_param: 16,
            abs_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates whose difference quotient changed with the step size,
    /// i.e. a ReLU-style kink lies within `h`. They are excluded.
    pub skipped_kinks: usize,
    pub failures: Vec<GradCheckFailure>,
    pub error: Option<String>,
}

/// Compares backward() against central differences, parameter by parameter.
///
/// `build` must construct the scalar loss from the given parameters; it is
/// called once for the analytic gradient and twice per probed coordinate.
pub fn finite_diff_check<S, F>(
    params: &ParamSet<S>,
    build: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    S: Scalar,
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    match run(params, &build, cfg) {
        Ok(report) => report,
        Err(e) => GradCheckReport {
            pass: false,
            error: Some(e.to_string()),
            ..Default::default()
        },
    }
}

fn run<S, F>(params: &ParamSet<S>, build: &F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut shadow = params.cast::<f64>();
    let mut g = Graph::new();
    let loss = build(&mut g, &shadow)?;
    let grads = g.backward(loss)?;
    drop(g);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = shadow.names().cloned().collect();
    let mut report = GradCheckReport {
        pass: true,
        ..Default::default()
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(cfg.abs_floor);

    for name in names {
        let len = shadow.get(&name)?.len();
        let mut coords: Vec<usize> = if len <= cfg.max_coords_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, cfg.max_coords_per_param).into_vec()
        };
        coords.sort_unstable();
        let analytic_all = grads.get(&name).map(|t| t.data().to_vec());
        for idx in coords {
            let analytic = analytic_all.as_ref().map_or(0.0, |d| d[idx]);
            let numeric = central(&mut shadow, &name, idx, cfg.h, &eval)?;
            let err = rel(analytic, numeric);
            if err > cfg.tol {
                let half = central(&mut shadow, &name, idx, cfg.h / 2.0, &eval)?;
                if rel(numeric, half) > cfg.tol {
                    report.skipped_kinks += 1;
                    continue;
                }
                report.failures.push(GradCheckFailure {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_err: err,
                });
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    report.pass = report.failures.is_empty() && report.checked > 0;
    Ok(report)
}

fn central(
    p: &mut ParamSet<f64>,
    name: &str,
    idx: usize,
    h: f64,
    eval: &impl Fn(&ParamSet<f64>) -> Result<f64>,
) -> Result<f64> {
    let orig = p.get(name)?.data()[idx];
    p.get_mut(name)?.data_mut()[idx] = orig + h;
    let plus = eval(p);
    p.get_mut(name)?.data_mut()[idx] = orig - h;
    let minus = eval(p);
    p.get_mut(name)?.data_mut()[idx] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_params(seed: u64, shapes: &[(&str, &[usize])]) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shapes
            .iter()
            .map(|(n, s)| {
                let len = s.iter().product();
                let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                (n.to_string(), Tensor::new(s.to_vec(), data).unwrap())
            })
            .collect()
    }

    #[test]
    fn linear_model_is_exact() {
        let params = random_params(1, &[("w", &[3, 1])]);
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let report = finite_diff_check(
            &params,
            |g, p| {
                let w = g.param_from(p, "w")?;
                let xi = g.input(x.clone());
                let y = g.matmul(xi, w)?;
                g.sum(y)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
    }

    #[test]
    fn two_layer_sigmoid_net_matches_at_h_1e3() {
        // 2->2->1 with biases: 4 + 2 + 2 + 1 = 9 weights plus a PReLU slope = 10.
        let shapes: &[(&str, &[usize])] = &[
            ("w1", &[2, 2]),
            ("b1", &[2]),
            ("w2", &[2, 1]),
            ("b2", &[1]),
            ("alpha", &[1]),
        ];
        for seed in 0..20 {
            let params = random_params(seed, shapes);
            let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 1.5, 0.2, -0.7, 0.9]).unwrap();
            let report = finite_diff_check(
                &params,
                |g, p| {
                    let xi = g.input(x.clone());
                    let w1 = g.param_from(p, "w1")?;
                    let b1 = g.param_from(p, "b1")?;
                    let h = g.matmul(xi, w1)?;
                    let h = g.add_row(h, b1)?;
                    let h = g.sigmoid(h)?;
                    let w2 = g.param_from(p, "w2")?;
                    let b2 = g.param_from(p, "b2")?;
                    let o = g.matmul(h, w2)?;
                    let o = g.add_row(o, b2)?;
                    let a = g.param_from(p, "alpha")?;
                    let o = g.prelu(o, a)?;
                    let o = g.mul(o, o)?;
                    g.mean(o)
                },
                &GradCheckConfig {
                    h: 1e-3,
                    seed,
                    ..Default::default()
                },
            );
            assert!(report.pass, "seed {seed}: {report:?}");
            assert!(report.max_rel_err < 1e-4);
        }
    }

    #[test]
    fn softmax_cross_entropy_net_passes() {
        let params = random_params(7, &[("w", &[4, 3]), ("b", &[3])]);
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect())
            .unwrap();
        let report = finite_diff_check(
            &params,
            |g, p| {
                let xi = g.input(x.clone());
                let w = g.param_from(p, "w")?;
                let b = g.param_from(p, "b")?;
                let z = g.matmul(xi, w)?;
                let z = g.add_row(z, b)?;
                g.softmax_cross_entropy(z, &[0, 2, 1, 1, 0])
            },
            &GradCheckConfig::default(),
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let params = random_params(3, &[("w", &[2, 3])]);
        let report = finite_diff_check(
            &params,
            |g, p| {
                let w = g.param_from(p, "w")?;
                // value x^2 but derivative claims 3x
                let y = g.map_unary(w, |x| x * x, |x| 3.0 * x)?;
                g.sum(y)
            },
            &GradCheckConfig::default(),
        );
        assert!(!report.pass);
        assert!(!report.failures.is_empty());
    }

    #[test]
    fn build_errors_fail_the_report() {
        let params = random_params(3, &[("w", &[2, 3])]);
        let report = finite_diff_check(
            &params,
            |g, p| {
                let w = g.param_from(p, "w")?;
                g.matmul(w, w)
            },
            &GradCheckConfig::default(),
        );
        assert!(!report.pass);
        assert!(report.error.unwrap().contains("matmul"));
    }
}
