//! Finite-difference verification of tape gradients.
//!
//! Runs in f64: central differences with h ~ 1e-4 resolve gradients to
//! ~1e-8 relative error there, far below the 1e-4 acceptance threshold,
//! while f32 rounding would drown the comparison.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::{Tape, Var};
use super::tensor::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Maximum relative error before a coordinate counts as a failure.
    pub tol: f64,
    /// Absolute differences below this are noise around a zero gradient and
    /// never count as failures, whatever their relative error.
    pub abs_floor: f64,
    /// Central-difference step is `step_scale * max(1, |coord|)`.
    pub step_scale: f64,
    /// Coordinates probed per parameter; all of them if numel is smaller.
    pub max_probes_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tol: 1e-4,
            abs_floor: 1e-9,
            step_scale: 1e-4,
            max_probes_per_param: 64,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checks: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare tape gradients of `build` against central differences at every
/// probed coordinate of every parameter. `build` must be a pure function of
/// the parameter values it is handed.
pub fn grad_check<F>(
    name: &str,
    build: F,
    params: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).numel(), 1, "grad_check target must be scalar");
        tape.value(loss).item()
    };

    // analytic gradients from one taped pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &vars);
    let gs = tape.backward_scalar(loss);
    let zero_grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let analytic: Vec<&[f64]> = vars
        .iter()
        .zip(&zero_grads)
        .map(|(v, z)| gs.get(*v).unwrap_or(z.as_slice()))
        .collect();

    let mut stream = rng::stream(cfg.seed, "gradcheck-probes", 0, 0);
    let mut report = GradCheckReport {
        name: name.to_string(),
        checks: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords = probe_coords(p.numel(), cfg.max_probes_per_param, &mut stream);
        for c in coords {
            let theta = p.data()[c];
            let h = cfg.step_scale * theta.abs().max(1.0);
            work[pi].data_mut()[c] = theta + h;
            let up = eval(&work);
            work[pi].data_mut()[c] = theta - h;
            let down = eval(&work);
            work[pi].data_mut()[c] = theta;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][c];
            let diff = (a - numeric).abs();
            let rel = if diff <= cfg.abs_floor {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(1e-8)
            };
            report.checks += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > cfg.tol {
                report.failures.push(format!(
                    "{name}: param {pi} coord {c}: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
                ));
            }
        }
    }
    report
}

fn probe_coords(numel: usize, max_probes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= max_probes {
        (0..numel).collect()
    } else {
        rand::seq::index::sample(rng, numel, max_probes).into_vec()
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Gradient checks for every differentiable op, plus small compositions that
/// mirror how the encoder and losses chain them. Returns one report per op.
pub fn op_suite(seed: u64) -> Vec<GradCheckReport> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut rng = rng::stream(seed, "gradcheck-suite", 0, 0);
    let mut reports = Vec::new();

    {
        let params = vec![
            rand_tensor(&[3, 4], &mut rng),
            rand_tensor(&[4, 5], &mut rng),
            rand_tensor(&[5], &mut rng),
        ];
        reports.push(grad_check(
            "linear",
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                t.mean_all(y)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[6, 4], &mut rng)];
        reports.push(grad_check(
            "matmul_nt",
            |t, v| {
                let y = t.matmul_nt(v[0], v[1]);
                t.mean_all(y)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[2, 4, 3], &mut rng)];
        reports.push(grad_check(
            "bmm",
            |t, v| {
                let y = t.bmm(v[0], v[1]);
                t.mean_all(y)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[2, 5, 4], &mut rng)];
        reports.push(grad_check(
            "bmm_nt",
            |t, v| {
                let y = t.bmm_nt(v[0], v[1]);
                t.mean_all(y)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![
            rand_tensor(&[4, 6], &mut rng),
            rand_tensor(&[6], &mut rng),
            rand_tensor(&[6], &mut rng),
        ];
        reports.push(grad_check(
            "layer_norm",
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
                // square to exercise the normalized values, not just their sum
                let y2 = t.mul_elem(y, y);
                t.mean_all(y2)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[3, 5], &mut rng)];
        reports.push(grad_check(
            "gelu",
            |t, v| {
                let y = t.gelu(v[0]);
                t.mean_all(y)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[3, 5], &mut rng)];
        let weights = rand_tensor(&[3, 5], &mut rng);
        reports.push(grad_check(
            "softmax_rows",
            move |t, v| {
                let p = t.softmax_rows(v[0]);
                let w = t.constant(weights.clone());
                let prod = t.mul_elem(p, w);
                t.mean_all(prod)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[4, 3], &mut rng)];
        let weights = rand_tensor(&[4, 3], &mut rng);
        reports.push(grad_check(
            "l2norm_rows",
            move |t, v| {
                let y = t.l2norm_rows(v[0], 1e-8);
                let w = t.constant(weights.clone());
                let prod = t.mul_elem(y, w);
                t.mean_all(prod)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[4, 8], &mut rng)];
        reports.push(grad_check(
            "slice_concat_select",
            |t, v| {
                let a = t.slice_cols(v[0], 0, 3);
                let b = t.slice_cols(v[0], 3, 6);
                let c = t.concat0(&[a, b]);
                let picked = t.select_rows(c, vec![0, 2, 2, 5]);
                t.mean_all(picked)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[5, 4], &mut rng), rand_tensor(&[4], &mut rng)];
        let mask = vec![true, false, true, false, false];
        reports.push(grad_check(
            "mask_blend",
            move |t, v| {
                let y = t.mask_blend(v[0], mask.clone(), v[1]);
                let sq = t.mul_elem(y, y);
                t.mean_all(sq)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[2, 3, 4, 2], &mut rng)];
        let weights = rand_tensor(&[2, 4, 3, 2], &mut rng);
        reports.push(grad_check(
            "permute_12",
            move |t, v| {
                let y = t.permute_12(v[0]);
                let w = t.constant(weights.clone());
                let prod = t.mul_elem(y, w);
                t.mean_all(prod)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[9, 3], &mut rng)];
        let weights = rand_tensor(&[25, 3], &mut rng);
        reports.push(grad_check(
            "bilinear_grid",
            move |t, v| {
                let y = t.bilinear_grid(v[0], 3, 5);
                let w = t.constant(weights.clone());
                let prod = t.mul_elem(y, w);
                t.mean_all(prod)
            },
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[4, 6], &mut rng)];
        let mut target = rand_tensor(&[4, 6], &mut rng);
        for row in target.data_mut().chunks_mut(6) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        reports.push(grad_check(
            "soft_ce",
            move |t, v| t.soft_ce(&target, v[0], 0.1),
            &params,
            &cfg,
        ));
    }
    {
        let params = vec![rand_tensor(&[6, 4], &mut rng)];
        reports.push(grad_check("koleo", |t, v| t.koleo(v[0], 1e-8), &params, &cfg));
    }
    {
        // single-head attention block: qkv projection, scaled scores,
        // softmax, value mix, output projection
        let params = vec![
            rand_tensor(&[5, 4], &mut rng),
            rand_tensor(&[4, 12], &mut rng),
            rand_tensor(&[12], &mut rng),
            rand_tensor(&[4, 4], &mut rng),
        ];
        reports.push(grad_check(
            "attention_block",
            |t, v| {
                let qkv = t.linear(v[0], v[1], Some(v[2]));
                let q = t.slice_cols(qkv, 0, 4);
                let k = t.slice_cols(qkv, 4, 8);
                let val = t.slice_cols(qkv, 8, 12);
                let q3 = t.reshape(q, &[1, 5, 4]);
                let k3 = t.reshape(k, &[1, 5, 4]);
                let v3 = t.reshape(val, &[1, 5, 4]);
                let scores = t.bmm_nt(q3, k3);
                let scaled = t.scale(scores, 0.5);
                let att = t.softmax_rows(scaled);
                let mixed = t.bmm(att, v3);
                let flat = t.reshape(mixed, &[5, 4]);
                let out = t.linear(flat, v[3], None);
                let sq = t.mul_elem(out, out);
                t.mean_all(sq)
            },
            &params,
            &cfg,
        ));
    }
    {
        // projection head: two hidden layers, normalized bottleneck, unit
        // prototypes, tempered cross-entropy against a fixed target
        let params = vec![
            rand_tensor(&[3, 6], &mut rng),
            rand_tensor(&[6, 8], &mut rng),
            rand_tensor(&[8], &mut rng),
            rand_tensor(&[8, 4], &mut rng),
            rand_tensor(&[4], &mut rng),
            rand_tensor(&[7, 4], &mut rng),
        ];
        let target = {
            let mut t = rand_tensor(&[3, 7], &mut rng);
            for row in t.data_mut().chunks_mut(7) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            t
        };
        reports.push(grad_check(
            "projection_head",
            move |t, v| {
                let h1 = t.linear(v[0], v[1], Some(v[2]));
                let a1 = t.gelu(h1);
                let h2 = t.linear(a1, v[3], Some(v[4]));
                let z = t.l2norm_rows(h2, 1e-8);
                let protos = t.l2norm_rows(v[5], 1e-8);
                let logits = t.matmul_nt(z, protos);
                t.soft_ce(&target, logits, 0.1)
            },
            &params,
            &cfg,
        ));
    }
    reports
}
