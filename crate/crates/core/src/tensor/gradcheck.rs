//! Central finite-difference checks of the tape's backward rules.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub params: usize,
    pub passed: bool,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares autodiff gradients of the scalar produced by `build` against
/// central differences for every input element. Returns the worst relative
/// error over all inputs.
pub fn max_rel_error<F>(inputs: &[Tensor], eps: f64, fault: Option<&'static str>, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_backward_fault(op);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.detached().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.detached())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * eps);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// Sums `y ⊙ r` for a fixed pseudo-random `r`, giving every output element a
/// distinct weight in the loss.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = rng::uniform(&mut rng::seeded(seed), shape, -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Builder,
}

fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
    rng::uniform(&mut rng::seeded(seed), shape.to_vec(), -1.0, 1.0)
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let inputs = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_t(1000 + i as u64 * 31 + name.len() as u64, s))
        .collect();
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        case("scale", &[&[5]], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 3)
        }),
        case("scale_by", &[&[3, 2], &[1]], |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        case("batched_matmul", &[&[2, 3, 4], &[2, 4, 5]], |t, v| {
            let y = t.batched_matmul(v[0], v[1], false, 0.7)?;
            weighted_sum(t, y, 6)
        }),
        case("batched_matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
            let y = t.batched_matmul(v[0], v[1], true, 0.5)?;
            weighted_sum(t, y, 7)
        }),
        case("softmax_rows", &[&[3, 5]], |t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 8)
        }),
        case("concat", &[&[2, 3], &[2, 2]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, 9)
        }),
        case("split", &[&[5, 2]], |t, v| {
            let parts = t.split(v[0], 0, &[2, 3])?;
            let a = weighted_sum(t, parts[0], 10)?;
            let b = weighted_sum(t, parts[1], 11)?;
            t.add(a, b)
        }),
        case("reshape", &[&[2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 12)
        }),
        case("mean", &[&[2, 3, 4]], |t, v| {
            let y = t.mean(v[0], &[0, 2])?;
            weighted_sum(t, y, 13)
        }),
        case("sum", &[&[4]], |t, v| t.sum(v[0])),
        case("linear", &[&[3, 4], &[4, 2], &[2]], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, 14)
        }),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, 15)
        }),
        case("gelu", &[&[7]], |t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y, 16)
        }),
        case("sigmoid", &[&[7]], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 17)
        }),
        case("softplus", &[&[7]], |t, v| {
            let y = t.softplus(v[0])?;
            weighted_sum(t, y, 18)
        }),
        case("conv1d", &[&[6, 3], &[3, 3, 2], &[2]], |t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            weighted_sum(t, y, 19)
        }),
        case("conv2d", &[&[2, 4, 3, 2], &[3, 3, 2, 3], &[3]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            weighted_sum(t, y, 20)
        }),
        case("conv3d", &[&[3, 3, 3, 2], &[3, 3, 3, 2, 2], &[2]], |t, v| {
            let y = t.conv3d(v[0], v[1], v[2])?;
            weighted_sum(t, y, 21)
        }),
        case("depthwise_conv2d", &[&[2, 3, 4, 3], &[3, 3, 3], &[3]], |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1], v[2])?;
            weighted_sum(t, y, 22)
        }),
        case("avg_pool", &[&[4, 4, 2, 2]], |t, v| {
            let y = t.avg_pool(v[0], [2, 2, 1])?;
            weighted_sum(t, y, 23)
        }),
        case("split_heads", &[&[3, 8]], |t, v| {
            let y = t.split_heads(v[0], 4)?;
            weighted_sum(t, y, 24)
        }),
        case("merge_heads", &[&[2, 3, 4]], |t, v| {
            let y = t.merge_heads(v[0])?;
            weighted_sum(t, y, 25)
        }),
        case("clip_mix", &[&[6, 3], &[2, 3]], |t, v| {
            let y = t.clip_mix(v[0], v[1], 2)?;
            weighted_sum(t, y, 26)
        }),
        case("bce_with_logits", &[&[3, 4]], |t, v| {
            let targets: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
            t.bce_with_logits(v[0], &targets)
        }),
        Case {
            name: "iou_loss",
            // strictly positive distances away from the target kinks
            inputs: vec![Tensor::new(vec![3, 2], vec![0.6, 1.4, 2.2, 0.9, 1.1, 1.7]).unwrap()],
            build: Box::new(|t, v| {
                let targets = [[1.0, 1.0], [2.0, 1.5], [0.7, 2.0]];
                t.iou_loss(v[0], &[0, 1, 2], &targets)
            }),
        },
    ]
}

/// Runs every primitive-op check. `fault` corrupts one op's backward rule.
pub fn op_suite(fault: Option<&'static str>) -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let err = max_rel_error(&c.inputs, FD_EPS, fault, &c.build)?;
            Ok(CheckOutcome {
                name: c.name.to_string(),
                max_rel_err: err,
                params: c.inputs.iter().map(Tensor::numel).sum(),
                passed: err < FD_TOL,
            })
        })
        .collect()
}

/// Returns the first failing check, if any.
pub fn first_failure(outcomes: &[CheckOutcome]) -> Option<&CheckOutcome> {
    outcomes.iter().find(|o| !o.passed)
}

pub fn ensure_all_pass(outcomes: &[CheckOutcome]) -> Result<()> {
    match first_failure(outcomes) {
        Some(o) => Err(Error::Audit(format!(
            "gradient check `{}` failed: rel err {:.3e}",
            o.name, o.max_rel_err
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let outcomes = op_suite(None).unwrap();
        for o in &outcomes {
            assert!(o.passed, "{} rel err {:e}", o.name, o.max_rel_err);
        }
    }

    #[test]
    fn corrupted_backward_is_caught_and_named() {
        let outcomes = op_suite(Some("softmax_rows")).unwrap();
        let failed = first_failure(&outcomes).expect("fault must be detected");
        assert_eq!(failed.name, "softmax_rows");
        assert_eq!(outcomes.iter().filter(|o| !o.passed).count(), 1);
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let a = rand_t(1, &[2, 3]);
        let b = rand_t(2, &[3, 4]);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone().with_requires_grad(true));
        let vb = tape.constant(b.clone());
        let y = tape.matmul(va, vb).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        let ga = g.get(va).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let expect: f64 = (0..4).map(|j| b.data()[k * 4 + j]).sum();
                assert!((ga[i * 3 + k] - expect).abs() < 1e-14);
            }
        }
        let err = max_rel_error(&[a, b], FD_EPS, None, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn random_three_op_graph() {
        let x = rand_t(3, &[3, 4]);
        let w = rand_t(4, &[4, 4]);
        let err = max_rel_error(&[x, w], FD_EPS, None, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let s = t.softmax_rows(h)?;
            let g = t.gelu(s)?;
            weighted_sum(t, g, 99)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
