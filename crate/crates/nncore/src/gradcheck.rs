//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checked function is rebuilt from scratch for every probe so batchnorm
//! batch statistics, pooling argmaxes, and any other forward-time state are
//! recomputed consistently. Everything runs in f64: with h = 1e-4 the
//! truncation and roundoff errors both sit well below the 1e-4 acceptance
//! threshold, which f32 evaluation could not guarantee.

use crate::graph::{Graph, VarId};

/// Step size used by the acceptance gradient checks.
pub const FD_STEP: f64 = 1e-4;

/// Leaf specification: shape plus initial values.
pub struct LeafSpec {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl LeafSpec {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        LeafSpec {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Result of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences over every element of every leaf.
///
/// `build` receives the graph and the leaf ids (tracked, in spec order) and
/// must return a scalar loss.
pub fn check_gradients<F>(build: F, leaves: &[LeafSpec]) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> VarId,
{
    let eval = |datasets: &[Vec<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<VarId> = datasets
            .iter()
            .zip(leaves)
            .map(|(d, spec)| g.leaf(d, &spec.shape, true))
            .collect();
        let loss = build(&mut g, &ids);
        g.scalar(loss)
    };

    // Analytic gradients once.
    let base: Vec<Vec<f64>> = leaves.iter().map(|l| l.data.clone()).collect();
    let mut g = Graph::<f64>::new();
    let ids: Vec<VarId> = base
        .iter()
        .zip(leaves)
        .map(|(d, spec)| g.leaf(d, &spec.shape, true))
        .collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("loss must be scalar and tracked");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.grad(*id).expect("tracked leaf").to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.data.len() {
            let mut probe = base.clone();
            probe[li][k] += FD_STEP;
            let up = eval(&probe);
            probe[li][k] -= 2.0 * FD_STEP;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[li][k];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        checked,
    }
}

/// One gradient check over every operator kind, seeded. Returns
/// `(op name, result)` pairs; callers assert `max_rel_err <= 1e-4`.
///
/// Non-scalar ops are reduced through `l1_mean` against a fixed offset
/// target, which probes the backward pass with a random sign pattern
/// rather than a uniform cotangent.
pub fn standard_op_suite(seed: u64) -> Vec<(&'static str, GradCheck)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // Values away from zero so relu/l1/maxpool kinks sit far from the probe.
    let mut smooth = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(lo..hi);
                if v.abs() < 0.05 {
                    v + 0.1 * v.signum().max(0.0).max(1.0)
                } else {
                    v
                }
            })
            .collect()
    };

    let mut results: Vec<(&'static str, GradCheck)> = Vec::new();

    // Helper: run op through an l1 target reduction.
    macro_rules! check_reduced {
        ($name:literal, $leaves:expr, $apply:expr) => {{
            let leaves: Vec<LeafSpec> = $leaves;
            let apply = $apply;
            // Fix the reduction target from the unperturbed output.
            let mut g0 = Graph::<f64>::new();
            let ids0: Vec<VarId> = leaves
                .iter()
                .map(|l| g0.leaf(&l.data, &l.shape, true))
                .collect();
            let out0 = apply(&mut g0, &ids0);
            let out_shape = g0.shape(out0).to_vec();
            let mut trng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let target: Vec<f64> = g0
                .data(out0)
                .iter()
                .map(|v| {
                    let off: f64 = trng.gen_range(0.5..1.5);
                    if trng.gen::<bool>() {
                        v + off
                    } else {
                        v - off
                    }
                })
                .collect();
            let result = check_gradients(
                |g, ids| {
                    let out = apply(g, ids);
                    let t = g.leaf(&target, &out_shape, false);
                    g.l1_mean(out, t).unwrap()
                },
                &leaves,
            );
            results.push(($name, result));
        }};
    }

    let img = LeafSpec::new(&[2, 2, 6, 6], smooth(144, -2.0, 2.0));
    let w33 = LeafSpec::new(&[3, 2, 3, 3], smooth(54, -1.0, 1.0));
    let bias3 = LeafSpec::new(&[3], smooth(3, -0.5, 0.5));
    check_reduced!(
        "conv2d_3x3_s1_p1",
        vec![
            LeafSpec::new(&img.shape, img.data.clone()),
            LeafSpec::new(&w33.shape, w33.data.clone()),
            LeafSpec::new(&bias3.shape, bias3.data.clone()),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap()
    );
    check_reduced!(
        "conv2d_3x3_s2_p1",
        vec![
            LeafSpec::new(&img.shape, img.data.clone()),
            LeafSpec::new(&w33.shape, w33.data.clone()),
            LeafSpec::new(&bias3.shape, bias3.data.clone()),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap()
    );
    check_reduced!(
        "conv_transpose2d_2x2_s2",
        vec![
            LeafSpec::new(&[2, 2, 3, 3], smooth(36, -2.0, 2.0)),
            LeafSpec::new(&[2, 3, 2, 2], smooth(24, -1.0, 1.0)),
            LeafSpec::new(&[3], smooth(3, -0.5, 0.5)),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| {
            g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, 0).unwrap()
        }
    );
    // Distinct values so the pooling argmax is stable under the probe.
    let pool_data: Vec<f64> = (0..64)
        .map(|k| (k as f64) * 0.13 + ((k * 7919) % 64) as f64 * 0.011)
        .collect();
    check_reduced!(
        "maxpool2x2",
        vec![LeafSpec::new(&[1, 4, 4, 4], pool_data.clone())],
        |g: &mut Graph<f64>, ids: &[VarId]| g.maxpool2x2(ids[0]).unwrap()
    );
    check_reduced!(
        "batchnorm_train",
        vec![
            LeafSpec::new(&[2, 3, 4, 4], smooth(96, -2.0, 2.0)),
            LeafSpec::new(&[3], smooth(3, 0.5, 1.5)),
            LeafSpec::new(&[3], smooth(3, -0.5, 0.5)),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| g.batchnorm(ids[0], ids[1], ids[2], None).unwrap()
    );
    let running_mean: Vec<f64> = smooth(3, -0.3, 0.3);
    let running_var: Vec<f64> = smooth(3, 0.5, 1.5);
    check_reduced!(
        "batchnorm_eval",
        vec![
            LeafSpec::new(&[2, 3, 4, 4], smooth(96, -2.0, 2.0)),
            LeafSpec::new(&[3], smooth(3, 0.5, 1.5)),
            LeafSpec::new(&[3], smooth(3, -0.5, 0.5)),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| {
            g.batchnorm(ids[0], ids[1], ids[2], Some((&running_mean, &running_var)))
                .unwrap()
        }
    );
    check_reduced!(
        "relu",
        vec![LeafSpec::new(&[1, 2, 4, 4], smooth(32, -2.0, 2.0))],
        |g: &mut Graph<f64>, ids: &[VarId]| g.relu(ids[0])
    );
    check_reduced!(
        "sigmoid",
        vec![LeafSpec::new(&[1, 2, 4, 4], smooth(32, -3.0, 3.0))],
        |g: &mut Graph<f64>, ids: &[VarId]| g.sigmoid(ids[0])
    );
    check_reduced!(
        "concat_channels",
        vec![
            LeafSpec::new(&[2, 2, 3, 3], smooth(36, -1.0, 1.0)),
            LeafSpec::new(&[2, 3, 3, 3], smooth(54, -1.0, 1.0)),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| g.concat_channels(&[ids[0], ids[1]]).unwrap()
    );
    check_reduced!(
        "linear",
        vec![
            LeafSpec::new(&[3, 5], smooth(15, -1.0, 1.0)),
            LeafSpec::new(&[4, 5], smooth(20, -1.0, 1.0)),
            LeafSpec::new(&[4], smooth(4, -0.5, 0.5)),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| g.linear(ids[0], ids[1], Some(ids[2])).unwrap()
    );
    check_reduced!(
        "add_sub_scale_chain",
        vec![
            LeafSpec::new(&[2, 2, 2, 2], smooth(16, -1.0, 1.0)),
            LeafSpec::new(&[2, 2, 2, 2], smooth(16, -1.0, 1.0)),
        ],
        |g: &mut Graph<f64>, ids: &[VarId]| {
            let s = g.sub(ids[0], ids[1]).unwrap();
            let a = g.add(s, ids[0]).unwrap();
            let sc = g.scale(a, 0.37);
            g.add_const(sc, 1.2)
        }
    );

    // Scalar losses checked directly.
    let a = smooth(24, 0.3, 2.0);
    let b: Vec<f64> = a.iter().map(|v| v + 0.5 + 0.2 * v.sin()).collect();
    results.push((
        "l1_mean",
        check_gradients(
            |g, ids| g.l1_mean(ids[0], ids[1]).unwrap(),
            &[LeafSpec::new(&[24], a.clone()), LeafSpec::new(&[24], b.clone())],
        ),
    ));
    results.push((
        "cosine_sim",
        check_gradients(
            |g, ids| g.cosine_sim(ids[0], ids[1]).unwrap(),
            &[LeafSpec::new(&[24], a.clone()), LeafSpec::new(&[24], b)],
        ),
    ));
    let preds = smooth(16, 0.2, 0.8);
    let labels: Vec<f64> = (0..16).map(|k| (k % 2) as f64).collect();
    results.push((
        "bce",
        check_gradients(
            |g, ids| {
                let t = g.leaf(&labels, &[16], false);
                g.bce(ids[0], t).unwrap()
            },
            &[LeafSpec::new(&[16], preds)],
        ),
    ));
    results.push((
        "sum_all",
        check_gradients(
            |g, ids| g.sum_all(ids[0]),
            &[LeafSpec::new(&[3, 5], smooth(15, -1.0, 1.0))],
        ),
    ));
    results
}
