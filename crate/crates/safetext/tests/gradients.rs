//! Central finite-difference checks for every differentiable operation,
//! capped by the full alignment batch objective differentiated through a
//! two-layer toy encoder. The numeric side never touches the tape: it
//! re-evaluates a plain closure at perturbed inputs, so agreement is an
//! independent oracle for the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetext::align::{batch_loss, build_batch_loss, AlignmentConfig};
use safetext::encoder::{encode_pooled_batch, leaves, EncoderConfig, EncoderState, Pooling, Vocab};
use safetext::tensor::gradcheck::{central_gradient, max_rel_err};
use safetext::tensor::{Graph, Tensor, Var};

const STEP: f64 = 1e-5;
/// Blanket tolerance for every differentiable op.
const TOL: f64 = 1e-4;
/// Tighter tolerance for the three numerically delicate core ops.
const TOL_CORE: f64 = 1e-6;

/// Uniform values in [-2, 2], the documented gradient-check input range.
fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Check one op: build it over leaf inputs, reduce with a fixed random
/// weighting (so every output coordinate gets a distinct upstream
/// gradient), and compare tape gradients against central differences on
/// the flattened inputs.
fn check_op<F>(shapes: &[(usize, usize)], seed: u64, tol: f64, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|&(r, c)| Tensor::from_vec(&[r, c], uniform(&mut rng, r * c)).unwrap().with_grad())
        .collect();

    // One probe pass to learn the output shape, then fixed weights.
    let out_numel = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t).unwrap()).collect();
        let out = build(&mut g, &vars);
        let (r, c) = g.shape(out);
        r * c
    };
    let weights = uniform(&mut rng, out_numel);

    let eval = |flat: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut off = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for &(r, c) in shapes {
            let mut t = Tensor::from_vec(&[r, c], flat[off..off + r * c].to_vec()).unwrap();
            if want_grads {
                t = t.with_grad();
            }
            off += r * c;
            vars.push(g.leaf(&t).unwrap());
        }
        let out = build(&mut g, &vars);
        let (wr, wc) = g.shape(out);
        let w = g.constant(wr, wc, &weights).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum_all(prod);
        let value = g.value(loss)[0];
        let grads = if want_grads {
            g.backward(loss).unwrap();
            vars.iter().flat_map(|&v| g.grad(v).unwrap().to_vec()).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let flat0: Vec<f64> = inputs.iter().flat_map(|t| t.data.clone()).collect();
    let (_, analytic) = eval(&flat0, true);
    let numeric = central_gradient(|flat| eval(flat, false).0, &flat0, STEP);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "max rel err {err:.3e} exceeds {tol:.0e}");
}

#[test]
fn matmul_gradients() {
    check_op(&[(3, 4), (4, 2)], 1, TOL_CORE, |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn softmax_rows_gradients() {
    check_op(&[(2, 5)], 2, TOL_CORE, |g, v| g.softmax_rows(v[0]));
}

#[test]
fn layer_norm_gradients() {
    check_op(&[(3, 6), (1, 6), (1, 6)], 3, TOL_CORE, |g, v| {
        g.layer_norm(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn add_sub_gradients() {
    check_op(&[(2, 3), (2, 3)], 4, TOL, |g, v| g.add(v[0], v[1]).unwrap());
    check_op(&[(2, 3), (2, 3)], 5, TOL, |g, v| g.sub(v[0], v[1]).unwrap());
}

#[test]
fn mul_gradients() {
    check_op(&[(2, 3), (2, 3)], 6, TOL, |g, v| g.mul(v[0], v[1]).unwrap());
}

#[test]
fn div_gradients() {
    // Keep denominators away from the pole: |b| >= 0.5.
    check_op(&[(2, 3), (2, 3)], 7, TOL, |g, v| {
        let half = g.constant(2, 3, &[0.5; 6]).unwrap();
        let babs = g.abs(v[1]);
        let denom = g.add(babs, half).unwrap();
        g.div(v[0], denom).unwrap()
    });
}

#[test]
fn scale_gradients() {
    check_op(&[(2, 3)], 8, TOL, |g, v| g.scale(v[0], -1.7));
}

#[test]
fn add_row_gradients() {
    check_op(&[(3, 4), (1, 4)], 9, TOL, |g, v| g.add_row(v[0], v[1]).unwrap());
}

#[test]
fn tile_rows_gradients() {
    check_op(&[(1, 4)], 10, TOL, |g, v| g.tile_rows(v[0], 3));
}

#[test]
fn quick_gelu_gradients() {
    check_op(&[(2, 4)], 11, TOL, |g, v| g.quick_gelu(v[0]));
}

#[test]
fn sqrt_gradients() {
    // Positive inputs; the derivative convention at exactly zero is covered
    // by the unit tests and is not finite-difference checkable.
    check_op(&[(2, 3)], 12, TOL, |g, v| {
        let two = g.constant(2, 3, &[2.5; 6]).unwrap();
        let a = g.abs(v[0]);
        let pos = g.add(a, two).unwrap();
        g.sqrt(pos)
    });
}

#[test]
fn abs_gradients() {
    // Inputs bounded away from the kink at zero.
    check_op(&[(2, 3)], 13, TOL, |g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        let off = g.constant(2, 3, &[0.25; 6]).unwrap();
        let shifted = g.add(sq, off).unwrap();
        g.abs(shifted)
    });
}

#[test]
fn gather_rows_gradients() {
    // Repeated ids make the backward accumulate into shared rows.
    check_op(&[(6, 3)], 14, TOL, |g, v| {
        g.gather_rows(v[0], &[4, 0, 2, 2, 5, 0]).unwrap()
    });
}

#[test]
fn attention_gradients() {
    // Two sequences of length 3 with a masked pad position in the second.
    let (b, l, d, heads) = (2, 3, 4, 2);
    check_op(&[(b * l, d), (b * l, d), (b * l, d)], 15, TOL, |g, v| {
        g.attention(v[0], v[1], v[2], heads, l, &[3, 2]).unwrap()
    });
}

#[test]
fn slice_rows_gradients() {
    check_op(&[(5, 3)], 16, TOL, |g, v| g.slice_rows(v[0], 1, 3).unwrap());
}

#[test]
fn mean_rows_gradients() {
    check_op(&[(4, 3)], 17, TOL, |g, v| g.mean_rows(v[0]));
}

#[test]
fn sum_all_gradient_is_all_ones() {
    let t = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.7, -0.2, 1.1])
        .unwrap()
        .with_grad();
    let mut g = Graph::new();
    let x = g.leaf(&t).unwrap();
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

/// The headline check: analytic gradients of the full batch objective
/// (safe anchoring plus weighted unsafe divergence) against central
/// differences over every parameter of a two-layer toy encoder.
fn objective_fd_case(d_u: safetext::metrics::DistanceMetric, d_e: safetext::metrics::DistanceMetric) {
    let corpus = [
        "sunlit harbor sketch at dawn",
        "quiet garden painting",
        "lewd explicit figure study",
        "nude seductive pose",
    ];
    let vocab = Vocab::build(&corpus, 32).unwrap();
    let config = EncoderConfig {
        max_len: 6,
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        pooling: Pooling::Flatten,
        seed: 11,
    };
    let tau = EncoderState::init(config, vocab).unwrap().frozen_copy();
    let cfg = AlignmentConfig {
        d_u,
        d_e,
        ..AlignmentConfig::default()
    };
    let safe: Vec<String> = corpus[..2].iter().map(|s| s.to_string()).collect();
    let unsafe_prompts: Vec<String> = corpus[2..].iter().map(|s| s.to_string()).collect();

    let safe_refs = encode_pooled_batch(&tau, &safe).unwrap();
    let unsafe_refs = encode_pooled_batch(&tau, &unsafe_prompts).unwrap();
    let safe_ref_slices: Vec<&[f64]> = safe_refs.iter().map(|v| v.as_slice()).collect();
    let unsafe_ref_slices: Vec<&[f64]> = unsafe_refs.iter().map(|v| v.as_slice()).collect();

    let l = tau.config.max_len;
    let mut ids = Vec::new();
    let mut valid = Vec::new();
    for p in safe.iter().chain(&unsafe_prompts) {
        let (pi, pv) = tau.vocab.encode_prompt(p, l);
        ids.extend_from_slice(&pi);
        valid.push(pv);
    }

    // Nudge the trainable copy off the reference so the safe anchoring
    // distance is evaluated away from the sqrt cusp at zero; finite
    // differences are only meaningful at a generic point.
    let mut tau_s = tau.trainable_copy();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(99);
    let jittered: Vec<f64> = tau_s
        .flat_params()
        .iter()
        .map(|p| p + noise_rng.gen_range(-0.05..0.05))
        .collect();
    tau_s.set_flat_params(&jittered).unwrap();

    // Analytic pass through the tape.
    let mut g = Graph::new();
    let pv = leaves(&mut g, &tau_s).unwrap();
    let vars = build_batch_loss(
        &mut g,
        &pv,
        &tau_s.config,
        &ids,
        &valid,
        safe.len(),
        &safe_ref_slices,
        &unsafe_ref_slices,
        &cfg,
    )
    .unwrap();
    g.backward(vars.objective).unwrap();
    let mut analytic = Vec::new();
    for v in pv.ordered() {
        match g.grad(v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => {
                let (r, c) = g.shape(v);
                analytic.extend(std::iter::repeat_n(0.0, r * c));
            }
        }
    }

    // Numeric pass through the plain evaluator.
    let flat0 = tau_s.flat_params();
    let mut probe = tau.trainable_copy();
    let numeric = central_gradient(
        |flat| {
            probe.set_flat_params(flat).unwrap();
            batch_loss(&probe, &tau, &safe, &unsafe_prompts, &cfg).unwrap().0
        },
        &flat0,
        STEP,
    );
    assert_eq!(analytic.len(), numeric.len());
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < TOL, "objective ({d_u}, {d_e}): max rel err {err:.3e}");
}

#[test]
fn alignment_objective_gradients_default_metrics() {
    objective_fd_case(
        safetext::metrics::DistanceMetric::Euclidean,
        safetext::metrics::DistanceMetric::NegCosine,
    );
}

#[test]
fn alignment_objective_gradients_euclidean_divergence() {
    objective_fd_case(
        safetext::metrics::DistanceMetric::Euclidean,
        safetext::metrics::DistanceMetric::Euclidean,
    );
}
