//! Randomized verification of the gradient engine.
//!
//! [`gradient_suite`] drives every differentiable operation — primitive
//! tape ops, the attention-based context layers, and the three loss
//! heads — through repeated random trials, comparing tape gradients
//! against central finite differences. Inputs that would sit on a
//! non-differentiable kink (a ReLU boundary or a max-pool tie) are
//! redrawn, since finite differences say nothing meaningful there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{
    gcm_on_tape, load_attention, load_context, pcm_on_tape, AttentionParams, ClusterAttention,
    ContextParams,
};
use crate::tensor::{
    grad_check, GradCheckError, LayerNormParams, LinearParams, Mlp, Tensor, TensorError,
};

/// Worst observed behaviour of one operation across its random trials.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl std::fmt::Display for OpCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {:>4} trials  max rel err {:.3e}  {}",
            self.name,
            self.trials,
            self.max_rel_err,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("random data is finite")
}

fn rand_weights(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> LinearParams {
    LinearParams::new(
        rand_tensor(rng, vec![d_in, d_out], -1.0, 1.0),
        rand_tensor(rng, vec![d_out], -0.5, 0.5),
    )
    .expect("widths agree")
}

fn rand_attention(rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
    AttentionParams {
        theta: rand_linear(rng, d, d),
        phi: rand_linear(rng, d, d),
        g: rand_linear(rng, d, d),
        ln: LayerNormParams {
            gain: rand_tensor(rng, vec![d], 0.5, 1.5),
            bias: rand_tensor(rng, vec![d], -0.5, 0.5),
            eps: 1e-5,
        },
    }
}

/// Smallest distance any entry of `x · w` may have from zero before the
/// draw is rejected; keeps ReLU inputs away from their kink by far more
/// than the finite-difference step.
const KINK_MARGIN: f64 = 1e-3;

fn product_clears_kinks(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> bool {
    let (n, k) = (x.rows(), x.cols());
    let m = w.cols();
    for i in 0..n {
        for j in 0..m {
            let mut acc = bias.map_or(0.0, |b| b.data()[j]);
            for l in 0..k {
                acc += x.at(i, l) * w.at(l, j);
            }
            if acc.abs() < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

/// Per-channel top-two gap over each cluster's member rows of `values`,
/// which must exceed the margin for a max pool to be finite-difference
/// safe.
fn pools_clear_ties(values: &Tensor, members: &[Vec<usize>]) -> bool {
    let d = values.cols();
    for cluster in members {
        for j in 0..d {
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &row in cluster {
                let v = values.at(row, j);
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            if cluster.len() > 1 && top - second < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

fn affine(x: &Tensor, lin: &LinearParams) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let m = lin.weight.cols();
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = lin.bias.data()[j];
            for l in 0..k {
                acc += x.at(i, l) * lin.weight.at(l, j);
            }
            data[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], data).expect("finite affine output")
}

/// Runs `trials` randomized gradient checks for every differentiable
/// operation and composite layer, at the given tolerance. The returned
/// list holds one entry per operation with its worst relative error;
/// `passed` is false where any trial exceeded the tolerance.
pub fn gradient_suite(
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<OpCheck>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<OpCheck> = Vec::new();

    let case = |out: &mut Vec<OpCheck>,
                    name: &'static str,
                    rng: &mut ChaCha8Rng,
                    run: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<crate::tensor::GradReport, GradCheckError>|
     -> Result<(), GradCheckError> {
        let mut worst = 0.0f64;
        let mut passed = true;
        for _ in 0..trials {
            let report = run(rng)?;
            worst = worst.max(report.max_rel_err);
            passed &= report.passed;
        }
        out.push(OpCheck {
            name,
            trials,
            max_rel_err: worst,
            passed,
        });
        Ok(())
    };

    case(&mut out, "matmul-left", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let b = rand_tensor(rng, vec![4, 2], -2.0, 2.0);
        let w = rand_weights(rng, 6);
        grad_check("matmul-left", &x, tolerance, |tape, ix| {
            let ib = tape.leaf(&b);
            let y = tape.matmul(ix, ib)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "matmul-right", &mut rng, &mut |rng| {
        let a = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let x = rand_tensor(rng, vec![4, 2], -2.0, 2.0);
        let w = rand_weights(rng, 6);
        grad_check("matmul-right", &x, tolerance, |tape, ix| {
            let ia = tape.leaf(&a);
            let y = tape.matmul(ia, ix)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "transpose", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let c = rand_tensor(rng, vec![3, 2], -2.0, 2.0);
        let w = rand_weights(rng, 8);
        grad_check("transpose", &x, tolerance, |tape, ix| {
            let ic = tape.leaf(&c);
            let t = tape.transpose(ix);
            let y = tape.matmul(t, ic)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "add-scale-addrow", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let b = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let r = rand_tensor(rng, vec![4], -1.0, 1.0);
        let w = rand_weights(rng, 12);
        grad_check("add-scale-addrow", &x, tolerance, |tape, ix| {
            let ib = tape.leaf(&b);
            let ir = tape.leaf(&r);
            let s = tape.scale(ix, 1.7);
            let a = tape.add(s, ib)?;
            let y = tape.add_row(a, ir)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "relu", &mut rng, &mut |rng| {
        let (x, m) = loop {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let m = rand_tensor(rng, vec![4, 5], -1.0, 1.0);
            if product_clears_kinks(&x, &m, None) {
                break (x, m);
            }
        };
        let w = rand_weights(rng, 15);
        grad_check("relu", &x, tolerance, |tape, ix| {
            let im = tape.leaf(&m);
            let y = tape.matmul(ix, im)?;
            let r = tape.relu(y);
            tape.weighted_sum(r, &w)
        })
    })?;

    case(&mut out, "exp", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 3], -2.0, 2.0);
        let w = rand_weights(rng, 9);
        grad_check("exp", &x, tolerance, |tape, ix| {
            let s = tape.scale(ix, 0.4);
            let e = tape.exp(s);
            tape.weighted_sum(e, &w)
        })
    })?;

    case(&mut out, "row-softmax", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![4, 5], -3.0, 3.0);
        let w = rand_weights(rng, 20);
        grad_check("row-softmax", &x, tolerance, |tape, ix| {
            let s = tape.row_softmax(ix);
            tape.weighted_sum(s, &w)
        })
    })?;

    case(&mut out, "layer-norm-input", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![4, 6], -2.0, 2.0);
        let gain = rand_tensor(rng, vec![6], 0.5, 1.5);
        let bias = rand_tensor(rng, vec![6], -0.5, 0.5);
        let w = rand_weights(rng, 24);
        grad_check("layer-norm-input", &x, tolerance, |tape, ix| {
            let ig = tape.leaf(&gain);
            let ib = tape.leaf(&bias);
            let y = tape.layer_norm(ix, ig, ib, 1e-5)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "layer-norm-params", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![4, 6], -2.0, 2.0);
        let gain = rand_tensor(rng, vec![6], 0.5, 1.5);
        let bias = rand_tensor(rng, vec![6], -0.5, 0.5);
        let w = rand_weights(rng, 24);
        grad_check("layer-norm-params", &gain, tolerance, |tape, ig| {
            let ix = tape.leaf(&x);
            let ib = tape.leaf(&bias);
            let y = tape.layer_norm(ix, ig, ib, 1e-5)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "max-pool", &mut rng, &mut |rng| {
        let members = vec![(0..6).collect::<Vec<usize>>()];
        let x = loop {
            let x = rand_tensor(rng, vec![6, 5], -2.0, 2.0);
            if pools_clear_ties(&x, &members) {
                break x;
            }
        };
        let w = rand_weights(rng, 5);
        grad_check("max-pool", &x, tolerance, |tape, ix| {
            let p = tape.max_pool_set(ix)?;
            tape.weighted_sum(p, &w)
        })
    })?;

    case(&mut out, "select-concat-reshape", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![5, 4], -2.0, 2.0);
        let wa = rand_weights(rng, 36);
        let wb = rand_weights(rng, 40);
        let wc = rand_weights(rng, 20);
        grad_check("select-concat-reshape", &x, tolerance, |tape, ix| {
            // A repeated index exercises gradient scatter-accumulation.
            let sel = tape.select_rows(ix, &[4, 0, 2, 2])?;
            let rows = tape.concat_rows(&[sel, ix])?;
            let cols = tape.concat_cols(&[ix, ix])?;
            let flat = tape.reshape(ix, vec![20])?;
            let la = tape.weighted_sum(rows, &wa)?;
            let lb = tape.weighted_sum(cols, &wb)?;
            let lc = tape.weighted_sum(flat, &wc)?;
            let ab = tape.add(la, lb)?;
            tape.add(ab, lc)
        })
    })?;

    case(&mut out, "sum-all", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        grad_check("sum-all", &x, tolerance, |tape, ix| {
            let s = tape.scale(ix, -0.6);
            Ok(tape.sum_all(s))
        })
    })?;

    case(&mut out, "mlp", &mut rng, &mut |rng| {
        let (x, mlp) = loop {
            let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
            let l0 = rand_linear(rng, 3, 5);
            let l1 = rand_linear(rng, 5, 2);
            if product_clears_kinks(&x, &l0.weight, Some(&l0.bias)) {
                break (x, Mlp::new(vec![l0, l1]).expect("chain"));
            }
        };
        let w = rand_weights(rng, 8);
        grad_check("mlp", &x, tolerance, |tape, ix| {
            let ids = tape.load_mlp(&mlp);
            let y = tape.mlp_forward(ix, &ids)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "attention-value", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![6, 4], -1.5, 1.5);
        let attn = rand_attention(rng, 4);
        let w = rand_weights(rng, 24);
        grad_check("attention-value", &x, tolerance, |tape, ix| {
            let ids = load_attention(tape, &attn);
            let y = gcm_on_tape(tape, ix, &ids, 0.5).map_err(flatten_context)?;
            tape.weighted_sum(y, &w)
        })
    })?;

    case(&mut out, "cluster-refine", &mut rng, &mut |rng| {
        let members: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7]];
        // A single affine layer keeps the composite free of ReLU kinks;
        // pooling ties are rejected below.
        let (x, mlp) = loop {
            let x = rand_tensor(rng, vec![8, 4], -1.5, 1.5);
            let lin = rand_linear(rng, 4, 4);
            let pooled_input = affine(&x, &lin);
            if pools_clear_ties(&pooled_input, &members) {
                break (x, Mlp::new(vec![lin]).expect("single layer"));
            }
        };
        let attn = rand_attention(rng, 4);
        let w = rand_weights(rng, 12);
        grad_check("cluster-refine", &x, tolerance, |tape, ix| {
            let mlp_ids = tape.load_mlp(&mlp);
            let attn_ids = load_attention(tape, &attn);
            let (refined, _) = pcm_on_tape(
                tape,
                ix,
                &members,
                &mlp_ids,
                &attn_ids,
                0.5,
                ClusterAttention::AcrossClusters,
            )
            .map_err(flatten_context)?;
            tape.weighted_sum(refined, &w)
        })
    })?;

    case(&mut out, "scene-blend", &mut rng, &mut |rng| {
        let members: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7]];
        let (x, params) = loop {
            let x = rand_tensor(rng, vec![8, 4], -1.5, 1.5);
            let pcm_lin = rand_linear(rng, 4, 4);
            let pooled_input = affine(&x, &pcm_lin);
            // The scene module pools the refined clusters and the raw
            // primitive rows; reject draws where either pool sits on a
            // tie. Cluster-side values go through attention and layer
            // normalization, so ties there are vanishingly unlikely and
            // checked implicitly by the tolerance.
            if pools_clear_ties(&pooled_input, &members)
                && pools_clear_ties(&x, &[(0..8).collect()])
            {
                let params = ContextParams {
                    gcm: rand_attention(rng, 4),
                    pcm_mlp: Mlp::new(vec![pcm_lin]).expect("single layer"),
                    pcm_attn: rand_attention(rng, 4),
                    hcm_mlp: Mlp::new(vec![rand_linear(rng, 8, 4)]).expect("single layer"),
                };
                break (x, params);
            }
        };
        let cfg = crate::context::ContextConfig::default();
        let w = rand_weights(rng, 12);
        let wp = rand_weights(rng, 32);
        grad_check("scene-blend", &x, tolerance, |tape, ix| {
            let ids = load_context(tape, &params);
            let zero = tape.leaf(&Tensor::zeros(vec![3, 4]));
            let outp =
                crate::context::apply_context_on_tape(tape, ix, zero, &members, &ids, &cfg)
                    .map_err(flatten_context)?;
            let lc = tape.weighted_sum(outp.cluster, &w)?;
            let lp = tape.weighted_sum(outp.primitive, &wp)?;
            tape.add(lc, lp)
        })
    })?;

    case(&mut out, "smooth-l1", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..4).map(|_| [0.0, 1.0, 2.0][rng.gen_range(0..3)]).collect();
        grad_check("smooth-l1", &x, tolerance, |tape, ix| {
            tape.smooth_l1_loss(ix, &target, &weights)
        })
    })?;

    case(&mut out, "bce-logits", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![5, 1], -3.0, 3.0);
        let targets: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..4.0)).collect();
        grad_check("bce-logits", &x, tolerance, |tape, ix| {
            tape.bce_with_logits_loss(ix, &targets, &weights)
        })
    })?;

    case(&mut out, "cross-entropy", &mut rng, &mut |rng| {
        let x = rand_tensor(rng, vec![5, 4], -3.0, 3.0);
        let classes: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let weights: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2))).collect();
        grad_check("cross-entropy", &x, tolerance, |tape, ix| {
            tape.softmax_cross_entropy_loss(ix, &classes, &weights)
        })
    })?;

    Ok(out)
}

fn flatten_context(e: crate::context::ContextError) -> TensorError {
    TensorError::Invalid {
        op: "context",
        msg: e.to_string(),
    }
}
