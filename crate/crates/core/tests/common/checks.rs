//! The acceptance checks. Each returns an [`Outcome`]; the acceptance target
//! prints one line per check, and the focused test targets reuse the pieces.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::Rng;

use dethub::boxes::giou;
use dethub::detector::{
    align_logits, align_scores, AdaptationConfig, AdaptationMode, Conditioning, DecoderStage,
    Detector, DetectorConfig, DyConvConfig, ModelConfig, QueriesConfig,
};
use dethub::engine::{
    compute_map, preset_cells, read_metrics, run_ablation, AblationPreset, AblationTable,
    Prediction, Trainer, COCO_IOU_THRESHOLDS, METRICS_FILE,
};
use dethub::losses::{
    alignment_loss, alignment_loss_from_logits, hungarian_match, matching_cost, total_loss,
    Assignment, CostMatrix, CostWeights, ImageTargets, LossWeights, StageOutput,
};
use dethub::nn::ParamStore;
use dethub::queryhub::{
    hub_adapt, DyConv, DynamicKernels, KernelShape, MultiHeadAttention, QueryAdapter,
};
use dethub::taxonomy::{
    make_target_matrix, tokenize_prompt, DatasetEmbedding, DetectionPrompt, EmbedderSpec,
};

use super::oracles::{brute_force_map, exhaustive_min_cost, map_fixtures, sliding_window_dyconv};
use super::{
    central_difference, median, relative_error, rng, synth_datasets, tensor, tiny_config, to_vec,
    toy_config, uniform_vec, Outcome,
};

type Check = (&'static str, fn() -> Result<(), String>);

fn fail(msg: impl Into<String>) -> Result<(), String> {
    Err(msg.into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Equation-level checks
// ---------------------------------------------------------------------------

fn hub_output_shape() -> Result<(), String> {
    let mut ps = ParamStore::new(DType::F64, 1);
    let adapter = QueryAdapter::new(&mut ps, "a", 8, 6, 2).map_err(err)?;
    let mut r = rng(1);
    let q = tensor(uniform_vec(&mut r, 2 * 5 * 8, 1.0), &[2, 5, 8]);
    let e = tensor(uniform_vec(&mut r, 2 * 7 * 6, 1.0), &[2, 7, 6]);
    let (q_prime, q_star) = adapter.forward(&q, Some((&e, &[7, 4]))).map_err(err)?;
    ensure(q_prime.dims() == [2, 5, 8] && q_star.dims() == [2, 5, 8], || {
        format!("Q' {:?}, Q* {:?}", q_prime.dims(), q_star.dims())
    })
}

fn single_key_attention_returns_value() -> Result<(), String> {
    // With one valid key, the softmax is exactly 1 on it: every query gets
    // W_o (W_v e_0 + b_v) + b_o regardless of its own content.
    let mut ps = ParamStore::new(DType::F64, 2);
    let hub = MultiHeadAttention::new(&mut ps, "hub", 4, 3, 2).map_err(err)?;
    let mut r = rng(2);
    let q = tensor(uniform_vec(&mut r, 3 * 4, 1.0), &[1, 3, 4]);
    let e = tensor(uniform_vec(&mut r, 2 * 3, 1.0), &[1, 2, 3]);
    let out = hub_adapt(&hub, &q, &e, &[1]).map_err(err)?;
    let e0 = e.narrow(1, 0, 1).map_err(err)?;
    let expected = hub
        .w_o
        .forward(&hub.w_v.forward(&e0).map_err(err)?)
        .map_err(err)?;
    let exp = to_vec(&expected);
    let got = to_vec(&out);
    for (i, v) in got.iter().enumerate() {
        if (v - exp[i % 4]).abs() > 1e-12 {
            return fail(format!("query output {v} vs value path {}", exp[i % 4]));
        }
    }
    Ok(())
}

fn kernel_shapes() -> Result<(), String> {
    let shape = KernelShape {
        k: 3,
        c_in: 6,
        c_mid: 2,
        c_out: 5,
    };
    let mut ps = ParamStore::new(DType::F64, 3);
    let dc = DyConv::new(&mut ps, "dc", 8, shape, false).map_err(err)?;
    let q = tensor(uniform_vec(&mut rng(3), 4 * 8, 1.0), &[4, 8]);
    let k = dc.generator.generate(&q).map_err(err)?;
    ensure(
        k.k1.dims() == [4, 9 * 6, 2] && k.k2.dims() == [4, 9 * 2, 5],
        || format!("K1 {:?}, K2 {:?}", k.k1.dims(), k.k2.dims()),
    )?;
    let x = tensor(uniform_vec(&mut rng(4), 4 * 5 * 5 * 6, 1.0), &[4, 5, 5, 6]);
    let y = dc.apply(&x, &k).map_err(err)?;
    ensure(y.dims() == [4, 5, 5, 5], || format!("output {:?}", y.dims()))
}

fn identity_dyconv_in_linear_mode() -> Result<(), String> {
    let c = 3;
    let k = 3;
    let mut ps = ParamStore::new(DType::F64, 4);
    let shape = KernelShape {
        k,
        c_in: 4,
        c_mid: 2,
        c_out: 4,
    };
    let dc = DyConv::new(&mut ps, "dc", 4, shape, true).map_err(err)?;
    // Centre-tap identity kernels: each pass copies channel c to channel c.
    let mut ident = vec![0.0; k * k * c * c];
    let centre = (k / 2) * k + k / 2;
    for ch in 0..c {
        ident[(centre * c + ch) * c + ch] = 1.0;
    }
    let m = 2;
    let kernel: Vec<f64> = (0..m).flat_map(|_| ident.clone()).collect();
    let kernels = DynamicKernels {
        k1: tensor(kernel.clone(), &[m, k * k * c, c]),
        k2: tensor(kernel, &[m, k * k * c, c]),
        shape: KernelShape {
            k,
            c_in: c,
            c_mid: c,
            c_out: c,
        },
    };
    let x = tensor(uniform_vec(&mut rng(5), m * 4 * 5 * c, 1.0), &[m, 4, 5, c]);
    let y = dc.apply(&x, &kernels).map_err(err)?;
    ensure(to_vec(&y) == to_vec(&x), || "identity kernels changed the input".into())
}

fn sigmoid_zero_is_half() -> Result<(), String> {
    let f_c = Tensor::zeros((4, 6), DType::F64, &Device::Cpu).map_err(err)?;
    let f_e = tensor(uniform_vec(&mut rng(6), 5 * 6, 1.0), &[5, 6]);
    let mask = tensor(vec![1.0, 1.0, 1.0, 0.0, 0.0], &[1, 5]);
    let s = align_scores(&f_c, &f_e, &mask).map_err(err)?;
    ensure(s.dims() == [4, 5], || format!("S {:?}", s.dims()))?;
    let v = to_vec(&s);
    ensure(
        v.iter()
            .enumerate()
            .all(|(i, &x)| x == if i % 5 < 3 { 0.5 } else { 0.0 }),
        || format!("scores {v:?}"),
    )
}

fn bce_at_half_is_ln2_per_token() -> Result<(), String> {
    let s = Tensor::full(0.5f64, (3, 6), &Device::Cpu).map_err(err)?;
    let mut t = vec![0.0; 18];
    t[1] = 1.0;
    t[8] = 1.0;
    t[9] = 1.0;
    let t = tensor(t, &[3, 6]);
    let mask = tensor(vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0], &[1, 6]);
    let loss = alignment_loss(&s, &t, &mask)
        .and_then(|l| Ok(l.to_scalar::<f64>()?))
        .map_err(err)?;
    let expected = 5.0 * std::f64::consts::LN_2;
    ensure((loss - expected).abs() < 1e-12, || {
        format!("loss {loss} vs {expected}")
    })
}

fn target_matrix_marks_matched_spans() -> Result<(), String> {
    let prompt = tokenize_prompt("circle, square box", 16).map_err(err)?;
    let assignment = Assignment::from_pairs(vec![(2, 0), (0, 1)], 4);
    let t = make_target_matrix(&[1, 0], &prompt, 4, &assignment, "test").map_err(err)?;
    let span_a = prompt.span(1).cloned().unwrap();
    let span_b = prompt.span(0).cloned().unwrap();
    for q in 0..4 {
        for j in 0..prompt.token_count() {
            let want = match q {
                0 => span_b.contains(&j),
                2 => span_a.contains(&j),
                _ => false,
            };
            if t.t_hat[[q, j]] != f64::from(u8::from(want)) {
                return fail(format!("T[{q},{j}] = {}", t.t_hat[[q, j]]));
            }
        }
    }
    Ok(())
}

fn matching_cost_formula() -> Result<(), String> {
    let scores = Array2::from_shape_vec((1, 2), vec![0.3, 0.8]).unwrap();
    let pred = [0.1, 0.2, 0.5, 0.6];
    let gt = [0.2, 0.2, 0.6, 0.7];
    let w = CostWeights::default();
    let c = matching_cost(Some(&scores), &[pred], &[1], &[gt], w).map_err(err)?;
    let l1: f64 = pred.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum();
    let expected = w.lambda_cls * (1.0 - 0.8) + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - giou(&pred, &gt));
    ensure((c.costs[[0, 0]] - expected).abs() < 1e-12, || {
        format!("cost {} vs {expected}", c.costs[[0, 0]])
    })
}

fn logits_shape_per_batch() -> Result<(), String> {
    let mut r = rng(7);
    let f_c = tensor(uniform_vec(&mut r, 2 * 4 * 6, 1.0), &[2, 4, 6]);
    let f_e = tensor(uniform_vec(&mut r, 2 * 5 * 6, 1.0), &[2, 5, 6]);
    let l = align_logits(&f_c, &f_e).map_err(err)?;
    ensure(l.dims() == [2, 4, 5], || format!("logits {:?}", l.dims()))
}

pub const EQUATION_CHECKS: [Check; 10] = [
    ("hub adaptation output shape", hub_output_shape),
    ("single-key attention returns the value path", single_key_attention_returns_value),
    ("generated kernel and filter shapes", kernel_shapes),
    ("identity kernels in linear mode", identity_dyconv_in_linear_mode),
    ("zero features score one half", sigmoid_zero_is_half),
    ("cross-entropy at one half is ln 2 per token", bce_at_half_is_ln2_per_token),
    ("target matrix marks matched spans", target_matrix_marks_matched_spans),
    ("matching cost formula", matching_cost_formula),
    ("alignment logits shape", logits_shape_per_batch),
    ("alignment gradient equals score minus target", || {
        let e = alignment_gradient_error(11).map_err(err)?;
        ensure(e < ALIGN_TOL, || format!("relative error {e:e}"))
    }),
];

pub const EQUATION_BUDGET_SECS: f64 = 30.0;

pub fn criterion_equations() -> Outcome {
    let t0 = Instant::now();
    let failures: Vec<String> = EQUATION_CHECKS
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    Outcome::new(
        failures.is_empty() && secs < EQUATION_BUDGET_SECS,
        if failures.is_empty() {
            format!("{} checks in {secs:.2}s (budget {EQUATION_BUDGET_SECS}s)", EQUATION_CHECKS.len())
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

pub const DYCONV_TOL: f64 = 1e-6;
pub const ALIGN_TOL: f64 = 1e-6;
/// Gradients below this magnitude on both sides count as exactly zero.
pub const ZERO_GRAD_FLOOR: f64 = 1e-8;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;
pub const GRADIENT_BUDGET_SECS: f64 = 120.0;

fn var(values: Vec<f64>, shape: &[usize]) -> Var {
    Var::from_tensor(&tensor(values, shape)).expect("var from tensor")
}

fn grad_of(grads: &candle_core::backprop::GradStore, v: &Var) -> Vec<f64> {
    match grads.get(v.as_tensor()) {
        Some(g) => to_vec(g),
        None => vec![0.0; v.elem_count()],
    }
}

fn set_values(v: &Var, values: &[f64]) {
    v.set(&tensor(values.to_vec(), v.dims())).expect("same shape");
}

/// Finite differences of `loss` w.r.t. the chosen coordinates of `v`.
fn fd_wrt(v: &Var, coords: &[usize], loss: &dyn Fn() -> f64) -> Vec<f64> {
    let x = to_vec(v.as_tensor());
    let mut f = |p: &[f64]| {
        set_values(v, p);
        loss()
    };
    let out = central_difference(&mut f, &x, coords, FD_EPS);
    set_values(v, &x);
    out
}

/// Relative errors of the filter's gradient w.r.t. the region features `X`
/// and the adapted queries `Q*`, on a random weighted-sum objective.
pub fn dyconv_gradient_errors(linear: bool, seed: u64) -> dethub::Result<(f64, f64)> {
    let shape = KernelShape {
        k: 3,
        c_in: 4,
        c_mid: 2,
        c_out: 3,
    };
    let (m, h, w, d) = (2, 4, 3, 5);
    let mut ps = ParamStore::new(DType::F64, seed);
    let dc = DyConv::new(&mut ps, "dc", d, shape, linear)?;
    let mut r = rng(seed);
    let x = var(uniform_vec(&mut r, m * h * w * 4, 1.0), &[m, h, w, 4]);
    let q = var(uniform_vec(&mut r, m * d, 1.0), &[m, d]);
    let weights = tensor(uniform_vec(&mut r, m * h * w * 3, 1.0), &[m, h, w, 3]);
    let objective = || -> dethub::Result<Tensor> {
        Ok((dc.forward(x.as_tensor(), q.as_tensor())? * &weights)?.sum_all()?)
    };
    let grads = objective()?.backward()?;
    let scalar = || objective().unwrap().to_scalar::<f64>().unwrap();
    let gx = grad_of(&grads, &x);
    let gq = grad_of(&grads, &q);
    let fx = fd_wrt(&x, &(0..gx.len()).collect::<Vec<_>>(), &scalar);
    let fq = fd_wrt(&q, &(0..gq.len()).collect::<Vec<_>>(), &scalar);
    Ok((relative_error(&gx, &fx), relative_error(&gq, &fq)))
}

/// Relative error between `N · ∂L/∂logits` and `(S - T̂)` on valid tokens.
pub fn alignment_gradient_error(seed: u64) -> dethub::Result<f64> {
    let (n, l, valid) = (5, 7, 5);
    let mut r = rng(seed);
    let logits = var(uniform_vec(&mut r, n * l, 4.0), &[n, l]);
    let t: Vec<f64> = (0..n * l)
        .map(|i| f64::from(u8::from(i % l < valid && r.gen_bool(0.3))))
        .collect();
    let mask: Vec<f64> = (0..l).map(|j| f64::from(u8::from(j < valid))).collect();
    let target = tensor(t.clone(), &[n, l]);
    let mask_t = tensor(mask.clone(), &[1, l]);
    let loss = alignment_loss_from_logits(logits.as_tensor(), &target, &mask_t)?;
    let g = grad_of(&loss.backward()?, &logits);
    let x = to_vec(logits.as_tensor());
    let analytic: Vec<f64> = g.iter().map(|v| v * n as f64).collect();
    let expected: Vec<f64> = (0..n * l)
        .map(|i| (1.0 / (1.0 + (-x[i]).exp()) - t[i]) * mask[i % l])
        .collect();
    Ok(relative_error(&analytic, &expected))
}

/// Gradient check of a complete two-query decoding stage on a three-token
/// prompt: query adaptation, interaction, dynamic filtering of pooled
/// features, box refinement, alignment scores, matching and the full
/// objective. Returns the worst per-tensor relative error and its name.
pub fn end_to_end_gradient_error(seed: u64) -> dethub::Result<(f64, String)> {
    let (d, embed_dim, feat_c) = (8, 6, 8);
    let cfg = DetectorConfig {
        model: ModelConfig {
            d,
            heads: 2,
            stages: 1,
            backbone_width: 4,
            feature_channels: feat_c,
            pool_size: 3,
            image_size: 32,
            max_length: 3,
            top_k: 10,
            per_query_decoding: false,
        },
        queries: QueriesConfig { count: 2 },
        dyconv: DyConvConfig::default(),
        adaptation: AdaptationConfig::default(),
    };
    let mut ps = ParamStore::new(DType::F64, seed);
    let stage = DecoderStage::new(&mut ps, "stage", &cfg, embed_dim, true)?;
    let mut r = rng(seed + 100);
    // Move every parameter off its initialization so no gradient is trivially zero.
    for (_, v) in ps.vars() {
        let x = to_vec(v.as_tensor());
        let moved: Vec<f64> = x.iter().map(|a| a + r.gen_range(-0.2..0.2)).collect();
        set_values(v, &moved);
    }
    let prompt = tokenize_prompt("box", 3)?;
    assert_eq!(prompt.token_count(), 3);
    let q = var(uniform_vec(&mut r, 2 * d, 1.0), &[1, 2, d]);
    let e = var(uniform_vec(&mut r, 3 * embed_dim, 1.0), &[1, 3, embed_dim]);
    let f_e = var(uniform_vec(&mut r, 3 * d, 1.0), &[1, 3, d]);
    let features = var(uniform_vec(&mut r, feat_c * 6 * 6, 1.0), &[1, feat_c, 6, 6]);
    let boxes = tensor(vec![0.4, 0.5, 0.3, 0.35, 0.55, 0.45, 0.5, 0.4], &[1, 2, 4]);
    let targets = ImageTargets {
        labels: vec![0],
        boxes: vec![[0.25, 0.3, 0.6, 0.7]],
    };
    let mask = tensor(vec![1.0; 3], &[1, 3]);
    let weights = LossWeights::default();
    let objective = || -> dethub::Result<Tensor> {
        let (out, _) = stage.forward(
            features.as_tensor(),
            &boxes,
            q.as_tensor(),
            Some((e.as_tensor(), &[3])),
        )?;
        let f_c = out.f_c.expect("classifying stage");
        let logits = align_logits(&f_c, f_e.as_tensor())?;
        let stages = [StageOutput {
            boxes: out.boxes.get(0)?,
            token_logits: Some(logits.get(0)?),
        }];
        Ok(total_loss(&stages, &targets, &prompt, &mask, &weights, "toy")?.0)
    };
    let grads = objective()?.backward()?;
    let scalar = || objective().unwrap().to_scalar::<f64>().unwrap();
    let mut checked: Vec<(String, Var)> = ps.vars().map(|(n, v)| (n.clone(), v.clone())).collect();
    checked.extend([
        ("queries".to_string(), q.clone()),
        ("token embedding".to_string(), e.clone()),
        ("language features".to_string(), f_e.clone()),
        ("region features".to_string(), features.clone()),
    ]);
    let mut worst = (0.0, String::new());
    let mut pick = rng(seed + 200);
    for (name, v) in &checked {
        let n = v.elem_count();
        let coords: Vec<usize> = if n <= 8 {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut pick, n, 8).into_vec()
        };
        let g = grad_of(&grads, v);
        let analytic: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
        let numeric = fd_wrt(v, &coords, &scalar);
        let peak = analytic.iter().chain(&numeric).fold(0.0f64, |m, x| m.max(x.abs()));
        // Shift-invariant parameters (key biases under softmax) have an exactly
        // zero gradient; relative error is meaningless there, so require both
        // sides to agree with zero instead.
        let e = if peak < ZERO_GRAD_FLOOR {
            0.0
        } else {
            relative_error(&analytic, &numeric)
        };
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    Ok(worst)
}

pub fn criterion_gradients() -> Outcome {
    let t0 = Instant::now();
    let run = || -> dethub::Result<(f64, f64, f64, (f64, String))> {
        let (lx, lq) = dyconv_gradient_errors(true, 1)?;
        let (nx, nq) = dyconv_gradient_errors(false, 2)?;
        let align = alignment_gradient_error(3)?;
        let e2e = end_to_end_gradient_error(4)?;
        Ok((lx.max(nx), lq.max(nq), align, e2e))
    };
    match run() {
        Ok((ex, eq, align, (e2e, worst))) => {
            let secs = t0.elapsed().as_secs_f64();
            Outcome::new(
                ex < DYCONV_TOL
                    && eq < DYCONV_TOL
                    && align < ALIGN_TOL
                    && e2e < END_TO_END_TOL
                    && secs < GRADIENT_BUDGET_SECS,
                format!(
                    "dyconv dX {ex:.1e}, dQ* {eq:.1e} (< {DYCONV_TOL:e}); alignment {align:.1e} \
                     (< {ALIGN_TOL:e}); end-to-end {e2e:.1e} (< {END_TO_END_TOL:e}, worst `{worst}`); \
                     {secs:.1}s"
                ),
            )
        }
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

pub const ORACLE_BUDGET_SECS: f64 = 120.0;

/// Hungarian vs exhaustive search over `count` random matrices up to 6×6.
/// Returns the number of disagreements and the first failure.
pub fn hungarian_oracle(count: usize, seed: u64) -> (usize, Option<String>) {
    let mut r = rng(seed);
    let mut bad = 0;
    let mut first = None;
    for i in 0..count {
        let n_gt = r.gen_range(1..=6);
        let n_q = r.gen_range(n_gt..=6);
        // Integer-valued costs make ties common, exercising tie handling.
        let integer = i % 3 == 0;
        let rows: Vec<Vec<f64>> = (0..n_q)
            .map(|_| {
                (0..n_gt)
                    .map(|_| {
                        if integer {
                            f64::from(r.gen_range(0..4u8))
                        } else {
                            r.gen_range(0.0..10.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let costs = Array2::from_shape_vec((n_q, n_gt), flat).unwrap();
        let result = hungarian_match(&CostMatrix::from_costs(costs.clone()));
        let problem = match result {
            Err(e) => Some(format!("matrix {i}: {e}")),
            Ok(a) => {
                let mut gts: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
                let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
                gts.sort_unstable();
                qs.sort_unstable();
                qs.dedup();
                let best = exhaustive_min_cost(&rows);
                let got = a.total_cost(&costs);
                if gts != (0..n_gt).collect::<Vec<_>>() || qs.len() != n_gt {
                    Some(format!("matrix {i}: not a complete one-to-one assignment"))
                } else if (got - best).abs() > 1e-9 {
                    Some(format!("matrix {i} ({n_q}x{n_gt}): cost {got} vs optimum {best}"))
                } else {
                    None
                }
            }
        };
        if let Some(p) = problem {
            bad += 1;
            first.get_or_insert(p);
        }
    }
    (bad, first)
}

/// `compute_map` vs the brute-force evaluator on every handcrafted fixture.
pub fn map_oracle() -> (usize, Option<String>) {
    let mut bad = 0;
    let mut first = None;
    for (name, preds, gts, cats) in map_fixtures() {
        let problem = match compute_map(&preds, &gts, cats, &COCO_IOU_THRESHOLDS) {
            Err(e) => Some(format!("{name}: {e}")),
            Ok(m) => {
                let (ap, ap50, ap75, per_cat) = brute_force_map(&preds, &gts, cats);
                let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
                let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
                    (Some(a), Some(b)) => close(a, b),
                    (None, None) => true,
                    _ => false,
                };
                let same_cats = per_cat.len() == m.per_category.len()
                    && per_cat.iter().zip(&m.per_category).all(|(a, b)| close_opt(*a, *b));
                if close(ap, m.ap) && close_opt(ap50, m.ap50) && close_opt(ap75, m.ap75) && same_cats {
                    None
                } else {
                    Some(format!(
                        "{name}: AP {} vs {ap}, AP50 {:?} vs {ap50:?}, AP75 {:?} vs {ap75:?}",
                        m.ap, m.ap50, m.ap75
                    ))
                }
            }
        };
        if let Some(p) = problem {
            bad += 1;
            first.get_or_insert(p);
        }
    }
    (bad, first)
}

/// Random predictions against random ground truth, compared with the brute-force evaluator.
pub fn random_map_oracle(count: usize, seed: u64) -> (usize, Option<String>) {
    let mut r = rng(seed);
    let mut bad = 0;
    let mut first = None;
    let rand_box = |r: &mut rand_chacha::ChaCha8Rng| {
        let x = r.gen_range(0.0..80.0);
        let y = r.gen_range(0.0..80.0);
        [x, y, x + r.gen_range(5.0..30.0), y + r.gen_range(5.0..30.0)]
    };
    for i in 0..count {
        let cats = r.gen_range(1..4);
        let images = r.gen_range(1..4u64);
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for img in 0..images {
            for _ in 0..r.gen_range(0..4) {
                let g = dethub::engine::GroundTruth {
                    image_id: img,
                    category: r.gen_range(0..cats),
                    bbox: rand_box(&mut r),
                };
                // A jittered copy, sometimes with the wrong category.
                let j = |v: f64, r: &mut rand_chacha::ChaCha8Rng| v + r.gen_range(-4.0..4.0);
                let b = g.bbox;
                let jb = [j(b[0], &mut r), j(b[1], &mut r), b[2] + 10.0, b[3] + 10.0];
                preds.push(Prediction {
                    image_id: img,
                    category: if r.gen_bool(0.8) { g.category } else { r.gen_range(0..cats) },
                    score: r.gen_range(0.0..1.0),
                    bbox: [jb[0].min(b[2] - 1.0), jb[1].min(b[3] - 1.0), jb[2], jb[3]],
                });
                gts.push(g);
            }
            for _ in 0..r.gen_range(0..3) {
                preds.push(Prediction {
                    image_id: img,
                    category: r.gen_range(0..cats),
                    score: r.gen_range(0.0..1.0),
                    bbox: rand_box(&mut r),
                });
            }
        }
        let problem = match compute_map(&preds, &gts, cats, &COCO_IOU_THRESHOLDS) {
            Err(e) => Some(format!("case {i}: {e}")),
            Ok(m) => {
                let (ap, _, _, _) = brute_force_map(&preds, &gts, cats);
                ((m.ap - ap).abs() > 1e-12).then(|| format!("case {i}: AP {} vs {ap}", m.ap))
            }
        };
        if let Some(p) = problem {
            bad += 1;
            first.get_or_insert(p);
        }
    }
    (bad, first)
}

/// Dynamic filtering vs the sliding-window reference on random instances.
pub fn dyconv_oracle(count: usize, seed: u64) -> (usize, Option<String>) {
    let mut r = rng(seed);
    let mut bad = 0;
    let mut first = None;
    for i in 0..count {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let c_in = r.gen_range(2..=6);
        let c_out = r.gen_range(2..=6);
        let c_mid = r.gen_range(1..c_in.min(c_out));
        let (m, h, w, d) = (r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=6), 6);
        let linear = i % 2 == 0;
        let shape = KernelShape { k, c_in, c_mid, c_out };
        let mut ps = ParamStore::new(DType::F64, seed + i as u64);
        let mut run = || -> dethub::Result<f64> {
            let dc = DyConv::new(&mut ps, "dc", d, shape, linear)?;
            let q = tensor(uniform_vec(&mut r, m * d, 1.0), &[m, d]);
            let x_vals = uniform_vec(&mut r, m * h * w * c_in, 1.0);
            let x = tensor(x_vals.clone(), &[m, h, w, c_in]);
            let kernels = dc.generator.generate(&q)?;
            let got = to_vec(&dc.apply(&x, &kernels)?);
            let gamma = vec![1.0; c_mid];
            let beta = vec![0.0; c_mid];
            let mut worst: f64 = 0.0;
            for qi in 0..m {
                let kq = kernels.query(qi)?;
                let xs = &x_vals[qi * h * w * c_in..(qi + 1) * h * w * c_in];
                let norm = (!linear).then_some((gamma.as_slice(), beta.as_slice()));
                let reference = sliding_window_dyconv(xs, h, w, &kq, norm);
                let mine = &got[qi * h * w * c_out..(qi + 1) * h * w * c_out];
                for (a, b) in mine.iter().zip(&reference) {
                    worst = worst.max((a - b).abs() / (1.0 + b.abs()));
                }
            }
            Ok(worst)
        };
        let problem = match run() {
            Err(e) => Some(format!("instance {i}: {e}")),
            Ok(worst) => (worst > 1e-10).then(|| {
                format!("instance {i} (k={k}, {c_in}->{c_mid}->{c_out}, linear={linear}): max diff {worst:e}")
            }),
        };
        if let Some(p) = problem {
            bad += 1;
            first.get_or_insert(p);
        }
    }
    (bad, first)
}

pub fn criterion_oracles() -> Outcome {
    let t0 = Instant::now();
    let (h_bad, h_first) = hungarian_oracle(200, 17);
    let (m_bad, m_first) = map_oracle();
    let (d_bad, d_first) = dyconv_oracle(50, 23);
    let secs = t0.elapsed().as_secs_f64();
    let firsts: Vec<String> = [h_first, m_first, d_first].into_iter().flatten().collect();
    Outcome::new(
        h_bad + m_bad + d_bad == 0 && secs < ORACLE_BUDGET_SECS,
        format!(
            "hungarian 200 matrices: {h_bad} mismatches; mAP {} fixtures: {m_bad} mismatches; \
             dyconv 50 instances: {d_bad} mismatches; {secs:.1}s{}",
            map_fixtures().len(),
            if firsts.is_empty() {
                String::new()
            } else {
                format!(" — {}", firsts.join("; "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// Frozen embedder and isolation
// ---------------------------------------------------------------------------

/// Frozen-state hash before and after `steps` joint training steps.
pub fn frozen_hash_after_training(steps: usize) -> dethub::Result<(String, String)> {
    let config = tiny_config(&[&format!("train.steps={steps}")]);
    let data = synth_datasets(2, 24, 5, 32, &[]);
    let mut trainer = Trainer::new(config, data)?;
    let before = trainer.frozen_state_hash();
    let fingerprint = trainer.embedder().fingerprint();
    let summary = trainer.run(None)?;
    let after = trainer.frozen_state_hash();
    assert_eq!(summary.frozen_hash_before, before);
    assert_eq!(fingerprint, trainer.embedder().fingerprint());
    Ok((before, after))
}

fn tiny_embedding(prompt: &DetectionPrompt, d: usize) -> dethub::Result<DatasetEmbedding> {
    EmbedderSpec::default().build(d)?.embed(prompt)
}

/// `∂L/∂E` of a full detector forward and objective under `adaptation`.
/// `None` means `E` is not reachable from the loss at all.
pub fn embedding_gradient(adaptation: AdaptationConfig) -> dethub::Result<Option<Vec<f64>>> {
    let mut config = tiny_config(&[]).detector();
    config.adaptation = adaptation;
    let spec = EmbedderSpec::default();
    let detector = Detector::new(&config, spec.embed_dim, DType::F64, 3)?;
    let prompt = tokenize_prompt("circle, square", config.model.max_length)?;
    let emb = tiny_embedding(&prompt, config.model.d)?;
    let mut cond = Conditioning::new(&[&emb], DType::F64, &Device::Cpu)?;
    let e = Var::from_tensor(&cond.e)?;
    cond.e = e.as_tensor().clone();
    let s = config.model.image_size;
    let images = tensor(uniform_vec(&mut rng(9), 3 * s * s, 1.0), &[1, 3, s, s]);
    let out = detector.forward(&images, &cond)?;
    let targets = ImageTargets {
        labels: vec![0, 1],
        boxes: vec![[0.1, 0.1, 0.4, 0.5], [0.5, 0.4, 0.9, 0.8]],
    };
    let (loss, _) = total_loss(
        &out.image_stages(0)?,
        &targets,
        &prompt,
        &cond.valid_mask.get(0)?,
        &LossWeights::default(),
        "A",
    )?;
    let grads = loss.backward()?;
    Ok(grads.get(e.as_tensor()).map(to_vec))
}

/// Predicted category names on dataset A's validation split after joint
/// training under `mode`, plus the number of predictions.
pub fn dataset_a_predictions(mode: AdaptationMode) -> dethub::Result<(Vec<String>, usize, Vec<String>)> {
    let config = tiny_config(&[
        "train.steps=20",
        &format!("adaptation.mode=\"{}\"", mode.as_str()),
    ]);
    let train = synth_datasets(3, 16, 6, 32, &[]);
    let val = synth_datasets(3, 8, 7, 32, &["A"]);
    let mut trainer = Trainer::new(config, train)?;
    trainer.run(None)?;
    let a = &val[0];
    let (_, preds) = trainer.evaluate(a, 0)?;
    let mut names: Vec<String> = preds.iter().map(|p| p.category.clone()).collect();
    names.sort();
    names.dedup();
    let ok_ids = preds
        .iter()
        .all(|p| p.dataset == "A" && p.category_id >= 1 && p.category_id as usize <= a.vocabulary.category_count());
    assert!(ok_ids, "prediction outside dataset A's id range");
    Ok((names, preds.len(), a.vocabulary.categories().to_vec()))
}

pub fn criterion_isolation() -> Outcome {
    let run = || -> dethub::Result<Vec<(bool, String)>> {
        let mut out = Vec::new();
        let (before, after) = frozen_hash_after_training(200)?;
        out.push((
            before == after,
            format!("frozen hash after 200 steps {}", if before == after { "unchanged" } else { "CHANGED" }),
        ));
        let off = [
            ("adaptation disabled", AdaptationConfig { rpn: false, decoder: false, ..Default::default() }),
            ("global embedding", AdaptationConfig { mode: AdaptationMode::GlobalEmbedding, ..Default::default() }),
        ];
        for (name, cfg) in off {
            let g = embedding_gradient(cfg)?;
            let zero = g.as_ref().map_or(true, |g| g.iter().all(|&v| v == 0.0));
            out.push((zero, format!("dL/dE with {name}: {}", if zero { "exactly 0" } else { "NONZERO" })));
        }
        let on = embedding_gradient(AdaptationConfig::default())?;
        let live = on.as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0));
        out.push((live, format!("dL/dE with adaptation: {}", if live { "nonzero" } else { "ZERO" })));
        for mode in [
            AdaptationMode::QueryAdaptation,
            AdaptationMode::GlobalEmbedding,
            AdaptationMode::InstanceEmbedding,
        ] {
            let (names, count, vocab) = dataset_a_predictions(mode)?;
            let isolated = count > 0 && names.iter().all(|n| vocab.contains(n));
            out.push((
                isolated,
                format!("A eval ({}) emits {names:?} over {count} detections", mode.as_str()),
            ));
        }
        Ok(out)
    };
    match run() {
        Ok(parts) => Outcome::new(
            parts.iter().all(|p| p.0),
            parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join("; "),
        ),
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------------------
// Joint training
// ---------------------------------------------------------------------------

pub const JOINT_SEEDS: [u64; 3] = [0, 1, 2];
/// Steps of a single-dataset run.
pub const SEPARATE_STEPS: usize = 2000;
/// Joint runs visit each of the two datasets for a full single-dataset
/// schedule, so they take twice the steps.
pub const JOINT_STEPS: usize = 2 * SEPARATE_STEPS;
pub const JOINT_MARGIN: f64 = 2.0;

/// AP (percent) on the validation splits of A and B for one configuration.
pub fn joint_training_run(
    datasets: &[&str],
    mode: AdaptationMode,
    steps: usize,
    seed: u64,
) -> dethub::Result<Vec<(String, f64)>> {
    let config = toy_config(&[
        &format!("train.steps={steps}"),
        &format!("train.seed={seed}"),
        &format!("sampler.seed={seed}"),
        &format!("adaptation.mode=\"{}\"", mode.as_str()),
    ]);
    let size = config.model.image_size;
    let train = synth_datasets(2, 200, 1, size, datasets);
    let val = synth_datasets(2, 50, 2, size, datasets);
    let mut trainer = Trainer::new(config, train)?;
    trainer.run(None)?;
    val.iter()
        .map(|d| Ok((d.name.clone(), trainer.evaluate(d, 0)?.0.ap * 100.0)))
        .collect()
}

#[derive(Debug, Default, Clone)]
pub struct JointResults {
    pub separate: [Vec<f64>; 2],
    pub joint_adapt: [Vec<f64>; 2],
    pub joint_global: [Vec<f64>; 2],
}

pub fn criterion_joint_training() -> Outcome {
    let t0 = Instant::now();
    let run = || -> dethub::Result<JointResults> {
        let mut r = JointResults::default();
        for &seed in &JOINT_SEEDS {
            for (i, name) in ["A", "B"].iter().enumerate() {
                let ap = joint_training_run(&[name], AdaptationMode::QueryAdaptation, SEPARATE_STEPS, seed)?;
                r.separate[i].push(ap[0].1);
            }
            let adapt = joint_training_run(&[], AdaptationMode::QueryAdaptation, JOINT_STEPS, seed)?;
            let global = joint_training_run(&[], AdaptationMode::GlobalEmbedding, JOINT_STEPS, seed)?;
            for i in 0..2 {
                r.joint_adapt[i].push(adapt[i].1);
                r.joint_global[i].push(global[i].1);
            }
            eprintln!(
                "  seed {seed}: separate A {:.2} B {:.2} | joint-adapt A {:.2} B {:.2} | joint-global A {:.2} B {:.2}",
                r.separate[0].last().unwrap(),
                r.separate[1].last().unwrap(),
                adapt[0].1,
                adapt[1].1,
                global[0].1,
                global[1].1
            );
        }
        Ok(r)
    };
    match run() {
        Ok(r) => {
            let sep = [median(&r.separate[0]), median(&r.separate[1])];
            let ada = [median(&r.joint_adapt[0]), median(&r.joint_adapt[1])];
            let glo = [median(&r.joint_global[0]), median(&r.joint_global[1])];
            // Both datasets contain a conflicting class (square vs "box").
            let not_worse = (0..2).all(|i| ada[i] >= sep[i] - JOINT_MARGIN);
            let beats_global = (0..2).any(|i| ada[i] >= glo[i]);
            Outcome::new(
                not_worse && beats_global,
                format!(
                    "median AP A/B — separate {:.2}/{:.2}, joint-adapt {:.2}/{:.2}, joint-global \
                     {:.2}/{:.2}; adapt ≥ separate − {JOINT_MARGIN}: {not_worse}; adapt ≥ global on \
                     a conflicting dataset: {beats_global}; {:.0}s",
                    sep[0], sep[1], ada[0], ada[1], glo[0], glo[1],
                    t0.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Expected row labels of each grid for datasets A, B, C.
pub fn expected_rows(preset: AblationPreset) -> Vec<&'static str> {
    match preset {
        AblationPreset::Modes => vec!["instance-embedding", "global-embedding", "query-adaptation"],
        AblationPreset::Queries => vec!["100 queries", "300 queries"],
        AblationPreset::Components => vec!["no adaptation", "rpn", "decoder", "rpn + decoder"],
        AblationPreset::Layers => vec!["2", "4", "6", "8"],
        AblationPreset::Kernels => vec!["1", "3", "5"],
        AblationPreset::Lengths => vec!["128", "256", "512"],
        AblationPreset::Datasets => vec!["A+B", "A+C", "B+C", "A+B+C"],
    }
}

/// Runs every grid once at toy scale.
pub fn run_all_grids() -> Vec<(AblationPreset, AblationTable)> {
    let base = tiny_config(&["train.steps=6", "train.batch_size=2"]);
    let train = synth_datasets(3, 12, 8, 32, &[]);
    let eval = synth_datasets(3, 6, 9, 32, &[]);
    let names: Vec<String> = train.iter().map(|d| d.name.clone()).collect();
    AblationPreset::ALL
        .iter()
        .map(|&p| (p, run_ablation(&base, &train, &eval, &preset_cells(p, &names), 4)))
        .collect()
}

pub fn criterion_ablation() -> Outcome {
    let t0 = Instant::now();
    let first = run_all_grids();
    let second = run_all_grids();
    let mut problems = Vec::new();
    let mut rows = 0;
    for ((preset, table), (_, again)) in first.iter().zip(&second) {
        let labels: Vec<&str> = table.rows.iter().map(|r| r.row.as_str()).collect();
        if labels != expected_rows(*preset) {
            problems.push(format!("{}: rows {labels:?}", preset.as_str()));
        }
        for r in &table.rows {
            rows += 1;
            if r.status != "ok" {
                problems.push(format!("{} / {}: {}", preset.as_str(), r.row, r.status));
            }
        }
        let csv_a = table.to_csv().unwrap_or_default();
        let csv_b = again.to_csv().unwrap_or_default();
        let json_a = serde_json::to_string(table).unwrap_or_default();
        let json_b = serde_json::to_string(again).unwrap_or_default();
        if table != again || csv_a != csv_b || json_a != json_b {
            problems.push(format!("{}: rerun differs", preset.as_str()));
        }
    }
    Outcome::new(
        problems.is_empty(),
        format!(
            "{} grids, {rows} rows, rerun bit-exact: {}; {:.0}s{}",
            first.len(),
            problems.iter().all(|p| !p.contains("rerun")),
            t0.elapsed().as_secs_f64(),
            if problems.is_empty() {
                String::new()
            } else {
                format!(" — {}", problems.join("; "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Logged `(step, lr)` pairs of a short run written to `dir`.
pub fn logged_learning_rates(dir: &std::path::Path, steps: usize) -> dethub::Result<(f64, Vec<(usize, f64)>)> {
    let config = tiny_config(&[&format!("train.steps={steps}")]);
    let base = config.optimizer.lr;
    let data = synth_datasets(2, 16, 10, 32, &[]);
    let mut trainer = Trainer::new(config, data)?;
    trainer.run(Some(dir))?;
    let logged = read_metrics(&dir.join(METRICS_FILE))?
        .into_iter()
        .map(|m| (m.step, m.lr))
        .collect();
    Ok((base, logged))
}

pub fn criterion_lr_schedule() -> Outcome {
    let steps = 100;
    let dir = tempfile::tempdir().expect("temp dir");
    match logged_learning_rates(dir.path(), steps) {
        Err(e) => Outcome::new(false, format!("error: {e}")),
        Ok((base, logged)) => {
            let drops: Vec<(usize, f64)> = logged
                .windows(2)
                .filter(|w| w[0].1 != w[1].1)
                .map(|w| (w[1].0, w[0].1 / w[1].1))
                .collect();
            let expected_steps = [(0.78 * steps as f64).round() as usize, (0.93 * steps as f64).round() as usize];
            let exact = drops.len() == 2
                && drops
                    .iter()
                    .zip(expected_steps)
                    .all(|(&(s, ratio), e)| s == e && (ratio - 10.0).abs() < 1e-12 * 10.0);
            let starts = logged.first().is_some_and(|&(s, lr)| s == 0 && lr == base);
            Outcome::new(
                exact && starts,
                format!(
                    "lr {base:e} at step 0; drops at {:?} (expected steps {expected_steps:?}, ratio 10)",
                    drops
                ),
            )
        }
    }
}
