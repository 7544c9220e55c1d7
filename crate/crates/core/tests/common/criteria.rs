//! One check per acceptance criterion. Each returns a short summary on
//! success or the first failure found.

use super::http::{b64, get, post_json, post_multipart, send};
use super::*;

use cxr_core::evalmetrics::{
    binary_auc, binary_auc_exact, per_class_metrics, stratified_split, ConfusionMatrix, Manifest, ManifestEntry,
    NUM_CLASSES,
};
use cxr_core::explain::{
    cam_combine, capture_stack, gap_head_weights, render_heatmap, score_cam_weights, ActivationStack, CamMethod,
    CamWeights, ScoreCamOptions,
};
use cxr_core::imagecore::{decode_image, inference_preprocess, ClaheParams, ImageTensor, NormalizationStats};
use cxr_core::models::{build_convnext_tiny, build_resnet18, gap_feature_layer, CLASS_LABELS};
use cxr_core::nn::{
    batchnorm, conv2d, layernorm, linear, maxpool, Conv2dParams, WeightStore, BATCHNORM_EPS, LAYERNORM_EPS,
};
use cxr_core::service::{self, AppState, ExplainSettings, Overrides, ServiceConfig};
use serde_json::json;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Table 1

pub const TABLE1_SIZES: [usize; 4] = [838, 858, 816, 833];
pub const TABLE1_COUNTS: [[usize; 4]; 3] = [[670, 686, 652, 666], [83, 85, 81, 83], [85, 87, 83, 84]];
pub const TABLE1_TOTALS: [usize; 3] = [2674, 332, 339];

pub fn table1_manifest() -> Manifest {
    // interleave classes so stratification has to regroup them
    let mut entries = Vec::new();
    let max = *TABLE1_SIZES.iter().max().unwrap();
    for i in 0..max {
        for (c, &n) in TABLE1_SIZES.iter().enumerate() {
            if i < n {
                entries.push(ManifestEntry { path: format!("{}/{i:04}.png", CLASS_LABELS[c]), label: CLASS_LABELS[c].into() });
            }
        }
    }
    Manifest { entries }
}

pub fn table1_split() -> Check {
    let m = table1_manifest();
    let seeds = [0u64, 1, 7, 42, 2024, u64::MAX];
    let mut memberships = Vec::new();
    for seed in seeds {
        let s = stratified_split(&m, (0.8, 0.1, 0.1), seed).map_err(|e| e.to_string())?;
        let counts = s.counts();
        ensure(counts == TABLE1_COUNTS, || format!("seed {seed}: counts {counts:?}"))?;
        let totals = [s.train.len(), s.val.len(), s.test.len()];
        ensure(totals == TABLE1_TOTALS, || format!("seed {seed}: totals {totals:?}"))?;
        memberships.push(s.test.entries.iter().map(|e| e.path.clone()).collect::<Vec<_>>());
    }
    ensure(memberships.windows(2).any(|w| w[0] != w[1]), || "every seed chose the same test set".into())?;
    Ok(format!("all 12 cells and totals (2674, 332, 339) equal for {} seeds", seeds.len()))
}

// ---------------------------------------------------------------------------
// Table 2 parameters and FLOPs

pub fn table2_params() -> Check {
    let r = build_resnet18(1000).count_params();
    ensure(r == 11_689_512, || format!("resnet18: {r} parameters"))?;
    let c = build_convnext_tiny(1000).count_params();
    let rel = (c as f64 - 28.6e6).abs() / 28.6e6;
    ensure(rel <= 0.01, || format!("convnext_tiny: {c} parameters ({:.2}% from 28.6M)", rel * 100.0))?;
    Ok(format!("resnet18 {r} (11.7M), convnext_tiny {c} ({:.2}% from 28.6M)", rel * 100.0))
}

pub fn table2_flops() -> Check {
    let mut parts = Vec::new();
    for (name, g, stated) in [("resnet18", build_resnet18(1000), 1.81e9), ("convnext_tiny", build_convnext_tiny(1000), 4.46e9)] {
        let f = g.count_flops().map_err(|e| e.to_string())? as f64;
        let rel = (f - stated).abs() / stated;
        ensure(rel <= 0.03, || format!("{name}: {:.3} G vs {:.2} G", f / 1e9, stated / 1e9))?;
        parts.push(format!("{name} {:.3} G ({:+.2}%)", f / 1e9, (f - stated) / stated * 100.0));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------------------
// Operator oracles

#[derive(Debug, Clone, Copy)]
pub struct ConvCase {
    pub batch: usize,
    pub groups: usize,
    pub in_per_group: usize,
    pub out_per_group: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
    pub bias: bool,
}

impl ConvCase {
    pub fn random(rng: &mut RngState, i: usize) -> Self {
        let kernels = [1usize, 2, 3, 4, 5, 7];
        let kernel = kernels[rng.next_below(kernels.len() as u64) as usize];
        let padding = rng.next_below(kernel as u64 / 2 + 1) as usize;
        let min_side = kernel.saturating_sub(2 * padding).max(1);
        let mut c = ConvCase {
            batch: 1 + rng.next_below(2) as usize,
            groups: 1 + rng.next_below(3) as usize,
            in_per_group: 1 + rng.next_below(3) as usize,
            out_per_group: 1 + rng.next_below(3) as usize,
            kernel,
            stride: 1 + rng.next_below(3) as usize,
            padding,
            height: min_side + rng.next_below(10) as usize,
            width: min_side + rng.next_below(12) as usize,
            bias: rng.next_below(2) == 0,
        };
        match i % 5 {
            // pointwise fast path with a channel count that is not a multiple of 4
            0 => {
                c.kernel = 1;
                c.stride = 1;
                c.padding = 0;
                c.groups = 1;
                c.in_per_group = 5 + rng.next_below(6) as usize;
            }
            // depthwise, as in the ConvNeXt blocks
            1 => {
                c.groups = 1 + rng.next_below(6) as usize;
                c.in_per_group = 1;
                c.out_per_group = 1;
            }
            _ => {}
        }
        c
    }

    pub fn check(&self, rng: &mut RngState) -> Result<(), String> {
        let cin = self.groups * self.in_per_group;
        let cout = self.groups * self.out_per_group;
        let x = random_tensor(rng, [self.batch, cin, self.height, self.width]);
        let w = random_tensor(rng, [cout, self.in_per_group, self.kernel, self.kernel]);
        let b = random_vec(rng, cout, -1.0, 1.0);
        let bias = self.bias.then_some(b.as_slice());
        let p = Conv2dParams { stride: self.stride, padding: self.padding, groups: self.groups };
        let y = conv2d(&x, &w, bias, p).map_err(|e| format!("{self:?}: {e}"))?;
        let (dims, expect) = conv2d_oracle(&x, &w, bias, self.stride, self.padding, self.groups);
        ensure(y.dims() == dims, || format!("{self:?}: dims {:?} vs oracle {dims:?}", y.dims()))?;
        compare(&format!("conv2d {self:?}"), y.data(), &expect, 1e-5)
    }
}

pub fn maxpool_case(rng: &mut RngState) -> Result<(), String> {
    let k = 1 + rng.next_below(4) as usize;
    let stride = 1 + rng.next_below(3) as usize;
    let pad = rng.next_below(k as u64 / 2 + 1) as usize;
    let dims = [1 + rng.next_below(2) as usize, 1 + rng.next_below(4) as usize, k + rng.next_below(9) as usize, k + rng.next_below(9) as usize];
    let x = random_tensor(rng, dims);
    let y = maxpool(&x, k, stride, pad).map_err(|e| e.to_string())?;
    let (od, expect) = maxpool_oracle(&x, k, stride, pad);
    ensure(y.dims() == od, || format!("maxpool dims {:?} vs {od:?}", y.dims()))?;
    compare(&format!("maxpool k{k} s{stride} p{pad} {dims:?}"), y.data(), &expect, 1e-5)
}

pub fn batchnorm_case(rng: &mut RngState) -> Result<(), String> {
    let dims = [1 + rng.next_below(3) as usize, 1 + rng.next_below(6) as usize, 1 + rng.next_below(6) as usize, 1 + rng.next_below(6) as usize];
    let c = dims[1];
    let x = random_tensor(rng, dims);
    let (g, b, m) = (random_vec(rng, c, -2.0, 2.0), random_vec(rng, c, -1.0, 1.0), random_vec(rng, c, -1.0, 1.0));
    let v = random_vec(rng, c, 0.01, 3.0);
    let y = batchnorm(&x, &g, &b, &m, &v, BATCHNORM_EPS).map_err(|e| e.to_string())?;
    compare(&format!("batchnorm {dims:?}"), y.data(), &batchnorm_oracle(&x, &g, &b, &m, &v, BATCHNORM_EPS), 1e-5)
}

pub fn layernorm_case(rng: &mut RngState) -> Result<(), String> {
    let dims = [1 + rng.next_below(3) as usize, 1 + rng.next_below(8) as usize, 1 + rng.next_below(6) as usize, 1 + rng.next_below(6) as usize];
    let c = dims[1];
    let x = random_tensor(rng, dims);
    let (g, b) = (random_vec(rng, c, -2.0, 2.0), random_vec(rng, c, -1.0, 1.0));
    let y = layernorm(&x, &g, &b, LAYERNORM_EPS).map_err(|e| e.to_string())?;
    compare(&format!("layernorm {dims:?}"), y.data(), &layernorm_oracle(&x, &g, &b, LAYERNORM_EPS), 1e-5)
}

pub fn linear_case(rng: &mut RngState) -> Result<(), String> {
    let dims = [1 + rng.next_below(3) as usize, 1 + rng.next_below(16) as usize, 1 + rng.next_below(3) as usize, 1 + rng.next_below(3) as usize];
    let inf = dims[1] * dims[2] * dims[3];
    let out = 1 + rng.next_below(10) as usize;
    let x = random_tensor(rng, dims);
    let w = random_vec(rng, out * inf, -1.0, 1.0);
    let b = random_vec(rng, out, -1.0, 1.0);
    let y = linear(&x, &w, Some(&b), out).map_err(|e| e.to_string())?;
    compare(&format!("linear {dims:?} -> {out}"), y.data(), &linear_oracle(&x, &w, &b, out), 1e-5)
}

/// A `groups == channels` convolution equals running each channel through
/// its own single-channel convolution.
pub fn depthwise_case(rng: &mut RngState) -> Result<(), String> {
    let c = 1 + rng.next_below(8) as usize;
    let k = [3, 5, 7][rng.next_below(3) as usize];
    let (h, w) = (k + rng.next_below(10) as usize, k + rng.next_below(10) as usize);
    let p = Conv2dParams { stride: 1 + rng.next_below(2) as usize, padding: k / 2, groups: c };
    let x = random_tensor(rng, [1, c, h, w]);
    let wt = random_tensor(rng, [c, 1, k, k]);
    let b = random_vec(rng, c, -1.0, 1.0);
    let y = conv2d(&x, &wt, Some(&b), p).map_err(|e| e.to_string())?;
    let per = Conv2dParams { groups: 1, ..p };
    let mut stacked = Vec::new();
    for ch in 0..c {
        let xc = Tensor4::new([1, 1, h, w], x.plane(0, ch).to_vec()).unwrap();
        let wc = Tensor4::new([1, 1, k, k], wt.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap();
        stacked.extend(conv2d(&xc, &wc, Some(&b[ch..ch + 1]), per).map_err(|e| e.to_string())?.into_data());
    }
    let expect: Vec<f64> = stacked.iter().map(|&v| v as f64).collect();
    compare(&format!("depthwise c{c} k{k}"), y.data(), &expect, 1e-6)
}

pub fn operator_oracles(cases: usize) -> Check {
    let mut rng = RngState::new(0x0a11_ce);
    for i in 0..cases {
        ConvCase::random(&mut rng, i).check(&mut rng)?;
        maxpool_case(&mut rng)?;
        batchnorm_case(&mut rng)?;
        layernorm_case(&mut rng)?;
        linear_case(&mut rng)?;
        depthwise_case(&mut rng)?;
    }
    Ok(format!("conv2d/maxpool/batchnorm/layernorm/linear x{cases} within 1e-5, depthwise equivalence x{cases}"))
}

// ---------------------------------------------------------------------------
// Metrics oracles

/// Random score set of 2..=50 samples with at least one of each class;
/// every other set draws from a few levels so ties are common.
pub fn random_score_set(rng: &mut RngState, trial: usize) -> (Vec<f64>, Vec<bool>) {
    let n = 2 + rng.next_below(49) as usize;
    let levels = 2 + rng.next_below(5);
    let scores: Vec<f64> = (0..n)
        .map(|_| if trial % 2 == 0 { rng.next_below(levels) as f64 / levels as f64 } else { rng.next_f64() })
        .collect();
    let mut pos: Vec<bool> = (0..n).map(|_| rng.next_below(2) == 0).collect();
    pos[0] = true;
    pos[1] = false;
    (scores, pos)
}

pub fn auc_matches_brute_force(scores: &[f64], pos: &[bool]) -> Result<(), String> {
    let (bn, bd) = brute_auc(scores, pos).unwrap();
    let (n, d) = binary_auc_exact(scores, pos).map_err(|e| e.to_string())?;
    ensure(n * bd == bn * d, || format!("auc {n}/{d} vs pair count {bn}/{bd} on {scores:?} {pos:?}"))?;
    let f = binary_auc(scores, pos).map_err(|e| e.to_string())?;
    ensure(f == bn as f64 / bd as f64, || format!("binary_auc {f} vs {}", bn as f64 / bd as f64))
}

pub fn auc_monotone_invariant(scores: &[f64], pos: &[bool]) -> Result<(), String> {
    let base = binary_auc_exact(scores, pos).map_err(|e| e.to_string())?;
    let transforms: [(&str, fn(f64) -> f64); 4] =
        [("exp", f64::exp), ("cube", |v| v * v * v - 7.0), ("affine", |v| 3.5 * v + 100.0), ("logistic", |v| 1.0 / (1.0 + (-4.0 * v).exp()))];
    for (name, f) in transforms {
        let t: Vec<f64> = scores.iter().map(|&v| f(v)).collect();
        let got = binary_auc_exact(&t, pos).map_err(|e| e.to_string())?;
        ensure(got.0 * base.1 == base.0 * got.1, || format!("{name}: {got:?} vs {base:?}"))?;
    }
    Ok(())
}

pub fn f1_dual_form(rng: &mut RngState) -> Result<(), String> {
    let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for row in counts.iter_mut() {
        for v in row.iter_mut() {
            let hi = if rng.next_below(4) == 0 { 1 } else { 40 };
            *v = rng.next_below(hi);
        }
    }
    let cm = ConfusionMatrix { counts };
    for c in 0..NUM_CLASSES {
        let m = per_class_metrics(&cm, c);
        let (p, r) = (m.precision, m.recall);
        if p + r > 0.0 {
            let dual = 2.0 * p * r / (p + r);
            ensure((m.f1 - dual).abs() <= 1e-12, || format!("class {c} of {counts:?}: f1 {} vs 2PR/(P+R) {dual}", m.f1))?;
        }
    }
    Ok(())
}

pub fn metrics_oracles(trials: usize) -> Check {
    let mut rng = RngState::new(0xa0c);
    for t in 0..trials {
        let (s, p) = random_score_set(&mut rng, t);
        auc_matches_brute_force(&s, &p)?;
        auc_monotone_invariant(&s, &p)?;
        f1_dual_form(&mut rng)?;
    }
    Ok(format!("{trials} trials: exact AUC = pair count, 4 monotone transforms invariant, F1 = 2PR/(P+R)"))
}

// ---------------------------------------------------------------------------
// Explainability

pub fn random_stack(rng: &mut RngState) -> (ActivationStack, CamWeights) {
    let (c, h, w) = (1 + rng.next_below(6) as usize, 1 + rng.next_below(8) as usize, 1 + rng.next_below(8) as usize);
    let data = (0..c * h * w).map(|_| rng.next_gaussian() as f32).collect();
    let alpha = (0..c).map(|_| rng.next_uniform(-2.0, 2.0)).collect();
    (ActivationStack::new("l", c, h, w, data).unwrap(), CamWeights { target_class: 0, alpha, method: CamMethod::GapHead })
}

pub fn cam_and_heatmap_bounds(rng: &mut RngState) -> Result<(), String> {
    let (stack, w) = random_stack(rng);
    let raw = cam_combine(&stack, &w).map_err(|e| e.to_string())?;
    ensure(raw.data.iter().all(|&v| v >= 0.0), || "cam_combine produced a negative value".into())?;
    // rendering upsamples; a coarser target could step over an isolated peak
    let (oh, ow) = (raw.height + rng.next_below(20) as usize, raw.width + rng.next_below(20) as usize);
    let hm = render_heatmap(&raw, oh, ow).map_err(|e| e.to_string())?;
    ensure(hm.data.iter().all(|&v| (0.0..=1.0).contains(&v)), || "heatmap value outside [0, 1]".into())?;
    let nonzero = raw.data.iter().any(|&v| v > 0.0);
    ensure(!nonzero || hm.max() == 1.0, || format!("non-zero cam rendered with max {}", hm.max()))?;
    ensure(nonzero || hm.max() == 0.0, || "zero cam rendered non-zero".into())?;
    Ok(())
}

/// Central differences of the class logit when the whole map `k` at the GAP
/// input shifts by `eps`, divided by the map size, against `W[c,k]/(H*W)`.
/// Errors are relative to `max(|alpha_k|, floor * max_k |alpha_k|)`.
/// Returns the worst relative error.
pub fn gap_head_finite_difference(model: &Model, input: &ImageTensor, eps: f32, floor: f64) -> Result<f64, String> {
    let g = &model.graph;
    let layer = gap_feature_layer(g).map_err(|e| e.to_string())?;
    let e = g.execute(&model.weights, &Tensor4::from(input), &[&layer]).map_err(|e| e.to_string())?;
    let a = &e.activations[layer.as_str()];
    let [_, c, h, w] = a.dims();
    let hw = h * w;
    let mut worst = 0f64;
    for target in 0..g.num_classes() {
        let alpha = gap_head_weights(g, &model.weights, target).map_err(|e| e.to_string())?.alpha;
        let scale = floor * alpha.iter().fold(0f64, |m, a| m.max(a.abs()));
        for k in 0..c {
            let logit = |delta: f32| -> Result<f64, String> {
                let mut shifted = a.clone();
                for v in &mut shifted.data_mut()[k * hw..(k + 1) * hw] {
                    *v += delta;
                }
                let out = g.execute_from(&model.weights, &layer, shifted, &[]).map_err(|e| e.to_string())?;
                Ok(out.logits(0)[target])
            };
            let fd = (logit(eps)? - logit(-eps)?) / (2.0 * eps as f64) / hw as f64;
            let rel = (fd - alpha[k]).abs() / alpha[k].abs().max(scale).max(1e-12);
            worst = worst.max(rel);
            ensure(rel <= 1e-3, || format!("class {target} channel {k}: finite difference {fd} vs alpha {}", alpha[k]))?;
        }
    }
    Ok(worst)
}

pub fn explain_suite() -> Check {
    let mut rng = RngState::new(0xca3);
    for _ in 0..200 {
        cam_and_heatmap_bounds(&mut rng)?;
    }
    let stats = NormalizationStats::default();
    let clahe = ClaheParams::default();
    let mut worst = 0f64;
    for seed in [1u64, 2, 3] {
        let (model, _) = fixture_model(Architecture::TinyCnn, 4, seed);
        let x = inference_preprocess(&synthetic_cxr(seed, 96, 80), &clahe, &stats).unwrap();
        worst = worst.max(gap_head_finite_difference(&model, &x, 1e-3, 0.0)?);
    }
    let (model, _) = fixture_model(Architecture::TinyCnn, 4, 11);
    let x = inference_preprocess(&synthetic_cxr(5, 64, 64), &clahe, &stats).unwrap();
    let layer = gap_feature_layer(&model.graph).unwrap();
    let (stack, _) = capture_stack(&model.graph, &model.weights, &x, &layer).map_err(|e| e.to_string())?;
    for target in 0..4 {
        let all = score_cam_weights(&model.graph, &model.weights, &x, &stack, target, ScoreCamOptions::default())
            .map_err(|e| e.to_string())?;
        let topk = ScoreCamOptions { top_k: Some(stack.channels), batch_size: 3 };
        let full = score_cam_weights(&model.graph, &model.weights, &x, &stack, target, topk).map_err(|e| e.to_string())?;
        ensure(all == full, || format!("target {target}: top_k = N differs from unrestricted"))?;
    }
    Ok(format!(
        "200 random stacks non-negative and bounded, gap_head vs finite differences worst rel {worst:.1e}, score_cam top_k=N exact"
    ))
}

// ---------------------------------------------------------------------------
// Determinism

/// Image bytes -> probabilities -> heatmap PNG on a fixture model.
pub fn end_to_end(model: &Model, png: &[u8]) -> Result<(Vec<f64>, String), String> {
    let settings = ExplainSettings { method: CamMethod::GapHead, layer: None, top_k: None, alpha: 0.5, target: None };
    let r = service::explain_bytes(
        model,
        png,
        &Overrides::default(),
        &settings,
        &ClaheParams::default(),
        &NormalizationStats::default(),
        16,
    )
    .map_err(|e| e.to_string())?;
    let probs = r.classification.probabilities.values().copied().collect();
    Ok((probs, r.heatmap_png))
}

pub fn pipeline_determinism() -> Check {
    let png = synthetic_png(3, 320, 256);
    let img = decode_image(&png).unwrap();
    let (p, s) = (ClaheParams::default(), NormalizationStats::default());
    let a = inference_preprocess(&img, &p, &s).unwrap();
    let b = inference_preprocess(&decode_image(&png).unwrap(), &p, &s).unwrap();
    let bits = |t: &ImageTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), || "inference_preprocess differs between runs".into())?;

    let (model, bytes) = fixture_model(Architecture::Resnet18, 4, 7);
    let (p1, h1) = end_to_end(&model, &png)?;
    let (p2, h2) = end_to_end(&model, &png)?;
    ensure(p1.iter().map(|v| v.to_bits()).eq(p2.iter().map(|v| v.to_bits())), || "probabilities differ".into())?;
    ensure(h1 == h2, || "heatmap PNG bytes differ".into())?;

    let store = WeightStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(store.to_bytes() == bytes, || "CXRW re-serialization differs".into())?;
    let again = WeightStore::from_bytes(&store.to_bytes()).map_err(|e| e.to_string())?;
    for ((n1, t1), (n2, t2)) in store.iter().zip(again.iter()) {
        ensure(n1 == n2 && t1.shape == t2.shape, || format!("tensor table differs at {n1}"))?;
        ensure(t1.data.iter().map(|v| v.to_bits()).eq(t2.data.iter().map(|v| v.to_bits())), || format!("{n1} data differs"))?;
    }
    Ok(format!("preprocess bitwise equal, resnet18 fixture probabilities and heatmap PNG equal, CXRW {} bytes round trip", bytes.len()))
}

// ---------------------------------------------------------------------------
// Service

pub fn test_state(model: Model, config: ServiceConfig) -> std::sync::Arc<AppState> {
    AppState::new(Ok(model), config, ClaheParams::default(), NormalizationStats::default())
}

pub async fn service_checks() -> Check {
    let (model, bytes) = fixture_model(Architecture::TinyCnn, 4, 7);
    let digest = cxr_core::nn::weight_digest(&bytes);
    let app = service::router(test_state(model, ServiceConfig::default()));
    let png = synthetic_png(1, 300, 260);

    let r = send(&app, get("/healthz")).await;
    ensure(r.status == 200, || format!("healthz status {}", r.status))?;
    check_schema("health", &r.json())?;
    ensure(r.json()["status"] == "ok", || "health not ok".into())?;

    let r = send(&app, get("/v1/model")).await;
    ensure(r.status == 200, || format!("model status {}", r.status))?;
    check_schema("model_info", &r.json())?;
    ensure(r.json()["weight_file_digest"] == digest.as_str(), || "digest mismatch".into())?;

    let r = send(&app, post_json("/v1/classify", &json!({ "image_b64": b64(&png) }))).await;
    ensure(r.status == 200, || format!("classify status {}: {}", r.status, String::from_utf8_lossy(&r.body)))?;
    let v = r.json();
    check_schema("classify", &v)?;
    let probs = v["probabilities"].as_object().unwrap();
    let sum: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    ensure((sum - 1.0).abs() <= 1e-4, || format!("probabilities sum to {sum}"))?;
    let best = probs.iter().max_by(|a, b| a.1.as_f64().unwrap().total_cmp(&b.1.as_f64().unwrap())).unwrap().0;
    ensure(v["predicted"] == best.as_str(), || "predicted is not the argmax".into())?;
    let mp = send(&app, post_multipart("/v1/classify", &png, &[])).await;
    ensure(mp.stable_json() == r.stable_json(), || "multipart and JSON uploads disagree".into())?;

    let r = send(&app, post_multipart("/v1/explain", &png, &[("method", "gap_head")])).await;
    ensure(r.status == 200, || format!("explain status {}: {}", r.status, String::from_utf8_lossy(&r.body)))?;
    check_schema("explain", &r.json())?;

    for (body, code) in [
        (json!({ "image_b64": b64(&png), "clahe_clip": 0.0 }), "override_out_of_range"),
        (json!({ "image_b64": b64(&png), "clahe_grid": [1, 8] }), "override_out_of_range"),
        (json!({ "image_b64": b64(&png), "clahe_clip": 8.5 }), "override_out_of_range"),
    ] {
        let r = send(&app, post_json("/v1/classify", &body)).await;
        ensure(r.status == 400, || format!("{body}: status {}", r.status))?;
        check_schema("error", &r.json())?;
        ensure(r.json()["error"]["code"] == code, || format!("{body}: {}", r.json()))?;
    }

    // 32 concurrent requests against serial answers
    let images: Vec<Vec<u8>> = (0..32).map(|i| synthetic_png(100 + i, 120 + i as usize, 100)).collect();
    let mut serial = Vec::new();
    for img in &images {
        serial.push(send(&app, post_json("/v1/classify", &json!({ "image_b64": b64(img) }))).await.stable_json());
    }
    let handles: Vec<_> = images
        .iter()
        .map(|img| {
            let (app, req) = (app.clone(), post_json("/v1/classify", &json!({ "image_b64": b64(img) })));
            tokio::spawn(async move { send(&app, req).await.stable_json() })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        let got = h.await.map_err(|e| e.to_string())?;
        ensure(got == serial[i], || format!("concurrent request {i} differs from serial"))?;
    }
    Ok("health/model/classify/explain/error schemas valid, 32 concurrent = serial, bad overrides -> 400".into())
}

pub fn service_integration() -> Check {
    tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap().block_on(service_checks())
}
