//! Fixtures and independent scalar oracles shared by the integration suites.
#![allow(dead_code)]

pub mod criteria;
pub mod http;

use cxr_core::imagecore::{encode_gray_png, GrayImage};
use cxr_core::models::{fixture_weights, Architecture, Model};
use cxr_core::nn::Tensor4;
use cxr_core::rng::RngState;

pub fn schema(name: &str) -> serde_json::Value {
    let path = format!("{}/schemas/{name}.schema.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// Validates `v` against `schemas/<name>.schema.json`, returning every
/// violation as text.
pub fn check_schema(name: &str, v: &serde_json::Value) -> Result<(), String> {
    let validator = jsonschema::validator_for(&schema(name)).map_err(|e| format!("schema {name}: {e}"))?;
    let errs: Vec<String> = validator.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(format!("{name} schema: {}", errs.join("; ")))
    }
}

/// Fixture model rebuilt from its serialized bytes, so the digest is set.
pub fn fixture_model(arch: Architecture, classes: usize, seed: u64) -> (Model, Vec<u8>) {
    let mut g = arch.build(classes);
    if classes == cxr_core::models::CLASS_LABELS.len() {
        g.class_labels = cxr_core::models::CLASS_LABELS.iter().map(|s| s.to_string()).collect();
    }
    let bytes = fixture_weights(&g, seed).to_bytes();
    (Model::from_bytes(&bytes).unwrap(), bytes)
}

/// Left half 50, right half 200.
pub fn two_level(w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |x, _| if x < w / 2 { 50 } else { 200 })
}

pub fn random_gray(rng: &mut RngState, w: usize, h: usize) -> GrayImage {
    let px = (0..w * h).map(|_| rng.next_below(256) as u8).collect();
    GrayImage::new(w, h, px).unwrap()
}

/// Smooth synthetic radiograph-like image: a bright elliptical field with
/// seeded blobs, so CLAHE and the CNN see some structure.
pub fn synthetic_cxr(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = RngState::new(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (rng.next_f64() * w as f64, rng.next_f64() * h as f64, 3.0 + rng.next_f64() * w as f64 / 6.0, rng.next_uniform(-80.0, 80.0)))
        .collect();
    GrayImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
        let mut v = 160.0 - 250.0 * (fx * fx + 0.6 * fy * fy);
        for &(bx, by, r, a) in &blobs {
            let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (r * r);
            v += a * (-d2).exp();
        }
        v.round().clamp(0.0, 255.0) as u8
    })
}

pub fn synthetic_png(seed: u64, w: usize, h: usize) -> Vec<u8> {
    encode_gray_png(&synthetic_cxr(seed, w, h))
}

pub fn random_tensor(rng: &mut RngState, dims: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(dims, |_| rng.next_gaussian() as f32)
}

pub fn random_vec(rng: &mut RngState, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.next_uniform(lo, hi) as f32).collect()
}

/// `|a - e| <= tol * max(|e|, 1)` elementwise.
pub fn compare(what: &str, actual: &[f32], expected: &[f64], tol: f64) -> Result<(), String> {
    if actual.len() != expected.len() {
        return Err(format!("{what}: {} values, oracle has {}", actual.len(), expected.len()));
    }
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        let err = (a as f64 - e).abs();
        if !(err <= tol * e.abs().max(1.0)) {
            return Err(format!("{what}: element {i} is {a}, oracle {e} (error {err:.3e})"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Operator oracles. Straight loops in f64 over the NCHW index formulas.

pub fn conv2d_oracle(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> ([usize; 4], Vec<f64>) {
    let [n, cin, h, wd] = x.dims();
    let [cout, cpg, kh, kw] = w.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bv| bv[oc] as f64);
                    for ic in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                s += x.get(b, g * cpg + ic, iy as usize, ix as usize) as f64
                                    * w.get(oc, ic, ky, kx) as f64;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    ([n, cout, oh, ow], out)
}

pub fn maxpool_oracle(x: &Tensor4, k: usize, stride: usize, pad: usize) -> ([usize; 4], Vec<f64>) {
    let [n, c, h, w] = x.dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for iy in (oy * stride) as i64 - pad as i64..(oy * stride + k) as i64 - pad as i64 {
                        for ix in (ox * stride) as i64 - pad as i64..(ox * stride + k) as i64 - pad as i64 {
                            if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                m = m.max(x.get(b, ch, iy as usize, ix as usize) as f64);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    ([n, c, oh, ow], out)
}

pub fn batchnorm_oracle(x: &Tensor4, g: &[f32], b: &[f32], m: &[f32], v: &[f32], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::new();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let val = x.get(i, ch, y, xx) as f64;
                    out.push((val - m[ch] as f64) / (v[ch] as f64 + eps).sqrt() * g[ch] as f64 + b[ch] as f64);
                }
            }
        }
    }
    out
}

pub fn layernorm_oracle(x: &Tensor4, g: &[f32], b: &[f32], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let mut out = vec![0f64; n * c * h * w];
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| x.get(i, ch, y, xx) as f64).collect();
                let mean = vals.iter().sum::<f64>() / c as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                for ch in 0..c {
                    out[((i * c + ch) * h + y) * w + xx] =
                        (vals[ch] - mean) / (var + eps).sqrt() * g[ch] as f64 + b[ch] as f64;
                }
            }
        }
    }
    out
}

pub fn linear_oracle(x: &Tensor4, w: &[f32], b: &[f32], out_features: usize) -> Vec<f64> {
    let n = x.batch();
    let inf = x.len() / n;
    let mut out = Vec::new();
    for i in 0..n {
        let row = &x.data()[i * inf..(i + 1) * inf];
        for o in 0..out_features {
            let mut s = b[o] as f64;
            for k in 0..inf {
                s += w[o * inf + k] as f64 * row[k] as f64;
            }
            out.push(s);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CLAHE oracle, written pixel by pixel from the textual rules: tiles with the
// remainder in the last row/column, clip at max(1, floor(clip*area/256)),
// excess spread evenly with the remainder on the lowest bins, rounded CDF
// mapping, then bilinear blending of the four nearest tile centres
// (clamped at the border), rounded half up.

fn oracle_tile_range(len: usize, tiles: usize, t: usize) -> (usize, usize) {
    let step = len / tiles;
    let start = t * step;
    let end = if t + 1 == tiles { len } else { start + step };
    (start, end)
}

fn oracle_mapping(img: &GrayImage, clip_limit: f64, xr: (usize, usize), yr: (usize, usize)) -> Vec<u64> {
    let mut hist = vec![0u64; 256];
    for y in yr.0..yr.1 {
        for x in xr.0..xr.1 {
            hist[img.get(x, y) as usize] += 1;
        }
    }
    let area = ((xr.1 - xr.0) * (yr.1 - yr.0)) as u64;
    let limit = ((clip_limit * area as f64 / 256.0).floor() as u64).max(1);
    let mut excess = 0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    for (i, h) in hist.iter_mut().enumerate() {
        *h += excess / 256 + if (i as u64) < excess % 256 { 1 } else { 0 };
    }
    let cdf_min = *hist.iter().find(|&&h| h > 0).unwrap_or(&0);
    let mut map = vec![0u64; 256];
    let mut cdf = 0u64;
    for v in 0..256 {
        cdf += hist[v];
        map[v] = if area == cdf_min {
            v as u64
        } else {
            // round half up of (cdf - cdf_min) * 255 / (area - cdf_min)
            let num = cdf.saturating_sub(cdf_min) * 255;
            let den = area - cdf_min;
            ((num * 2 + den) / (2 * den)).min(255)
        };
    }
    map
}

/// Tile pair and weight numerator/denominator for coordinate `p`, using
/// doubled coordinates (centre of tile `t` sits at `start + end - 1`).
fn oracle_axis(p: usize, len: usize, tiles: usize) -> (usize, usize, i64, i64) {
    let centre = |t: usize| {
        let (s, e) = oracle_tile_range(len, tiles, t);
        (s + e) as i64 - 1
    };
    let p2 = 2 * p as i64;
    if p2 <= centre(0) {
        return (0, 0, 0, 1);
    }
    if p2 >= centre(tiles - 1) {
        return (tiles - 1, tiles - 1, 0, 1);
    }
    let t = (0..tiles - 1).find(|&t| centre(t) <= p2 && p2 < centre(t + 1)).unwrap();
    (t, t + 1, p2 - centre(t), centre(t + 1) - centre(t))
}

pub fn clahe_oracle(img: &GrayImage, clip: f64, gx: usize, gy: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut maps = vec![vec![Vec::new(); gx]; gy];
    for (ty, row) in maps.iter_mut().enumerate() {
        for (tx, m) in row.iter_mut().enumerate() {
            *m = oracle_mapping(img, clip, oracle_tile_range(w, gx, tx), oracle_tile_range(h, gy, ty));
        }
    }
    GrayImage::from_fn(w, h, |x, y| {
        let v = img.get(x, y) as usize;
        let (tx0, tx1, nx, dx) = oracle_axis(x, w, gx);
        let (ty0, ty1, ny, dy) = oracle_axis(y, h, gy);
        let m = |tx: usize, ty: usize| maps[ty][tx][v] as i64;
        let num = (dy - ny) * ((dx - nx) * m(tx0, ty0) + nx * m(tx1, ty0))
            + ny * ((dx - nx) * m(tx0, ty1) + nx * m(tx1, ty1));
        let den = dx * dy;
        ((2 * num + den) / (2 * den)) as u8
    })
}

// ---------------------------------------------------------------------------
// Metrics oracle.

/// Pair-counting AUC as the exact fraction `(2*ordered + ties, 2*|P|*|N|)`.
pub fn brute_auc(scores: &[f64], positive: &[bool]) -> Option<(u128, u128)> {
    let (mut num, mut pairs) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            num += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then_some((num, 2 * pairs))
}

// ---------------------------------------------------------------------------
// Perspective oracle: projective maps unit square -> quad in closed form,
// composed per pixel. Independent of the 8x8 linear solve.

type Mat3 = [[f64; 3]; 3];

fn square_to_quad(q: &[(f64, f64); 4]) -> Mat3 {
    let [(x0, y0), (x1, y1), (x2, y2), (x3, y3)] = *q;
    let sx = x0 - x1 + x2 - x3;
    let sy = y0 - y1 + y2 - y3;
    if sx == 0.0 && sy == 0.0 {
        return [[x1 - x0, x3 - x0, x0], [y1 - y0, y3 - y0, y0], [0.0, 0.0, 1.0]];
    }
    let (dx1, dx2, dy1, dy2) = (x1 - x2, x3 - x2, y1 - y2, y3 - y2);
    let det = dx1 * dy2 - dx2 * dy1;
    let g = (sx * dy2 - dx2 * sy) / det;
    let h = (dx1 * sy - sx * dy1) / det;
    [[x1 - x0 + g * x1, x3 - x0 + h * x3, x0], [y1 - y0 + g * y1, y3 - y0 + h * y3, y0], [g, h, 1.0]]
}

fn adjugate(m: &Mat3) -> Mat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ]
}

fn apply(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

/// Output pixel `(x, y)` of an image whose corners were moved to `quad`
/// samples the source at the returned position.
pub fn perspective_source(quad: &[(f64, f64); 4], w: usize, h: usize, x: f64, y: f64) -> (f64, f64) {
    let (r, b) = ((w - 1) as f64, (h - 1) as f64);
    let rect = square_to_quad(&[(0.0, 0.0), (r, 0.0), (r, b), (0.0, b)]);
    let uv = apply(&adjugate(&square_to_quad(quad)), [x, y, 1.0]);
    let s = apply(&rect, uv);
    (s[0] / s[2], s[1] / s[2])
}

/// Bilinear read with zero outside the image.
pub fn bilinear_zero(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x.floor(), y - y.floor());
    let at = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize] as f64
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
}

// ---------------------------------------------------------------------------
// Reference SplitMix64, stateful textbook form.

pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / 9007199254740992.0
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next() as u128 * n as u128) >> 64) as u64
    }
}
