use super::{ImageError, ImageTensor};

/// Source index pair and fractional weight for one output coordinate,
/// half-pixel centers, no corner alignment, clamped to the valid range.
pub(crate) fn sample_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resize of every channel to `out_h` x `out_w`.
pub fn bilinear_resize(t: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidParam("resize target must be at least 1x1".into()));
    }
    if out_h == t.height() && out_w == t.width() {
        return Ok(t.clone());
    }
    let ys = sample_axis(out_h, t.height());
    let xs = sample_axis(out_w, t.width());
    let in_w = t.width();
    let mut data = Vec::with_capacity(t.channels() * out_h * out_w);
    for c in 0..t.channels() {
        let plane = t.plane(c);
        for &(y0, y1, fy) in &ys {
            let r0 = &plane[y0 * in_w..(y0 + 1) * in_w];
            let r1 = &plane[y1 * in_w..(y1 + 1) * in_w];
            for &(x0, x1, fx) in &xs {
                let (a, b, c_, d) = (r0[x0], r0[x1], r1[x0], r1[x1]);
                let v = lerp(lerp(a, b, fx), lerp(c_, d, fx), fy);
                // keep the convex-combination bound exact under rounding
                let lo = a.min(b).min(c_).min(d);
                let hi = a.max(b).max(c_).max(d);
                data.push(v.clamp(lo, hi));
            }
        }
    }
    ImageTensor::new(t.channels(), out_h, out_w, data)
}
