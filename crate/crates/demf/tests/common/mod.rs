//! Independent naive oracles shared by the integration and acceptance
//! suites. Everything here is written as plain per-term loops over raw
//! f64 slices, deliberately avoiding the library's tensor ops so the two
//! implementations can only agree by computing the same mathematics.

#![allow(dead_code)]

use demf::attention::{DeformAttnParams, OffsetMode, SelfAttnParams};
use demf::eval::{iou3d, Detection, GroundTruthBox};
use demf::geometry::Unit2;

/// Bilinear lookup on a (C, H, W) map at normalized (u, v), zero padding
/// outside, grid position (u*W - 0.5, v*H - 0.5).
pub fn naive_bilinear(map: &[f64], c: usize, h: usize, w: usize, u: f64, v: f64) -> Vec<f64> {
    let gx = u * w as f64 - 0.5;
    let gy = v * h as f64 - 0.5;
    let x0 = gx.floor() as i64;
    let y0 = gy.floor() as i64;
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let at = |ch: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            map[ch * h * w + y as usize * w + x as usize]
        }
    };
    (0..c)
        .map(|ch| {
            at(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(ch, y0, x0 + 1) * fx * (1.0 - fy)
                + at(ch, y0 + 1, x0) * (1.0 - fx) * fy
                + at(ch, y0 + 1, x0 + 1) * fx * fy
        })
        .collect()
}

/// One pyramid level as raw data.
pub struct NaiveLevel {
    pub data: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

/// Per-term loop implementation of multi-scale deformable attention
/// (learned offsets or fixed grid), including the per-head joint softmax
/// over levels*samples and the value/output projections. Also asserts
/// that every head's attention weights sum to 1 within 1e-12.
pub fn naive_ms_deform_attn(
    queries: &[f64],
    n: usize,
    refs: &[Unit2],
    degenerate: Option<&[bool]>,
    levels: &[NaiveLevel],
    params: &DeformAttnParams,
) -> Vec<f64> {
    let (m, k, l, c) = (params.heads, params.samples, params.levels, params.width);
    let d = c / m;
    assert_eq!(levels.len(), l);
    let value_w = params.value_w.tensor.data();
    let value_b = params.value_b.tensor.data();
    let output_w = params.output_w.tensor.data();
    let output_b = params.output_b.tensor.data();
    let weight_w = params.weight_w.tensor.data();
    let weight_b = params.weight_b.tensor.data();
    let offset_w = params.offset_w.tensor.data();
    let offset_b = params.offset_b.tensor.data();

    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let q = &queries[i * c..(i + 1) * c];

        // Offsets, layout (level, head, sample, 2), in level grid cells.
        let n_off = l * m * k * 2;
        let offsets: Vec<f64> = match params.mode {
            OffsetMode::Learned => (0..n_off)
                .map(|j| {
                    let mut acc = offset_b[j];
                    for (ci, qv) in q.iter().enumerate() {
                        acc += qv * offset_w[ci * n_off + j];
                    }
                    acc
                })
                .collect(),
            OffsetMode::Grid => {
                let side = (k as f64).sqrt().round() as usize;
                assert_eq!(side * side, k, "grid mode requires square K");
                let half = (side as f64 - 1.0) / 2.0;
                let mut v = vec![0.0; n_off];
                for li in 0..l {
                    for mi in 0..m {
                        for ki in 0..k {
                            let base = ((li * m + mi) * k + ki) * 2;
                            v[base] = (ki % side) as f64 - half;
                            v[base + 1] = (ki / side) as f64 - half;
                        }
                    }
                }
                v
            }
        };

        // Attention logits, layout (head, level, sample); joint softmax
        // per head over level*sample.
        let n_w = m * l * k;
        let logits: Vec<f64> = (0..n_w)
            .map(|j| {
                let mut acc = weight_b[j];
                for (ci, qv) in q.iter().enumerate() {
                    acc += qv * weight_w[ci * n_w + j];
                }
                acc
            })
            .collect();
        let mut attn = vec![0.0; n_w];
        for mi in 0..m {
            let row = &logits[mi * l * k..(mi + 1) * l * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                attn[mi * l * k + j] = e / z;
            }
            let s: f64 = attn[mi * l * k..(mi + 1) * l * k].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "head weights must sum to 1");
        }

        // Per-head accumulation of value-projected samples.
        let mut acc = vec![0.0; c];
        for (li, level) in levels.iter().enumerate() {
            for mi in 0..m {
                for ki in 0..k {
                    let ob = ((li * m + mi) * k + ki) * 2;
                    let u = refs[i].a + offsets[ob] / level.w as f64;
                    let v = refs[i].b + offsets[ob + 1] / level.h as f64;
                    let x = naive_bilinear(&level.data, c, level.h, level.w, u, v);
                    let a = attn[mi * l * k + li * k + ki];
                    for dd in 0..d {
                        let co = mi * d + dd;
                        let mut val = value_b[co];
                        for (ci, xv) in x.iter().enumerate() {
                            val += xv * value_w[ci * c + co];
                        }
                        acc[co] += a * val;
                    }
                }
            }
        }

        for co in 0..c {
            let mut o = output_b[co];
            for (ci, av) in acc.iter().enumerate() {
                o += av * output_w[ci * c + co];
            }
            out[i * c + co] = o;
        }
        if let Some(flags) = degenerate {
            if flags[i] {
                for co in 0..c {
                    out[i * c + co] = 0.0;
                }
            }
        }
    }
    out
}

/// O(N^2) loop implementation of multi-head self-attention with queries
/// and keys formed from zs + pos and values from zs.
pub fn naive_self_attn(zs: &[f64], pos: &[f64], n: usize, params: &SelfAttnParams) -> Vec<f64> {
    let c = params.width;
    let m = params.heads;
    let d = c / m;
    let lin = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = b[j];
                for ci in 0..c {
                    acc += x[i * c + ci] * w[ci * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    };
    let qk_in: Vec<f64> = zs.iter().zip(pos).map(|(a, b)| a + b).collect();
    let q = lin(
        &qk_in,
        &params.query_w.tensor.data(),
        &params.query_b.tensor.data(),
    );
    let k = lin(
        &qk_in,
        &params.key_w.tensor.data(),
        &params.key_b.tensor.data(),
    );
    let v = lin(
        zs,
        &params.value_w.tensor.data(),
        &params.value_b.tensor.data(),
    );

    let mut merged = vec![0.0; n * c];
    for mi in 0..m {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for dd in 0..d {
                    dot += q[i * c + mi * d + dd] * k[j * c + mi * d + dd];
                }
                scores[j] = dot / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / z;
                for dd in 0..d {
                    merged[i * c + mi * d + dd] += a * v[j * c + mi * d + dd];
                }
            }
        }
    }
    lin(
        &merged,
        &params.output_w.tensor.data(),
        &params.output_b.tensor.data(),
    )
}

/// Exhaustive restatement of the greedy confusion assignment: repeatedly
/// take the unprocessed prediction with the highest score (earliest index
/// on ties), give it its strictly-highest-IoU ground truth if that IoU
/// clears the threshold and the ground truth is unused.
pub fn exhaustive_confusion_assign(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> Vec<Option<usize>> {
    let mut assign = vec![None; preds.len()];
    let mut done = vec![false; preds.len()];
    let mut used = vec![false; gts.len()];
    for _ in 0..preds.len() {
        let mut pick: Option<usize> = None;
        for (pi, d) in preds.iter().enumerate() {
            if done[pi] {
                continue;
            }
            match pick {
                None => pick = Some(pi),
                Some(best) => {
                    if d.score > preds[best].score {
                        pick = Some(pi);
                    }
                }
            }
        }
        let pi = pick.unwrap();
        done[pi] = true;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = iou3d(&preds[pi].bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= iou_thresh && !used[gi] {
                assign[pi] = Some(gi);
                used[gi] = true;
            }
        }
    }
    assign
}
