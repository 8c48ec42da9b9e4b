//! Differentiable primitive operations.
//!
//! Each constructor computes the forward value and registers a backward
//! rule on the output node. Shape violations panic with both offending
//! shapes; numeric edge cases are handled in the rules themselves
//! (zero-padded sampling, relu subgradient at 0).

use super::rng::StreamRng;
use super::tensor::Tensor;

fn shape_panic(a: &[usize], b: &[usize]) -> ! {
    panic!("shape mismatch: {:?} vs {:?}", a, b);
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        shape_panic(&sa, &sb);
    }
    let data = a
        .inner
        .borrow()
        .data
        .iter()
        .zip(b.inner.borrow().data.iter())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_op(
        sa,
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    add(a, &scale(b, -1.0))
}

/// Adds a length-C row vector to every row of an (R, C) matrix.
pub fn add_row(x: &Tensor, row: &Tensor) -> Tensor {
    let (sx, sr) = (x.shape(), row.shape());
    if sx.len() != 2 || sr != vec![sx[1]] {
        shape_panic(&sx, &sr);
    }
    let (r, c) = (sx[0], sx[1]);
    let xb = x.inner.borrow();
    let rb = row.inner.borrow();
    let mut data = xb.data.clone();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] += rb.data[j];
        }
    }
    drop(xb);
    drop(rb);
    Tensor::from_op(
        sx,
        data,
        vec![x.clone(), row.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(g);
            let mut gr = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    gr[j] += g[i * c + j];
                }
            }
            parents[1].accumulate_grad(&gr);
        }),
    )
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        shape_panic(&sa, &sb);
    }
    let av = a.data();
    let bv = b.data();
    let data = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
    Tensor::from_op(
        sa,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(gi, y)| gi * y).collect();
            let gb: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi * x).collect();
            parents[0].accumulate_grad(&ga);
            parents[1].accumulate_grad(&gb);
        }),
    )
}

/// Multiplies every row of an (R, C) matrix elementwise by a length-C row.
pub fn mul_row(x: &Tensor, row: &Tensor) -> Tensor {
    let (sx, sr) = (x.shape(), row.shape());
    if sx.len() != 2 || sr != vec![sx[1]] {
        shape_panic(&sx, &sr);
    }
    let (r, c) = (sx[0], sx[1]);
    let xv = x.data();
    let rv = row.data();
    let mut data = xv.clone();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] *= rv[j];
        }
    }
    Tensor::from_op(
        sx,
        data,
        vec![x.clone(), row.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            let mut gr = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[i * c + j] * rv[j];
                    gr[j] += g[i * c + j] * xv[i * c + j];
                }
            }
            parents[0].accumulate_grad(&gx);
            parents[1].accumulate_grad(&gr);
        }),
    )
}

pub fn scale(x: &Tensor, k: f64) -> Tensor {
    let s = x.shape();
    let data = x.inner.borrow().data.iter().map(|v| v * k).collect();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gx: Vec<f64> = g.iter().map(|v| v * k).collect();
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Matrix product of (R, K) and (K, C).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        shape_panic(&sa, &sb);
    }
    let (r, k, c) = (sa[0], sa[1], sb[1]);
    let av = a.data();
    let bv = b.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bv[p * c..(p + 1) * c];
            let out = &mut data[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += aip * brow[j];
            }
        }
    }
    Tensor::from_op(
        vec![r, c],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            // dA = G B^T, dB = A^T G
            let mut ga = vec![0.0; r * k];
            let mut gb = vec![0.0; k * c];
            for i in 0..r {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g[i * c + j] * bv[p * c + j];
                    }
                    ga[i * k + p] = s;
                }
            }
            for p in 0..k {
                for i in 0..r {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        gb[p * c + j] += aip * g[i * c + j];
                    }
                }
            }
            parents[0].accumulate_grad(&ga);
            parents[1].accumulate_grad(&gb);
        }),
    )
}

pub fn transpose(x: &Tensor) -> Tensor {
    let s = x.shape();
    if s.len() != 2 {
        shape_panic(&s, &[0, 0]);
    }
    let (r, c) = (s[0], s[1]);
    let xv = x.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = xv[i * c + j];
        }
    }
    Tensor::from_op(
        vec![c, r],
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            parents[0].accumulate_grad(&gx);
        }),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let s = x.shape();
    let xv = x.data();
    let data = xv.iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gx: Vec<f64> = g
                .iter()
                .zip(&xv)
                .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                .collect();
            parents[0].accumulate_grad(&gx);
        }),
    )
}

pub fn abs(x: &Tensor) -> Tensor {
    let s = x.shape();
    let xv = x.data();
    let data = xv.iter().map(|v| v.abs()).collect();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gx: Vec<f64> = g
                .iter()
                .zip(&xv)
                .map(|(gi, v)| gi * v.signum() * if *v == 0.0 { 0.0 } else { 1.0 })
                .collect();
            parents[0].accumulate_grad(&gx);
        }),
    )
}

pub fn exp(x: &Tensor) -> Tensor {
    let s = x.shape();
    let ev: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let data = ev.clone();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gx: Vec<f64> = g.iter().zip(&ev).map(|(gi, e)| gi * e).collect();
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Sum of all elements, as a scalar.
pub fn sum(x: &Tensor) -> Tensor {
    let n = x.len();
    let total: f64 = x.inner.borrow().data.iter().sum();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&vec![g[0]; n]);
        }),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.len() as f64;
    scale(&sum(x), 1.0 / n)
}

/// Layer normalization over the last axis of an (R, C) matrix,
/// with learned gain and bias of length C.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let (sx, sg) = (x.shape(), gain.shape());
    if sx.len() != 2 || sg != vec![sx[1]] || bias.shape() != sg {
        shape_panic(&sx, &sg);
    }
    let (r, c) = (sx[0], sx[1]);
    let xv = x.data();
    let gv = gain.data();
    let bv = bias.data();
    let mut data = vec![0.0; r * c];
    let mut norms = vec![0.0; r * c]; // pre-gain normalized values
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = &xv[i * c..(i + 1) * c];
        let m: f64 = row.iter().sum::<f64>() / c as f64;
        let var: f64 = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..c {
            let nh = (row[j] - m) * is;
            norms[i * c + j] = nh;
            data[i * c + j] = nh * gv[j] + bv[j];
        }
    }
    Tensor::from_op(
        sx,
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for i in 0..r {
                let is = inv_std[i];
                // dL/dnorm_j = g_j * gain_j; then the standard layer-norm
                // Jacobian w.r.t. x through mean and variance.
                let mut sum_dn = 0.0;
                let mut sum_dn_n = 0.0;
                for j in 0..c {
                    let dn = g[i * c + j] * gv[j];
                    sum_dn += dn;
                    sum_dn_n += dn * norms[i * c + j];
                    gg[j] += g[i * c + j] * norms[i * c + j];
                    gb[j] += g[i * c + j];
                }
                for j in 0..c {
                    let dn = g[i * c + j] * gv[j];
                    gx[i * c + j] = is
                        * (dn - sum_dn / c as f64 - norms[i * c + j] * sum_dn_n / c as f64);
                }
            }
            parents[0].accumulate_grad(&gx);
            parents[1].accumulate_grad(&gg);
            parents[2].accumulate_grad(&gb);
        }),
    )
}

/// Row-wise softmax of an (R, C) matrix. Each output row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let s = x.shape();
    if s.len() != 2 {
        shape_panic(&s, &[0, 0]);
    }
    let (r, c) = (s[0], s[1]);
    let xv = x.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &xv[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            data[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            data[i * c + j] /= z;
        }
    }
    let sm = data.clone();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let mut dot = 0.0;
                for j in 0..c {
                    dot += g[i * c + j] * sm[i * c + j];
                }
                for j in 0..c {
                    gx[i * c + j] = sm[i * c + j] * (g[i * c + j] - dot);
                }
            }
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Row-wise log-softmax of an (R, C) matrix.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let s = x.shape();
    if s.len() != 2 {
        shape_panic(&s, &[0, 0]);
    }
    let (r, c) = (s[0], s[1]);
    let xv = x.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &xv[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        for j in 0..c {
            data[i * c + j] = row[j] - lz;
        }
    }
    let lp = data.clone();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    gx[i * c + j] = g[i * c + j] - lp[i * c + j].exp() * gsum;
                }
            }
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Negative log-likelihood rows: out[r] = -logp[r, target[r]].
pub fn nll_rows(logp: &Tensor, targets: &[usize]) -> Tensor {
    let s = logp.shape();
    if s.len() != 2 || s[0] != targets.len() {
        shape_panic(&s, &[targets.len()]);
    }
    let (r, c) = (s[0], s[1]);
    let lv = logp.data();
    let data: Vec<f64> = targets.iter().enumerate().map(|(i, &t)| -lv[i * c + t]).collect();
    let tg = targets.to_vec();
    Tensor::from_op(
        vec![r],
        data,
        vec![logp.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            for (i, &t) in tg.iter().enumerate() {
                gx[i * c + t] = -g[i];
            }
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Inverted dropout: survivors scaled by 1/(1-rate) during training,
/// identity at evaluation time.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut StreamRng) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    if !training || rate == 0.0 {
        // Identity pass-through keeps eval graphs free of mask nodes.
        return scale(x, 1.0);
    }
    let s = x.shape();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.uniform() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let data = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, m)| v * m)
        .collect();
    Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gx: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Contiguous column slice of an (R, C) matrix.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    if s.len() != 2 || start + len > s[1] {
        shape_panic(&s, &[start, len]);
    }
    let (r, c) = (s[0], s[1]);
    let xv = x.data();
    let mut data = vec![0.0; r * len];
    for i in 0..r {
        data[i * len..(i + 1) * len].copy_from_slice(&xv[i * c + start..i * c + start + len]);
    }
    Tensor::from_op(
        vec![r, len],
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Concatenates (R, C_i) matrices along columns.
pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let r = parts[0].shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            if s.len() != 2 || s[0] != r {
                shape_panic(&s, &[r, 0]);
            }
            s[1]
        })
        .collect();
    let c: usize = widths.iter().sum();
    let mut data = vec![0.0; r * c];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pv = p.data();
        for i in 0..r {
            data[i * c + off..i * c + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let widths_b = widths.clone();
    Tensor::from_op(
        vec![r, c],
        data,
        parts.to_vec(),
        Box::new(move |g, parents| {
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths_b) {
                let mut gp = vec![0.0; r * w];
                for i in 0..r {
                    gp[i * w..(i + 1) * w].copy_from_slice(&g[i * c + off..i * c + off + w]);
                }
                p.accumulate_grad(&gp);
                off += w;
            }
        }),
    )
}

/// Gathers the given rows of an (R, C) matrix into a (len, C) matrix.
pub fn select_rows(x: &Tensor, indices: &[usize]) -> Tensor {
    let s = x.shape();
    if s.len() != 2 {
        shape_panic(&s, &[0, 0]);
    }
    let (r, c) = (s[0], s[1]);
    assert!(indices.iter().all(|&i| i < r), "row index out of range");
    let xv = x.data();
    let mut data = vec![0.0; indices.len() * c];
    for (o, &i) in indices.iter().enumerate() {
        data[o * c..(o + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
    }
    let idx = indices.to_vec();
    Tensor::from_op(
        vec![indices.len(), c],
        data,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; r * c];
            for (o, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[i * c + j] += g[o * c + j];
                }
            }
            parents[0].accumulate_grad(&gx);
        }),
    )
}

/// Reinterprets the row-major buffer under a new shape of equal size.
pub fn reshape(x: &Tensor, new_shape: &[usize]) -> Tensor {
    let s = x.shape();
    let n: usize = new_shape.iter().product();
    if n != x.len() {
        shape_panic(&s, new_shape);
    }
    Tensor::from_op(
        new_shape.to_vec(),
        x.data(),
        vec![x.clone()],
        Box::new(|g, parents| {
            parents[0].accumulate_grad(g);
        }),
    )
}

/// Bilinear sampling of a (C, H, W) map at S normalized locations.
///
/// Row s of `uv` holds (u, v) in [0,1]-normalized image coordinates; the
/// continuous grid position is (u*W - 0.5, v*H - 0.5), so 0 and 1 align
/// with the outer edges of the border pixels. Out-of-range neighbors are
/// zero-padded. Differentiable w.r.t. both the map and the locations.
pub fn sample_rows(map: &Tensor, uv: &Tensor) -> Tensor {
    let sm = map.shape();
    let su = uv.shape();
    if sm.len() != 3 || su.len() != 2 || su[1] != 2 {
        shape_panic(&sm, &su);
    }
    let (c, h, w) = (sm[0], sm[1], sm[2]);
    let s = su[0];
    let mv = map.data();
    let uvv = uv.data();

    let fetch = |mv: &[f64], ch: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mv[ch * h * w + y as usize * w + x as usize]
        }
    };

    let mut data = vec![0.0; s * c];
    for i in 0..s {
        let gx = uvv[i * 2] * w as f64 - 0.5;
        let gy = uvv[i * 2 + 1] * h as f64 - 0.5;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let fx = gx - x0;
        let fy = gy - y0;
        // Clamp before the integer cast: wildly out-of-range (or non-finite)
        // coordinates would saturate to i64::MAX and overflow in `x0 + 1`.
        // Anything outside [-2, dim + 2] only touches zero padding.
        let x0 = x0.clamp(-2.0, w as f64 + 2.0) as i64;
        let y0 = y0.clamp(-2.0, h as f64 + 2.0) as i64;
        for ch in 0..c {
            let v00 = fetch(&mv, ch, y0, x0);
            let v01 = fetch(&mv, ch, y0, x0 + 1);
            let v10 = fetch(&mv, ch, y0 + 1, x0);
            let v11 = fetch(&mv, ch, y0 + 1, x0 + 1);
            data[i * c + ch] = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
    }

    Tensor::from_op(
        vec![s, c],
        data,
        vec![map.clone(), uv.clone()],
        Box::new(move |g, parents| {
            let mut gmap = vec![0.0; c * h * w];
            let mut guv = vec![0.0; s * 2];
            let inb = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64;
            for i in 0..s {
                let gx = uvv[i * 2] * w as f64 - 0.5;
                let gy = uvv[i * 2 + 1] * h as f64 - 0.5;
                let x0f = gx.floor();
                let y0f = gy.floor();
                let fx = gx - x0f;
                let fy = gy - y0f;
                let x0 = x0f.clamp(-2.0, w as f64 + 2.0) as i64;
                let y0 = y0f.clamp(-2.0, h as f64 + 2.0) as i64;
                let mut dgx = 0.0;
                let mut dgy = 0.0;
                for ch in 0..c {
                    let go = g[i * c + ch];
                    if go == 0.0 {
                        continue;
                    }
                    let corners = [
                        (y0, x0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
                        (y0, x0 + 1, fx * (1.0 - fy), 1.0 - fy, -fx),
                        (y0 + 1, x0, (1.0 - fx) * fy, -fy, 1.0 - fx),
                        (y0 + 1, x0 + 1, fx * fy, fy, fx),
                    ];
                    for (yy, xx, wgt, dwx, dwy) in corners {
                        if inb(yy, xx) {
                            let v = mv[ch * h * w + yy as usize * w + xx as usize];
                            gmap[ch * h * w + yy as usize * w + xx as usize] += go * wgt;
                            dgx += go * v * dwx;
                            dgy += go * v * dwy;
                        }
                    }
                }
                guv[i * 2] = dgx * w as f64;
                guv[i * 2 + 1] = dgy * h as f64;
            }
            parents[0].accumulate_grad(&gmap);
            parents[1].accumulate_grad(&guv);
        }),
    )
}

/// Head-wise weighted combination of value-projected samples.
///
/// `weights` is (N*M, G) softmaxed per row, row order (candidate, head),
/// G = levels * samples. `level_samples[l]` is (N*M*K, C) of value-projected
/// samples, row order (candidate, head, sample); head m reads its
/// `head_dim`-wide column block m. Output is (N, C).
pub fn deform_combine(
    weights: &Tensor,
    level_samples: &[Tensor],
    heads: usize,
    head_dim: usize,
) -> Tensor {
    let sw = weights.shape();
    let levels = level_samples.len();
    assert!(levels >= 1);
    let nm = sw[0];
    let n = nm / heads;
    let g_total = sw[1];
    let k = g_total / levels;
    let c = heads * head_dim;
    for ls in level_samples {
        let s = ls.shape();
        if s != vec![nm * k, c] {
            shape_panic(&s, &[nm * k, c]);
        }
    }
    if sw != vec![nm, levels * k] || nm != n * heads {
        shape_panic(&sw, &[n * heads, levels * k]);
    }

    let wv = weights.data();
    let svs: Vec<Vec<f64>> = level_samples.iter().map(|t| t.data()).collect();
    let mut data = vec![0.0; n * c];
    for ni in 0..n {
        for m in 0..heads {
            let row = ni * heads + m;
            for l in 0..levels {
                for kk in 0..k {
                    let wgt = wv[row * g_total + l * k + kk];
                    let srow = (row * k + kk) * c + m * head_dim;
                    let out = &mut data[ni * c + m * head_dim..ni * c + (m + 1) * head_dim];
                    let sv = &svs[l][srow..srow + head_dim];
                    for d in 0..head_dim {
                        out[d] += wgt * sv[d];
                    }
                }
            }
        }
    }

    let mut parents = vec![weights.clone()];
    parents.extend_from_slice(level_samples);
    Tensor::from_op(
        vec![n, c],
        data,
        parents,
        Box::new(move |g, parents| {
            let mut gw = vec![0.0; nm * g_total];
            let mut gs: Vec<Vec<f64>> = (0..levels).map(|_| vec![0.0; nm * k * c]).collect();
            for ni in 0..n {
                for m in 0..heads {
                    let row = ni * heads + m;
                    let gout = &g[ni * c + m * head_dim..ni * c + (m + 1) * head_dim];
                    for l in 0..levels {
                        for kk in 0..k {
                            let widx = row * g_total + l * k + kk;
                            let srow = (row * k + kk) * c + m * head_dim;
                            let sv = &svs[l][srow..srow + head_dim];
                            let mut dot = 0.0;
                            for d in 0..head_dim {
                                dot += gout[d] * sv[d];
                                gs[l][srow + d] += gout[d] * wv[widx];
                            }
                            gw[widx] = dot;
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&gw);
            for l in 0..levels {
                parents[1 + l].accumulate_grad(&gs[l]);
            }
        }),
    )
}

/// 2D convolution of a (Cin, H, W) input with (Cout, Cin, KH, KW) weights,
/// zero padding `pad`, stride `stride`. Output is (Cout, Ho, Wo).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let si = input.shape();
    let sw = weight.shape();
    if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || bias.shape() != vec![sw[0]] {
        shape_panic(&si, &sw);
    }
    let (cin, h, w) = (si[0], si[1], si[2]);
    let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let iv = input.data();
    let wv = weight.data();
    let bv = bias.data();

    let mut data = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bv[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += iv[ci * h * w + iy as usize * w + ix as usize]
                                * wv[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                data[co * ho * wo + oy * wo + ox] = acc;
            }
        }
    }

    Tensor::from_op(
        vec![cout, ho, wo],
        data,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let mut gi = vec![0.0; cin * h * w];
            let mut gw = vec![0.0; cout * cin * kh * kw];
            let mut gb = vec![0.0; cout];
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = g[co * ho * wo + oy * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        gb[co] += go;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as i64 - pad as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let iidx = ci * h * w + iy as usize * w + ix as usize;
                                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                    gi[iidx] += go * wv[widx];
                                    gw[widx] += go * iv[iidx];
                                }
                            }
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&gi);
            parents[1].accumulate_grad(&gw);
            parents[2].accumulate_grad(&gb);
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::new(&[1, 3], vec![0.0, 0.0, 0.0]);
        let y = softmax_rows(&x);
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data(), vec![0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&eye, &a).data(), a.data());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn matmul_rejects_incompatible_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        matmul(&a, &b);
    }

    #[test]
    fn bilinear_lattice_point_and_center() {
        let map = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        // Center of pixel (0,0): grid coords (0,0) => u = 0.5/W, v = 0.5/H.
        let uv = Tensor::new(&[1, 2], vec![0.25, 0.25]);
        assert!((sample_rows(&map, &uv).data()[0] - 1.0).abs() < 1e-15);
        // Geometric center of all four pixels => mean.
        let uv = Tensor::new(&[1, 2], vec![0.5, 0.5]);
        assert!((sample_rows(&map, &uv).data()[0] - 2.5).abs() < 1e-15);
        // Far outside: zero padding.
        let uv = Tensor::new(&[1, 2], vec![-1.0, -1.0]);
        assert_eq!(sample_rows(&map, &uv).data()[0], 0.0);
    }

    #[test]
    fn dropout_is_identity_at_eval() {
        let mut rng = StreamRng::new(7, "test");
        let x = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let y = dropout(&x, 0.4, false, &mut rng);
        assert_eq!(y.data(), x.data());
    }
}
