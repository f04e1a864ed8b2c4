//! Raw compute loops behind the tape ops. Hot paths for training; keep the
//! inner loops simple enough for the compiler to vectorize.

/// Output extent of a padded, strided cross-correlation.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Cross-correlation of `input [c_in, h, w]` with `kernel [c_out, c_in, kh, kw]`.
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let k_base = ((co * c_in) + ci) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = kernel[k_base + dy * kw + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
                        let out_row = &mut out_plane[oy * ow..oy * ow + ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[ox] += kv * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d_forward`] with respect to the input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    grad_out: &[f64],
    kernel: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    grad_in: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    for co in 0..c_out {
        let go_plane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let gi_plane = &mut grad_in[ci * h * w..(ci + 1) * h * w];
            let k_base = ((co * c_in) + ci) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = kernel[k_base + dy * kw + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let go_row = &go_plane[oy * ow..oy * ow + ow];
                        let gi_row = &mut gi_plane[iy as usize * w..iy as usize * w + w];
                        for ox in 0..ow {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gi_row[ix as usize] += kv * go_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d_forward`] with respect to the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    grad_kernel: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    for co in 0..c_out {
        let go_plane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let k_base = ((co * c_in) + ci) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
                        let go_row = &go_plane[oy * ow..oy * ow + ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += go_row[ox] * in_row[ix as usize];
                        }
                    }
                    grad_kernel[k_base + dy * kw + dx] += acc;
                }
            }
        }
    }
}

/// weight [d_out, d_in] · input [d_in] + bias [d_out]
pub fn affine_forward(input: &[f64], weight: &[f64], bias: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d_out);
    for r in 0..d_out {
        let row = &weight[r * d_in..(r + 1) * d_in];
        let mut acc = bias[r];
        for (x, wv) in input.iter().zip(row) {
            acc += x * wv;
        }
        out.push(acc);
    }
    out
}

/// One bilinear sample: indices of the four taps and their weights.
/// Coordinates are continuous in cell units with centers at idx + 0.5;
/// taps are clamped to the valid extent.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let xf = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let yf = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = xf.floor().min((width - 1) as f64) as usize;
    let y0 = yf.floor().min((height - 1) as f64) as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xf - x0 as f64;
    let fy = yf - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * width + x1, (1.0 - fy) * fx),
        (y1 * width + x0, fy * (1.0 - fx)),
        (y1 * width + x1, fy * fx),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_formula() {
        assert_eq!(conv_out_extent(5, 3, 1, 0), 3);
        assert_eq!(conv_out_extent(5, 3, 1, 1), 5);
        assert_eq!(conv_out_extent(6, 3, 2, 1), 3);
        assert_eq!(conv_out_extent(64, 3, 2, 1), 32);
    }

    #[test]
    fn bilinear_taps_sum_to_one_and_interpolate() {
        let taps = bilinear_taps(1.75, 2.25, 4, 4);
        let total: f64 = taps.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // exact cell center hits a single tap
        let taps = bilinear_taps(2.5, 1.5, 4, 4);
        let nonzero: Vec<_> = taps.iter().filter(|(_, w)| *w > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].0, 1 * 4 + 2);
    }
}
