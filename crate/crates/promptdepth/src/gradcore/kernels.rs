//! Flat-slice compute kernels behind the graph ops. Loop order keeps the
//! innermost walk contiguous over the output row so stride-1 convolutions
//! vectorize; summation order is fixed, so results are bit-reproducible.

#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Dot product with eight accumulators; fixed association order.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] into [N,Cout,Ho,Wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f32],
    kernel: &[f32],
    out: &mut [f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    for b in 0..n {
        let in_b = &input[b * cin * h * w..(b + 1) * cin * h * w];
        let out_b = &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        for co in 0..cout {
            let out_p = &mut out_b[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let in_p = &in_b[ci * h * w..(ci + 1) * h * w];
                let k_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let weight = kernel[k_base + ky * k + kx];
                        if stride == 1 {
                            let xo_lo = padding.saturating_sub(kx);
                            let xo_hi = (w + padding - kx).min(wo);
                            if xo_lo >= xo_hi {
                                continue;
                            }
                            for yo in 0..ho {
                                let yi = (yo + ky) as isize - padding as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let in_row = yi as usize * w;
                                let xi_lo = xo_lo + kx - padding;
                                axpy(
                                    weight,
                                    &in_p[in_row + xi_lo..in_row + xi_lo + (xo_hi - xo_lo)],
                                    &mut out_p[yo * wo + xo_lo..yo * wo + xo_hi],
                                );
                            }
                        } else {
                            for yo in 0..ho {
                                let yi = (yo * stride + ky) as isize - padding as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let in_row = yi as usize * w;
                                for xo in 0..wo {
                                    let xi = (xo * stride + kx) as isize - padding as isize;
                                    if xi < 0 || xi >= w as isize {
                                        continue;
                                    }
                                    out_p[yo * wo + xo] += weight * in_p[in_row + xi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    grad_out: &[f32],
    kernel: &[f32],
    grad_in: &mut [f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    for b in 0..n {
        let go_b = &grad_out[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        let gi_b = &mut grad_in[b * cin * h * w..(b + 1) * cin * h * w];
        for ci in 0..cin {
            let gi_p = &mut gi_b[ci * h * w..(ci + 1) * h * w];
            for co in 0..cout {
                let go_p = &go_b[co * ho * wo..(co + 1) * ho * wo];
                let k_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let weight = kernel[k_base + ky * k + kx];
                        if stride == 1 {
                            // yi = yo + ky - p  =>  yo = yi - ky + p
                            let xi_lo = kx.saturating_sub(padding);
                            let xi_hi = (wo + kx).min(w + padding).saturating_sub(padding).min(w);
                            if xi_lo >= xi_hi {
                                continue;
                            }
                            for yi in 0..h {
                                let yo = yi as isize - ky as isize + padding as isize;
                                if yo < 0 || yo >= ho as isize {
                                    continue;
                                }
                                let go_row = yo as usize * wo;
                                let xo_lo = xi_lo + padding - kx;
                                axpy(
                                    weight,
                                    &go_p[go_row + xo_lo..go_row + xo_lo + (xi_hi - xi_lo)],
                                    &mut gi_p[yi * w + xi_lo..yi * w + xi_hi],
                                );
                            }
                        } else {
                            for yo in 0..ho {
                                let yi = (yo * stride + ky) as isize - padding as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                for xo in 0..wo {
                                    let xi = (xo * stride + kx) as isize - padding as isize;
                                    if xi < 0 || xi >= w as isize {
                                        continue;
                                    }
                                    gi_p[yi as usize * w + xi as usize] +=
                                        weight * go_p[yo * wo + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel(
    grad_out: &[f32],
    input: &[f32],
    grad_kernel: &mut [f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    for b in 0..n {
        let in_b = &input[b * cin * h * w..(b + 1) * cin * h * w];
        let go_b = &grad_out[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        for co in 0..cout {
            let go_p = &go_b[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let in_p = &in_b[ci * h * w..(ci + 1) * h * w];
                let k_base = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0f32;
                        if stride == 1 {
                            let xo_lo = padding.saturating_sub(kx);
                            let xo_hi = (w + padding - kx).min(wo);
                            if xo_lo >= xo_hi {
                                continue;
                            }
                            for yo in 0..ho {
                                let yi = (yo + ky) as isize - padding as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let in_row = yi as usize * w;
                                let xi_lo = xo_lo + kx - padding;
                                acc += dot(
                                    &go_p[yo * wo + xo_lo..yo * wo + xo_hi],
                                    &in_p[in_row + xi_lo..in_row + xi_lo + (xo_hi - xo_lo)],
                                );
                            }
                        } else {
                            for yo in 0..ho {
                                let yi = (yo * stride + ky) as isize - padding as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let in_row = yi as usize * w;
                                for xo in 0..wo {
                                    let xi = (xo * stride + kx) as isize - padding as isize;
                                    if xi < 0 || xi >= w as isize {
                                        continue;
                                    }
                                    acc += go_p[yo * wo + xo] * in_p[in_row + xi as usize];
                                }
                            }
                        }
                        grad_kernel[k_base + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsample of `planes` stacked H*W planes.
pub fn up2_forward(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let (h2, w2) = (h * 2, w * 2);
    for p in 0..planes {
        let ip = &input[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h {
            for x in 0..w {
                let v = ip[y * w + x];
                let r0 = 2 * y * w2 + 2 * x;
                op[r0] = v;
                op[r0 + 1] = v;
                op[r0 + w2] = v;
                op[r0 + w2 + 1] = v;
            }
        }
    }
}

pub fn up2_backward(grad_out: &[f32], planes: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    let (h2, w2) = (h * 2, w * 2);
    for p in 0..planes {
        let gp = &grad_out[p * h2 * w2..(p + 1) * h2 * w2];
        let ip = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let r0 = 2 * y * w2 + 2 * x;
                ip[y * w + x] += gp[r0] + gp[r0 + 1] + gp[r0 + w2] + gp[r0 + w2 + 1];
            }
        }
    }
}

/// 2x2 mean pooling.
pub fn down2_forward(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let (h2, w2) = (h / 2, w / 2);
    for p in 0..planes {
        let ip = &input[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                let r0 = 2 * y * w + 2 * x;
                op[y * w2 + x] = 0.25 * (ip[r0] + ip[r0 + 1] + ip[r0 + w] + ip[r0 + w + 1]);
            }
        }
    }
}

pub fn down2_backward(grad_out: &[f32], planes: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    let (h2, w2) = (h / 2, w / 2);
    for p in 0..planes {
        let gp = &grad_out[p * h2 * w2..(p + 1) * h2 * w2];
        let ip = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let g = 0.25 * gp[y * w2 + x];
                let r0 = 2 * y * w + 2 * x;
                ip[r0] += g;
                ip[r0 + 1] += g;
                ip[r0 + w] += g;
                ip[r0 + w + 1] += g;
            }
        }
    }
}

/// out[y][x] = in[y+dy][x+dx], zero where the source sample is out of range.
pub fn shift2d(input: &[f32], planes: usize, h: usize, w: usize, dy: isize, dx: isize, out: &mut [f32]) {
    for p in 0..planes {
        let ip = &input[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src_row = sy as usize * w;
            let x_lo = (-dx).max(0) as usize;
            let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
            for x in x_lo..x_hi {
                op[y * w + x] = ip[src_row + (x as isize + dx) as usize];
            }
        }
    }
}

/// Accumulating adjoint of `shift2d`: grad_in[y+dy][x+dx] += grad_out[y][x].
pub fn shift2d_adjoint(
    grad_out: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    grad_in: &mut [f32],
) {
    for p in 0..planes {
        let gp = &grad_out[p * h * w..(p + 1) * h * w];
        let ip = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let dst_row = sy as usize * w;
            let x_lo = (-dx).max(0) as usize;
            let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
            for x in x_lo..x_hi {
                ip[dst_row + (x as isize + dx) as usize] += gp[y * w + x];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
