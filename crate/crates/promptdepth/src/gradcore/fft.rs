//! Radix-2 complex FFT, enough for power-of-two prompt spectra.
//!
//! Convention: the inverse transform carries the full 1/(H*W) factor and the
//! forward transform carries none, so `re(ifft2)` and its adjoint `fft2/(H*W)`
//! form a clean linear pair.

use crate::error::{Error, Result};

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place radix-2 Cooley-Tukey over `re`/`im`; lengths must be a power of two.
/// `inverse` flips the twiddle sign and applies no normalization.
fn fft_1d(re: &mut [f32], im: &mut [f32], inverse: bool) {
    let n = re.len();
    debug_assert!(is_power_of_two(n));
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n - 1 {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    // Butterflies; twiddles computed in f64 and truncated once.
    let sign = if inverse { 1.0f64 } else { -1.0f64 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let mut cur_re = 1.0f64;
            let mut cur_im = 0.0f64;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = cur_re as f32 * re[b] - cur_im as f32 * im[b];
                let ti = cur_re as f32 * im[b] + cur_im as f32 * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            start += len;
        }
        len <<= 1;
    }
}

fn transform_2d(re: &mut [f32], im: &mut [f32], h: usize, w: usize, inverse: bool) {
    // Rows.
    for y in 0..h {
        fft_1d(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w], inverse);
    }
    // Columns via a scratch strip.
    let mut col_re = vec![0.0f32; h];
    let mut col_im = vec![0.0f32; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        fft_1d(&mut col_re, &mut col_im, inverse);
        for y in 0..h {
            re[y * w + x] = col_re[y];
            im[y * w + x] = col_im[y];
        }
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if !is_power_of_two(h) || !is_power_of_two(w) {
        return Err(Error::shape(format!(
            "spectral dims must be powers of two, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Full complex inverse 2D DFT of one plane, with 1/(H*W) normalization.
pub fn ifft2_complex(re: &[f32], im: &[f32], h: usize, w: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    check_dims(h, w)?;
    let mut out_re = re.to_vec();
    let mut out_im = im.to_vec();
    transform_2d(&mut out_re, &mut out_im, h, w, true);
    let scale = 1.0 / (h * w) as f32;
    for v in out_re.iter_mut() {
        *v *= scale;
    }
    for v in out_im.iter_mut() {
        *v *= scale;
    }
    Ok((out_re, out_im))
}

/// Unnormalized forward 2D DFT of a real plane.
pub fn fft2_real(input: &[f32], h: usize, w: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    check_dims(h, w)?;
    let mut out_re = input.to_vec();
    let mut out_im = vec![0.0f32; input.len()];
    transform_2d(&mut out_re, &mut out_im, h, w, false);
    Ok((out_re, out_im))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive 64-bit inverse DFT, the oracle for the fast path.
    fn naive_ifft2(re: &[f32], im: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut out_re = vec![0.0f64; h * w];
        let mut out_im = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc_re = 0.0f64;
                let mut acc_im = 0.0f64;
                for u in 0..h {
                    for v in 0..w {
                        let ang = 2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        let (c, s) = (ang.cos(), ang.sin());
                        let fr = re[u * w + v] as f64;
                        let fi = im[u * w + v] as f64;
                        acc_re += fr * c - fi * s;
                        acc_im += fr * s + fi * c;
                    }
                }
                out_re[y * w + x] = acc_re / (h * w) as f64;
                out_im[y * w + x] = acc_im / (h * w) as f64;
            }
        }
        (out_re, out_im)
    }

    #[test]
    fn matches_naive_dft() {
        let (h, w) = (8, 16);
        let mut seed = 0x243f6a8885a308d3u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32
        };
        let re: Vec<f32> = (0..h * w).map(|_| next()).collect();
        let im: Vec<f32> = (0..h * w).map(|_| next()).collect();
        let (fast_re, fast_im) = ifft2_complex(&re, &im, h, w).unwrap();
        let (ref_re, ref_im) = naive_ifft2(&re, &im, h, w);
        for i in 0..h * w {
            assert!((fast_re[i] as f64 - ref_re[i]).abs() < 1e-4, "re[{i}]");
            assert!((fast_im[i] as f64 - ref_im[i]).abs() < 1e-4, "im[{i}]");
        }
    }

    #[test]
    fn forward_inverse_round_trip() {
        let (h, w) = (16, 16);
        let plane: Vec<f32> = (0..h * w).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        let (sr, si) = fft2_real(&plane, h, w).unwrap();
        let (back, _) = ifft2_complex(&sr, &si, h, w).unwrap();
        for i in 0..h * w {
            assert!((back[i] - plane[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(ifft2_complex(&[0.0; 12], &[0.0; 12], 3, 4).is_err());
    }
}
