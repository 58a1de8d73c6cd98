//! Layer kernels on HWC feature maps.
//!
//! Every spatial kernel writes a rectangular window of its output so the
//! same code serves full forwards and incremental re-evaluation of a
//! locally patched input; both paths therefore round identically.

use matrixmultiply::dgemm;

/// Half-open window `[y0, y1) × [x0, x1)` of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn full(h: usize, w: usize) -> Self {
        Rect {
            y0: 0,
            x0: 0,
            y1: h,
            x1: w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.y0 >= self.y1 || self.x0 >= self.x1
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Grows by `r` on every side, clipped to `h × w`.
    pub fn dilate(&self, r: usize, h: usize, w: usize) -> Self {
        Rect {
            y0: self.y0.saturating_sub(r),
            x0: self.x0.saturating_sub(r),
            y1: (self.y1 + r).min(h),
            x1: (self.x1 + r).min(w),
        }
    }

    /// Output window of a `size`-stride pooling layer touched by `self`.
    pub fn pooled(&self, size: usize) -> Self {
        Rect {
            y0: self.y0 / size,
            x0: self.x0 / size,
            y1: self.y1.div_ceil(size),
            x1: self.x1.div_ceil(size),
        }
    }
}

/// Fixed shape of a square, stride-1, zero-padded ("same") convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    /// Patch length `k·k·cin`; weight rows are ordered `(ky, kx, ci)`.
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Gathers the receptive fields of every output position in `rect` into a
/// `[positions × patch_len]` row-major matrix.
pub(crate) fn im2col(input: &[f64], s: &ConvShape, rect: Rect, patches: &mut Vec<f64>) {
    let plen = s.patch_len();
    let pad = s.pad() as isize;
    patches.clear();
    patches.resize(rect.area() * plen, 0.0);
    let mut row = 0;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let dst = &mut patches[row * plen..(row + 1) * plen];
            for ky in 0..s.k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..s.k {
                    let ix = x as isize + kx as isize - pad;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let src = (iy as usize * s.w + ix as usize) * s.cin;
                    let off = (ky * s.k + kx) * s.cin;
                    dst[off..off + s.cin].copy_from_slice(&input[src..src + s.cin]);
                }
            }
            row += 1;
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, all row-major and contiguous.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths checked above; strides describe contiguous row-major storage.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored `[k×m]` and `b` stored `[k×n]`.
pub(crate) fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: a is k×m row-major, read through transposed strides.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = a · bᵀ` with `a` stored `[m×k]` and `b` stored `[n×k]`.
pub(crate) fn gemm_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: b is n×k row-major, read through transposed strides.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Writes conv outputs for `rect` into `out` (a full `h × w × cout` map).
/// Returns the gathered patches so training can reuse them for backprop.
pub(crate) fn conv_forward(
    input: &[f64],
    s: &ConvShape,
    weight: &[f64],
    bias: &[f64],
    rect: Rect,
    out: &mut [f64],
    patches: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
) {
    if rect.is_empty() {
        return;
    }
    im2col(input, s, rect, patches);
    let rows = rect.area();
    scratch.clear();
    for _ in 0..rows {
        scratch.extend_from_slice(bias);
    }
    gemm(rows, s.patch_len(), s.cout, patches, weight, 1.0, scratch);
    let width = (rect.x1 - rect.x0) * s.cout;
    for (r, y) in (rect.y0..rect.y1).enumerate() {
        let dst = (y * s.w + rect.x0) * s.cout;
        out[dst..dst + width].copy_from_slice(&scratch[r * width..(r + 1) * width]);
    }
}

/// Scatters patch gradients back onto the input map (`col2im`).
pub(crate) fn col2im_add(dpatches: &[f64], s: &ConvShape, dinput: &mut [f64]) {
    let plen = s.patch_len();
    let pad = s.pad() as isize;
    for y in 0..s.h {
        for x in 0..s.w {
            let row = &dpatches[(y * s.w + x) * plen..(y * s.w + x + 1) * plen];
            for ky in 0..s.k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..s.k {
                    let ix = x as isize + kx as isize - pad;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * s.w + ix as usize) * s.cin;
                    let off = (ky * s.k + kx) * s.cin;
                    for c in 0..s.cin {
                        dinput[dst + c] += row[off + c];
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_forward(input: &[f64], w: usize, c: usize, rect: Rect, out: &mut [f64]) {
    for y in rect.y0..rect.y1 {
        let start = (y * w + rect.x0) * c;
        let end = (y * w + rect.x1) * c;
        for i in start..end {
            out[i] = input[i].max(0.0);
        }
    }
}

/// Non-overlapping `size × size` mean pooling; `rect` is in output coordinates.
pub(crate) fn meanpool_forward(
    input: &[f64],
    w: usize,
    c: usize,
    size: usize,
    rect: Rect,
    out: &mut [f64],
) {
    let ow = w / size;
    let norm = 1.0 / (size * size) as f64;
    for oy in rect.y0..rect.y1 {
        for ox in rect.x0..rect.x1 {
            let dst = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += input[((oy * size + dy) * w + ox * size + dx) * c + ch];
                    }
                }
                out[dst + ch] = acc * norm;
            }
        }
    }
}

pub(crate) fn global_meanpool(input: &[f64], positions: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for p in 0..positions {
        for ch in 0..c {
            out[ch] += input[p * c + ch];
        }
    }
    let norm = 1.0 / positions as f64;
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// `y = x · W + b` with `W` stored `[in × out]`.
pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = bias.len();
    let mut out = bias.to_vec();
    for (i, &xi) in input.iter().enumerate() {
        let row = &weight[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used to cross-check the GEMM path.
    fn conv_direct(input: &[f64], s: &ConvShape, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let pad = s.pad() as isize;
        let mut out = vec![0.0; s.h * s.w * s.cout];
        for y in 0..s.h {
            for x in 0..s.w {
                for o in 0..s.cout {
                    let mut acc = bias[o];
                    for ky in 0..s.k {
                        for kx in 0..s.k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = x as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            for c in 0..s.cin {
                                let wi = ((ky * s.k + kx) * s.cin + c) * s.cout + o;
                                acc += input[(iy as usize * s.w + ix as usize) * s.cin + c]
                                    * weight[wi];
                            }
                        }
                    }
                    out[(y * s.w + x) * s.cout + o] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let s = ConvShape {
            h: 7,
            w: 5,
            cin: 3,
            cout: 4,
            k: 3,
        };
        let input = pseudo(s.h * s.w * s.cin, 1);
        let weight = pseudo(s.patch_len() * s.cout, 2);
        let bias = pseudo(s.cout, 3);
        let mut out = vec![0.0; s.h * s.w * s.cout];
        conv_forward(
            &input,
            &s,
            &weight,
            &bias,
            Rect::full(s.h, s.w),
            &mut out,
            &mut Vec::new(),
            &mut Vec::new(),
        );
        let reference = conv_direct(&input, &s, &weight, &bias);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_conv_is_bit_identical_to_full() {
        let s = ConvShape {
            h: 16,
            w: 16,
            cin: 16,
            cout: 32,
            k: 3,
        };
        let input = pseudo(s.h * s.w * s.cin, 4);
        let weight = pseudo(s.patch_len() * s.cout, 5);
        let bias = pseudo(s.cout, 6);
        let mut full = vec![0.0; s.h * s.w * s.cout];
        conv_forward(
            &input,
            &s,
            &weight,
            &bias,
            Rect::full(s.h, s.w),
            &mut full,
            &mut Vec::new(),
            &mut Vec::new(),
        );
        for rect in [
            Rect {
                y0: 0,
                x0: 0,
                y1: 3,
                x1: 4,
            },
            Rect {
                y0: 5,
                x0: 7,
                y1: 11,
                x1: 12,
            },
            Rect {
                y0: 13,
                x0: 1,
                y1: 16,
                x1: 2,
            },
        ] {
            let mut part = vec![f64::NAN; full.len()];
            conv_forward(
                &input,
                &s,
                &weight,
                &bias,
                rect,
                &mut part,
                &mut Vec::new(),
                &mut Vec::new(),
            );
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for o in 0..s.cout {
                        let i = (y * s.w + x) * s.cout + o;
                        assert_eq!(part[i].to_bits(), full[i].to_bits(), "at {y},{x},{o}");
                    }
                }
            }
        }
    }

    #[test]
    fn rect_helpers() {
        let r = Rect {
            y0: 1,
            x0: 4,
            y1: 3,
            x1: 9,
        };
        assert_eq!(
            r.dilate(1, 4, 9),
            Rect {
                y0: 0,
                x0: 3,
                y1: 4,
                x1: 9
            }
        );
        assert_eq!(
            r.pooled(2),
            Rect {
                y0: 0,
                x0: 2,
                y1: 2,
                x1: 5
            }
        );
        assert_eq!(r.area(), 10);
    }
}
