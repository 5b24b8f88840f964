//! Layer kernels for the denoiser with hand-written backward rules.
//!
//! Feature maps are `C×H×W` slices in row-major order. Convolutions are 3×3,
//! zero-padded in elevation (rows) and wrapped in azimuth (columns), since the
//! columns of a range image close into a full revolution.

/// `c = a·b + beta·c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie within the given slices;
    // every call site passes contiguous row-major buffers of exactly these sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Freshly allocated row-major `a·b`.
#[allow(clippy::too_many_arguments)]
fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 dgemm writes every element of C without reading it,
    // so the spare capacity is fully initialized before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.spare_capacity_mut().as_mut_ptr().cast::<f64>(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Unfolds 3×3 neighbourhoods into a `(c·9)×(h·w)` matrix.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = Vec::with_capacity(c * 9 * hw);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    push_shifted(src, &mut cols, kx);
                }
            }
        }
    }
    cols
}

/// Appends `src[(x + kx - 1) mod w]` for `x = 0..w`.
#[inline]
fn push_shifted(src: &[f64], dst: &mut Vec<f64>, kx: usize) {
    let w = src.len();
    match kx {
        0 => {
            dst.push(src[w - 1]);
            dst.extend_from_slice(&src[..w - 1]);
        }
        1 => dst.extend_from_slice(src),
        _ => {
            dst.extend_from_slice(&src[1..]);
            dst.push(src[0]);
        }
    }
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input map.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    add_unshifted(src, dst, kx);
                }
            }
        }
    }
    out
}

/// `dst[(x + kx - 1) mod w] += src[x]`
#[inline]
fn add_unshifted(src: &[f64], dst: &mut [f64], kx: usize) {
    let w = src.len();
    let add = |d: &mut [f64], s: &[f64]| d.iter_mut().zip(s).for_each(|(d, s)| *d += s);
    match kx {
        0 => {
            dst[w - 1] += src[0];
            add(&mut dst[..w - 1], &src[1..]);
        }
        1 => add(dst, src),
        _ => {
            add(&mut dst[1..], &src[..w - 1]);
            dst[0] += src[w - 1];
        }
    }
}

/// Offsets of a 3×3 convolution's weights (`cout×(cin·9)`) and bias in the
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn alloc(cin: usize, cout: usize, next: &mut usize) -> Self {
        let w_off = *next;
        let b_off = w_off + cout * cin * 9;
        *next = b_off + cout;
        Conv {
            cin,
            cout,
            w_off,
            b_off,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    /// Returns `(output, cols)`; `cols` is kept for the backward pass.
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let hw = h * w;
        let cols = im2col(input, self.cin, h, w);
        let mut out = Vec::with_capacity(self.cout * hw);
        for co in 0..self.cout {
            out.resize((co + 1) * hw, params[self.b_off + co]);
        }
        let k = self.cin * 9;
        gemm(
            self.cout,
            k,
            hw,
            &params[self.w_off..self.w_off + self.weight_len()],
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            1.0,
            &mut out,
        );
        (out, cols)
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the gradient with respect to the input map.
    pub fn backward(
        &self,
        params: &[f64],
        cols: &[f64],
        d_out: &[f64],
        h: usize,
        w: usize,
        grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let hw = h * w;
        let k = self.cin * 9;
        if let Some(g) = grads {
            gemm(
                self.cout,
                hw,
                k,
                d_out,
                (hw as isize, 1),
                cols,
                (1, hw as isize),
                1.0,
                &mut g[self.w_off..self.w_off + self.weight_len()],
            );
            for (co, row) in d_out.chunks_exact(hw).enumerate() {
                g[self.b_off + co] += row.iter().sum::<f64>();
            }
        }
        let d_cols = gemm_new(
            k,
            self.cout,
            hw,
            &params[self.w_off..self.w_off + self.weight_len()],
            (1, k as isize),
            d_out,
            (hw as isize, 1),
        );
        col2im(&d_cols, self.cin, h, w)
    }
}

/// Fully connected layer, weights `dout×din`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub din: usize,
    pub dout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Dense {
    pub fn alloc(din: usize, dout: usize, next: &mut usize) -> Self {
        let w_off = *next;
        let b_off = w_off + din * dout;
        *next = b_off + dout;
        Dense {
            din,
            dout,
            w_off,
            b_off,
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.dout)
            .map(|o| {
                let row = &params[self.w_off + o * self.din..][..self.din];
                params[self.b_off + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.din];
        for (o, &d) in d_out.iter().enumerate() {
            let row = &params[self.w_off + o * self.din..][..self.din];
            let grow = &mut grads[self.w_off + o * self.din..][..self.din];
            for i in 0..self.din {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
            grads[self.b_off + o] += d;
        }
        dx
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    silu_and_grad(x).1
}

/// `(silu(x), silu'(x))` from a single exponential.
#[inline]
pub(crate) fn silu_and_grad(x: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-x).exp());
    (x * s, s * (1.0 + x * (1.0 - s)))
}

/// Applies SiLU in place, returning the derivative at each input.
pub(crate) fn silu_in_place(v: &mut [f64]) -> Vec<f64> {
    v.iter_mut()
        .map(|x| {
            let (y, g) = silu_and_grad(*x);
            *x = y;
            g
        })
        .collect()
}

/// 2×2 average pooling.
pub(crate) fn avg_pool(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let base = ci * h * w + 2 * y * w + 2 * x;
                out[(ci * ho + y) * wo + x] =
                    0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]; `h, w` are the pooled input's full dimensions.
pub(crate) fn avg_pool_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut d_in = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * d_out[(ci * ho + y) * wo + x];
                let base = ci * h * w + 2 * y * w + 2 * x;
                d_in[base] = g;
                d_in[base + 1] = g;
                d_in[base + w] = g;
                d_in[base + w + 1] = g;
            }
        }
    }
    d_in
}

/// Nearest-neighbour 2× upsampling of a `c×h×w` map.
pub(crate) fn upsample(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[(ci * ho + y) * wo + x] = input[(ci * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]; `h, w` are the small map's dimensions.
pub(crate) fn upsample_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut d_in = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                d_in[(ci * h + y / 2) * w + x / 2] += d_out[(ci * ho + y) * wo + x];
            }
        }
    }
    d_in
}
