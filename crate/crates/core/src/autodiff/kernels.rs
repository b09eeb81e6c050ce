//! Per-sample compute kernels. Every function here works on one sample's
//! buffers so that results never depend on which other samples share a batch.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input extent; out-of-range taps read the nearest edge pixel.
    Same,
    /// Output shrinks by two in each spatial axis.
    Valid,
}

impl Padding {
    pub fn output_extent(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Padding::Same => (h, w),
            Padding::Valid => (h - 2, w - 2),
        }
    }
}

#[inline]
fn tap_index(
    pad: Padding,
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    ky: usize,
    kx: usize,
) -> usize {
    match pad {
        Padding::Valid => (y + ky) * w + (x + kx),
        Padding::Same => {
            let sy = (y + ky).saturating_sub(1).min(h - 1);
            let sx = (x + kx).saturating_sub(1).min(w - 1);
            sy * w + sx
        }
    }
}

/// Unfolds a `c x h x w` sample into a `(c*9) x (ho*wo)` patch matrix.
pub fn im2col3<S: Scalar>(input: &[S], c: usize, h: usize, w: usize, pad: Padding, cols: &mut [S]) {
    let (ho, _) = pad.output_extent(h, w);
    im2col3_rows(input, c, h, w, pad, 0..ho, cols);
}

/// [`im2col3`] restricted to output rows `rows`: a `(c*9) x (len(rows)*wo)`
/// patch matrix.
pub fn im2col3_rows<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    pad: Padding,
    rows: std::ops::Range<usize>,
    cols: &mut [S],
) {
    let (_, wo) = pad.output_extent(h, w);
    let plane = rows.len() * wo;
    for ci in 0..c {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                for (r, y) in rows.clone().enumerate() {
                    let out = &mut row[r * wo..(r + 1) * wo];
                    match pad {
                        Padding::Valid => {
                            let s = (y + ky) * w + kx;
                            out.copy_from_slice(&src[s..s + wo]);
                        }
                        Padding::Same => {
                            let sy = (y + ky).saturating_sub(1).min(h - 1);
                            let line = &src[sy * w..(sy + 1) * w];
                            match kx {
                                0 => {
                                    out[0] = line[0];
                                    out[1..].copy_from_slice(&line[..w - 1]);
                                }
                                1 => out.copy_from_slice(line),
                                _ => {
                                    out[..w - 1].copy_from_slice(&line[1..]);
                                    out[w - 1] = line[w - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Patch-matrix budget (elements) of one forward convolution band.
const CONV_BAND_ELEMS: usize = 1 << 15;

/// 3x3 convolution of `[b,cin,h,w]` data with a `[cout,cin,3,3]` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward<S: Scalar>(
    x: &[S],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[S],
    cout: usize,
    pad: Padding,
) -> Vec<S> {
    let (ho, wo) = pad.output_extent(h, w);
    let plane = ho * wo;
    let mut out = vec![S::zero(); b * cout * plane];
    // unfold a few output rows at a time so the patch matrix stays in cache
    let band = (CONV_BAND_ELEMS / (cin * 9 * wo)).clamp(1, ho);
    let mut cols = vec![S::zero(); cin * 9 * band * wo];
    for s in 0..b {
        let sample = &x[s * cin * h * w..];
        let dst = &mut out[s * cout * plane..(s + 1) * cout * plane];
        for y0 in (0..ho).step_by(band) {
            let y1 = (y0 + band).min(ho);
            let n = (y1 - y0) * wo;
            im2col3_rows(sample, cin, h, w, pad, y0..y1, &mut cols);
            S::gemm_ldc(
                cout,
                cin * 9,
                n,
                S::one(),
                kernel,
                false,
                &cols[..cin * 9 * n],
                false,
                S::zero(),
                &mut dst[y0 * wo..],
                plane,
            );
        }
    }
    out
}

/// Per-pixel channel mixing of `[b,cin,plane]` data with a `[cout,cin]` weight.
pub fn conv1x1_forward<S: Scalar>(
    x: &[S],
    b: usize,
    cin: usize,
    plane: usize,
    weight: &[S],
    cout: usize,
    bias: Option<&[S]>,
) -> Vec<S> {
    let mut out = vec![S::zero(); b * cout * plane];
    for s in 0..b {
        let dst = &mut out[s * cout * plane..(s + 1) * cout * plane];
        S::gemm(
            cout,
            cin,
            plane,
            S::one(),
            weight,
            false,
            &x[s * cin * plane..],
            false,
            S::zero(),
            dst,
        );
        if let Some(bv) = bias {
            for co in 0..cout {
                for v in &mut dst[co * plane..(co + 1) * plane] {
                    *v += bv[co];
                }
            }
        }
    }
    out
}

/// `[b,fin]` times the transpose of a `[fout,fin]` weight, plus bias.
pub fn dense_forward<S: Scalar>(
    x: &[S],
    b: usize,
    fin: usize,
    weight: &[S],
    fout: usize,
    bias: Option<&[S]>,
) -> Vec<S> {
    let mut out = vec![S::zero(); b * fout];
    for s in 0..b {
        let dst = &mut out[s * fout..(s + 1) * fout];
        S::gemm(
            fout,
            fin,
            1,
            S::one(),
            weight,
            false,
            &x[s * fin..(s + 1) * fin],
            false,
            S::zero(),
            dst,
        );
        if let Some(bv) = bias {
            for (v, &c) in dst.iter_mut().zip(bv) {
                *v += c;
            }
        }
    }
    out
}

/// [`upsample2x`] over a batch of `b` samples.
pub fn upsample2x_batch<S: Scalar>(x: &[S], b: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let mut out = vec![S::zero(); b * c * 4 * h * w];
    for s in 0..b {
        upsample2x(&x[s * c * h * w..], c, h, w, &mut out[s * c * 4 * h * w..]);
    }
    out
}

#[inline]
pub fn relu<S: Scalar>(v: S) -> S {
    v.max(S::zero())
}

#[inline]
pub fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the sample.
pub fn col2im3_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    pad: Padding,
    dinput: &mut [S],
) {
    let (ho, wo) = pad.output_extent(h, w);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..ho {
                    for x in 0..wo {
                        dst[tap_index(pad, h, w, y, x, ky, kx)] += row[y * wo + x];
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` sample.
pub fn upsample2x<S: Scalar>(input: &[S], c: usize, h: usize, w: usize, out: &mut [S]) {
    let w2 = 2 * w;
    for ci in 0..c {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let top = 2 * y * w2 + 2 * x;
                dst[top] = v;
                dst[top + 1] = v;
                dst[top + w2] = v;
                dst[top + w2 + 1] = v;
            }
        }
    }
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward<S: Scalar>(dout: &[S], c: usize, h: usize, w: usize, din: &mut [S]) {
    let w2 = 2 * w;
    for ci in 0..c {
        let src = &dout[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        let dst = &mut din[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let top = 2 * y * w2 + 2 * x;
                dst[y * w + x] += (src[top] + src[top + 1]) + (src[top + w2] + src[top + w2 + 1]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_replicates_edges() {
        // tap (0,0) reads the up-left neighbour, which clamps to pixel (0,0)
        // for every output position of a 2x2 input
        let input = [1.0f64, 2.0, 3.0, 4.0];
        let mut cols = vec![0.0; 9 * 4];
        im2col3(&input, 1, 2, 2, Padding::Same, &mut cols);
        assert_eq!(&cols[0..4], &[1.0, 1.0, 1.0, 1.0]);
        // tap (2,2) reads the down-right neighbour
        assert_eq!(&cols[8 * 4..9 * 4], &[4.0, 4.0, 4.0, 4.0]);
        // tap (1,2) reads the right neighbour
        assert_eq!(&cols[5 * 4..6 * 4], &[2.0, 2.0, 4.0, 4.0]);
        // centre tap reproduces the input
        assert_eq!(&cols[4 * 4..5 * 4], &input);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        for pad in [Padding::Same, Padding::Valid] {
            let (ho, wo) = pad.output_extent(h, w);
            let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut cols = vec![0.0; c * 9 * ho * wo];
            im2col3(&x, c, h, w, pad, &mut cols);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; c * h * w];
            col2im3_add(&y, c, h, w, pad, &mut back);
            let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
