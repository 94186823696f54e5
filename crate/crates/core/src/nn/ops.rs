//! Dense and convolutional layer primitives with hand-written backward
//! passes. All maps are flat `[n][c][h][w]` f64 buffers.

/// Pointwise nonlinearity applied after every backbone layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// x * sigmoid(x); smooth everywhere, which keeps finite-difference
    /// gradient checks meaningful.
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    a
                } else {
                    0.0
                }
            }
            Activation::Silu => a / (1.0 + (-a).exp()),
        }
    }

    /// Derivative at pre-activation `a`.
    #[inline]
    pub fn deriv(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 + a * (1.0 - s))
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
/// Weight layout `[oc][ic][ky][kx]`, one bias per output channel.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward(
    input: &[f64],
    output: &mut [f64],
    weights: &[f64],
    bias: &[f64],
    n: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for ni in 0..n {
        let in_base = ni * in_c * plane;
        let out_base = ni * out_c * plane;
        for oc in 0..out_c {
            let out_plane = &mut output[out_base + oc * plane..out_base + (oc + 1) * plane];
            out_plane.fill(bias[oc]);
            for ic in 0..in_c {
                let in_plane = &input[in_base + ic * plane..in_base + (ic + 1) * plane];
                let w_base = ((oc * in_c) + ic) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let wv = weights[w_base + ky * 3 + kx];
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        for y in y0..y1 {
                            let src_row = ((y as isize + dy) as usize) * w;
                            let dst_row = y * w;
                            let src =
                                &in_plane[src_row + (x0 as isize + dx) as usize..];
                            let dst = &mut out_plane[dst_row + x0..dst_row + x1];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass for [`conv3x3_forward`].
///
/// Accumulates into `d_weights`/`d_bias`; `d_input` (when given) is
/// overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    d_output: &[f64],
    weights: &[f64],
    d_input: Option<&mut [f64]>,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    n: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for ni in 0..n {
        let in_base = ni * in_c * plane;
        let out_base = ni * out_c * plane;
        for oc in 0..out_c {
            let d_out_plane = &d_output[out_base + oc * plane..out_base + (oc + 1) * plane];
            d_bias[oc] += d_out_plane.iter().sum::<f64>();
            for ic in 0..in_c {
                let in_plane = &input[in_base + ic * plane..in_base + (ic + 1) * plane];
                let w_base = ((oc * in_c) + ic) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src_row = ((y as isize + dy) as usize) * w;
                            let dst_row = y * w;
                            let src = &in_plane[src_row + (x0 as isize + dx) as usize..];
                            let dst = &d_out_plane[dst_row + x0..dst_row + x1];
                            for (d, s) in dst.iter().zip(src.iter()) {
                                acc += d * s;
                            }
                        }
                        d_weights[w_base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(d_input) = d_input {
        d_input.fill(0.0);
        for ni in 0..n {
            let in_base = ni * in_c * plane;
            let out_base = ni * out_c * plane;
            for oc in 0..out_c {
                let d_out_plane = &d_output[out_base + oc * plane..out_base + (oc + 1) * plane];
                for ic in 0..in_c {
                    let d_in_plane =
                        &mut d_input[in_base + ic * plane..in_base + (ic + 1) * plane];
                    let w_base = ((oc * in_c) + ic) * 9;
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        for kx in 0..3usize {
                            let dx = kx as isize - 1;
                            let wv = weights[w_base + ky * 3 + kx];
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ((h as isize - dy).min(h as isize)) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = ((w as isize - dx).min(w as isize)) as usize;
                            for y in y0..y1 {
                                let src_row = y * w;
                                let dst_row = ((y as isize + dy) as usize) * w
                                    + (x0 as isize + dx) as usize;
                                let src = &d_out_plane[src_row + x0..src_row + x1];
                                let dst = &mut d_in_plane[dst_row..dst_row + (x1 - x0)];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1x1 convolution (per-pixel linear map across channels).
#[allow(clippy::too_many_arguments)]
pub fn conv1x1_forward(
    input: &[f64],
    output: &mut [f64],
    weights: &[f64],
    bias: &[f64],
    n: usize,
    in_c: usize,
    out_c: usize,
    plane: usize,
) {
    for ni in 0..n {
        let in_base = ni * in_c * plane;
        let out_base = ni * out_c * plane;
        for oc in 0..out_c {
            let out_plane = &mut output[out_base + oc * plane..out_base + (oc + 1) * plane];
            out_plane.fill(bias[oc]);
            for ic in 0..in_c {
                let wv = weights[oc * in_c + ic];
                let in_plane = &input[in_base + ic * plane..in_base + (ic + 1) * plane];
                for (d, s) in out_plane.iter_mut().zip(in_plane.iter()) {
                    *d += wv * s;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1x1_backward(
    input: &[f64],
    d_output: &[f64],
    weights: &[f64],
    d_input: &mut [f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    n: usize,
    in_c: usize,
    out_c: usize,
    plane: usize,
) {
    d_input.fill(0.0);
    for ni in 0..n {
        let in_base = ni * in_c * plane;
        let out_base = ni * out_c * plane;
        for oc in 0..out_c {
            let d_out_plane = &d_output[out_base + oc * plane..out_base + (oc + 1) * plane];
            d_bias[oc] += d_out_plane.iter().sum::<f64>();
            for ic in 0..in_c {
                let in_plane = &input[in_base + ic * plane..in_base + (ic + 1) * plane];
                let d_in_plane = &mut d_input[in_base + ic * plane..in_base + (ic + 1) * plane];
                let wv = weights[oc * in_c + ic];
                let mut acc = 0.0;
                for ((di, s), d) in d_in_plane
                    .iter_mut()
                    .zip(in_plane.iter())
                    .zip(d_out_plane.iter())
                {
                    acc += d * s;
                    *di += wv * d;
                }
                d_weights[oc * in_c + ic] += acc;
            }
        }
    }
}

/// 2x2 average pooling, stride 2.
pub fn avgpool2_forward(input: &[f64], output: &mut [f64], nc: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let ip = &input[p * h * w..(p + 1) * h * w];
        let op = &mut output[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let r0 = 2 * y * w + 2 * x;
                let r1 = r0 + w;
                op[y * ow + x] = 0.25 * (ip[r0] + ip[r0 + 1] + ip[r1] + ip[r1 + 1]);
            }
        }
    }
}

pub fn avgpool2_backward(d_output: &[f64], d_input: &mut [f64], nc: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let dop = &d_output[p * oh * ow..(p + 1) * oh * ow];
        let dip = &mut d_input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * dop[y * ow + x];
                let r0 = 2 * y * w + 2 * x;
                let r1 = r0 + w;
                dip[r0] = g;
                dip[r0 + 1] = g;
                dip[r1] = g;
                dip[r1 + 1] = g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &[f64], output: &mut [f64], nc: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..nc {
        let ip = &input[p * h * w..(p + 1) * h * w];
        let op = &mut output[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = ip[y * w + x];
                let r0 = 2 * y * ow + 2 * x;
                let r1 = r0 + ow;
                op[r0] = v;
                op[r0 + 1] = v;
                op[r1] = v;
                op[r1 + 1] = v;
            }
        }
    }
}

pub fn upsample2_backward(d_output: &[f64], d_input: &mut [f64], nc: usize, h: usize, w: usize) {
    let ow = 2 * w;
    for p in 0..nc {
        let dop = &d_output[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dip = &mut d_input[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let r0 = 2 * y * ow + 2 * x;
                let r1 = r0 + ow;
                dip[y * w + x] = dop[r0] + dop[r0 + 1] + dop[r1] + dop[r1 + 1];
            }
        }
    }
}

/// Fully connected layer, weights `[out][in]`, one bias per output.
pub fn dense_forward(
    input: &[f64],
    output: &mut [f64],
    weights: &[f64],
    bias: &[f64],
    n: usize,
    in_d: usize,
    out_d: usize,
) {
    for ni in 0..n {
        let x = &input[ni * in_d..(ni + 1) * in_d];
        let out = &mut output[ni * out_d..(ni + 1) * out_d];
        for (o, outv) in out.iter_mut().enumerate() {
            let row = &weights[o * in_d..(o + 1) * in_d];
            let mut acc = bias[o];
            for (wv, xv) in row.iter().zip(x.iter()) {
                acc += wv * xv;
            }
            *outv = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    input: &[f64],
    d_output: &[f64],
    weights: &[f64],
    d_input: Option<&mut [f64]>,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    n: usize,
    in_d: usize,
    out_d: usize,
) {
    for ni in 0..n {
        let x = &input[ni * in_d..(ni + 1) * in_d];
        let dout = &d_output[ni * out_d..(ni + 1) * out_d];
        for (o, &g) in dout.iter().enumerate() {
            d_bias[o] += g;
            let row = &mut d_weights[o * in_d..(o + 1) * in_d];
            for (dw, xv) in row.iter_mut().zip(x.iter()) {
                *dw += g * xv;
            }
        }
    }
    if let Some(d_input) = d_input {
        d_input.fill(0.0);
        for ni in 0..n {
            let din = &mut d_input[ni * in_d..(ni + 1) * in_d];
            let dout = &d_output[ni * out_d..(ni + 1) * out_d];
            for (o, &g) in dout.iter().enumerate() {
                let row = &weights[o * in_d..(o + 1) * in_d];
                for (di, wv) in din.iter_mut().zip(row.iter()) {
                    *di += g * wv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv3x3_identity_kernel() {
        // Kernel with 1.0 at the center copies the input.
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut weights = vec![0.0; 9];
        weights[4] = 1.0;
        let mut out = vec![0.0; 16];
        conv3x3_forward(&input, &mut out, &weights, &[0.0], 1, 1, 1, 4, 4);
        assert_eq!(out, input);
    }

    #[test]
    fn conv3x3_padding_edges() {
        // All-ones 2x2 input with an all-ones kernel: corner output sums the
        // 2x2 in-bounds neighbourhood.
        let input = vec![1.0; 4];
        let weights = vec![1.0; 9];
        let mut out = vec![0.0; 4];
        conv3x3_forward(&input, &mut out, &weights, &[0.0], 1, 1, 1, 2, 2);
        assert_eq!(out, vec![4.0; 4]);
    }

    #[test]
    fn avgpool_and_upsample_roundtrip_shape() {
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut pooled = vec![0.0; 4];
        avgpool2_forward(&input, &mut pooled, 1, 4, 4);
        assert_eq!(pooled, vec![2.5, 4.5, 10.5, 12.5]);
        let mut up = vec![0.0; 16];
        upsample2_forward(&pooled, &mut up, 1, 2, 2);
        assert_eq!(up[0], 2.5);
        assert_eq!(up[1], 2.5);
        assert_eq!(up[5], 2.5);
        assert_eq!(up[15], 12.5);
    }

    #[test]
    fn dense_matches_hand_computation() {
        // y = W x + b with W = [[1,2],[3,4]], b = [0.5, -0.5], x = [1, -1]
        let weights = vec![1.0, 2.0, 3.0, 4.0];
        let bias = vec![0.5, -0.5];
        let mut out = vec![0.0; 2];
        dense_forward(&[1.0, -1.0], &mut out, &weights, &bias, 1, 2, 2);
        assert_eq!(out, vec![-0.5, -1.5]);
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        let h = 1e-6;
        for &a in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (Activation::Silu.apply(a + h) - Activation::Silu.apply(a - h)) / (2.0 * h);
            assert!((Activation::Silu.deriv(a) - fd).abs() < 1e-8);
        }
    }
}
