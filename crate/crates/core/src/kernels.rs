//! Raw numeric kernels behind the differentiable ops.

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= last(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let patch = g.patch_len();
    let positions = g.out_positions();
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.filters * positions;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut cols = vec![0.0; patch * positions];
    for n in 0..g.batch {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        for (f, row) in dst.chunks_mut(positions).enumerate() {
            row.fill(bias[f]);
        }
        gemm(
            g.filters,
            patch,
            positions,
            1.0,
            weight,
            (patch, 1),
            &cols,
            (positions, 1),
            1.0,
            dst,
        );
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> ConvGrads {
    let patch = g.patch_len();
    let positions = g.out_positions();
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.filters * positions;
    let mut grads = ConvGrads {
        input: vec![0.0; input.len()],
        weight: vec![0.0; weight.len()],
        bias: vec![0.0; g.filters],
    };
    let mut cols = vec![0.0; patch * positions];
    let mut dcols = vec![0.0; patch * positions];
    for n in 0..g.batch {
        let dout = &grad_out[n * out_stride..(n + 1) * out_stride];
        for (f, row) in dout.chunks(positions).enumerate() {
            grads.bias[f] += row.iter().sum::<f64>();
        }
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
        // dW[F, patch] += dout[F, P] * cols^T[P, patch]
        gemm(
            g.filters,
            positions,
            patch,
            1.0,
            dout,
            (positions, 1),
            &cols,
            (1, positions),
            1.0,
            &mut grads.weight,
        );
        // dcols[patch, P] = W^T[patch, F] * dout[F, P]
        gemm(
            patch,
            g.filters,
            positions,
            1.0,
            weight,
            (1, patch),
            dout,
            (positions, 1),
            0.0,
            &mut dcols,
        );
        col2im_add(g, &dcols, &mut grads.input[n * in_stride..(n + 1) * in_stride]);
    }
    grads
}

/// Non-overlapping max pooling with window and stride `k`; returns values and
/// the flat input index of every maximum (first maximum wins).
pub fn max_pool_forward(
    input: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / k, width / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * width + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * width + ox * k + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}
