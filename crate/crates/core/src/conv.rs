//! Direct (loop) kernels for 2-D convolution and max pooling on CHW buffers.

use ndarray::{Array1, Array2};

use crate::network::{Conv, MaxPool, Shape};

/// Output length of a sliding window along one axis, `None` if the window
/// does not fit even once.
pub(crate) fn window_count(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn conv_forward(conv: &Conv, input: &[f64], shape: Shape, out: Shape) -> Array1<f64> {
    let (kh, kw) = (conv.kernel.shape()[2], conv.kernel.shape()[3]);
    let mut y = Array1::<f64>::zeros(out.numel());
    let pad = conv.padding as isize;
    for oc in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut acc = conv.bias[oc];
                for ic in 0..shape.channels {
                    for ky in 0..kh {
                        let iy = (oy * conv.stride + ky) as isize - pad;
                        if iy < 0 || iy >= shape.height as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * conv.stride + kx) as isize - pad;
                            if ix < 0 || ix >= shape.width as isize {
                                continue;
                            }
                            let src = shape.index(ic, iy as usize, ix as usize);
                            acc += conv.kernel[[oc, ic, ky, kx]] * input[src];
                        }
                    }
                }
                y[out.index(oc, oy, ox)] = acc;
            }
        }
    }
    y
}

/// Transposed convolution: pulls an output covector back to the input.
/// Returns the input covector and the bias contribution `<grad, bias>`.
pub(crate) fn conv_backward(
    conv: &Conv,
    grad: &[f64],
    shape: Shape,
    out: Shape,
) -> (Array1<f64>, f64) {
    let (kh, kw) = (conv.kernel.shape()[2], conv.kernel.shape()[3]);
    let mut g = Array1::<f64>::zeros(shape.numel());
    let mut offset = 0.0;
    let pad = conv.padding as isize;
    for oc in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let go = grad[out.index(oc, oy, ox)];
                if go == 0.0 {
                    continue;
                }
                offset += go * conv.bias[oc];
                for ic in 0..shape.channels {
                    for ky in 0..kh {
                        let iy = (oy * conv.stride + ky) as isize - pad;
                        if iy < 0 || iy >= shape.height as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * conv.stride + kx) as isize - pad;
                            if ix < 0 || ix >= shape.width as isize {
                                continue;
                            }
                            g[shape.index(ic, iy as usize, ix as usize)] +=
                                conv.kernel[[oc, ic, ky, kx]] * go;
                        }
                    }
                }
            }
        }
    }
    (g, offset)
}

/// Dense matrix equal to the linear part of `conv` on inputs of `shape`.
pub(crate) fn conv_matrix(conv: &Conv, shape: Shape, out: Shape) -> (Array2<f64>, Array1<f64>) {
    let (kh, kw) = (conv.kernel.shape()[2], conv.kernel.shape()[3]);
    let mut w = Array2::<f64>::zeros((out.numel(), shape.numel()));
    let mut b = Array1::<f64>::zeros(out.numel());
    let pad = conv.padding as isize;
    for oc in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let row = out.index(oc, oy, ox);
                b[row] = conv.bias[oc];
                for ic in 0..shape.channels {
                    for ky in 0..kh {
                        let iy = (oy * conv.stride + ky) as isize - pad;
                        if iy < 0 || iy >= shape.height as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * conv.stride + kx) as isize - pad;
                            if ix < 0 || ix >= shape.width as isize {
                                continue;
                            }
                            w[[row, shape.index(ic, iy as usize, ix as usize)]] +=
                                conv.kernel[[oc, ic, ky, kx]];
                        }
                    }
                }
            }
        }
    }
    (w, b)
}

/// Flat input indices covered by one pooling window, padding excluded,
/// in row-major order (so the first maximum found is the lowest flat index).
pub(crate) fn pool_window(
    pool: &MaxPool,
    shape: Shape,
    c: usize,
    oy: usize,
    ox: usize,
) -> Vec<usize> {
    let pad = pool.padding as isize;
    let mut idx = Vec::with_capacity(pool.kernel * pool.kernel);
    for ky in 0..pool.kernel {
        let iy = (oy * pool.stride + ky) as isize - pad;
        if iy < 0 || iy >= shape.height as isize {
            continue;
        }
        for kx in 0..pool.kernel {
            let ix = (ox * pool.stride + kx) as isize - pad;
            if ix < 0 || ix >= shape.width as isize {
                continue;
            }
            idx.push(shape.index(c, iy as usize, ix as usize));
        }
    }
    idx
}

/// Max pooling with lowest-flat-index tie breaking. Returns pooled values
/// and the winning input index per output position.
pub(crate) fn pool_forward(
    pool: &MaxPool,
    input: &[f64],
    shape: Shape,
    out: Shape,
) -> (Array1<f64>, Vec<usize>) {
    let mut y = Array1::<f64>::zeros(out.numel());
    let mut argmax = vec![0usize; out.numel()];
    for c in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let window = pool_window(pool, shape, c, oy, ox);
                let mut best = window[0];
                for &i in &window[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = out.index(c, oy, ox);
                y[o] = input[best];
                argmax[o] = best;
            }
        }
    }
    (y, argmax)
}
