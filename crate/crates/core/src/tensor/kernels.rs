use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::dim(
            "permute",
            format!("axes {axes:?} do not match rank of {shape:?}"),
        ));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::dim(
                "permute",
                format!("axes {axes:?} are not a permutation for {shape:?}"),
            ));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Returns the permuted shape and data; output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    // Innermost output axis is walked as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_step = step[last];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let runs = n / run;
    for _ in 0..runs {
        if run_step == 1 {
            out.extend_from_slice(&data[offset..offset + run]);
        } else {
            let mut o = offset;
            for _ in 0..run {
                out.push(data[o]);
                o += run_step;
            }
        }
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `c = a · b + beta · c`, where `a` is logically m×k and `b` is k×n.
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold m·k, k·n and m·n elements, and the strides
    // above address exactly those ranges for the stated layouts.
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn tanh(u: f64) -> f64 {
    // One exp instead of libm tanh; saturates cleanly for large |u|.
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// Tanh-approximated GELU and its derivative.
pub(crate) fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, d)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
