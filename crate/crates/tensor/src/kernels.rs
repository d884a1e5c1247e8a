//! Raw slice kernels shared by the tape operations.

use crate::real::Real;

/// `c = a[m×k] · b[k×n]`, all row-major.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    F::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, F::zero(), &mut c, n as isize, 1);
    c
}

/// `c += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    F::gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, F::one(), c, n as isize, 1);
}

/// `c += a · bᵀ` where `a` is `[m×k]` and `b` is stored `[n×k]`.
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    F::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, F::one(), c, n as isize, 1);
}

const LANES: usize = 8;

/// Sum with independent accumulator lanes so the loop vectorizes.
#[inline]
pub fn lane_sum<F: Real>(xs: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    acc.iter().copied().sum::<F>() + tail.iter().copied().sum::<F>()
}

/// `Σ a·b` with independent accumulator lanes.
#[inline]
pub fn lane_dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<F>() + tail
}

/// `Σ (x − mu)²` with independent accumulator lanes.
#[inline]
pub fn lane_sq_dev<F: Real>(xs: &[F], mu: F) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: F = chunks.remainder().iter().map(|&x| (x - mu) * (x - mu)).sum();
    for c in chunks {
        for l in 0..LANES {
            let d = c[l] - mu;
            acc[l] += d * d;
        }
    }
    acc.iter().copied().sum::<F>() + tail
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let grown = (input as isize - 1) * stride as isize + kernel as isize - 2 * padding as isize;
    (grown > 0).then_some(grown as usize)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output pixel hit by input pixel `(i, j)` under kernel tap `(ki, kj)`.
    #[inline]
    fn target(&self, i: usize, j: usize, ki: usize, kj: usize) -> Option<usize> {
        let oy = (i * self.stride + ki) as isize - self.padding as isize;
        let ox = (j * self.stride + kj) as isize - self.padding as isize;
        if oy < 0 || ox < 0 || oy >= self.out_h as isize || ox >= self.out_w as isize {
            return None;
        }
        Some(oy as usize * self.out_w + ox as usize)
    }

    /// Scatter columns `[c_out·k·k × h·w]` into an output plane stack `[c_out × h′·w′]`.
    pub fn col2im<F: Real>(&self, cols: &[F], c_out: usize, out: &mut [F]) {
        let k = self.kernel;
        let hw = self.in_h * self.in_w;
        let ohw = self.out_h * self.out_w;
        for co in 0..c_out {
            let plane = &mut out[co * ohw..(co + 1) * ohw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((co * k + ki) * k + kj) * hw..][..hw];
                    for i in 0..self.in_h {
                        for j in 0..self.in_w {
                            if let Some(t) = self.target(i, j, ki, kj) {
                                plane[t] += row[i * self.in_w + j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`col2im`](Self::col2im): gathers output gradients back into columns.
    pub fn im2col<F: Real>(&self, grad_out: &[F], c_out: usize) -> Vec<F> {
        let k = self.kernel;
        let hw = self.in_h * self.in_w;
        let ohw = self.out_h * self.out_w;
        let mut cols = vec![F::zero(); c_out * k * k * hw];
        for co in 0..c_out {
            let plane = &grad_out[co * ohw..(co + 1) * ohw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((co * k + ki) * k + kj) * hw..][..hw];
                    for i in 0..self.in_h {
                        for j in 0..self.in_w {
                            if let Some(t) = self.target(i, j, ki, kj) {
                                row[i * self.in_w + j] = plane[t];
                            }
                        }
                    }
                }
            }
        }
        cols
    }
}

/// One output coordinate of an align-corners linear resampling: the two
/// source taps and the weight of the upper tap.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Align-corners taps: output `t` samples input coordinate `t·(in−1)/(out−1)`.
pub fn linear_taps(input: usize, output: usize) -> Vec<Tap> {
    (0..output)
        .map(|t| {
            if input == 1 || output == 1 {
                return Tap { lo: 0, hi: 0, frac: 0.0 };
            }
            let num = t * (input - 1);
            let den = output - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 || lo + 1 >= input {
                Tap { lo, hi: lo, frac: 0.0 }
            } else {
                Tap {
                    lo,
                    hi: lo + 1,
                    frac: rem as f64 / den as f64,
                }
            }
        })
        .collect()
}

/// Index of the nearest point of `to` for every point of `from` (both `[n×3]`
/// flattened). Ties resolve to the lowest index. Returns (index, squared distance).
pub fn nearest_neighbors<F: Real>(from: &[F], to: &[F]) -> Vec<(usize, F)> {
    from.chunks_exact(3)
        .map(|p| {
            let mut best = (0usize, F::infinity());
            for (j, q) in to.chunks_exact(3).enumerate() {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_reproduce_identity() {
        for n in 1..6 {
            for (t, tap) in linear_taps(n, n).iter().enumerate() {
                assert_eq!((tap.lo, tap.frac), (t, 0.0));
            }
        }
    }

    #[test]
    fn extents_follow_formula() {
        assert_eq!(conv_transpose_extent(2, 4, 2, 1), Some(4));
        assert_eq!(conv_transpose_extent(1, 2, 2, 0), Some(2));
        assert_eq!(conv_transpose_extent(4, 3, 1, 1), Some(4));
        assert_eq!(conv_transpose_extent(1, 1, 1, 1), None);
    }
}
