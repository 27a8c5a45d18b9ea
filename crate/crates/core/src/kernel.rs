//! Spatial interaction kernels and discrete convolution.
//!
//! Solvers work with the even one-dimensional marginal K₀. A [`Kernel`] is
//! sampled on a grid into a [`SampledKernel`] whose weights sum to one, and
//! convolution is carried out either by a direct sum or by zero-padded FFT.

use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};
use crate::io::read_two_column_csv;

/// Kernel mass allowed outside the truncation radius.
pub const DEFAULT_EPS: f64 = 1e-10;

/// Relative tail contribution beyond a tabulated kernel's last abscissa
/// above which its MGF is reported as divergent.
const TABULATED_TAIL_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    Gaussian { sigma: f64 },
    Laplace { b: f64 },
    /// Even kernel given for z ≥ 0 on a strictly increasing grid starting at 0.
    TabulatedEven { z: Vec<f64>, k0: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Kernel {
    family: KernelFamily,
    lambda: f64,
    lambda_estimated: bool,
    radius: f64,
}

impl Kernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("gaussian sigma must be positive, got {sigma}")));
        }
        Ok(Kernel {
            family: KernelFamily::Gaussian { sigma },
            lambda: f64::INFINITY,
            lambda_estimated: false,
            radius: gaussian_radius(sigma, DEFAULT_EPS),
        })
    }

    pub fn laplace(b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(invalid(format!("laplace scale must be positive, got {b}")));
        }
        Ok(Kernel {
            family: KernelFamily::Laplace { b },
            lambda: 1.0 / b,
            lambda_estimated: false,
            radius: -b * DEFAULT_EPS.ln(),
        })
    }

    /// Tabulated even kernel from samples of K₀ on `z ≥ 0`. The table is
    /// renormalised to unit mass (with a warning when it is off by more than
    /// 1e-3). Kernels that vanish somewhere are rejected: the model needs a
    /// strictly positive kernel.
    pub fn tabulated_even(z: Vec<f64>, k0: Vec<f64>) -> Result<Self> {
        if z.len() != k0.len() || z.len() < 4 {
            return Err(invalid("tabulated kernel needs at least four (z, K0) rows"));
        }
        crate::io::check_increasing(&z, "tabulated kernel")?;
        if z[0] != 0.0 {
            return Err(invalid("tabulated kernel must start at z = 0"));
        }
        if k0.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid(
                "tabulated kernel must be strictly positive on its range; \
                 compactly supported kernels are not admissible",
            ));
        }
        let mut mass = 0.0;
        for k in 1..z.len() {
            mass += (z[k] - z[k - 1]) * (k0[k] + k0[k - 1]);
        }
        if (mass - 1.0).abs() > 1e-3 {
            log::warn!("tabulated kernel has mass {mass}; rescaling to 1");
        }
        let k0: Vec<f64> = k0.iter().map(|v| v / mass).collect();
        let (lambda, radius) = (tail_abscissa(&z, &k0), *z.last().unwrap());
        Ok(Kernel {
            family: KernelFamily::TabulatedEven { z, k0 },
            lambda,
            lambda_estimated: true,
            radius,
        })
    }

    pub fn tabulated_from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (z, k0) = read_two_column_csv(path)?;
        Kernel::tabulated_even(z, k0)
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    /// Λ = sup{μ ≥ 0 : K̃(μ) < ∞}.
    pub fn lambda_abscissa(&self) -> f64 {
        self.lambda
    }

    /// Whether Λ was estimated from tabulated data.
    pub fn lambda_is_estimated(&self) -> bool {
        self.lambda_estimated
    }

    /// Radius outside of which the kernel mass is below 1e-10.
    pub fn support_radius(&self) -> f64 {
        self.radius
    }

    /// The marginal density K₀(z).
    pub fn k0(&self, z: f64) -> f64 {
        let z = z.abs();
        match &self.family {
            KernelFamily::Gaussian { sigma } => {
                (-0.5 * (z / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            KernelFamily::Laplace { b } => (-z / b).exp() / (2.0 * b),
            KernelFamily::TabulatedEven { z: zs, k0 } => {
                if z > *zs.last().unwrap() {
                    0.0
                } else {
                    crate::numerics::interp_linear(zs, k0, z)
                }
            }
        }
    }

    /// K̃(μ) = ∫K₀(z)e^{μz}dz, or `None` when it diverges.
    pub fn mgf(&self, mu: f64) -> Option<f64> {
        let m = mu.abs();
        if m >= self.lambda {
            return None;
        }
        match &self.family {
            KernelFamily::Gaussian { sigma } => Some((0.5 * (sigma * mu).powi(2)).exp()),
            KernelFamily::Laplace { b } => Some(1.0 / (1.0 - (b * mu).powi(2))),
            KernelFamily::TabulatedEven { z, k0 } => {
                // 2∫₀^∞ K₀ cosh(μz) dz, trapezoid on the table.
                let mut acc = 0.0;
                for k in 1..z.len() {
                    let a = k0[k - 1] * (m * z[k - 1]).cosh();
                    let b = k0[k] * (m * z[k]).cosh();
                    acc += (z[k] - z[k - 1]) * (a + b);
                }
                let zl = *z.last().unwrap();
                let tail = if self.lambda.is_finite() {
                    k0.last().unwrap() * (m * zl).exp() / (self.lambda - m)
                } else {
                    0.0
                };
                if tail > TABULATED_TAIL_THRESHOLD * acc {
                    None
                } else {
                    Some(acc)
                }
            }
        }
    }

    /// Derivatives `(K̃, K̃', K̃'')` at μ where finite.
    pub fn mgf_with_derivatives(&self, mu: f64) -> Option<(f64, f64, f64)> {
        match &self.family {
            KernelFamily::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                let v = self.mgf(mu)?;
                Some((v, s2 * mu * v, (s2 + s2 * s2 * mu * mu) * v))
            }
            KernelFamily::Laplace { b } => {
                let v = self.mgf(mu)?;
                let b2 = b * b;
                let d = 1.0 - b2 * mu * mu;
                Some((v, 2.0 * b2 * mu / (d * d), 2.0 * b2 * (1.0 + 3.0 * b2 * mu * mu) / (d * d * d)))
            }
            KernelFamily::TabulatedEven { .. } => {
                let h = 1e-4 * (1.0 + mu.abs());
                let (a, v, c) = (self.mgf(mu - h)?, self.mgf(mu)?, self.mgf(mu + h)?);
                Some((v, (c - a) / (2.0 * h), (c - 2.0 * v + a) / (h * h)))
            }
        }
    }

    /// Sample K₀ on a grid of spacing `dx` out to the truncation radius and
    /// normalise the weights to unit sum.
    pub fn sample(&self, dx: f64) -> Result<SampledKernel> {
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(invalid(format!("grid step must be positive, got {dx}")));
        }
        let half = (self.radius / dx).ceil() as usize;
        let mut w: Vec<f64> = (0..=half).map(|j| self.k0(j as f64 * dx) * dx).collect();
        let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
        if !(total > 0.0) {
            return Err(invalid("kernel sampling produced zero mass"));
        }
        for v in &mut w {
            *v /= total;
        }
        Ok(SampledKernel { dx, half: w })
    }
}

fn gaussian_radius(sigma: f64, eps: f64) -> f64 {
    // Two-sided tail mass erfc(r/(σ√2)) ≤ eps; Mills-ratio bound.
    let mut r = 1.0;
    while (2.0 / std::f64::consts::PI).sqrt() / r * (-0.5 * r * r).exp() > eps {
        r += 0.01;
    }
    r * sigma
}

/// Estimate Λ from the last tenth of a tabulated kernel: the fitted slope of
/// log K₀, or +∞ when the slope steepens across the window (super-exponential
/// tail).
fn tail_abscissa(z: &[f64], k0: &[f64]) -> f64 {
    let n = z.len();
    let m = (n / 10).max(4).min(n - 1);
    let xs = &z[n - m..];
    let ys: Vec<f64> = k0[n - m..].iter().map(|v| v.ln()).collect();
    let half = m / 2;
    let slope = |a: usize, b: usize| (ys[b] - ys[a]) / (xs[b] - xs[a]);
    let s1 = slope(0, half);
    let s2 = slope(half, m - 1);
    if s2 < s1 * 1.01 && s2 < 0.0 && (s2 - s1).abs() > 0.01 * s1.abs() {
        return f64::INFINITY;
    }
    match crate::numerics::fit_line(xs, &ys) {
        Ok(fit) if fit.slope < 0.0 => -fit.slope,
        _ => f64::INFINITY,
    }
}

/// Boundary treatment for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extension {
    /// Extend the field by its boundary values.
    Constant,
    /// Extend the field by zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvolutionMethod {
    /// Direct sum; exact zeros stay zero ahead of fronts.
    #[default]
    Direct,
    /// Zero-padded FFT.
    Fft,
}

/// Symmetric discrete kernel: `half[m]` is the weight at offset ±m.
#[derive(Debug, Clone)]
pub struct SampledKernel {
    dx: f64,
    half: Vec<f64>,
}

/// Parallelise direct convolution above this many output points.
const PAR_THRESHOLD: usize = 8192;
const PAR_CHUNK: usize = 2048;

impl SampledKernel {
    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Half-width R in cells; the stencil spans `2R + 1` cells.
    pub fn half_width(&self) -> usize {
        self.half.len() - 1
    }

    pub fn weights_half(&self) -> &[f64] {
        &self.half
    }

    /// Full stencil, offsets `−R..=R`.
    pub fn stencil(&self) -> Vec<f64> {
        let r = self.half_width();
        (0..=2 * r)
            .map(|j| self.half[(j as isize - r as isize).unsigned_abs()])
            .collect()
    }

    fn padded(&self, f: &[f64], ext: Extension) -> Vec<f64> {
        let r = self.half_width();
        let (left, right) = match ext {
            Extension::Constant => (f[0], f[f.len() - 1]),
            Extension::Zero => (0.0, 0.0),
        };
        let mut p = Vec::with_capacity(f.len() + 2 * r);
        p.resize(r, left);
        p.extend_from_slice(f);
        p.resize(f.len() + 2 * r, right);
        p
    }

    /// Convolve with the chosen method.
    pub fn convolve(&self, f: &[f64], ext: Extension, method: ConvolutionMethod) -> Result<Vec<f64>> {
        match method {
            ConvolutionMethod::Direct => self.convolve_direct(f, ext),
            ConvolutionMethod::Fft => self.convolve_fft(f, ext),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n < 2 * self.half_width() + 1 {
            return Err(invalid(format!(
                "field of {n} cells is shorter than the kernel stencil ({} cells)",
                2 * self.half_width() + 1
            )));
        }
        Ok(())
    }

    pub fn convolve_direct(&self, f: &[f64], ext: Extension) -> Result<Vec<f64>> {
        self.check_len(f.len())?;
        let mut out = vec![0.0; f.len()];
        self.convolve_into(f, ext, &mut out);
        Ok(out)
    }

    /// Direct convolution into a caller-provided buffer of the same length.
    /// The field must be at least as long as the stencil.
    pub fn convolve_into(&self, f: &[f64], ext: Extension, out: &mut [f64]) {
        assert_eq!(f.len(), out.len());
        let p = self.padded(f, ext);
        self.range_from_padded(&p, 0, out);
    }

    /// Direct convolution evaluated only on output indices
    /// `start..start + out.len()`.
    pub fn convolve_range(&self, f: &[f64], ext: Extension, start: usize, out: &mut [f64]) {
        assert!(start + out.len() <= f.len());
        let r = self.half_width();
        // Only the part of the padded field feeding the window is built.
        let n = f.len();
        let lo = start as isize - r as isize;
        let hi = (start + out.len() + r) as isize;
        let (left, right) = match ext {
            Extension::Constant => (f[0], f[n - 1]),
            Extension::Zero => (0.0, 0.0),
        };
        let p: Vec<f64> = (lo..hi)
            .map(|j| {
                if j < 0 {
                    left
                } else if j >= n as isize {
                    right
                } else {
                    f[j as usize]
                }
            })
            .collect();
        self.range_from_padded(&p, 0, out);
    }

    /// `out[j] = Σ_m w_m p[off + j + R − m]`, where `p` is padded by R on the
    /// left of the first output.
    pub(crate) fn range_from_padded(&self, p: &[f64], off: usize, out: &mut [f64]) {
        let r = self.half_width();
        let w = &self.half;
        let kernel = |start: usize, chunk: &mut [f64]| {
            let len = chunk.len();
            let base = off + start + r;
            let mid = &p[base..base + len];
            for (o, v) in chunk.iter_mut().zip(mid) {
                *o = w[0] * v;
            }
            for m in 1..=r {
                let a = &p[base - m..base - m + len];
                let b = &p[base + m..base + m + len];
                let wm = w[m];
                for ((o, x), y) in chunk.iter_mut().zip(a).zip(b) {
                    *o += wm * (x + y);
                }
            }
        };
        if out.len() >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(PAR_CHUNK)
                .enumerate()
                .for_each(|(c, chunk)| kernel(c * PAR_CHUNK, chunk));
        } else {
            kernel(0, out);
        }
    }

    /// Linear convolution through a zero-padded FFT.
    pub fn convolve_fft(&self, f: &[f64], ext: Extension) -> Result<Vec<f64>> {
        self.check_len(f.len())?;
        let r = self.half_width();
        let p = self.padded(f, ext);
        let stencil = self.stencil();
        let full = p.len() + stencil.len() - 1;
        let size = full.next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut a: Vec<Complex<f64>> = p.iter().map(|&v| Complex::new(v, 0.0)).collect();
        a.resize(size, Complex::new(0.0, 0.0));
        let mut b: Vec<Complex<f64>> = stencil.iter().map(|&v| Complex::new(v, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        fwd.process(&mut a);
        fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x *= *y;
        }
        inv.process(&mut a);
        let scale = 1.0 / size as f64;
        // Full linear convolution index of output j is j + 2R.
        let out = (0..f.len()).map(|j| a[j + 2 * r].re * scale).collect();
        Ok(out)
    }
}

/// Convolve a field sampled with spacing `dx` against the kernel.
pub fn convolve_field(kernel: &Kernel, field: &[f64], dx: f64, extension: Extension) -> Result<Vec<f64>> {
    let sk = kernel.sample(dx)?;
    let out = sk.convolve_direct(field, extension)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("convolution"));
    }
    Ok(out)
}
