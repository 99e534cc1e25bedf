//! Learnable Gabor and Laplacian-of-Gaussian filter banks.
//!
//! Kernels are generated on an odd square grid from unconstrained raw
//! parameters; positivity of wavelength, envelope width and aspect ratio
//! comes from an exponential reparameterization (the raw values are
//! log-values), so no clamping is ever needed.
//!
//! The Gabor tap at integer offset `(x, y)` (x rightward, y downward) is
//!
//! ```text
//! xr = x cos(theta) + y sin(theta)
//! yr = -x sin(theta) + y cos(theta)
//! tap = exp(-(xr^2 + gamma^2 yr^2) / (2 sigma^2)) * cos(2 pi xr / lambda + psi)
//! ```
//!
//! with no normalization. The LoG tap is
//!
//! ```text
//! raw = -(1 / (pi sigma^4)) (1 - (x^2 + y^2) / (2 sigma^2)) exp(-(x^2 + y^2) / (2 sigma^2))
//! ```
//!
//! followed by mean subtraction over the grid so the discrete kernel sums
//! to zero and constant regions produce zero response.
//!
//! Every tap has a closed-form derivative with respect to every raw
//! parameter (chained through the reparameterization); these analytic
//! gradients are what joins the bank to the autodiff tape at the kernel
//! tensor.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Size of a filter bank: how many filters of each family and the shared
/// kernel extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub n_gabor: usize,
    pub n_log: usize,
    pub kernel_size: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            n_gabor: 2,
            n_log: 5,
            kernel_size: 7,
        }
    }
}

/// Number of learnable scalars per Gabor filter.
pub const GABOR_PARAMS: usize = 5;
/// Number of learnable scalars per LoG filter.
pub const LOG_PARAMS: usize = 1;

/// Odd square grid of integer tap offsets centered on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelGrid {
    k: usize,
}

impl KernelGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::EvenKernel(k));
        }
        if k < 3 {
            return Err(Error::InvalidArgument(format!(
                "kernel grid must be at least 3, got {k}"
            )));
        }
        Ok(Self { k })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    /// Half-extent; offsets run over `[-radius, radius]` in both axes.
    pub fn radius(&self) -> i64 {
        (self.k as i64 - 1) / 2
    }

    /// Tap offsets in row-major order (y outer, x inner), matching the
    /// data layout of the generated kernel tensors.
    pub fn offsets(&self) -> impl Iterator<Item = (i64, i64)> {
        let r = self.radius();
        (-r..=r).flat_map(move |y| (-r..=r).map(move |x| (x, y)))
    }
}

/// Learnable Gabor parameters in unconstrained (raw) form.
///
/// Effective values: `lambda = exp(lambda_raw)`, `sigma = exp(sigma_raw)`,
/// `gamma = exp(gamma_raw)`; `theta` and `psi` are plain radians (the taps
/// are periodic in both, so no wrapping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborParams<T: Scalar> {
    pub lambda_raw: T,
    pub theta: T,
    pub psi: T,
    pub sigma_raw: T,
    pub gamma_raw: T,
}

impl<T: Scalar> GaborParams<T> {
    /// Build from effective (positive) values.
    pub fn from_effective(lambda: T, theta: T, psi: T, sigma: T, gamma: T) -> Self {
        Self {
            lambda_raw: lambda.ln(),
            theta,
            psi,
            sigma_raw: sigma.ln(),
            gamma_raw: gamma.ln(),
        }
    }

    pub fn lambda(&self) -> T {
        self.lambda_raw.exp()
    }

    pub fn sigma(&self) -> T {
        self.sigma_raw.exp()
    }

    pub fn gamma(&self) -> T {
        self.gamma_raw.exp()
    }
}

/// Learnable LoG scale in unconstrained form; `sigma = exp(sigma_raw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoGParams<T: Scalar> {
    pub sigma_raw: T,
}

impl<T: Scalar> LoGParams<T> {
    pub fn from_effective(sigma: T) -> Self {
        Self {
            sigma_raw: sigma.ln(),
        }
    }

    pub fn sigma(&self) -> T {
        self.sigma_raw.exp()
    }
}

/// A bank of Gabor filters followed by LoG filters on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T: Scalar> {
    pub gabor: Vec<GaborParams<T>>,
    pub log: Vec<LoGParams<T>>,
    pub grid: KernelGrid,
}

impl<T: Scalar> FilterBank<T> {
    /// Number of learnable scalars: 5 per Gabor filter, 1 per LoG filter.
    pub fn learnable_param_count(&self) -> usize {
        GABOR_PARAMS * self.gabor.len() + LOG_PARAMS * self.log.len()
    }

    /// Number of output channels `bank_apply` produces.
    pub fn filter_count(&self) -> usize {
        self.gabor.len() + self.log.len()
    }

    /// Flat raw parameter vector: per Gabor filter
    /// `[lambda_raw, theta, psi, sigma_raw, gamma_raw]`, then LoG
    /// `sigma_raw`s, in bank order.
    pub fn raw_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.learnable_param_count());
        for g in &self.gabor {
            out.extend_from_slice(&[g.lambda_raw, g.theta, g.psi, g.sigma_raw, g.gamma_raw]);
        }
        for l in &self.log {
            out.push(l.sigma_raw);
        }
        out
    }

    /// Overwrite the raw parameters from a flat vector (same layout as
    /// [`FilterBank::raw_params`]).
    pub fn set_raw_params(&mut self, raw: &[T]) -> Result<()> {
        if raw.len() != self.learnable_param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} raw parameters, got {}",
                self.learnable_param_count(),
                raw.len()
            )));
        }
        let mut it = raw.iter().copied();
        for g in &mut self.gabor {
            g.lambda_raw = it.next().unwrap();
            g.theta = it.next().unwrap();
            g.psi = it.next().unwrap();
            g.sigma_raw = it.next().unwrap();
            g.gamma_raw = it.next().unwrap();
        }
        for l in &mut self.log {
            l.sigma_raw = it.next().unwrap();
        }
        Ok(())
    }

    /// Human-readable name per raw parameter, aligned with `raw_params`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.learnable_param_count());
        for i in 0..self.gabor.len() {
            for field in ["lambda_raw", "theta", "psi", "sigma_raw", "gamma_raw"] {
                names.push(format!("gabor{i}.{field}"));
            }
        }
        for i in 0..self.log.len() {
            names.push(format!("log{i}.sigma_raw"));
        }
        names
    }

    /// All kernels stacked as a `[filters, 1, k, k]` tensor (Gabor first,
    /// bank order), ready for `conv2d` against a single-channel image.
    pub fn stacked_kernels(&self) -> Tensor<T> {
        let k = self.grid.size();
        let mut data = Vec::with_capacity(self.filter_count() * k * k);
        for g in &self.gabor {
            data.extend_from_slice(gabor_kernel(g, &self.grid).data());
        }
        for l in &self.log {
            data.extend_from_slice(log_kernel(l, &self.grid).data());
        }
        Tensor::from_vec(vec![self.filter_count(), 1, k, k], data).expect("stack layout")
    }

    /// Derivative kernels of every filter with respect to its own raw
    /// parameters, flattened in `raw_params` order.
    fn derivative_kernels(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::with_capacity(self.learnable_param_count());
        for g in &self.gabor {
            out.extend(gabor_kernel_grad(g, &self.grid));
        }
        for l in &self.log {
            out.push(log_kernel_grad(l, &self.grid));
        }
        out
    }
}

/// Generate the Gabor kernel for one parameter set.
pub fn gabor_kernel<T: Scalar>(p: &GaborParams<T>, grid: &KernelGrid) -> Tensor<T> {
    let k = grid.size();
    let (lambda, sigma, gamma) = (p.lambda(), p.sigma(), p.gamma());
    let (sin_t, cos_t) = p.theta.sin_cos();
    let two_sigma2 = cast::<T>(2.0) * sigma * sigma;
    let freq = cast::<T>(2.0) * T::PI() / lambda;

    let mut data = Vec::with_capacity(k * k);
    for (x, y) in grid.offsets() {
        let (x, y) = (cast::<T>(x as f64), cast::<T>(y as f64));
        let xr = x * cos_t + y * sin_t;
        let yr = -x * sin_t + y * cos_t;
        let envelope = (-(xr * xr + gamma * gamma * yr * yr) / two_sigma2).exp();
        let carrier = (freq * xr + p.psi).cos();
        data.push(envelope * carrier);
    }
    Tensor::from_vec(vec![k, k], data).expect("grid layout")
}

/// Closed-form derivatives of every Gabor tap with respect to the five
/// raw parameters, in `[lambda_raw, theta, psi, sigma_raw, gamma_raw]`
/// order. Derivatives with respect to the positive parameters are chained
/// through the exponential reparameterization
/// (`d tap / d raw = effective * d tap / d effective`).
pub fn gabor_kernel_grad<T: Scalar>(p: &GaborParams<T>, grid: &KernelGrid) -> [Tensor<T>; 5] {
    let k = grid.size();
    let (lambda, sigma, gamma) = (p.lambda(), p.sigma(), p.gamma());
    let (sin_t, cos_t) = p.theta.sin_cos();
    let sigma2 = sigma * sigma;
    let two_sigma2 = cast::<T>(2.0) * sigma2;
    let two_pi = cast::<T>(2.0) * T::PI();
    let freq = two_pi / lambda;

    let n = k * k;
    let mut d_lambda = Vec::with_capacity(n);
    let mut d_theta = Vec::with_capacity(n);
    let mut d_psi = Vec::with_capacity(n);
    let mut d_sigma = Vec::with_capacity(n);
    let mut d_gamma = Vec::with_capacity(n);

    for (x, y) in grid.offsets() {
        let (x, y) = (cast::<T>(x as f64), cast::<T>(y as f64));
        let xr = x * cos_t + y * sin_t;
        let yr = -x * sin_t + y * cos_t;
        let quad = xr * xr + gamma * gamma * yr * yr;
        let envelope = (-quad / two_sigma2).exp();
        let phase = freq * xr + p.psi;
        let (sin_p, cos_p) = phase.sin_cos();

        // d tap / d lambda = E sin(phase) 2 pi xr / lambda^2, then * lambda.
        d_lambda.push(envelope * sin_p * two_pi * xr / (lambda * lambda) * lambda);

        // Rotation: d xr / d theta = yr, d yr / d theta = -xr.
        let d_env_theta = -envelope * xr * yr * (T::one() - gamma * gamma) / sigma2;
        let d_car_theta = -sin_p * freq * yr;
        d_theta.push(d_env_theta * cos_p + envelope * d_car_theta);

        d_psi.push(-envelope * sin_p);

        // d tap / d sigma = E quad / sigma^3 * cos, then * sigma.
        d_sigma.push(envelope * quad / (sigma2 * sigma) * cos_p * sigma);

        // d tap / d gamma = -E gamma yr^2 / sigma^2 * cos, then * gamma.
        d_gamma.push(-envelope * gamma * yr * yr / sigma2 * cos_p * gamma);
    }

    let wrap = |v: Vec<T>| Tensor::from_vec(vec![k, k], v).expect("grid layout");
    [
        wrap(d_lambda),
        wrap(d_theta),
        wrap(d_psi),
        wrap(d_sigma),
        wrap(d_gamma),
    ]
}

/// Generate the mean-subtracted LoG kernel for one scale.
pub fn log_kernel<T: Scalar>(p: &LoGParams<T>, grid: &KernelGrid) -> Tensor<T> {
    let k = grid.size();
    let mut data = log_kernel_raw(p.sigma(), grid);
    subtract_mean(&mut data);
    Tensor::from_vec(vec![k, k], data).expect("grid layout")
}

/// The LoG taps before mean subtraction, in row-major grid order.
pub fn log_kernel_raw<T: Scalar>(sigma: T, grid: &KernelGrid) -> Vec<T> {
    let sigma2 = sigma * sigma;
    let amp = (T::PI() * sigma2 * sigma2).recip();
    let two_sigma2 = cast::<T>(2.0) * sigma2;
    grid.offsets()
        .map(|(x, y)| {
            let r2 = cast::<T>((x * x + y * y) as f64);
            let u = r2 / two_sigma2;
            -amp * (T::one() - u) * (-u).exp()
        })
        .collect()
}

/// Closed-form derivative of every mean-subtracted LoG tap with respect to
/// `sigma_raw`. Mean subtraction is linear, so the derivative of the
/// subtracted kernel is the subtracted derivative; the exponential chain
/// multiplies by `sigma`.
pub fn log_kernel_grad<T: Scalar>(p: &LoGParams<T>, grid: &KernelGrid) -> Tensor<T> {
    let k = grid.size();
    let sigma = p.sigma();
    let sigma2 = sigma * sigma;
    let amp = (T::PI() * sigma2 * sigma2).recip();
    let d_amp = cast::<T>(-4.0) / (T::PI() * sigma2 * sigma2 * sigma);
    let two_sigma2 = cast::<T>(2.0) * sigma2;
    let sigma3 = sigma2 * sigma;

    let mut data: Vec<T> = grid
        .offsets()
        .map(|(x, y)| {
            let r2 = cast::<T>((x * x + y * y) as f64);
            let u = r2 / two_sigma2;
            let b = T::one() - u;
            let c = (-u).exp();
            let db = r2 / sigma3;
            let dc = c * r2 / sigma3;
            -(d_amp * b * c + amp * db * c + amp * b * dc)
        })
        .collect();
    subtract_mean(&mut data);
    for v in &mut data {
        *v *= sigma;
    }
    Tensor::from_vec(vec![k, k], data).expect("grid layout")
}

fn subtract_mean<T: Scalar>(data: &mut [T]) {
    let n = cast::<T>(data.len() as f64);
    let mean = data.iter().fold(T::zero(), |acc, &v| acc + v) / n;
    for v in data {
        *v -= mean;
    }
}

/// Apply every filter in the bank to a single-channel image with "same"
/// zero-padded cross-correlation. Output channels are Gabor filters first,
/// then LoG filters, in bank order.
pub fn bank_apply<T: Scalar>(image: &Tensor<T>, bank: &FilterBank<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "bank_apply needs a single-channel image [1,h,w], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let filters = bank.filter_count();
    let k = bank.grid.size();
    let kernels = bank.stacked_kernels();
    let mut out = vec![T::zero(); filters * h * w];
    conv::forward(
        image.data(),
        (1, h, w),
        kernels.data(),
        (filters, k),
        1,
        (k - 1) / 2,
        &mut out,
    );
    Tensor::from_vec(vec![filters, h, w], out)
}

/// Chain loss gradients at the generated kernels back to the raw filter
/// parameters: `d loss / d param = sum_taps (d loss / d tap)(d tap / d param)`.
///
/// `kernel_grads` is laid out like [`FilterBank::stacked_kernels`]
/// (`filters * k * k` values). Returns a flat vector aligned with
/// [`FilterBank::raw_params`].
pub fn param_grads_from_kernel_grads<T: Scalar>(
    kernel_grads: &[T],
    bank: &FilterBank<T>,
) -> Result<Vec<T>> {
    let k = bank.grid.size();
    let per = k * k;
    if kernel_grads.len() != bank.filter_count() * per {
        return Err(Error::ShapeMismatch(format!(
            "kernel gradient buffer has {} values, expected {}",
            kernel_grads.len(),
            bank.filter_count() * per
        )));
    }
    let mut out = Vec::with_capacity(bank.learnable_param_count());
    let derivs = bank.derivative_kernels();
    let mut di = 0;
    for fi in 0..bank.gabor.len() {
        let gslice = &kernel_grads[fi * per..(fi + 1) * per];
        for _ in 0..GABOR_PARAMS {
            out.push(dot(gslice, derivs[di].data()));
            di += 1;
        }
    }
    for li in 0..bank.log.len() {
        let fi = bank.gabor.len() + li;
        let gslice = &kernel_grads[fi * per..(fi + 1) * per];
        out.push(dot(gslice, derivs[di].data()));
        di += 1;
    }
    Ok(out)
}

/// Exact chain-rule gradient of a loss with respect to every raw bank
/// parameter, given the loss gradient at the bank's output channels.
///
/// `grad_maps` is `[filters, h, w]` (the gradient flowing into
/// `bank_apply`'s output) and `image` the `[1,h,w]` input it was applied
/// to. The loss gradient at each kernel tap is the convolution kernel
/// gradient; the per-parameter gradients then follow from the closed-form
/// derivative kernels.
pub fn bank_param_grad<T: Scalar>(
    grad_maps: &Tensor<T>,
    image: &Tensor<T>,
    bank: &FilterBank<T>,
) -> Result<Vec<T>> {
    let (gs, is) = (grad_maps.shape(), image.shape());
    if is.len() != 3 || is[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "bank_param_grad needs a single-channel image, got {is:?}"
        )));
    }
    if gs != [bank.filter_count(), is[1], is[2]] {
        return Err(Error::ShapeMismatch(format!(
            "grad_maps {gs:?} does not match [{}, {}, {}]",
            bank.filter_count(),
            is[1],
            is[2]
        )));
    }
    let k = bank.grid.size();
    let mut kernel_grads = vec![T::zero(); bank.filter_count() * k * k];
    conv::kernel_grad(
        image.data(),
        (1, is[1], is[2]),
        grad_maps.data(),
        (bank.filter_count(), k),
        1,
        (k - 1) / 2,
        &mut kernel_grads,
    );
    param_grads_from_kernel_grads(&kernel_grads, bank)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Deterministic filter-bank initialization.
///
/// Gabor: orientations evenly spaced over `[0, pi)`, wavelengths evenly
/// spaced over `[k/4, k]` (midpoint when there is a single filter),
/// `sigma = 0.56 lambda`, `gamma = 0.5`, `psi = 0`. LoG: scales log-spaced
/// over `[0.5, k/3]`.
///
/// The scheme has no random component; `seed` is accepted for interface
/// uniformity with the weight initializers and currently unused.
pub fn init_bank<T: Scalar>(
    n_gabor: usize,
    n_log: usize,
    k: usize,
    _seed: u64,
) -> Result<FilterBank<T>> {
    let grid = KernelGrid::new(k)?;
    let kf = k as f64;

    let gabor = (0..n_gabor)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / n_gabor as f64;
            let lambda = linspace(kf / 4.0, kf, i, n_gabor);
            GaborParams::from_effective(
                cast::<T>(lambda),
                cast::<T>(theta),
                T::zero(),
                cast::<T>(0.56 * lambda),
                cast::<T>(0.5),
            )
        })
        .collect();

    let log = (0..n_log)
        .map(|i| {
            let sigma = linspace(0.5f64.ln(), (kf / 3.0).ln(), i, n_log).exp();
            LoGParams::from_effective(cast::<T>(sigma))
        })
        .collect();

    Ok(FilterBank { gabor, log, grid })
}

/// `i`-th of `n` points evenly spaced over `[lo, hi]` inclusive; midpoint
/// for a single point.
fn linspace(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        (lo + hi) / 2.0
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Write one 16-bit min-max-scaled PGM per kernel plus a CSV of effective
/// parameter values into `dir` (`filters.csv`, `filter_<id>_<type>.pgm`).
pub fn export_filters<T: Scalar>(bank: &FilterBank<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("filter_id,type,lambda,theta,psi,sigma,gamma\n");
    let kernels = bank.stacked_kernels();
    let k = bank.grid.size();
    let per = k * k;

    for (id, g) in bank.gabor.iter().enumerate() {
        csv.push_str(&format!(
            "{id},gabor,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            g.lambda().to_f64().unwrap_or(f64::NAN),
            g.theta.to_f64().unwrap_or(f64::NAN),
            g.psi.to_f64().unwrap_or(f64::NAN),
            g.sigma().to_f64().unwrap_or(f64::NAN),
            g.gamma().to_f64().unwrap_or(f64::NAN),
        ));
        let taps = &kernels.data()[id * per..(id + 1) * per];
        write_pgm16(&dir.join(format!("filter_{id:02}_gabor.pgm")), k, taps)?;
    }
    for (li, l) in bank.log.iter().enumerate() {
        let id = bank.gabor.len() + li;
        csv.push_str(&format!(
            "{id},log,,,,{:.6},\n",
            l.sigma().to_f64().unwrap_or(f64::NAN)
        ));
        let taps = &kernels.data()[id * per..(id + 1) * per];
        write_pgm16(&dir.join(format!("filter_{id:02}_log.pgm")), k, taps)?;
    }
    std::fs::write(dir.join("filters.csv"), csv)?;
    Ok(())
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples), min-max
/// scaled; a flat kernel maps to all zeros.
fn write_pgm16<T: Scalar>(path: &Path, k: usize, taps: &[T]) -> Result<()> {
    let lo = taps
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v.to_f64().unwrap_or(0.0)));
    let hi = taps
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64().unwrap_or(0.0)));
    let span = hi - lo;
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{k} {k}\n65535\n")?;
    let mut bytes = Vec::with_capacity(taps.len() * 2);
    for &v in taps {
        let v = v.to_f64().unwrap_or(0.0);
        let scaled = if span > 0.0 {
            ((v - lo) / span * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&scaled.to_be_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, KERNEL_TOLERANCE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid7() -> KernelGrid {
        KernelGrid::new(7).unwrap()
    }

    fn tap_at(kernel: &Tensor<f64>, grid: &KernelGrid, x: i64, y: i64) -> f64 {
        let r = grid.radius();
        let k = grid.size();
        kernel.data()[((y + r) as usize) * k + (x + r) as usize]
    }

    /// Central finite difference of a kernel generator with respect to one
    /// raw parameter.
    fn fd_kernel(mut gen: impl FnMut(f64) -> Vec<f64>, raw: f64, step: f64) -> Vec<f64> {
        let plus = gen(raw + step);
        let minus = gen(raw - step);
        plus.iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / (2.0 * step))
            .collect()
    }

    #[test]
    fn grid_rejects_even_and_tiny_sizes() {
        assert!(KernelGrid::new(4).is_err());
        assert!(KernelGrid::new(1).is_err());
        assert!(KernelGrid::new(3).is_ok());
    }

    #[test]
    fn grid_is_symmetric_about_origin() {
        let g = grid7();
        let offsets: Vec<_> = g.offsets().collect();
        assert_eq!(offsets.len(), 49);
        for &(x, y) in &offsets {
            assert!(offsets.contains(&(-x, -y)));
        }
    }

    #[test]
    fn gabor_center_tap_is_one_with_zero_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = GaborParams::<f64> {
                lambda_raw: rng.gen_range(-0.2..2.0),
                theta: rng.gen_range(-3.0..3.0),
                psi: 0.0,
                sigma_raw: rng.gen_range(-0.5..1.2),
                gamma_raw: rng.gen_range(-1.0..0.7),
            };
            let kernel = gabor_kernel(&p, &grid7());
            assert_eq!(tap_at(&kernel, &grid7(), 0, 0), 1.0);
        }
    }

    #[test]
    fn gabor_is_mirror_symmetric_in_y_when_axis_aligned() {
        let p = GaborParams::from_effective(3.0f64, 0.0, 0.0, 1.5, 1.0);
        let kernel = gabor_kernel(&p, &grid7());
        let g = grid7();
        for (x, y) in g.offsets() {
            assert_eq!(tap_at(&kernel, &g, x, y), tap_at(&kernel, &g, x, -y));
        }
    }

    #[test]
    fn gabor_matches_hand_evaluated_tap() {
        // lambda=4, theta=0, psi=0, sigma=2, gamma=1 at (x,y)=(2,0):
        // exp(-4/8) * cos(pi) = -exp(-0.5).
        let p = GaborParams::from_effective(4.0f64, 0.0, 0.0, 2.0, 1.0);
        let kernel = gabor_kernel(&p, &grid7());
        let expect = -(-0.5f64).exp();
        assert!((tap_at(&kernel, &grid7(), 2, 0) - expect).abs() < 1e-15);
        assert!((expect + 0.6065306597126334).abs() < 1e-15);
    }

    #[test]
    fn gabor_theta_periodicity_with_zero_phase() {
        let g = grid7();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut p = GaborParams::<f64> {
                lambda_raw: rng.gen_range(0.0..1.8),
                theta: rng.gen_range(-3.0..3.0),
                psi: 0.0,
                sigma_raw: rng.gen_range(-0.3..1.2),
                gamma_raw: rng.gen_range(-0.8..0.6),
            };
            let a = gabor_kernel(&p, &g);
            p.theta += std::f64::consts::PI;
            let b = gabor_kernel(&p, &g);
            for (av, bv) in a.data().iter().zip(b.data()) {
                assert!((av - bv).abs() < 1e-12, "{av} vs {bv}");
            }
        }
    }

    #[test]
    fn gabor_psi_grad_vanishes_at_center_for_zero_phase() {
        let p = GaborParams::from_effective(3.0f64, 0.7, 0.0, 1.2, 0.8);
        let grads = gabor_kernel_grad(&p, &grid7());
        assert_eq!(tap_at(&grads[2], &grid7(), 0, 0), 0.0);
    }

    #[test]
    fn gabor_theta_grad_matches_finite_difference_axis_aligned() {
        let g = grid7();
        let base = GaborParams::from_effective(3.0f64, 0.0, 0.0, 1.5, 1.0);
        let analytic = gabor_kernel_grad(&base, &g)[1].clone();
        let fd = fd_kernel(
            |theta| {
                let p = GaborParams { theta, ..base };
                gabor_kernel(&p, &g).data().to_vec()
            },
            base.theta,
            1e-5,
        );
        assert!(max_rel_err(analytic.data(), &fd) < KERNEL_TOLERANCE);
    }

    #[test]
    fn gabor_all_five_grads_match_finite_difference() {
        let g = grid7();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let p = GaborParams::<f64> {
                lambda_raw: rng.gen_range(0.0..2.0),
                theta: rng.gen_range(-3.1..3.1),
                psi: rng.gen_range(-3.1..3.1),
                sigma_raw: rng.gen_range(-0.5..1.3),
                gamma_raw: rng.gen_range(-1.0..0.7),
            };
            let grads = gabor_kernel_grad(&p, &g);
            let raw = [p.lambda_raw, p.theta, p.psi, p.sigma_raw, p.gamma_raw];
            for (pi, analytic) in grads.iter().enumerate() {
                let fd = fd_kernel(
                    |v| {
                        let mut q = p;
                        match pi {
                            0 => q.lambda_raw = v,
                            1 => q.theta = v,
                            2 => q.psi = v,
                            3 => q.sigma_raw = v,
                            _ => q.gamma_raw = v,
                        }
                        gabor_kernel(&q, &g).data().to_vec()
                    },
                    raw[pi],
                    1e-5,
                );
                let err = max_rel_err(analytic.data(), &fd);
                assert!(err < KERNEL_TOLERANCE, "param {pi}: rel err {err}");
            }
        }
    }

    #[test]
    fn log_center_tap_before_mean_subtraction() {
        // sigma = 1: raw center tap is -1/pi.
        let raw = log_kernel_raw(1.0f64, &grid7());
        let center = raw[24];
        assert!((center + 1.0 / std::f64::consts::PI).abs() < 1e-15);
        assert!((center + 0.3183098861837907).abs() < 1e-15);
    }

    #[test]
    fn log_zero_crossing_ring() {
        // Raw tap vanishes where x^2 + y^2 = 2 sigma^2; sigma = sqrt(2)
        // puts the ring through (2, 0) up to rounding in sigma^2.
        let raw = log_kernel_raw(2.0f64.sqrt(), &grid7());
        let g = grid7();
        let idx = |x: i64, y: i64| ((y + g.radius()) as usize) * 7 + (x + g.radius()) as usize;
        assert!(raw[idx(2, 0)].abs() < 1e-15);
        assert!(raw[idx(0, -2)].abs() < 1e-15);
    }

    #[test]
    fn log_kernel_sums_to_zero() {
        for sigma in [0.5f64, 0.9, 1.7, 3.0, 14.0] {
            let kernel = log_kernel(&LoGParams::from_effective(sigma), &grid7());
            let sum: f64 = kernel.data().iter().sum();
            assert!(sum.abs() < 1e-12, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn log_grad_matches_finite_difference() {
        let g = grid7();
        for sigma in [0.6f64, 1.0, 2.5] {
            let p = LoGParams::from_effective(sigma);
            let analytic = log_kernel_grad(&p, &g);
            let fd = fd_kernel(
                |raw| log_kernel(&LoGParams { sigma_raw: raw }, &g).data().to_vec(),
                p.sigma_raw,
                1e-5,
            );
            let err = max_rel_err(analytic.data(), &fd);
            assert!(err < KERNEL_TOLERANCE, "sigma {sigma}: rel err {err}");
        }
    }

    #[test]
    fn log_grad_sums_to_zero() {
        for sigma in [0.6f64, 1.3, 4.0] {
            let grad = log_kernel_grad(&LoGParams::from_effective(sigma), &grid7());
            let sum: f64 = grad.data().iter().sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn log_flattens_out_at_huge_scale() {
        let p = LoGParams::from_effective(50.0f64);
        let kernel = log_kernel(&p, &grid7());
        let grad = log_kernel_grad(&p, &grid7());
        assert!(kernel.data().iter().all(|v| v.abs() < 1e-3));
        assert!(grad.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn bank_apply_log_on_constant_image_is_zero_in_interior() {
        // The kernel sums to zero, so every interior output (where the full
        // kernel fits inside the image) vanishes; boundary pixels see a
        // truncated kernel under zero padding and are excluded.
        let bank = init_bank::<f64>(0, 1, 7, 0).unwrap();
        let image = Tensor::full(vec![1, 16, 16], 0.7);
        let out = bank_apply(&image, &bank).unwrap();
        let margin = 3;
        for y in margin..16 - margin {
            for x in margin..16 - margin {
                let v = out.data()[y * 16 + x];
                assert!(v.abs() < 1e-12, "interior response {v} at ({x},{y})");
            }
        }
    }

    #[test]
    fn bank_apply_gabor_on_delta_stamps_the_kernel() {
        let bank = FilterBank {
            gabor: vec![GaborParams::from_effective(3.0f64, 0.9, 0.0, 1.4, 0.7)],
            log: vec![],
            grid: grid7(),
        };
        let mut image = Tensor::zeros(vec![1, 15, 15]);
        image.data_mut()[7 * 15 + 7] = 1.0;
        let out = bank_apply(&image, &bank).unwrap();
        let kernel = gabor_kernel(&bank.gabor[0], &bank.grid);
        for (x, y) in bank.grid.offsets() {
            let ov = out.data()[((7 + y) as usize) * 15 + (7 + x) as usize];
            assert!((ov - tap_at(&kernel, &bank.grid, x, y)).abs() < 1e-15);
        }
    }

    #[test]
    fn bank_apply_channel_order_is_gabor_then_log() {
        let bank = init_bank::<f64>(1, 1, 7, 0).unwrap();
        let image = Tensor::full(vec![1, 12, 12], 1.0);
        let out = bank_apply(&image, &bank).unwrap();
        assert_eq!(out.shape(), &[2, 12, 12]);
        // Gabor on a constant image responds in the interior; the zero-sum
        // LoG channel does not.
        assert!(out.data()[6 * 12 + 6].abs() > 1e-6);
        assert!(out.data()[144 + 6 * 12 + 6].abs() < 1e-12);
    }

    #[test]
    fn bank_apply_rejects_multichannel_input() {
        let bank = init_bank::<f64>(1, 0, 7, 0).unwrap();
        let image = Tensor::zeros(vec![2, 8, 8]);
        assert!(bank_apply(&image, &bank).is_err());
    }

    #[test]
    fn bank_param_grad_zero_maps_give_zero() {
        let bank = init_bank::<f64>(2, 2, 5, 0).unwrap();
        let image = Tensor::full(vec![1, 10, 10], 0.3);
        let grad_maps = Tensor::zeros(vec![4, 10, 10]);
        let grads = bank_param_grad(&grad_maps, &image, &bank).unwrap();
        assert_eq!(grads.len(), bank.learnable_param_count());
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn log_sigma_grad_vanishes_for_interior_loss_on_constant_image() {
        // Loss = sum of the LoG channel over the interior. Every interior
        // output is (constant) * (kernel sum) = 0 for any sigma, so the
        // sigma gradient must vanish up to rounding.
        let bank = init_bank::<f64>(0, 1, 5, 0).unwrap();
        let image = Tensor::full(vec![1, 12, 12], 0.42);
        let mut grad_maps = Tensor::zeros(vec![1, 12, 12]);
        for y in 2..10 {
            for x in 2..10 {
                grad_maps.data_mut()[y * 12 + x] = 1.0;
            }
        }
        let grads = bank_param_grad(&grad_maps, &image, &bank).unwrap();
        assert!(grads[0].abs() < 1e-10, "sigma grad {}", grads[0]);
    }

    #[test]
    fn bank_end_to_end_grad_matches_finite_difference() {
        // Weighted-sum loss over all bank output channels on a random
        // 16x16 image, checked against central differences on the raw
        // parameter vector.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let bank = init_bank::<f64>(2, 2, 5, 0).unwrap();
        let image = {
            let data: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(vec![1, 16, 16], data).unwrap()
        };
        let weights: Vec<f64> = (0..4 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |b: &FilterBank<f64>| -> f64 {
            let out = bank_apply(&image, b).unwrap();
            dot(out.data(), &weights)
        };

        let grad_maps = Tensor::from_vec(vec![4, 16, 16], weights.clone()).unwrap();
        let analytic = bank_param_grad(&grad_maps, &image, &bank).unwrap();

        let raw = bank.raw_params();
        let step = 1e-5;
        let mut fd = Vec::new();
        for i in 0..raw.len() {
            let mut plus = bank.clone();
            let mut r = raw.clone();
            r[i] += step;
            plus.set_raw_params(&r).unwrap();
            let mut minus = bank.clone();
            r[i] = raw[i] - step;
            minus.set_raw_params(&r).unwrap();
            fd.push((loss(&plus) - loss(&minus)) / (2.0 * step));
        }
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-5, "end-to-end rel err {err}");
    }

    #[test]
    fn init_bank_param_counts() {
        assert_eq!(init_bank::<f64>(2, 5, 7, 0).unwrap().learnable_param_count(), 15);
        assert_eq!(init_bank::<f64>(5, 5, 7, 0).unwrap().learnable_param_count(), 30);
        assert_eq!(init_bank::<f64>(0, 0, 7, 0).unwrap().learnable_param_count(), 0);
    }

    #[test]
    fn init_bank_is_deterministic_and_rejects_even_k() {
        let a = init_bank::<f64>(2, 5, 7, 1).unwrap();
        let b = init_bank::<f64>(2, 5, 7, 99).unwrap();
        assert_eq!(a, b);
        assert!(init_bank::<f64>(2, 5, 8, 0).is_err());
    }

    #[test]
    fn init_bank_spacing_matches_scheme() {
        let bank = init_bank::<f64>(2, 5, 7, 0).unwrap();
        assert!((bank.gabor[0].theta - 0.0).abs() < 1e-15);
        assert!((bank.gabor[1].theta - std::f64::consts::PI / 2.0).abs() < 1e-15);
        assert!((bank.gabor[0].lambda() - 1.75).abs() < 1e-12);
        assert!((bank.gabor[1].lambda() - 7.0).abs() < 1e-12);
        assert!((bank.gabor[0].sigma() - 0.56 * 1.75).abs() < 1e-12);
        assert!((bank.log[0].sigma() - 0.5).abs() < 1e-12);
        assert!((bank.log[4].sigma() - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn raw_param_round_trip() {
        let mut bank = init_bank::<f64>(2, 3, 5, 0).unwrap();
        let mut raw = bank.raw_params();
        assert_eq!(raw.len(), 13);
        for (i, v) in raw.iter_mut().enumerate() {
            *v += 0.01 * i as f64;
        }
        bank.set_raw_params(&raw).unwrap();
        assert_eq!(bank.raw_params(), raw);
        assert!(bank.set_raw_params(&raw[1..]).is_err());
    }

    #[test]
    fn export_writes_pgm_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let bank = init_bank::<f64>(1, 1, 7, 0).unwrap();
        export_filters(&bank, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("filters.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "filter_id,type,lambda,theta,psi,sigma,gamma");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,gabor,"));
        assert!(lines[2].starts_with("1,log,"));

        let pgm = std::fs::read(dir.path().join("filter_00_gabor.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n7 7\n65535\n"));
        assert_eq!(pgm.len(), b"P5\n7 7\n65535\n".len() + 49 * 2);
    }

    proptest! {
        // Randomized sweep: all six derivative kernels (five Gabor, one
        // LoG) agree with central differences across the parameter space.
        #[test]
        fn prop_kernel_grads_match_fd(
            lambda_raw in 0.0f64..2.0,
            theta in -3.1f64..3.1,
            psi in -3.1f64..3.1,
            sigma_raw in -0.5f64..1.3,
            gamma_raw in -1.0f64..0.7,
            log_sigma_raw in -0.7f64..1.0,
        ) {
            let g = KernelGrid::new(7).unwrap();
            let p = GaborParams { lambda_raw, theta, psi, sigma_raw, gamma_raw };
            let grads = gabor_kernel_grad(&p, &g);
            let raws = [lambda_raw, theta, psi, sigma_raw, gamma_raw];
            for (pi, analytic) in grads.iter().enumerate() {
                let fd = fd_kernel(
                    |v| {
                        let mut q = p;
                        match pi {
                            0 => q.lambda_raw = v,
                            1 => q.theta = v,
                            2 => q.psi = v,
                            3 => q.sigma_raw = v,
                            _ => q.gamma_raw = v,
                        }
                        gabor_kernel(&q, &g).data().to_vec()
                    },
                    raws[pi],
                    1e-5,
                );
                prop_assert!(max_rel_err(analytic.data(), &fd) < KERNEL_TOLERANCE);
            }

            let lp = LoGParams { sigma_raw: log_sigma_raw };
            let analytic = log_kernel_grad(&lp, &g);
            let fd = fd_kernel(
                |v| log_kernel(&LoGParams { sigma_raw: v }, &g).data().to_vec(),
                log_sigma_raw,
                1e-5,
            );
            prop_assert!(max_rel_err(analytic.data(), &fd) < KERNEL_TOLERANCE);
        }

        #[test]
        fn prop_param_count_formula(n_gabor in 0usize..8, n_log in 0usize..8) {
            let bank = init_bank::<f64>(n_gabor, n_log, 5, 0).unwrap();
            prop_assert_eq!(bank.learnable_param_count(), 5 * n_gabor + n_log);
        }

        #[test]
        fn prop_effective_params_stay_positive(
            dl in -30.0f64..30.0,
            ds in -30.0f64..30.0,
            dg in -30.0f64..30.0,
        ) {
            // Any unconstrained raw update keeps the effective values
            // strictly positive.
            let mut bank = init_bank::<f64>(1, 1, 5, 0).unwrap();
            let mut raw = bank.raw_params();
            raw[0] += dl;
            raw[3] += ds;
            raw[4] += dg;
            raw[5] += ds;
            bank.set_raw_params(&raw).unwrap();
            prop_assert!(bank.gabor[0].lambda() > 0.0);
            prop_assert!(bank.gabor[0].sigma() > 0.0);
            prop_assert!(bank.gabor[0].gamma() > 0.0);
            prop_assert!(bank.log[0].sigma() > 0.0);
        }

        #[test]
        fn prop_log_kernel_zero_sum(sigma in 0.3f64..20.0) {
            let kernel = log_kernel(&LoGParams::from_effective(sigma), &KernelGrid::new(7).unwrap());
            let sum: f64 = kernel.data().iter().sum();
            prop_assert!(sum.abs() < 1e-12);
        }
    }
}
