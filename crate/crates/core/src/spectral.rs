//! Real-to-complex 3D FFT over the spatial axes of a `(B, D, H, W, C)` volume.
//!
//! The forward transform is unnormalized and keeps the `W/2 + 1` non-redundant
//! bins along the innermost spatial axis; the inverse reconstructs the dropped
//! half by conjugate symmetry and scales by `1 / (D * H * W)`. One-dimensional
//! transforms are iterative radix-2 Cooley-Tukey, with Bluestein's chirp-z
//! algorithm for lengths that are not powers of two.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Clone, Debug)]
enum Algo<T> {
    Identity,
    Radix2 {
        twiddles: Vec<Complex<T>>,
        bitrev: Vec<usize>,
    },
    Bluestein {
        chirp: Vec<Complex<T>>,
        kernel: Vec<Complex<T>>,
        inner: Box<Fft<T>>,
    },
}

/// Plan for an unnormalized length-`n` complex DFT.
#[derive(Clone, Debug)]
pub struct Fft<T> {
    n: usize,
    algo: Algo<T>,
}

fn unit<T: Scalar>(angle: f64) -> Complex<T> {
    Complex::new(T::lit(angle.cos()), T::lit(angle.sin()))
}

impl<T: Scalar> Fft<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "FFT length must be positive");
        let algo = if n == 1 {
            Algo::Identity
        } else if n.is_power_of_two() {
            let bits = n.trailing_zeros();
            Algo::Radix2 {
                twiddles: (0..n / 2)
                    .map(|k| unit(-2.0 * std::f64::consts::PI * k as f64 / n as f64))
                    .collect(),
                bitrev: (0..n)
                    .map(|i| i.reverse_bits() >> (usize::BITS - bits))
                    .collect(),
            }
        } else {
            let m = (2 * n - 1).next_power_of_two();
            // k^2 mod 2n keeps the chirp phase small and exact
            let chirp: Vec<Complex<T>> = (0..n)
                .map(|k| {
                    let k2 = (k * k) % (2 * n);
                    unit(-std::f64::consts::PI * k2 as f64 / n as f64)
                })
                .collect();
            let inner = Fft::new(m);
            let mut kernel = vec![Complex::new(T::zero(), T::zero()); m];
            kernel[0] = chirp[0].conj();
            for k in 1..n {
                kernel[k] = chirp[k].conj();
                kernel[m - k] = chirp[k].conj();
            }
            inner.forward(&mut kernel);
            Algo::Bluestein {
                chirp,
                kernel,
                inner: Box::new(inner),
            }
        };
        Self { n, algo }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward DFT, `X_k = sum_j x_j exp(-2 pi i j k / n)`.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        debug_assert_eq!(buf.len(), self.n);
        match &self.algo {
            Algo::Identity => {}
            Algo::Radix2 { twiddles, bitrev } => {
                for (i, &j) in bitrev.iter().enumerate() {
                    if i < j {
                        buf.swap(i, j);
                    }
                }
                let n = self.n;
                let mut size = 2;
                while size <= n {
                    let half = size / 2;
                    let step = n / size;
                    for start in (0..n).step_by(size) {
                        for k in 0..half {
                            let w = twiddles[k * step];
                            let a = buf[start + k];
                            let b = buf[start + k + half] * w;
                            buf[start + k] = a + b;
                            buf[start + k + half] = a - b;
                        }
                    }
                    size *= 2;
                }
            }
            Algo::Bluestein {
                chirp,
                kernel,
                inner,
            } => {
                let m = kernel.len();
                let zero = Complex::new(T::zero(), T::zero());
                let mut a = vec![zero; m];
                for k in 0..self.n {
                    a[k] = buf[k] * chirp[k];
                }
                inner.forward(&mut a);
                for (v, &k) in a.iter_mut().zip(kernel) {
                    *v *= k;
                }
                inner.inverse(&mut a);
                let scale = T::one() / T::from_usize_lossy(m);
                for k in 0..self.n {
                    buf[k] = a[k] * chirp[k] * scale;
                }
            }
        }
    }

    /// In-place unnormalized inverse DFT (positive exponent).
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf);
        for v in buf.iter_mut() {
            *v = v.conj();
        }
    }
}

/// Multiplicity of half-spectrum bin `kw` in the full spectrum of a width-`w`
/// signal: 1 for the DC and (even `w`) Nyquist bins, 2 otherwise.
pub fn hermitian_multiplicity(kw: usize, w: usize) -> usize {
    if kw == 0 || (w % 2 == 0 && kw == w / 2) {
        1
    } else {
        2
    }
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Width check shared by every transform: `W` must be even, or the
/// degenerate `W = 1` (a single DC bin, which is unambiguous).
pub fn check_width(w: usize) -> Result<()> {
    if w == 0 || (w % 2 == 1 && w != 1) {
        return Err(Error::config(format!(
            "real FFT needs an even width, got W = {w}; pad width to even"
        )));
    }
    Ok(())
}

/// Forward/inverse plans for a fixed `(D, H, W)` grid.
#[derive(Clone, Debug)]
pub struct FftPlan3<T> {
    dims: [usize; 3],
    fd: Fft<T>,
    fh: Fft<T>,
    fw: Fft<T>,
}

impl<T: Scalar> FftPlan3<T> {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::config(format!("FFT grid {dims:?} has an empty axis")));
        }
        check_width(dims[2])?;
        Ok(Self {
            dims,
            fd: Fft::new(dims[0]),
            fh: Fft::new(dims[1]),
            fw: Fft::new(dims[2]),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn transform_dh(&self, grid: &mut [Complex<T>], wf: usize, inverse: bool) {
        let [d, h, _] = self.dims;
        let zero = Complex::new(T::zero(), T::zero());
        if h > 1 {
            let mut line = vec![zero; h];
            for z in 0..d {
                for k in 0..wf {
                    for y in 0..h {
                        line[y] = grid[(z * h + y) * wf + k];
                    }
                    if inverse {
                        self.fh.inverse(&mut line);
                    } else {
                        self.fh.forward(&mut line);
                    }
                    for y in 0..h {
                        grid[(z * h + y) * wf + k] = line[y];
                    }
                }
            }
        }
        if d > 1 {
            let mut line = vec![zero; d];
            for y in 0..h {
                for k in 0..wf {
                    for z in 0..d {
                        line[z] = grid[(z * h + y) * wf + k];
                    }
                    if inverse {
                        self.fd.inverse(&mut line);
                    } else {
                        self.fd.forward(&mut line);
                    }
                    for z in 0..d {
                        grid[(z * h + y) * wf + k] = line[z];
                    }
                }
            }
        }
    }

    /// One `(D, H, W)` real grid to its `(D, H, W/2+1)` half spectrum.
    fn forward_grid(&self, real: &[T]) -> Vec<Complex<T>> {
        let [d, h, w] = self.dims;
        let wf = half_width(w);
        let zero = Complex::new(T::zero(), T::zero());
        let mut grid = vec![zero; d * h * wf];
        let mut line = vec![zero; w];
        for row in 0..d * h {
            for (l, &v) in line.iter_mut().zip(&real[row * w..(row + 1) * w]) {
                *l = Complex::new(v, T::zero());
            }
            self.fw.forward(&mut line);
            grid[row * wf..(row + 1) * wf].copy_from_slice(&line[..wf]);
        }
        self.transform_dh(&mut grid, wf, false);
        grid
    }

    fn inverse_grid(&self, mut grid: Vec<Complex<T>>) -> Vec<T> {
        let [d, h, w] = self.dims;
        let wf = half_width(w);
        self.transform_dh(&mut grid, wf, true);
        let zero = Complex::new(T::zero(), T::zero());
        let scale = T::one() / T::from_usize_lossy(d * h * w);
        let mut out = vec![T::zero(); d * h * w];
        let mut line = vec![zero; w];
        for row in 0..d * h {
            let half = &grid[row * wf..(row + 1) * wf];
            for k in 0..w {
                line[k] = if k < wf {
                    if hermitian_multiplicity(k, w) == 1 {
                        Complex::new(half[k].re, T::zero())
                    } else {
                        half[k]
                    }
                } else {
                    half[w - k].conj()
                };
            }
            self.fw.inverse(&mut line);
            for (o, l) in out[row * w..(row + 1) * w].iter_mut().zip(&line) {
                *o = l.re * scale;
            }
        }
        out
    }

    /// `(B, D, H, W, C)` real volume to `(B, D, H, W/2+1, C)` half spectrum.
    pub fn forward(&self, input: &Tensor<T>) -> Result<ComplexTensor<T>> {
        let dims = input.dims5()?;
        if dims.spatial() != self.dims {
            return Err(Error::config(format!(
                "FFT plan is for grid {:?}, input has {:?}",
                self.dims,
                dims.spatial()
            )));
        }
        let [d, h, w] = self.dims;
        let wf = half_width(w);
        let v = d * h * w;
        let c = dims.c;
        let x = input.data();
        let grids: Vec<Vec<Complex<T>>> = (0..dims.b * c)
            .into_par_iter()
            .map(|bc| {
                let (b, ch) = (bc / c, bc % c);
                let real: Vec<T> = (0..v).map(|i| x[(b * v + i) * c + ch]).collect();
                self.forward_grid(&real)
            })
            .collect();
        let vf = d * h * wf;
        let mut out = vec![Complex::new(T::zero(), T::zero()); dims.b * vf * c];
        for (bc, grid) in grids.iter().enumerate() {
            let (b, ch) = (bc / c, bc % c);
            for (i, &z) in grid.iter().enumerate() {
                out[(b * vf + i) * c + ch] = z;
            }
        }
        Tensor::new(vec![dims.b, d, h, wf, c], out)
    }

    /// `(B, D, H, W/2+1, C)` half spectrum back to a real `(B, D, H, W, C)` volume.
    pub fn inverse(&self, input: &ComplexTensor<T>) -> Result<Tensor<T>> {
        let dims = input.dims5()?;
        let [d, h, w] = self.dims;
        let wf = half_width(w);
        if [dims.d, dims.h, dims.w] != [d, h, wf] {
            return Err(Error::config(format!(
                "half spectrum {:?} is inconsistent with width {w} (expected {:?})",
                [dims.d, dims.h, dims.w],
                [d, h, wf]
            )));
        }
        let c = dims.c;
        let vf = d * h * wf;
        let v = d * h * w;
        let z = input.data();
        let grids: Vec<Vec<T>> = (0..dims.b * c)
            .into_par_iter()
            .map(|bc| {
                let (b, ch) = (bc / c, bc % c);
                let grid: Vec<Complex<T>> = (0..vf).map(|i| z[(b * vf + i) * c + ch]).collect();
                self.inverse_grid(grid)
            })
            .collect();
        let mut out = vec![T::zero(); dims.b * v * c];
        for (bc, grid) in grids.iter().enumerate() {
            let (b, ch) = (bc / c, bc % c);
            for (i, &r) in grid.iter().enumerate() {
                out[(b * v + i) * c + ch] = r;
            }
        }
        Tensor::new(vec![dims.b, d, h, w, c], out)
    }
}

pub fn rfft3<T: Scalar>(input: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let d = input.dims5()?;
    FftPlan3::new(d.spatial())?.forward(input)
}

pub fn irfft3<T: Scalar>(input: &ComplexTensor<T>, original_width: usize) -> Result<Tensor<T>> {
    let d = input.dims5()?;
    check_width(original_width)?;
    if d.w != half_width(original_width) {
        return Err(Error::config(format!(
            "half spectrum has {} bins, width {original_width} needs {}",
            d.w,
            half_width(original_width)
        )));
    }
    FftPlan3::new([d.d, d.h, original_width])?.inverse(input)
}

fn scale_bins<T: Scalar>(z: &mut ComplexTensor<T>, w: usize, f: impl Fn(usize) -> T) {
    let d = z.dims5().expect("5-axis spectrum");
    let c = d.c;
    for (i, row) in z.data_mut().chunks_exact_mut(c).enumerate() {
        let kw = i % d.w;
        let s = f(hermitian_multiplicity(kw, w));
        for v in row {
            *v = *v * s;
        }
    }
}

/// Adjoint of [`rfft3`] under the real inner product `Re <a, b>`:
/// `N * irfft3(g / m)`, with `m` the Hermitian multiplicity of each bin.
pub fn rfft3_adjoint<T: Scalar>(plan: &FftPlan3<T>, grad: &ComplexTensor<T>) -> Result<Tensor<T>> {
    let [d, h, w] = plan.dims();
    let mut g = grad.clone();
    scale_bins(&mut g, w, |m| T::one() / T::from_usize_lossy(m));
    Ok(plan.inverse(&g)?.scale(T::from_usize_lossy(d * h * w)))
}

/// Adjoint of [`irfft3`]: `(m / N) * rfft3(g)`.
pub fn irfft3_adjoint<T: Scalar>(plan: &FftPlan3<T>, grad: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let [d, h, w] = plan.dims();
    let n = T::from_usize_lossy(d * h * w);
    let mut z = plan.forward(grad)?;
    scale_bins(&mut z, w, |m| T::from_usize_lossy(m) / n);
    Ok(z)
}
