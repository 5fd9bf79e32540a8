//! 3D convolution and transposed convolution over channel-last volumes.
//!
//! Kernels are laid out `(Kd, Kh, Kw, Cin / groups, Cout)`. A transposed
//! convolution takes the kernel of the forward convolution it is the adjoint
//! of, i.e. `(Kd, Kh, Kw, Cout / groups, Cin)` from its own point of view.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims5, Tensor};

const AXES: [&str; 3] = ["depth", "height", "width"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn cube(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
            groups: 1,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::cube(1, 1, 0, cin, cout)
    }

    pub fn depthwise(kernel: usize, padding: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::cube(kernel, 1, padding, channels, channels)
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Shape of the kernel tensor a forward convolution with this spec expects.
    pub fn weight_shape(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        vec![kd, kh, kw, self.in_channels / self.groups, self.out_channels]
    }

    /// Shape of the kernel tensor a transposed convolution with this spec expects.
    pub fn transposed_weight_shape(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        vec![kd, kh, kw, self.out_channels / self.groups, self.in_channels]
    }

    /// The forward convolution whose adjoint is the transposed convolution `self`.
    pub fn adjoint(&self) -> Self {
        Self {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be >= 1"));
        }
        if self.kernel.contains(&0) {
            return Err(Error::config(format!(
                "convolution kernel {:?} has a zero extent",
                self.kernel
            )));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::config(format!(
                "groups = {} must divide in_channels = {} and out_channels = {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// `floor((n + 2P - K) / S) + 1` along `axis`.
    pub fn output_extent(&self, extent: usize, axis: usize) -> Result<usize> {
        let k = self.kernel[axis];
        let padded = extent + 2 * self.padding;
        if padded < k {
            return Err(Error::config(format!(
                "convolution output along {} would be empty: extent {extent} + 2*{} < kernel {k}",
                AXES[axis], self.padding
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    pub fn output_spatial(&self, spatial: [usize; 3]) -> Result<[usize; 3]> {
        Ok([
            self.output_extent(spatial[0], 0)?,
            self.output_extent(spatial[1], 1)?,
            self.output_extent(spatial[2], 2)?,
        ])
    }

    /// `(n - 1) * S - 2P + K` along `axis`.
    pub fn transposed_output_extent(&self, extent: usize, axis: usize) -> Result<usize> {
        let full = (extent.max(1) - 1) * self.stride + self.kernel[axis];
        if extent == 0 || full <= 2 * self.padding {
            return Err(Error::config(format!(
                "transposed convolution output along {} would be empty (extent {extent})",
                AXES[axis]
            )));
        }
        Ok(full - 2 * self.padding)
    }

    pub fn transposed_output_spatial(&self, spatial: [usize; 3]) -> Result<[usize; 3]> {
        Ok([
            self.transposed_output_extent(spatial[0], 0)?,
            self.transposed_output_extent(spatial[1], 1)?,
            self.transposed_output_extent(spatial[2], 2)?,
        ])
    }
}

fn check_weight<T: Scalar>(weight: &Tensor<T>, expected: &[usize], what: &str) -> Result<()> {
    if weight.shape() != expected {
        return Err(Error::config(format!(
            "{what} kernel has shape {:?}, expected {expected:?}",
            weight.shape()
        )));
    }
    Ok(())
}

fn check_bias<T>(bias: Option<&[T]>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != n => Err(Error::config(format!(
            "bias has {} entries, expected {n}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Dense or grouped 3D convolution.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let xd = input.dims5()?;
    if xd.c != spec.in_channels {
        return Err(Error::config(format!(
            "convolution expects {} input channels, got {} (channel axis)",
            spec.in_channels, xd.c
        )));
    }
    check_weight(weight, &spec.weight_shape(), "convolution")?;
    check_bias(bias, spec.out_channels)?;
    let [od, oh, ow] = spec.output_spatial(xd.spatial())?;
    let cout = spec.out_channels;
    let cin = spec.in_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let x = input.data();
    let w = weight.data();

    let mut out = vec![T::zero(); xd.b * od * oh * ow * cout];
    out.par_chunks_mut(oh * ow * cout)
        .enumerate()
        .for_each(|(row, out_row)| {
            let b = row / od;
            let z = (row % od) as isize;
            for y in 0..oh {
                for xo in 0..ow {
                    let acc = &mut out_row[(y * ow + xo) * cout..(y * ow + xo + 1) * cout];
                    if let Some(bias) = bias {
                        acc.copy_from_slice(bias);
                    }
                    for a in 0..kd {
                        let iz = z * s + a as isize - p;
                        if iz < 0 || iz >= xd.d as isize {
                            continue;
                        }
                        for bb in 0..kh {
                            let iy = y as isize * s + bb as isize - p;
                            if iy < 0 || iy >= xd.h as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let ix = xo as isize * s + c as isize - p;
                                if ix < 0 || ix >= xd.w as isize {
                                    continue;
                                }
                                let xi = (((b * xd.d + iz as usize) * xd.h + iy as usize) * xd.w
                                    + ix as usize)
                                    * cin;
                                let xs = &x[xi..xi + cin];
                                let ws = &w[((a * kh + bb) * kw + c) * cin_g * cout..];
                                for g in 0..spec.groups {
                                    let acc_g = &mut acc[g * cout_g..(g + 1) * cout_g];
                                    for cl in 0..cin_g {
                                        let xv = xs[g * cin_g + cl];
                                        let wr = &ws[cl * cout + g * cout_g..cl * cout + (g + 1) * cout_g];
                                        for (o, &wv) in acc_g.iter_mut().zip(wr) {
                                            *o += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![xd.b, od, oh, ow, cout], out)
}

/// Transposed 3D convolution: the adjoint of [`conv3d`] with the same kernel.
///
/// Output extent per axis is `(n - 1) * S - 2P + K`; with `K = S = 2, P = 0`
/// the volume exactly doubles.
pub fn conv3d_transposed<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let xd = input.dims5()?;
    if xd.c != spec.in_channels {
        return Err(Error::config(format!(
            "transposed convolution expects {} input channels, got {} (channel axis)",
            spec.in_channels, xd.c
        )));
    }
    check_weight(weight, &spec.transposed_weight_shape(), "transposed convolution")?;
    check_bias(bias, spec.out_channels)?;
    let out_spatial = spec.transposed_output_spatial(xd.spatial())?;
    transposed_kernel(input, weight, bias, spec, out_spatial)
}

/// Transposed convolution written into an explicit output extent. Positions
/// past the formula extent receive only the bias; a smaller extent crops.
pub fn conv3d_transposed_to<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out_spatial: [usize; 3],
) -> Result<Tensor<T>> {
    spec.validate()?;
    let xd = input.dims5()?;
    if xd.c != spec.in_channels {
        return Err(Error::config(format!(
            "transposed convolution expects {} input channels, got {} (channel axis)",
            spec.in_channels, xd.c
        )));
    }
    check_weight(weight, &spec.transposed_weight_shape(), "transposed convolution")?;
    check_bias(bias, spec.out_channels)?;
    if let Some(axis) = out_spatial.iter().position(|&e| e == 0) {
        return Err(Error::config(format!(
            "transposed convolution output {} extent must be >= 1",
            AXES[axis]
        )));
    }
    transposed_kernel(input, weight, bias, spec, out_spatial)
}

/// Gather-form transposed convolution into an explicit output extent, which
/// may exceed the formula by less than one stride (needed when the forward
/// convolution discarded trailing input rows).
fn transposed_kernel<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out_spatial: [usize; 3],
) -> Result<Tensor<T>> {
    let xd = input.dims5()?;
    let [od, oh, ow] = out_spatial;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let x = input.data();
    let w = weight.data();

    // Input index contributing to output index `o` through kernel tap `k`.
    let source = |o: usize, k: usize, n: usize| -> Option<usize> {
        let t = o as isize + p - k as isize;
        if t < 0 || t % s != 0 {
            return None;
        }
        let i = (t / s) as usize;
        (i < n).then_some(i)
    };

    let mut out = vec![T::zero(); xd.b * od * oh * ow * cout];
    out.par_chunks_mut(oh * ow * cout)
        .enumerate()
        .for_each(|(row, out_row)| {
            let b = row / od;
            let z = row % od;
            for y in 0..oh {
                for xo in 0..ow {
                    let acc = &mut out_row[(y * ow + xo) * cout..(y * ow + xo + 1) * cout];
                    if let Some(bias) = bias {
                        acc.copy_from_slice(bias);
                    }
                    for a in 0..kd {
                        let Some(iz) = source(z, a, xd.d) else { continue };
                        for bb in 0..kh {
                            let Some(iy) = source(y, bb, xd.h) else { continue };
                            for c in 0..kw {
                                let Some(ix) = source(xo, c, xd.w) else { continue };
                                let xi = (((b * xd.d + iz) * xd.h + iy) * xd.w + ix) * cin;
                                let xs = &x[xi..xi + cin];
                                let ws = &w[((a * kh + bb) * kw + c) * cout_g * cin..];
                                for (co, o) in acc.iter_mut().enumerate() {
                                    let g = co / cout_g;
                                    let col = co % cout_g;
                                    let wr = &ws[col * cin + g * cin_g..col * cin + (g + 1) * cin_g];
                                    let xg = &xs[g * cin_g..(g + 1) * cin_g];
                                    let mut sum = T::zero();
                                    for (&xv, &wv) in xg.iter().zip(wr) {
                                        sum += xv * wv;
                                    }
                                    *o += sum;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![xd.b, od, oh, ow, cout], out)
}

/// Gradient of `sum(grad_out * conv3d(x, w))` with respect to `w`.
pub fn conv3d_weight_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let xd = input.dims5()?;
    let gd = grad_out.dims5()?;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let x = input.data();
    let gy = grad_out.data();

    let mut gw = vec![T::zero(); kd * kh * kw * cin_g * cout];
    gw.par_chunks_mut(cin_g * cout)
        .enumerate()
        .for_each(|(tap, gw_tap)| {
            let a = tap / (kh * kw);
            let bb = (tap / kw) % kh;
            let c = tap % kw;
            for b in 0..gd.b {
                for z in 0..gd.d {
                    let iz = z as isize * s + a as isize - p;
                    if iz < 0 || iz >= xd.d as isize {
                        continue;
                    }
                    for y in 0..gd.h {
                        let iy = y as isize * s + bb as isize - p;
                        if iy < 0 || iy >= xd.h as isize {
                            continue;
                        }
                        for xo in 0..gd.w {
                            let ix = xo as isize * s + c as isize - p;
                            if ix < 0 || ix >= xd.w as isize {
                                continue;
                            }
                            let xi = (((b * xd.d + iz as usize) * xd.h + iy as usize) * xd.w
                                + ix as usize)
                                * cin;
                            let gi = (((b * gd.d + z) * gd.h + y) * gd.w + xo) * cout;
                            let xs = &x[xi..xi + cin];
                            let gs = &gy[gi..gi + cout];
                            for g in 0..spec.groups {
                                let gsg = &gs[g * cout_g..(g + 1) * cout_g];
                                for cl in 0..cin_g {
                                    let xv = xs[g * cin_g + cl];
                                    let row = &mut gw_tap
                                        [cl * cout + g * cout_g..cl * cout + (g + 1) * cout_g];
                                    for (r, &gv) in row.iter_mut().zip(gsg) {
                                        *r += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(spec.weight_shape(), gw)
}

/// Per-channel sum over every position, i.e. the bias gradient.
pub fn channel_sum<T: Scalar>(grad_out: &Tensor<T>) -> Vec<T> {
    let c = *grad_out.shape().last().unwrap_or(&1);
    let mut acc = vec![T::zero(); c];
    for row in grad_out.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let xd: Dims5 = input.dims5()?;
    let gx = transposed_kernel(grad_out, weight, None, &spec.adjoint(), xd.spatial())?;
    Ok(ConvGrads {
        input: gx,
        weight: conv3d_weight_grad(input, grad_out, spec)?,
        bias: channel_sum(grad_out),
    })
}

pub fn conv3d_transposed_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let forward = spec.adjoint();
    Ok(ConvGrads {
        input: conv3d(grad_out, weight, None, &forward)?,
        weight: conv3d_weight_grad(grad_out, input, &forward)?,
        bias: channel_sum(grad_out),
    })
}

/// Backward of [`conv3d_transposed_to`]; `grad_out` may have any extent.
pub fn conv3d_transposed_to_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let xd = input.dims5()?;
    let gd = grad_out.dims5()?;
    let full = spec.transposed_output_spatial(xd.spatial())?;
    let padded: [usize; 3] = std::array::from_fn(|i| full[i].max(gd.spatial()[i]));
    let grad = if padded == gd.spatial() {
        grad_out.clone()
    } else {
        let mut g = Tensor::zeros(&[gd.b, padded[0], padded[1], padded[2], gd.c]);
        let row = gd.w * gd.c;
        for b in 0..gd.b {
            for z in 0..gd.d {
                for y in 0..gd.h {
                    let src = ((b * gd.d + z) * gd.h + y) * row;
                    let dst = (((b * padded[0] + z) * padded[1] + y) * padded[2]) * gd.c;
                    g.data_mut()[dst..dst + row].copy_from_slice(&grad_out.data()[src..src + row]);
                }
            }
        }
        g
    };
    let forward = spec.adjoint();
    Ok(ConvGrads {
        input: conv3d(&grad, weight, None, &forward)?,
        weight: conv3d_weight_grad(&grad, input, &forward)?,
        bias: channel_sum(grad_out),
    })
}
