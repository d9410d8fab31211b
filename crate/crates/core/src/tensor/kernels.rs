//! Raw numeric kernels over flat slices. The tape wraps these with shape
//! checks and backward bookkeeping.

use crate::error::{shape_err, Error, Result};
use crate::par;

/// Geometry of a 3-D convolution with a cubic kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: [usize; 5], kernel: [usize; 5], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, d, h, w] = input;
        let [cout, kcin, kd, kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::Argument("conv3d stride must be at least 1".into()));
        }
        if kcin != cin {
            return shape_err(format!(
                "conv3d kernel expects {} input channels, input has {}",
                kcin, cin
            ));
        }
        if kd != kh || kh != kw || kd == 0 {
            return shape_err(format!(
                "conv3d kernel must be a non-empty cube, got {}x{}x{}",
                kd, kh, kw
            ));
        }
        let mut output = [0; 3];
        for (axis, &extent) in [d, h, w].iter().enumerate() {
            let padded = extent + 2 * pad;
            if kd > padded {
                return shape_err(format!(
                    "conv3d kernel extent {} exceeds padded extent {} on axis {}",
                    kd, padded, axis
                ));
            }
            output[axis] = (padded - kd) / stride + 1;
        }
        Ok(Self {
            batch: n,
            cin,
            cout,
            k: kd,
            stride,
            pad,
            input: [d, h, w],
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [od, oh, ow] = self.output;
        [self.batch, self.cout, od, oh, ow]
    }

    /// Range of output indices `o` for which `o*stride + tap - pad` lands inside `0..extent`.
    fn valid(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let top = extent as isize - 1 - off;
        let hi = if top < 0 { -1 } else { top / s };
        let hi = hi.min(out_extent as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    fn src(&self, o: usize, tap: usize) -> usize {
        o * self.stride + tap - self.pad
    }
}

pub fn conv3d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let kvol = k * k * k;
    let mut out = vec![0.0; g.batch * g.cout * out_vol];
    par::for_each_chunk(&mut out, out_vol, |idx, plane| {
        let n = idx / g.cout;
        let co = idx % g.cout;
        plane.fill(bias[co]);
        for ci in 0..g.cin {
            let src = &input[(n * g.cin + ci) * in_vol..][..in_vol];
            let wk = &kernel[(co * g.cin + ci) * kvol..][..kvol];
            for kz in 0..k {
                let (z0, z1) = g.valid(kz, d, od);
                for ky in 0..k {
                    let (y0, y1) = g.valid(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = g.valid(kx, w, ow);
                        let wv = wk[(kz * k + ky) * k + kx];
                        for oz in z0..z1 {
                            let iz = g.src(oz, kz);
                            for oy in y0..y1 {
                                let iy = g.src(oy, ky);
                                let row_in = &src[(iz * h + iy) * w..][..w];
                                let row_out = &mut plane[(oz * oh + oy) * ow..][..ow];
                                for ox in x0..x1 {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv3d_grad_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let kvol = k * k * k;
    let mut gi = vec![0.0; g.batch * g.cin * in_vol];
    par::for_each_chunk(&mut gi, in_vol, |idx, plane| {
        let n = idx / g.cin;
        let ci = idx % g.cin;
        for co in 0..g.cout {
            let go = &grad_out[(n * g.cout + co) * out_vol..][..out_vol];
            let wk = &kernel[(co * g.cin + ci) * kvol..][..kvol];
            for kz in 0..k {
                let (z0, z1) = g.valid(kz, d, od);
                for ky in 0..k {
                    let (y0, y1) = g.valid(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = g.valid(kx, w, ow);
                        let wv = wk[(kz * k + ky) * k + kx];
                        for oz in z0..z1 {
                            let iz = g.src(oz, kz);
                            for oy in y0..y1 {
                                let iy = g.src(oy, ky);
                                let row_go = &go[(oz * oh + oy) * ow..][..ow];
                                let row_gi = &mut plane[(iz * h + iy) * w..][..w];
                                for ox in x0..x1 {
                                    row_gi[ox * g.stride + kx - g.pad] += wv * row_go[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gi
}

pub fn conv3d_grad_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let kvol = k * k * k;
    let mut gk = vec![0.0; g.cout * g.cin * kvol];
    par::for_each_chunk(&mut gk, kvol, |idx, taps| {
        let co = idx / g.cin;
        let ci = idx % g.cin;
        for n in 0..g.batch {
            let go = &grad_out[(n * g.cout + co) * out_vol..][..out_vol];
            let src = &input[(n * g.cin + ci) * in_vol..][..in_vol];
            for kz in 0..k {
                let (z0, z1) = g.valid(kz, d, od);
                for ky in 0..k {
                    let (y0, y1) = g.valid(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = g.valid(kx, w, ow);
                        let mut acc = 0.0;
                        for oz in z0..z1 {
                            let iz = g.src(oz, kz);
                            for oy in y0..y1 {
                                let iy = g.src(oy, ky);
                                let row_go = &go[(oz * oh + oy) * ow..][..ow];
                                let row_in = &src[(iz * h + iy) * w..][..w];
                                for ox in x0..x1 {
                                    acc += row_go[ox] * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        taps[(kz * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    gk
}

pub fn conv3d_grad_bias(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let out_vol: usize = g.output.iter().product();
    (0..g.cout)
        .map(|co| {
            (0..g.batch)
                .map(|n| {
                    grad_out[(n * g.cout + co) * out_vol..][..out_vol]
                        .iter()
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Linear interpolation stencil along one axis with clamp-to-edge.
#[derive(Clone, Copy, Debug)]
pub struct AxisStencil {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
    /// False when the coordinate was clamped; the stencil is then locally
    /// constant in the coordinate.
    pub inside: bool,
}

impl AxisStencil {
    pub fn new(coord: f64, extent: usize) -> Self {
        let hi = (extent - 1) as f64;
        let inside = (0.0..=hi).contains(&coord);
        let c = coord.clamp(0.0, hi);
        let i0 = (c.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        Self {
            i0,
            i1,
            t: c - i0 as f64,
            inside,
        }
    }

    fn weights(&self) -> [(usize, f64); 2] {
        [(self.i0, 1.0 - self.t), (self.i1, self.t)]
    }
}

/// Nested lerps (width, then height, then depth): exact on constant data.
#[inline]
fn sample(plane: &[f64], dims: [usize; 3], s: &[AxisStencil; 3]) -> f64 {
    let [_, h, w] = dims;
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let row = |z: usize, y: usize| {
        let r = &plane[(z * h + y) * w..];
        lerp(r[s[2].i0], r[s[2].i1], s[2].t)
    };
    let slab = |z: usize| lerp(row(z, s[1].i0), row(z, s[1].i1), s[1].t);
    lerp(slab(s[0].i0), slab(s[0].i1), s[0].t)
}

#[inline]
fn scatter(plane: &mut [f64], dims: [usize; 3], s: &[AxisStencil; 3], g: f64) {
    let [_, h, w] = dims;
    for (z, wz) in s[0].weights() {
        for (y, wy) in s[1].weights() {
            for (x, wx) in s[2].weights() {
                plane[(z * h + y) * w + x] += g * wz * wy * wx;
            }
        }
    }
}

/// d(sample)/d(coordinate) along each axis.
#[inline]
fn sample_grad(plane: &[f64], dims: [usize; 3], s: &[AxisStencil; 3]) -> [f64; 3] {
    let [_, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| plane[(z * h + y) * w + x];
    let (lz, ly, lx) = (s[0], s[1], s[2]);
    let mut out = [0.0; 3];
    if lz.inside {
        for (y, wy) in ly.weights() {
            for (x, wx) in lx.weights() {
                out[0] += wy * wx * (at(lz.i1, y, x) - at(lz.i0, y, x));
            }
        }
    }
    if ly.inside {
        for (z, wz) in lz.weights() {
            for (x, wx) in lx.weights() {
                out[1] += wz * wx * (at(z, ly.i1, x) - at(z, ly.i0, x));
            }
        }
    }
    if lx.inside {
        for (z, wz) in lz.weights() {
            for (y, wy) in ly.weights() {
                out[2] += wz * wy * (at(z, y, lx.i1) - at(z, y, lx.i0));
            }
        }
    }
    out
}

fn upsample_stencils(extent: usize, factor: usize) -> Vec<AxisStencil> {
    (0..extent * factor)
        .map(|t| {
            let s = (t as f64 + 0.5) / factor as f64 - 0.5;
            let mut st = AxisStencil::new(s, extent);
            st.inside = false;
            st
        })
        .collect()
}

pub fn upsample_forward(input: &[f64], dims: [usize; 5], factor: usize) -> Vec<f64> {
    let [n, c, d, h, w] = dims;
    if factor == 1 {
        return input.to_vec();
    }
    let (sz, sy, sx) = (
        upsample_stencils(d, factor),
        upsample_stencils(h, factor),
        upsample_stencils(w, factor),
    );
    let in_vol = d * h * w;
    let out_vol = in_vol * factor * factor * factor;
    let mut out = vec![0.0; n * c * out_vol];
    par::for_each_chunk(&mut out, out_vol, |idx, plane| {
        let src = &input[idx * in_vol..][..in_vol];
        let mut i = 0;
        for z in &sz {
            for y in &sy {
                for x in &sx {
                    plane[i] = sample(src, [d, h, w], &[*z, *y, *x]);
                    i += 1;
                }
            }
        }
    });
    out
}

pub fn upsample_backward(grad_out: &[f64], dims: [usize; 5], factor: usize) -> Vec<f64> {
    let [n, c, d, h, w] = dims;
    if factor == 1 {
        return grad_out.to_vec();
    }
    let (sz, sy, sx) = (
        upsample_stencils(d, factor),
        upsample_stencils(h, factor),
        upsample_stencils(w, factor),
    );
    let in_vol = d * h * w;
    let out_vol = in_vol * factor * factor * factor;
    let mut gi = vec![0.0; n * c * in_vol];
    par::for_each_chunk(&mut gi, in_vol, |idx, plane| {
        let go = &grad_out[idx * out_vol..][..out_vol];
        let mut i = 0;
        for z in &sz {
            for y in &sy {
                for x in &sx {
                    scatter(plane, [d, h, w], &[*z, *y, *x], go[i]);
                    i += 1;
                }
            }
        }
    });
    gi
}

fn warp_stencils(field: &[f64], n: usize, dims: [usize; 3], voxel: usize) -> [AxisStencil; 3] {
    let [d, h, w] = dims;
    let vol = d * h * w;
    let base = &field[n * 3 * vol..][..3 * vol];
    let z = voxel / (h * w);
    let y = (voxel / w) % h;
    let x = voxel % w;
    [
        AxisStencil::new(z as f64 + base[voxel], d),
        AxisStencil::new(y as f64 + base[vol + voxel], h),
        AxisStencil::new(x as f64 + base[2 * vol + voxel], w),
    ]
}

/// `out[n,c,p] = volume[n,c](p + field[n,:,p])`, trilinear with clamp-to-edge.
pub fn warp_forward(volume: &[f64], field: &[f64], dims: [usize; 5]) -> Vec<f64> {
    let [n, c, d, h, w] = dims;
    let vol = d * h * w;
    let mut out = vec![0.0; n * c * vol];
    par::for_each_chunk(&mut out, vol, |idx, plane| {
        let b = idx / c;
        let src = &volume[idx * vol..][..vol];
        for (p, o) in plane.iter_mut().enumerate() {
            let s = warp_stencils(field, b, [d, h, w], p);
            *o = sample(src, [d, h, w], &s);
        }
    });
    let _ = n;
    out
}

pub fn warp_grad_volume(grad_out: &[f64], field: &[f64], dims: [usize; 5]) -> Vec<f64> {
    let [n, c, d, h, w] = dims;
    let vol = d * h * w;
    let mut gv = vec![0.0; n * c * vol];
    par::for_each_chunk(&mut gv, vol, |idx, plane| {
        let b = idx / c;
        let go = &grad_out[idx * vol..][..vol];
        for (p, &g) in go.iter().enumerate() {
            let s = warp_stencils(field, b, [d, h, w], p);
            scatter(plane, [d, h, w], &s, g);
        }
    });
    gv
}

pub fn warp_grad_field(
    grad_out: &[f64],
    volume: &[f64],
    field: &[f64],
    dims: [usize; 5],
) -> Vec<f64> {
    let [n, c, d, h, w] = dims;
    let vol = d * h * w;
    let slice = h * w;
    let mut per_voxel = vec![[0.0f64; 3]; n * vol];
    par::for_each_chunk(&mut per_voxel, slice, |idx, rows| {
        let b = idx / d;
        let z = idx % d;
        for (j, acc) in rows.iter_mut().enumerate() {
            let p = z * slice + j;
            let s = warp_stencils(field, b, [d, h, w], p);
            for ch in 0..c {
                let plane = &volume[(b * c + ch) * vol..][..vol];
                let g = grad_out[(b * c + ch) * vol + p];
                if g == 0.0 {
                    continue;
                }
                let dv = sample_grad(plane, [d, h, w], &s);
                for a in 0..3 {
                    acc[a] += g * dv[a];
                }
            }
        }
    });
    let mut gf = vec![0.0; n * 3 * vol];
    for b in 0..n {
        for p in 0..vol {
            for a in 0..3 {
                gf[(b * 3 + a) * vol + p] = per_voxel[b * vol + p][a];
            }
        }
    }
    gf
}
