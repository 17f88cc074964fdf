//! Raw loops behind the graph operations.
//!
//! Spatial operations work on a `[C, D, H, W]` view; one-dimensional
//! signals `[C, L]` are handled as `[C, 1, 1, L]`. Each parallel work item
//! owns a disjoint slab of the output and reduces in a fixed order.

use super::Scalar;
use crate::par::Exec;

/// Geometry of a strided-1 convolution (cross-correlation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_ext: [usize; 3],
    pub k: [usize; 3],
    pub pad_lo: [usize; 3],
    pub out_ext: [usize; 3],
}

impl ConvGeom {
    fn kernel_index(&self, co: usize, ci: usize, dz: usize, dy: usize, dx: usize) -> usize {
        (((co * self.c_in + ci) * self.k[0] + dz) * self.k[1] + dy) * self.k[2] + dx
    }
}

/// Output positions `o` with `o + d - lo` inside `[0, n)`.
#[inline]
fn valid_range(d: usize, lo: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = lo.saturating_sub(d);
    let end = (n_in + lo).saturating_sub(d).min(n_out);
    (start, end.max(start))
}

pub fn conv_forward<S: Scalar>(exec: Exec, g: &ConvGeom, input: &[S], kernel: &[S]) -> Vec<S> {
    let [od, oh, ow] = g.out_ext;
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.k;
    let [pd, ph, pw] = g.pad_lo;
    let plane = oh * ow;
    let mut out = vec![S::zero(); g.c_out * od * plane];
    exec.for_each_chunk(&mut out, plane, |idx, o_plane| {
        let co = idx / od;
        let z = idx % od;
        for ci in 0..g.c_in {
            for dz in 0..kd {
                let zi = z + dz;
                if zi < pd || zi - pd >= id {
                    continue;
                }
                let in_plane = &input[(ci * id + zi - pd) * ih * iw..][..ih * iw];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(dy, ph, ih, oh);
                    for dx in 0..kw {
                        let (x0, x1) = valid_range(dx, pw, iw, ow);
                        if x0 == x1 {
                            continue;
                        }
                        let w = kernel[g.kernel_index(co, ci, dz, dy, dx)];
                        for y in y0..y1 {
                            let yi = y + dy - ph;
                            let orow = &mut o_plane[y * ow + x0..y * ow + x1];
                            let irow = &in_plane[yi * iw + x0 + dx - pw..][..x1 - x0];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o = *o + w * i;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_backward_input<S: Scalar>(
    exec: Exec,
    g: &ConvGeom,
    grad_out: &[S],
    kernel: &[S],
) -> Vec<S> {
    let [od, oh, ow] = g.out_ext;
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.k;
    let [pd, ph, pw] = g.pad_lo;
    let plane = ih * iw;
    let mut gin = vec![S::zero(); g.c_in * id * plane];
    exec.for_each_chunk(&mut gin, plane, |idx, g_plane| {
        let ci = idx / id;
        let zi = idx % id;
        for co in 0..g.c_out {
            for dz in 0..kd {
                // z = zi + pd - dz
                let zp = zi + pd;
                if zp < dz || zp - dz >= od {
                    continue;
                }
                let go_plane = &grad_out[(co * od + zp - dz) * oh * ow..][..oh * ow];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(dy, ph, ih, oh);
                    for dx in 0..kw {
                        let (x0, x1) = valid_range(dx, pw, iw, ow);
                        if x0 == x1 {
                            continue;
                        }
                        let w = kernel[g.kernel_index(co, ci, dz, dy, dx)];
                        for y in y0..y1 {
                            let yi = y + dy - ph;
                            let grow = &mut g_plane[yi * iw + x0 + dx - pw..][..x1 - x0];
                            let orow = &go_plane[y * ow + x0..y * ow + x1];
                            for (gi, &o) in grow.iter_mut().zip(orow) {
                                *gi = *gi + w * o;
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv_backward_kernel<S: Scalar>(
    exec: Exec,
    g: &ConvGeom,
    grad_out: &[S],
    input: &[S],
) -> Vec<S> {
    let [od, oh, ow] = g.out_ext;
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.k;
    let [pd, ph, pw] = g.pad_lo;
    let block = kd * kh * kw;
    let mut gk = vec![S::zero(); g.c_out * g.c_in * block];
    exec.for_each_chunk(&mut gk, block, |idx, g_block| {
        let co = idx / g.c_in;
        let ci = idx % g.c_in;
        for dz in 0..kd {
            let (z0, z1) = valid_range(dz, pd, id, od);
            for dy in 0..kh {
                let (y0, y1) = valid_range(dy, ph, ih, oh);
                for dx in 0..kw {
                    let (x0, x1) = valid_range(dx, pw, iw, ow);
                    if x0 == x1 {
                        continue;
                    }
                    let mut acc = S::zero();
                    for z in z0..z1 {
                        let zi = z + dz - pd;
                        for y in y0..y1 {
                            let yi = y + dy - ph;
                            let orow = &grad_out[((co * od + z) * oh + y) * ow + x0..][..x1 - x0];
                            let irow =
                                &input[((ci * id + zi) * ih + yi) * iw + x0 + dx - pw..][..x1 - x0];
                            for (&o, &i) in orow.iter().zip(irow) {
                                acc = acc + o * i;
                            }
                        }
                    }
                    g_block[(dz * kh + dy) * kw + dx] = acc;
                }
            }
        }
    });
    gk
}

/// Max pooling with trailing windows clipped to the extent, which is the
/// same as replicate-padding the trailing face. Returns values and the flat
/// input index of each window's first maximum.
pub fn maxpool_forward<S: Scalar>(
    exec: Exec,
    channels: usize,
    ext: [usize; 3],
    window: [usize; 3],
    input: &[S],
) -> (Vec<S>, Vec<usize>) {
    let out_ext = pooled_extent(ext, window);
    let [od, oh, ow] = out_ext;
    let plane = oh * ow;
    let items: Vec<(Vec<S>, Vec<usize>)> = exec.map(channels * od, |idx| {
        let c = idx / od;
        let z = idx % od;
        let mut vals = Vec::with_capacity(plane);
        let mut args = Vec::with_capacity(plane);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = S::neg_infinity();
                let mut arg = usize::MAX;
                for zi in z * window[0]..((z + 1) * window[0]).min(ext[0]) {
                    for yi in y * window[1]..((y + 1) * window[1]).min(ext[1]) {
                        for xi in x * window[2]..((x + 1) * window[2]).min(ext[2]) {
                            let flat = ((c * ext[0] + zi) * ext[1] + yi) * ext[2] + xi;
                            let v = input[flat];
                            if arg == usize::MAX || v > best {
                                best = v;
                                arg = flat;
                            }
                        }
                    }
                }
                vals.push(best);
                args.push(arg);
            }
        }
        (vals, args)
    });
    let mut vals = Vec::with_capacity(channels * od * plane);
    let mut args = Vec::with_capacity(channels * od * plane);
    for (v, a) in items {
        vals.extend(v);
        args.extend(a);
    }
    (vals, args)
}

pub fn pooled_extent(ext: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    [
        ext[0].div_ceil(window[0]),
        ext[1].div_ceil(window[1]),
        ext[2].div_ceil(window[2]),
    ]
}

/// Nearest-neighbour replication by `factor` per axis.
pub fn upsample_forward<S: Scalar>(
    channels: usize,
    ext: [usize; 3],
    factor: [usize; 3],
    input: &[S],
) -> Vec<S> {
    let out_ext = [ext[0] * factor[0], ext[1] * factor[1], ext[2] * factor[2]];
    let mut out = Vec::with_capacity(channels * out_ext.iter().product::<usize>());
    for c in 0..channels {
        for z in 0..out_ext[0] {
            for y in 0..out_ext[1] {
                let row = &input[((c * ext[0] + z / factor[0]) * ext[1] + y / factor[1]) * ext[2]..]
                    [..ext[2]];
                for x in 0..out_ext[2] {
                    out.push(row[x / factor[2]]);
                }
            }
        }
    }
    out
}

pub fn upsample_backward<S: Scalar>(
    channels: usize,
    ext: [usize; 3],
    factor: [usize; 3],
    grad_out: &[S],
) -> Vec<S> {
    let out_ext = [ext[0] * factor[0], ext[1] * factor[1], ext[2] * factor[2]];
    let mut gin = vec![S::zero(); channels * ext.iter().product::<usize>()];
    let mut k = 0;
    for c in 0..channels {
        for z in 0..out_ext[0] {
            for y in 0..out_ext[1] {
                let base = ((c * ext[0] + z / factor[0]) * ext[1] + y / factor[1]) * ext[2];
                for x in 0..out_ext[2] {
                    gin[base + x / factor[2]] = gin[base + x / factor[2]] + grad_out[k];
                    k += 1;
                }
            }
        }
    }
    gin
}

/// Source index of every output cell of a trailing replicate-pad
/// (`out_ext >= ext`) or leading crop (`out_ext <= ext`).
pub fn clamp_index_map(channels: usize, ext: [usize; 3], out_ext: [usize; 3]) -> Vec<usize> {
    let mut map = Vec::with_capacity(channels * out_ext.iter().product::<usize>());
    for c in 0..channels {
        for z in 0..out_ext[0] {
            let zs = z.min(ext[0] - 1);
            for y in 0..out_ext[1] {
                let ys = y.min(ext[1] - 1);
                for x in 0..out_ext[2] {
                    map.push(((c * ext[0] + zs) * ext[1] + ys) * ext[2] + x.min(ext[2] - 1));
                }
            }
        }
    }
    map
}
