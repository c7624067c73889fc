//! Per-sample convolution kernels on `C x D x H x W` buffers.
//!
//! 3x3x3 convolutions are lowered to GEMM over im2col tiles of whole depth
//! slices. Tiles are rebuilt in the backward pass instead of being stored.

use crate::real::Real;

/// Target number of im2col columns per tile.
const TILE_COLUMNS: usize = 1024;

fn voxels(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn depth_tile(dims: [usize; 3]) -> usize {
    let plane = dims[1] * dims[2];
    (TILE_COLUMNS / plane).clamp(1, dims[0])
}

/// Fills `col` (`cin*27 x nz*H*W`) for output slices `z0..z0+nz`.
fn im2col3<T: Real>(x: &[T], cin: usize, dims: [usize; 3], z0: usize, nz: usize, col: &mut [T]) {
    let [d, h, w] = dims;
    let plane = h * w;
    let vol = d * plane;
    let ncols = nz * plane;
    for ci in 0..cin {
        let src = &x[ci * vol..(ci + 1) * vol];
        for k in 0..27 {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut col[(ci * 27 + k) * ncols..(ci * 27 + k + 1) * ncols];
            for zz in 0..nz {
                let zs = (z0 + zz + kz) as isize - 1;
                let dst_plane = &mut row[zz * plane..(zz + 1) * plane];
                if zs < 0 || zs >= d as isize {
                    dst_plane.fill(T::zero());
                    continue;
                }
                let src_plane = &src[zs as usize * plane..(zs as usize + 1) * plane];
                for y in 0..h {
                    let ys = (y + ky) as isize - 1;
                    let dst = &mut dst_plane[y * w..(y + 1) * w];
                    if ys < 0 || ys >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let s = &src_plane[ys as usize * w..(ys as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => dst.copy_from_slice(s),
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters `col` back into `dx`.
fn col2im3<T: Real>(col: &[T], cin: usize, dims: [usize; 3], z0: usize, nz: usize, dx: &mut [T]) {
    let [d, h, w] = dims;
    let plane = h * w;
    let vol = d * plane;
    let ncols = nz * plane;
    for ci in 0..cin {
        let dst_ch = &mut dx[ci * vol..(ci + 1) * vol];
        for k in 0..27 {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &col[(ci * 27 + k) * ncols..(ci * 27 + k + 1) * ncols];
            for zz in 0..nz {
                let zs = (z0 + zz + kz) as isize - 1;
                if zs < 0 || zs >= d as isize {
                    continue;
                }
                let src_plane = &row[zz * plane..(zz + 1) * plane];
                let dst_plane = &mut dst_ch[zs as usize * plane..(zs as usize + 1) * plane];
                for y in 0..h {
                    let ys = (y + ky) as isize - 1;
                    if ys < 0 || ys >= h as isize {
                        continue;
                    }
                    let s = &src_plane[y * w..(y + 1) * w];
                    let dst = &mut dst_plane[ys as usize * w..(ys as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&s[1..]).for_each(|(a, &b)| *a += b),
                        1 => dst.iter_mut().zip(s).for_each(|(a, &b)| *a += b),
                        _ => dst[1..].iter_mut().zip(&s[..w - 1]).for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3x3 convolution. `w` is `cout x cin x 27`, `out` is `cout x D x H x W`.
pub fn conv3<T: Real>(x: &[T], cin: usize, dims: [usize; 3], w: &[T], b: &[T], cout: usize, out: &mut [T]) {
    let vol = voxels(dims);
    let plane = dims[1] * dims[2];
    let kdim = cin * 27;
    debug_assert_eq!(x.len(), cin * vol);
    debug_assert_eq!(w.len(), cout * kdim);
    debug_assert_eq!(out.len(), cout * vol);
    for (co, ch) in out.chunks_mut(vol).enumerate() {
        ch.fill(b[co]);
    }
    let tz = depth_tile(dims);
    let mut col = vec![T::zero(); kdim * tz * plane];
    let mut z0 = 0;
    while z0 < dims[0] {
        let nz = tz.min(dims[0] - z0);
        let ncols = nz * plane;
        im2col3(x, cin, dims, z0, nz, &mut col[..kdim * ncols]);
        unsafe {
            T::gemm(
                cout,
                kdim,
                ncols,
                T::one(),
                w.as_ptr(),
                kdim as isize,
                1,
                col.as_ptr(),
                ncols as isize,
                1,
                T::one(),
                out.as_mut_ptr().add(z0 * plane),
                vol as isize,
                1,
            );
        }
        z0 += nz;
    }
}

/// Backward of [`conv3`]: accumulates into `dw`, `db`, and (if given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward<T: Real>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let vol = voxels(dims);
    let plane = dims[1] * dims[2];
    let kdim = cin * 27;
    for (co, ch) in dy.chunks(vol).enumerate() {
        db[co] += ch.iter().copied().sum::<T>();
    }
    let tz = depth_tile(dims);
    let mut col = vec![T::zero(); kdim * tz * plane];
    let mut dcol = if dx.is_some() {
        vec![T::zero(); kdim * tz * plane]
    } else {
        Vec::new()
    };
    let mut z0 = 0;
    while z0 < dims[0] {
        let nz = tz.min(dims[0] - z0);
        let ncols = nz * plane;
        im2col3(x, cin, dims, z0, nz, &mut col[..kdim * ncols]);
        unsafe {
            // dw += dy_tile * col^T
            T::gemm(
                cout,
                ncols,
                kdim,
                T::one(),
                dy.as_ptr().add(z0 * plane),
                vol as isize,
                1,
                col.as_ptr(),
                1,
                ncols as isize,
                T::one(),
                dw.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            unsafe {
                // dcol = w^T * dy_tile
                T::gemm(
                    kdim,
                    cout,
                    ncols,
                    T::one(),
                    w.as_ptr(),
                    1,
                    kdim as isize,
                    dy.as_ptr().add(z0 * plane),
                    vol as isize,
                    1,
                    T::zero(),
                    dcol.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            col2im3(&dcol[..kdim * ncols], cin, dims, z0, nz, dx);
        }
        z0 += nz;
    }
}

fn im2col_down<T: Real>(x: &[T], cin: usize, dims: [usize; 3], col: &mut [T]) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ncols = od * oh * ow;
    let vol = d * h * w;
    for ci in 0..cin {
        let src = &x[ci * vol..(ci + 1) * vol];
        for k in 0..8 {
            let (a, b, c) = (k / 4, (k / 2) % 2, k % 2);
            let row = &mut col[(ci * 8 + k) * ncols..(ci * 8 + k + 1) * ncols];
            let mut i = 0;
            for z in 0..od {
                for y in 0..oh {
                    let base = ((2 * z + a) * h + 2 * y + b) * w + c;
                    for xx in 0..ow {
                        row[i] = src[base + 2 * xx];
                        i += 1;
                    }
                }
            }
        }
    }
}

fn col2im_down<T: Real>(col: &[T], cin: usize, dims: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ncols = od * oh * ow;
    let vol = d * h * w;
    for ci in 0..cin {
        let dst = &mut dx[ci * vol..(ci + 1) * vol];
        for k in 0..8 {
            let (a, b, c) = (k / 4, (k / 2) % 2, k % 2);
            let row = &col[(ci * 8 + k) * ncols..(ci * 8 + k + 1) * ncols];
            let mut i = 0;
            for z in 0..od {
                for y in 0..oh {
                    let base = ((2 * z + a) * h + 2 * y + b) * w + c;
                    for xx in 0..ow {
                        dst[base + 2 * xx] += row[i];
                        i += 1;
                    }
                }
            }
        }
    }
}

/// 2x2x2 convolution with stride 2. `dims` are the input extents (all even).
pub fn conv_down<T: Real>(x: &[T], cin: usize, dims: [usize; 3], w: &[T], b: &[T], cout: usize, out: &mut [T]) {
    let ncols = voxels(dims) / 8;
    let kdim = cin * 8;
    let mut col = vec![T::zero(); kdim * ncols];
    im2col_down(x, cin, dims, &mut col);
    for (co, ch) in out.chunks_mut(ncols).enumerate() {
        ch.fill(b[co]);
    }
    unsafe {
        T::gemm(
            cout,
            kdim,
            ncols,
            T::one(),
            w.as_ptr(),
            kdim as isize,
            1,
            col.as_ptr(),
            ncols as isize,
            1,
            T::one(),
            out.as_mut_ptr(),
            ncols as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_down_backward<T: Real>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let ncols = voxels(dims) / 8;
    let kdim = cin * 8;
    for (co, ch) in dy.chunks(ncols).enumerate() {
        db[co] += ch.iter().copied().sum::<T>();
    }
    let mut col = vec![T::zero(); kdim * ncols];
    im2col_down(x, cin, dims, &mut col);
    unsafe {
        T::gemm(
            cout,
            ncols,
            kdim,
            T::one(),
            dy.as_ptr(),
            ncols as isize,
            1,
            col.as_ptr(),
            1,
            ncols as isize,
            T::one(),
            dw.as_mut_ptr(),
            kdim as isize,
            1,
        );
        T::gemm(
            kdim,
            cout,
            ncols,
            T::one(),
            w.as_ptr(),
            1,
            kdim as isize,
            dy.as_ptr(),
            ncols as isize,
            1,
            T::zero(),
            col.as_mut_ptr(),
            ncols as isize,
            1,
        );
    }
    col2im_down(&col, cin, dims, dx);
}

/// Pointwise (1x1x1) convolution over `n` voxels.
pub fn conv1<T: Real>(x: &[T], cin: usize, n: usize, w: &[T], b: &[T], cout: usize, out: &mut [T]) {
    for (co, ch) in out.chunks_mut(n).enumerate() {
        ch.fill(b[co]);
    }
    unsafe {
        T::gemm(
            cout,
            cin,
            n,
            T::one(),
            w.as_ptr(),
            cin as isize,
            1,
            x.as_ptr(),
            n as isize,
            1,
            T::one(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1_backward<T: Real>(
    x: &[T],
    cin: usize,
    n: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    for (co, ch) in dy.chunks(n).enumerate() {
        db[co] += ch.iter().copied().sum::<T>();
    }
    unsafe {
        T::gemm(
            cout,
            n,
            cin,
            T::one(),
            dy.as_ptr(),
            n as isize,
            1,
            x.as_ptr(),
            1,
            n as isize,
            T::one(),
            dw.as_mut_ptr(),
            cin as isize,
            1,
        );
        if let Some(dx) = dx {
            T::gemm(
                cin,
                cout,
                n,
                T::one(),
                w.as_ptr(),
                1,
                cin as isize,
                dy.as_ptr(),
                n as isize,
                1,
                T::one(),
                dx.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Nearest-neighbour 2x upsampling. `dims` are the input extents.
pub fn upsample2<T: Real>(x: &[T], c: usize, dims: [usize; 3], out: &mut [T]) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for ch in 0..c {
        let src = &x[ch * d * h * w..(ch + 1) * d * h * w];
        let dst = &mut out[ch * od * oh * ow..(ch + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let s = &src[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                let row = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                for (xx, v) in row.iter_mut().enumerate() {
                    *v = s[xx / 2];
                }
            }
        }
    }
}

/// Adjoint of [`upsample2`]: sums each 2x2x2 block. `dims` are the coarse extents.
pub fn upsample2_backward<T: Real>(dy: &[T], c: usize, dims: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    dx.fill(T::zero());
    for ch in 0..c {
        let src = &dy[ch * od * oh * ow..(ch + 1) * od * oh * ow];
        let dst = &mut dx[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let row = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                let t = &mut dst[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                for (xx, &v) in row.iter().enumerate() {
                    t[xx / 2] += v;
                }
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` where the ReLU output `y` was not positive.
pub fn relu_backward_inplace<T: Real>(y: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn mul_inplace<T: Real>(x: &mut [T], m: &[T]) {
    for (v, &s) in x.iter_mut().zip(m) {
        *v *= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution with zero padding.
    fn conv3_naive(x: &[f64], cin: usize, dims: [usize; 3], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let [d, h, wd] = dims;
        let mut out = vec![0.0; cout * d * h * wd];
        for co in 0..cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for k in 0..27 {
                                let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
                                let (zs, ys, xs) = (z as isize + kz as isize - 1, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if zs < 0 || ys < 0 || xs < 0 || zs >= d as isize || ys >= h as isize || xs >= wd as isize {
                                    continue;
                                }
                                let xi = ((ci * d + zs as usize) * h + ys as usize) * wd + xs as usize;
                                acc += w[(co * cin + ci) * 27 + k] * x[xi];
                            }
                        }
                        out[((co * d + z) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * 0.7548 + s) * 12.9898).sin()).collect()
    }

    #[test]
    fn conv3_matches_naive() {
        // Depth large enough to exercise several tiles.
        let dims = [40, 6, 5];
        let (cin, cout) = (2, 3);
        let x = pseudo(cin * 40 * 30, 0.1);
        let w = pseudo(cout * cin * 27, 0.2);
        let b = pseudo(cout, 0.3);
        let mut out = vec![0.0; cout * 40 * 30];
        conv3(&x, cin, dims, &w, &b, cout, &mut out);
        let want = conv3_naive(&x, cin, dims, &w, &b, cout);
        for (a, e) in out.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    /// <conv(x), g> = <x, conv^T(g)> and likewise for the weights.
    #[test]
    fn conv3_backward_is_adjoint() {
        let dims = [4, 3, 5];
        let (cin, cout) = (2, 2);
        let n = 60;
        let x = pseudo(cin * n, 0.4);
        let w = pseudo(cout * cin * 27, 0.5);
        let zero_b = vec![0.0; cout];
        let g = pseudo(cout * n, 0.6);
        let mut y = vec![0.0; cout * n];
        conv3(&x, cin, dims, &w, &zero_b, cout, &mut y);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; x.len()];
        conv3_backward(&x, cin, dims, &w, cout, &g, &mut dw, &mut db, Some(&mut dx));
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        assert!((db.iter().sum::<f64>() - g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn down_and_up_are_adjoint() {
        let dims = [4, 2, 6];
        let (cin, cout) = (2, 3);
        let n = 48;
        let x = pseudo(cin * n, 0.7);
        let w = pseudo(cout * cin * 8, 0.8);
        let g = pseudo(cout * n / 8, 0.9);
        let mut y = vec![0.0; cout * n / 8];
        conv_down(&x, cin, dims, &w, &[0.0; 3], cout, &mut y);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; x.len()];
        conv_down_backward(&x, cin, dims, &w, cout, &g, &mut dw, &mut db, &mut dx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((lhs - x.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-10);
        assert!((lhs - w.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-10);

        let coarse = [2, 1, 3];
        let u = pseudo(2 * 6, 1.0);
        let mut up = vec![0.0; 2 * 48];
        upsample2(&u, 2, coarse, &mut up);
        let gu = pseudo(2 * 48, 1.1);
        let mut du = vec![0.0; 12];
        upsample2_backward(&gu, 2, coarse, &mut du);
        let lhs: f64 = up.iter().zip(&gu).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
