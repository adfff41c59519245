//! Layer kernels with explicit forward caches and exact backward passes.
//! All loops run in a fixed order so results do not depend on scheduling.

use super::tensor::{Real, Tensor4};
use crate::grid::reflect_index;

/// Column matrices of a 3x3 reflect-padded convolution, one per batch item,
/// laid out `(cin * 9) x (h * w)`.
pub struct ConvCache<T> {
    pub in_dims: [usize; 4],
    pub cols: Vec<T>,
}

fn im2col3<T: Real>(x: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    let col_idx: Vec<[usize; 3]> = (0..w)
        .map(|c| [reflect_index(c as isize - 1, w), c, reflect_index(c as isize + 1, w)])
        .collect();
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for r in 0..h {
                    let src = &plane[reflect_index(r as isize + ky as isize - 1, h) * w..][..w];
                    let dst = &mut row[r * w..(r + 1) * w];
                    if kx == 1 {
                        dst.copy_from_slice(src);
                    } else {
                        for c in 0..w {
                            dst[c] = src[col_idx[c][kx]];
                        }
                    }
                }
            }
        }
    }
}

fn col2im3<T: Real>(dcols: &[T], cin: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for r in 0..h {
                    let rr = reflect_index(r as isize + ky as isize - 1, h);
                    for c in 0..w {
                        let cc = reflect_index(c as isize + kx as isize - 1, w);
                        plane[rr * w + cc] = plane[rr * w + cc] + row[r * w + c];
                    }
                }
            }
        }
    }
}

/// 3x3 convolution with one pixel of reflection padding.
/// `weight` is `cout x cin x 3 x 3`.
pub fn conv3x3_forward<T: Real>(x: &Tensor4<T>, weight: &[T], bias: &[T]) -> (Tensor4<T>, ConvCache<T>) {
    let [n, cin, h, w] = x.dims;
    let cout = bias.len();
    assert_eq!(weight.len(), cout * cin * 9, "conv3x3 weight shape");
    let hw = h * w;
    let k = cin * 9;
    let mut cols = vec![T::zero(); n * k * hw];
    let mut y = Tensor4::zeros([n, cout, h, w]);
    for b in 0..n {
        let c = &mut cols[b * k * hw..(b + 1) * k * hw];
        im2col3(x.item(b), cin, h, w, c);
        let out = y.item_mut(b);
        for co in 0..cout {
            out[co * hw..(co + 1) * hw].fill(bias[co]);
        }
        T::gemm(cout, k, hw, T::one(), weight, false, c, false, T::one(), out);
    }
    (y, ConvCache { in_dims: x.dims, cols })
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv3x3_backward<T: Real>(cache: &ConvCache<T>, weight: &[T], dy: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, cin, h, w] = cache.in_dims;
    let cout = dy.channels();
    let hw = h * w;
    let k = cin * 9;
    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut dx = Tensor4::zeros(cache.in_dims);
    let mut dcols = vec![T::zero(); k * hw];
    for b in 0..n {
        let g = dy.item(b);
        let cols = &cache.cols[b * k * hw..(b + 1) * k * hw];
        T::gemm(cout, hw, k, T::one(), g, false, cols, true, T::one(), &mut dw);
        for co in 0..cout {
            db[co] = db[co] + g[co * hw..(co + 1) * hw].iter().copied().sum();
        }
        T::gemm(k, cout, hw, T::one(), weight, true, g, false, T::zero(), &mut dcols);
        col2im3(&dcols, cin, h, w, dx.item_mut(b));
    }
    (dx, dw, db)
}

/// 1x1 convolution; `weight` is `cout x cin`.
pub fn conv1x1_forward<T: Real>(x: &Tensor4<T>, weight: &[T], bias: &[T]) -> Tensor4<T> {
    let [n, cin, h, w] = x.dims;
    let cout = bias.len();
    assert_eq!(weight.len(), cout * cin, "conv1x1 weight shape");
    let hw = h * w;
    let mut y = Tensor4::zeros([n, cout, h, w]);
    for b in 0..n {
        let out = y.item_mut(b);
        for co in 0..cout {
            out[co * hw..(co + 1) * hw].fill(bias[co]);
        }
        T::gemm(cout, cin, hw, T::one(), weight, false, x.item(b), false, T::one(), out);
    }
    y
}

pub fn conv1x1_backward<T: Real>(x: &Tensor4<T>, weight: &[T], dy: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, cin, h, w] = x.dims;
    let cout = dy.channels();
    let hw = h * w;
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    let mut dx = Tensor4::zeros(x.dims);
    for b in 0..n {
        let g = dy.item(b);
        T::gemm(cout, hw, cin, T::one(), g, false, x.item(b), true, T::one(), &mut dw);
        for co in 0..cout {
            db[co] = db[co] + g[co * hw..(co + 1) * hw].iter().copied().sum();
        }
        T::gemm(cin, cout, hw, T::one(), weight, true, g, false, T::zero(), dx.item_mut(b));
    }
    (dx, dw, db)
}

pub struct NormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Per-item, per-channel standardization followed by a learned affine map.
pub fn instance_norm_forward<T: Real>(x: &Tensor4<T>, scale: &[T], shift: &[T], eps: f64) -> (Tensor4<T>, NormCache<T>) {
    let [n, c, _, _] = x.dims;
    let hw = x.plane();
    let mut y = Tensor4::zeros(x.dims);
    let mut xhat = Tensor4::zeros(x.dims);
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let src = &x.data[off..off + hw];
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
            let is = T::from_f64(1.0 / (var + eps).sqrt());
            let m = T::from_f64(mean);
            inv_std.push(is);
            for i in 0..hw {
                let xh = (src[i] - m) * is;
                xhat.data[off + i] = xh;
                y.data[off + i] = scale[ch] * xh + shift[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dscale, dshift)`.
pub fn instance_norm_backward<T: Real>(cache: &NormCache<T>, scale: &[T], dy: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, _, _] = dy.dims;
    let hw = dy.plane();
    let nf = T::from_f64(hw as f64);
    let mut dx = Tensor4::zeros(dy.dims);
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let g = &dy.data[off..off + hw];
            let xh = &cache.xhat.data[off..off + hw];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..hw {
                sum_g = sum_g + g[i];
                sum_gx = sum_gx + g[i] * xh[i];
            }
            dscale[ch] = dscale[ch] + sum_gx;
            dshift[ch] = dshift[ch] + sum_g;
            // gradients w.r.t. xhat are g * scale
            let k = scale[ch] * cache.inv_std[b * c + ch] / nf;
            for i in 0..hw {
                dx.data[off + i] = k * (nf * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    (dx, dscale, dshift)
}

pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    Tensor4 {
        dims: dy.dims,
        data: y.data.iter().zip(&dy.data).map(|(y, g)| if *y > T::zero() { *g } else { T::zero() }).collect(),
    }
}

/// 2x2 stride-2 max pooling. Ties go to the first maximum in scan order.
/// Returns the pooled tensor and the winning in-plane index per output.
pub fn maxpool_forward<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<u32>) {
    let [n, c, h, w] = x.dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let mut best = (2 * r) * w + 2 * col;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * r + dr) * w + 2 * col + dc;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + r * ow + col;
                y.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Real>(arg: &[u32], in_dims: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = in_dims;
    let out_plane = dy.plane();
    let mut dx = Tensor4::zeros(in_dims);
    for p in 0..n * c {
        for o in 0..out_plane {
            let i = p * h * w + arg[p * out_plane + o] as usize;
            dx.data[i] = dx.data[i] + dy.data[p * out_plane + o];
        }
    }
    dx
}

/// 2x2 stride-2 transposed convolution; `weight` is `cin x cout x 2 x 2`.
pub fn upconv_forward<T: Real>(x: &Tensor4<T>, weight: &[T], bias: &[T]) -> Tensor4<T> {
    let [n, cin, h, w] = x.dims;
    let cout = bias.len();
    assert_eq!(weight.len(), cin * cout * 4, "upconv weight shape");
    let hw = h * w;
    let mut y = Tensor4::zeros([n, cout, 2 * h, 2 * w]);
    let mut y4 = vec![T::zero(); cout * 4 * hw];
    for b in 0..n {
        T::gemm(cout * 4, cin, hw, T::one(), weight, true, x.item(b), false, T::zero(), &mut y4);
        let out = y.item_mut(b);
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &y4[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            out[co * 4 * hw + (2 * i + a) * 2 * w + 2 * j + bb] = src[i * w + j] + bias[co];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn upconv_backward<T: Real>(x: &Tensor4<T>, weight: &[T], dy: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, cin, h, w] = x.dims;
    let cout = dy.channels();
    let hw = h * w;
    let mut dw = vec![T::zero(); cin * cout * 4];
    let mut db = vec![T::zero(); cout];
    let mut dx = Tensor4::zeros(x.dims);
    let mut dy4 = vec![T::zero(); cout * 4 * hw];
    for b in 0..n {
        let g = dy.item(b);
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dy4[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = g[co * 4 * hw + (2 * i + a) * 2 * w + 2 * j + bb];
                        }
                    }
                }
            }
            db[co] = db[co] + g[co * 4 * hw..(co + 1) * 4 * hw].iter().copied().sum();
        }
        T::gemm(cin, hw, cout * 4, T::one(), x.item(b), false, &dy4, true, T::one(), &mut dw);
        T::gemm(cin, cout * 4, hw, T::one(), weight, false, &dy4, false, T::zero(), dx.item_mut(b));
    }
    (dx, dw, db)
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    assert_eq!((a.dims[0], a.dims[2], a.dims[3]), (b.dims[0], b.dims[2], b.dims[3]), "concat dims");
    let mut out = Tensor4::zeros([a.dims[0], a.dims[1] + b.dims[1], a.dims[2], a.dims[3]]);
    for n in 0..a.batch() {
        let (ia, ib) = (a.item(n), b.item(n));
        let o = out.item_mut(n);
        o[..ia.len()].copy_from_slice(ia);
        o[ia.len()..].copy_from_slice(ib);
    }
    out
}

/// Splits a concatenation gradient back into its two parts.
pub fn split<T: Real>(g: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = g.dims;
    let mut a = Tensor4::zeros([n, ca, h, w]);
    let mut b = Tensor4::zeros([n, c - ca, h, w]);
    for i in 0..n {
        let src = g.item(i);
        let split_at = ca * h * w;
        a.item_mut(i).copy_from_slice(&src[..split_at]);
        b.item_mut(i).copy_from_slice(&src[split_at..]);
    }
    (a, b)
}

pub fn add_assign<T: Real>(acc: &mut Tensor4<T>, other: &Tensor4<T>) {
    assert_eq!(acc.dims, other.dims);
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a = *a + *b;
    }
}
