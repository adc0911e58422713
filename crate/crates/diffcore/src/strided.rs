//! Index arithmetic for row-major buffers: contiguous strides, broadcasting
//! and odometer-style traversal.

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read a buffer of shape `src` as if it had shape `out`;
/// broadcast axes get stride 0. Assumes `src` broadcasts to `out`.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_offset, a_offset, b_offset)` for every position of `shape`
/// in row-major order.
#[inline]
pub(crate) fn visit2<F: FnMut(usize, usize, usize)>(shape: &[usize], sa: &[usize], sb: &[usize], mut f: F) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for i in 0..inner {
            f(o + i, oa + i * ia, ob + i * ib);
        }
        o += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// True when `small` (ignoring leading unit axes) equals the trailing axes
/// of `out`, so it repeats as one contiguous block.
pub(crate) fn is_suffix(small: &[usize], out: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    core.len() <= out.len() && out[out.len() - core.len()..] == *core
}

/// Reads `src` through `strides` into a fresh contiguous buffer of `shape`.
pub(crate) fn gather<E: Copy>(src: &[E], shape: &[usize], strides: &[usize]) -> Vec<E> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank > 1 && strides[rank - 1] == 1 {
        let run = shape[rank - 1];
        let outer = &shape[..rank - 1];
        let st = &strides[..rank - 1];
        visit2(outer, st, st, |_, i, _| out.extend_from_slice(&src[i..i + run]));
    } else {
        visit2(shape, strides, strides, |_, i, _| out.push(src[i]));
    }
    out
}

/// Inverse of [`gather`]: writes contiguous `g` back through `strides`.
pub(crate) fn scatter<E: Copy>(g: &[E], dst: &mut [E], shape: &[usize], strides: &[usize]) {
    let rank = shape.len();
    if rank > 1 && strides[rank - 1] == 1 {
        let run = shape[rank - 1];
        let outer = &shape[..rank - 1];
        let st = &strides[..rank - 1];
        visit2(outer, st, st, |o, i, _| {
            dst[i..i + run].copy_from_slice(&g[o * run..(o + 1) * run])
        });
    } else {
        visit2(shape, strides, strides, |o, i, _| dst[i] = g[o]);
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
