//! Broadcasting helpers (numpy rules, right-aligned).

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// True when `small` broadcasts to `big` under right alignment.
pub(crate) fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len()
        && small
            .iter()
            .rev()
            .zip(big.iter().rev())
            .all(|(&s, &b)| s == b || s == 1)
}

/// `big` as merged `(extent, small_stride)` axes, where a stride of 0 marks a
/// broadcast axis. Adjacent axes of the same kind are fused and unit axes dropped.
fn merged_axes(small: &[usize], big: &[usize]) -> Vec<(usize, usize)> {
    let offset = big.len() - small.len();
    let mut axes: Vec<(usize, usize)> = Vec::new();
    let mut acc = 1;
    for i in (0..big.len()).rev() {
        let s = if i >= offset { small[i - offset] } else { 1 };
        let extent = big[i];
        if extent == 1 {
            continue;
        }
        let stride = if s == 1 { 0 } else { acc };
        acc *= s;
        match axes.last_mut() {
            // axes are collected innermost first; fuse when the outer axis continues the inner one
            Some(last) if last.1 == 0 && stride == 0 => last.0 *= extent,
            Some(last) if last.1 != 0 && stride == last.1 * last.0 => last.0 *= extent,
            _ => axes.push((extent, stride)),
        }
    }
    axes.reverse();
    axes
}

/// Calls `run(big_start, small_start, len, small_stride)` for each innermost run of `big`.
fn for_each_run(small: &[usize], big: &[usize], mut run: impl FnMut(usize, usize, usize, usize)) {
    let total = numel(big);
    if total == 0 {
        return;
    }
    let axes = merged_axes(small, big);
    let Some(&(inner_len, inner_stride)) = axes.last() else {
        run(0, 0, 1, 0);
        return;
    };
    let outer = &axes[..axes.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let mut small_pos = 0usize;
    let mut big_pos = 0usize;
    loop {
        run(big_pos, small_pos, inner_len, inner_stride);
        big_pos += inner_len;
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            small_pos += outer[d].1;
            if idx[d] < outer[d].0 {
                break;
            }
            small_pos -= outer[d].1 * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_data<T: Copy + Default>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let mut out = vec![T::default(); numel(to)];
    for_each_run(from, to, |b, s, len, stride| {
        let dst = &mut out[b..b + len];
        if stride == 0 {
            dst.fill(data[s]);
        } else {
            dst.copy_from_slice(&data[s..s + len]);
        }
    });
    out
}

pub(crate) fn sum_to_data<T: Copy + Default + std::ops::AddAssign>(
    data: &[T],
    from: &[usize],
    to: &[usize],
) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let mut out = vec![T::default(); numel(to)];
    for_each_run(to, from, |b, s, len, stride| {
        let src = &data[b..b + len];
        if stride == 0 {
            let mut acc = T::default();
            for &v in src {
                acc += v;
            }
            out[s] += acc;
        } else {
            for (o, &v) in out[s..s + len].iter_mut().zip(src) {
                *o += v;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[1, 4, 1, 1], &[2, 4, 5, 5]), Some(vec![2, 4, 5, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert!(broadcastable(&[], &[2, 2]));
        assert!(!broadcastable(&[2, 2], &[2]));
    }

    #[test]
    fn sum_and_broadcast_are_adjoint_on_channels() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let summed = sum_to_data(&data, &[2, 3, 4], &[1, 3, 1]);
        assert_eq!(summed, vec![0. + 1. + 2. + 3. + 12. + 13. + 14. + 15., 92., 124.]);
        let back = broadcast_data(&summed, &[1, 3, 1], &[2, 3, 4]);
        assert_eq!(back[5], 92.);
        assert_eq!(back[23], 124.);
    }

    /// Index-by-index reference for the broadcast map.
    fn naive_small_index(small: &[usize], big: &[usize], mut flat: usize) -> usize {
        let offset = big.len() - small.len();
        let mut coords = vec![0; big.len()];
        for d in (0..big.len()).rev() {
            coords[d] = flat % big[d];
            flat /= big[d];
        }
        let mut idx = 0;
        for (i, &s) in small.iter().enumerate() {
            idx = idx * s + if s == 1 { 0 } else { coords[i + offset] };
        }
        idx
    }

    proptest::proptest! {
        #[test]
        fn runs_match_naive_indexing(
            dims in proptest::collection::vec((1usize..5, proptest::bool::ANY), 0..5),
            drop in 0usize..3,
        ) {
            let big: Vec<usize> = dims.iter().map(|d| d.0).collect();
            let small_full: Vec<usize> = dims.iter().map(|&(e, keep)| if keep { e } else { 1 }).collect();
            let small = small_full[drop.min(small_full.len())..].to_vec();
            let data: Vec<f64> = (0..numel(&small)).map(|v| v as f64 + 1.0).collect();
            let out = broadcast_data(&data, &small, &big);
            let mut summed = vec![0.0; numel(&small)];
            let big_data: Vec<f64> = (0..numel(&big)).map(|v| (v * 3 % 7) as f64).collect();
            for (flat, &v) in big_data.iter().enumerate() {
                let si = naive_small_index(&small, &big, flat);
                proptest::prop_assert_eq!(out[flat], data[si]);
                summed[si] += v;
            }
            proptest::prop_assert_eq!(sum_to_data(&big_data, &big, &small), summed);
        }
    }
}
