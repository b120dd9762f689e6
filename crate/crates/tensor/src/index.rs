//! Index tables for [`Graph::gather`](crate::Graph::gather).

/// `out[j, i] = x[i, j]` for `x[rows, cols]`.
pub fn transpose(rows: usize, cols: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            idx.push(i * cols + j);
        }
    }
    idx
}

/// Channel-major map `[C, H·W]` to token-major `[H·W, C]`.
pub fn map_to_tokens(channels: usize, h: usize, w: usize) -> Vec<usize> {
    transpose(channels, h * w)
}

/// Token-major `[H·W, C]` back to channel-major `[C, H, W]`.
pub fn tokens_to_map(channels: usize, h: usize, w: usize) -> Vec<usize> {
    transpose(h * w, channels)
}

/// Splits token-major `[H·W, C]` into non-overlapping `win × win` windows,
/// giving `[nW, win², C]` with windows and tokens both in row-major order.
pub fn window_partition(h: usize, w: usize, channels: usize, win: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * channels);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for ty in 0..win {
                for tx in 0..win {
                    let tok = (wy * win + ty) * w + wx * win + tx;
                    idx.extend((0..channels).map(|c| tok * channels + c));
                }
            }
        }
    }
    idx
}

/// Inverse of [`window_partition`]: `[nW, win², C]` back to `[H·W, C]`.
pub fn window_reverse(h: usize, w: usize, channels: usize, win: usize) -> Vec<usize> {
    let fwd = window_partition(h, w, channels, win);
    let mut inv = vec![0; fwd.len()];
    for (pos, &src) in fwd.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// Gathers a head-split view of token-major `[B, n, heads·dh]` rows into
/// `[B·heads, n, dh]`, optionally transposed to `[B·heads, dh, n]`.
///
/// `col_offset` selects which `heads·dh` wide column block of a packed row of
/// width `row_width` is read (Q, K and V packed side by side).
pub fn split_heads(
    batch: usize,
    n: usize,
    heads: usize,
    dh: usize,
    row_width: usize,
    col_offset: usize,
    transposed: bool,
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * n * heads * dh);
    for b in 0..batch {
        for hd in 0..heads {
            if transposed {
                for d in 0..dh {
                    for t in 0..n {
                        idx.push((b * n + t) * row_width + col_offset + hd * dh + d);
                    }
                }
            } else {
                for t in 0..n {
                    for d in 0..dh {
                        idx.push((b * n + t) * row_width + col_offset + hd * dh + d);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse layout of [`split_heads`] (non-transposed): `[B·heads, n, dh]` to
/// `[B·n, heads·dh]`.
pub fn merge_heads(batch: usize, n: usize, heads: usize, dh: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * n * heads * dh);
    for b in 0..batch {
        for t in 0..n {
            for hd in 0..heads {
                for d in 0..dh {
                    idx.push(((b * heads + hd) * n + t) * dh + d);
                }
            }
        }
    }
    idx
}
