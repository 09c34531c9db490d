//! Shape arithmetic shared by the tensor ops: row-major strides, numpy-style
//! broadcasting and an odometer walker that yields per-element input offsets
//! without materialising index vectors per element.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` right-aligned into `rank` dims, with zero stride on
/// broadcast (size-1) dims so a walker can stay put along them.
fn aligned_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let own = strides(shape);
    let mut s = vec![0usize; rank];
    let off = rank - shape.len();
    for d in 0..shape.len() {
        s[off + d] = if shape[d] == 1 { 0 } else { own[d] };
    }
    s
}

/// Walks every element of `out_shape` in row-major order, yielding the flat
/// offsets into two broadcast inputs.
pub struct PairWalker {
    dims: Vec<usize>,
    idx: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    off_a: usize,
    off_b: usize,
    remaining: usize,
}

impl PairWalker {
    pub fn new(a_shape: &[usize], b_shape: &[usize], out_shape: &[usize]) -> Self {
        PairWalker {
            dims: out_shape.to_vec(),
            idx: vec![0; out_shape.len()],
            sa: aligned_strides(a_shape, out_shape.len()),
            sb: aligned_strides(b_shape, out_shape.len()),
            off_a: 0,
            off_b: 0,
            remaining: numel(out_shape),
        }
    }

    #[inline]
    pub fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        let res = (self.off_a, self.off_b);
        self.remaining -= 1;
        let mut d = self.dims.len();
        while d > 0 {
            d -= 1;
            self.idx[d] += 1;
            self.off_a += self.sa[d];
            self.off_b += self.sb[d];
            if self.idx[d] < self.dims[d] {
                break;
            }
            self.off_a -= self.sa[d] * self.dims[d];
            self.off_b -= self.sb[d] * self.dims[d];
            self.idx[d] = 0;
        }
        Some(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 2], &[3]), None);
        assert_eq!(broadcast_shapes(&[1], &[4, 1, 5]), Some(vec![4, 1, 5]));
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn pair_walker_matches_index_arithmetic() {
        let a = [2usize, 1, 3];
        let b = [1usize, 4, 3];
        let out = broadcast_shapes(&a, &b).unwrap();
        let mut w = PairWalker::new(&a, &b, &out);
        let (sa, sb) = (strides(&a), strides(&b));
        for i0 in 0..out[0] {
            for i1 in 0..out[1] {
                for i2 in 0..out[2] {
                    let ea = (i0 % a[0]) * sa[0] + (i1 % a[1]) * sa[1] + (i2 % a[2]) * sa[2];
                    let eb = (i0 % b[0]) * sb[0] + (i1 % b[1]) * sb[1] + (i2 % b[2]) * sb[2];
                    assert_eq!(w.next(), Some((ea, eb)));
                }
            }
        }
        assert_eq!(w.next(), None);
    }
}
