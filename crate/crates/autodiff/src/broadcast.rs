use crate::{Result, TensorError};

#[derive(Clone, Debug)]
enum Map {
    Same,
    Scalar,
    /// The source is a trailing block repeated over leading axes.
    Cyclic(usize),
    /// General right-aligned broadcast; zero strides on expanded axes.
    Strided(Vec<usize>),
}

/// Index mapping from an output element to the elements of two
/// broadcast-compatible operands.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    out: Vec<usize>,
    a: Map,
    b: Map,
}

impl Broadcast {
    pub fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(TensorError::Dimension(format!("cannot broadcast {sa:?} with {sb:?}"))),
            });
        }
        Ok(Self { a: Self::map(&pa, &out), b: Self::map(&pb, &out), out })
    }

    fn map(src: &[usize], out: &[usize]) -> Map {
        let n: usize = src.iter().product();
        if src == out {
            return Map::Same;
        }
        if n == 1 {
            return Map::Scalar;
        }
        // Leading ones followed by a suffix identical to the output's.
        let lead = src.iter().take_while(|&&d| d == 1).count();
        if src[lead..] == out[lead..] {
            return Map::Cyclic(n);
        }
        let mut strides = vec![0; src.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            if src[i] != 1 {
                strides[i] = acc;
            }
            acc *= src[i];
        }
        Map::Strided(strides)
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out
    }

    pub fn numel(&self) -> usize {
        self.out.iter().product()
    }

    #[inline]
    fn index(&self, map: &Map, i: usize) -> usize {
        match map {
            Map::Same => i,
            Map::Scalar => 0,
            Map::Cyclic(n) => i % n,
            Map::Strided(strides) => {
                let mut rem = i;
                let mut idx = 0;
                for (d, &extent) in self.out.iter().enumerate().rev() {
                    idx += (rem % extent) * strides[d];
                    rem /= extent;
                }
                idx
            }
        }
    }

    #[inline]
    pub fn a_index(&self, i: usize) -> usize {
        self.index(&self.a, i)
    }

    #[inline]
    pub fn b_index(&self, i: usize) -> usize {
        self.index(&self.b, i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_and_column_broadcast() {
        let bc = Broadcast::new(&[2, 3], &[1, 3]).unwrap();
        assert_eq!(bc.out_shape(), &[2, 3]);
        assert_eq!(bc.b_index(4), 1);
        let bc = Broadcast::new(&[2, 1], &[2, 3]).unwrap();
        assert_eq!(bc.out_shape(), &[2, 3]);
        assert_eq!((0..6).map(|i| bc.a_index(i)).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1]);
        assert!(Broadcast::new(&[2, 3], &[3, 2]).is_err());
    }
}
