use crate::error::{Error, Result};

/// Boolean validity mask. `true` marks a position that participates.
///
/// A mask used with a reduction over `axis` covers the tensor's shape up to
/// and including that axis and broadcasts over the trailing axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::mask(
                "mask",
                format!("shape {shape:?} vs {} entries", data.len()),
            ));
        }
        Ok(Mask { shape, data })
    }

    pub fn all(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Mask {
            shape,
            data: vec![true; n],
        }
    }

    /// `[B × max_len]` mask whose row `b` has its first `lengths[b]` entries set.
    pub fn from_lengths(lengths: &[usize], max_len: usize) -> Self {
        let mut data = Vec::with_capacity(lengths.len() * max_len);
        for &len in lengths {
            data.extend((0..max_len).map(|t| t < len));
        }
        Mask {
            shape: vec![lengths.len(), max_len],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, flat: usize) -> bool {
        self.data[flat]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Repeats a `[B × m]` mask `n` times to `[B × n × m]`.
    pub fn tile_middle(&self, n: usize) -> Mask {
        assert_eq!(self.shape.len(), 2, "tile_middle expects a rank-2 mask");
        let (b, m) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(b * n * m);
        for row in self.data.chunks(m) {
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        Mask {
            shape: vec![b, n, m],
            data,
        }
    }

    /// Row lengths of a rank-2 prefix mask.
    pub fn lengths(&self) -> Vec<usize> {
        let m = *self.shape.last().expect("non-scalar mask");
        self.data
            .chunks(m)
            .map(|row| row.iter().filter(|&&b| b).count())
            .collect()
    }

    /// Sub-mask for rows `start..start + len` of the leading axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Mask {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Mask {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        }
    }
}
