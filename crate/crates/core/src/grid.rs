//! Dense channel-major grids, the tensor currency of the engine.
//!
//! Layout is `C x H x W`, row-major within a channel, so a channel is one
//! contiguous `H*W` slice. Desk-scale grids are small; plain `Vec` storage
//! keeps the integer inference path allocation-free and portable.

use crate::error::{Error, Result};

/// A `C x H x W` grid over element type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }
}

impl<T> Grid3<T> {
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "grid data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(c < self.channels && r < self.height && col < self.width);
        (c * self.height + r) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> &T {
        &self.data[self.idx(c, r, col)]
    }

    #[inline]
    pub fn get_mut(&mut self, c: usize, r: usize, col: usize) -> &mut T {
        let i = self.idx(c, r, col);
        &mut self.data[i]
    }

    /// Contiguous `H*W` slice of one channel.
    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    /// One row of one channel as a contiguous slice.
    pub fn row(&self, c: usize, r: usize) -> &[T] {
        let start = (c * self.height + r) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn row_mut(&mut self, c: usize, r: usize) -> &mut [T] {
        let start = (c * self.height + r) * self.width;
        &mut self.data[start..start + self.width]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &Grid3<U>) -> bool {
        self.shape() == (other.channels, other.height, other.width)
    }
}

impl<T: Copy> Grid3<T> {
    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// An `H x W` single-channel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid2<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }
}

impl<T> Grid2<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.height && c < self.width);
        r * self.width + c
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[self.idx(r, c)]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut T {
        let i = self.idx(r, c);
        &mut self.data[i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid3_indexing_is_channel_major() {
        let mut g = Grid3::<i32>::zeros(2, 3, 4);
        *g.get_mut(1, 2, 3) = 7;
        assert_eq!(g.as_slice()[(1 * 3 + 2) * 4 + 3], 7);
        assert_eq!(*g.get(1, 2, 3), 7);
        assert_eq!(g.channel(1)[2 * 4 + 3], 7);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid3::from_vec(2, 2, 2, vec![0u32; 7]).is_err());
        assert!(Grid3::from_vec(2, 2, 2, vec![0u32; 8]).is_ok());
    }
}
