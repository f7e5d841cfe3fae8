//! Dense 4-D `f64` tensors in `[batch, channel, height, width]` layout.

use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics when the data length disagrees with the shape.
    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The sole element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch item.
    pub fn item_slice(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stacks single-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape[1..], [c, h, w], "stacked tensors differ in shape");
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w).max(1);
        Tensor {
            shape: [n, c, h, w],
            data,
        }
    }

    /// Spatial window `[top, top+hh) × [left, left+ww)` of every channel.
    pub fn crop(&self, top: usize, left: usize, hh: usize, ww: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(top + hh <= h && left + ww <= w, "crop outside tensor");
        let mut out = Tensor::zeros([n, c, hh, ww]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.channel(b, ch);
                let dst = out.channel_mut(b, ch);
                for r in 0..hh {
                    dst[r * ww..(r + 1) * ww]
                        .copy_from_slice(&src[(top + r) * w + left..(top + r) * w + left + ww]);
                }
            }
        }
        out
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Index<[usize; 4]> for Tensor {
    type Output = f64;

    fn index(&self, [n, c, h, w]: [usize; 4]) -> &f64 {
        &self.data[self.offset(n, c, h, w)]
    }
}

impl IndexMut<[usize; 4]> for Tensor {
    fn index_mut(&mut self, [n, c, h, w]: [usize; 4]) -> &mut f64 {
        let o = self.offset(n, c, h, w);
        &mut self.data[o]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec([1, 2, 2, 3], (0..12).map(f64::from).collect());
        assert_eq!(t[[0, 1, 0, 2]], 8.0);
        assert_eq!(t.channel(0, 1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn crop_takes_window() {
        let t = Tensor::from_vec([1, 1, 3, 3], (0..9).map(f64::from).collect());
        assert_eq!(t.crop(1, 1, 2, 2).data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn stack_concatenates_batch() {
        let a = Tensor::filled([1, 1, 1, 2], 1.0);
        let b = Tensor::filled([1, 1, 1, 2], 2.0);
        let s = Tensor::stack(&[a, b]);
        assert_eq!(s.shape(), [2, 1, 1, 2]);
        assert_eq!(s.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic]
    fn from_vec_checks_length() {
        Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]);
    }
}
