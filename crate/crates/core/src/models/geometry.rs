//! Receptive-field bookkeeping for stacks of convolutions.

use crate::error::{Error, Result};

/// Spatial footprint of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { kernel, stride, padding }
    }

    fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Inclusive pixel rectangle `[top..=bottom] × [left..=right]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.top <= other.bottom && other.top <= self.bottom && self.left <= other.right && other.left <= self.right
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

/// Spatial size of the map produced by `layers` on a square input.
pub fn output_side(layers: &[ConvGeometry], input: usize) -> usize {
    layers.iter().fold(input, |size, g| g.output_size(size))
}

/// Pixels of a square `input`×`input` image that can influence output cell
/// `(i, j)` of the stack, found by walking index ranges back through each
/// layer and clipping to the valid extent at every level (padding reads
/// zeros and contributes nothing).
pub fn receptive_field(layers: &[ConvGeometry], input: usize, i: usize, j: usize) -> Result<PixelRect> {
    let mut sizes = Vec::with_capacity(layers.len() + 1);
    sizes.push(input);
    for g in layers {
        let last = *sizes.last().unwrap();
        sizes.push(g.output_size(last));
    }
    let out = *sizes.last().unwrap();
    if i >= out || j >= out {
        return Err(Error::OutOfBounds(format!("cell ({i}, {j}) outside {out}×{out} feature map")));
    }

    let back = |mut lo: usize, mut hi: usize| {
        for (g, &size) in layers.iter().zip(&sizes).rev() {
            let start = (lo * g.stride) as isize - g.padding as isize;
            let end = (hi * g.stride + g.kernel - 1) as isize - g.padding as isize;
            lo = start.max(0) as usize;
            hi = end.min(size as isize - 1) as usize;
        }
        (lo, hi)
    };
    let (top, bottom) = back(i, i);
    let (left, right) = back(j, j);
    Ok(PixelRect { top, left, bottom, right })
}
