use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// A named matrix inside a flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Whether weight decay applies (false for biases and norms).
    pub decay: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn view<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("slot fits buffer")
    }

    pub fn view_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.range()]).expect("slot fits buffer")
    }

    /// Row vector view for bias-like slots.
    pub fn vector<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }
}

#[derive(Debug, Default)]
pub(crate) struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub(crate) fn starting_at(next: usize) -> Self {
        Self { next }
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Slot {
        self.alloc(rows, cols, true)
    }

    pub(crate) fn vector(&mut self, len: usize) -> Slot {
        self.alloc(1, len, false)
    }

    fn alloc(&mut self, rows: usize, cols: usize, decay: bool) -> Slot {
        let slot = Slot { offset: self.next, rows, cols, decay };
        self.next += slot.len();
        slot
    }

    pub(crate) fn total(&self) -> usize {
        self.next
    }
}
