//! A minimal dense NCHW tensor. Just enough structure for the fixed
//! five-layer refinement network — contiguous `f64` storage, per-channel
//! slicing, and shape checks that fail loudly instead of corrupting memory.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: [usize; 4],
        got: [usize; 4],
    },
    #[error("{op}: parameter vector has length {got}, expected {expected}")]
    ParamLength {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Dense rank-4 tensor, laid out `[n][c][h][w]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        if data.len() != n * c * h * w {
            return Err(TensorError::ParamLength {
                op: "Tensor4::from_vec",
                expected: n * c * h * w,
                got: data.len(),
            });
        }
        Ok(Tensor4 { data, n, c, h, w })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        self.data[((n * self.c + c) * self.h + y) * self.w + x] = v;
    }

    /// One `h*w` spatial slab of sample `n`, channel `c`.
    #[inline]
    pub fn chan(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn chan_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &mut self.data[base..base + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Append `rows` zero rows at the bottom and `cols` zero columns at the
    /// right of every spatial slab.
    pub fn pad_bottom_right(&self, rows: usize, cols: usize) -> Tensor4 {
        let mut out = Tensor4::zeros(self.n, self.c, self.h + rows, self.w + cols);
        for n in 0..self.n {
            for c in 0..self.c {
                let src = self.chan(n, c);
                let dst = out.chan_mut(n, c);
                for y in 0..self.h {
                    dst[y * (self.w + cols)..y * (self.w + cols) + self.w]
                        .copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
                }
            }
        }
        out
    }

    /// Drop everything below/right of `h`×`w` in every spatial slab.
    pub fn crop(&self, h: usize, w: usize) -> Tensor4 {
        assert!(h <= self.h && w <= self.w, "crop larger than tensor");
        let mut out = Tensor4::zeros(self.n, self.c, h, w);
        for n in 0..self.n {
            for c in 0..self.c {
                let src = self.chan(n, c);
                let dst = out.chan_mut(n, c);
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[y * self.w..y * self.w + w]);
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor4::crop`] for gradients: place `self` into the
    /// top-left corner of a zeroed `h`×`w` tensor.
    pub fn uncrop(&self, h: usize, w: usize) -> Tensor4 {
        assert!(h >= self.h && w >= self.w, "uncrop smaller than tensor");
        let mut out = Tensor4::zeros(self.n, self.c, h, w);
        for n in 0..self.n {
            for c in 0..self.c {
                let src = self.chan(n, c);
                let dst = out.chan_mut(n, c);
                for y in 0..self.h {
                    dst[y * w..y * w + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
                }
            }
        }
        out
    }
}
