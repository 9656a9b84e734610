use crate::error::{CftError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Row-stochastic attention weights of one head in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix<S = f32> {
    pub block: usize,
    pub head: usize,
    pub alpha: Tensor<S>,
}

/// The four modality quadrants of a correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationBlocks<S = f32> {
    /// RGB queries attending to RGB keys.
    pub rr: Tensor<S>,
    /// RGB queries attending to thermal keys.
    pub rt: Tensor<S>,
    pub tr: Tensor<S>,
    pub tt: Tensor<S>,
}

impl<S: Real> CorrelationMatrix<S> {
    pub fn new(block: usize, head: usize, alpha: Tensor<S>) -> Result<Self> {
        match alpha.shape() {
            [a, b] if a == b => Ok(CorrelationMatrix { block, head, alpha }),
            s => Err(CftError::dim(format!("correlation matrix must be square, got {s:?}"))),
        }
    }

    pub fn extent(&self) -> usize {
        self.alpha.shape()[0]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.extent();
        self.alpha
            .data()
            .chunks(n)
            .map(|row| (row.iter().map(|v| v.to_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn entries_in_unit_interval(&self) -> bool {
        self.alpha
            .data()
            .iter()
            .all(|&v| v >= S::ZERO && v <= S::ONE)
    }

    /// Quadrants for a sequence of `P^2` RGB tokens followed by `P^2` thermal
    /// tokens. RR spans `(0,0)..(P^2-1, P^2-1)`, TT spans `(P^2,P^2)..(2P^2-1, 2P^2-1)`.
    pub fn blocks(&self, pooled_size: usize) -> Result<CorrelationBlocks<S>> {
        correlation_blocks(&self.alpha, pooled_size)
    }
}

pub fn correlation_blocks<S: Real>(alpha: &Tensor<S>, pooled_size: usize) -> Result<CorrelationBlocks<S>> {
    let n = match alpha.shape() {
        [a, b] if a == b => *a,
        s => return Err(CftError::dim(format!("correlation matrix must be square, got {s:?}"))),
    };
    if n % 2 != 0 {
        return Err(CftError::dim(format!("odd correlation extent {n}")));
    }
    let half = pooled_size * pooled_size;
    if n != 2 * half {
        return Err(CftError::dim(format!(
            "extent {n} does not match 2 * {pooled_size}^2"
        )));
    }
    let quad = |r0: usize, c0: usize| {
        let mut data = Vec::with_capacity(half * half);
        for r in r0..r0 + half {
            data.extend_from_slice(&alpha.data()[r * n + c0..r * n + c0 + half]);
        }
        Tensor::new(vec![half, half], data)
    };
    Ok(CorrelationBlocks {
        rr: quad(0, 0)?,
        rt: quad(0, half)?,
        tr: quad(half, 0)?,
        tt: quad(half, half)?,
    })
}

impl<S: Real> CorrelationBlocks<S> {
    /// Stitch the quadrants back into the full matrix.
    pub fn reassemble(&self) -> Tensor<S> {
        let half = self.rr.shape()[0];
        let n = 2 * half;
        let mut data = Vec::with_capacity(n * n);
        for (left, right) in [(&self.rr, &self.rt), (&self.tr, &self.tt)] {
            for r in 0..half {
                data.extend_from_slice(&left.data()[r * half..(r + 1) * half]);
                data.extend_from_slice(&right.data()[r * half..(r + 1) * half]);
            }
        }
        Tensor::new(vec![n, n], data).expect("quadrants are square")
    }

    /// Total attention mass in each quadrant divided by the number of rows
    /// feeding it: (RR, RT, TR, TT).
    pub fn mean_row_mass(&self) -> [f64; 4] {
        let half = self.rr.shape()[0] as f64;
        [&self.rr, &self.rt, &self.tr, &self.tt].map(|q| {
            q.data().iter().map(|v| v.to_f64()).sum::<f64>() / half
        })
    }
}
