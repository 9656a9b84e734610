//! Dense row-major tensors and the numeric kernels behind the taped ops.

use crate::error::{CftError, Result};
use crate::real::Real;

/// Dense n-dimensional array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CftError::dim(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CftError::dim(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Build from nested rows; convenient in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CftError::dim("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| S::from_f64(v)))
            .collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> S {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &e) in idx.iter().zip(&self.shape) {
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::ZERO, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (S, S) {
        let first = self.data[0];
        self.data
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// 2-D matrix product through the untaped kernel.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = dims2(self)?;
        let (k2, n) = dims2(other)?;
        if k != k2 {
            return Err(CftError::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Tensor::new(vec![m, n], kernels::matmul(&self.data, &other.data, m, k, n))
    }
}

pub(crate) fn dims2<S>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        s => Err(CftError::dim(format!("expected a matrix, got shape {s:?}"))),
    }
}

pub(crate) fn dims3<S>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match t.shape.as_slice() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(CftError::dim(format!("expected C x H x W, got shape {s:?}"))),
    }
}

pub mod kernels {
    //! Slice-level kernels. All buffers are row-major.

    use crate::real::Real;

    /// `a[m x k] * b[k x n]`.
    pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == S::ZERO {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::ZERO;
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// `a[k x m]^T * b[k x n]`.
    pub fn matmul_tn<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
        let mut out = vec![S::ZERO; m * n];
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == S::ZERO {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn transpose<S: Real>(a: &[S], m: usize, n: usize) -> Vec<S> {
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    /// Softmax over the middle extent of an `outer x len x inner` view, with
    /// max subtraction. Exponentials and their sum are kept in f64 and each
    /// probability is rounded once.
    pub fn softmax<S: Real>(x: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
        let mut out = vec![S::ZERO; x.len()];
        let mut e = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = x[at(0)].to_f64();
                for j in 1..len {
                    mx = mx.max(x[at(j)].to_f64());
                }
                let mut sum = 0.0;
                for (j, ej) in e.iter_mut().enumerate() {
                    *ej = (x[at(j)].to_f64() - mx).exp();
                    sum += *ej;
                }
                for (j, ej) in e.iter().enumerate() {
                    out[at(j)] = S::from_f64(ej / sum);
                }
            }
        }
        out
    }

    /// sqrt(2 / pi)
    pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    pub const GELU_CUBIC: f64 = 0.044_715;

    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[inline]
    pub fn gelu<S: Real>(x: S) -> S {
        let c = S::from_f64(GELU_SQRT_2_OVER_PI);
        let a = S::from_f64(GELU_CUBIC);
        let half = S::from_f64(0.5);
        half * x * (S::ONE + (c * (x + a * x * x * x)).tanh())
    }

    #[inline]
    pub fn gelu_grad<S: Real>(x: S) -> S {
        let c = S::from_f64(GELU_SQRT_2_OVER_PI);
        let a = S::from_f64(GELU_CUBIC);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let t = (c * (x + a * x * x * x)).tanh();
        half * (S::ONE + t) + half * x * (S::ONE - t * t) * c * (S::ONE + three * a * x * x)
    }

    #[inline]
    pub fn sigmoid<S: Real>(x: S) -> S {
        if x >= S::ZERO {
            S::ONE / (S::ONE + (-x).exp())
        } else {
            let e = x.exp();
            e / (S::ONE + e)
        }
    }

    /// Output extent of a strided window, or `None` when it would be < 1.
    pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            None
        } else {
            Some((padded - kernel) / stride + 1)
        }
    }

    /// Geometry of one 2-D convolution.
    #[derive(Clone, Copy, Debug)]
    pub struct ConvGeom {
        pub c_in: usize,
        pub h: usize,
        pub w: usize,
        pub k: usize,
        pub stride: usize,
        pub pad: usize,
        pub h_out: usize,
        pub w_out: usize,
    }

    impl ConvGeom {
        fn cols_rows(&self) -> usize {
            self.c_in * self.k * self.k
        }

        fn cols_len(&self) -> usize {
            self.h_out * self.w_out
        }
    }

    /// Unfold `x[c_in x h x w]` into `[c_in*k*k x h_out*w_out]`.
    pub fn im2col<S: Real>(x: &[S], g: &ConvGeom) -> Vec<S> {
        let n = g.cols_len();
        let mut cols = vec![S::ZERO; g.cols_rows() * n];
        for c in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
    pub fn col2im<S: Real>(cols: &[S], g: &ConvGeom) -> Vec<S> {
        let n = g.cols_len();
        let mut x = vec![S::ZERO; g.c_in * g.h * g.w];
        for c in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Cross-correlation of `x[c_in x h x w]` with `weight[c_out x c_in x k x k]`.
    pub fn conv2d<S: Real>(x: &[S], weight: &[S], c_out: usize, g: &ConvGeom) -> Vec<S> {
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            return matmul(weight, x, c_out, g.c_in, g.h * g.w);
        }
        let cols = im2col(x, g);
        matmul(weight, &cols, c_out, g.cols_rows(), g.cols_len())
    }

    /// Gradients of [`conv2d`] with respect to input and weight.
    pub fn conv2d_backward<S: Real>(
        x: &[S],
        weight: &[S],
        grad_out: &[S],
        c_out: usize,
        g: &ConvGeom,
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<S>>, Option<Vec<S>>) {
        let rows = g.cols_rows();
        let n = g.cols_len();
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            let gx = need_x.then(|| matmul_tn(weight, grad_out, rows, c_out, n));
            let gw = need_w.then(|| matmul_nt(grad_out, x, c_out, n, rows));
            return (gx, gw);
        }
        let gw = need_w.then(|| {
            let cols = im2col(x, g);
            matmul_nt(grad_out, &cols, c_out, n, rows)
        });
        let gx = need_x.then(|| {
            let gcols = matmul_tn(weight, grad_out, rows, c_out, n);
            col2im(&gcols, g)
        });
        (gx, gw)
    }

    /// Window `[start, end)` of output cell `i` when pooling `extent` into `out`
    /// cells: `start = floor(i*extent/out)`, `end = floor((i+1)*extent/out)`,
    /// widened to one element if it would be empty.
    #[inline]
    pub fn pool_window(i: usize, extent: usize, out: usize) -> (usize, usize) {
        let start = i * extent / out;
        let end = ((i + 1) * extent / out).max(start + 1);
        (start, end)
    }

    pub fn adaptive_avg_pool<S: Real>(x: &[S], c: usize, h: usize, w: usize, p: usize) -> Vec<S> {
        let mut out = vec![S::ZERO; c * p * p];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for oy in 0..p {
                let (y0, y1) = pool_window(oy, h, p);
                for ox in 0..p {
                    let (x0, x1) = pool_window(ox, w, p);
                    let mut acc = S::ZERO;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[yy * w + xx];
                        }
                    }
                    out[(ch * p + oy) * p + ox] = acc / S::from_usize((y1 - y0) * (x1 - x0));
                }
            }
        }
        out
    }

    pub fn adaptive_avg_pool_backward<S: Real>(
        grad_out: &[S],
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    ) -> Vec<S> {
        let mut gx = vec![S::ZERO; c * h * w];
        for ch in 0..c {
            for oy in 0..p {
                let (y0, y1) = pool_window(oy, h, p);
                for ox in 0..p {
                    let (x0, x1) = pool_window(ox, w, p);
                    let share = grad_out[(ch * p + oy) * p + ox]
                        / S::from_usize((y1 - y0) * (x1 - x0));
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            gx[(ch * h + yy) * w + xx] += share;
                        }
                    }
                }
            }
        }
        gx
    }

    /// Source sample for destination index `dst` when resizing `src_len` to
    /// `dst_len` with half-pixel centers: `(dst + 0.5) * src_len / dst_len - 0.5`
    /// clamped to `[0, src_len - 1]`. Returns the two taps and the weight of
    /// the upper tap.
    #[inline]
    pub fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    }

    pub fn bilinear_upsample<S: Real>(
        x: &[S],
        c: usize,
        sh: usize,
        sw: usize,
        h: usize,
        w: usize,
    ) -> Vec<S> {
        let mut out = vec![S::ZERO; c * h * w];
        let ys: Vec<_> = (0..h).map(|y| bilinear_taps(y, sh, h)).collect();
        let xs: Vec<_> = (0..w).map(|x| bilinear_taps(x, sw, w)).collect();
        for ch in 0..c {
            let plane = &x[ch * sh * sw..(ch + 1) * sh * sw];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = S::from_f64(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = S::from_f64(fx);
                    let top = plane[y0 * sw + x0] * (S::ONE - fx) + plane[y0 * sw + x1] * fx;
                    let bot = plane[y1 * sw + x0] * (S::ONE - fx) + plane[y1 * sw + x1] * fx;
                    out[(ch * h + oy) * w + ox] = top * (S::ONE - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn bilinear_upsample_backward<S: Real>(
        grad_out: &[S],
        c: usize,
        sh: usize,
        sw: usize,
        h: usize,
        w: usize,
    ) -> Vec<S> {
        let mut gx = vec![S::ZERO; c * sh * sw];
        let ys: Vec<_> = (0..h).map(|y| bilinear_taps(y, sh, h)).collect();
        let xs: Vec<_> = (0..w).map(|x| bilinear_taps(x, sw, w)).collect();
        for ch in 0..c {
            let plane = &mut gx[ch * sh * sw..(ch + 1) * sh * sw];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = S::from_f64(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = S::from_f64(fx);
                    let go = grad_out[(ch * h + oy) * w + ox];
                    let top = go * (S::ONE - fy);
                    let bot = go * fy;
                    plane[y0 * sw + x0] += top * (S::ONE - fx);
                    plane[y0 * sw + x1] += top * fx;
                    plane[y1 * sw + x0] += bot * (S::ONE - fx);
                    plane[y1 * sw + x1] += bot * fx;
                }
            }
        }
        gx
    }
}
