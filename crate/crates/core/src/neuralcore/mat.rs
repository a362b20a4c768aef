use crate::error::{Error, Result};
use crate::exec::{Exec, ROW_CHUNK};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by `index`, in order.
    pub fn gather_rows(&self, index: &[u32]) -> Mat {
        let mut out = Mat::zeros(index.len(), self.cols);
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i as usize));
        }
        out
    }

    /// Column sums, accumulated chunk by chunk in row order.
    pub fn column_sums(&self, exec: Exec) -> Vec<f64> {
        let cols = self.cols;
        exec.reduce_chunks(
            self.rows,
            ROW_CHUNK,
            |range| {
                let mut acc = vec![0.0; cols];
                for r in range {
                    axpy(&mut acc, 1.0, self.row(r));
                }
                acc
            },
            |mut a, b| {
                axpy(&mut a, 1.0, &b);
                a
            },
        )
        .unwrap_or_else(|| vec![0.0; cols])
    }
}

/// `y += a * x`
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x W^T + b` for `x: n x in`, `w: out x in`, `b: 1 x out`.
pub fn linear_forward(x: &Mat, w: &Mat, b: &Mat, exec: Exec) -> Mat {
    let wt = w.transpose();
    let mut y = Mat::zeros(x.rows, w.rows);
    let out = w.rows;
    exec.for_row_chunks(&mut y.data, out, ROW_CHUNK, |first, chunk| {
        for (k, yrow) in chunk.chunks_mut(out).enumerate() {
            yrow.copy_from_slice(&b.data);
            for (i, &xv) in x.row(first + k).iter().enumerate() {
                if xv != 0.0 {
                    axpy(yrow, xv, wt.row(i));
                }
            }
        }
    });
    y
}

/// `gy W`, the input gradient of [`linear_forward`].
pub fn linear_input_grad(gy: &Mat, w: &Mat, exec: Exec) -> Mat {
    let mut gx = Mat::zeros(gy.rows, w.cols);
    let cols = w.cols;
    exec.for_row_chunks(&mut gx.data, cols, ROW_CHUNK, |first, chunk| {
        for (k, grow) in chunk.chunks_mut(cols).enumerate() {
            for (o, &g) in gy.row(first + k).iter().enumerate() {
                if g != 0.0 {
                    axpy(grow, g, w.row(o));
                }
            }
        }
    });
    gx
}

/// `gy^T x`, the weight gradient of [`linear_forward`], reduced over fixed
/// row chunks.
pub fn linear_weight_grad(gy: &Mat, x: &Mat, exec: Exec) -> Mat {
    let (inp, out) = (x.cols, gy.cols);
    let gwt = exec
        .reduce_chunks(
            x.rows,
            ROW_CHUNK,
            |range| {
                // accumulated transposed so the inner loop runs over outputs
                let mut acc = Mat::zeros(inp, out);
                for r in range {
                    let grow = gy.row(r);
                    for (i, &xv) in x.row(r).iter().enumerate() {
                        if xv != 0.0 {
                            axpy(acc.row_mut(i), xv, grow);
                        }
                    }
                }
                acc
            },
            |mut a, b| {
                a.add_assign(&b);
                a
            },
        )
        .unwrap_or_else(|| Mat::zeros(inp, out));
    gwt.transpose()
}
