use std::fmt::Debug;

use num_traits::Float;

/// Scalar type the network runs in: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c`, row-major; `op` transposes when the flag is set.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap()
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows x cols) view of a row-major buffer stored as cols x rows when transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                // SAFETY: bounds asserted above; strides describe the same buffers.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense (batch, channels, height, width) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub dims: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>(), "payload length must equal product of dims");
        Tensor4 { dims, data }
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Samples of item `n` (all channels).
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.dims[1] * self.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.dims[1] * self.plane();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }
}
