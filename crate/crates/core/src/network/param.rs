use rand::Rng;

/// A named tensor owned by a layer. Trainable parameters carry a gradient
/// buffer of the same length; running statistics do not.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(name: impl Into<String>, shape: &[usize], value: Vec<f32>) -> Self {
        let len = value.len();
        assert_eq!(len, shape.iter().product::<usize>(), "value length matches shape");
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; len],
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Vec<f32>) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "value length matches shape");
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::trainable(name, shape, vec![0.0; shape.iter().product()])
    }

    /// Kaiming-uniform initialization for ReLU networks: `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self::trainable(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Row-major `c = a * b` (or `c += a * b`), with `a` logically `m x k` and
/// `b` logically `k x n`. `a_t` / `b_t` mean the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these row/column strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
