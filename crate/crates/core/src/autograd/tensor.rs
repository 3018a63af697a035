use std::fmt;

/// n-dimensional array of 64-bit floats, row-major. The value type flowing
/// through the tape; also the storage for model parameters. `grad` is
/// populated on tape nodes by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutogradError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(AutogradError::Shape(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutogradError::Shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).unwrap()
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).unwrap()
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|i| f(i)).collect()).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a scalar (shape `[1]`) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Add `delta` into `grad`, allocating zeros first if absent.
    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AutogradError {
    /// Incompatible or invalid tensor shapes.
    Shape(String),
    /// An op produced NaN or infinity.
    NonFinite(&'static str),
    /// Backward was requested on a non-scalar value.
    NotScalar(Vec<usize>),
    /// Bad argument (stride, axis, epsilon, class index, target value, ...).
    Invalid(String),
}

impl fmt::Display for AutogradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutogradError::Shape(msg) => write!(f, "shape error: {msg}"),
            AutogradError::NonFinite(op) => write!(f, "non-finite value produced by {op}"),
            AutogradError::NotScalar(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            AutogradError::Invalid(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl std::error::Error for AutogradError {}
