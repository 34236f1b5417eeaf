use super::{Mat, Parameters, RngStream};
use crate::error::{Error, Result};

/// Fully connected layer `y = W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform in `[-1/√input, 1/√input]`.
    pub fn init(input: usize, output: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut p = Self::zeros(input, output);
        for (_, block) in p.blocks_mut() {
            block
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-bound, bound));
        }
        p
    }

    pub fn input_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.rows()
    }
}

impl Parameters for LinearParams {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("linear.weight", self.weight.as_slice()),
            ("linear.bias", &self.bias),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("linear.weight", self.weight.as_mut_slice()),
            ("linear.bias", &mut self.bias),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Mat,
}

/// Applies the layer to every row of `x`.
pub fn linear_forward(x: &Mat, params: &LinearParams) -> Result<(Mat, LinearCache)> {
    if x.cols() != params.input_width() {
        return Err(Error::shape(
            "linear input",
            format!("{} columns", params.input_width()),
            format!("{} columns", x.cols()),
        ));
    }
    let mut y = Mat::zeros(x.rows(), params.output_width());
    for r in 0..x.rows() {
        let out = y.row_mut(r);
        out.copy_from_slice(&params.bias);
        params.weight.mul_vec_acc(x.row(r), out);
    }
    debug_assert!(y.is_finite() || !x.is_finite());
    Ok((y, LinearCache { input: x.clone() }))
}

/// Gradients summed over the batch, plus the cotangent of the input.
pub fn linear_backward(
    params: &LinearParams,
    cache: &LinearCache,
    d_out: &Mat,
) -> Result<(LinearParams, Mat)> {
    if cache.input.cols() != params.input_width() {
        return Err(Error::Contract(format!(
            "linear cache holds {}-wide inputs but layer expects {}",
            cache.input.cols(),
            params.input_width()
        )));
    }
    if d_out.shape() != (cache.input.rows(), params.output_width()) {
        return Err(Error::shape(
            "linear output cotangent",
            format!("{}x{}", cache.input.rows(), params.output_width()),
            format!("{}x{}", d_out.rows(), d_out.cols()),
        ));
    }
    let mut grads = LinearParams::zeros(params.input_width(), params.output_width());
    let mut d_x = Mat::zeros(cache.input.rows(), params.input_width());
    for r in 0..d_out.rows() {
        let dy = d_out.row(r);
        grads.weight.add_outer(dy, cache.input.row(r));
        for (b, d) in grads.bias.iter_mut().zip(dy) {
            *b += d;
        }
        params.weight.mul_vec_t_acc(dy, d_x.row_mut(r));
    }
    Ok((grads, d_x))
}
