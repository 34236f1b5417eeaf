//! Single-layer GRU with separate input and hidden biases per gate.
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use super::{sigmoid, Mat, Parameters, RngStream};
use crate::error::{Error, Result};

/// Weights and biases of one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_input: Mat,
    pub w_hidden: Mat,
    pub b_input: Vec<f64>,
    pub b_hidden: Vec<f64>,
}

impl GateParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Mat::zeros(hidden, input),
            w_hidden: Mat::zeros(hidden, hidden),
            b_input: vec![0.0; hidden],
            b_hidden: vec![0.0; hidden],
        }
    }

    /// `W_i x + b_i + W_h h + b_h` split into its input and hidden halves.
    fn pre_activations(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut a_in = self.b_input.clone();
        self.w_input.mul_vec_acc(x, &mut a_in);
        let mut a_h = self.b_hidden.clone();
        self.w_hidden.mul_vec_acc(h, &mut a_h);
        (a_in, a_h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub reset: GateParams,
    pub update: GateParams,
    pub candidate: GateParams,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            reset: GateParams::zeros(input, hidden),
            update: GateParams::zeros(input, hidden),
            candidate: GateParams::zeros(input, hidden),
        }
    }

    /// Uniform in `[-1/√hidden, 1/√hidden]` for every scalar.
    pub fn init(input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input, hidden);
        for (_, block) in p.blocks_mut() {
            block
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-bound, bound));
        }
        p
    }

    pub fn input_width(&self) -> usize {
        self.reset.w_input.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.reset.w_input.rows()
    }

    fn gates(&self) -> [(&'static str, &GateParams); 3] {
        [
            ("reset", &self.reset),
            ("update", &self.update),
            ("candidate", &self.candidate),
        ]
    }
}

impl Parameters for GruParams {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        const NAMES: [[&str; 4]; 3] = [
            [
                "gru.reset.w_input",
                "gru.reset.w_hidden",
                "gru.reset.b_input",
                "gru.reset.b_hidden",
            ],
            [
                "gru.update.w_input",
                "gru.update.w_hidden",
                "gru.update.b_input",
                "gru.update.b_hidden",
            ],
            [
                "gru.candidate.w_input",
                "gru.candidate.w_hidden",
                "gru.candidate.b_input",
                "gru.candidate.b_hidden",
            ],
        ];
        self.gates()
            .into_iter()
            .zip(NAMES)
            .flat_map(|((_, g), n)| {
                [
                    (n[0], g.w_input.as_slice()),
                    (n[1], g.w_hidden.as_slice()),
                    (n[2], g.b_input.as_slice()),
                    (n[3], g.b_hidden.as_slice()),
                ]
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let names: Vec<&'static str> = {
            let this: &Self = self;
            this.blocks().into_iter().map(|(n, _)| n).collect()
        };
        let mut out = Vec::with_capacity(12);
        for g in [&mut self.reset, &mut self.update, &mut self.candidate] {
            out.push(g.w_input.as_mut_slice());
            out.push(g.w_hidden.as_mut_slice());
            out.push(g.b_input.as_mut_slice());
            out.push(g.b_hidden.as_mut_slice());
        }
        names.into_iter().zip(out).collect()
    }
}

#[derive(Debug, Clone)]
struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// `W_hn h_prev + b_hn`, needed for the reset-gate gradient.
    hn: Vec<f64>,
}

/// Activations recorded by [`gru_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    input: usize,
    hidden: usize,
    steps: Vec<GruStep>,
}

impl GruCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_hidden(&self) -> Vec<f64> {
        let s = self.steps.last().expect("non-empty cache");
        s.z.iter()
            .zip(&s.n)
            .zip(&s.h_prev)
            .map(|((z, n), h)| (1.0 - z) * n + z * h)
            .collect()
    }
}

/// Runs the GRU over the rows of `inputs` (one row per time step).
///
/// Returns the hidden states `h_1..h_L` as rows of an `L × hidden` matrix.
pub fn gru_forward(inputs: &Mat, h0: &[f64], params: &GruParams) -> Result<(Mat, GruCache)> {
    let (input, hidden) = (params.input_width(), params.hidden_width());
    if inputs.rows() == 0 {
        return Err(Error::Precondition(
            "gru sequence must have at least one step".into(),
        ));
    }
    if inputs.cols() != input {
        return Err(Error::shape(
            "gru inputs",
            format!("{input} features per step"),
            format!("{} features", inputs.cols()),
        ));
    }
    if h0.len() != hidden {
        return Err(Error::shape("gru h0", hidden, h0.len()));
    }

    let mut states = Mat::zeros(inputs.rows(), hidden);
    let mut steps = Vec::with_capacity(inputs.rows());
    let mut h = h0.to_vec();
    for t in 0..inputs.rows() {
        let x = inputs.row(t);
        let (ri, rh) = params.reset.pre_activations(x, &h);
        let (zi, zh) = params.update.pre_activations(x, &h);
        let (ni, hn) = params.candidate.pre_activations(x, &h);
        let r: Vec<f64> = ri.iter().zip(&rh).map(|(a, b)| sigmoid(a + b)).collect();
        let z: Vec<f64> = zi.iter().zip(&zh).map(|(a, b)| sigmoid(a + b)).collect();
        let n: Vec<f64> = (0..hidden).map(|k| (ni[k] + r[k] * hn[k]).tanh()).collect();
        let h_next: Vec<f64> = (0..hidden)
            .map(|k| (1.0 - z[k]) * n[k] + z[k] * h[k])
            .collect();
        debug_assert!(h_next.iter().all(|v| v.is_finite()) || !inputs.is_finite());
        states.row_mut(t).copy_from_slice(&h_next);
        steps.push(GruStep {
            x: x.to_vec(),
            h_prev: std::mem::replace(&mut h, h_next),
            r,
            z,
            n,
            hn,
        });
    }
    Ok((
        states,
        GruCache {
            input,
            hidden,
            steps,
        },
    ))
}

/// Backpropagation through time from a cotangent on the final hidden state.
///
/// Returns parameter gradients and the cotangent of every input row.
pub fn gru_backward(
    params: &GruParams,
    cache: &GruCache,
    d_h_last: &[f64],
) -> Result<(GruParams, Mat)> {
    let (input, hidden) = (params.input_width(), params.hidden_width());
    if cache.input != input || cache.hidden != hidden || cache.steps.is_empty() {
        return Err(Error::Contract(format!(
            "gru cache recorded {}x{} over {} steps, parameters are {input}x{hidden}",
            cache.input,
            cache.hidden,
            cache.steps.len()
        )));
    }
    if d_h_last.len() != hidden {
        return Err(Error::shape("gru d_h_last", hidden, d_h_last.len()));
    }

    let mut grads = GruParams::zeros(input, hidden);
    let mut d_inputs = Mat::zeros(cache.steps.len(), input);
    let mut dh = d_h_last.to_vec();
    if dh.iter().all(|v| *v == 0.0) {
        return Ok((grads, d_inputs));
    }

    for (t, s) in cache.steps.iter().enumerate().rev() {
        let mut dh_prev: Vec<f64> = (0..hidden).map(|k| dh[k] * s.z[k]).collect();
        let mut da_n = vec![0.0; hidden];
        let mut da_z = vec![0.0; hidden];
        let mut da_r = vec![0.0; hidden];
        let mut d_hn = vec![0.0; hidden];
        for k in 0..hidden {
            let dn = dh[k] * (1.0 - s.z[k]);
            let dz = dh[k] * (s.h_prev[k] - s.n[k]);
            da_n[k] = dn * (1.0 - s.n[k] * s.n[k]);
            da_z[k] = dz * s.z[k] * (1.0 - s.z[k]);
            d_hn[k] = da_n[k] * s.r[k];
            let dr = da_n[k] * s.hn[k];
            da_r[k] = dr * s.r[k] * (1.0 - s.r[k]);
        }

        let dx = d_inputs.row_mut(t);
        // The candidate gate's hidden half sees r ⊙ (…), so its cotangent differs.
        for (gate, grad, d_in, d_hid) in [
            (&params.reset, &mut grads.reset, &da_r, &da_r),
            (&params.update, &mut grads.update, &da_z, &da_z),
            (&params.candidate, &mut grads.candidate, &da_n, &d_hn),
        ] {
            grad.w_input.add_outer(d_in, &s.x);
            grad.w_hidden.add_outer(d_hid, &s.h_prev);
            for k in 0..hidden {
                grad.b_input[k] += d_in[k];
                grad.b_hidden[k] += d_hid[k];
            }
            gate.w_input.mul_vec_t_acc(d_in, dx);
            gate.w_hidden.mul_vec_t_acc(d_hid, &mut dh_prev);
        }
        dh = dh_prev;
    }
    Ok((grads, d_inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_difference_grad, relative_error};

    fn random_inputs(rng: &mut RngStream, steps: usize, width: usize) -> Mat {
        Mat::from_vec(
            steps,
            width,
            (0..steps * width).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_matches_layer_formula() {
        for n in 1..=6 {
            assert_eq!(GruParams::zeros(n, 20).scalar_count(), 60 * n + 1320);
        }
        assert_eq!(GruParams::zeros(1, 20).scalar_count(), 1380);
    }

    #[test]
    fn zero_params_keep_zero_state() {
        let p = GruParams::zeros(3, 20);
        let mut rng = RngStream::new(0);
        let (states, _) = gru_forward(&random_inputs(&mut rng, 7, 3), &[0.0; 20], &p).unwrap();
        assert!(states.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn last_hidden_matches_final_state_row() {
        let mut rng = RngStream::new(11);
        let p = GruParams::init(2, 5, &mut rng);
        let (states, cache) = gru_forward(&random_inputs(&mut rng, 4, 2), &[0.0; 5], &p).unwrap();
        assert_eq!(cache.last_hidden(), states.row(3));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = RngStream::new(2);
        let p = GruParams::init(2, 4, &mut rng);
        let (_, cache) = gru_forward(&random_inputs(&mut rng, 5, 2), &[0.0; 4], &p).unwrap();
        let (g, dx) = gru_backward(&p, &cache, &[0.0; 4]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors_name_operand() {
        let p = GruParams::zeros(2, 4);
        let err = gru_forward(&Mat::zeros(3, 1), &[0.0; 4], &p).unwrap_err();
        assert!(err.to_string().contains("gru inputs"));
        let err = gru_forward(&Mat::zeros(3, 2), &[0.0; 3], &p).unwrap_err();
        assert!(err.to_string().contains("gru h0"));
    }

    #[test]
    fn mismatched_cache_is_a_contract_violation() {
        let mut rng = RngStream::new(3);
        let small = GruParams::init(2, 4, &mut rng);
        let big = GruParams::init(2, 6, &mut rng);
        let (_, cache) = gru_forward(&random_inputs(&mut rng, 3, 2), &[0.0; 4], &small).unwrap();
        assert!(matches!(
            gru_backward(&big, &cache, &[1.0; 6]),
            Err(Error::Contract(_))
        ));
    }

    fn check_against_finite_differences(seed: u64, steps: usize, input: usize, hidden: usize) {
        let mut rng = RngStream::new(seed);
        let p = GruParams::init(input, hidden, &mut rng);
        let x = random_inputs(&mut rng, steps, input);
        let h0: Vec<f64> = (0..hidden).map(|_| rng.normal(0.0, 0.5)).collect();
        let w: Vec<f64> = (0..hidden).map(|_| rng.normal(0.0, 1.0)).collect();
        let objective = |p: &GruParams, x: &Mat| {
            let (states, _) = gru_forward(x, &h0, p).unwrap();
            dot(states.row(states.rows() - 1), &w)
        };

        let (_, cache) = gru_forward(&x, &h0, &p).unwrap();
        let (g, dx) = gru_backward(&p, &cache, &w).unwrap();

        let numeric = finite_difference_grad(
            |flat| {
                let mut q = p.clone();
                q.assign_flat(flat);
                objective(&q, &x)
            },
            &p.flatten(),
            1e-5,
        );
        let err = relative_error(&g.flatten(), &numeric);
        assert!(err < 1e-4, "seed {seed}, L={steps}: param rel err {err}");

        let numeric_x = finite_difference_grad(
            |flat| objective(&p, &Mat::from_vec(steps, input, flat.to_vec()).unwrap()),
            x.as_slice(),
            1e-5,
        );
        let err = relative_error(dx.as_slice(), &numeric_x);
        assert!(err < 1e-4, "seed {seed}, L={steps}: input rel err {err}");
    }

    #[test]
    fn single_step_gradients_match_finite_differences() {
        for seed in 0..10 {
            check_against_finite_differences(seed, 1, 3, 6);
        }
    }

    #[test]
    fn ten_step_gradients_match_finite_differences() {
        for seed in 100..110 {
            check_against_finite_differences(seed, 10, 2, 8);
        }
    }
}
