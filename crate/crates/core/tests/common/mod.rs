#![allow(dead_code)]

use osmotic::diffuser::ContextBatch;
use osmotic::losses::{align_loss, pres_loss, total_loss, LossConfig};
use osmotic::model::{AgentModel, EmbeddingBatch, EncoderParams, WindowBatch};
use osmotic::numerics::{
    finite_difference_grad, gru_backward, gru_forward, linear_backward, linear_forward,
    relative_error, GruParams, LinearParams, Mat, Parameters, RngStream,
};
use osmotic::AgentId;

pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub op: &'static str,
    pub seed: u64,
    pub error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < GRAD_TOLERANCE
    }
}

pub fn random_mat(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.normal(0.0, std)).collect(),
    )
    .unwrap()
}

pub fn embedding_batch(m: Mat) -> EmbeddingBatch {
    EmbeddingBatch {
        agent_id: AgentId(0),
        indices: (0..m.rows()).collect(),
        embeddings: m,
    }
}

pub fn context_for(m: Mat) -> ContextBatch {
    ContextBatch {
        indices: (0..m.rows()).collect(),
        embeddings: m,
    }
}

pub fn window_batch(rng: &mut RngStream, b: usize, l: usize, k: usize) -> WindowBatch {
    WindowBatch {
        agent_id: AgentId(0),
        windows: (0..b).map(|_| random_mat(rng, l, k, 1.0)).collect(),
        indices: (l - 1..l - 1 + b).collect(),
    }
}

fn weights(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

fn weighted(m: &Mat, w: &[f64]) -> f64 {
    m.as_slice().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn linear_case(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (b, i, o) = (
        1 + seed as usize % 5,
        2 + seed as usize % 7,
        1 + seed as usize % 6,
    );
    let p = LinearParams::init(i, o, &mut rng);
    let x = random_mat(&mut rng, b, i, 1.0);
    let w = weights(&mut rng, b * o);
    let (_, cache) = linear_forward(&x, &p).unwrap();
    let dy = Mat::from_vec(b, o, w.clone()).unwrap();
    let (g, dx) = linear_backward(&p, &cache, &dy).unwrap();
    let num_p = finite_difference_grad(
        |flat| {
            let mut q = p.clone();
            q.assign_flat(flat);
            weighted(&linear_forward(&x, &q).unwrap().0, &w)
        },
        &p.flatten(),
        EPS,
    );
    let num_x = finite_difference_grad(
        |flat| {
            weighted(
                &linear_forward(&Mat::from_vec(b, i, flat.to_vec()).unwrap(), &p)
                    .unwrap()
                    .0,
                &w,
            )
        },
        x.as_slice(),
        EPS,
    );
    relative_error(&g.flatten(), &num_p).max(relative_error(dx.as_slice(), &num_x))
}

fn gru_case(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (l, k, h) = (
        1 + seed as usize % 10,
        1 + seed as usize % 3,
        3 + seed as usize % 6,
    );
    let p = GruParams::init(k, h, &mut rng);
    let x = random_mat(&mut rng, l, k, 1.0);
    let h0: Vec<f64> = (0..h).map(|_| rng.normal(0.0, 0.5)).collect();
    let w = weights(&mut rng, h);
    let f = |p: &GruParams, x: &Mat| {
        let (s, _) = gru_forward(x, &h0, p).unwrap();
        s.row(s.rows() - 1)
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let (_, cache) = gru_forward(&x, &h0, &p).unwrap();
    let (g, dx) = gru_backward(&p, &cache, &w).unwrap();
    let num_p = finite_difference_grad(
        |flat| {
            let mut q = p.clone();
            q.assign_flat(flat);
            f(&q, &x)
        },
        &p.flatten(),
        EPS,
    );
    let num_x = finite_difference_grad(
        |flat| f(&p, &Mat::from_vec(l, k, flat.to_vec()).unwrap()),
        x.as_slice(),
        EPS,
    );
    relative_error(&g.flatten(), &num_p).max(relative_error(dx.as_slice(), &num_x))
}

fn align_case(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let b = 1 + seed as usize % 50;
    let e = random_mat(&mut rng, b, 5, 1.0);
    let ctx = context_for(random_mat(&mut rng, b, 5, 1.0));
    let out = align_loss(&embedding_batch(e.clone()), &ctx).unwrap();
    let num = finite_difference_grad(
        |flat| {
            align_loss(
                &embedding_batch(Mat::from_vec(b, 5, flat.to_vec()).unwrap()),
                &ctx,
            )
            .unwrap()
            .value
        },
        e.as_slice(),
        EPS,
    );
    relative_error(out.grad.as_slice(), &num)
}

fn pres_case(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let b = 2 + seed as usize % 49;
    let t = [0.1, 0.5, 1.0][seed as usize % 3];
    let e = random_mat(&mut rng, b, 5, 1.0);
    let out = pres_loss(&embedding_batch(e.clone()), t).unwrap();
    let num = finite_difference_grad(
        |flat| {
            pres_loss(
                &embedding_batch(Mat::from_vec(b, 5, flat.to_vec()).unwrap()),
                t,
            )
            .unwrap()
            .value
        },
        e.as_slice(),
        EPS,
    );
    relative_error(out.grad.as_slice(), &num)
}

fn total_case(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let b = 2 + seed as usize % 30;
    let cfg = LossConfig {
        lambda: rng.uniform(0.0, 1.0),
        ..LossConfig::default()
    };
    let e = random_mat(&mut rng, b, 5, 1.0);
    let ctx = context_for(random_mat(&mut rng, b, 5, 1.0));
    let out = total_loss(&embedding_batch(e.clone()), &ctx, &cfg).unwrap();
    let num = finite_difference_grad(
        |flat| {
            total_loss(
                &embedding_batch(Mat::from_vec(b, 5, flat.to_vec()).unwrap()),
                &ctx,
                &cfg,
            )
            .unwrap()
            .value
        },
        e.as_slice(),
        EPS,
    );
    relative_error(out.grad.as_slice(), &num)
}

/// Total loss as a function of every encoder parameter.
fn composite_case(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (b, l, k) = (
        2 + seed as usize % 6,
        2 + seed as usize % 9,
        1 + seed as usize % 2,
    );
    let model = AgentModel::new(AgentId(0), k, &mut rng);
    let batch = window_batch(&mut rng, b, l, k);
    let mut ctx = context_for(random_mat(&mut rng, b, 5, 0.5));
    ctx.indices = batch.indices.clone();
    let cfg = LossConfig {
        lambda: [0.5, 0.7, 0.9][seed as usize % 3],
        ..LossConfig::default()
    };
    let (emb, cache) = model.encode(&batch).unwrap();
    let loss = total_loss(&emb, &ctx, &cfg).unwrap();
    let g = model.encode_backward(&cache, &loss.grad).unwrap();
    let num = finite_difference_grad(
        |flat| {
            let mut p = EncoderParams::zeros(k);
            p.assign_flat(flat);
            let m = AgentModel::from_params(AgentId(0), p);
            total_loss(&m.encode(&batch).unwrap().0, &ctx, &cfg)
                .unwrap()
                .value
        },
        &model.params.flatten(),
        EPS,
    );
    relative_error(&g.flatten(), &num)
}

/// 120 seeded cases over every backward operation, the last 20 through the
/// whole encoder-plus-loss path.
pub fn gradient_suite() -> Vec<GradCase> {
    type Check = fn(u64) -> f64;
    let ops: [(&'static str, Check, u64); 6] = [
        ("linear", linear_case, 20),
        ("gru", gru_case, 20),
        ("align", align_case, 20),
        ("pres", pres_case, 20),
        ("total", total_case, 20),
        ("encoder+total", composite_case, 20),
    ];
    ops.iter()
        .flat_map(|&(op, check, n)| {
            (0..n).map(move |s| {
                let seed = 1000 + s;
                GradCase {
                    op,
                    seed,
                    error: check(seed),
                }
            })
        })
        .collect()
}
