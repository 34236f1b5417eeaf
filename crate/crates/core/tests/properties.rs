mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::{context_for, embedding_batch, window_batch};
use osmotic::diffuser::{cluster_agents, osmotic_centroid, step_broadcast, SubContextPartition};
use osmotic::losses::{align_loss, pres_loss, total_loss, LossConfig};
use osmotic::metrics::{context_accuracy, cosine, modified_similarity};
use osmotic::model::{AgentModel, EmbeddingBatch, EncoderParams};
use osmotic::numerics::{adam_step, AdamConfig, AdamState, GruParams, Mat, Parameters, RngStream};
use osmotic::AgentId;

fn rows(b: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, b * 5)
        .prop_filter("rows need non-zero norm", move |v| {
            v.chunks(5)
                .all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        })
        .prop_map(move |v| Mat::from_vec(b, 5, v).unwrap())
}

fn sized_rows() -> impl Strategy<Value = Mat> {
    (2usize..12).prop_flat_map(rows)
}

fn vec5() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 5)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn submissions(mats: &[Mat]) -> BTreeMap<AgentId, EmbeddingBatch> {
    mats.iter()
        .enumerate()
        .map(|(i, m)| {
            let mut b = embedding_batch(m.clone());
            b.agent_id = AgentId(i);
            (AgentId(i), b)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gru_parameter_count_identity(n in 1usize..16) {
        let mut rng = RngStream::new(n as u64);
        prop_assert_eq!(GruParams::init(n, 20, &mut rng).scalar_count(), 60 * n + 1320);
    }

    #[test]
    fn align_is_non_negative_and_zero_only_on_identity(e in rows(6), c in rows(6)) {
        let v = align_loss(&embedding_batch(e.clone()), &context_for(c.clone())).unwrap().value;
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, e == c);
        prop_assert_eq!(align_loss(&embedding_batch(e.clone()), &context_for(e)).unwrap().value, 0.0);
    }

    #[test]
    fn pres_ignores_uniform_positive_rescaling(e in sized_rows(), scale in 0.01f64..100.0) {
        let base = pres_loss(&embedding_batch(e.clone()), 0.1).unwrap().value;
        let mut scaled = e;
        scaled.scale(scale);
        let v = pres_loss(&embedding_batch(scaled), 0.1).unwrap().value;
        prop_assert!((v - base).abs() < 1e-10, "{base} vs {v}");
    }

    #[test]
    fn total_gradient_is_lambda_combination(e in rows(7), c in rows(7), lambda in 0.0f64..=1.0) {
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let (eb, cb) = (embedding_batch(e), context_for(c));
        let t = total_loss(&eb, &cb, &cfg).unwrap();
        let a = align_loss(&eb, &cb).unwrap();
        let p = pres_loss(&eb, cfg.temperature).unwrap();
        for ((g, ga), gp) in t.grad.as_slice().iter().zip(a.grad.as_slice()).zip(p.grad.as_slice()) {
            prop_assert!((g - (lambda * ga + (1.0 - lambda) * gp)).abs() < 1e-12);
        }
    }

    #[test]
    fn modified_similarity_laws(a in vec5(), b in vec5(), c in 0.01f64..50.0, beta in 1.0f64..4.0) {
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        let s = modified_similarity(&a, &b, beta).unwrap();
        prop_assert!((modified_similarity(&scaled, &b, beta).unwrap() - s).abs() < 1e-12);
        let cos = cosine(&a, &b).unwrap();
        prop_assert!((modified_similarity(&a, &b, 1.0).unwrap() - cos).abs() < 1e-12);
        prop_assert!(s.abs() <= cos.abs() + 1e-15);
    }

    #[test]
    fn centroid_is_optimal_and_order_free(a in rows(3), b in rows(3), c in rows(3),
                                          delta in prop::collection::vec(-0.1f64..0.1, 15)) {
        let centroid = osmotic_centroid(&[&a, &b, &c]).unwrap();
        let cost = |p: &Mat| -> f64 {
            [&a, &b, &c].iter().map(|m| {
                m.as_slice().iter().zip(p.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            }).sum()
        };
        let mut moved = centroid.clone();
        moved.as_mut_slice().iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
        prop_assert!(cost(&centroid) <= cost(&moved) + 1e-12);
        let back = osmotic_centroid(&[&c, &a, &b]).unwrap();
        for (x, y) in centroid.as_slice().iter().zip(back.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_is_idempotent(a in rows(4), b in rows(4), c in rows(4), split in 0usize..4) {
        let subs = submissions(&[a, b, c]);
        let partition = match split {
            0 => SubContextPartition::global([AgentId(0), AgentId(1), AgentId(2)]),
            1 => SubContextPartition::from_groups(1, vec![vec![AgentId(0), AgentId(2)], vec![AgentId(1)]]),
            2 => SubContextPartition::from_groups(1, vec![vec![AgentId(0)], vec![AgentId(1), AgentId(2)]]),
            _ => SubContextPartition::from_groups(1, vec![vec![AgentId(0)], vec![AgentId(1)], vec![AgentId(2)]]),
        };
        prop_assert_eq!(step_broadcast(&subs, &partition).unwrap(), step_broadcast(&subs, &partition).unwrap());
    }

    #[test]
    fn clustering_is_sound_and_label_free(mats in prop::collection::vec(rows(5), 2..6),
                                          tau in 0.0f64..1.0, shift in 1usize..5) {
        let partition = cluster_agents(&submissions(&mats), tau, 2.0, 2).unwrap();
        let scores = partition.scores.clone().unwrap();
        // every multi-member group is connected through edges at or above tau
        for g in partition.groups.iter().filter(|g| g.len() > 1) {
            for a in g {
                prop_assert!(g.iter().any(|b| b != a && scores.get(*a, *b).unwrap() >= tau));
            }
        }
        // agents in different groups never share an edge
        for (i, g) in partition.groups.iter().enumerate() {
            for h in &partition.groups[i + 1..] {
                for a in g { for b in h { prop_assert!(scores.get(*a, *b).unwrap() < tau); } }
            }
        }
        // rotating the agent labels rotates the partition
        let n = mats.len();
        let rotated: Vec<Mat> = (0..n).map(|i| mats[(i + shift) % n].clone()).collect();
        let other = cluster_agents(&submissions(&rotated), tau, 2.0, 2).unwrap();
        let relabel = |p: &SubContextPartition| -> Vec<Vec<usize>> {
            let mut gs: Vec<Vec<usize>> = p.groups.iter()
                .map(|g| { let mut v: Vec<usize> = g.iter().map(|a| (a.0 + n - shift % n) % n).collect(); v.sort(); v })
                .collect();
            gs.sort();
            gs
        };
        let expected: Vec<Vec<usize>> = other.groups.iter().map(|g| g.iter().map(|a| a.0).collect()).collect();
        prop_assert_eq!(relabel(&partition), expected);
    }

    #[test]
    fn accuracy_ignores_agent_and_time_order(a in rows(6), b in rows(6), c in rows(6), cut in 1usize..6) {
        let ids = [AgentId(0), AgentId(1), AgentId(2)];
        let emb: BTreeMap<_, _> = ids.iter().copied().zip([a.clone(), b.clone(), c.clone()]).collect();
        let partition = SubContextPartition::global(ids);
        let base = context_accuracy(&emb, &partition).unwrap();
        let swapped: BTreeMap<_, _> = ids.iter().copied().zip([c, a, b]).collect();
        prop_assert!((context_accuracy(&swapped, &partition).unwrap() - base).abs() < 1e-12);
        let rotate = |m: &Mat| {
            let order: Vec<usize> = (cut..6).chain(0..cut).collect();
            Mat::from_rows(&order.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let rotated: BTreeMap<_, _> = emb.iter().map(|(k, m)| (*k, rotate(m))).collect();
        prop_assert!((context_accuracy(&rotated, &partition).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn adam_keeps_second_moments_non_negative_and_counts_steps(
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 105), 1..5)
    ) {
        let mut rng = RngStream::new(3);
        let mut p = osmotic::numerics::LinearParams::init(20, 5, &mut rng);
        let mut state = AdamState::for_params(&p);
        for (step, g) in grads.iter().enumerate() {
            let mut gp = p.clone();
            gp.assign_flat(g);
            adam_step(&mut p, &gp, &mut state, &AdamConfig::default()).unwrap();
            prop_assert_eq!(state.t, step as u64 + 1);
            prop_assert!(state.v.iter().flatten().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn single_small_step_descends_on_the_same_batch() {
    let adam = AdamConfig::with_lr(1e-5);
    let cfg = LossConfig::default();
    let mut descended = 0;
    for trial in 0..1000u64 {
        let mut rng = RngStream::new(trial);
        let k = 1 + trial as usize % 2;
        let mut model = AgentModel::new(AgentId(0), k, &mut rng);
        let batch = window_batch(&mut rng, 6, 5, k);
        let mut ctx = context_for(common::random_mat(&mut rng, 6, 5, 0.3));
        ctx.indices = batch.indices.clone();
        let (emb, cache) = model.encode(&batch).unwrap();
        let before = total_loss(&emb, &ctx, &cfg).unwrap();
        let g = model.encode_backward(&cache, &before.grad).unwrap();
        model.apply_update(&g, &adam).unwrap();
        let after = total_loss(&model.encode(&batch).unwrap().0, &ctx, &cfg).unwrap();
        if after.value < before.value {
            descended += 1;
        }
    }
    assert!(descended >= 950, "{descended}/1000 trials descended");
}

#[test]
fn preservation_alone_spreads_embeddings() {
    let mut rng = RngStream::new(11);
    let mut model = AgentModel::new(AgentId(0), 1, &mut rng);
    let batch = window_batch(&mut rng, 20, 10, 1);
    let spread = |m: &AgentModel| {
        let e = m.encode(&batch).unwrap().0.embeddings;
        let unit: Vec<Vec<f64>> = e
            .row_iter()
            .map(|r| {
                let n = osmotic::numerics::norm(r);
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut sum = 0.0;
        for i in 0..unit.len() {
            for j in i + 1..unit.len() {
                sum += unit[i]
                    .iter()
                    .zip(&unit[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        sum
    };
    let start = spread(&model);
    let adam = AdamConfig::default();
    for _ in 0..100 {
        let (emb, cache) = model.encode(&batch).unwrap();
        let loss = pres_loss(&emb, 0.1).unwrap();
        let g = model.encode_backward(&cache, &loss.grad).unwrap();
        model.apply_update(&g, &adam).unwrap();
    }
    let end = spread(&model);
    assert!(end > start, "pairwise spread {start} -> {end}");
}

#[test]
fn zero_gradient_update_is_a_fixed_point() {
    let mut rng = RngStream::new(2);
    let mut model = AgentModel::new(AgentId(0), 2, &mut rng);
    let before = model.params.clone();
    model
        .apply_update(&EncoderParams::zeros(2), &AdamConfig::default())
        .unwrap();
    assert_eq!(model.params, before);
}
