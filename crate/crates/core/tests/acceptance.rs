#![allow(clippy::needless_range_loop)]

//! Acceptance suite: one test per shipped guarantee, each printing a
//! PASS line (run with `--nocapture` to see them). Tolerances are pinned in
//! the assertions, not in helper configuration.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ota_core::bundle::{CheckpointBundle, ExpertEntry, SecondMoment};
use ota_core::container::{parse_container, serialize_container};
use ota_core::factor::{compress, stable_rank};
use ota_core::graft::{SaliencyMaskSet, SaliencyMethod, build_mask, ffg_saliency, kept_count};
use ota_core::merge::{OtaOptions, ota_merge};
use ota_core::tensor::NamedTensor;
use ota_core::trainer::{self, DataConfig, TrainConfig, task_loss, verify_fisher_proxy};
use ota_core::{DType, analysis};

fn t64(name: &str, data: Vec<f64>) -> NamedTensor {
    let n = data.len();
    NamedTensor::from_f64(name, vec![n], data).unwrap()
}

fn tensor_map(entries: Vec<NamedTensor>) -> BTreeMap<String, NamedTensor> {
    entries
        .into_iter()
        .map(|t| (t.name().to_string(), t))
        .collect()
}

fn expert_with_moments(
    id: &str,
    weights: Vec<NamedTensor>,
    moments: Vec<NamedTensor>,
) -> ExpertEntry {
    ExpertEntry {
        id: id.to_string(),
        weights: tensor_map(weights),
        moments: Some(
            moments
                .into_iter()
                .map(|t| (t.name().to_string(), SecondMoment::Full(t)))
                .collect(),
        ),
    }
}

fn maskset_from_bits(expert_id: &str, bits: &BTreeMap<String, Vec<f64>>) -> SaliencyMaskSet {
    let masks: BTreeMap<String, NamedTensor> = bits
        .iter()
        .map(|(name, b)| {
            (
                name.clone(),
                NamedTensor::from_f32(
                    name.clone(),
                    vec![b.len()],
                    b.iter().map(|&x| x as f32).collect(),
                )
                .unwrap(),
            )
        })
        .collect();
    let kept = masks.values().map(|m| m.count_nonzero()).sum();
    SaliencyMaskSet {
        expert_id: expert_id.to_string(),
        method: SaliencyMethod::Ffg,
        requested_density: 0.0,
        realized_kept_count: kept,
        masks,
        excluded: Default::default(),
    }
}

struct RandomInstance {
    bundle: CheckpointBundle,
    masks: BTreeMap<String, SaliencyMaskSet>,
    tensor_names: Vec<String>,
}

fn random_instance(rng: &mut ChaCha8Rng, n_experts: usize, n_params: usize) -> RandomInstance {
    // split parameters over one to three tensors
    let splits = match n_params {
        0..=15 => vec![n_params],
        16..=40 => vec![n_params / 2, n_params - n_params / 2],
        _ => vec![n_params / 3, n_params / 3, n_params - 2 * (n_params / 3)],
    };
    let names: Vec<String> = (0..splits.len()).map(|i| format!("w{i}")).collect();
    let base: Vec<NamedTensor> = names
        .iter()
        .zip(&splits)
        .map(|(name, &len)| {
            t64(
                name,
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        })
        .collect();
    let mut experts = Vec::new();
    let mut masks = BTreeMap::new();
    for e in 0..n_experts {
        let id = format!("e{e}");
        let mut weights = Vec::new();
        let mut moments = Vec::new();
        let mut bits = BTreeMap::new();
        for (name, &len) in names.iter().zip(&splits) {
            let base_vals = base.iter().find(|t| t.name() == name).unwrap().to_f64_vec();
            let w: Vec<f64> = base_vals
                .iter()
                .map(|x| x + rng.random_range(-0.5..0.5))
                .collect();
            let v: Vec<f64> = (0..len)
                .map(|_| {
                    let mag: f64 = rng.random_range(-2.0..2.0);
                    rng.random_range(0.0..1.0) * 10f64.powf(mag)
                })
                .collect();
            let b: Vec<f64> = (0..len)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect();
            weights.push(t64(name, w));
            moments.push(t64(name, v));
            bits.insert(name.clone(), b);
        }
        masks.insert(id.clone(), maskset_from_bits(&id, &bits));
        experts.push(expert_with_moments(&id, weights, moments));
    }
    RandomInstance {
        bundle: CheckpointBundle {
            base: tensor_map(base),
            experts,
        },
        masks,
        tensor_names: names,
    }
}

/// Direct evaluation of the preconditioned least-squares objective
/// sum_t ||delta - m_t o delta_t||^2_{P_t}.
fn objective(inst: &RandomInstance, epsilon: f64, candidate: &BTreeMap<String, Vec<f64>>) -> f64 {
    let mut total = 0.0;
    for expert in &inst.bundle.experts {
        for name in &inst.tensor_names {
            let w0 = inst.bundle.base[name].to_f64_vec();
            let e = expert.weights[name].to_f64_vec();
            let v = expert.moments.as_ref().unwrap()[name].values_f64();
            let m = &inst.masks[&expert.id].masks[name];
            let delta = &candidate[name];
            for i in 0..w0.len() {
                let p = v[i].sqrt() + epsilon;
                let masked = m.get_f64(i) * (e[i] - w0[i]);
                let r = delta[i] - masked;
                total += p * r * r;
            }
        }
    }
    total
}

#[test]
fn criterion_01_eq6_argmin_certificate() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let epsilon = 1e-8;
    for case in 0..20 {
        let n_experts = [2, 3, 5][case % 3];
        let n_params = rng.random_range(10..=100);
        let inst = random_instance(&mut rng, n_experts, n_params);
        let merged = ota_merge(
            &inst.bundle,
            &inst.masks,
            &OtaOptions {
                epsilon,
                masked_denominator: false,
            },
        )
        .unwrap();

        // stationarity: |sum_t p_t (delta* - m_t delta_t)| < 1e-9 per coordinate
        let mut delta_star: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for name in &inst.tensor_names {
            let w0 = inst.bundle.base[name].to_f64_vec();
            let out = merged[name].to_f64_vec();
            let d: Vec<f64> = out.iter().zip(&w0).map(|(a, b)| a - b).collect();
            for (i, &di) in d.iter().enumerate() {
                let mut residual = 0.0;
                for expert in &inst.bundle.experts {
                    let v = expert.moments.as_ref().unwrap()[name].values_f64();
                    let p = v[i].sqrt() + epsilon;
                    let m = inst.masks[&expert.id].masks[name].get_f64(i);
                    let e = expert.weights[name].get_f64(i);
                    residual += p * (di - m * (e - inst.bundle.base[name].get_f64(i)));
                }
                assert!(
                    residual.abs() < 1e-9,
                    "case {case}, tensor {name}[{i}]: residual {residual}"
                );
            }
            delta_star.insert(name.clone(), d);
        }

        // minimality against random perturbations of magnitude 1e-3
        let f_star = objective(&inst, epsilon, &delta_star);
        for _ in 0..100 {
            let mut perturbed = delta_star.clone();
            let mut direction: Vec<f64> = Vec::new();
            for name in &inst.tensor_names {
                for _ in 0..perturbed[name].len() {
                    direction.push(rng.random_range(-1.0..1.0));
                }
            }
            let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut k = 0;
            for name in &inst.tensor_names {
                for value in perturbed.get_mut(name).unwrap() {
                    *value += 1e-3 * direction[k] / norm;
                    k += 1;
                }
            }
            let f_perturbed = objective(&inst, epsilon, &perturbed);
            assert!(
                f_star <= f_perturbed,
                "case {case}: objective {f_star} exceeds perturbed {f_perturbed}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("PASS criterion-01 argmin certificate on 20 random instances in {elapsed:?}");
}

#[test]
fn criterion_02_degenerate_merge_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    // T=1 full mask: bit-exact expert
    let inst = random_instance(&mut rng, 1, 50);
    let merged = ota_merge(&inst.bundle, &BTreeMap::new(), &OtaOptions::default()).unwrap();
    for name in &inst.tensor_names {
        assert_eq!(
            merged[name].to_le_bytes(),
            inst.bundle.experts[0].weights[name].to_le_bytes(),
            "single-expert full-mask merge must return the expert bit-exactly"
        );
    }

    // all-zero masks: w0 bit-exactly
    let inst = random_instance(&mut rng, 3, 60);
    let zero_masks: BTreeMap<String, SaliencyMaskSet> = inst
        .bundle
        .experts
        .iter()
        .map(|e| {
            let bits: BTreeMap<String, Vec<f64>> = e
                .weights
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
                .collect();
            (e.id.clone(), maskset_from_bits(&e.id, &bits))
        })
        .collect();
    let merged = ota_merge(&inst.bundle, &zero_masks, &OtaOptions::default()).unwrap();
    for name in &inst.tensor_names {
        assert_eq!(
            merged[name].to_le_bytes(),
            inst.bundle.base[name].to_le_bytes(),
            "all-zero masks must return the base bit-exactly"
        );
    }

    // equal preconditioners reduce to the mean of masked deltas
    let mut inst = random_instance(&mut rng, 3, 40);
    for expert in &mut inst.bundle.experts {
        let moments = expert.moments.as_mut().unwrap();
        for name in inst.tensor_names.clone() {
            let len = expert.weights[&name].numel();
            moments.insert(
                name.clone(),
                SecondMoment::Full(t64(&name, vec![0.42; len])),
            );
        }
    }
    let merged = ota_merge(&inst.bundle, &inst.masks, &OtaOptions::default()).unwrap();
    for name in &inst.tensor_names {
        let w0 = inst.bundle.base[name].to_f64_vec();
        for i in 0..w0.len() {
            let mut mean = 0.0;
            for expert in &inst.bundle.experts {
                let m = inst.masks[&expert.id].masks[name].get_f64(i);
                mean += m * (expert.weights[name].get_f64(i) - w0[i]);
            }
            mean /= inst.bundle.experts.len() as f64;
            let expect = w0[i] + mean;
            let got = merged[name].get_f64(i);
            assert!(
                (got - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "{name}[{i}]: {got} vs {expect}"
            );
        }
    }
    println!("PASS criterion-02 degenerate merge identities (bit-exact + 1e-12)");
}

#[test]
fn criterion_03_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let inst = random_instance(&mut rng, 3, 80);
    let opts = OtaOptions {
        epsilon: 0.0,
        masked_denominator: false,
    };
    let scale_bundle = |c: f64| -> CheckpointBundle {
        let mut b = inst.bundle.clone();
        for expert in &mut b.experts {
            let moments = expert.moments.as_mut().unwrap();
            let scaled: BTreeMap<String, SecondMoment> = moments
                .iter()
                .map(|(name, m)| {
                    let vals: Vec<f64> = m.values_f64().iter().map(|x| x * c).collect();
                    let shape = m.shape();
                    (
                        name.clone(),
                        SecondMoment::Full(
                            NamedTensor::from_f64(name.clone(), shape, vals).unwrap(),
                        ),
                    )
                })
                .collect();
            *moments = scaled;
        }
        b
    };
    let reference = ota_merge(&inst.bundle, &inst.masks, &opts).unwrap();
    let reference_masks: BTreeMap<String, Vec<f64>> = {
        let mut out = BTreeMap::new();
        for expert in &inst.bundle.experts {
            let delta = ota_core::graft::task_vector(&expert.weights, &inst.bundle.base).unwrap();
            let sal = ffg_saliency(&delta, expert.moments.as_ref().unwrap()).unwrap();
            let set = build_mask(&expert.id, SaliencyMethod::Ffg, &sal, 0.4, &[]).unwrap();
            for (name, m) in &set.masks {
                out.insert(format!("{}/{name}", expert.id), m.to_f64_vec());
            }
        }
        out
    };
    for c in [1e-6, 1.0, 1e6] {
        let scaled = scale_bundle(c);
        let merged = ota_merge(&scaled, &inst.masks, &opts).unwrap();
        for name in &inst.tensor_names {
            for (a, b) in reference[name].iter_f64().zip(merged[name].iter_f64()) {
                assert!(
                    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0),
                    "scale {c}: {a} vs {b}"
                );
            }
        }
        // FFG masks bit-identical under the same scaling
        for expert in &scaled.experts {
            let delta = ota_core::graft::task_vector(&expert.weights, &scaled.base).unwrap();
            let sal = ffg_saliency(&delta, expert.moments.as_ref().unwrap()).unwrap();
            let set = build_mask(&expert.id, SaliencyMethod::Ffg, &sal, 0.4, &[]).unwrap();
            for (name, m) in &set.masks {
                assert_eq!(
                    &reference_masks[&format!("{}/{name}", expert.id)],
                    &m.to_f64_vec(),
                    "mask changed under moment scale {c}"
                );
            }
        }
    }
    println!("PASS criterion-03 scale invariance at eps=0 for c in {{1e-6, 1, 1e6}}");
}

#[test]
fn criterion_04_adafactor_exactness_and_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // exactness on 100 random nonnegative rank-1 matrices
    for case in 0..100 {
        let m = rng.random_range(1..=24);
        let n = rng.random_range(1..=24);
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let data: Vec<f64> = u
            .iter()
            .flat_map(|&a| w.iter().map(move |&b| a * b))
            .collect();
        let v = NamedTensor::from_f64("v", vec![m, n], data.clone()).unwrap();
        let rec = compress(&v).unwrap().reconstruct_values();
        for (a, b) in data.iter().zip(&rec) {
            assert!(
                (a - b).abs() <= 1e-10 * a.abs().max(1e-300),
                "case {case}: {a} vs {b}"
            );
        }
    }
    // marginal preservation and nonnegativity on 100 random matrices
    for _ in 0..100 {
        let m = rng.random_range(1..=64);
        let n = rng.random_range(1..=64);
        let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..2.0)).collect();
        let v = NamedTensor::from_f64("v", vec![m, n], data).unwrap();
        let rec_vals = compress(&v).unwrap().reconstruct_values();
        assert!(rec_vals.iter().all(|&x| x >= 0.0));
        let rec = NamedTensor::from_f64("rec", vec![m, n], rec_vals).unwrap();
        for (a, b) in v.row_sums().unwrap().iter().zip(rec.row_sums().unwrap()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
        for (a, b) in v.col_sums().unwrap().iter().zip(rec.col_sums().unwrap()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
    }
    // hand case
    let v = NamedTensor::from_f64("v", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(
        compress(&v).unwrap().reconstruct_values(),
        vec![1.2, 1.8, 2.8, 4.2]
    );
    println!("PASS criterion-04 rank-1 exactness (1e-10), marginals (1e-9), hand case exact");
}

#[test]
fn criterion_05_stable_rank() {
    for n in [4usize, 16] {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        let v = NamedTensor::from_f64("i", vec![n, n], data).unwrap();
        assert_eq!(stable_rank(&v, 1e-12).unwrap(), n as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let u: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..2.0)).collect();
    let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..2.0)).collect();
    let data: Vec<f64> = u
        .iter()
        .flat_map(|&a| w.iter().map(move |&b| a * b))
        .collect();
    let rank1 = NamedTensor::from_f64("r1", vec![8, 5], data).unwrap();
    assert!((stable_rank(&rank1, 1e-12).unwrap() - 1.0).abs() <= 1e-6);

    let diag = NamedTensor::from_f64("d", vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((stable_rank(&diag, 1e-13).unwrap() - 1.25).abs() <= 1e-9);

    // toy-fixture moments: 1 <= stable rank <= min(m, n); how low they land
    // is reported, not asserted
    let cfg = TrainConfig::new(55, 2, 150);
    let result = trainer::pretrain_and_finetune(&cfg).unwrap();
    let mut observed = Vec::new();
    for expert in &result.experts {
        for (name, v) in &expert.exp_avg_sq {
            let shapes = cfg.model.param_shapes();
            let shape = &shapes[name];
            if shape.len() != 2 {
                continue;
            }
            let t = NamedTensor::from_f64(name.clone(), shape.clone(), v.clone()).unwrap();
            let r = stable_rank(&t, 1e-10).unwrap();
            let cap = shape[0].min(shape[1]) as f64;
            assert!(r >= 1.0 - 1e-9 && r <= cap + 1e-9, "{name}: {r}");
            observed.push(r);
        }
    }
    let max = observed.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "PASS criterion-05 stable rank: identity exact, rank-1 1e-6, diag 1e-9; toy moments in [1, min(m,n)] (max observed {max:.3})"
    );
}

#[test]
fn criterion_06_mask_count_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let sizes = [40_000usize, 35_000, 25_000];
    let total: usize = sizes.iter().sum();
    assert_eq!(total, 100_000);
    let random_saliency: BTreeMap<String, NamedTensor> = sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let name = format!("w{i}");
            (
                name.clone(),
                t64(
                    &name,
                    (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
                ),
            )
        })
        .collect();
    let equal_saliency: BTreeMap<String, NamedTensor> = sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let name = format!("w{i}");
            (name.clone(), t64(&name, vec![0.5; len]))
        })
        .collect();
    for saliency in [&random_saliency, &equal_saliency] {
        for rho in [0.0, 0.01, 0.05, 0.4, 1.0] {
            let set = build_mask("e", SaliencyMethod::Ffg, saliency, rho, &[]).unwrap();
            let expect = kept_count(rho, total);
            assert_eq!(expect, (rho * total as f64).round() as usize);
            assert_eq!(set.realized_kept_count, expect, "rho {rho}");
            assert_eq!(set.total_kept(), expect, "rho {rho} actual mask ones");
        }
    }
    println!(
        "PASS criterion-06 realized kept counts exact for rho in {{0, .01, .05, .4, 1}} incl. all-equal saliency"
    );
}

#[test]
fn criterion_07_container_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for case in 0..200 {
        let n_tensors = rng.random_range(1..=5);
        let mut tensors = BTreeMap::new();
        for i in 0..n_tensors {
            let name = format!("t{case}_{i}");
            let shape: Vec<usize> = match rng.random_range(0..4u8) {
                0 => vec![rng.random_range(0..20)],
                1 => vec![rng.random_range(1..8), rng.random_range(1..8)],
                2 => vec![],
                _ => vec![rng.random_range(1..6), 1, rng.random_range(1..4)],
            };
            let numel: usize = shape.iter().product();
            let t = if rng.random_range(0..2u8) == 0 {
                NamedTensor::from_f32(
                    name.clone(),
                    shape,
                    (0..numel).map(|_| rng.random_range(-1e5f32..1e5)).collect(),
                )
                .unwrap()
            } else {
                NamedTensor::from_f64(
                    name.clone(),
                    shape,
                    (0..numel)
                        .map(|_| rng.random_range(-1e10f64..1e10))
                        .collect(),
                )
                .unwrap()
            };
            tensors.insert(name, t);
        }
        let mut metadata = BTreeMap::new();
        if case % 3 == 0 {
            metadata.insert("case".to_string(), case.to_string());
        }
        let bytes = serialize_container(&tensors, &metadata).unwrap();
        let parsed = parse_container(&bytes).unwrap();
        assert_eq!(parsed.metadata, metadata);
        for (name, t) in &tensors {
            let r = &parsed.tensors[name];
            assert_eq!(r.dtype(), t.dtype());
            assert_eq!(r.shape(), t.shape());
            assert_eq!(r.to_le_bytes(), t.to_le_bytes(), "bit-exact payload");
        }
        // byte idempotence: write . read . write == write
        let again = serialize_container(&parsed.tensors, &parsed.metadata).unwrap();
        assert_eq!(bytes, again);
    }
    // hand-crafted minimal container per the bit-exact format
    let header = br#"{"w":{"dtype":"F64","shape":[1,2],"data_offsets":[0,16]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&0.5f64.to_le_bytes());
    bytes.extend_from_slice(&(-2.0f64).to_le_bytes());
    let parsed = parse_container(&bytes).unwrap();
    assert_eq!(parsed.tensors["w"].shape(), &[1, 2]);
    assert_eq!(parsed.tensors["w"].to_f64_vec(), vec![0.5, -2.0]);
    println!("PASS criterion-07 200 random containers round trip bit-exactly; writes idempotent");
}

#[test]
fn criterion_08_fisher_proxy_verification() {
    let start = Instant::now();
    let cfg = TrainConfig::new(88, 1, 400);
    let result = trainer::pretrain_and_finetune(&cfg).unwrap();
    let expert = &result.experts[0];
    let task = &result.tasks[0];

    let b1 = verify_fisher_proxy(&cfg.model, &expert.params, &task.train, 1, 0, 88).unwrap();
    assert!(b1.coords_above_floor > 0);
    assert_eq!(b1.median_ratio, 1.0, "batch-of-one ratio must be exactly 1");
    assert_eq!(b1.q25_ratio, 1.0);
    assert_eq!(b1.q75_ratio, 1.0);

    let mc = verify_fisher_proxy(&cfg.model, &expert.params, &task.train, 8, 2000, 88).unwrap();
    assert!(
        mc.median_ratio > 0.5 && mc.median_ratio < 2.0,
        "median ratio {} outside [0.5, 2.0]",
        mc.median_ratio
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "PASS criterion-08 fisher proxy: |B|=1 exact, |B|=8 median {:.3} in [0.5, 2.0] ({elapsed:?})",
        mc.median_ratio
    );
}

#[test]
fn criterion_09_grafting_quality_across_seeds() {
    let seeds = [1u64, 2, 3, 4, 5];
    let mut finetune_losses = Vec::new();
    let mut ffg20 = Vec::new();
    let mut mag20 = Vec::new();
    let mut ffg40 = Vec::new();
    for &seed in &seeds {
        // a wide, redundant student fine-tuned on little data with small
        // batches: most of each task vector is gradient noise, the regime
        // saliency grafting is built for
        let cfg = TrainConfig {
            batch_size: 8,
            model: ota_core::trainer::ModelConfig {
                hidden_dim: 64,
                ..Default::default()
            },
            data: DataConfig {
                train_samples: 96,
                specific_scale: 0.2,
                ..DataConfig::default()
            },
            ..TrainConfig::new(seed, 3, 400)
        };
        let result = trainer::pretrain_and_finetune(&cfg).unwrap();
        let base_tensors: BTreeMap<String, NamedTensor> = cfg
            .model
            .param_shapes()
            .iter()
            .map(|(name, shape)| {
                (
                    name.clone(),
                    NamedTensor::from_f64(name.clone(), shape.clone(), result.base[name].clone())
                        .unwrap(),
                )
            })
            .collect();
        for (expert, task) in result.experts.iter().zip(&result.tasks) {
            let expert_tensors: BTreeMap<String, NamedTensor> = cfg
                .model
                .param_shapes()
                .iter()
                .map(|(name, shape)| {
                    (
                        name.clone(),
                        NamedTensor::from_f64(
                            name.clone(),
                            shape.clone(),
                            expert.params[name].clone(),
                        )
                        .unwrap(),
                    )
                })
                .collect();
            let moments: BTreeMap<String, SecondMoment> = expert
                .exp_avg_sq
                .iter()
                .map(|(name, v)| {
                    let shape = cfg.model.param_shapes()[name].clone();
                    (
                        name.clone(),
                        SecondMoment::Full(
                            NamedTensor::from_f64(name.clone(), shape, v.clone()).unwrap(),
                        ),
                    )
                })
                .collect();
            let delta = ota_core::graft::task_vector(&expert_tensors, &base_tensors).unwrap();
            let ffg_sal = ffg_saliency(&delta, &moments).unwrap();
            let mag_sal = ota_core::graft::magnitude_saliency(&delta).unwrap();

            let eval_grafted = |saliency: &BTreeMap<String, NamedTensor>,
                                method: SaliencyMethod,
                                rho: f64|
             -> f64 {
                let set = build_mask(&expert.id, method, saliency, rho, &[]).unwrap();
                let grafted =
                    ota_core::graft::apply_graft(&base_tensors, &expert_tensors, &set).unwrap();
                let params = trainer::params_from_tensors(&grafted);
                task_loss(&cfg.model, &params, &task.eval)
            };
            finetune_losses.push(task_loss(&cfg.model, &expert.params, &task.eval));
            ffg20.push(eval_grafted(&ffg_sal, SaliencyMethod::Ffg, 0.2));
            mag20.push(eval_grafted(&mag_sal, SaliencyMethod::Magnitude, 0.2));
            ffg40.push(eval_grafted(&ffg_sal, SaliencyMethod::Ffg, 0.4));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_ft, m_ffg20, m_mag20, m_ffg40) = (
        mean(&finetune_losses),
        mean(&ffg20),
        mean(&mag20),
        mean(&ffg40),
    );
    assert!(
        m_ffg20 <= m_mag20,
        "FFG at 20% density ({m_ffg20:.4}) must not lose to magnitude ({m_mag20:.4})"
    );
    assert!(
        m_ffg40 <= 1.10 * m_ft,
        "FFG at 40% density ({m_ffg40:.4}) must stay within 10% of the fine-tune ({m_ft:.4})"
    );
    println!(
        "PASS criterion-09 grafting quality over 5 seeds: finetune {m_ft:.4}, ffg@0.2 {m_ffg20:.4} <= mag@0.2 {m_mag20:.4}, ffg@0.4 {m_ffg40:.4} <= 1.1*finetune"
    );
}

#[test]
fn criterion_10_analysis_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    // overlap fractions partition unity on random masks
    let sets: Vec<SaliencyMaskSet> = (0..3)
        .map(|e| {
            let bits: BTreeMap<String, Vec<f64>> = [("w".to_string(), {
                (0..257)
                    .map(|_| f64::from(rng.random_range(0..2u8)))
                    .collect()
            })]
            .into_iter()
            .collect();
            maskset_from_bits(&format!("e{e}"), &bits)
        })
        .collect();
    let refs: Vec<&SaliencyMaskSet> = sets.iter().collect();
    let overlap = analysis::mask_overlap(&refs).unwrap();
    let sum: f64 = overlap.tensors["w"]
        .counts
        .keys()
        .map(|&s| overlap.tensors["w"].fraction(s))
        .sum();
    assert!((sum - 1.0).abs() < 1e-12);

    // density report totals match realized mask counts exactly
    let saliency: BTreeMap<String, NamedTensor> = [
        ("model.layers.0.up.weight", 128usize),
        ("model.layers.1.down.weight", 96),
        ("model.head.weight", 40),
    ]
    .into_iter()
    .map(|(name, len)| {
        (
            name.to_string(),
            t64(name, (0..len).map(|_| rng.random_range(0.0..1.0)).collect()),
        )
    })
    .collect();
    let set = build_mask("e", SaliencyMethod::Magnitude, &saliency, 0.37, &[]).unwrap();
    let report = analysis::density_report(&set, &analysis::NamePattern::default());
    let total_kept: usize = report.rows.iter().map(|r| r.kept).sum();
    assert_eq!(total_kept, set.realized_kept_count);

    // 4096 -> 256 downsample with stride 16
    let big = NamedTensor::zeros("big", vec![4096, 4096], DType::F32);
    let grid = analysis::downsample_grid(&big, 256).unwrap();
    assert_eq!((grid.rows, grid.cols), (256, 256));
    assert_eq!(grid.stride, (16, 16));
    println!(
        "PASS criterion-10 overlap partition (1e-12), density totals exact, 4096->256 stride 16"
    );
}

#[test]
fn criterion_11_determinism() {
    // fixture regeneration is byte-identical
    let cfg = TrainConfig::new(7, 2, 120);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    trainer::generate_fixture(d1.path(), &cfg).unwrap();
    trainer::generate_fixture(d2.path(), &cfg).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(d1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 6);
    for name in &names {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between regenerations");
    }

    // merge reruns are byte-identical
    let recipe = ota_core::merge::MergeRecipe {
        method: ota_core::merge::MergeMethod::Ota,
        base: trainer::base_path(d1.path()),
        experts: (0..2)
            .map(|i| ota_core::merge::RecipeExpert {
                id: i.to_string(),
                weights_path: trainer::expert_path(d1.path(), &i.to_string()),
                moments_path: Some(trainer::moments_path(d1.path(), &i.to_string())),
                density: Some(0.4),
                saliency: ota_core::merge::RecipeSaliency::Ffg,
                weight: None,
            })
            .collect(),
        output: d1.path().join("merged.safetensors"),
        epsilon: 1e-8,
        lambda: None,
        ties_density: None,
        use_factored_moments: false,
        masked_denominator: false,
        exclude: vec![],
    };
    let run1 = ota_core::merge::run_recipe(&recipe).unwrap();
    let run2 = ota_core::merge::run_recipe(&recipe).unwrap();
    let bytes1 = serialize_container(&run1.merged, &BTreeMap::new()).unwrap();
    let bytes2 = serialize_container(&run2.merged, &BTreeMap::new()).unwrap();
    assert_eq!(bytes1, bytes2);
    println!("PASS criterion-11 fixture regeneration and merge reruns byte-identical");
}
