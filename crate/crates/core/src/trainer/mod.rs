//! Desk-scale trainer producing genuine Adam optimizer states.
//!
//! A small dense network is pretrained on a mixture of synthetic teacher
//! tasks and then fine-tuned per task with Adam, yielding a base checkpoint,
//! task experts, and their raw `exp_avg_sq` tensors. Everything is f64 and
//! seeded, so regenerating a fixture reproduces every byte. Parameter names
//! follow the `model.layers.<k>.<role>.weight` scheme the analysis module
//! parses.
//!
//! Input features carry log-spaced scales, which spreads gradient magnitudes
//! over orders of magnitude and gives the second moments the heterogeneous
//! structure curvature-weighted merging feeds on.

#![allow(clippy::needless_range_loop)]

mod adam;
pub mod fisher;

pub use adam::{AdamParams, AdamState, ParamMap, adam_step};
pub use fisher::{FisherProxyReport, verify_fisher_proxy};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bundle::{CheckpointBundle, MOMENT_SUFFIX, load_bundle};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::tensor::NamedTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 8,
            hidden_dim: 16,
            output_dim: 4,
            blocks: 2,
        }
    }
}

impl ModelConfig {
    /// Parameter names and shapes: per block an up projection (d -> h) with
    /// tanh and a down projection (h -> d), then a linear head (d -> o).
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        for k in 0..self.blocks {
            shapes.insert(
                format!("model.layers.{k}.up.weight"),
                vec![self.hidden_dim, self.input_dim],
            );
            shapes.insert(format!("model.layers.{k}.up.bias"), vec![self.hidden_dim]);
            shapes.insert(
                format!("model.layers.{k}.down.weight"),
                vec![self.input_dim, self.hidden_dim],
            );
            shapes.insert(format!("model.layers.{k}.down.bias"), vec![self.input_dim]);
        }
        shapes.insert(
            "model.head.weight".to_string(),
            vec![self.output_dim, self.input_dim],
        );
        shapes.insert("model.head.bias".to_string(), vec![self.output_dim]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise_std: f64,
    /// log10 span of the per-feature input scales, centered on 1.
    pub scale_decades: f64,
    /// Weight of the task-specific teacher relative to the teacher shared by
    /// every task. Small values mimic capability fine-tunes that agree on
    /// most behavior and differ in a narrow skill.
    pub specific_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 256,
            eval_samples: 256,
            noise_std: 0.05,
            scale_decades: 1.5,
            specific_scale: 0.35,
        }
    }
}

/// Flat row-major sample matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn input(&self, i: usize, d: usize) -> &[f64] {
        &self.x[i * d..(i + 1) * d]
    }

    pub fn target(&self, i: usize, o: usize) -> &[f64] {
        &self.y[i * o..(i + 1) * o]
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub id: String,
    pub train: Dataset,
    pub eval: Dataset,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-feature input scales, log-spaced across `scale_decades` decades.
fn input_scales(d: usize, decades: f64) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let t = if d > 1 {
                j as f64 / (d - 1) as f64 - 0.5
            } else {
                0.0
            };
            10f64.powf(t * decades)
        })
        .collect()
}

struct Teacher {
    hidden: usize,
    b: Vec<f64>,  // hidden x d
    c: Vec<f64>,  // hidden
    a: Vec<f64>,  // o x hidden
    d0: Vec<f64>, // o
}

impl Teacher {
    fn sample(rng: &mut ChaCha8Rng, d: usize, o: usize, hidden: usize) -> Self {
        let scale_b = 1.0 / (d as f64).sqrt();
        let scale_a = 1.0 / (hidden as f64).sqrt();
        Teacher {
            hidden,
            b: (0..hidden * d).map(|_| normal(rng) * scale_b).collect(),
            c: (0..hidden).map(|_| normal(rng) * 0.3).collect(),
            a: (0..o * hidden).map(|_| normal(rng) * scale_a).collect(),
            d0: (0..o).map(|_| normal(rng) * 0.3).collect(),
        }
    }

    fn eval(&self, x: &[f64], o: usize) -> Vec<f64> {
        let d = x.len();
        let mut h = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            let mut acc = self.c[i];
            for j in 0..d {
                acc += self.b[i * d + j] * x[j];
            }
            h[i] = acc.tanh();
        }
        let mut z = vec![0.0; o];
        for i in 0..o {
            let mut acc = self.d0[i];
            for j in 0..self.hidden {
                acc += self.a[i * self.hidden + j] * h[j];
            }
            z[i] = acc;
        }
        z
    }
}

fn sample_dataset(
    rng: &mut ChaCha8Rng,
    common: &Teacher,
    specific: &Teacher,
    scales: &[f64],
    n: usize,
    o: usize,
    data: &DataConfig,
) -> Dataset {
    let d = scales.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        let start = x.len();
        for s in scales {
            x.push(normal(rng) * s);
        }
        let mut target = common.eval(&x[start..], o);
        let extra = specific.eval(&x[start..], o);
        for (t, e) in target.iter_mut().zip(extra) {
            *t += data.specific_scale * e + data.noise_std * normal(rng);
        }
        y.extend_from_slice(&target);
    }
    Dataset { n, x, y }
}

/// Synthetic supervised tasks sharing one input space. Every task's target
/// is one shared teacher plus a down-weighted task-specific teacher, so
/// fine-tunes agree on most behavior and differ in a localized skill.
/// Deterministic per seed.
pub fn make_tasks(seed: u64, count: usize, model: &ModelConfig, data: &DataConfig) -> Vec<ToyTask> {
    let scales = input_scales(model.input_dim, data.scale_decades);
    let mut common_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0403);
    let common = Teacher::sample(
        &mut common_rng,
        model.input_dim,
        model.output_dim,
        model.hidden_dim,
    );
    let mut tasks = Vec::with_capacity(count);
    for idx in 0..count {
        // independent stream per task so task t is stable under changes to T
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x7A51C0DE + idx as u64));
        let specific = Teacher::sample(
            &mut rng,
            model.input_dim,
            model.output_dim,
            model.hidden_dim,
        );
        let train = sample_dataset(
            &mut rng,
            &common,
            &specific,
            &scales,
            data.train_samples,
            model.output_dim,
            data,
        );
        let eval = sample_dataset(
            &mut rng,
            &common,
            &specific,
            &scales,
            data.eval_samples,
            model.output_dim,
            data,
        );
        tasks.push(ToyTask {
            id: idx.to_string(),
            train,
            eval,
        });
    }
    tasks
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

pub fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamMap {
    config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let fan_in = *shape.last().expect("nonempty shape") as f64;
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let scale = 1.0 / fan_in.sqrt();
                (0..n).map(|_| normal(rng) * scale).collect()
            };
            (name, values)
        })
        .collect()
}

struct ForwardCache {
    /// Input to each block, then the head input.
    block_inputs: Vec<Vec<f64>>,
    /// tanh activations per block.
    activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward_cached(config: &ModelConfig, params: &ParamMap, x: &[f64]) -> ForwardCache {
    let (d, h, o) = (config.input_dim, config.hidden_dim, config.output_dim);
    let mut block_inputs = Vec::with_capacity(config.blocks + 1);
    let mut activations = Vec::with_capacity(config.blocks);
    let mut cur = x.to_vec();
    for k in 0..config.blocks {
        let w_up = &params[&format!("model.layers.{k}.up.weight")];
        let b_up = &params[&format!("model.layers.{k}.up.bias")];
        let w_down = &params[&format!("model.layers.{k}.down.weight")];
        let b_down = &params[&format!("model.layers.{k}.down.bias")];
        let mut a = vec![0.0; h];
        for i in 0..h {
            let mut acc = b_up[i];
            for j in 0..d {
                acc += w_up[i * d + j] * cur[j];
            }
            a[i] = acc.tanh();
        }
        let mut next = vec![0.0; d];
        for i in 0..d {
            let mut acc = b_down[i];
            for j in 0..h {
                acc += w_down[i * h + j] * a[j];
            }
            next[i] = acc;
        }
        block_inputs.push(cur);
        activations.push(a);
        cur = next;
    }
    let w_head = &params["model.head.weight"];
    let b_head = &params["model.head.bias"];
    let mut z = vec![0.0; o];
    for i in 0..o {
        let mut acc = b_head[i];
        for j in 0..d {
            acc += w_head[i * d + j] * cur[j];
        }
        z[i] = acc;
    }
    block_inputs.push(cur);
    ForwardCache {
        block_inputs,
        activations,
        output: z,
    }
}

pub fn forward(config: &ModelConfig, params: &ParamMap, x: &[f64]) -> Vec<f64> {
    forward_cached(config, params, x).output
}

/// Accumulate the gradient of 0.5*||f(x) - y||^2 for one sample into `grads`.
/// Returns the sample loss.
fn accumulate_sample_grad(
    config: &ModelConfig,
    params: &ParamMap,
    x: &[f64],
    y: &[f64],
    grads: &mut ParamMap,
) -> f64 {
    let (d, h, o) = (config.input_dim, config.hidden_dim, config.output_dim);
    let cache = forward_cached(config, params, x);
    let dz: Vec<f64> = cache.output.iter().zip(y).map(|(zi, yi)| zi - yi).collect();
    let loss = 0.5 * dz.iter().map(|e| e * e).sum::<f64>();

    let head_in = &cache.block_inputs[config.blocks];
    {
        let g_w = grads.get_mut("model.head.weight").expect("head weight");
        for i in 0..o {
            for j in 0..d {
                g_w[i * d + j] += dz[i] * head_in[j];
            }
        }
        let g_b = grads.get_mut("model.head.bias").expect("head bias");
        for i in 0..o {
            g_b[i] += dz[i];
        }
    }
    let w_head = &params["model.head.weight"];
    let mut dx = vec![0.0; d];
    for j in 0..d {
        let mut acc = 0.0;
        for i in 0..o {
            acc += w_head[i * d + j] * dz[i];
        }
        dx[j] = acc;
    }

    for k in (0..config.blocks).rev() {
        let a = &cache.activations[k];
        let block_in = &cache.block_inputs[k];
        let w_down = &params[&format!("model.layers.{k}.down.weight")];
        let w_up = &params[&format!("model.layers.{k}.up.weight")];

        {
            let g_w = grads
                .get_mut(&format!("model.layers.{k}.down.weight"))
                .expect("down weight");
            for i in 0..d {
                for j in 0..h {
                    g_w[i * h + j] += dx[i] * a[j];
                }
            }
            let g_b = grads
                .get_mut(&format!("model.layers.{k}.down.bias"))
                .expect("down bias");
            for i in 0..d {
                g_b[i] += dx[i];
            }
        }
        // through tanh
        let mut da = vec![0.0; h];
        for j in 0..h {
            let mut acc = 0.0;
            for i in 0..d {
                acc += w_down[i * h + j] * dx[i];
            }
            da[j] = acc * (1.0 - a[j] * a[j]);
        }
        {
            let g_w = grads
                .get_mut(&format!("model.layers.{k}.up.weight"))
                .expect("up weight");
            for i in 0..h {
                for j in 0..d {
                    g_w[i * d + j] += da[i] * block_in[j];
                }
            }
            let g_b = grads
                .get_mut(&format!("model.layers.{k}.up.bias"))
                .expect("up bias");
            for i in 0..h {
                g_b[i] += da[i];
            }
        }
        let mut dprev = vec![0.0; d];
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..h {
                acc += w_up[i * d + j] * da[i];
            }
            dprev[j] = acc;
        }
        dx = dprev;
    }
    loss
}

fn zero_grads(params: &ParamMap) -> ParamMap {
    params
        .iter()
        .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
        .collect()
}

/// Mean loss and mean gradient over the given sample indices.
pub fn batch_loss_and_grad(
    config: &ModelConfig,
    params: &ParamMap,
    data: &Dataset,
    indices: &[usize],
) -> (f64, ParamMap) {
    let (d, o) = (config.input_dim, config.output_dim);
    let mut grads = zero_grads(params);
    let mut loss = 0.0;
    for &i in indices {
        loss += accumulate_sample_grad(
            config,
            params,
            data.input(i, d),
            data.target(i, o),
            &mut grads,
        );
    }
    let scale = 1.0 / indices.len() as f64;
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    (loss * scale, grads)
}

/// Mean loss over a full dataset.
pub fn task_loss(config: &ModelConfig, params: &ParamMap, data: &Dataset) -> f64 {
    let (d, o) = (config.input_dim, config.output_dim);
    let mut loss = 0.0;
    for i in 0..data.n {
        let z = forward(config, params, data.input(i, d));
        let y = data.target(i, o);
        loss += 0.5 * z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    loss / data.n as f64
}

// ---------------------------------------------------------------------------
// Training and fixtures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub tasks: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub adam: AdamParams,
}

impl TrainConfig {
    pub fn new(seed: u64, tasks: usize, steps: usize) -> Self {
        TrainConfig {
            seed,
            tasks,
            steps,
            batch_size: 16,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            adam: AdamParams {
                lr: 5e-3,
                ..AdamParams::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct ExpertResult {
    pub id: String,
    pub params: ParamMap,
    pub exp_avg_sq: ParamMap,
    pub log: Vec<TrainLogRow>,
}

pub struct FixtureResult {
    pub config: TrainConfig,
    pub tasks: Vec<ToyTask>,
    pub base: ParamMap,
    pub base_log: Vec<TrainLogRow>,
    pub experts: Vec<ExpertResult>,
}

fn grad_norm(grads: &ParamMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

fn train_loop(
    config: &TrainConfig,
    params: &mut ParamMap,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
    phase: &str,
) -> Result<(AdamState, Vec<TrainLogRow>)> {
    let mut state = AdamState::new(params);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..data.n))
            .collect();
        let (loss, grads) = batch_loss_and_grad(&config.model, params, data, &indices);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "{phase} diverged at seed {} step {step}: loss {loss}",
                config.seed
            )));
        }
        // linear decay to zero parks the final iterate at the empirical
        // minimum instead of the constant-lr noise ball
        let hp = AdamParams {
            lr: config.adam.lr * (1.0 - step as f64 / config.steps as f64),
            ..config.adam
        };
        adam_step(params, &grads, &mut state, &hp)?;
        log.push(TrainLogRow {
            step,
            loss,
            grad_norm: grad_norm(&grads),
        });
    }
    Ok((state, log))
}

fn mixture_of(tasks: &[ToyTask]) -> Dataset {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut n = 0;
    for task in tasks {
        x.extend_from_slice(&task.train.x);
        y.extend_from_slice(&task.train.y);
        n += task.train.n;
    }
    Dataset { n, x, y }
}

/// Pretrain a base model on the task mixture, then fine-tune one expert per
/// task from the base with a fresh optimizer, keeping each fine-tune's raw
/// second moments.
pub fn pretrain_and_finetune(config: &TrainConfig) -> Result<FixtureResult> {
    if config.steps == 0 {
        return Err(Error::Training("steps must be >= 1".into()));
    }
    if config.tasks == 0 {
        return Err(Error::Training("need at least one task".into()));
    }
    let tasks = make_tasks(config.seed, config.tasks, &config.model, &config.data);
    let mixture = mixture_of(&tasks);

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1217);
    let mut base = init_params(&config.model, &mut init_rng);
    let mut pretrain_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xBA5E);
    let (_, base_log) = train_loop(config, &mut base, &mixture, &mut pretrain_rng, "pretrain")?;

    let mut experts = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut params = base.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (0xF17E + task.id.parse::<u64>().unwrap_or(0)));
        let (state, log) = train_loop(config, &mut params, &task.train, &mut rng, "finetune")?;
        experts.push(ExpertResult {
            id: task.id.clone(),
            params,
            exp_avg_sq: state.exp_avg_sq,
            log,
        });
    }
    Ok(FixtureResult {
        config: config.clone(),
        tasks,
        base,
        base_log,
        experts,
    })
}

fn params_to_tensors(
    params: &ParamMap,
    shapes: &BTreeMap<String, Vec<usize>>,
) -> Result<BTreeMap<String, NamedTensor>> {
    params
        .iter()
        .map(|(name, values)| {
            let shape = shapes
                .get(name)
                .cloned()
                .unwrap_or_else(|| vec![values.len()]);
            Ok((
                name.clone(),
                NamedTensor::from_f64(name.clone(), shape, values.clone())?,
            ))
        })
        .collect()
}

/// Convert container tensors back into a flat parameter map.
pub fn params_from_tensors(tensors: &BTreeMap<String, NamedTensor>) -> ParamMap {
    tensors
        .iter()
        .map(|(name, t)| (name.clone(), t.to_f64_vec()))
        .collect()
}

fn log_to_csv(log: &[TrainLogRow]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.grad_norm));
    }
    out
}

fn fixture_metadata(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("tasks".into(), config.tasks.to_string());
    meta.insert("steps".into(), config.steps.to_string());
    meta.insert("batch_size".into(), config.batch_size.to_string());
    meta.insert("input_dim".into(), config.model.input_dim.to_string());
    meta.insert("hidden_dim".into(), config.model.hidden_dim.to_string());
    meta.insert("output_dim".into(), config.model.output_dim.to_string());
    meta.insert("blocks".into(), config.model.blocks.to_string());
    meta.insert(
        "train_samples".into(),
        config.data.train_samples.to_string(),
    );
    meta.insert("eval_samples".into(), config.data.eval_samples.to_string());
    meta.insert("noise_std".into(), config.data.noise_std.to_string());
    meta.insert(
        "scale_decades".into(),
        config.data.scale_decades.to_string(),
    );
    meta.insert(
        "specific_scale".into(),
        config.data.specific_scale.to_string(),
    );
    meta.insert("lr".into(), config.adam.lr.to_string());
    meta.insert("beta1".into(), config.adam.beta1.to_string());
    meta.insert("beta2".into(), config.adam.beta2.to_string());
    meta.insert("adam_eps".into(), config.adam.eps.to_string());
    meta
}

fn meta_get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::Format(format!("fixture metadata missing '{key}'")))?
        .parse::<T>()
        .map_err(|_| Error::Format(format!("fixture metadata '{key}' is malformed")))
}

impl TrainConfig {
    /// Rebuild the exact configuration a fixture was generated with; tasks
    /// and datasets regenerate from it deterministically.
    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        Ok(TrainConfig {
            seed: meta_get(meta, "seed")?,
            tasks: meta_get(meta, "tasks")?,
            steps: meta_get(meta, "steps")?,
            batch_size: meta_get(meta, "batch_size")?,
            model: ModelConfig {
                input_dim: meta_get(meta, "input_dim")?,
                hidden_dim: meta_get(meta, "hidden_dim")?,
                output_dim: meta_get(meta, "output_dim")?,
                blocks: meta_get(meta, "blocks")?,
            },
            data: DataConfig {
                train_samples: meta_get(meta, "train_samples")?,
                eval_samples: meta_get(meta, "eval_samples")?,
                noise_std: meta_get(meta, "noise_std")?,
                scale_decades: meta_get(meta, "scale_decades")?,
                specific_scale: meta_get(meta, "specific_scale")?,
            },
            adam: AdamParams {
                lr: meta_get(meta, "lr")?,
                beta1: meta_get(meta, "beta1")?,
                beta2: meta_get(meta, "beta2")?,
                eps: meta_get(meta, "adam_eps")?,
            },
        })
    }
}

pub fn base_path(dir: &Path) -> PathBuf {
    dir.join("base.safetensors")
}

pub fn expert_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("expert_{id}.safetensors"))
}

pub fn moments_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("expert_{id}.moments.safetensors"))
}

/// Write a fixture directory: base, experts, moments, and per-phase train
/// logs. Containers embed the full train configuration as metadata so the
/// datasets can be regenerated without storing them.
pub fn write_fixture(dir: &Path, result: &FixtureResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shapes = result.config.model.param_shapes();
    let meta = fixture_metadata(&result.config);

    write_container(
        &params_to_tensors(&result.base, &shapes)?,
        &meta,
        base_path(dir),
    )?;
    std::fs::write(dir.join("train_log_base.csv"), log_to_csv(&result.base_log))?;

    for expert in &result.experts {
        write_container(
            &params_to_tensors(&expert.params, &shapes)?,
            &meta,
            expert_path(dir, &expert.id),
        )?;
        let moment_tensors: BTreeMap<String, NamedTensor> = expert
            .exp_avg_sq
            .iter()
            .map(|(name, values)| {
                let moment_name = format!("{name}{MOMENT_SUFFIX}");
                let shape = shapes
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| vec![values.len()]);
                Ok((
                    moment_name.clone(),
                    NamedTensor::from_f64(moment_name, shape, values.clone())?,
                ))
            })
            .collect::<Result<_>>()?;
        write_container(&moment_tensors, &meta, moments_path(dir, &expert.id))?;
        std::fs::write(
            dir.join(format!("train_log_{}.csv", expert.id)),
            log_to_csv(&expert.log),
        )?;
    }
    Ok(())
}

/// Train and write in one call.
pub fn generate_fixture(dir: &Path, config: &TrainConfig) -> Result<FixtureResult> {
    let result = pretrain_and_finetune(config)?;
    write_fixture(dir, &result)?;
    Ok(result)
}

/// Load a fixture directory back into a bundle plus its train config.
pub fn load_fixture(dir: &Path) -> Result<(TrainConfig, CheckpointBundle)> {
    let base = read_container(base_path(dir))?;
    let config = TrainConfig::from_metadata(&base.metadata)?;
    let expert_paths: Vec<(String, PathBuf)> = (0..config.tasks)
        .map(|i| (i.to_string(), expert_path(dir, &i.to_string())))
        .collect();
    let moment_paths: Vec<Option<PathBuf>> = (0..config.tasks)
        .map(|i| Some(moments_path(dir, &i.to_string())))
        .collect();
    let bundle = load_bundle(base_path(dir), &expert_paths, &moment_paths)?;
    Ok((config, bundle))
}
