//! `ota` — merge fine-tuned experts using their optimizer trajectories.
//!
//! Subcommands cover the whole pipeline: `fixture` trains desk-scale experts
//! with real Adam states, `graft` sparsifies task vectors by saliency,
//! `merge` runs a recipe (curvature-weighted or baseline), `compress` turns
//! second moments into rank-1 factors, `analyze` produces mask/curvature
//! reports, and `verify` checks a fixture against the toolkit's invariants.
//! `OTA_THREADS` caps internal parallelism.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use manifest::ManifestBuilder;
use ota_core::analysis::{
    self, NamePattern, curvature_grid, mask_overlap, maxmin_ratio_grid, overlap_grid,
    rowcol_sparsity_histogram,
};
use ota_core::bundle::{MOMENT_SUFFIX, SecondMoment, group_moments};
use ota_core::container::{Container, read_container, serialize_container, write_container};
use ota_core::factor::{StableRankReport, compress, stable_rank_rows};
use ota_core::graft::{
    SaliencyMaskSet, SaliencyMethod, apply_graft, build_mask, ffg_saliency, magnitude_saliency,
    task_vector,
};
use ota_core::merge::{MergeRecipe, run_recipe};
use ota_core::tensor::NamedTensor;
use ota_core::trainer::{
    self, AdamParams, DataConfig, ModelConfig, TrainConfig, task_loss, verify_fisher_proxy,
};

#[derive(Parser)]
#[command(
    name = "ota",
    version,
    about = "Optimizer-trajectory-aware model merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraftMethod {
    Ffg,
    Magnitude,
}

#[derive(Subcommand)]
enum Command {
    /// Run a merge described by a JSON recipe
    Merge {
        #[arg(long)]
        recipe: PathBuf,
    },
    /// Sparsify one expert's task vector and revert the rest to the base
    Graft {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        /// Second-moment container; required for ffg saliency
        #[arg(long)]
        moments: Option<PathBuf>,
        /// Fraction of task-vector coordinates to keep, in [0, 1]
        #[arg(long)]
        density: f64,
        #[arg(long, value_enum)]
        method: GraftMethod,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "expert")]
        expert_id: String,
        /// Tensor-name substrings excluded from ranking (kept wholesale)
        #[arg(long)]
        exclude: Vec<String>,
    },
    /// Factor full 2-D second moments into row/column sums
    Compress {
        #[arg(long)]
        moments: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask and curvature analytics
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train a deterministic base + experts fixture with real Adam states
    Fixture {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 256)]
        train_samples: usize,
        #[arg(long, default_value_t = 256)]
        eval_samples: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
    },
    /// Check a fixture: bundle invariants, canonical containers, training
    /// improvement, and the Fisher-proxy ratio
    Verify {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 2000)]
        batches: usize,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Layer-wise density CSV from an exported mask container
    Density {
        #[arg(long)]
        masks: PathBuf,
        /// Sidecar JSON; defaults to `<masks>.json`
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Custom regex with (layer, role) capture groups
        #[arg(long)]
        pattern: Option<String>,
    },
    /// Row/column sparsity histograms of one 2-D mask
    Histogram {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expert-subset overlap fractions, optionally with a bitmask grid
    Overlap {
        #[arg(long, required = true)]
        masks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid_tensor: Option<String>,
        #[arg(long, default_value_t = 256)]
        target: usize,
        #[arg(long)]
        grid_out: Option<PathBuf>,
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Log-scale curvature heatmap grid of one second moment
    Curvature {
        #[arg(long)]
        moments: PathBuf,
        /// Weight tensor name (the `.exp_avg_sq` suffix is implied)
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 256)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Max-min curvature ratio grid across experts
    Maxmin {
        #[arg(long, required = true)]
        moments: Vec<PathBuf>,
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 256)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Stable ranks of full 2-D second moments
    StableRank {
        #[arg(long, required = true)]
        moments: Vec<PathBuf>,
        /// Expert ids matching --moments order; defaults to indices
        #[arg(long)]
        id: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

fn main() -> Result<()> {
    if let Ok(s) = std::env::var("OTA_THREADS") {
        let n: usize = s
            .parse()
            .context("OTA_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Merge { recipe } => cmd_merge(&recipe),
        Command::Graft {
            base,
            expert,
            moments,
            density,
            method,
            out,
            expert_id,
            exclude,
        } => cmd_graft(
            &base,
            &expert,
            moments.as_deref(),
            density,
            method,
            &out,
            &expert_id,
            &exclude,
        ),
        Command::Compress { moments, out } => cmd_compress(&moments, &out),
        Command::Analyze(cmd) => cmd_analyze(cmd),
        Command::Fixture {
            seed,
            tasks,
            steps,
            out,
            batch_size,
            train_samples,
            eval_samples,
            lr,
        } => cmd_fixture(
            seed,
            tasks,
            steps,
            &out,
            batch_size,
            train_samples,
            eval_samples,
            lr,
        ),
        Command::Verify {
            fixture,
            batch_size,
            batches,
        } => cmd_verify(&fixture, batch_size, batches),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent()
        && !parent.as_os_str().is_empty()
    {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_merge(recipe_path: &Path) -> Result<()> {
    let recipe = MergeRecipe::from_path(recipe_path)
        .with_context(|| format!("loading recipe {}", recipe_path.display()))?;
    let outcome = run_recipe(&recipe)?;

    let mut metadata = BTreeMap::new();
    metadata.insert(
        "merge_method".to_string(),
        recipe.method.as_str().to_string(),
    );
    write_container(&outcome.merged, &metadata, &recipe.output)?;

    let report_path = PathBuf::from(format!("{}.report.json", recipe.output.display()));
    write_text(
        &report_path,
        &serde_json::to_string_pretty(&outcome.report)?,
    )?;

    let mut mb = ManifestBuilder::new("merge", serde_json::to_value(&recipe)?);
    mb.input(recipe_path);
    mb.input(&recipe.base);
    for expert in &recipe.experts {
        mb.input(&expert.weights_path);
        if let Some(m) = &expert.moments_path {
            mb.input(m);
        }
    }
    mb.output(&recipe.output);
    mb.output(&report_path);

    for (id, maskset) in &outcome.masks {
        let report = analysis::density_report(maskset, &NamePattern::default());
        let path = PathBuf::from(format!("{}.density.{id}.csv", recipe.output.display()));
        write_text(&path, &report.to_csv())?;
        mb.output(&path);
        println!(
            "expert {id}: kept {} of {} ranked coordinates (requested density {})",
            maskset.realized_kept_count, report.global_total, maskset.requested_density
        );
    }
    let manifest_path = mb.write(&recipe.output)?;
    println!(
        "merged {} tensors with '{}' into {}",
        outcome.merged.len(),
        recipe.method.as_str(),
        recipe.output.display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_graft(
    base_path: &Path,
    expert_path: &Path,
    moments_path: Option<&Path>,
    density: f64,
    method: GraftMethod,
    out_dir: &Path,
    expert_id: &str,
    exclude: &[String],
) -> Result<()> {
    let base = read_container(base_path)?.tensors;
    let expert = read_container(expert_path)?.tensors;
    let delta = task_vector(&expert, &base)?;
    let (method, saliency) = match method {
        GraftMethod::Ffg => {
            let path = moments_path
                .ok_or_else(|| anyhow::anyhow!("--moments is required for ffg saliency"))?;
            let raw = read_container(path)?.tensors;
            let moments = group_moments(expert_id, &raw)?;
            (SaliencyMethod::Ffg, ffg_saliency(&delta, &moments)?)
        }
        GraftMethod::Magnitude => (SaliencyMethod::Magnitude, magnitude_saliency(&delta)?),
    };
    let maskset = build_mask(expert_id, method, &saliency, density, exclude)?;
    let grafted = apply_graft(&base, &expert, &maskset)?;

    std::fs::create_dir_all(out_dir)?;
    let grafted_path = out_dir.join("grafted.safetensors");
    let masks_path = out_dir.join("masks.safetensors");
    let sidecar_path = out_dir.join("masks.json");
    write_container(&grafted, &BTreeMap::new(), &grafted_path)?;
    write_container(
        &maskset.to_container_tensors(),
        &BTreeMap::new(),
        &masks_path,
    )?;
    write_text(
        &sidecar_path,
        &serde_json::to_string_pretty(&maskset.sidecar_json())?,
    )?;

    let mut mb = ManifestBuilder::new(
        "graft",
        json!({
            "base": base_path.display().to_string(),
            "expert": expert_path.display().to_string(),
            "moments": moments_path.map(|p| p.display().to_string()),
            "density": density,
            "method": method.as_str(),
            "expert_id": expert_id,
            "exclude": exclude,
        }),
    );
    mb.input(base_path);
    mb.input(expert_path);
    if let Some(p) = moments_path {
        mb.input(p);
    }
    for p in [&grafted_path, &masks_path, &sidecar_path] {
        mb.output(p);
    }
    mb.write(out_dir)?;
    println!(
        "grafted expert '{expert_id}' at density {density}: kept {} coordinates",
        maskset.realized_kept_count
    );
    Ok(())
}

fn cmd_compress(moments_path: &Path, out_path: &Path) -> Result<()> {
    let raw = read_container(moments_path)?.tensors;
    let grouped = group_moments("compress", &raw)?;

    let mut out_tensors: BTreeMap<String, NamedTensor> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut dense_bytes_total = 0usize;
    let mut stored_bytes_total = 0usize;
    for (weight, moment) in &grouped {
        let moment_name = format!("{weight}{MOMENT_SUFFIX}");
        match moment {
            SecondMoment::Full(t) if t.shape().len() == 2 => {
                let f = compress(t)?;
                let rec = f.reconstruct_values();
                let orig = t.to_f64_vec();
                let mut max_abs = 0.0f64;
                let mut max_rel = 0.0f64;
                for (a, b) in orig.iter().zip(&rec) {
                    let d = (a - b).abs();
                    max_abs = max_abs.max(d);
                    if *a != 0.0 {
                        max_rel = max_rel.max(d / a.abs());
                    }
                }
                let (m, n) = f.source_shape();
                let elem = t.dtype().size_bytes();
                let dense_bytes = m * n * elem;
                let stored_bytes = (m + n) * elem;
                dense_bytes_total += dense_bytes;
                stored_bytes_total += stored_bytes;
                rows.push(json!({
                    "tensor": moment_name,
                    "kind": "factored",
                    "dense_elements": m * n,
                    "stored_elements": m + n,
                    "dense_bytes": dense_bytes,
                    "stored_bytes": stored_bytes,
                    "max_abs_error": max_abs,
                    "max_rel_error": max_rel,
                }));
                out_tensors.insert(f.row().name().to_string(), f.row().clone());
                out_tensors.insert(f.col().name().to_string(), f.col().clone());
            }
            SecondMoment::Full(t) => {
                let bytes = t.numel() * t.dtype().size_bytes();
                dense_bytes_total += bytes;
                stored_bytes_total += bytes;
                rows.push(json!({
                    "tensor": moment_name,
                    "kind": "full",
                    "dense_elements": t.numel(),
                    "stored_elements": t.numel(),
                    "dense_bytes": bytes,
                    "stored_bytes": bytes,
                }));
                out_tensors.insert(moment_name.clone(), t.clone().with_name(moment_name));
            }
            SecondMoment::Factored(f) => {
                let elem = f.row().dtype().size_bytes();
                let (m, n) = f.source_shape();
                dense_bytes_total += m * n * elem;
                stored_bytes_total += (m + n) * elem;
                rows.push(json!({
                    "tensor": moment_name,
                    "kind": "factored",
                    "dense_elements": m * n,
                    "stored_elements": m + n,
                    "dense_bytes": m * n * elem,
                    "stored_bytes": (m + n) * elem,
                }));
                out_tensors.insert(f.row().name().to_string(), f.row().clone());
                out_tensors.insert(f.col().name().to_string(), f.col().clone());
            }
        }
    }
    write_container(&out_tensors, &BTreeMap::new(), out_path)?;
    let report = json!({
        "input": moments_path.display().to_string(),
        "output": out_path.display().to_string(),
        "dense_bytes": dense_bytes_total,
        "stored_bytes": stored_bytes_total,
        "tensors": rows,
    });
    let report_path = PathBuf::from(format!("{}.report.json", out_path.display()));
    write_text(&report_path, &serde_json::to_string_pretty(&report)?)?;

    let mut mb = ManifestBuilder::new(
        "compress",
        json!({"moments": moments_path.display().to_string()}),
    );
    mb.input(moments_path);
    mb.output(out_path);
    mb.output(&report_path);
    mb.write(out_path)?;
    println!(
        "compressed {} -> {} ({} bytes -> {} bytes)",
        moments_path.display(),
        out_path.display(),
        dense_bytes_total,
        stored_bytes_total
    );
    Ok(())
}

fn load_maskset(masks_path: &Path, sidecar: Option<&Path>) -> Result<SaliencyMaskSet> {
    let tensors = read_container(masks_path)?.tensors;
    let sidecar_path = sidecar
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.json", masks_path.display())));
    let sidecar_path = if sidecar_path.exists() {
        sidecar_path
    } else {
        masks_path.with_file_name("masks.json")
    };
    let text = std::fs::read_to_string(&sidecar_path)
        .with_context(|| format!("reading mask sidecar {}", sidecar_path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(SaliencyMaskSet::from_container_tensors(&tensors, &value)?)
}

fn moment_tensor(container: &Container, weight: &str) -> Result<NamedTensor> {
    let grouped = group_moments("analyze", &container.tensors)?;
    let moment = grouped
        .get(weight)
        .with_context(|| format!("no second moment for tensor '{weight}'"))?;
    let shape = moment.shape();
    Ok(NamedTensor::from_f64(
        format!("{weight}{MOMENT_SUFFIX}"),
        shape,
        moment.values_f64(),
    )?)
}

fn write_grid_outputs(grid: &analysis::Grid, out: &Path, ppm: Option<&Path>) -> Result<()> {
    write_text(out, &grid.to_csv())?;
    if let Some(ppm_path) = ppm {
        std::fs::write(ppm_path, grid.to_ppm())
            .with_context(|| format!("writing {}", ppm_path.display()))?;
    }
    Ok(())
}

fn cmd_analyze(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Density {
            masks,
            sidecar,
            out,
            pattern,
        } => {
            let maskset = load_maskset(&masks, sidecar.as_deref())?;
            let pattern = match pattern {
                Some(p) => NamePattern::from_regex(&p)?,
                None => NamePattern::default(),
            };
            let report = analysis::density_report(&maskset, &pattern);
            write_text(&out, &report.to_csv())?;
            println!(
                "expert {}: global density {} ({} / {})",
                report.expert_id,
                report.global_density(),
                report.global_kept,
                report.global_total
            );
        }
        AnalyzeCommand::Histogram {
            masks,
            tensor,
            bins,
            out,
        } => {
            let maskset = load_maskset(&masks, None)?;
            let mask = maskset
                .mask(&tensor)
                .with_context(|| format!("mask set has no tensor '{tensor}'"))?;
            let hist = rowcol_sparsity_histogram(mask, bins)?;
            let mut csv = format!(
                "# name={tensor} zero_row_fraction={} zero_col_fraction={}\n",
                hist.zero_row_fraction, hist.zero_col_fraction
            );
            csv.push_str(&hist.to_csv());
            write_text(&out, &csv)?;
            println!(
                "{tensor}: {:.1}% of rows and {:.1}% of columns fully pruned",
                100.0 * hist.zero_row_fraction,
                100.0 * hist.zero_col_fraction
            );
        }
        AnalyzeCommand::Overlap {
            masks,
            out,
            grid_tensor,
            target,
            grid_out,
            ppm,
        } => {
            let sets: Vec<SaliencyMaskSet> = masks
                .iter()
                .map(|p| load_maskset(p, None))
                .collect::<Result<_>>()?;
            let refs: Vec<&SaliencyMaskSet> = sets.iter().collect();
            let overlap = mask_overlap(&refs)?;
            write_text(&out, &serde_json::to_string_pretty(&overlap.to_json())?)?;
            if let Some(tensor) = grid_tensor {
                let grid = overlap_grid(&refs, &tensor, target)?;
                let grid_path = grid_out
                    .unwrap_or_else(|| PathBuf::from(format!("{}.grid.csv", out.display())));
                write_grid_outputs(&grid, &grid_path, ppm.as_deref())?;
            }
            println!(
                "overlap over {} experts and {} tensors -> {}",
                overlap.expert_ids.len(),
                overlap.tensors.len(),
                out.display()
            );
        }
        AnalyzeCommand::Curvature {
            moments,
            tensor,
            target,
            out,
            ppm,
        } => {
            let container = read_container(&moments)?;
            let v = moment_tensor(&container, &tensor)?;
            let grid = curvature_grid(&v, target)?;
            write_grid_outputs(&grid, &out, ppm.as_deref())?;
            println!(
                "curvature grid {}x{} (stride {},{}) -> {}",
                grid.rows,
                grid.cols,
                grid.stride.0,
                grid.stride.1,
                out.display()
            );
        }
        AnalyzeCommand::Maxmin {
            moments,
            tensor,
            target,
            out,
            ppm,
        } => {
            let tensors: Vec<NamedTensor> = moments
                .iter()
                .map(|p| moment_tensor(&read_container(p)?, &tensor))
                .collect::<Result<_>>()?;
            let refs: Vec<&NamedTensor> = tensors.iter().collect();
            let grid = maxmin_ratio_grid(&refs, target)?;
            write_grid_outputs(&grid, &out, ppm.as_deref())?;
            let max_ratio = grid
                .values
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "max-min ratio grid over {} experts, peak ratio {max_ratio:.3} -> {}",
                moments.len(),
                out.display()
            );
        }
        AnalyzeCommand::StableRank {
            moments,
            id,
            out,
            tol,
        } => {
            let mut report = StableRankReport::default();
            for (i, path) in moments.iter().enumerate() {
                let expert_id = id.get(i).cloned().unwrap_or_else(|| i.to_string());
                let raw = read_container(path)?.tensors;
                let grouped = group_moments(&expert_id, &raw)?;
                let sub = stable_rank_rows(&expert_id, &grouped, &NamePattern::default(), tol);
                report.rows.extend(sub.rows);
                report.skipped.extend(sub.skipped);
            }
            write_text(&out, &report.to_csv())?;
            for (expert, tensor, reason) in &report.skipped {
                eprintln!("skipped {expert}/{tensor}: {reason}");
            }
            println!(
                "stable ranks for {} tensors ({} skipped) -> {}",
                report.rows.len(),
                report.skipped.len(),
                out.display()
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fixture(
    seed: u64,
    tasks: usize,
    steps: usize,
    out: &Path,
    batch_size: usize,
    train_samples: usize,
    eval_samples: usize,
    lr: f64,
) -> Result<()> {
    let config = TrainConfig {
        seed,
        tasks,
        steps,
        batch_size,
        model: ModelConfig::default(),
        data: DataConfig {
            train_samples,
            eval_samples,
            ..DataConfig::default()
        },
        adam: AdamParams {
            lr,
            ..AdamParams::default()
        },
    };
    let result = trainer::generate_fixture(out, &config)?;
    let mut mb = ManifestBuilder::new(
        "fixture",
        json!({
            "seed": seed, "tasks": tasks, "steps": steps,
            "batch_size": batch_size, "train_samples": train_samples,
            "eval_samples": eval_samples, "lr": lr,
        }),
    );
    mb.output(&trainer::base_path(out));
    for expert in &result.experts {
        mb.output(&trainer::expert_path(out, &expert.id));
        mb.output(&trainer::moments_path(out, &expert.id));
    }
    mb.write(out)?;
    let final_base_loss = result.base_log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "fixture with {} experts ({} params each) written to {}",
        result.experts.len(),
        config.model.param_count(),
        out.display()
    );
    println!("final pretrain batch loss: {final_base_loss:.6}");
    Ok(())
}

struct CheckSink {
    failures: usize,
    results: Vec<serde_json::Value>,
}

impl CheckSink {
    fn new() -> Self {
        CheckSink {
            failures: 0,
            results: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("PASS {name}: {detail}");
        } else {
            println!("FAIL {name}: {detail}");
            self.failures += 1;
        }
        self.results.push(json!({
            "check": name,
            "ok": ok,
            "detail": detail,
        }));
    }
}

fn cmd_verify(fixture: &Path, batch_size: usize, batches: usize) -> Result<()> {
    let mut sink = CheckSink::new();

    let (config, bundle) = trainer::load_fixture(fixture)?;
    sink.check(
        "bundle-invariants",
        bundle.validate().is_ok(),
        format!(
            "{} experts x {} tensors, moments nonnegative",
            bundle.experts.len(),
            bundle.base.len()
        ),
    );

    // canonical container check: write . read . write == write
    let mut canonical = true;
    let mut checked = 0;
    for entry in std::fs::read_dir(fixture)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("safetensors") {
            continue;
        }
        let bytes = std::fs::read(&path)?;
        let parsed = ota_core::container::parse_container(&bytes)?;
        let rewritten = serialize_container(&parsed.tensors, &parsed.metadata)?;
        if rewritten != bytes {
            canonical = false;
            eprintln!("non-canonical container: {}", path.display());
        }
        checked += 1;
    }
    sink.check(
        "canonical-containers",
        canonical && checked > 0,
        format!("{checked} containers re-serialize byte-identically"),
    );

    let tasks = trainer::make_tasks(config.seed, config.tasks, &config.model, &config.data);
    let base_params = trainer::params_from_tensors(&bundle.base);
    let mut improvement = true;
    let mut moved = true;
    let mut details = Vec::new();
    for task in &tasks {
        let expert = bundle
            .expert(&task.id)
            .with_context(|| format!("fixture lacks expert {}", task.id))?;
        let expert_params = trainer::params_from_tensors(&expert.weights);
        let base_loss = task_loss(&config.model, &base_params, &task.eval);
        let expert_loss = task_loss(&config.model, &expert_params, &task.eval);
        if expert_loss >= base_loss {
            improvement = false;
        }
        let delta_sq: f64 = expert_params
            .iter()
            .map(|(name, v)| {
                v.iter()
                    .zip(&base_params[name])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        if delta_sq == 0.0 {
            moved = false;
        }
        details.push(format!(
            "task {}: base {base_loss:.4} -> expert {expert_loss:.4}",
            task.id
        ));
    }
    sink.check("expert-improvement", improvement, details.join("; "));
    sink.check(
        "expert-moved",
        moved,
        "every task vector has nonzero norm".to_string(),
    );

    let first_task = &tasks[0];
    let first_expert = trainer::params_from_tensors(
        &bundle
            .expert(&first_task.id)
            .context("fixture lacks expert 0")?
            .weights,
    );
    let b1 = verify_fisher_proxy(
        &config.model,
        &first_expert,
        &first_task.train,
        1,
        0,
        config.seed,
    )?;
    sink.check(
        "fisher-proxy-b1",
        b1.median_ratio == 1.0 && b1.q25_ratio == 1.0 && b1.q75_ratio == 1.0,
        format!(
            "batch of one is a sample: ratio exactly 1 on {} coordinates",
            b1.coords_above_floor
        ),
    );

    let mc = verify_fisher_proxy(
        &config.model,
        &first_expert,
        &first_task.train,
        batch_size,
        batches,
        config.seed,
    )?;
    let in_window = mc.median_ratio > 0.5 && mc.median_ratio < 2.0;
    sink.check(
        "fisher-proxy-mc",
        in_window && mc.near_minimum(),
        format!(
            "|B|={batch_size}, {batches} batches: median ratio {:.3} (q25 {:.3}, q75 {:.3}), mean-grad/sample-grad {:.3}",
            mc.median_ratio,
            mc.q25_ratio,
            mc.q75_ratio,
            mc.mean_grad_norm / mc.sample_grad_norm
        ),
    );

    let report_path = PathBuf::from(format!("{}.verify.json", fixture.display()));
    write_text(
        &report_path,
        &serde_json::to_string_pretty(&json!({
            "fixture": fixture.display().to_string(),
            "checks": sink.results,
        }))?,
    )?;
    println!("report: {}", report_path.display());
    if sink.failures > 0 {
        bail!("{} verification checks failed", sink.failures);
    }
    Ok(())
}
