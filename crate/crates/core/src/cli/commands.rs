use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MetricConfig, RunConfig, Task};
use crate::denoise::GeometricDenoiser;
use crate::error::{invalid, Error, Result};
use crate::geometry::{soft_procrustes, RigidTransform};
use crate::io::{quantize_f32, read_scene, write_matrix_f32, write_scene, GT_JSON};
use crate::matmath::MatchingMatrix;
use crate::metrics::{
    feature_matching_recall, flow_metrics, inlier_ratio, interpolate_flow, nfmr, pose_auc, pose_error_deg,
    transform_rmse, FlowMetrics, MetricsReport,
};
use crate::otsolve::{theorem2_iterate, verify_theorem1, Theorem1Report, MAX_VERIFY_SIZE};
use crate::sampler::{extract_correspondences, reverse_sample, SamplerConfig};
use crate::synth::{make_deformable_pair, make_features, make_rigid_pair, ScenePair};

pub const REGISTER_CSV_HEADER: &str =
    "instance,seed,rows,cols,correspondences,ir,nfmr,rmse,pose_error_deg,epe,acc_s,acc_r,outlier";
pub const BENCH_CSV_HEADER: &str = "steps,rho,overlap,trials,mean_ir,mean_nfmr,rr,fmr";
const BENCH_TIMING_HEADER: &str = "steps,rho,overlap,trials,seconds_per_sample";

pub(super) const REGISTER_HELP: &str = "Outputs under the output root:\n  \
    register.csv: instance,seed,rows,cols,correspondences,ir,nfmr,rmse,pose_error_deg,epe,acc_s,acc_r,outlier\n    \
    (rmse/pose_error_deg empty for deformable pairs, flow columns empty for rigid ones)\n  \
    instances/<id>.json: correspondences, transform and per-instance metrics\n  \
    summary.json: {instances, failed, report: {ir, fmr, rr, nfmr, epe, acc_s, acc_r, outlier, pose_auc}}\n  \
    config.json: the resolved flat config";

pub(super) const BENCH_HELP: &str = "Outputs under the output root:\n  \
    bench.csv: steps,rho,overlap,trials,mean_ir,mean_nfmr,rr,fmr (rr empty for deformable runs)\n  \
    bench_timing.csv: steps,rho,overlap,trials,seconds_per_sample\n\
    Timing lives in its own file so bench.csv is reproducible byte for byte.";

/// How a command finished when it did not hit a hard error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some instances failed; their errors were logged.
    PartialFailure,
}

/// Per-instance metrics as stored in the instance record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMetrics {
    pub ir: f64,
    /// No correspondences were extracted; `ir` and `nfmr` are placeholders.
    pub empty: bool,
    pub nfmr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pose_error_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow: Option<FlowMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub instance: String,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    /// `(source, target, score)` sorted by descending score.
    pub correspondences: Vec<(usize, usize, f64)>,
    pub clipped: bool,
    pub transform: RigidTransform,
    pub degenerate: bool,
    pub metrics: InstanceMetrics,
}

/// Generates instance `k` of the configured synthetic set. Features are
/// rounded through f32 so in-memory runs see what a disk round trip gives.
pub fn synth_instance(cfg: &RunConfig, k: usize) -> Result<ScenePair> {
    let s = &cfg.synth;
    let seed = s.seed.wrapping_add(k as u64);
    let geometry = match cfg.task {
        Task::Rigid => make_rigid_pair(s.n, s.noise, s.overlap, seed)?,
        Task::Deformable => make_deformable_pair(s.n, s.amp, s.freq, seed)?,
    };
    let mut pair = make_features(&geometry, s.rho, s.feature_dim, seed)?;
    let fp = quantize_f32(pair.source.require_features()?);
    let fq = quantize_f32(pair.target.require_features()?);
    pair.source = pair.source.clone().with_features(fp)?;
    pair.target = pair.target.clone().with_features(fq)?;
    Ok(pair)
}

/// An instance record plus the sampler trace (empty unless kept).
pub type Processed = (InstanceRecord, Vec<MatchingMatrix>);

/// Sampling, extraction, alignment and scoring of one pair. Returns the
/// record and, when `sampler.keep_trace` is set, the sampler trace.
pub fn process_pair(cfg: &RunConfig, id: &str, pair: &ScenePair) -> Result<Processed> {
    let schedule = cfg.schedule.build()?;
    let denoiser = GeometricDenoiser::new(cfg.denoiser)?;
    let sampler = SamplerConfig {
        seed: cfg.sampler.seed.wrapping_add(pair.seed),
        ..cfg.sampler
    };
    let sample = reverse_sample(&pair.source, &pair.target, &schedule, &denoiser, &sampler, None)?;
    let corr = extract_correspondences(&sample.e_final, cfg.extract.mode());

    let (rows, cols) = (pair.source.len(), pair.target.len());
    let weights = if corr.is_empty() {
        sample.e_final.clone()
    } else {
        let mut w = DMatrix::zeros(rows, cols);
        for c in &corr.pairs {
            w[(c.source, c.target)] = c.score.max(0.0);
        }
        MatchingMatrix::weights(w)?
    };
    let fit = soft_procrustes(&weights, &pair.source, &pair.target)?;

    let m = &cfg.metrics;
    let ir = inlier_ratio(&corr, pair, m.inlier_tau)?;
    let nf = nfmr(&corr, pair, m.nfmr_k, m.nfmr_tau)?;
    let mut metrics = InstanceMetrics {
        ir: ir.value,
        empty: ir.empty,
        nfmr: nf.value,
        ..Default::default()
    };
    if let Some(gt) = &pair.gt_transform {
        metrics.rmse = Some(transform_rmse(&fit.transform, pair)?);
        metrics.pose_error_deg = Some(pose_error_deg(&fit.transform, gt));
    }
    if let Some(gt_flow) = &pair.gt_flow {
        let src = pair.source.points();
        let tgt = pair.target.points();
        let anchors: Vec<(Vector3<f64>, Vector3<f64>)> = corr
            .pairs
            .iter()
            .map(|c| (src[c.source], tgt[c.target] - src[c.source]))
            .collect();
        let pred: Vec<Vector3<f64>> = if anchors.is_empty() {
            vec![Vector3::zeros(); src.len()]
        } else {
            src.iter().map(|x| interpolate_flow(x, &anchors, m.nfmr_k)).collect()
        };
        metrics.flow = Some(flow_metrics(&pred, gt_flow, &m.flow)?);
    }

    let record = InstanceRecord {
        instance: id.to_string(),
        seed: pair.seed,
        rows,
        cols,
        steps: sampler.steps,
        correspondences: corr.pairs.iter().map(|c| (c.source, c.target, c.score)).collect(),
        clipped: corr.clipped,
        transform: fit.transform,
        degenerate: fit.degenerate,
        metrics,
    };
    Ok((record, sample.trace))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregate report over instance metrics. Registration recall and pose
/// AUC cover the rigid instances; flow metrics cover the deformable ones.
pub fn aggregate(records: &[InstanceMetrics], cfg: &MetricConfig) -> Result<MetricsReport> {
    if records.is_empty() {
        return Ok(MetricsReport::default());
    }
    let irs: Vec<f64> = records.iter().map(|r| r.ir).collect();
    let rmses: Vec<f64> = records.iter().filter_map(|r| r.rmse).collect();
    let pose: Vec<f64> = records.iter().filter_map(|r| r.pose_error_deg).collect();
    let flows: Vec<FlowMetrics> = records.iter().filter_map(|r| r.flow).collect();
    Ok(MetricsReport {
        ir: mean(irs.iter().copied()),
        fmr: Some(feature_matching_recall(&irs, cfg.fmr_tau)?),
        rr: (!rmses.is_empty())
            .then(|| rmses.iter().filter(|&&e| e < cfg.rmse_tau).count() as f64 / rmses.len() as f64),
        nfmr: mean(records.iter().map(|r| r.nfmr)),
        epe: mean(flows.iter().map(|f| f.epe)),
        acc_s: mean(flows.iter().map(|f| f.acc_s)),
        acc_r: mean(flows.iter().map(|f| f.acc_r)),
        outlier: mean(flows.iter().map(|f| f.outlier)),
        pose_auc: if pose.is_empty() {
            Vec::new()
        } else {
            pose_auc(&pose, &cfg.auc_thresholds)?
        },
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_row(r: &InstanceRecord) -> String {
    let m = &r.metrics;
    let f = m.flow;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.instance,
        r.seed,
        r.rows,
        r.cols,
        r.correspondences.len(),
        m.ir,
        m.nfmr,
        opt(m.rmse),
        opt(m.pose_error_deg),
        opt(f.map(|f| f.epe)),
        opt(f.map(|f| f.acc_s)),
        opt(f.map(|f| f.acc_r)),
        opt(f.map(|f| f.outlier)),
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let pairs: Vec<Result<ScenePair>> = (0..cfg.synth.trials)
        .into_par_iter()
        .map(|k| synth_instance(cfg, k))
        .collect();
    let mut manifest = String::new();
    for (k, pair) in pairs.into_iter().enumerate() {
        let pair = pair?;
        let id = format!("instance_{k:04}");
        write_scene(&out.join(&id), &pair)?;
        let line = format!(
            "{id}\t{}\t{}\t{}\t{}",
            pair.seed,
            pair.source.len(),
            pair.target.len(),
            pair.overlap_ratio
        );
        println!("{line}");
        manifest.push_str(&line);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.tsv"), manifest)?;
    log::info!("wrote {} instances to {}", cfg.synth.trials, out.display());
    Ok(Outcome::Success)
}

/// Expands directories without a ground-truth file into their
/// subdirectories, then sorts by path.
fn collect_instances(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for path in paths {
        if path.is_dir() && !path.join(GT_JSON).exists() {
            for entry in fs::read_dir(path)? {
                let entry = entry?.path();
                if entry.is_dir() {
                    found.push(entry);
                }
            }
        } else {
            found.push(path.clone());
        }
    }
    found.sort();
    found.dedup();
    Ok(found)
}

fn instance_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Serialize)]
struct RegisterSummary {
    instances: usize,
    failed: Vec<String>,
    report: MetricsReport,
}

pub fn cmd_register(cfg: &RunConfig, instances: &[PathBuf], out: &Path) -> Result<Outcome> {
    let paths = collect_instances(instances)?;
    let inst_dir = out.join("instances");
    fs::create_dir_all(&inst_dir)?;
    write_json(&out.join("config.json"), &cfg.to_flat()?)?;

    let results: Vec<(String, Result<Processed>)> = paths
        .par_iter()
        .map(|path| {
            let id = instance_id(path);
            let result = read_scene(path).and_then(|pair| process_pair(cfg, &id, &pair));
            (id, result)
        })
        .collect();

    let mut csv = String::from(REGISTER_CSV_HEADER);
    csv.push('\n');
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (id, result) in results {
        match result {
            Ok((record, trace)) => {
                write_json(&inst_dir.join(format!("{id}.json")), &record)?;
                if !trace.is_empty() {
                    let trace_dir = inst_dir.join(format!("{id}_trace"));
                    fs::create_dir_all(&trace_dir)?;
                    for (k, state) in trace.iter().enumerate() {
                        write_matrix_f32(&trace_dir.join(format!("step_{k:03}.bin")), state.entries())?;
                    }
                }
                csv.push_str(&csv_row(&record));
                csv.push('\n');
                records.push(record.metrics);
            }
            Err(e) => {
                log::error!("{id}: {e}");
                failed.push(id);
            }
        }
    }
    fs::write(out.join("register.csv"), csv)?;
    let summary = RegisterSummary {
        instances: records.len(),
        report: aggregate(&records, &cfg.metrics)?,
        failed,
    };
    write_json(&out.join("summary.json"), &summary)?;
    log::info!("registered {} of {} instances", summary.instances, paths.len());
    Ok(if summary.failed.is_empty() {
        Outcome::Success
    } else {
        Outcome::PartialFailure
    })
}

#[derive(Serialize)]
struct Theorem1Record {
    seed: u64,
    n: usize,
    #[serde(flatten)]
    report: Theorem1Report,
}

#[derive(Serialize)]
struct Theorem2Record {
    seed: u64,
    n: usize,
    /// The argmax-rounded final plan equals the ground-truth permutation.
    exact: bool,
    outer_steps: usize,
    converged: bool,
}

#[derive(Serialize)]
struct VerifySummary {
    theorem1_trials: usize,
    theorem1_holds: usize,
    theorem2_trials: usize,
    theorem2_exact: usize,
}

#[derive(Serialize)]
struct VerifyReport {
    theorem1: Vec<Theorem1Record>,
    theorem2: Vec<Theorem2Record>,
    summary: VerifySummary,
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let v = &cfg.verify;
    if let Some(n) = v.n {
        if n == 0 || n > MAX_VERIFY_SIZE {
            return Err(Error::Refused(format!(
                "verify.n = {n}: brute-force verification supports 1..={MAX_VERIFY_SIZE} points"
            )));
        }
    }
    let theorem1: Vec<Theorem1Record> = (0..v.trials)
        .into_par_iter()
        .map(|k| {
            let seed = v.seed.wrapping_add(k as u64);
            let n = v.n.unwrap_or(4 + k % 3);
            let pair = make_rigid_pair(n, 0.05, 1.0, seed)?;
            let target = if v.identical { &pair.source } else { &pair.target };
            let report = verify_theorem1(&pair.source, target, v.warp_samples, seed)?;
            Ok(Theorem1Record { seed, n, report })
        })
        .collect::<Result<_>>()?;
    let theorem2: Vec<Theorem2Record> = (0..v.theorem2_trials)
        .into_par_iter()
        .map(|k| {
            let seed = v.seed.wrapping_add(k as u64);
            let geometry = make_rigid_pair(v.theorem2_n, 0.0, 1.0, seed)?;
            let pair = make_features(&geometry, v.theorem2_rho, cfg.synth.feature_dim, seed)?;
            let result = theorem2_iterate(&pair.source, &pair.target, v.theorem2_outer, &v.iterated)?;
            let last = result
                .plans
                .last()
                .ok_or_else(|| invalid("iterated OT returned no plans"))?;
            let truth: Vec<usize> = pair.gt_pairs().iter().map(|&(_, j)| j).collect();
            Ok(Theorem2Record {
                seed,
                n: v.theorem2_n,
                exact: last.row_argmax() == truth,
                outer_steps: result.steps.len(),
                converged: result.converged,
            })
        })
        .collect::<Result<_>>()?;
    let summary = VerifySummary {
        theorem1_trials: theorem1.len(),
        theorem1_holds: theorem1.iter().filter(|r| r.report.holds).count(),
        theorem2_trials: theorem2.len(),
        theorem2_exact: theorem2.iter().filter(|r| r.exact).count(),
    };
    for r in theorem1.iter().filter(|r| !r.report.holds) {
        log::error!(
            "seed {} (n = {}): lhs {} exceeds rhs {}",
            r.seed,
            r.n,
            r.report.lhs,
            r.report.rhs_upper
        );
    }
    fs::create_dir_all(out)?;
    let all_hold = summary.theorem1_holds == summary.theorem1_trials;
    log::info!(
        "theorem 1: {}/{} hold; theorem 2: {}/{} exact",
        summary.theorem1_holds,
        summary.theorem1_trials,
        summary.theorem2_exact,
        summary.theorem2_trials
    );
    write_json(
        &out.join("verify.json"),
        &VerifyReport {
            theorem1,
            theorem2,
            summary,
        },
    )?;
    Ok(if all_hold {
        Outcome::Success
    } else {
        Outcome::PartialFailure
    })
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let b = &cfg.bench;
    let mut cells = Vec::new();
    for &rho in &b.rho {
        for &overlap in &b.overlap {
            let mut cell = cfg.clone();
            cell.synth.rho = rho;
            cell.synth.overlap = overlap;
            let pairs: Vec<ScenePair> = (0..cell.synth.trials)
                .into_par_iter()
                .map(|k| synth_instance(&cell, k))
                .collect::<Result<_>>()?;
            cells.push((cell, pairs));
        }
    }
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    let mut timing = format!("{BENCH_TIMING_HEADER}\n");
    for &steps in &b.steps {
        for (cell, pairs) in &cells {
            let mut run = cell.clone();
            run.sampler.steps = steps;
            let start = Instant::now();
            let records: Vec<InstanceMetrics> = pairs
                .par_iter()
                .map(|pair| process_pair(&run, "", pair).map(|(r, _)| r.metrics))
                .collect::<Result<_>>()?;
            let per_sample = start.elapsed().as_secs_f64() / pairs.len().max(1) as f64;
            let report = aggregate(&records, &run.metrics)?;
            let key = format!("{steps},{},{},{}", run.synth.rho, run.synth.overlap, pairs.len());
            writeln!(
                csv,
                "{key},{},{},{},{}",
                opt(report.ir),
                opt(report.nfmr),
                opt(report.rr),
                opt(report.fmr)
            )
            .expect("write to String");
            writeln!(timing, "{key},{per_sample}").expect("write to String");
            log::info!("bench {key}: ir {}", opt(report.ir));
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("bench.csv"), csv)?;
    fs::write(out.join("bench_timing.csv"), timing)?;
    Ok(Outcome::Success)
}

pub fn cmd_metrics(cfg: &RunConfig, run_dir: &Path, out: &Path) -> Result<Outcome> {
    let inst_dir = run_dir.join("instances");
    let mut paths: Vec<PathBuf> = fs::read_dir(&inst_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let record: InstanceRecord = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        records.push(record.metrics);
    }
    let report = aggregate(&records, &cfg.metrics)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(Outcome::Success)
}
