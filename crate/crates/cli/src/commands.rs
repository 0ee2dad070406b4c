//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use scmii_core::eval::{average_precision_pooled, eval_report, EvalResult, Report};
use scmii_core::fusion::{transform_tensor, FusionConfig, FusionMethodName};
use scmii_core::model::{run_head, run_tail, run_unsplit, save_model, Detection};
use scmii_core::pointcloud::{save_cloud, transform_cloud, CloudFormat, PointCloud};
use scmii_core::runtime::{
    edge_client, serve, simulate_pipeline, ServeConfig, SimOutput,
};
use scmii_core::scene::TruthBox;

use crate::config::{
    load_cloud_dir, resolve, resolve_frames, resolve_network, truth_calibration,
    truth_in_reference_frame, write_json, DetectionRecord, PipelineConfig, Resolved,
};

/// `gen-scene`: write per-frame sensor clouds (CSV), truth JSON, the resolved
/// scene spec, the model document, and a ground-truth calibration file.
pub fn gen_scene_cmd(config: PipelineConfig, out: &Path) -> Result<()> {
    let scene = config
        .scene
        .clone()
        .context("gen-scene needs a `scene` config (or defaults)")?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("scene.json"), &scene)?;

    let (spec, weights) = resolve_network(&config)?;
    save_model(&out.join("model.json"), &spec, &weights)?;

    let (frames, truths) = resolve_frames(&config)?;
    for (j, (clouds, truth)) in frames.iter().zip(&truths).enumerate() {
        let fd = out.join("frames").join(format!("{j:03}"));
        std::fs::create_dir_all(&fd)?;
        truth.save(&fd.join("truth.json"))?;
        for (i, cloud) in clouds.iter().enumerate() {
            save_cloud(cloud, &fd.join(format!("sensor_{i:02}.csv")), CloudFormat::Csv)?;
        }
    }
    truth_calibration(&truths[0]).save(&out.join("truth_calibration.json"))?;
    println!(
        "wrote {} frames x {} sensors under {}",
        frames.len(),
        frames[0].len(),
        out.display()
    );
    Ok(())
}

/// `calibrate`: NDT scan matching on frame 0, written as calibration JSON.
pub fn calibrate_cmd(mut config: PipelineConfig, out: &Path) -> Result<()> {
    config.calibration.source = crate::config::CalibrationSource::Ndt;
    let (frames, truths) = resolve_frames(&config)?;
    let calib = crate::config::resolve_calibration(&config, &frames, &truths)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("calibration.json");
    calib.save(&path)?;
    println!("wrote {}", path.display());
    // Report the recovery error when truth is available.
    if let Some(truth) = truths.first() {
        let want = truth_calibration(truth);
        for (d, got) in &calib.transforms {
            if let Some(expect) = want.transform_for(*d) {
                let err = got.compose(&expect.invert());
                let t = err.translation();
                let tnorm = (t[0].powi(2) + t[1].powi(2) + t[2].powi(2)).sqrt();
                println!(
                    "device {d}: translation error {:.4} m, rotation error {:.4} deg",
                    tnorm,
                    err.rotation_angle().to_degrees()
                );
            }
        }
    }
    Ok(())
}

fn record_frames(sim: &SimOutput) -> Vec<DetectionRecord> {
    sim.frames
        .iter()
        .map(|f| DetectionRecord {
            frame_id: f.frame_id,
            complete: f.complete,
            detections: f.detections.clone(),
        })
        .collect()
}

/// Per-frame detections of one pipeline configuration, for AP rows.
struct ConfigRows {
    label: String,
    per_frame: Vec<Vec<Detection>>,
}

/// Builds the accuracy rows in table order: each single sensor, the raw
/// input-cloud fusion baseline, then max / concat1 / concat3 integration.
fn accuracy_rows(r: &Resolved) -> Result<Vec<ConfigRows>> {
    let n = r.devices.len();
    let mut rows: Vec<ConfigRows> = Vec::new();
    for d in 0..n {
        rows.push(ConfigRows {
            label: format!("sensor {d} (no integration)"),
            per_frame: Vec::new(),
        });
    }
    rows.push(ConfigRows {
        label: "input point clouds".into(),
        per_frame: Vec::new(),
    });
    for m in [
        FusionMethodName::Max,
        FusionMethodName::Concat1,
        FusionMethodName::Concat3,
    ] {
        rows.push(ConfigRows {
            label: m.label().into(),
            per_frame: Vec::new(),
        });
    }

    let fusion_variants: Vec<FusionConfig> = [
        FusionMethodName::Max,
        FusionMethodName::Concat1,
        FusionMethodName::Concat3,
    ]
    .into_iter()
    .map(|m| crate::config::resolve_fusion(&r.config, &r.spec, &r.devices, Some(m)))
    .collect::<Result<_>>()?;

    for clouds in &r.frames {
        // Head tensors once per device, aligned into the common frame.
        let mut aligned = Vec::with_capacity(n);
        for (i, cloud) in clouds.iter().enumerate() {
            let head = run_head(cloud, &r.spec, &r.weights)?;
            let t = r
                .calibration
                .transform_for(i as u16)
                .context("missing calibration transform")?;
            aligned.push(transform_tensor(&head, &t, &fusion_variants[0].target_grid)?);
        }
        for (d, tensor) in aligned.iter().enumerate() {
            rows[d]
                .per_frame
                .push(run_tail(tensor, &r.spec, &r.weights)?);
        }
        // Raw input-cloud fusion: merge calibrated clouds, run unsplit.
        let calibrated: Vec<PointCloud> = clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let t = r.calibration.transform_for(i as u16).unwrap();
                transform_cloud(c, &t)
            })
            .collect();
        let merged = PointCloud::merge(&calibrated.iter().collect::<Vec<_>>());
        rows[n].per_frame
            .push(run_unsplit(&merged, &r.spec, &r.weights)?);
        // Intermediate-output integration variants.
        for (v, fusion) in fusion_variants.iter().enumerate() {
            let fused = scmii_core::fusion::fuse(&aligned, fusion)?;
            rows[n + 1 + v]
                .per_frame
                .push(run_tail(&fused, &r.spec, &r.weights)?);
        }
    }
    Ok(rows)
}

fn rows_to_eval(rows: Vec<ConfigRows>, truths: &[Vec<TruthBox>]) -> Vec<EvalResult> {
    rows.into_iter()
        .map(|row| {
            let frames: Vec<(Vec<Detection>, Vec<TruthBox>)> = row
                .per_frame
                .into_iter()
                .zip(truths.iter().cloned())
                .collect();
            EvalResult {
                label: row.label,
                per_threshold: vec![
                    (0.3, average_precision_pooled(&frames, 0.3)),
                    (0.5, average_precision_pooled(&frames, 0.5)),
                ],
            }
        })
        .collect()
}

/// `run`: full pipeline over the simulated link; writes detections, timing,
/// and the accuracy comparison report.
pub fn run_cmd(
    config: PipelineConfig,
    out: &Path,
    fusion_override: Option<FusionMethodName>,
    timeout_override: Option<f64>,
) -> Result<()> {
    let mut r = resolve(config, fusion_override)?;
    if let Some(t) = timeout_override {
        r.config.timeout_ms = Some(t);
    }
    std::fs::create_dir_all(out)?;

    let sim = simulate_pipeline(
        &r.frames,
        &r.calibration,
        &r.spec,
        &r.weights,
        &r.fusion,
        &r.config.link,
        &r.config.cost,
        r.config.baseline,
        r.config.timeout_ms(),
    )?;
    write_json(&out.join("detections.json"), &record_frames(&sim))?;
    write_json(&out.join("timing.json"), &sim.timing)?;
    std::fs::write(out.join("timing.txt"), sim.timing.to_text())?;

    // Accuracy report needs truth (scene or cloud_dir layouts both carry it).
    let report = if r.truths.is_empty() {
        eval_report(Vec::new(), Some(sim.timing.clone()))
    } else {
        let ref_truths: Vec<Vec<TruthBox>> =
            r.truths.iter().map(|t| truth_in_reference_frame(t)).collect();
        let rows = accuracy_rows(&r)?;
        eval_report(rows_to_eval(rows, &ref_truths), Some(sim.timing.clone()))
    };
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.txt"), report.to_text())?;

    println!("{}", report.to_text());
    println!(
        "wrote detections.json, timing.json/txt, report.json/txt under {}",
        out.display()
    );
    Ok(())
}

/// `serve`: socket server role; writes the same detections schema as `run`.
pub fn serve_cmd(
    config: PipelineConfig,
    out: &Path,
    listen: &str,
    timeout_override: Option<f64>,
) -> Result<()> {
    let r = resolve(config, None)?;
    std::fs::create_dir_all(out)?;
    let cfg = ServeConfig {
        listen: listen.to_string(),
        devices: r.devices.clone(),
        timeout_ms: timeout_override.unwrap_or_else(|| r.config.timeout_ms()),
        send_results: false,
    };
    let addr_file = out.join("listen_addr.txt");
    let outcome = serve(
        &cfg,
        &r.calibration,
        &r.spec,
        &r.weights,
        &r.fusion,
        |addr| {
            let _ = std::fs::write(&addr_file, addr.to_string());
            log::info!("listening on {addr}");
        },
    )?;
    let records: Vec<DetectionRecord> = outcome
        .frames
        .iter()
        .map(|f| DetectionRecord {
            frame_id: f.frame_id,
            complete: f.complete,
            detections: f.detections.clone(),
        })
        .collect();
    write_json(&out.join("detections.json"), &records)?;
    // Wall-clock numbers are measured, not asserted anywhere.
    let walls: Vec<serde_json::Value> = outcome
        .frames
        .iter()
        .map(|f| {
            serde_json::json!({
                "frame_id": f.frame_id,
                "complete": f.complete,
                "measured_wall_ms": f.wall_ms,
            })
        })
        .collect();
    write_json(&out.join("server_timing.json"), &walls)?;
    println!(
        "served {} frames ({} duplicates, {} late); wrote {}",
        outcome.frames.len(),
        outcome.duplicates,
        outcome.late,
        out.join("detections.json").display()
    );
    Ok(())
}

/// `edge`: socket edge role for one device. A per-device model override,
/// when configured, replaces the shared weights for this device's head.
pub fn edge_cmd(config: PipelineConfig, connect: &str, device_id: u16) -> Result<()> {
    let (spec, weights) = match config.network.device_model_paths.get(&device_id) {
        Some(path) => scmii_core::model::load_model(path)?,
        None => resolve_network(&config)?,
    };
    let (frames, _) = resolve_frames(&config)?;
    let clouds: Vec<PointCloud> = frames
        .iter()
        .map(|f| {
            f.get(device_id as usize)
                .cloned()
                .with_context(|| format!("device {device_id} has no cloud in some frame"))
        })
        .collect::<Result<_>>()?;
    let report = edge_client(connect, device_id, &clouds, &spec, &weights, false)?;
    let total: usize = report.frames.iter().map(|(_, b)| b).sum();
    println!(
        "device {device_id}: sent {} frames, {total} bytes",
        report.frames.len()
    );
    Ok(())
}

/// `bench`: sweep link bandwidth x edge throughput; CSV + JSON for plotting.
pub fn bench_cmd(config: PipelineConfig, out: &Path, bench: &crate::config::BenchCfg) -> Result<()> {
    let r = resolve(config, None)?;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from(
        "bandwidth_mbps,edge_mac_per_s,mean_speedup,max_speedup,mean_total_ms,mean_baseline_ms,mean_edge_reduction_pct\n",
    );
    let mut rows = Vec::new();
    for &bw in &bench.bandwidths_mbps {
        for &edge in &bench.edge_mac_per_s {
            let link = scmii_core::runtime::LinkModel {
                bandwidth_mbps: bw,
                ..r.config.link
            };
            let cost = scmii_core::runtime::CostModel {
                edge_mac_per_s: edge,
                // Keep the configured server/edge ratio fixed across the sweep.
                server_mac_per_s: edge * (r.config.cost.server_mac_per_s / r.config.cost.edge_mac_per_s),
                ..r.config.cost
            };
            let sim = simulate_pipeline(
                &r.frames,
                &r.calibration,
                &r.spec,
                &r.weights,
                &r.fusion,
                &link,
                &cost,
                r.config.baseline,
                r.config.timeout_ms(),
            )?;
            let t = &sim.timing;
            csv.push_str(&format!(
                "{bw},{edge},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                t.mean_speedup,
                t.max_speedup,
                t.mean_total_ms,
                t.mean_baseline_ms,
                t.mean_edge_reduction_pct
            ));
            rows.push(serde_json::json!({
                "bandwidth_mbps": bw,
                "edge_mac_per_s": edge,
                "timing": t,
            }));
        }
    }
    std::fs::write(out.join("bench.csv"), &csv)?;
    write_json(&out.join("bench.json"), &rows)?;
    println!("wrote bench.csv and bench.json under {}", out.display());
    Ok(())
}

/// `eval`: score a detections file against a gen-scene directory.
pub fn eval_cmd(detections_path: &Path, scene_dir: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(detections_path)
        .with_context(|| detections_path.display().to_string())?;
    let records: Vec<DetectionRecord> = serde_json::from_str(&text)
        .with_context(|| detections_path.display().to_string())?;
    let (_, truths) = load_cloud_dir(scene_dir)?;
    if records.len() != truths.len() {
        bail!(
            "{} has {} frames, scene dir has {}",
            detections_path.display(),
            records.len(),
            truths.len()
        );
    }
    let frames: Vec<(Vec<Detection>, Vec<TruthBox>)> = records
        .iter()
        .zip(&truths)
        .map(|(r, t)| (r.detections.clone(), truth_in_reference_frame(t)))
        .collect();
    let row = EvalResult {
        label: detections_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "detections".into()),
        per_threshold: vec![
            (0.3, average_precision_pooled(&frames, 0.3)),
            (0.5, average_precision_pooled(&frames, 0.5)),
        ],
    };
    let report: Report = eval_report(vec![row], None);
    print!("{}", report.to_text());
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &report)?;
        std::fs::write(out.join("eval.txt"), report.to_text())?;
    }
    Ok(())
}

/// Applies shared flag overrides onto a loaded (or default) config.
pub fn apply_overrides(
    config: &mut PipelineConfig,
    seed: Option<u64>,
    devices: Option<usize>,
) -> Result<()> {
    if let Some(seed) = seed {
        match &mut config.scene {
            Some(s) => s.seed = seed,
            None => {
                if config.cloud_dir.is_none() {
                    *config = PipelineConfig::with_default_scene(seed);
                }
            }
        }
    }
    if config.scene.is_none() && config.cloud_dir.is_none() {
        *config = PipelineConfig::with_default_scene(seed.unwrap_or(0));
    }
    if let Some(n) = devices {
        if n == 0 {
            bail!("--devices must be >= 1");
        }
        match &mut config.scene {
            Some(s) => s.sensors = crate::config::sensors_for_devices(n),
            None => bail!("--devices requires scene mode (not cloud_dir)"),
        }
    }
    Ok(())
}

pub fn out_dir(config: &PipelineConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| config.out_dir())
}
