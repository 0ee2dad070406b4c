//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Tolerances are pinned in the asserts.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scmii_core::eval::{average_precision, average_precision_pooled, iou3d, Box3};
use scmii_core::fusion::{
    averaging_fusion_kernel, fuse_concat_conv, fuse_max, transform_tensor, FusionConfig,
    FusionMethod,
};
use scmii_core::geometry::{CalibrationFile, Pose6DoF, RigidTransform};
use scmii_core::model::{
    init_weights, run_head, run_tail, run_unsplit, Detection, InitMode, NetworkSpec,
};
use scmii_core::ndt::{build_ndt_map, calibrate, ndt_score, ndt_score_gradient, AlignOptions, NdtMap};
use scmii_core::pointcloud::PointCloud;
use scmii_core::protocol::{
    decode_frame, encode_feature, encode_message, FeatureMessage, Message,
};
use scmii_core::runtime::{
    simulate_pipeline, BaselineMode, CostModel, FrameBarrier, LinkModel,
};
use scmii_core::scene::{gen_scene, SceneSpec, TruthBox};
use scmii_core::sparse::{ConvKernel, GridSpec, SparseFeatureTensor};

// ---------------------------------------------------------------------------
// shared helpers

fn detection_grid() -> GridSpec {
    GridSpec::new([-20.0, -20.0, -2.35], [0.4, 0.4, 0.4], [100, 100, 10])
}

fn network() -> NetworkSpec {
    NetworkSpec::default_backbone(detection_grid())
}

/// Two-sensor scene with a known relative transform between the sensors.
struct CalibScene {
    reference: PointCloud,
    other: PointCloud,
    truth_rel: RigidTransform,
}

fn calib_scene(seed: u64, rel: Pose6DoF) -> CalibScene {
    let base = Pose6DoF::new(-1.5, 0.0, 2.5, 0.0, 0.0, 0.25);
    let e0 = RigidTransform::from_pose(&base);
    let e1 = e0.compose(&RigidTransform::from_pose(&rel));
    // Perimeter walls, as an instrumented intersection would have: long
    // static planes both sensors see, which pin xy/yaw for scan matching.
    let wall = |center: [f64; 3], size: [f64; 3]| TruthBox {
        center,
        size,
        class_id: 1,
    };
    let spec = SceneSpec {
        seed,
        sensors: vec![base, e1.to_pose()],
        object_count: [8, 12],
        fixed_boxes: vec![
            wall([14.0, 0.0, 1.5], [0.5, 20.0, 3.0]),
            wall([-14.0, 0.0, 1.5], [0.5, 20.0, 3.0]),
            wall([0.0, 14.0, 1.5], [20.0, 0.5, 3.0]),
            wall([0.0, -14.0, 1.5], [20.0, 0.5, 3.0]),
        ],
        ..SceneSpec::default()
    };
    let frame = gen_scene(&spec).unwrap();
    let truth_rel = frame.truth.extrinsics[0]
        .invert()
        .compose(&frame.truth.extrinsics[1]);
    CalibScene {
        reference: frame.clouds[0].clone(),
        other: frame.clouds[1].clone(),
        truth_rel,
    }
}

fn random_rel(rng: &mut ChaCha8Rng) -> Pose6DoF {
    // Translation <= 3 m (mostly planar), yaw <= 20 degrees.
    Pose6DoF::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-0.2..0.2),
        0.0,
        0.0,
        rng.random_range(-0.35..0.35),
    )
}

fn perturb_guess(rng: &mut ChaCha8Rng, truth: &Pose6DoF) -> Pose6DoF {
    // Within 0.5 m translation and 5 degrees rotation of the truth.
    Pose6DoF::new(
        truth.tx + rng.random_range(-0.3..0.3),
        truth.ty + rng.random_range(-0.3..0.3),
        truth.tz + rng.random_range(-0.15..0.15),
        truth.roll + rng.random_range(-0.003..0.003),
        truth.pitch + rng.random_range(-0.003..0.003),
        truth.yaw + rng.random_range(-0.08..0.08),
    )
}

fn transform_error(got: &RigidTransform, want: &RigidTransform) -> (f64, f64) {
    let err = got.compose(&want.invert());
    let t = err.translation();
    let tnorm = (t[0].powi(2) + t[1].powi(2) + t[2].powi(2)).sqrt();
    (tnorm, err.rotation_angle().to_degrees())
}

fn random_tensor(
    rng: &mut ChaCha8Rng,
    grid: GridSpec,
    channels: usize,
    fill: f64,
) -> SparseFeatureTensor {
    let mut t = SparseFeatureTensor::new(grid, channels).unwrap();
    for z in 0..grid.dims[2] as i32 {
        for y in 0..grid.dims[1] as i32 {
            for x in 0..grid.dims[0] as i32 {
                if rng.random_bool(fill) {
                    let feat = (0..channels).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                    t.insert([x, y, z], feat).unwrap();
                }
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------

/// Criterion 1: NDT recovers ground-truth relative transforms within
/// 0.05 m / 0.5 deg in at least 19 of 20 seeded scenes, each under 5 s.
#[test]
fn acceptance_01_ndt_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut hits = 0;
    let mut worst = (0.0f64, 0.0f64);
    for scene_idx in 0..20u64 {
        let scene = calib_scene(1000 + scene_idx, random_rel(&mut rng));
        let tp = scene.truth_rel.to_pose();
        let guess = perturb_guess(&mut rng, &tp);
        let start = Instant::now();
        let result = calibrate(
            &scene.reference,
            std::slice::from_ref(&scene.other),
            &[guess],
            2.0,
            5,
            &AlignOptions::default(),
        );
        let elapsed = start.elapsed().as_secs_f64();
        assert!(elapsed < 5.0, "scene {scene_idx}: alignment took {elapsed:.2} s");
        let Ok(out) = result else {
            println!("scene {scene_idx}: calibrate error: {}", result.unwrap_err());
            continue;
        };
        let (terr, rerr) = transform_error(&out[0], &scene.truth_rel);
        worst = (worst.0.max(terr), worst.1.max(rerr));
        if terr <= 0.05 && rerr <= 0.5 {
            hits += 1;
        } else {
            println!("scene {scene_idx}: terr {terr:.4} m, rerr {rerr:.4} deg");
        }
    }
    assert!(hits >= 19, "only {hits}/20 scenes within tolerance");
    println!(
        "ACCEPTANCE 1 PASS - NDT recovery: {hits}/20 within 0.05 m / 0.5 deg \
         (worst {:.4} m / {:.4} deg), all alignments < 5 s",
        worst.0, worst.1
    );
}

/// Boundary-safe gradient probe (see the ndt module tests for rationale:
/// the score is piecewise-smooth in cell assignment, so the FD probe must
/// stay inside one smooth piece).
fn boundary_safe(map: &NdtMap, scan: &PointCloud, pose: &Pose6DoF, margin: f64) -> PointCloud {
    let t = RigidTransform::from_pose(pose);
    PointCloud::from_points(
        scan.points()
            .iter()
            .filter(|p| {
                let q = t.apply_point(**p);
                (0..3).all(|a| {
                    let u = (q[a] - map.origin[a]) / map.cell_size;
                    let frac = u - u.floor();
                    frac * map.cell_size > margin && (1.0 - frac) * map.cell_size > margin
                })
            })
            .copied()
            .collect(),
    )
    .unwrap()
}

/// Criterion 2: analytic gradient vs central finite differences (h = 1e-5)
/// within 1e-4 relative norm at 10 near-truth poses per scene.
#[test]
fn acceptance_02_ndt_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut worst = 0.0f64;
    for scene_idx in 0..20u64 {
        let scene = calib_scene(1000 + scene_idx, random_rel(&mut rng));
        let map = build_ndt_map(&scene.reference, 2.0, 5).unwrap();
        let tp = scene.truth_rel.to_pose();
        for _ in 0..10 {
            let pose = Pose6DoF::new(
                tp.tx + rng.random_range(-0.02..0.02),
                tp.ty + rng.random_range(-0.02..0.02),
                tp.tz + rng.random_range(-0.02..0.02),
                tp.roll + rng.random_range(-0.004..0.004),
                tp.pitch + rng.random_range(-0.004..0.004),
                tp.yaw + rng.random_range(-0.004..0.004),
            );
            let scan = boundary_safe(&map, &scene.other, &pose, 5e-3);
            let (_, g) = ndt_score_gradient(&map, &scan, &pose);
            let h = 1e-5;
            let mut fd = [0.0f64; 6];
            for k in 0..6 {
                let mut vp = pose.to_vector();
                let mut vm = pose.to_vector();
                vp[k] += h;
                vm[k] -= h;
                fd[k] = (ndt_score(&map, &scan, &Pose6DoF::from_vector(vp))
                    - ndt_score(&map, &scan, &Pose6DoF::from_vector(vm)))
                    / (2.0 * h);
            }
            let num: f64 = (0..6).map(|k| (g[k] - fd[k]).powi(2)).sum::<f64>().sqrt();
            let den: f64 = (0..6).map(|k| fd[k].powi(2)).sum::<f64>().sqrt();
            let rel = num / den.max(1e-12);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "scene {scene_idx}: rel err {rel:.3e}");
        }
    }
    println!("ACCEPTANCE 2 PASS - NDT gradient matches FD within 1e-4 (worst {worst:.3e})");
}

/// Independent dense-convolution oracle (explicit loops over a densified
/// grid; sites kept only when the receptive field touches occupancy).
fn dense_conv_oracle(
    input: &SparseFeatureTensor,
    kernel: &ConvKernel,
) -> Vec<([i32; 3], Vec<f32>)> {
    let g = input.grid();
    let dims = [g.dims[0] as i32, g.dims[1] as i32, g.dims[2] as i32];
    let (k, s) = (kernel.k as i32, kernel.stride as i32);
    let half = k / 2;
    let out_dims = [
        (dims[0] + s - 1) / s,
        (dims[1] + s - 1) / s,
        (dims[2] + s - 1) / s,
    ];
    let mut out = Vec::new();
    for yz in 0..out_dims[2] {
        for yy in 0..out_dims[1] {
            for yx in 0..out_dims[0] {
                let mut occupied = false;
                let mut feat = vec![0.0f32; kernel.c_out];
                for oz in 0..k {
                    for oy in 0..k {
                        for ox in 0..k {
                            let x = [s * yx + ox - half, s * yy + oy - half, s * yz + oz - half];
                            if (0..3).any(|a| x[a] < 0 || x[a] >= dims[a]) {
                                continue;
                            }
                            if let Some(f) = input.get(x) {
                                occupied = true;
                                let flat = (ox + k * oy + k * k * oz) as usize;
                                for ci in 0..kernel.c_in {
                                    for co in 0..kernel.c_out {
                                        feat[co] += kernel.weight(flat, ci, co) * f[ci];
                                    }
                                }
                            }
                        }
                    }
                }
                if occupied {
                    for co in 0..kernel.c_out {
                        feat[co] += kernel.bias()[co];
                        if kernel.relu && feat[co] < 0.0 {
                            feat[co] = 0.0;
                        }
                    }
                    out.push(([yx, yy, yz], feat));
                }
            }
        }
    }
    out
}

/// Criterion 3: sparse conv equals the dense oracle within 1e-5 on 200
/// random tensors for every (k, s) in {1,3} x {1,2}.
#[test]
fn acceptance_03_sparse_conv_dense_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    let mut cases = 0;
    for trial in 0..200 {
        let dims = [
            rng.random_range(3..=16u32),
            rng.random_range(3..=16u32),
            rng.random_range(3..=16u32),
        ];
        let c_in = rng.random_range(1..=4usize);
        let c_out = rng.random_range(1..=4usize);
        let grid = GridSpec::new([0.0; 3], [1.0; 3], dims);
        let tensor = random_tensor(&mut rng, grid, c_in, 0.2);
        for (k, s) in [(1usize, 1usize), (1, 2), (3, 1), (3, 2)] {
            let weights = (0..k.pow(3) * c_in * c_out)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            let bias = (0..c_out).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let kernel =
                ConvKernel::new(k, s, c_in, c_out, weights, bias, trial % 2 == 0).unwrap();
            let got = scmii_core::sparse::sparse_conv(&tensor, &kernel).unwrap();
            let want = dense_conv_oracle(&tensor, &kernel);
            assert_eq!(got.len(), want.len(), "trial {trial} k={k} s={s}");
            for (idx, feat) in want {
                let g = got.get(idx).unwrap();
                for c in 0..c_out {
                    assert!(
                        (g[c] - feat[c]).abs() < 1e-5,
                        "trial {trial} k={k} s={s} idx {idx:?} ch {c}: {} vs {}",
                        g[c],
                        feat[c]
                    );
                }
            }
            cases += 1;
        }
    }
    println!("ACCEPTANCE 3 PASS - dense-conv equivalence on {cases} tensor/kernel cases");
}

/// Criterion 4: transform_tensor equals the per-voxel-center re-binning
/// oracle exactly; the T-then-T^-1 index drift is at most 1 voxel per axis.
#[test]
fn acceptance_04_transform_tensor_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2027);
    let grid = GridSpec::new([-4.0, -4.0, -2.0], [0.5, 0.5, 0.5], [16, 16, 8]);
    for trial in 0..100 {
        let tensor = random_tensor(&mut rng, grid, 3, 0.15);
        let t = RigidTransform::from_pose(&Pose6DoF::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-3.0..3.0),
        ));
        let got = transform_tensor(&tensor, &t, &grid).unwrap();

        // Oracle: move every voxel center, re-bin with round-half-away,
        // resolve collisions by per-channel max.
        let ev = grid.effective_voxel_size();
        let mut oracle: std::collections::BTreeMap<[i32; 3], Vec<f32>> = Default::default();
        for (idx, feat) in tensor.iter() {
            let p = grid.center_of(idx);
            let q = t.apply_point(p);
            let mut ti = [0i32; 3];
            let mut ok = true;
            for a in 0..3 {
                let r = ((q[a] - grid.origin[a]) / ev[a] - 0.5).round();
                if r < 0.0 || r >= grid.dims[a] as f64 {
                    ok = false;
                    break;
                }
                ti[a] = r as i32;
            }
            if !ok {
                continue;
            }
            oracle
                .entry(ti)
                .and_modify(|prev| {
                    for (p, f) in prev.iter_mut().zip(feat) {
                        *p = p.max(*f);
                    }
                })
                .or_insert_with(|| feat.to_vec());
        }
        assert_eq!(got.len(), oracle.len(), "trial {trial}");
        for (idx, feat) in &oracle {
            assert_eq!(got.get(*idx).unwrap(), feat.as_slice(), "trial {trial} {idx:?}");
        }

        // Round trip: forward then inverse.
        let back = transform_tensor(&got, &t.invert(), &grid).unwrap();
        let original: Vec<[i32; 3]> = tensor.occupied_indices().collect();
        for (idx, _) in back.iter() {
            assert!(
                original
                    .iter()
                    .any(|o| (0..3).all(|a| (o[a] - idx[a]).abs() <= 1)),
                "trial {trial}: index {idx:?} drifted more than 1 voxel"
            );
        }
    }
    println!("ACCEPTANCE 4 PASS - re-binning oracle exact on 100 tensors; round-trip drift <= 1 voxel");
}

/// Criterion 5: fusion algebra over 1000 random cases.
#[test]
fn acceptance_05_fusion_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2028);
    let grid = GridSpec::new([0.0; 3], [0.5; 3], [10, 10, 6]);
    for case in 0..1000 {
        let channels = rng.random_range(1..=4usize);
        let a = random_tensor(&mut rng, grid, channels, 0.2);
        let b = random_tensor(&mut rng, grid, channels, 0.2);
        let c = random_tensor(&mut rng, grid, channels, 0.2);

        // Idempotence, commutativity, associativity (exact).
        assert_eq!(fuse_max(&[a.clone(), a.clone()]).unwrap(), a, "case {case}");
        let ab = fuse_max(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab, fuse_max(&[b.clone(), a.clone()]).unwrap());
        assert_eq!(
            fuse_max(&[ab.clone(), c.clone()]).unwrap(),
            fuse_max(&[a.clone(), fuse_max(&[b.clone(), c.clone()]).unwrap()]).unwrap()
        );

        // Union-support law for both methods.
        let union: std::collections::BTreeSet<[i32; 3]> = a
            .occupied_indices()
            .chain(b.occupied_indices())
            .collect();
        assert_eq!(ab.len(), union.len());
        let k = if case % 2 == 0 { 1 } else { 3 };
        let kernel = averaging_fusion_kernel(2, channels, k);
        let cc = fuse_concat_conv(&[a.clone(), b.clone()], &kernel).unwrap();
        assert_eq!(cc.len(), union.len());

        // Averaging weights (k=1) equal the mean oracle within 1e-6.
        if k == 1 {
            for idx in &union {
                let zero = vec![0.0f32; channels];
                let fa = a.get(*idx).unwrap_or(&zero);
                let fb = b.get(*idx).unwrap_or(&zero);
                let got = cc.get(*idx).unwrap();
                for ch in 0..channels {
                    let want = (fa[ch] + fb[ch]) / 2.0;
                    assert!((got[ch] - want).abs() < 1e-6, "case {case}");
                }
            }
        }
    }
    println!("ACCEPTANCE 5 PASS - fusion algebra over 1000 random cases");
}

/// Criterion 6: single sensor, identity extrinsic - the split pipeline
/// (head, wire encode/decode, tail) is bit-identical to the unsplit pass
/// over 50 seeded scenes.
#[test]
fn acceptance_06_split_point_equivalence() {
    let spec = network();
    let weights = init_weights(&spec, 11, InitMode::IdentityPreserving).unwrap();
    let weights_rand = init_weights(&spec, 12, InitMode::SeededRandom).unwrap();
    for seed in 0..50u64 {
        let sspec = SceneSpec {
            seed: 3000 + seed,
            sensors: vec![Pose6DoF::new(0.0, 0.0, 2.5, 0.0, 0.0, 0.0)],
            object_count: [5, 10],
            azimuth_step: std::f64::consts::TAU / 360.0,
            ..SceneSpec::default()
        };
        let frame = gen_scene(&sspec).unwrap();
        let cloud = &frame.clouds[0];
        for w in [&weights, &weights_rand] {
            let head = run_head(cloud, &spec, w).unwrap();
            let bytes = encode_feature(&FeatureMessage {
                device_id: 0,
                frame_id: seed,
                timestamp_us: 0,
                tensor: head,
            })
            .unwrap();
            let (msg, _) = decode_frame(&bytes).unwrap();
            let Message::Feature(msg) = msg else { panic!("wrong type") };
            let split = run_tail(&msg.tensor, &spec, w).unwrap();
            let unsplit = run_unsplit(cloud, &spec, w).unwrap();
            assert_eq!(split, unsplit, "seed {seed}");
        }
    }
    println!("ACCEPTANCE 6 PASS - split == unsplit bit-exact over 50 scenes x 2 weight modes");
}

/// Criterion 7: two identical co-located sensors with identity transforms
/// under fuse_max give detections bit-identical to the single-sensor output.
#[test]
fn acceptance_07_colocated_degenerate_case() {
    let spec = network();
    let weights = init_weights(&spec, 11, InitMode::IdentityPreserving).unwrap();
    for seed in 0..10u64 {
        let sspec = SceneSpec {
            seed: 4000 + seed,
            sensors: vec![Pose6DoF::new(0.0, 0.0, 2.5, 0.0, 0.0, 0.0)],
            object_count: [5, 10],
            azimuth_step: std::f64::consts::TAU / 360.0,
            ..SceneSpec::default()
        };
        let frame = gen_scene(&sspec).unwrap();
        let head = run_head(&frame.clouds[0], &spec, &weights).unwrap();
        let target = spec.head_output_grid();
        let identity = RigidTransform::identity();
        let a = transform_tensor(&head, &identity, &target).unwrap();
        let b = transform_tensor(&head, &identity, &target).unwrap();
        let fused = fuse_max(&[a, b]).unwrap();
        let dets_fused = run_tail(&fused, &spec, &weights).unwrap();
        let dets_single = run_tail(&head, &spec, &weights).unwrap();
        assert_eq!(dets_fused, dets_single, "seed {seed}");
    }
    println!("ACCEPTANCE 7 PASS - co-located fuse_max == single sensor, bit-exact, 10 scenes");
}

/// Criterion 8: golden-frame byte-exactness, 1e5-case fuzz without a crash,
/// and encode-decode identity on 100 random messages.
#[test]
fn acceptance_08_protocol() {
    // Golden corpus (generated independently; see tests/golden/generate.py).
    let golden_dir = format!("{}/tests/golden", env!("CARGO_MANIFEST_DIR"));
    let grid = GridSpec::new([0.0; 3], [0.5; 3], [8, 8, 4]);
    let empty = Message::Feature(FeatureMessage {
        device_id: 3,
        frame_id: 7,
        timestamp_us: 123456,
        tensor: SparseFeatureTensor::new(grid, 4).unwrap(),
    });
    let two = {
        let grid = GridSpec {
            origin: [-1.0, -2.0, -3.0],
            voxel_size: [0.25, 0.25, 0.5],
            dims: [16, 16, 8],
            stride_scale: 2,
        };
        let mut tensor = SparseFeatureTensor::new(grid, 2).unwrap();
        tensor.insert([1, 2, 3], vec![0.5, -1.5]).unwrap();
        tensor.insert([0, 5, 1], vec![0.25, 8.0]).unwrap();
        Message::Feature(FeatureMessage {
            device_id: 1,
            frame_id: 2,
            timestamp_us: 1_000_000,
            tensor,
        })
    };
    let result = Message::Result(scmii_core::protocol::ResultMessage {
        frame_id: 9,
        detections: vec![scmii_core::protocol::WireDetection {
            center: [1.0, 2.0, 3.0],
            size: [4.0, 5.0, 6.0],
            score: 0.75,
            class_id: 0,
        }],
    });
    let corpus_msgs: Vec<(&str, Message)> = vec![
        ("feature_empty.bin", empty),
        ("feature_two.bin", two),
        ("hello.bin", Message::Hello { device_id: 2 }),
        ("result.bin", result),
        ("bye.bin", Message::Bye),
    ];
    for (name, msg) in &corpus_msgs {
        let want = std::fs::read(format!("{golden_dir}/{name}")).unwrap();
        assert_eq!(&encode_message(msg).unwrap(), &want, "{name}: golden bytes differ");
        let (decoded, _) = decode_frame(&want).unwrap();
        assert_eq!(&decoded, msg, "{name}");
    }

    // encode-decode identity on 100 random messages.
    let mut rng = ChaCha8Rng::seed_from_u64(2030);
    let mut corpus = Vec::new();
    for _ in 0..100 {
        let dims = [
            rng.random_range(1..=10u32),
            rng.random_range(1..=10u32),
            rng.random_range(1..=10u32),
        ];
        let grid = GridSpec {
            origin: [rng.random_range(-5.0..5.0); 3],
            voxel_size: [rng.random_range(0.1..1.0); 3],
            dims,
            stride_scale: rng.random_range(1..=4),
        };
        let channels = rng.random_range(1..=6usize);
        let mut tensor = SparseFeatureTensor::new(grid, channels).unwrap();
        for z in 0..dims[2] as i32 {
            for y in 0..dims[1] as i32 {
                for x in 0..dims[0] as i32 {
                    if rng.random_bool(0.25) {
                        tensor
                            .insert(
                                [x, y, z],
                                (0..channels).map(|_| rng.random_range(-5.0f32..5.0)).collect(),
                            )
                            .unwrap();
                    }
                }
            }
        }
        let msg = FeatureMessage {
            device_id: rng.random(),
            frame_id: rng.random(),
            timestamp_us: rng.random(),
            tensor,
        };
        let bytes = encode_feature(&msg).unwrap();
        let (decoded, consumed) = decode_frame(&bytes).unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(decoded, Message::Feature(msg));
        corpus.push(bytes);
    }

    // 1e5 fuzz cases: mutations of valid frames and raw random bytes.
    let mut decoded_ok = 0u64;
    for _ in 0..100_000 {
        let mut bytes = if rng.random_bool(0.6) {
            let mut b = corpus[rng.random_range(0..corpus.len())].clone();
            for _ in 0..rng.random_range(1..6) {
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
            }
            b
        } else {
            (0..rng.random_range(0..256)).map(|_| rng.random()).collect()
        };
        if rng.random_bool(0.25) && !bytes.is_empty() {
            bytes.truncate(rng.random_range(0..bytes.len()));
        }
        if decode_frame(&bytes).is_ok() {
            decoded_ok += 1;
        }
    }
    println!(
        "ACCEPTANCE 8 PASS - golden bytes exact; 100 round trips; 100000 fuzz cases \
         ({decoded_ok} decoded clean), zero crashes"
    );
}

/// Criterion 9: barrier permutation test - frames 1..20, 3 devices, random
/// arrival order with injected drops; every frame released exactly once and
/// dropped-device frames released at timeout with complete = false.
#[test]
fn acceptance_09_barrier_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2031);
    let tensor = || SparseFeatureTensor::new(GridSpec::new([0.0; 3], [1.0; 3], [2, 2, 2]), 1).unwrap();
    for trial in 0..20 {
        let devices = [0u16, 1, 2];
        let timeout_ms = 10.0;
        let mut arrivals: Vec<(u16, u64, u64)> = Vec::new(); // (device, frame, time_us)
        let mut dropped: std::collections::BTreeSet<(u16, u64)> = Default::default();
        for frame in 1..=20u64 {
            for d in devices {
                if rng.random_bool(0.2) {
                    dropped.insert((d, frame));
                } else {
                    // All of a frame's arrivals land inside its timeout window.
                    arrivals.push((d, frame, frame * 20_000 + rng.random_range(0..5_000)));
                }
            }
        }
        arrivals.shuffle(&mut rng);
        arrivals.sort_by_key(|(_, _, t)| *t);

        let mut barrier = FrameBarrier::new(devices, timeout_ms);
        let mut released = Vec::new();
        for (d, f, t) in &arrivals {
            released.extend(barrier.poll(*t));
            if let Some(r) = barrier.offer(*d, *f, tensor(), *t) {
                released.push(r);
            }
        }
        released.extend(barrier.poll(u64::MAX >> 1));
        assert_eq!(barrier.pending_frames(), 0);

        let mut seen = std::collections::BTreeSet::new();
        for r in &released {
            assert!(seen.insert(r.frame_id), "trial {trial}: frame {} twice", r.frame_id);
            let drops: Vec<u16> = devices
                .iter()
                .copied()
                .filter(|d| dropped.contains(&(*d, r.frame_id)))
                .collect();
            assert_eq!(r.complete, drops.is_empty(), "trial {trial} frame {}", r.frame_id);
            assert_eq!(r.tensors.len(), 3 - drops.len());
            if !drops.is_empty() {
                // Released exactly at first arrival + timeout.
                let first = arrivals
                    .iter()
                    .filter(|(_, f, _)| *f == r.frame_id)
                    .map(|(_, _, t)| *t)
                    .min()
                    .unwrap();
                assert_eq!(r.released_at_us, first + (timeout_ms * 1000.0) as u64);
            }
        }
        for frame in 1..=20u64 {
            let had_arrival = devices.iter().any(|d| !dropped.contains(&(*d, frame)));
            assert_eq!(seen.contains(&frame), had_arrival, "trial {trial} frame {frame}");
        }
    }
    println!("ACCEPTANCE 9 PASS - barrier permutation: exactly-once release, timeout partials");
}

/// Criterion 10: with the default cost model (server 20x edge, 1 Gbps link)
/// the mean speedup over the edge-only baseline exceeds 1.5x and per-device
/// edge time is strictly below the edge-only total in every frame.
#[test]
fn acceptance_10_timing_direction() {
    let spec = network();
    let weights = init_weights(&spec, 1, InitMode::IdentityPreserving).unwrap();
    let mut frames = Vec::new();
    let mut calib = CalibrationFile::new(0);
    for j in 0..10u64 {
        let sspec = SceneSpec {
            seed: 5000 + j,
            object_count: [8, 14],
            ..SceneSpec::default()
        };
        let frame = gen_scene(&sspec).unwrap();
        if j == 0 {
            let e = &frame.truth.extrinsics;
            calib
                .transforms
                .insert(1, e[0].invert().compose(&e[1]).orthonormalized());
        }
        frames.push(frame.clouds);
    }
    let fusion = FusionConfig {
        method: FusionMethod::Max,
        device_order: vec![0, 1],
        target_grid: spec.head_output_grid(),
    };
    let link = LinkModel::default();
    let cost = CostModel::default();
    assert_eq!(link.bandwidth_mbps, 1000.0);
    assert_eq!(cost.server_mac_per_s / cost.edge_mac_per_s, 20.0);
    let out = simulate_pipeline(
        &frames,
        &calib,
        &spec,
        &weights,
        &fusion,
        &link,
        &cost,
        BaselineMode::EdgeOnlyColocated,
        100.0,
    )
    .unwrap();
    let t = &out.timing;
    assert!(t.mean_speedup > 1.5, "mean speedup {}", t.mean_speedup);
    for f in &t.frames {
        for e in &f.edge_ms {
            assert!(
                *e < f.baseline_ms,
                "frame {}: edge {e} !< baseline {}",
                f.frame_id,
                f.baseline_ms
            );
        }
    }
    println!(
        "ACCEPTANCE 10 PASS - mean speedup {:.2}x (> 1.5x), per-device edge < edge-only in all \
         {} frames; mean edge-time reduction {:.1}%; reference context (not asserted): \
         {:.2}x speedup, {:.1}% reduction",
        t.mean_speedup,
        t.frames.len(),
        t.mean_edge_reduction_pct,
        t.reference.mean_speedup,
        t.reference.edge_time_reduction_pct
    );
}

/// Criterion 11: 30-scene occlusion-heavy benchmark (seed 7): fuse_max
/// support strictly exceeds each single sensor's transformed support on at
/// least 90% of frames (asserted); the AP@0.5 comparison is reported.
#[test]
fn acceptance_11_accuracy_direction() {
    let spec = network();
    let weights = init_weights(&spec, 7, InitMode::IdentityPreserving).unwrap();
    let target = spec.head_output_grid();

    let mut strict_support = 0usize;
    let mut frames_single: Vec<Vec<(Vec<Detection>, Vec<TruthBox>)>> = vec![Vec::new(); 2];
    let mut frames_fused: Vec<(Vec<Detection>, Vec<TruthBox>)> = Vec::new();
    let n_scenes = 30;
    for j in 0..n_scenes as u64 {
        // Occlusion-heavy: dense objects, sensors at opposite corners.
        let sspec = SceneSpec {
            seed: 7 + j,
            object_count: [12, 16],
            size_min: [2.0, 2.0, 1.4],
            size_max: [4.0, 3.0, 2.6],
            sensors: vec![
                Pose6DoF::new(-10.0, -10.0, 2.5, 0.0, 0.0, 0.0),
                Pose6DoF::new(10.0, 10.0, 2.5, 0.0, 0.0, -2.356),
            ],
            ..SceneSpec::default()
        };
        let frame = gen_scene(&sspec).unwrap();
        let e = &frame.truth.extrinsics;
        let inv_ref = e[0].invert();
        let rel = [RigidTransform::identity(), inv_ref.compose(&e[1]).orthonormalized()];
        let truth_ref: Vec<TruthBox> = frame
            .truth
            .boxes
            .iter()
            .map(|b| TruthBox {
                center: inv_ref.apply_point(b.center),
                size: b.size,
                class_id: b.class_id,
            })
            .collect();

        let aligned: Vec<SparseFeatureTensor> = (0..2)
            .map(|i| {
                let head = run_head(&frame.clouds[i], &spec, &weights).unwrap();
                transform_tensor(&head, &rel[i], &target).unwrap()
            })
            .collect();
        let fused = fuse_max(&aligned).unwrap();
        if aligned.iter().all(|t| fused.len() > t.len()) {
            strict_support += 1;
        }
        for i in 0..2 {
            let dets = run_tail(&aligned[i], &spec, &weights).unwrap();
            frames_single[i].push((dets, truth_ref.clone()));
        }
        let dets = run_tail(&fused, &spec, &weights).unwrap();
        frames_fused.push((dets, truth_ref));
    }

    let frac = strict_support as f64 / n_scenes as f64;
    assert!(
        frac >= 0.9,
        "fused support strictly larger on only {strict_support}/{n_scenes} frames"
    );

    // AP comparison: reported, not asserted.
    let ap_fused = average_precision_pooled(&frames_fused, 0.5).ap;
    let ap_single: Vec<f64> = frames_single
        .iter()
        .map(|f| average_precision_pooled(f, 0.5).ap)
        .collect();
    let ap_fused_03 = average_precision_pooled(&frames_fused, 0.3).ap;
    let ap_single_03: Vec<f64> = frames_single
        .iter()
        .map(|f| average_precision_pooled(f, 0.3).ap)
        .collect();
    let dominates = ap_single.iter().all(|s| ap_fused >= *s);
    println!(
        "ACCEPTANCE 11 PASS - fused support strictly exceeds each single sensor on \
         {strict_support}/{n_scenes} frames (>= 90% asserted). Reported (not asserted): \
         AP@0.5 fused {ap_fused:.4} vs singles {ap_single:?} (fused >= singles: {dominates}); \
         AP@0.3 fused {ap_fused_03:.4} vs singles {ap_single_03:?}"
    );
}

/// Criterion 12: AP metric against a brute-force PR oracle on 500 random
/// small instances, plus the hand-computed 5/6 case.
#[test]
fn acceptance_12_ap_metric_oracle() {
    // Hand-walked case: 2 truths, 3 ranked detections, ranks 1 and 3 match:
    // AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
    let tbox = |center: [f64; 3]| TruthBox {
        center,
        size: [2.0; 3],
        class_id: 0,
    };
    let det = |center: [f64; 3], score: f32| Detection {
        center,
        size: [2.0; 3],
        score,
        class_id: 0,
    };
    let truth = vec![tbox([0.0; 3]), tbox([10.0, 0.0, 0.0])];
    let dets = vec![
        det([0.0; 3], 0.9),
        det([20.0, 0.0, 0.0], 0.8),
        det([10.0, 0.0, 0.0], 0.7),
    ];
    let r = average_precision(&dets, &truth, 0.5);
    assert!((r.ap - 5.0 / 6.0).abs() < 1e-12, "hand case: {}", r.ap);

    // Brute-force oracle: per-prefix matching from scratch + direct envelope
    // integration from the definition.
    let oracle = |dets: &[Detection], truth: &[TruthBox], thr: f64| -> f64 {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|a, b| dets[*b].score.partial_cmp(&dets[*a].score).unwrap());
        let mut points: Vec<(f64, f64)> = Vec::new();
        for k in 1..=order.len() {
            let mut used = vec![false; truth.len()];
            let mut tp = 0;
            for &di in &order[..k] {
                let mut best: Option<(usize, f64)> = None;
                for (ti, t) in truth.iter().enumerate() {
                    if used[ti] {
                        continue;
                    }
                    let iou = iou3d(&Box3::from(&dets[di]), &Box3::from(t));
                    if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((ti, iou));
                    }
                }
                if let Some((ti, _)) = best {
                    used[ti] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / truth.len() as f64, tp as f64 / k as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..points.len() {
            let r = points[i].0;
            if r <= prev {
                continue;
            }
            let env = points
                .iter()
                .filter(|(pr, _)| *pr >= r)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            ap += (r - prev) * env;
            prev = r;
        }
        ap
    };

    let mut rng = ChaCha8Rng::seed_from_u64(2033);
    for case in 0..500 {
        let nt = rng.random_range(1..=4usize);
        let nd = rng.random_range(0..=6usize);
        let truth: Vec<TruthBox> = (0..nt)
            .map(|_| TruthBox {
                center: [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-1.0..1.0),
                ],
                size: [
                    rng.random_range(1.0..3.0),
                    rng.random_range(1.0..3.0),
                    rng.random_range(1.0..3.0),
                ],
                class_id: 0,
            })
            .collect();
        let dets: Vec<Detection> = (0..nd)
            .map(|_| {
                if rng.random_bool(0.6) {
                    let t = &truth[rng.random_range(0..truth.len())];
                    Detection {
                        center: [
                            t.center[0] + rng.random_range(-0.8..0.8),
                            t.center[1] + rng.random_range(-0.8..0.8),
                            t.center[2] + rng.random_range(-0.3..0.3),
                        ],
                        size: t.size,
                        score: rng.random_range(0.0..1.0),
                        class_id: 0,
                    }
                } else {
                    Detection {
                        center: [
                            rng.random_range(-6.0..6.0),
                            rng.random_range(-6.0..6.0),
                            rng.random_range(-1.0..1.0),
                        ],
                        size: [1.5; 3],
                        score: rng.random_range(0.0..1.0),
                        class_id: 0,
                    }
                }
            })
            .collect();
        let thr = if case % 2 == 0 { 0.3 } else { 0.5 };
        let got = average_precision(&dets, &truth, thr).ap;
        let want = oracle(&dets, &truth, thr);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
    println!("ACCEPTANCE 12 PASS - AP oracle equivalence on 500 cases; 5/6 hand case exact");
}
