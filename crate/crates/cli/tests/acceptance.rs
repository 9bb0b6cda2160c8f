//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cascade_core::cascade::{run_mvs, run_stereo, CascadeRun};
use cascade_core::fusion::{filter_geometric, filter_photometric, fuse, PointCloud};
use cascade_core::geometry::{apply_homography, homography_for_depth, reproject_pixel, PixelTransfer};
use cascade_core::hypothesis::upsample_bilinear;
use cascade_core::io::{read_cam, read_pfm, read_ply, write_cam, write_pfm, write_ply, PfmImage, RunConfig};
use cascade_core::metrics::{d1, epe, outlier_fraction, stage_table};
use cascade_core::pyramid::{compute_descriptor, Descriptor};
use cascade_core::regress::soft_argmin;
use cascade_core::synth::{render, Layout, Primitive, RenderedScene, SceneSpec, Surface, TextureSpec};
use cascade_core::volume::{aggregate_cost, variance_cost, warp_feature_slice, CostVolume, WarpedSlice};
use cascade_core::{
    schedule_from_config, Camera, CameraIntrinsics, CameraPose, DepthMap, HypothesisField, StageSpec, SweepMode,
};
use nalgebra::{Matrix3, Point2, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mvs_config() -> RunConfig {
    RunConfig::load(&configs().join("mvs.conf")).expect("shipped mvs config")
}

fn stereo_config() -> RunConfig {
    RunConfig::load(&configs().join("stereo.conf")).expect("shipped stereo config")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" > ")
}

// ---------------------------------------------------------------------------
// shared oracle-scene run

struct MvsFixture {
    scene: RenderedScene,
    config: RunConfig,
    run: CascadeRun,
    seconds: f64,
}

fn mvs_fixture() -> MvsFixture {
    let config = mvs_config();
    let scene = render(&SceneSpec::default_mvs()).expect("default scene renders");
    let t = Instant::now();
    let reference = &scene.views[0];
    let schedule = config.schedule(reference.camera.depth_interval).unwrap();
    let run = run_mvs(reference, &scene.views[1..], &schedule, &config.options).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    MvsFixture {
        scene,
        config,
        run,
        seconds,
    }
}

// ---------------------------------------------------------------------------
// 1. geometry

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let center = Vector3::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), 0.0);
    let k = CameraIntrinsics::with_skew(
        rng.random_range(400.0..1200.0),
        rng.random_range(400.0..1200.0),
        rng.random_range(250.0..390.0),
        rng.random_range(200.0..310.0),
        rng.random_range(-1.0..1.0),
    )
    .unwrap();
    let target = Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 600.0);
    let pose = CameraPose::look_at(center, target, Vector3::new(0.0, -1.0, 0.0)).unwrap();
    Camera::new(k, pose, 300.0, 2.0).unwrap()
}

/// Reprojection from raw matrices: back-project with `K_r^-1`, move through
/// world coordinates, project with `K_s`.
fn raw_reprojection(r: &Camera, s: &Camera, x: f64, y: f64, depth: f64) -> (f64, f64) {
    let kr = r.intrinsics.matrix();
    let ks = s.intrinsics.matrix();
    let ray = kr.try_inverse().unwrap() * Vector3::new(x, y, 1.0);
    let cam_r = ray * depth;
    let world = r.pose.rotation().transpose() * (cam_r - r.pose.translation());
    let cam_s = s.pose.rotation() * world + s.pose.translation();
    let h = ks * cam_s;
    (h.x / h.z, h.y / h.z)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut count = 0usize;
    for _ in 0..10 {
        let r = random_camera(&mut rng);
        let s = random_camera(&mut rng);
        let transfer = PixelTransfer::new(&r, &s);
        for _ in 0..10 {
            let depth = rng.random_range(350.0..900.0);
            let h = homography_for_depth(&r, &s, depth).map_err(|e| e.to_string())?;
            for _ in 0..1000 {
                let (x, y) = (rng.random_range(0.0..640.0), rng.random_range(0.0..512.0));
                let oracle = raw_reprojection(&r, &s, x, y, depth);
                let via_h = apply_homography(&h, Point2::new(x, y)).ok_or("homography point at infinity")?;
                let via_p = reproject_pixel(&r, &s, Point2::new(x, y), depth).ok_or("reprojection behind camera")?;
                let (u, v, _) = transfer.transfer(x, y, depth).ok_or("transfer behind camera")?;
                for (a, b) in [(via_h.x, via_h.y), (via_p.x, via_p.y), (u, v)] {
                    worst = worst.max((a - oracle.0).abs()).max((b - oracle.1).abs());
                }
                count += 1;
            }
        }
    }
    ensure(worst < 1e-6, format!("max deviation {worst:.3e} px"))?;
    let mut identity_err: f64 = 0.0;
    for _ in 0..10 {
        let c = random_camera(&mut rng);
        let h = homography_for_depth(&c, &c, rng.random_range(350.0..900.0)).map_err(|e| e.to_string())?;
        identity_err = identity_err.max((h - Matrix3::identity()).abs().max());
    }
    ensure(identity_err < 1e-9, format!("identical cameras: |H - I| = {identity_err:.3e}"))?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("runtime {secs:.2} s"))?;
    Ok(format!(
        "{count} samples, max deviation {worst:.2e} px, |H - I| {identity_err:.1e}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------------------
// 2. warping oracle

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let depth = 500.0;
    let spec = SceneSpec {
        width: 320,
        height: 256,
        focal: 400.0,
        surfaces: vec![Surface {
            primitive: Primitive::FrontoPlane { depth },
            textured: true,
        }],
        texture: TextureSpec {
            seed: 7,
            cell: 48.0,
            octaves: 3,
        },
        layout: Layout::Ring {
            sources: 4,
            radius: 40.0,
            target_depth: depth,
        },
        depth_min: 300.0,
        depth_interval: 2.0,
        noise_sigma: 0.0,
        noise_seed: 0,
    };
    let scene = render(&spec).map_err(|e| e.to_string())?;
    let (w, h) = (spec.width, spec.height);
    let reference = &scene.views[0];
    let ref_feat = compute_descriptor(&reference.image, Descriptor::Intensity, 1.0);
    let field = HypothesisField::from_starts(0, w, h, 1, 1.0, scene.depths[0].values().to_vec()).unwrap();
    let margin = 2.0;
    let (mut interior, mut good) = (0usize, 0usize);
    for src in &scene.views[1..] {
        let src_feat = compute_descriptor(&src.image, Descriptor::Intensity, 1.0);
        let warped = warp_feature_slice(&src_feat, &reference.camera, &src.camera, &field, 0);
        for y in 0..h {
            for x in 0..w {
                let m = y * w + x;
                let Some((u, v)) = reproject_pixel(&reference.camera, &src.camera, Point2::new(x as f64, y as f64), depth)
                    .map(|p| (p.x, p.y))
                else {
                    continue;
                };
                let inside = u >= margin && v >= margin && u <= (w - 1) as f64 - margin && v <= (h - 1) as f64 - margin;
                if !inside || x < 2 || y < 2 || x + 2 >= w || y + 2 >= h {
                    continue;
                }
                interior += 1;
                if warped.mask[m] && (warped.pixel(m)[0] - ref_feat.data()[m]).abs() < 1e-3 {
                    good += 1;
                }
            }
        }
    }
    let frac = good as f64 / interior as f64;
    let secs = t.elapsed().as_secs_f64();
    ensure(interior > 0, "no interior pixels")?;
    ensure(frac >= 0.99, format!("{:.2}% of interior pixels within 1e-3", 100.0 * frac))?;
    ensure(secs < 5.0, format!("runtime {secs:.2} s"))?;
    Ok(format!(
        "{:.2}% of {interior} interior pixels within 1e-3 over 4 sources, {secs:.2} s",
        100.0 * frac
    ))
}

// ---------------------------------------------------------------------------
// 3. schedule fidelity

fn criterion_3() -> Outcome {
    let mvs = mvs_config().schedule(2.5).map_err(|e| e.to_string())?;
    ensure(mvs.plane_counts() == vec![48, 32, 8], format!("mvs planes {:?}", mvs.plane_counts()))?;
    let multipliers: Vec<f64> = mvs.intervals().iter().map(|i| i / mvs.base_interval()).collect();
    ensure(multipliers == vec![4.0, 2.0, 1.0], format!("mvs multipliers {multipliers:?}"))?;
    ensure(
        mvs.area_scales() == vec![1.0 / 16.0, 0.25, 1.0],
        format!("mvs area scales {:?}", mvs.area_scales()),
    )?;
    let st = stereo_config().schedule(1.0).map_err(|e| e.to_string())?;
    ensure(st.len() == 2, format!("stereo has {} stages", st.len()))?;
    ensure(st.plane_counts() == vec![12, 12], format!("stereo planes {:?}", st.plane_counts()))?;
    ensure(st.intervals() == vec![4.0, 1.0], format!("stereo intervals {:?}", st.intervals()))?;
    let max_disp = st.full_scale_range(0);
    ensure(max_disp == 192.0 && st.full_range() == 192.0, format!("stereo max disparity {max_disp}"))?;
    Ok(format!(
        "mvs D {:?} x{:?} area {:?}; stereo D {:?} intervals {:?} px, max disparity {max_disp}",
        mvs.plane_counts(),
        multipliers,
        mvs.area_scales(),
        st.plane_counts(),
        st.intervals()
    ))
}

// ---------------------------------------------------------------------------
// 4-7. cascade on the oracle scene

fn stage_errors(run: &CascadeRun, gt: &DepthMap) -> Result<(Vec<f64>, Vec<Option<f64>>), String> {
    let rows = stage_table(run, gt).map_err(|e| e.to_string())?;
    let errors = rows.iter().map(|r| r.error.ok_or("stage without valid pixels")).collect::<Result<_, _>>()?;
    Ok((errors, rows.iter().map(|r| r.coverage).collect()))
}

fn criterion_4(f: &MvsFixture) -> Outcome {
    let visible = f.scene.non_occluded_depth(0);
    let (errs, _) = stage_errors(&f.run, &visible)?;
    let (all, _) = stage_errors(&f.run, &f.scene.depths[0])?;
    let decreasing = errs.windows(2).all(|p| p[1] < p[0]);
    let ratio = errs[2] / errs[0];
    let detail = format!(
        "non-occluded errors {} (stage3/stage1 {ratio:.3}); all pixels {} ({:.3}); {:.1} s",
        fmt_list(&errs),
        fmt_list(&all),
        all[2] / all[0],
        f.seconds
    );
    ensure(decreasing && ratio < 0.5 && f.seconds < 60.0, detail.clone())?;
    Ok(detail)
}

fn criterion_5(f: &MvsFixture) -> Outcome {
    let (w, h) = f.run.input_dims();
    let counted = f.run.total_cost_cells();
    let analytic: usize = [(48, 4), (32, 2), (8, 1)]
        .iter()
        .map(|&(d, s)| d * (w / s) * (h / s))
        .sum();
    let baseline = 192 * w * h;
    let reduction = 1.0 - counted as f64 / baseline as f64;
    let detail = format!(
        "counted {counted} = 19*W*H = {} vs baseline {baseline}; reduction {:.2}%",
        19 * w * h,
        100.0 * reduction
    );
    ensure(counted == analytic && counted == 19 * w * h && reduction >= 0.9, detail.clone())?;
    Ok(detail)
}

/// Mean |value - truth| over every truth-valid pixel, whether or not the
/// prediction flagged it valid.
fn raw_mean_error(values: &[f64], gt: &DepthMap) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (m, &v) in values.iter().enumerate() {
        if gt.is_valid(m) {
            sum += (v - gt.values()[m]).abs();
            n += 1;
        }
    }
    sum / n as f64
}

fn criterion_6(f: &MvsFixture) -> Outcome {
    let t = Instant::now();
    let base = f.scene.views[0].camera.depth_interval;
    let full_range = 192.0 * base;
    let single = schedule_from_config(SweepMode::Depth, base, full_range, &[StageSpec::new(88, 192.0 / 88.0)], 2)
        .map_err(|e| e.to_string())?;
    let coarse = run_mvs(&f.scene.views[0], &f.scene.views[1..], &single, &f.config.options).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let m = coarse.final_map();
    let up = upsample_bilinear(m.values(), m.width(), m.height(), 4);
    let visible = f.scene.non_occluded_depth(0);
    let single_err = raw_mean_error(&up, &visible);
    let cascade_err = raw_mean_error(f.run.final_map().values(), &visible);
    let single_all = raw_mean_error(&up, &f.scene.depths[0]);
    let cascade_all = raw_mean_error(f.run.final_map().values(), &f.scene.depths[0]);
    let detail = format!(
        "cascade {} planes {cascade_err:.3} vs single 88-plane {single_err:.3} (all pixels {cascade_all:.3} vs {single_all:.3}); {secs:.1} s",
        f.run.schedule().total_planes()
    );
    ensure(f.run.schedule().total_planes() == 88, detail.clone())?;
    ensure(cascade_err < single_err && secs + f.seconds < 60.0, detail.clone())?;
    Ok(detail)
}

fn criterion_7(f: &MvsFixture) -> Outcome {
    let (_, cov) = stage_errors(&f.run, &f.scene.non_occluded_depth(0))?;
    let (_, cov_all) = stage_errors(&f.run, &f.scene.depths[0])?;
    let (c2, c3) = (cov[1].ok_or("no stage-2 coverage")?, cov[2].ok_or("no stage-3 coverage")?);
    let s = f.run.schedule();
    let narrowing = s.full_scale_range(2) / s.full_scale_range(0);
    let detail = format!(
        "non-occluded coverage stage2 {:.2}% stage3 {:.2}% (all pixels {:.2}% / {:.2}%); R3/R1 = {narrowing:.4}",
        100.0 * c2,
        100.0 * c3,
        100.0 * cov_all[1].unwrap_or(0.0),
        100.0 * cov_all[2].unwrap_or(0.0)
    );
    ensure(c2 >= 0.95 && c3 >= 0.95 && narrowing <= 0.1, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. stereo

fn criterion_8() -> Outcome {
    let scene = render(&SceneSpec::default_stereo()).map_err(|e| e.to_string())?;
    let config = stereo_config();
    let schedule = config.schedule(1.0).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let run = run_stereo(&scene.views[0].image, &scene.views[1].image, &schedule, &config.options)
        .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let full = scene.disparity.as_ref().ok_or("stereo scene without disparity")?;
    let max_disp = full.values().iter().zip(full.valid_mask()).filter(|(_, &v)| v).map(|(d, _)| *d).fold(0.0, f64::max);
    let visible = scene.non_occluded_disparity().unwrap();
    let (errs, _) = stage_errors(&run, &visible)?;
    let detail = format!(
        "non-occluded EPE {} px (max disparity {max_disp:.1} px); {secs:.1} s",
        fmt_list(&errs)
    );
    ensure(max_disp <= 48.0, detail.clone())?;
    ensure(errs[1] < 0.5 && errs[1] < errs[0] && secs < 30.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. regression oracles

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (w, h, d) = (100, 100, 12);
    let starts: Vec<f64> = (0..w * h).map(|_| rng.random_range(100.0..200.0)).collect();
    let interval = 1.5;
    let field = HypothesisField::from_starts(0, w, h, d, interval, starts.clone()).unwrap();
    let costs: Vec<f64> = (0..w * h * d).map(|_| rng.random_range(0.0..2.0)).collect();
    let valid: Vec<bool> = (0..w * h * d).map(|_| rng.random_bool(0.9)).collect();
    let volume = CostVolume::new(field, costs.clone(), valid.clone()).unwrap();
    let tau = 0.35;
    let map = soft_argmin(&volume, tau).map_err(|e| e.to_string())?;
    let mut soft_err: f64 = 0.0;
    for m in 0..w * h {
        let planes: Vec<usize> = (0..d).filter(|&j| valid[m * d + j]).collect();
        if planes.len() < 2 {
            ensure(!map.is_valid(m), format!("pixel {m} with {} planes marked valid", planes.len()))?;
            continue;
        }
        let weights: Vec<f64> = planes.iter().map(|&j| (-costs[m * d + j] / tau).exp()).collect();
        let z: f64 = weights.iter().sum();
        let expect: f64 = planes
            .iter()
            .zip(&weights)
            .map(|(&j, wt)| wt / z * (starts[m] + j as f64 * interval))
            .sum();
        soft_err = soft_err.max((map.values()[m] - expect).abs());
    }
    ensure(soft_err < 1e-9, format!("soft argmin deviation {soft_err:.3e}"))?;

    // variance cost over warped slices
    let (views, channels) = (4, 3);
    let slices: Vec<WarpedSlice> = (0..views)
        .map(|_| WarpedSlice {
            width: w,
            height: h,
            channels,
            data: (0..w * h * channels).map(|_| rng.random_range(0.0..1.0)).collect(),
            mask: (0..w * h).map(|_| rng.random_bool(0.8)).collect(),
        })
        .collect();
    let var = variance_cost(&slices).map_err(|e| e.to_string())?;
    let mut var_err: f64 = 0.0;
    for m in 0..w * h {
        let seen: Vec<&WarpedSlice> = slices.iter().filter(|s| s.mask[m]).collect();
        ensure(var.valid[m] == (seen.len() >= 2), format!("variance validity at {m}"))?;
        if seen.len() < 2 {
            continue;
        }
        let n = seen.len() as f64;
        let mut total = 0.0;
        for c in 0..channels {
            let sum: f64 = seen.iter().map(|s| s.data[m * channels + c]).sum();
            let sq: f64 = seen.iter().map(|s| s.data[m * channels + c].powi(2)).sum();
            total += sq / n - (sum / n).powi(2);
        }
        var_err = var_err.max((var.costs[m] - total / channels as f64).abs());
    }
    ensure(var_err < 1e-9, format!("variance deviation {var_err:.3e}"))?;

    // box aggregation over identical ladders
    let flat = HypothesisField::from_starts(0, w, h, d, interval, vec![150.0; w * h]).unwrap();
    let flat_volume = CostVolume::new(flat, costs.clone(), valid.clone()).unwrap();
    let window = 5usize;
    let agg = aggregate_cost(&flat_volume, window, 0.0).map_err(|e| e.to_string())?;
    let r = (window / 2) as isize;
    let mut box_err: f64 = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let m = (y * w as isize + x) as usize;
            for j in 0..d {
                let expect = if !valid[m * d + j] {
                    costs[m * d + j]
                } else {
                    let (mut sum, mut n) = (0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                                continue;
                            }
                            let q = (yy * w as isize + xx) as usize;
                            if valid[q * d + j] {
                                sum += costs[q * d + j];
                                n += 1.0;
                            }
                        }
                    }
                    sum / n
                };
                box_err = box_err.max((agg.cost(m, j) - expect).abs());
            }
        }
    }
    ensure(box_err < 1e-9, format!("box aggregation deviation {box_err:.3e}"))?;

    // map metrics
    let n = w * h;
    let gt_vals: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..80.0)).collect();
    let pred_vals: Vec<f64> = gt_vals.iter().map(|g| g + rng.random_range(-6.0..6.0)).collect();
    let gt_valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
    let pred_valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
    let mk = |v: &[f64], ok: &[bool]| {
        DepthMap::new(w, h, v.to_vec(), ok.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), ok.to_vec()).unwrap()
    };
    let (pred, gt) = (mk(&pred_vals, &pred_valid), mk(&gt_vals, &gt_valid));
    let (mut sum, mut cnt, mut over, mut bad) = (0.0, 0.0, 0.0, 0.0);
    for m in 0..n {
        if pred_valid[m] && gt_valid[m] {
            let e = (pred_vals[m] - gt_vals[m]).abs();
            sum += e;
            cnt += 1.0;
            if e > 2.0 {
                over += 1.0;
            }
            if e > 3.0 && e > 0.05 * gt_vals[m] {
                bad += 1.0;
            }
        }
    }
    let metric_err = [
        (epe(&pred, &gt).unwrap().unwrap(), sum / cnt),
        (outlier_fraction(&pred, &gt, 2.0).unwrap().unwrap(), over / cnt),
        (d1(&pred, &gt).unwrap().unwrap(), bad / cnt),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs())
    .fold(0.0, f64::max);
    ensure(metric_err < 1e-9, format!("metric deviation {metric_err:.3e}"))?;
    Ok(format!(
        "soft argmin {soft_err:.1e} on {n} pixels, variance {var_err:.1e}, box {box_err:.1e}, EPE/outlier/D1 {metric_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 10. fusion

fn criterion_10(f: &MvsFixture) -> Outcome {
    let t = Instant::now();
    let scene = &f.scene;
    let params = f.config.fusion;
    let cams: Vec<Camera> = scene.views.iter().map(|v| v.camera).collect();
    let n_views = scene.views.len();

    // retention on exact maps
    let kept = filter_geometric(&scene.depths, &cams, &params).map_err(|e| e.to_string())?;
    let mut worst_keep: f64 = 1.0;
    for i in 0..n_views {
        let interior: Vec<usize> = (0..scene.depths[i].values().len())
            .filter(|&m| scene.depths[i].is_valid(m) && scene.covisibility[i][m] as usize >= params.min_views)
            .collect();
        let survived = interior.iter().filter(|&&m| kept[i].is_valid(m)).count();
        worst_keep = worst_keep.min(survived as f64 / interior.len() as f64);
    }

    // fused cloud from estimated maps
    let mut maps = vec![f.run.final_map().clone()];
    for i in 1..n_views {
        let sources: Vec<_> = (0..n_views).filter(|&j| j != i).map(|j| scene.views[j].clone()).collect();
        let schedule = f.config.schedule(cams[i].depth_interval).unwrap();
        maps.push(run_mvs(&scene.views[i], &sources, &schedule, &f.config.options).map_err(|e| e.to_string())?.final_map().clone());
    }
    let photometric: Vec<DepthMap> = maps.iter().map(|m| filter_photometric(m, params.photometric_threshold)).collect();
    let consistent = filter_geometric(&photometric, &cams, &params).map_err(|e| e.to_string())?;
    let cloud = fuse(&consistent, &cams, &[], &params).map_err(|e| e.to_string())?;
    let interval = f.run.schedule().full_scale_interval(2);
    let surface = scene.surface_samples(params.min_views as u16, 2);
    let scores = cascade_core::metrics::cloud_acc_comp(&cloud, &surface, f.config.cloud_distance_cap * interval)
        .map_err(|e| e.to_string())?;
    let (acc, comp) = (scores.accuracy.ok_or("empty cloud")?, scores.completeness.ok_or("no samples")?);

    // one corrupted view
    let victim = 2;
    let mut corrupted = scene.depths.clone();
    let (w, h) = (corrupted[victim].width(), corrupted[victim].height());
    let region: Vec<usize> = (h / 4..3 * h / 4)
        .flat_map(|y| (w / 4..3 * w / 4).map(move |x| y * w + x))
        .filter(|&m| scene.depths[victim].is_valid(m))
        .collect();
    let mut values = corrupted[victim].values().to_vec();
    for &m in &region {
        values[m] *= 1.05;
    }
    corrupted[victim] = DepthMap::new(
        w,
        h,
        values,
        corrupted[victim].confidence().to_vec(),
        corrupted[victim].valid_mask().to_vec(),
    )
    .unwrap();
    let after = filter_geometric(&corrupted, &cams, &params).map_err(|e| e.to_string())?;
    let survival = region.iter().filter(|&&m| after[victim].is_valid(m)).count() as f64 / region.len() as f64;
    let secs = t.elapsed().as_secs_f64();

    let detail = format!(
        "exact maps keep >= {:.2}% of interior pixels; {} fused points, accuracy {acc:.3} completeness {comp:.3} (< {interval}); corrupted-region survival {:.2}%; {secs:.1} s",
        100.0 * worst_keep,
        cloud.len(),
        100.0 * survival
    );
    ensure(worst_keep >= 0.99 && acc < interval && comp < interval && survival < 0.1, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 11. determinism through the command-line pipeline

const SMALL_SCENE: &str = "\
width = 160
height = 128
focal = 200
layout = ring
sources = 4
ring_radius = 120
target_depth = 700
depth_min = 425
depth_interval = 2.5
texture_cell = 12
primitive = tilted 0.15 -0.1 1 820
primitive = sphere -70 20 660 110
primitive = sphere 120 -60 720 60
";

fn cascade(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cascade"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("cascade {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(())
}

fn pipeline(root: &Path, threads: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let spec = root.join("scene.conf");
    std::fs::write(&spec, SMALL_SCENE).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let th = threads.to_string();
    let scene = root.join("scene");
    let run = root.join("run");
    let cfg = configs().join("mvs.conf");
    cascade(&["--threads", &th, "synth", "--spec", &s(&spec), "--out", &s(&scene)])?;
    for i in 0..5 {
        cascade(&[
            "--threads", &th, "mvs", "--config", &s(&cfg), "--scene", &s(&scene), "--ref", &i.to_string(), "--out", &s(&run),
        ])?;
    }
    let cloud = root.join("cloud.ply");
    cascade(&[
        "--threads", &th, "fuse", "--config", &s(&cfg), "--scene", &s(&scene), "--depths", &s(&run), "--out", &s(&cloud),
    ])?;
    cascade(&[
        "--threads", &th, "eval", "--pred", &s(&run.join("00000000_depth.pfm")), "--gt",
        &s(&scene.join("depths/00000000.pfm")), "--out", &s(&root.join("map.csv")), "--coverage", &s(&root.join("coverage.csv")),
    ])?;
    cascade(&[
        "--threads", &th, "eval", "--pred", &s(&cloud), "--gt", &s(&scene.join("surface.ply")), "--cap", "50", "--out",
        &s(&root.join("cloud.csv")),
    ])?;
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("pfm" | "ply" | "csv")) {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).map_err(|e| e.to_string())?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn criterion_11() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<(usize, Vec<(String, Vec<u8>)>)> = [1usize, 1, 4]
        .iter()
        .enumerate()
        .map(|(i, &threads)| {
            let root = dir.path().join(format!("run{i}"));
            std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
            Ok((threads, pipeline(&root, threads)?))
        })
        .collect::<Result<_, String>>()?;
    let reference = &runs[0].1;
    ensure(reference.len() > 20, format!("only {} output files", reference.len()))?;
    for (threads, files) in &runs[1..] {
        ensure(files.len() == reference.len(), format!("file count differs at {threads} threads"))?;
        for ((name_a, a), (name_b, b)) in reference.iter().zip(files) {
            ensure(name_a == name_b && a == b, format!("{name_a} differs at {threads} threads"))?;
        }
    }
    Ok(format!(
        "{} PFM/PLY/CSV files byte-identical over runs at 1, 1 and 4 threads; {:.1} s",
        reference.len(),
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 12. I/O round trips

/// Minimal PLY decoder written against the format description only:
/// vertex element, float/uchar properties, ascii or binary little-endian.
fn decode_ply(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or("no end_header")?
        + 11;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| e.to_string())?;
    let mut binary = false;
    let mut count = 0usize;
    let mut props: Vec<(String, String)> = Vec::new();
    for line in header.lines() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["element", "vertex", n] => count = n.parse().map_err(|_| "bad count")?,
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let mut rows = Vec::with_capacity(count);
    if binary {
        let mut pos = end;
        for _ in 0..count {
            let mut row = Vec::new();
            for (ty, _) in &props {
                match ty.as_str() {
                    "float" => {
                        let b: [u8; 4] = bytes[pos..pos + 4].try_into().map_err(|_| "short file")?;
                        row.push(f32::from_le_bytes(b) as f64);
                        pos += 4;
                    }
                    "uchar" => {
                        row.push(bytes[pos] as f64);
                        pos += 1;
                    }
                    other => return Err(format!("type {other}")),
                }
            }
            rows.push(row);
        }
    } else {
        let body = std::str::from_utf8(&bytes[end..]).map_err(|e| e.to_string())?;
        for line in body.lines().take(count) {
            rows.push(line.split_whitespace().map(|v| v.parse::<f64>().unwrap()).collect());
        }
    }
    Ok((props.into_iter().map(|p| p.1).collect(), rows))
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1212);

    let mut cam_err: f64 = 0.0;
    for i in 0..100 {
        let rot = Rotation3::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let center = Vector3::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
        let k = CameraIntrinsics::with_skew(
            rng.random_range(100.0..3000.0),
            rng.random_range(100.0..3000.0),
            rng.random_range(0.0..2000.0),
            rng.random_range(0.0..1500.0),
            rng.random_range(-1.0..1.0),
        )
        .unwrap();
        let cam = Camera::new(
            k,
            CameraPose::from_center(*rot.matrix(), center).unwrap(),
            rng.random_range(0.1..1000.0),
            rng.random_range(0.01..10.0),
        )
        .unwrap();
        let p = dir.path().join(format!("{i}_cam.txt"));
        write_cam(&p, &cam).map_err(|e| e.to_string())?;
        let back = read_cam(&p).map_err(|e| e.to_string())?;
        let diffs = [
            (cam.pose.rotation() - back.pose.rotation()).abs().max(),
            (cam.pose.translation() - back.pose.translation()).abs().max(),
            (cam.intrinsics.matrix() - back.intrinsics.matrix()).abs().max(),
            (cam.depth_min - back.depth_min).abs(),
            (cam.depth_interval - back.depth_interval).abs(),
        ];
        cam_err = diffs.iter().fold(cam_err, |a, &b| a.max(b));
    }
    ensure(cam_err < 1e-6, format!("camera round trip deviation {cam_err:.3e}"))?;

    let mut data: Vec<f32> = (0..97 * 61).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
    data.extend([0.0, -0.0, f32::MIN_POSITIVE, f32::MAX, -1.5, f32::INFINITY, f32::NEG_INFINITY]);
    let img = PfmImage {
        width: 97,
        height: 61 + 1,
        data: {
            data.resize(97 * 62, 1.0);
            data
        },
    };
    let p = dir.path().join("x.pfm");
    write_pfm(&p, &img).map_err(|e| e.to_string())?;
    let back = read_pfm(&p).map_err(|e| e.to_string())?;
    let exact = back.width == img.width
        && back.height == img.height
        && back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(exact, "PFM round trip is not bit-exact")?;

    let n = 500;
    let cloud = PointCloud {
        points: (0..n)
            .map(|_| Vector3::new(rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3), rng.random_range(0.0..1e4)))
            .collect(),
        colors: Some((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()),
        normals: Some((0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize()).collect()),
    };
    let mut ply_err: f64 = 0.0;
    for binary in [true, false] {
        let p = dir.path().join(format!("c{binary}.ply"));
        write_ply(&cloud, &p, binary).map_err(|e| e.to_string())?;
        let (names, rows) = decode_ply(&std::fs::read(&p).map_err(|e| e.to_string())?)?;
        let ours = read_ply(&p).map_err(|e| e.to_string())?;
        ensure(rows.len() == n && ours.len() == n, "point count differs")?;
        let col = |name: &str| names.iter().position(|x| x == name).ok_or(format!("missing property {name}"));
        let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
        let (inx, ir) = (col("nx")?, col("red")?);
        // binary stores f32 exactly; ascii keeps six significant digits
        let tol = |v: f64| if binary { 0.0 } else { 1e-5 * v.abs().max(1e-3) };
        for (i, row) in rows.iter().enumerate() {
            let p = cloud.points[i];
            for (k, idx) in [ix, iy, iz].into_iter().enumerate() {
                let expect = p[k] as f32 as f64;
                let err = (row[idx] - expect).abs();
                ensure(err <= tol(expect), format!("point {i} coordinate {k}"))?;
                ensure(row[idx] == ours.points[i][k], format!("decoders disagree at point {i}"))?;
                ply_err = ply_err.max(err);
            }
            let nrm = cloud.normals.as_ref().unwrap()[i];
            ensure((row[inx] - nrm.x as f32 as f64).abs() <= tol(nrm.x), format!("normal {i}"))?;
            ensure(row[ir] == cloud.colors.as_ref().unwrap()[i][0] as f64, format!("color {i}"))?;
            ensure(ours.colors.as_ref().map(|c| c[i]) == Some(cloud.colors.as_ref().unwrap()[i]), format!("library color {i}"))?;
        }
    }
    Ok(format!(
        "100 cameras within {cam_err:.1e}; PFM {} samples bit-exact; PLY binary+ascii cross-decoded (max {ply_err:.1e})",
        img.data.len()
    ))
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {id:>2} {name}: {detail} [{secs:.1} s]");
            true
        }
        Err(detail) => {
            println!("FAIL {id:>2} {name}: {detail} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= report(1, "geometry exactness", criterion_1);
    ok &= report(2, "warping oracle", criterion_2);
    ok &= report(3, "schedule fidelity", criterion_3);
    let fixture = catch_unwind(mvs_fixture);
    match &fixture {
        Ok(f) => {
            ok &= report(4, "cascade benefit", || criterion_4(f));
            ok &= report(5, "cost-cell reduction", || criterion_5(f));
            ok &= report(6, "plane-budget comparison", || criterion_6(f));
            ok &= report(7, "hypothesis coverage", || criterion_7(f));
        }
        Err(_) => {
            for (id, name) in [(4, "cascade benefit"), (5, "cost-cell reduction"), (6, "plane-budget comparison"), (7, "hypothesis coverage")] {
                ok &= report(id, name, || Err("oracle-scene run failed".into()));
            }
        }
    }
    ok &= report(8, "stereo", criterion_8);
    ok &= report(9, "regression oracles", criterion_9);
    match &fixture {
        Ok(f) => ok &= report(10, "fusion", || criterion_10(f)),
        Err(_) => ok &= report(10, "fusion", || Err("oracle-scene run failed".into())),
    }
    ok &= report(11, "determinism", criterion_11);
    ok &= report(12, "i/o round trips", criterion_12);
    if !ok {
        std::process::exit(1);
    }
}
