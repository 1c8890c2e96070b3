//! Acceptance checks, one PASS/FAIL line each. Runs the full ablation ladder
//! (three seeds), so expect roughly half an hour on one core.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ds2net::ablation::{run_ablation, Ladder, RunResult};
use ds2net::gradsuite::run_suite;
use ds2net::metrics::Confusion;
use ds2net::selectors::{ddsm_gates, ddsm_prototype, dusm_fuse, dusm_impact_mask, Ddsm, Dusm};
use ds2net::synthdata::{Domain, GenSpec, SplitCounts};
use ds2net::trainer::{run, TrainData, SOURCE_TEST, TARGET_TEST};
use ds2net::{RunConfig, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Result<Outcome, String>;

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("gradient checks", gradient_checks),
        ("algebraic invariants", algebraic_invariants),
        ("supervised sanity", supervised_sanity),
        ("domain gap", domain_gap),
        ("ablation ladder", ablation_ladder),
        ("ablate determinism", ablate_determinism),
        ("resume equivalence", resume_equivalence),
        ("metric oracle", metric_oracle),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let o = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failed += usize::from(!o.pass);
        println!("{} {name}: {} [{:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_checks() -> Result<Outcome, String> {
    let start = Instant::now();
    let results = run_suite(20, 1e-5).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed(1e-4)).map(|r| r.name).collect();
    let end_to_end = results.iter().any(|r| r.name == "ddsm+dusm+head");
    let enough = results.iter().all(|r| r.draws >= 20);
    Ok(outcome(
        failing.is_empty() && end_to_end && enough && secs < 120.0,
        format!("{} families x 20 draws, worst rel err {worst:.2e} (< 1e-4), failing {failing:?}, {secs:.1}s (< 120s)", results.len()),
    ))
}

fn random<T: ds2net::tensor::Element>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64s(shape, &v).expect("shape matches")
}

/// Direct seven-loop convolution in f64 with zero padding.
fn naive_conv(x: &[f32], xs: [usize; 4], w: &[f32], ws: [usize; 4], b: &[f32], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = f64::from(b[o]);
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * cin + c) * k + ky) * k + kx;
                                acc += f64::from(x[xi]) * f64::from(w[wi]);
                            }
                        }
                    }
                    out[((ni * cout + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

fn algebraic_invariants() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut gate, mut rows, mut shift, mut conv) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for draw in 0..50u64 {
        let (n, c) = (rng.gen_range(1..4), [4, 8, 16][draw as usize % 3]);
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let scale = [0.1, 1.0, 10.0][draw as usize % 3];
        // Gates and masks in the training precision.
        let f_s: Tensor<f32> = random(&mut rng, &[n, c, h, w], scale);
        let f_t: Tensor<f32> = random(&mut rng, &[n, c, h, w], scale);
        let ddsm = Ddsm::new(draw, "ddsm", c, 2).map_err(err)?;
        let (v_s, v_t) = ddsm_gates(&ddsm_prototype(&f_s, &f_t, &ddsm).map_err(err)?, &ddsm).map_err(err)?;
        for (a, b) in v_s.data().iter().zip(v_t.data()) {
            gate = gate.max((f64::from(*a) + f64::from(*b) - 1.0).abs());
        }
        let dusm = Dusm::new(draw, "dusm", c, 2).map_err(err)?;
        let z = dusm_fuse(&f_s, &f_t, &dusm).map_err(err)?;
        for f in [&f_s, &f_t] {
            let m = dusm_impact_mask(f, &z).map_err(err)?;
            for row in m.data().chunks(c) {
                rows = rows.max((row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs());
            }
        }

        let x: Tensor<f64> = random(&mut rng, &[n, c, h], 5.0);
        let k = rng.gen_range(-50.0..50.0);
        let shifted = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v + k).collect()).map_err(err)?;
        for axis in 0..3 {
            let (p, q) = (x.softmax(axis).map_err(err)?, shifted.softmax(axis).map_err(err)?);
            for (a, b) in p.data().iter().zip(q.data()) {
                shift = shift.max((a - b).abs());
            }
        }

        let (k, stride, pad) = ([1, 3, 4][draw as usize % 3], 1 + draw as usize % 2, (draw as usize / 2) % 2);
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (ih, iw) = (rng.gen_range(k..k + 6), rng.gen_range(k..k + 6));
        let xi: Tensor<f32> = random(&mut rng, &[n, cin, ih, iw], 1.0);
        let wi: Tensor<f32> = random(&mut rng, &[cout, cin, k, k], 1.0);
        let bi: Tensor<f32> = random(&mut rng, &[cout], 1.0);
        let got = xi.conv2d(&wi, Some(&bi), stride, pad).map_err(err)?;
        let (want, shape) = naive_conv(xi.data(), [n, cin, ih, iw], wi.data(), [cout, cin, k, k], bi.data(), stride, pad);
        if got.shape() != shape {
            return Ok(outcome(false, format!("conv shape {:?} vs oracle {shape:?}", got.shape())));
        }
        for (a, b) in got.data().iter().zip(&want) {
            conv = conv.max((f64::from(*a) - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        gate < 1e-6 && rows < 1e-6 && shift < 1e-12 && conv < 1e-5 && secs < 60.0,
        format!(
            "50 draws: |v_s+v_t-1| {gate:.1e} (< 1e-6), |mask row sum - 1| {rows:.1e} (< 1e-6), \
             softmax shift {shift:.1e} (< 1e-12), conv vs naive {conv:.1e} (< 1e-5), {secs:.1}s (< 60s)"
        ),
    ))
}

/// `(source-test IoU, target-test IoU, seconds)` of a supervised run; the
/// A-trained run is shared by two checks.
fn supervised(source: Domain, target: Domain) -> Result<(f64, f64, f64), String> {
    static A_TRAINED: OnceLock<Result<(f64, f64, f64), String>> = OnceLock::new();
    if source == Domain::A {
        return A_TRAINED.get_or_init(|| supervised_run(source, target)).clone();
    }
    supervised_run(source, target)
}

fn supervised_run(source: Domain, target: Domain) -> Result<(f64, f64, f64), String> {
    let cfg = RunConfig {
        run_id: format!("supervised-{source}"),
        iterations: 3000,
        source_domain: source,
        target_domain: target,
        log_interval: 0,
        ..RunConfig::source_only()
    };
    let data = TrainData::generate(&GenSpec::default(), SplitCounts::default(), 0, &cfg).map_err(err)?;
    let start = Instant::now();
    let out = run(cfg, &data).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let iou = |set| out.final_metrics(set).map(|m| m.iou_lesion).ok_or(format!("no {set} row"));
    Ok((iou(SOURCE_TEST)?, iou(TARGET_TEST)?, secs))
}

fn supervised_sanity() -> Result<Outcome, String> {
    let (a_on_a, _, secs) = supervised(Domain::A, Domain::B)?;
    Ok(outcome(
        a_on_a >= 0.90 && secs < 600.0,
        format!("source-only, 3000 iterations: A-test lesion IoU {a_on_a:.4} (>= 0.90), {secs:.0}s (< 600s)"),
    ))
}

fn domain_gap() -> Result<Outcome, String> {
    let (_, a_on_b, _) = supervised(Domain::A, Domain::B)?;
    let (b_on_b, _, _) = supervised(Domain::B, Domain::A)?;
    let gap = 100.0 * (b_on_b - a_on_b);
    Ok(outcome(
        gap >= 10.0,
        format!("B-test lesion IoU: A-trained {a_on_b:.4}, B-trained {b_on_b:.4}; gap {gap:.1} points (>= 10)"),
    ))
}

fn ablation_ladder() -> Result<Outcome, String> {
    let base = RunConfig {
        iterations: 1500,
        log_interval: 0,
        ..RunConfig::default()
    };
    let ladder = Ladder::standard(base);
    let data = TrainData::generate(&GenSpec::default(), SplitCounts::default(), 0, &ladder.base).map_err(err)?;
    let seeds = [0, 1, 2];
    let start = Instant::now();
    let report = run_ablation(&ladder, &data, &seeds, &mut |row, seed, r| {
        eprintln!("  ladder {row} seed {seed}: {r:?}");
    })
    .map_err(err)?;
    let secs = start.elapsed().as_secs_f64();

    let mut means = Vec::new();
    for row in &report.rows {
        if row.failed() {
            return Ok(outcome(false, format!("row {} has failed runs", row.name)));
        }
        means.push(100.0 * row.mean_target_iou().ok_or("empty row")?);
    }
    let [wo, sym, fa, ddsm, full] = means[..] else {
        return Err(format!("expected 5 rows, got {}", means.len()));
    };
    let per_seed = |i: usize| -> Vec<f64> {
        report.rows[i]
            .runs
            .iter()
            .map(|(_, r)| match r {
                RunResult::Done { target_iou, .. } => *target_iou,
                RunResult::Failed(_) => f64::NAN,
            })
            .collect()
    };
    let (fa_s, ddsm_s, full_s) = (per_seed(2), per_seed(3), per_seed(4));
    let monotone = (0..seeds.len()).filter(|&k| fa_s[k] <= ddsm_s[k] && ddsm_s[k] <= full_s[k]).count();

    let conditions = [
        ((wo - sym).abs() <= 2.0, "|w/o DA - +Symmetric| <= 2"),
        (fa >= wo + 3.0, "+FA >= w/o DA + 3"),
        (ddsm >= fa, "+DDSM >= +FA"),
        (full >= ddsm, "+DUSM >= +DDSM"),
        (full >= wo + 5.0, "+DUSM >= w/o DA + 5"),
        (monotone >= 2, "monotone in >= 2 of 3 seeds"),
        (secs < 2700.0, "runtime < 45 min"),
    ];
    let broken: Vec<&str> = conditions.iter().filter(|(ok, _)| !ok).map(|(_, s)| *s).collect();
    Ok(outcome(
        broken.is_empty(),
        format!(
            "mean target IoU w/o DA {wo:.2}, +Symmetric {sym:.2}, +FA {fa:.2}, +DDSM {ddsm:.2}, +DUSM {full:.2}; \
             monotone seeds {monotone}/3; {:.1} min; unmet {broken:?}",
            secs / 60.0
        ),
    ))
}

fn ds2net(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_ds2net"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("ds2net {args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn small_dataset(root: &Path) -> Result<std::path::PathBuf, String> {
    let data = root.join("data");
    ds2net(&["gen-data", "--out", p(&data), "--train-a", "12", "--test-a", "6", "--train-b", "12", "--test-b", "6"])?;
    Ok(data)
}

fn ablate_determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = small_dataset(dir.path())?;
    let mut csvs = Vec::new();
    for out in ["first", "second"] {
        let out = dir.path().join(out);
        ds2net(&["ablate", "--data", p(&data), "--seeds", "0,1,2", "--iterations", "12", "--out", p(&out)])?;
        csvs.push(fs::read(out.join("ablation.csv")).map_err(err)?);
    }
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count();
    Ok(outcome(
        csvs[0] == csvs[1] && rows > 1,
        format!("5 rows x 3 seeds x 12 iterations, CSVs of {} bytes / {rows} lines bitwise equal: {}", csvs[0].len(), csvs[0] == csvs[1]),
    ))
}

fn resume_equivalence() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = small_dataset(dir.path())?;
    let cfg = dir.path().join("config.json");
    let config = RunConfig {
        iterations: 40,
        eval_interval: 10,
        log_interval: 1,
        ..RunConfig::default()
    };
    fs::write(&cfg, config.to_json()).map_err(err)?;
    let (whole, parts) = (dir.path().join("whole"), dir.path().join("parts"));
    ds2net(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&whole)])?;
    ds2net(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&parts), "--stop-at", "20"])?;
    let ckpt = parts.join("checkpoint.bin");
    ds2net(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&parts), "--resume", p(&ckpt)])?;
    let mut unequal = Vec::new();
    for f in ["metrics.csv", "losses.csv", "checkpoint.bin"] {
        if fs::read(whole.join(f)).map_err(err)? != fs::read(parts.join(f)).map_err(err)? {
            unequal.push(f);
        }
    }
    Ok(outcome(
        unequal.is_empty(),
        format!("full model, 40 iterations interrupted at 20: metrics, losses and final checkpoint bitwise equal; differing {unequal:?}"),
    ))
}

/// IoU from explicit per-pixel set membership; an empty union counts as 1.
fn oracle_iou(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p == class && **g == class).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p == class || **g == class).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn metric_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for i in 0..25 {
        // Include empty and full masks among the draws.
        let density = [0.0, 1.0, 0.5, 0.1, 0.9][i % 5];
        let gt_density = rng.gen_range(0.0..1.0);
        let mut mask = |d: f64| -> Vec<u8> { (0..64).map(|_| u8::from(rng.gen_bool(d))).collect() };
        let (pred, gt) = (mask(density), mask(gt_density));
        let mut c = Confusion::new();
        c.accumulate(&pred, &gt).map_err(err)?;
        let (bg, fg) = (oracle_iou(&pred, &gt, 0), oracle_iou(&pred, &gt, 1));
        let same = c.iou(0).map_err(err)?.value == bg && c.iou(1).map_err(err)?.value == fg && c.miou().map_err(err)? == (bg + fg) / 2.0;
        mismatches += usize::from(!same);
    }
    Ok(outcome(mismatches == 0, format!("25 random 8x8 pairs, {mismatches} exact mismatches")))
}
