//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Trained artifacts are cached under `UNLEARN_ACCEPTANCE_DIR` (default: the
//! cargo target tmp dir), so only the first run pays for pretraining and
//! identification. `ACCEPTANCE_ONLY=1,2,9` restricts the run; with
//! `ACCEPTANCE_STRICT=1` any failure makes the process exit non-zero.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearn_core::config::RunConfig;
use unlearn_core::eval::{build_seconds, EvalReport, Pipeline, Scenario};
use unlearn_core::linalg::{reconstruct, svd, Matrix, DEFAULT_SVD_TOL};
use unlearn_core::model::{init_random, FreezeMask, ModelConfig};
use unlearn_core::persistence::{
    load_discriminated, load_model, load_subspace, save_discriminated, save_model, save_subspace,
};
use unlearn_core::subspace::{discriminate_matrix, similarity, DiscriminationConfig};
use unlearn_core::tasks::{Example, TaskKind};
use unlearn_core::{Error, FormatError};

type Outcome = Result<(bool, String), String>;

fn err(e: Error) -> String {
    e.to_string()
}

fn gaussian_low_rank(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix {
    let f = random_matrix(rng, n, k);
    let g = random_matrix(rng, k, n);
    naive_matmul(&f, &g)
}

fn max_cross(a: &Matrix, b: &Matrix) -> f64 {
    naive_matmul(&naive_transpose(a), b).max_abs()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for k in [2, 4, 8] {
        for _ in 0..50 {
            let ti = gaussian_low_rank(&mut rng, 64, k);
            let to = gaussian_low_rank(&mut rng, 64, k);
            let d = discriminate_matrix(&ti, &to, &DiscriminationConfig::default()).map_err(err)?;
            let fo = svd(&to, DEFAULT_SVD_TOL).map_err(err)?;
            let fd = svd(&d.matrix, DEFAULT_SVD_TOL).map_err(err)?;
            worst = worst.max(max_cross(&fo.u, &fd.u)).max(max_cross(&fo.v, &fd.v));
            pairs += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-8 && secs < 60.0,
        format!("{pairs} pairs, max |inner product| {worst:.2e} (limit 1e-8), {secs:.2}s (limit 60s)"),
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst_s, mut worst_r) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let a = random_matrix(&mut rng, 16, 16);
        let f = svd(&a, DEFAULT_SVD_TOL).map_err(err)?;
        let eig = symmetric_eigenvalues(&naive_matmul(&naive_transpose(&a), &a));
        if f.rank() != 16 {
            return Ok((false, format!("rank {} for a random 16x16 matrix", f.rank())));
        }
        for (s, e) in f.s.iter().zip(&eig) {
            worst_s = worst_s.max((s - e.max(0.0).sqrt()).abs());
        }
        let back = reconstruct(&f).map_err(err)?;
        worst_r = worst_r.max(frob_diff(&a, &back) / frob(&a));
    }
    Ok((
        worst_s <= 1e-6 && worst_r <= 1e-8,
        format!("singular value error {worst_s:.2e} (limit 1e-6), relative reconstruction error {worst_r:.2e} (limit 1e-8)"),
    ))
}

fn criterion_3() -> Outcome {
    const EPS: f64 = 1e-5;
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        context_len: 12,
        seed: 0,
    };
    let w = init_random(&cfg, 3).map_err(err)?;
    let data = vec![
        Example { x: vec![1, 4, 7, 2], y: vec![9, 3, 2] },
        Example { x: vec![1, 11, 5, 0, 6], y: vec![6, 2] },
    ];
    let (_, grads) = w.loss_and_grads(&data, &FreezeMask::all_unfrozen(&w)).map_err(err)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for g in w.groups() {
        let analytic = grads.get(g).ok_or(format!("no gradient for {g}"))?;
        for (ti, t) in analytic.iter().enumerate() {
            for idx in 0..t.as_slice().len() {
                let mut plus = w.clone();
                plus.tensors_mut(g)[ti].as_mut_slice()[idx] += EPS;
                let mut minus = w.clone();
                minus.tensors_mut(g)[ti].as_mut_slice()[idx] -= EPS;
                let fd = (plus.loss(&data).map_err(err)? - minus.loss(&data).map_err(err)?) / (2.0 * EPS);
                let a = t.as_slice()[idx];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    Ok((
        worst <= 1e-4,
        format!("{checked} parameters, worst relative error {worst:.2e} (limit 1e-4)"),
    ))
}

fn retention(r: &EvalReport, t: TaskKind) -> Result<f64, String> {
    r.score(t)
        .and_then(|s| s.retention)
        .ok_or_else(|| format!("no retention for {t} (base accuracy is zero)"))
}

struct Scenarios {
    pipe: Pipeline,
    reports: BTreeMap<&'static str, EvalReport>,
}

impl Scenarios {
    fn get(&mut self, s: Scenario) -> Result<EvalReport, String> {
        if let Some(r) = self.reports.get(s.name()) {
            return Ok(r.clone());
        }
        let r = self.pipe.run_scenario(s).map_err(err)?;
        println!("{}", r.render_table());
        self.reports.insert(s.name(), r.clone());
        Ok(r)
    }
}

fn criterion_4(sc: &mut Scenarios) -> Outcome {
    let r = sc.get(Scenario::UnlearnDissimilar)?;
    let cfg = sc.pipe.config().clone();
    let target = cfg.scenario.dissimilar_target;
    let mut build = build_seconds(&sc.pipe.base_path(None));
    for t in sc.pipe.tasks() {
        let b = build_seconds(&sc.pipe.subspace_path(None, t, cfg.train.k));
        build = build.zip(b).map(|(x, y)| x + y);
    }
    let total = build.map(|b| b + r.wall_clock_secs);
    let sort = retention(&r, target)?;
    let mut ok = sort <= 0.30;
    let mut detail = format!("{target} retains {sort:.3} (limit 0.30)");
    for t in [TaskKind::Copy, TaskKind::Lookup, TaskKind::Add] {
        let x = retention(&r, t)?;
        ok &= x >= 0.90;
        detail += &format!(", {t} {x:.3}");
    }
    detail += " (each at least 0.90)";
    match total {
        Some(secs) => {
            ok &= secs <= 1800.0;
            detail += &format!(", pipeline {:.1} min (limit 30)", secs / 60.0);
        }
        None => {
            ok = false;
            detail += ", pipeline time unknown (cached artifacts carry no build time)";
        }
    }
    Ok((ok, detail))
}

fn criterion_5(sc: &mut Scenarios) -> Outcome {
    let r = sc.get(Scenario::UnlearnSimilar)?;
    let chain = retention(&r, TaskKind::Chain)?;
    let add = retention(&r, TaskKind::Add)?;
    Ok((
        chain <= 0.40 && add >= 0.85,
        format!("chain retains {chain:.3} (limit 0.40), add retains {add:.3} (at least 0.85)"),
    ))
}

fn criterion_6(sc: &mut Scenarios) -> Outcome {
    let with_d = retention(&sc.get(Scenario::UnlearnSimilar)?, TaskKind::Add)?;
    let without = retention(&sc.get(Scenario::UnlearnNoDiscrimination)?, TaskKind::Add)?;
    let ga = sc.get(Scenario::GradientAscentBaseline)?;
    let ga_add = retention(&ga, TaskKind::Add)?;
    let ga_chain = retention(&ga, TaskKind::Chain)?;
    Ok((
        with_d - without >= 0.15 && with_d - ga_add >= 0.10,
        format!(
            "add retention with discrimination {with_d:.3}, without {without:.3} (gap {:.3}, at least 0.15), \
             gradient ascent {ga_add:.3} (gap {:.3}, at least 0.10; its chain retention {ga_chain:.3})",
            with_d - without,
            with_d - ga_add
        ),
    ))
}

fn criterion_7(sc: &mut Scenarios) -> Outcome {
    let r = sc.get(Scenario::Learn)?;
    let task = r.plan.target;
    let learned = r.score(task).ok_or("no score for the learned task")?.edited;
    let tuned = r
        .baseline
        .as_ref()
        .and_then(|b| b.scores.iter().find(|s| s.task == task))
        .ok_or("no fine-tune baseline")?
        .edited;
    let mut ok = (learned - tuned).abs() <= 0.05;
    let mut detail = format!("{task}: edited {learned:.3} vs fine-tuned {tuned:.3} (within 0.05)");
    for s in r.scores.iter().filter(|s| s.task != task) {
        let x = s.retention.ok_or(format!("no retention for {}", s.task))?;
        ok &= x >= 0.95;
        detail += &format!(", {} {x:.3}", s.task);
    }
    detail += " (each at least 0.95)";
    Ok((ok, detail))
}

fn criterion_8(sc: &mut Scenarios) -> Outcome {
    let reports = sc.pipe.rank_sweep(&[1, 4, 8, 16]).map_err(err)?;
    let by_k: BTreeMap<usize, (f64, f64)> = reports
        .iter()
        .map(|r| Ok((r.plan.k, (retention(r, TaskKind::Chain)?, retention(r, TaskKind::Add)?))))
        .collect::<Result<_, String>>()?;
    let spread = |f: fn(&(f64, f64)) -> f64| {
        let xs: Vec<f64> = [4, 8, 16].iter().map(|k| f(&by_k[k])).collect();
        xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
    };
    let target_spread = spread(|p| p.0);
    let similar_spread = spread(|p| p.1);
    let (c1, a1) = by_k[&1];
    let (c8, a8) = by_k[&8];
    let k1_worse = c1 > c8 || a1 < a8;
    let rows: Vec<String> = by_k
        .iter()
        .map(|(k, (c, a))| format!("k={k}: chain {c:.3} add {a:.3}"))
        .collect();
    Ok((
        target_spread <= 0.05 && similar_spread <= 0.05 && k1_worse,
        format!(
            "{}; spread over k in 4,8,16: chain {target_spread:.3}, add {similar_spread:.3} (each at most 0.05); \
             k=1 worse than k=8: {k1_worse}",
            rows.join(", ")
        ),
    ))
}

fn criterion_9(sc: &mut Scenarios) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut ti = Matrix::zeros(16, 16);
        let mut to = Matrix::zeros(16, 16);
        for i in 0..8 {
            for j in 0..8 {
                ti.row_mut(i)[j] = rng.gen_range(-1.0..1.0);
                to.row_mut(i + 8)[j + 8] = rng.gen_range(-1.0..1.0);
            }
        }
        let d = discriminate_matrix(&ti, &to, &DiscriminationConfig::default()).map_err(err)?;
        worst = worst.max(frob_diff(&d.matrix, &ti) / frob(&ti));
    }
    let k = sc.pipe.config().train.k;
    let tol = sc.pipe.config().discrimination.tol;
    let add = sc.pipe.subspace(None, TaskKind::Add, k).map_err(err)?;
    let chain = sc.pipe.subspace(None, TaskKind::Chain, k).map_err(err)?;
    let copy = sc.pipe.subspace(None, TaskKind::Copy, k).map_err(err)?;
    let s_chain = similarity(&add, &chain, tol).map_err(err)?;
    let s_copy = similarity(&add, &copy, tol).map_err(err)?;
    Ok((
        worst <= 1e-10 && s_chain > s_copy,
        format!(
            "disjoint-support relative change {worst:.2e} (limit 1e-10); similarity add/chain {s_chain:.4} vs add/copy {s_copy:.4}"
        ),
    ))
}

fn criterion_10(sc: &mut Scenarios) -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let k = sc.pipe.config().train.k;
    let base = sc.pipe.base_model(None).map_err(err)?;
    let sub = sc.pipe.subspace(None, TaskKind::Chain, k).map_err(err)?;
    let plan = sc.pipe.plan(Scenario::UnlearnSimilar);
    let disc = sc.pipe.edit_delta(None, &plan).map_err(err)?;
    let p = |n: &str| dir.path().join(n);
    let mut identical = true;
    save_model(&p("m1"), &base).map_err(err)?;
    save_model(&p("m2"), &load_model(&p("m1")).map_err(err)?).map_err(err)?;
    save_subspace(&p("s1"), &sub).map_err(err)?;
    save_subspace(&p("s2"), &load_subspace(&p("s1")).map_err(err)?).map_err(err)?;
    save_discriminated(&p("d1"), &disc).map_err(err)?;
    save_discriminated(&p("d2"), &load_discriminated(&p("d1")).map_err(err)?).map_err(err)?;
    for (a, b) in [("m1", "m2"), ("s1", "s2"), ("d1", "d2")] {
        identical &= fs::read(p(a)).map_err(|e| e.to_string())? == fs::read(p(b)).map_err(|e| e.to_string())?;
    }
    identical &= load_model(&p("m1")).map_err(err)? == base;
    identical &= load_subspace(&p("s1")).map_err(err)? == sub;
    identical &= load_discriminated(&p("d1")).map_err(err)? == disc;

    let bytes = fs::read(p("m1")).map_err(|e| e.to_string())?;
    let probe = |b: &[u8]| -> Option<FormatError> {
        fs::write(p("bad"), b).ok()?;
        match load_model(&p("bad")) {
            Err(Error::Format(f)) => Some(f),
            _ => None,
        }
    };
    let mut b = bytes.clone();
    b[..4].copy_from_slice(b"XXXX");
    let magic = matches!(probe(&b), Some(FormatError::BadMagic { .. }));
    let mut b = bytes.clone();
    b[4] = b[4].wrapping_add(1);
    let version = matches!(probe(&b), Some(FormatError::UnsupportedVersion { .. }));
    let bounds = matches!(probe(&bytes[..bytes.len() - 1]), Some(FormatError::ManifestBounds(_)));
    let header = matches!(probe(&bytes[..7]), Some(FormatError::TruncatedHeader { .. }));
    let secs = started.elapsed().as_secs_f64();
    Ok((
        identical && magic && version && bounds && header && secs < 10.0,
        format!(
            "byte-identical roundtrip {identical}; named errors: magic {magic}, version {version}, \
             bounds {bounds}, header {header}; {secs:.2}s (limit 10s)"
        ),
    ))
}

fn acceptance_config() -> RunConfig {
    let dir = std::env::var_os("UNLEARN_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let mut c = RunConfig::default();
    c.paths.artifact_dir = dir.join("artifacts");
    c.paths.run_dir = dir.join("runs");
    c
}

fn main() -> ExitCode {
    // cargo passes libtest flags such as `--list`; this harness has no tests to list.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();

    let mut sc = None;
    let mut results = Vec::new();
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let started = Instant::now();
        let outcome = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            _ => {
                if sc.is_none() {
                    match Pipeline::new(acceptance_config()) {
                        Ok(pipe) => {
                            sc = Some(Scenarios {
                                pipe,
                                reports: BTreeMap::new(),
                            })
                        }
                        Err(e) => {
                            results.push((n, Err(e.to_string())));
                            continue;
                        }
                    }
                }
                let sc = sc.as_mut().expect("pipeline initialised");
                match n {
                    4 => criterion_4(sc),
                    5 => criterion_5(sc),
                    6 => criterion_6(sc),
                    7 => criterion_7(sc),
                    8 => criterion_8(sc),
                    9 => criterion_9(sc),
                    _ => criterion_10(sc),
                }
            }
        };
        let line = match &outcome {
            Ok((true, d)) => format!("criterion {n}: PASS ({d})"),
            Ok((false, d)) => format!("criterion {n}: FAIL ({d})"),
            Err(e) => format!("criterion {n}: FAIL (error: {e})"),
        };
        println!("{line} [{:.1}s]", started.elapsed().as_secs_f64());
        results.push((n, outcome));
    }
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, o)| !matches!(o, Ok((true, _))))
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
    );
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
