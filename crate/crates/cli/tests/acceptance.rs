//! Acceptance gate. Prints one `PASS`/`FAIL`/`SKIP` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The synthetic end-to-end run and the ablations train full-size models
//! and take far longer than the rest; they run only with
//! `REFVOS_ACCEPTANCE_FULL=1` and are reported as `SKIP` otherwise.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use refvos::ablation::{run_ablation, BASELINE};
use refvos::augmentation::{
    run_crea, CandidateDescription, ChatService, CodebookFeaturizer, CreaRequest, EmbedService, VideoEvidence,
    ACCEPT_THRESHOLD,
};
use refvos::encoders::{bidir_select, SelectionConfig, SelectionMerge};
use refvos::metrics::{evaluate_masks, evaluate_model, ClipMasks, DEFAULT_BOUNDARY_TOL};
use refvos::mil::{make_proposals, mil_scores, proposal_features, similarity_maps, ClsWeights, MilConfig};
use refvos::model::{Model, SampleInput};
use refvos::numeric::{softmax_rows, GradCheckOptions, Tape, Tensor, COSINE_DELTA};
use refvos::objectives::{fuse_positive_predictions, seg_loss, temporal_rank_loss, PseudoMask};
use refvos::rng;
use refvos::schema::{AugmentedExpressionSet, ClipSample};
use refvos::synth::{generate_clip, generate_example, Codebook, WorldSpec, TEST_INDEX_OFFSET};
use refvos::trainer::{initial_checkpoint, train, EpochRow, TrainConfig, TrainOptions};
use refvos::verify::{run_suite, tiny_network};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gauss(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn mat(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, gauss(r, rows * cols)).unwrap()
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = run_suite(20_260_101, 20, 3, GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {}×{} {:.1e}", r.term, r.instances, r.criterion, r.max_rel_error.max(r.normwise_error)))
        .collect();
    for r in &rows {
        ensure(r.passed, || format!("{} failed: {}", r.term, r.diagnostic.clone().unwrap_or_default()))?;
        ensure(r.instances >= 20 || r.term == "network", || format!("{} ran {} instances", r.term, r.instances))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{} in {elapsed:.1?}", summary.join("; ")))
}

// ---------------------------------------------------------------------- MIL

struct MilInstance {
    v: Tensor,
    fz: Tensor,
    w_smt: Tensor,
    b_cls: Vec<f64>,
    theta: f64,
    sim_scale: f64,
    logit_scale: f64,
}

fn mil_instance(seed: u64, max_e: usize, max_nv: usize) -> MilInstance {
    let mut r = rng::stream(seed, "acceptance/mil", 0);
    let e = r.random_range(2..=max_e);
    let nv = r.random_range(1..=max_nv);
    let c = r.random_range(2..=5);
    let spread = [0.3, 1.0, 4.0][r.random_range(0..3)];
    let mut v = mat(&mut r, nv, c);
    v.data_mut().iter_mut().for_each(|x| *x *= spread);
    MilInstance {
        v,
        fz: mat(&mut r, e, c),
        w_smt: mat(&mut r, c, e),
        b_cls: gauss(&mut r, e),
        theta: r.random_range(0.05..0.95),
        sim_scale: 1.0 / (c as f64).sqrt(),
        logit_scale: [1.0, 1.0 / (c as f64).sqrt(), 5.0][r.random_range(0..3)],
    }
}

/// (U_cls, U_smt, U_fuse, y, empty proposals) through the library pipeline.
fn mil_library(m: &MilInstance) -> (Tensor, Tensor, Tensor, Vec<f64>, usize) {
    let tape = Tape::new();
    let v = tape.param(m.v.clone());
    let fz = tape.param(m.fz.clone());
    let s = similarity_maps(v, fz, m.sim_scale).unwrap();
    let proposals = make_proposals(&s.value(), m.theta).unwrap();
    let r = proposal_features(v, &proposals).unwrap();
    let b = tape.param(Tensor::vector(m.b_cls.clone()));
    let w = tape.param(m.w_smt.clone());
    let cfg = MilConfig { logit_scale: m.logit_scale, cls_flow: true, smt_flow: true };
    let out = mil_scores(r, ClsWeights::Tied(fz), b, w, cfg).unwrap();
    (
        (*out.u_cls.value()).clone(),
        (*out.u_smt.value()).clone(),
        (*out.u_fuse.value()).clone(),
        out.y.value().data().to_vec(),
        proposals.empty.iter().filter(|b| **b).count(),
    )
}

/// The same quantities written out loop by loop.
fn mil_reference(m: &MilInstance) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let (nv, c) = (m.v.rows(), m.v.cols());
    let e = m.fz.rows();
    let v = |j: usize, i: usize| m.v.data()[j * c + i];
    let fz = |k: usize, i: usize| m.fz.data()[k * c + i];
    // Proposal features: mean of the patches whose σ(s) exceeds θ.
    let mut r = vec![vec![0.0; c]; e];
    for (k, rk) in r.iter_mut().enumerate() {
        let mut members = Vec::new();
        for j in 0..nv {
            let mut s = 0.0;
            for i in 0..c {
                s += v(j, i) * fz(k, i);
            }
            s *= m.sim_scale;
            if 1.0 / (1.0 + (-s).exp()) > m.theta {
                members.push(j);
            }
        }
        for &j in &members {
            for i in 0..c {
                rk[i] += v(j, i) / members.len() as f64;
            }
        }
    }
    let mut cls = vec![vec![0.0; e]; e];
    let mut smt = vec![vec![0.0; e]; e];
    for n in 0..e {
        for k in 0..e {
            let (mut a, mut b) = (0.0, 0.0);
            for i in 0..c {
                a += r[n][i] * fz(k, i);
                b += r[n][i] * m.w_smt.data()[i * e + k];
            }
            cls[n][k] = a * m.logit_scale + m.b_cls[k];
            smt[n][k] = b * m.logit_scale;
        }
    }
    for row in cls.iter_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
    }
    for k in 0..e {
        let mx = (0..e).map(|n| smt[n][k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..e).map(|n| (smt[n][k] - mx).exp()).sum();
        for row in smt.iter_mut() {
            row[k] = (row[k] - mx).exp() / z;
        }
    }
    let fuse: Vec<Vec<f64>> = (0..e).map(|n| (0..e).map(|k| cls[n][k] * smt[n][k]).collect()).collect();
    let y = (0..e).map(|k| (0..e).map(|n| fuse[n][k]).sum()).collect();
    (cls, smt, fuse, y)
}

fn mil_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut empty = 0;
    let n = 2000;
    for seed in 0..n {
        let m = mil_instance(seed, 4, 6);
        let (cls, smt, fuse, y, n_empty) = mil_library(&m);
        let (rc, rs, rf, ry) = mil_reference(&m);
        let e = m.fz.rows();
        for (lib, reference) in [(&cls, &rc), (&smt, &rs), (&fuse, &rf)] {
            for a in 0..e {
                for b in 0..e {
                    worst = worst.max((lib.get2(a, b) - reference[a][b]).abs());
                }
            }
        }
        for (a, b) in y.iter().zip(&ry) {
            worst = worst.max((a - b).abs());
        }
        empty += n_empty;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("{n} instances (P+N ≤ 4, N_v ≤ 6, {empty} empty proposals), max deviation {worst:.1e}"))
}

fn mil_bounds() -> Outcome {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..10_000 {
        let m = mil_instance(1_000_000 + seed, 8, 12);
        let (_, _, _, y, _) = mil_library(&m);
        for v in y {
            ensure(v.is_finite() && (0.0..=1.0).contains(&v), || format!("seed {seed}: y = {v}"))?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok(format!("10000 instances, y ∈ [{lo:.3e}, {hi:.6}]"))
}

// --------------------------------------------------------------- structural

fn softmax_normalization() -> Outcome {
    let mut r = rng::stream(11, "acceptance/softmax", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (m, n) = (r.random_range(1..10), r.random_range(1..10));
        let scale = [1.0, 30.0, 700.0][r.random_range(0..3)];
        let mut x = mat(&mut r, m, n);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let rows = xv.row_softmax().unwrap().value();
        let cols = xv.col_softmax().unwrap().value();
        let plain = softmax_rows(&x);
        for i in 0..m {
            let s1: f64 = (0..n).map(|j| rows.get2(i, j)).sum();
            let s2: f64 = (0..n).map(|j| plain.get2(i, j)).sum();
            worst = worst.max((s1 - 1.0).abs()).max((s2 - 1.0).abs());
        }
        for j in 0..n {
            let s: f64 = (0..m).map(|i| cols.get2(i, j)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max |Σ − 1| = {worst:e}"))?;
    Ok(format!("500 matrices (logits up to ±~2000), max |Σ − 1| = {worst:.1e}"))
}

fn selection_saturation() -> Outcome {
    let mut r = rng::stream(12, "acceptance/select", 0);
    for case in 0..200 {
        let (nv, nl, c) = (r.random_range(1..20), r.random_range(1..8), r.random_range(2..9));
        let n_pad = if case % 2 == 0 { 0 } else { r.random_range(0..nl) };
        let pad_mask: Vec<bool> = (0..nl).map(|i| i < nl - n_pad).collect();
        let (v0, z0) = (mat(&mut r, nv, c), mat(&mut r, nl, c));
        let tape = Tape::new();
        let cfg = SelectionConfig { k_v: nv, k_z: nl, ..SelectionConfig::default() };
        let (v, z) = bidir_select(tape.param(v0.clone()), tape.param(z0.clone()), &pad_mask, &cfg).unwrap();
        for (a, b) in v.value().data().iter().zip(v0.data()) {
            ensure(*a == 2.0 * b, || format!("case {case}: v̌ ≠ 2v"))?;
        }
        let (zv, zc) = (z.value(), z0.cols());
        for (i, real) in pad_mask.iter().enumerate() {
            for j in 0..zc {
                let want = if *real { 2.0 * z0.get2(i, j) } else { z0.get2(i, j) };
                ensure(zv.get2(i, j) == want, || format!("case {case}: ž row {i} (real {real})"))?;
            }
        }
    }
    Ok("200 cases at K_V = N_v, K_Z = N_l: v̌ = 2v and ž = 2z on real tokens exactly, pads untouched".into())
}

fn tiny_examples(seed: u64, n: u64) -> (Model, refvos::params::ParamStore, Vec<SampleInput>, TrainConfig) {
    let (world, cfg) = tiny_network(seed);
    let model = Model::new(cfg.model_config(world.c)).unwrap();
    let store = model.init_params(seed);
    let inputs = (0..n)
        .map(|i| {
            let (g, set) = generate_example(&world, seed, i).unwrap();
            let frames: Vec<usize> = (0..g.clip.t).collect();
            SampleInput::new(&g.clip, &frames, &set.positives, &set.negatives).unwrap()
        })
        .collect();
    (model, store, inputs, cfg)
}

fn pad_invariance() -> Outcome {
    let mut checked = 0;
    for seed in 0..4 {
        let (model, store, inputs, cfg) = tiny_examples(300 + seed, 3);
        let order: Vec<usize> = (0..cfg.p + cfg.n).rev().collect();
        for input in inputs {
            let (base, _, _) = model.loss_and_grads(&store, &input, &order, None).unwrap();
            let mut garbage = input.clone();
            for e in &mut garbage.expressions {
                for i in (0..e.n_l).filter(|&i| !e.pad_mask[i]) {
                    e.tokens[i * e.c..(i + 1) * e.c].iter_mut().for_each(|v| *v = -4e3);
                }
            }
            let mut longer = input.clone();
            for e in &mut longer.expressions {
                e.tokens.extend(std::iter::repeat_n(9.0, 4 * e.c));
                e.pad_mask.extend([false; 4]);
                e.n_l += 4;
            }
            let (g, _, _) = model.loss_and_grads(&store, &garbage, &order, None).unwrap();
            let (l, _, _) = model.loss_and_grads(&store, &longer, &order, None).unwrap();
            for (name, a, b, c) in [
                ("l_cls", base.l_cls, g.l_cls, l.l_cls),
                ("l_seg", base.l_seg, g.l_seg, l.l_seg),
                ("l_tmp", base.l_tmp, g.l_tmp, l.l_tmp),
                ("total", base.total, g.total, l.total),
            ] {
                ensure(a == b, || format!("{name} changed with pad values: {a} vs {b}"))?;
                ensure((a - c).abs() <= 1e-12, || format!("{name} changed with extra pads: {a} vs {c}"))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} samples: all losses bit-identical under pad garbage, within 1e-12 with 4 extra pad rows"))
}

fn eq8_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut r = rng::stream(13, "acceptance/eq8", 0);
    for seed in 0..4 {
        let (_, base_cfg) = tiny_network(400 + seed);
        let cfg = TrainConfig { lambda1: r.random_range(0.1..4.0), lambda2: r.random_range(0.1..4.0), ..base_cfg };
        let (world, _) = tiny_network(400 + seed);
        let model = Model::new(cfg.model_config(world.c)).unwrap();
        let store = model.init_params(seed);
        let (_, _, inputs, _) = tiny_examples(400 + seed, 3);
        let order: Vec<usize> = (0..cfg.p + cfg.n).collect();
        for input in &inputs {
            let (b, _, _) = model.loss_and_grads(&store, input, &order, None).unwrap();
            worst = worst.max((b.total - (b.l_cls + cfg.lambda1 * b.l_seg + cfg.lambda2 * b.l_tmp)).abs());
            count += 1;
        }
    }
    // Logged epoch rows obey it too.
    let (world, cfg) = tiny_network(7);
    let data: Vec<_> = (0..4).map(|i| generate_example(&world, 7, i).map(|(g, s)| (g.clip, s)).unwrap()).collect();
    let cfg = TrainConfig { epochs: 3, batch_size: 2, ..cfg };
    let ck = train(&cfg, &data, &data[..2], None, &TrainOptions::default()).map_err(|e| e.to_string())?;
    for row in &ck.history {
        worst = worst.max((row.total - (row.l_cls + cfg.lambda1 * row.l_seg + cfg.lambda2 * row.l_tmp)).abs());
        count += 1;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("{count} forward passes and logged epochs, max |total − (l_cls + λ₁l_seg + λ₂l_tmp)| = {worst:.1e}"))
}

fn pseudo_mask_detached() -> Outcome {
    let mut r = rng::stream(14, "acceptance/pseudo", 0);
    for case in 0..100 {
        let (nv, p) = (r.random_range(2..20), r.random_range(1..5));
        let s0 = mat(&mut r, nv, p);
        let conf: Vec<f64> = (0..p).map(|_| r.random_range(0.8..1.2)).collect();
        let theta = r.random_range(0.2..0.8);

        // The target derives from the same logits the loss differentiates.
        let tape = Tape::new();
        let s = tape.param(s0.clone());
        let fused = fuse_positive_predictions(s, &conf).unwrap();
        let pseudo = PseudoMask::from_logits(&fused.value(), theta);
        let loss = seg_loss(s, &pseudo).unwrap();
        let g_joint = tape.backward(loss).get(&s).cloned().unwrap();

        // The target from an independent copy of the logits, as a constant.
        let other = Tape::new();
        let copy = other.param(s0.clone());
        let target = PseudoMask::from_logits(&fuse_positive_predictions(copy, &conf).unwrap().value(), theta);
        let s2 = other.param(s0.clone());
        let grads = other.backward(seg_loss(s2, &target).unwrap());
        let g_const = grads.get(&s2).cloned().unwrap();
        let through_target = grads.get(&copy).map_or(0.0, |g| g.data().iter().map(|x| x.abs()).fold(0.0, f64::max));

        ensure(g_joint.data() == g_const.data(), || format!("case {case}: gradient depends on the target path"))?;
        ensure(through_target == 0.0, || format!("case {case}: |∂L/∂(target logits)| = {through_target:e}"))?;
    }
    Ok("100 cases: ∂L_seg/∂s identical with the target held constant; zero gradient reaches the target's logits".into())
}

// ----------------------------------------------------------------- temporal

fn temporal_constant_velocity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut tracks = 0;
    for (t, spacing) in [(4, 1), (8, 1)] {
        let world = WorldSpec { t, frame_spacing: spacing, extent_range: [2, 4], ..WorldSpec::default() };
        for seed in 0..150 {
            let Ok(g) = generate_clip(&world, seed) else { continue };
            for o in &g.objects {
                let tape = Tape::new();
                let probs: Vec<_> = (0..t).map(|f| tape.constant(Tensor::vector(o.footprint(f, &world)))).collect();
                let l = temporal_rank_loss(&probs, 0.1, false).unwrap().map_or(0.0, |v| v.item());
                worst = worst.max(l);
                tracks += 1;
            }
        }
    }
    ensure(worst == 0.0, || format!("max L_tmp = {worst:e}"))?;
    Ok(format!("{tracks} constant-velocity object tracks (T = 4 and 8): L_tmp = 0 for every one"))
}

fn temporal_violation_triple() -> Outcome {
    // Frame 1 has ten cells; frame 2 keeps five of them, frame 3 nine.
    let mask = |k: usize| (0..16).map(|i| if i < k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let tape = Tape::new();
    let probs = [mask(10), mask(5), mask(9)].map(|m| tape.constant(Tensor::vector(m)));
    let l = temporal_rank_loss(&probs, 0.1, false).unwrap().unwrap().item();
    // The soft IoU's 1e-8 smoothing term is the only departure from 0.3.
    ensure((l - 0.3).abs() <= 1e-9, || format!("got {l}"))?;
    Ok(format!("IoU(1,2) = 0.5, IoU(1,3) = 0.9, ε = 0.1 → {l:.12}"))
}

// --------------------------------------------------------------------- CREA

fn refvos_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_refvos")).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("refvos {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn crea_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = tmp.path().join("data");
    refvos_bin(&["--seed", "5", "--out", &s(&data), "synth", "--n-train", "8", "--n-test", "3"])?;
    let manifest = s(&data.join("manifest.json"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    refvos_bin(&["--out", &s(&a), "augment", "--manifest", &manifest, "--mock"])?;
    refvos_bin(&["--workers", "3", "--out", &s(&b), "augment", "--manifest", &manifest, "--mock"])?;
    let (ta, tb) = (tree(&a), tree(&b));
    ensure(ta == tb, || "outputs differ between runs".into())?;
    let bytes: usize = ta.iter().map(|(_, b)| b.len()).sum();

    let log = fs::read_to_string(a.join("candidates.jsonl")).map_err(|e| e.to_string())?;
    let (mut accepted, mut rejected) = (0, 0);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let c = v["confidence"].as_f64().unwrap();
        let acc = v["accepted"].as_bool().unwrap();
        ensure(acc == (c > ACCEPT_THRESHOLD), || format!("candidate with c = {c} has accepted = {acc}"))?;
        if acc { accepted += 1 } else { rejected += 1 }
    }
    Ok(format!(
        "{} files ({bytes} bytes) identical across runs (1 vs 3 workers); {accepted} accepted / {rejected} rejected candidates all consistent with c > 0.8",
        ta.len()
    ))
}

struct ScriptedChat {
    positives: Vec<String>,
}

impl ChatService for ScriptedChat {
    fn complete(&self, prompt: &str) -> refvos::Result<String> {
        Ok(if prompt.contains("negative") {
            (1..=4).map(|i| format!("{i}. negative sentence number {i}")).collect::<Vec<_>>().join("\n")
        } else {
            self.positives.iter().enumerate().map(|(i, t)| format!("{}. {t}", i + 1)).collect::<Vec<_>>().join("\n")
        })
    }
}

struct TableEmbedder(Vec<(String, Vec<f64>)>);

impl EmbedService for TableEmbedder {
    fn embed(&self, texts: &[String]) -> refvos::Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.0.iter().find(|(k, _)| k == t).map(|(_, v)| v.clone()).unwrap()).collect())
    }
}

fn same_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + COSINE_DELTA)
}

fn crea_strict_threshold() -> Outcome {
    ensure(!CandidateDescription::new("x".into(), 0.8).accepted, || "c = 0.8 accepted".into())?;
    ensure(CandidateDescription::new("x".into(), 0.8f64.next_up()).accepted, || "c = 0.8⁺ rejected".into())?;

    // Vectors scaled by 2^40 make ‖a‖‖b‖ so large that the cosine's 1e-8
    // guard vanishes below its ulp: the original scores exactly 1 and a 4-3-5
    // candidate exactly 4/5.
    let unit = 2f64.powi(40);
    let video = vec![unit, 0.0];
    let original = vec![unit, 0.0];
    let boundary = vec![4.0 * unit, 3.0 * unit];
    ensure(same_cosine(&video, &boundary) / same_cosine(&video, &original) == 0.8, || "boundary vector is not at 0.8".into())?;
    let above = vec![4.0 * unit, 3.0 * unit * (1.0 - 1e-9)];
    let texts = ["exactly at the threshold", "just above the threshold", "far below the threshold"];
    let embedder = TableEmbedder(vec![
        ("a red square".into(), original),
        (texts[0].into(), boundary),
        (texts[1].into(), above),
        (texts[2].into(), vec![unit, 3.0 * unit]),
    ]);
    let chat = ScriptedChat { positives: texts.iter().map(|t| t.to_string()).collect() };
    let featurizer = CodebookFeaturizer { codebook: Codebook::new(3, 8), n_l: 12 };
    let req = CreaRequest {
        clip_id: "boundary".into(),
        original: "a red square".into(),
        caption: None,
        video: VideoEvidence::Embedding(video),
        p: 3,
        n: 2,
    };
    let out = run_crea(&req, &chat, &embedder, &featurizer).map_err(|e| e.to_string())?;
    let c: Vec<(f64, bool)> = out.candidates.iter().map(|c| (c.confidence, c.accepted)).collect();
    ensure(c.len() == 3, || format!("{} candidates scored", c.len()))?;
    ensure(c[0] == (0.8, false), || format!("boundary candidate: {:?}", c[0]))?;
    ensure(c[1].0 > 0.8 && c[1].1, || format!("above-threshold candidate: {:?}", c[1]))?;
    ensure(!c[2].1, || format!("low candidate: {:?}", c[2]))?;
    let kept: Vec<f64> = out.set.positives.iter().map(|p| p.confidence).collect();
    ensure(kept.iter().filter(|c| **c != 1.0).all(|c| *c > 0.8), || format!("kept confidences {kept:?}"))?;
    ensure(!out.set.positives.iter().any(|p| p.text.contains(texts[0])), || "boundary candidate became a positive".into())?;
    Ok(format!("c = 0.8 rejected, c = {:.17} accepted, through the full pipeline", c[1].0))
}

// ------------------------------------------------------------------ metrics

type Frames = Vec<Vec<bool>>;

fn ref_iou(a: &[bool], b: &[bool]) -> (f64, usize, usize) {
    let mut i = 0;
    let mut u = 0;
    for k in 0..a.len() {
        if a[k] && b[k] {
            i += 1;
        }
        if a[k] || b[k] {
            u += 1;
        }
    }
    (if u == 0 { 1.0 } else { i as f64 / u as f64 }, i, u)
}

fn ref_boundary(m: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let get = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[(y as usize) * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let interior = get(y - 1, x) && get(y + 1, x) && get(y, x - 1) && get(y, x + 1);
            if get(y, x) && !interior {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn ref_f(a: &[bool], b: &[bool], h: usize, w: usize, tol: f64) -> f64 {
    let (ba, bb) = (ref_boundary(a, h, w), ref_boundary(b, h, w));
    if ba.is_empty() && bb.is_empty() {
        return 1.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return 0.0;
    }
    let near = |p: &(f64, f64), set: &[(f64, f64)]| set.iter().any(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() <= tol);
    let precision = ba.iter().filter(|p| near(p, &bb)).count() as f64 / ba.len() as f64;
    let recall = bb.iter().filter(|p| near(p, &ba)).count() as f64 / bb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// (overall IoU, mean IoU, J, F, J&F) by direct evaluation.
fn ref_report(clips: &[(Frames, Frames, usize, usize)], tol: f64) -> [f64; 5] {
    let (mut ti, mut tu) = (0, 0);
    let (mut miou, mut mj, mut mf) = (0.0, 0.0, 0.0);
    for (pred, gt, h, w) in clips {
        let (mut ci, mut cu) = (0, 0);
        let (mut j, mut f) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            let (iou, i, u) = ref_iou(p, g);
            ci += i;
            cu += u;
            j += iou;
            f += ref_f(p, g, *h, *w, tol);
        }
        let t = pred.len() as f64;
        miou += if cu == 0 { 1.0 } else { ci as f64 / cu as f64 };
        mj += j / t;
        mf += f / t;
        ti += ci;
        tu += cu;
    }
    let n = clips.len() as f64;
    let (j, f) = (mj / n, mf / n);
    [if tu == 0 { 1.0 } else { ti as f64 / tu as f64 }, miou / n, j, f, (j + f) / 2.0]
}

fn random_mask_set(seed: u64) -> Vec<(Frames, Frames, usize, usize)> {
    let mut r = rng::stream(seed, "acceptance/metrics", 0);
    (0..r.random_range(1..6))
        .map(|_| {
            let (h, w, t) = (r.random_range(1..10), r.random_range(1..10), r.random_range(1..5));
            let density = r.random_range(0.0..1.0);
            let mut frames = || -> Frames {
                (0..t).map(|_| (0..h * w).map(|_| r.random_bool(density)).collect()).collect()
            };
            let pred = frames();
            let gt = frames();
            (pred, gt, h, w)
        })
        .collect()
}

fn library_report(clips: &[(Frames, Frames, usize, usize)], tol: f64) -> [f64; 5] {
    let ids: Vec<String> = (0..clips.len()).map(|i| format!("c{i}")).collect();
    let masks: Vec<ClipMasks> = clips
        .iter()
        .zip(&ids)
        .map(|((p, g, h, w), id)| ClipMasks { clip_id: id, h: *h, w: *w, predicted: p, reference: g })
        .collect();
    let r = evaluate_masks(&masks, tol).unwrap();
    [r.overall_iou, r.mean_iou, r.j, r.f, r.j_and_f]
}

fn metrics_reference() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let clips = random_mask_set(seed);
        let tol = [DEFAULT_BOUNDARY_TOL, 1.5, 2.0][(seed % 3) as usize];
        for (a, b) in library_report(&clips, tol).iter().zip(ref_report(&clips, tol)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("50 random mask sets, max deviation over all five metrics {worst:.1e}"))
}

fn metrics_identical() -> Outcome {
    for seed in 0..50 {
        let clips: Vec<_> = random_mask_set(100 + seed).into_iter().map(|(p, _, h, w)| (p.clone(), p, h, w)).collect();
        let rep = library_report(&clips, DEFAULT_BOUNDARY_TOL);
        ensure(rep.iter().all(|v| *v == 1.0), || format!("seed {seed}: {rep:?}"))?;
    }
    Ok("50 sets with prediction = reference: every metric exactly 1.0".into())
}

// ---------------------------------------------------------- end-to-end runs

type Data = Vec<(ClipSample, AugmentedExpressionSet)>;

fn benchmark() -> (Data, Data) {
    let world = WorldSpec::default();
    let gen = |offset: u64, n: u64| -> Data {
        (0..n).map(|i| generate_example(&world, 7, offset + i).map(|(g, s)| (g.clip, s)).unwrap()).collect()
    };
    (gen(0, 300), gen(TEST_INDEX_OFFSET, 50))
}

/// Paper hyperparameters plus the two runtime-driven choices the README
/// documents: encoders frozen after initialization and one shared visual
/// stream for all expressions.
fn benchmark_config() -> TrainConfig {
    TrainConfig { freeze_encoders: true, selection_merge: SelectionMerge::UnionMax, ..TrainConfig::default() }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn progress(row: &EpochRow) {
    eprintln!(
        "    epoch {:>2}: total {:.5} (cls {:.5} seg {:.5} tmp {:.5}) val Mean IoU {:.4}",
        row.epoch, row.total, row.l_cls, row.l_seg, row.l_tmp, row.val_miou
    );
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (train_data, test_data) = benchmark();
    let cfg = benchmark_config();
    let untrained = initial_checkpoint(&cfg, 64).map_err(|e| e.to_string())?;
    let base = evaluate_model(&untrained.model().unwrap(), &untrained.params, &test_data, DEFAULT_BOUNDARY_TOL, workers())
        .map_err(|e| e.to_string())?
        .mean_iou;
    let opts = TrainOptions { workers: workers(), on_epoch: Some(&progress), ..TrainOptions::default() };
    let ck = train(&cfg, &train_data, &test_data, None, &opts).map_err(|e| e.to_string())?;
    let trained = evaluate_model(&ck.model().unwrap(), &ck.params, &test_data, DEFAULT_BOUNDARY_TOL, workers())
        .map_err(|e| e.to_string())?
        .mean_iou;
    let elapsed = start.elapsed();
    let detail = format!("untrained Mean IoU {base:.4}, after {} epochs {trained:.4} ({:.1}×), {elapsed:.0?}", ck.epoch, trained / base);
    ensure(trained >= 0.60 && trained >= 5.0 * base && elapsed < Duration::from_secs(900), || detail.clone())?;
    Ok(detail)
}

fn ablations() -> Outcome {
    let (train_data, test_data) = benchmark();
    let names: Vec<String> = ["no_ppf", "no_tsr", "no_iec"].map(String::from).to_vec();
    let opts = TrainOptions { workers: workers(), on_epoch: Some(&progress), ..TrainOptions::default() };
    let rows = run_ablation(&benchmark_config(), &names, &train_data, &test_data, &opts).map_err(|e| e.to_string())?;
    let full = rows.iter().find(|r| r.variant == BASELINE).unwrap().val_miou;
    let detail: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.variant, r.val_miou)).collect();
    let detail = detail.join(", ");
    for r in rows.iter().filter(|r| r.variant != BASELINE) {
        ensure(full - r.val_miou >= 0.03, || format!("{} drops only {:.4}: {detail}", r.variant, full - r.val_miou))?;
    }
    Ok(detail)
}

// --------------------------------------------------------------------- main

fn main() {
    let full = std::env::var("REFVOS_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let criteria: [(&str, fn() -> Outcome, bool); 16] = [
        ("gradient suite", gradient_suite, false),
        ("MIL oracle equivalence", mil_oracle, false),
        ("MIL y bounds", mil_bounds, false),
        ("softmax normalization", softmax_normalization, false),
        ("selection saturation", selection_saturation, false),
        ("pad invariance", pad_invariance, false),
        ("total-loss identity", eq8_identity, false),
        ("pseudo-mask detachment", pseudo_mask_detached, false),
        ("temporal: constant velocity", temporal_constant_velocity, false),
        ("temporal: violation triple", temporal_violation_triple, false),
        ("CREA determinism", crea_determinism, false),
        ("CREA strict threshold", crea_strict_threshold, false),
        ("metrics vs reference evaluator", metrics_reference, false),
        ("metrics on identical masks", metrics_identical, false),
        ("synthetic end-to-end", end_to_end, true),
        ("ablation directionality", ablations, true),
    ];
    let mut failed = 0;
    for (name, check, expensive) in criteria {
        if expensive && !full {
            println!("SKIP {name}: set REFVOS_ACCEPTANCE_FULL=1 to run");
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
