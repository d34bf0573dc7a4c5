//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL` line before asserting. The two long training
//! runs are ignored by default; run them with
//! `cargo test -p rvlab-cli --test acceptance -- --include-ignored --nocapture`.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvlab_cli::{run, RUN_MANIFEST};
use rvlab_core::corpus::{generate, validation_start, GeneratorConfig};
use rvlab_core::gradcheck::{random_tensor, suite};
use rvlab_core::heads::{condinst_branch, dot_branch, dynamic_layout, hcd_head, num_dynamic_params, HeadParams};
use rvlab_core::mask::{Mask, MaskSequence};
use rvlab_core::matching::{giou_loss, hungarian};
use rvlab_core::metrics::{
    average_precision, f_boundary, iou, iou_thresholds, map_over_thresholds, oiou_miou, BOUNDARY_TOLERANCE,
};
use rvlab_core::pipeline::{evaluate_records, infer, inject_noise, train, PipelineConfig, TrainConfig, NOISE_SCHEDULE};
use rvlab_core::Tensor;
use tempfile::TempDir;

fn report(n: usize, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn rvlab(args: &[&str]) -> i32 {
    let mut argv = vec!["rvlab"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn c1_gradient_suite() {
    let start = Instant::now();
    let entries = suite(20, 1).unwrap();
    let elapsed = start.elapsed();
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let bad: Vec<&str> = entries.iter().filter(|e| !(e.max_rel_error < 1e-6)).map(|e| e.name).collect();
    let pass = bad.is_empty() && entries.iter().all(|e| e.instances >= 20) && elapsed < Duration::from_secs(60);
    report(
        1,
        pass,
        &format!("{} cases x 20, worst rel err {worst:.2e}, {:.1}s, failing {bad:?}", entries.len(), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn c2_hcd_is_dot_plus_condinst() {
    let mut worst = [0.0f64; 3];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c, q, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..4));
        let coords = rng.random_bool(0.5);
        let layout = dynamic_layout(d, &[rng.random_range(1..6)], coords);
        let f_v = random_tensor(&[h, w, c], seed, 1.0);
        let queries = random_tensor(&[q, c], seed + 1000, 1.0);
        let centres = coords.then(|| random_tensor(&[q, 2], seed + 2000, 1.0));
        let params = HeadParams {
            w_d: Some(random_tensor(&[c, d * d], seed + 3000, 1.0)),
            w_c: Some(random_tensor(&[c, d * d], seed + 4000, 1.0)),
            w_q: Some(random_tensor(&[c, num_dynamic_params(&layout)], seed + 5000, 1.0)),
            layout,
            d,
        };
        let diff = |a: &Tensor, b: &Tensor| {
            assert_eq!(a.shape(), b.shape());
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let hcd = hcd_head(&f_v, &queries, &params, centres.as_ref()).unwrap();
        let dot = dot_branch(&f_v, &queries, params.w_d().unwrap()).unwrap();
        let cond = condinst_branch(&f_v, &queries, &params, centres.as_ref()).unwrap();
        worst[0] = worst[0].max(diff(&hcd, &dot.add(&cond).unwrap()));

        let zero = |t: &Tensor| Some(Tensor::zeros(t.shape()));
        let no_wq = HeadParams { w_q: zero(params.w_q().unwrap()), ..params.clone() };
        worst[1] = worst[1].max(diff(&hcd_head(&f_v, &queries, &no_wq, centres.as_ref()).unwrap(), &dot));
        let no_wd = HeadParams { w_d: zero(params.w_d().unwrap()), ..params.clone() };
        worst[2] = worst[2].max(diff(&hcd_head(&f_v, &queries, &no_wd, centres.as_ref()).unwrap(), &cond));
    }
    let pass = worst.iter().all(|&e| e <= 1e-12);
    report(
        2,
        pass,
        &format!("100 inputs, max |hcd - (dot + condinst)| {:.1e}, W_Q = 0 vs dot {:.1e}, W_D = 0 vs condinst {:.1e}", worst[0], worst[1], worst[2]),
    );
    assert!(pass);
}

/// Cheapest cost of any full matching of the smaller side, by enumeration.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (cost.len(), cost[0].len());
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let rows = if transpose { cost[0].len() } else { cost.len() };
        if row == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                let c = if transpose { cost[col][row] } else { cost[row][col] };
                best = best.min(c + go(cost, row + 1, used, transpose));
                used[col] = false;
            }
        }
        best
    }
    if n <= m {
        go(cost, 0, &mut vec![false; m], false)
    } else {
        go(cost, 0, &mut vec![false; n], true)
    }
}

#[test]
fn c3_hungarian_matches_exhaustive_search() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for k in 0..1000 {
        let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
        // integer-valued costs make every sum exact; every other matrix has heavy ties
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0..if k % 2 == 0 { 1000 } else { 4 }) as f64).collect())
            .collect();
        let a = hungarian(&cost).unwrap();
        let recomputed: f64 = a.pairs.iter().map(|&(r, c)| cost[r][c]).sum();
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort();
        cols.dedup();
        let valid = a.pairs.len() == n.min(m) && rows.len() == n.min(m) && cols.len() == n.min(m);
        if !valid || a.cost != brute_force(&cost) || recomputed != a.cost {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10);
    report(3, pass, &format!("1000 matrices up to 7x7, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()));
    assert!(pass);
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    // blobs half the time so boundaries are not pure salt and pepper
    if rng.random_bool(0.5) {
        let density = rng.random_range(0.0..1.0);
        Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
    } else {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let r = rng.random_range(0.0..(h.max(w) as f64));
        Mask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
    }
}

fn oracle_iou(a: &Mask, b: &Mask) -> (usize, usize) {
    let (h, w) = a.dims();
    let (mut i, mut u) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            i += (a.get(y, x) && b.get(y, x)) as usize;
            u += (a.get(y, x) || b.get(y, x)) as usize;
        }
    }
    (i, u)
}

fn oracle_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = m.dims();
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Boundary F by pairwise distances between boundary pixels.
fn oracle_f(pred: &Mask, gt: &Mask) -> f64 {
    let (h, w) = pred.dims();
    let r = (BOUNDARY_TOLERANCE * ((h * h + w * w) as f64).sqrt()).round();
    let (pb, gb) = (oracle_boundary(pred), oracle_boundary(gt));
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let near = |a: &(usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|b| {
            let (dy, dx) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
            dy * dy + dx * dx <= r * r
        })
    };
    let precision = pb.iter().filter(|a| near(a, &gb)).count() as f64 / pb.len() as f64;
    let recall = gb.iter().filter(|a| near(a, &pb)).count() as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// AP as the mean over ground truths of the best precision reachable at or
/// beyond the rank where each one is recovered.
fn oracle_ap(ious: &[f64], conf: &[f64], t: f64) -> f64 {
    let n = ious.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap());
    let hit: Vec<bool> = order.iter().map(|&i| ious[i] >= t).collect();
    let precision_at = |k: usize| hit[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
    (0..n)
        .filter(|&k| hit[k])
        .map(|k| (k..n).map(precision_at).fold(0.0, f64::max))
        .sum::<f64>()
        / n as f64
}

#[test]
fn c4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_f = 0.0f64;
    let mut iou_exact = true;
    let mut samples = Vec::new();
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let (i, u) = oracle_iou(&a, &b);
        let expect = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        iou_exact &= iou(&a, &b).unwrap() == expect;
        worst_f = worst_f.max((f_boundary(&a, &b).unwrap() - oracle_f(&a, &b)).abs());
        samples.push((a, b, i, u, rng.random_range(0.0..1.0)));
    }

    // pairs grouped into 40 five-frame samples of a shared size per group
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut confs = Vec::new();
    let (mut oi, mut ou, mut miou) = (0usize, 0usize, 0.0);
    for _ in 0..40 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (mut pf, mut gf, mut si, mut su) = (Vec::new(), Vec::new(), 0, 0);
        for _ in 0..5 {
            let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
            let (i, u) = oracle_iou(&a, &b);
            si += i;
            su += u;
            pf.push(a);
            gf.push(b);
        }
        oi += si;
        ou += su;
        miou += if su == 0 { 1.0 } else { si as f64 / su as f64 };
        preds.push(MaskSequence::new(pf).unwrap());
        gts.push(MaskSequence::new(gf).unwrap());
        confs.push(rng.random_range(0.0..1.0));
    }
    let (o, m) = oiou_miou(&preds, &gts).unwrap();
    let pooled_exact = o == oi as f64 / ou as f64 && m == miou / 40.0;

    let ious: Vec<f64> = samples.iter().map(|s| if s.3 == 0 { 1.0 } else { s.2 as f64 / s.3 as f64 }).collect();
    let conf: Vec<f64> = samples.iter().map(|s| s.4).collect();
    let mut worst_ap = 0.0f64;
    for t in iou_thresholds() {
        worst_ap = worst_ap.max((average_precision(&ious, &conf, t).unwrap() - oracle_ap(&ious, &conf, t)).abs());
    }
    let with_conf: Vec<(MaskSequence, f64)> = preds.iter().cloned().zip(confs.iter().cloned()).collect();
    let seq_ious: Vec<f64> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| {
            let (i, u) = p.frames().iter().zip(g.frames()).fold((0, 0), |(si, su), (a, b)| {
                let (i, u) = oracle_iou(a, b);
                (si + i, su + u)
            });
            if u == 0 { 1.0 } else { i as f64 / u as f64 }
        })
        .collect();
    let map_oracle = iou_thresholds().iter().map(|&t| oracle_ap(&seq_ious, &confs, t)).sum::<f64>() / 10.0;
    worst_ap = worst_ap.max((map_over_thresholds(&with_conf, &gts).unwrap() - map_oracle).abs());

    // two 2x2 squares sharing a 1x2 strip
    let sq = |y0: usize| Mask::from_fn(4, 4, move |y, x| (y0..y0 + 2).contains(&y) && x < 2);
    let strip = iou(&sq(0), &sq(1)).unwrap() == 1.0 / 3.0;
    // unit boxes at (0,0)-(1,1) and (2,2)-(3,3): hull 9, union 2
    let giou = giou_loss(&Tensor::new(&[4], vec![0.5, 0.5, 1.0, 1.0]).unwrap(), &[2.5, 2.5, 1.0, 1.0]).unwrap().item();
    let giou_ok = giou == 16.0 / 9.0;

    let pass = iou_exact && pooled_exact && worst_f <= 1e-9 && worst_ap <= 1e-9 && strip && giou_ok;
    report(
        4,
        pass,
        &format!(
            "200 pairs: iou exact {iou_exact}, oIoU/mIoU exact {pooled_exact}, max F err {worst_f:.1e}, max AP err {worst_ap:.1e}, strip 1/3 {strip}, GIoU loss {giou} (16/9 {giou_ok})"
        ),
    );
    assert!(pass);
}

#[test]
fn c5_noise_properties() {
    let dir = TempDir::new().unwrap();
    // noise-free path: two full trainings and inferences agree bit for bit
    let corpus = generate(&GeneratorConfig {
        num_videos: 4,
        frames: 10,
        height: 64,
        width: 64,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let config = PipelineConfig::default();
    let tcfg = TrainConfig {
        steps: 3,
        batch_videos: 2,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let runs: Vec<_> = (0..2).map(|_| train(&config, &tcfg, &corpus, 1, |_| {}).unwrap()).collect();
    let same_params = runs[0].params.iter().zip(runs[1].params.iter()).all(|((_, a), (_, b))| a.data() == b.data());
    let r = &corpus[0];
    let inf = |seed| infer(&r.frames_tensor(), &r.tokens, &config, &runs[0].params, seed).unwrap().logits;
    let deterministic = same_params && inf(1).data() == inf(2).data();
    let features = random_tensor(&[10_000], 5, 1.0);
    let identity = inject_noise(&features, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().data() == features.data();

    let mut rms_ok = true;
    let mut detail = Vec::new();
    for (t, w) in NOISE_SCHEDULE {
        let out = inject_noise(&features, Some(t), &mut ChaCha8Rng::seed_from_u64(t as u64)).unwrap();
        let rms = (out
            .data()
            .iter()
            .zip(features.data())
            .map(|(o, x)| (o - (1.0 - w) * x).powi(2))
            .sum::<f64>()
            / 10_000.0)
            .sqrt();
        rms_ok &= (rms - w).abs() <= 0.2 * w;
        detail.push(format!("{t}:{:.4}/{w}", rms));
    }

    let out = dir.path().join("sweep");
    let corpus_dir = dir.path().join("corpus");
    assert_eq!(rvlab(&["gen", "--videos", "2", "--frames", "10", "--size", "64", "64", "--out", &p(&corpus_dir)]), 0);
    let code = rvlab(&[
        "ablate", "--mode", "noise", "--corpus", &p(&corpus_dir), "--steps", "1", "--batch", "1", "--clip-frames", "2", "--eval-every", "0", "--out", &p(&out),
    ]);
    let arms: Vec<String> = csv_rows(&out.join("ablate_noise.csv")).into_iter().map(|r| r[0].clone()).collect();
    let sweep_ok = code == 0 && arms == ["none", "0", "1", "3", "5", "10", "25", "50"];

    let pass = deterministic && identity && rms_ok && sweep_ok;
    report(
        5,
        pass,
        &format!("deterministic {deterministic}, identity {identity}, rms {}, sweep arms {arms:?}", detail.join(" ")),
    );
    assert!(pass);
}

fn reference_corpus(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("reference");
    assert_eq!(rvlab(&["gen", "--seed", "7", "--videos", "200", "--frames", "16", "--size", "96", "96", "--out", &p(&out)]), 0);
    out
}

#[test]
#[ignore = "reference training run, about 30 minutes"]
fn c6_reference_training() {
    let corpus = generate(&GeneratorConfig::default()).unwrap();
    let config = PipelineConfig::default();
    let tcfg = TrainConfig {
        eval_every: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train(&config, &tcfg, &corpus, 1, |_| {}).unwrap();
    let elapsed = start.elapsed();
    let jf = outcome.final_val_jf.unwrap();
    // the logged value is the full validation split
    let check = evaluate_records(&config, &outcome.params, &corpus[validation_start(corpus.len())..], None, 1).unwrap();
    assert_eq!(check.jf, jf);
    let pass = jf >= 0.80 && elapsed <= Duration::from_secs(30 * 60);
    report(6, pass, &format!("validation J&F {jf:.4} after {} steps (need >= 0.80), {:.0}s", tcfg.steps, elapsed.as_secs_f64()));
    assert!(pass);
}

#[test]
#[ignore = "seven training arms, about 50 minutes"]
fn c7_directional_ablations() {
    let dir = TempDir::new().unwrap();
    let corpus = reference_corpus(dir.path());
    let steps = "500";
    for mode in ["heads", "refine"] {
        let out = dir.path().join(mode);
        assert_eq!(rvlab(&["ablate", "--mode", mode, "--corpus", &p(&corpus), "--steps", steps, "--eval-every", "0", "--out", &p(&out)]), 0);
    }
    let heads = csv_rows(&dir.path().join("heads").join("ablate_heads.csv"));
    let refine = csv_rows(&dir.path().join("refine").join("ablate_refine.csv"));
    let jf = |name: &str| heads.iter().find(|r| r[0] == name).unwrap()[3].parse::<f64>().unwrap();
    let var = |name: &str| refine.iter().find(|r| r[0] == name).unwrap()[4].parse::<f64>().unwrap();
    let (hcd, dot, cond) = (jf("hcd"), jf("dot"), jf("condinst"));
    let (tcmr, base) = (var("tcmr"), var("baseline"));
    let head_ok = hcd >= dot.max(cond) - 0.01;
    let refine_ok = tcmr <= base;
    let pass = head_ok && refine_ok;
    report(
        7,
        pass,
        &format!("{steps} steps: J&F hcd {hcd:.4} dot {dot:.4} condinst {cond:.4}; occluded variance k=10 tcmr {tcmr:.5} baseline {base:.5}"),
    );
    if !pass {
        println!("arm        J      F      JF     occluded_var_k10");
        for r in heads.iter() {
            println!("head {:<6} {} {} {}", r[0], r[1], r[2], r[3]);
        }
        for r in refine.iter() {
            println!("refine {:<4} {} {} {} {}", r[0], r[1], r[2], r[3], r[4]);
        }
    }
    assert!(pass);
}

/// Every file under `dir` except the run manifest, as (relative path, bytes).
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != RUN_MANIFEST {
                out.push((path.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c8_replay_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    let train_dir = dir.path().join("train");
    let eval_dir = dir.path().join("eval");
    assert_eq!(rvlab(&["gen", "--videos", "3", "--frames", "10", "--size", "64", "64", "--out", &p(&corpus)]), 0);
    assert_eq!(
        rvlab(&["train", "--corpus", &p(&corpus), "--steps", "4", "--batch", "2", "--eval-every", "2", "--out", &p(&train_dir)]),
        0
    );
    let ckpt = p(&train_dir.join("checkpoint.ckp"));
    assert_eq!(rvlab(&["eval", "--checkpoint", &ckpt, "--corpus", &p(&corpus), "--out", &p(&eval_dir)]), 0);

    let mut results = Vec::new();
    for (name, original) in [("gen", &corpus), ("train", &train_dir), ("eval", &eval_dir)] {
        let again = dir.path().join(format!("replay_{name}"));
        let code = rvlab(&["replay", "--manifest", &p(&original.join(RUN_MANIFEST)), "--out", &p(&again)]);
        let (a, b) = (tree(original), tree(&again));
        results.push((name, code == 0 && !a.is_empty() && a == b, a.len()));
    }
    let pass = results.iter().all(|r| r.1);
    report(8, pass, &format!("replayed (command, identical, files): {results:?}"));
    assert!(pass);
}
