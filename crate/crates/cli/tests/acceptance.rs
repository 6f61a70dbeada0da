//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails afterwards if any of them did.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use dewarp_core::checks::{self, Suite};
use dewarp_core::geometry::{
    flat_page, forward_map, generate_sample, invert_forward_map, resample, synthesize_sample, Background,
    DeformationField, FlatDocSpec, WarpParams, DEFAULT_SIZE, INVERT_MAX_ITER, INVERT_TOL,
};
use dewarp_core::metrics::{cer, edit_distance, edit_ops, local_distortion, ms_ssim, Gray, BLOCK, SEARCH};
use dewarp_core::model::{Mode, Model, ModelConfig};
use dewarp_core::training::{
    bce_loss, evaluate_heldout, layer_weight, load_checkpoint, rec_loss, total_loss, weighted_line_loss, AdamW,
    OptimConfig, LOG_FILE,
};
use dewarp_core::{io, Tape, Tensor};

#[path = "../../core/tests/common/mod.rs"]
mod common;
use common::{crop, dp_oracle, naive_ms_ssim, noise, texture};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dewarp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dewarp"))
        .args(args)
        .env("DEWARP_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let o = dewarp(args);
    if o.status.success() {
        Ok(o)
    } else {
        Err(format!("dewarp {} failed: {}", args[0], String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file below `root` except the run manifest, whose timestamps differ.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            if path.is_dir() {
                stack.push(path);
            } else if rel != "run_manifest.txt" {
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let outcomes = checks::run(Suite::All).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.clone()).collect();
    let worst = outcomes
        .iter()
        .map(|o| o.report.max_rel_err / o.tolerance)
        .fold(0.0, f64::max);
    ensure(
        failed.is_empty() && secs < 300.0,
        format!("{} checks, worst err/tol {worst:.3}, {secs:.0}s, failed {failed:?}", outcomes.len()),
    )
}

fn dimensions() -> Outcome {
    let m = Model::<f32>::new(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let tape = Tape::no_grad();
    let x = Tensor::<f32>::uniform(&[1, 3, 448, 448], 0.0, 1.0, &mut dewarp_core::rng::seeded(0)).unwrap();
    let out = m.forward(&tape.constant(x), Mode::Train).map_err(|e| e.to_string())?.0.output;
    let shape = |v: &dewarp_core::Var<f32>| v.shape()[1..].to_vec();
    let enc: Vec<_> = out.encoder.iter().map(shape).collect();
    let dec: Vec<_> = out.h_decoder.iter().chain(&out.v_decoder).map(shape).collect();
    let want_enc = [[32, 448, 448], [64, 224, 224], [128, 112, 112], [196, 56, 56], [448, 28, 28]];
    let want_dec = [[196, 56, 56], [128, 112, 112], [64, 224, 224], [48, 448, 448]];
    let f = [out.f_h.as_ref().map(shape), out.f_v.as_ref().map(shape)];
    let ok = enc == want_enc
        && dec[..4] == want_dec
        && dec[4..] == want_dec
        && f.iter().all(|s| s.as_deref() == Some(&[448, 56, 56][..]))
        && shape(&out.field) == [2, 448, 448];
    ensure(ok, format!("encoder {enc:?}, decoder {:?}, F {:?}, field {:?}", &dec[..4], f[0], shape(&out.field)))
}

fn loss_identities() -> Outcome {
    let weights: Vec<f64> = (1..=4).map(|i| layer_weight(4, i)).collect();
    let weights_ok = weights.iter().zip([7.0, 6.0, 5.0, 4.0]).all(|(w, d)| (w - 1.0 / d).abs() < 1e-15);

    let tape = Tape::<f64>::new();
    let mask = tape.constant(dewarp_core::training::random_mask(&[2, 1, 16, 16], 3));
    let half = tape.constant(Tensor::full(&[2, 1, 16, 16], 0.5).unwrap());
    let bce_half = bce_loss(&half, &mask).unwrap().value().data()[0];

    let pred = tape.constant(Tensor::uniform(&[2, 2, 16, 16], 0.0, 1.0, &mut dewarp_core::rng::seeded(1)).unwrap());
    let gt = tape.constant(Tensor::uniform(&[2, 2, 16, 16], 0.0, 1.0, &mut dewarp_core::rng::seeded(2)).unwrap());
    let rec = rec_loss(&pred, &gt).unwrap();
    let line = weighted_line_loss(&half, &mask).unwrap();
    let total = total_loss(5.0, &rec, &line).unwrap().value().data()[0];
    let want = 5.0 * rec.value().data()[0] + line.value().data()[0];
    let total_err = (total - want).abs() / want;

    let perfect = [
        bce_loss(&mask, &mask).unwrap().value().data()[0],
        weighted_line_loss(&mask, &mask).unwrap().value().data()[0],
        rec_loss(&gt, &gt).unwrap().value().data()[0],
    ];
    let ok = weights_ok
        && (bce_half - 2f64.ln()).abs() < 1e-6
        && total_err < 1e-6
        && perfect.iter().all(|&v| (0.0..1e-5).contains(&v));
    ensure(
        ok,
        format!("layer weights {weights:?}, bce(0.5) {bce_half:.9}, total rel err {total_err:.1e}, perfect {perfect:?}"),
    )
}

fn interior_mae(a: &Tensor<f32>, b: &Tensor<f32>, margin: usize) -> f64 {
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for i in margin..h - margin {
            for j in margin..w - margin {
                let k = (ch * h + i) * w + j;
                sum += (a.data()[k] as f64 - b.data()[k] as f64).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn geometry_round_trip() -> Outcome {
    let mut residual = 0.0f64;
    let mut mae = 0.0f64;
    for seed in 0..50 {
        let params = WarpParams::sample(seed);
        let n = 48;
        let field = invert_forward_map(&params, n, n, INVERT_TOL, INVERT_MAX_ITER).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = field.at(i, j);
                let (fx, fy) = forward_map(&params, x, y).unwrap();
                let (gx, gy) = ((j as f64 + 0.5) / n as f64, (i as f64 + 0.5) / n as f64);
                residual = residual.max((fx - gx).abs()).max((fy - gy).abs());
            }
        }
        let s = generate_sample(DEFAULT_SIZE, seed).map_err(|e| e.to_string())?;
        let rect = resample(&s.image, &s.field).unwrap();
        mae = mae.max(interior_mae(&rect, &flat_page(DEFAULT_SIZE, seed).unwrap(), 8));
    }
    let id = WarpParams::identity();
    let spec = FlatDocSpec::random(40, 40, 3);
    let s = synthesize_sample(&spec, &id, &Background::Noise.render(40, 40, 3)).unwrap();
    let identity_ok = forward_map(&id, 0.3, 0.7).unwrap() == (0.3, 0.7)
        && s.field == DeformationField::identity(40, 40)
        && resample(&s.image, &s.field).unwrap() == s.image;
    ensure(
        residual < 1e-6 && mae < 0.02 && identity_ok,
        format!("max residual {residual:.3e}, worst interior error {mae:.4} at {DEFAULT_SIZE}px, identity exact {identity_ok}"),
    )
}

fn schedule_and_optimizer() -> Outcome {
    let s = OptimConfig::default().schedule(200_000);
    let (at_warmup, at_end) = (s.lr_at(s.warmup), s.lr_at(s.total));
    let mut opt = AdamW::<f64>::new(&OptimConfig::default());
    let mut params = std::collections::BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]);
    let mut values = vec![1.0];
    for _ in 0..100 {
        let x = params["x"].data()[0];
        let grads = std::collections::BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * x))]);
        opt.update(params.iter_mut(), &grads, 1e-3).unwrap();
        values.push(params["x"].data()[0].powi(2));
    }
    let monotone = values.windows(2).all(|w| w[1] < w[0]);
    ensure(
        at_warmup == 1e-4 && at_end == 1e-7 && monotone,
        format!("lr_at(warmup) {at_warmup:e}, lr_at(final) {at_end:e}, quadratic {:.4} -> {:.4}", values[0], values[100]),
    )
}

/// Toy configuration shared by the training criteria.
const TOY: &str = "\
input_size=64
scale_factor=8
epochs=2
batch=8
seed=7
lr_max=1e-2
crop_min_area=1.0
";

fn log_totals(log: &str) -> Vec<f64> {
    log.lines()
        .filter_map(|l| l.split_whitespace().find_map(|f| f.strip_prefix("total=")))
        .map(|v| v.parse().unwrap())
        .collect()
}

fn toy_training(root: &Path) -> Outcome {
    let (data, held, out) = (root.join("train"), root.join("heldout"), root.join("run"));
    let cfg = root.join("toy.cfg");
    std::fs::write(&cfg, TOY).unwrap();
    let start = Instant::now();
    run_ok(&["gen", "--count", "200", "--size", "64", "--seed", "1", "--out", p(&data)])?;
    run_ok(&["gen", "--count", "32", "--size", "64", "--seed", "2", "--out", p(&held)])?;
    run_ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)])?;
    let totals = log_totals(&io::read_text(&out.join(LOG_FILE)).unwrap());
    let (first, last) = (totals[0], *totals.last().unwrap());
    let model = load_checkpoint(&out.join("model")).map_err(|e| e.to_string())?.model;
    let h = evaluate_heldout(&model, &held).map_err(|e| e.to_string())?;
    let ok = totals.len() == 50 && last <= 0.5 * first && h.rec_pred < h.rec_identity && h.ms_ssim_gt > h.ms_ssim_pred;
    ensure(
        ok,
        format!(
            "{} steps, loss {first:.4} -> {last:.4} (ratio {:.3}), held-out rec {:.4} vs identity {:.4}, MS-SSIM gt {:.3} vs pred {:.3}, {:.0}s",
            totals.len(),
            last / first,
            h.rec_pred,
            h.rec_identity,
            h.ms_ssim_gt,
            h.ms_ssim_pred,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn ablation(root: &Path) -> Outcome {
    let data = root.join("data");
    run_ok(&["gen", "--count", "16", "--size", "32", "--seed", "3", "--out", p(&data)])?;
    let cfg = root.join("abl.cfg");
    std::fs::write(&cfg, "input_size=32\nscale_factor=8\nepochs=1\nbatch=4\nlr_max=1e-2\nseed=2\n").unwrap();
    let out = root.join("abl");
    let o = run_ok(&["ablate", "--data", p(&data), "--config", p(&cfg), "--out", p(&out), "--heldout", p(&data)])?;
    let tsv = io::read_text(&out.join("ablation.tsv")).map_err(|e| e.to_string())?;
    let variants: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    let trained = variants.iter().all(|v| out.join(v).join("model").join("index.txt").exists());
    ensure(
        variants == ["no_fusion", "h_only", "v_only", "full"] && trained && String::from_utf8_lossy(&o.stdout) == tsv,
        format!("variants {variants:?}, checkpoints present {trained}"),
    )
}

fn metrics() -> Outcome {
    let a = texture(96, 96, 3);
    let self_score = ms_ssim(&a, &a, 5).map_err(|e| e.to_string())?;
    let mut oracle_gap = 0.0f64;
    for seed in 0..20 {
        let x = texture(96, 96, seed);
        let n = noise(96, 96, seed + 100);
        let y = Gray::new(96, 96, x.data.iter().zip(&n).map(|(p, q)| 0.7 * p + 0.3 * q).collect()).unwrap();
        oracle_gap = oracle_gap.max((ms_ssim(&x, &y, 5).unwrap() - naive_ms_ssim(&x.data, &y.data, 96, 96)).abs());
    }
    let mut ld_gap = 0.0f64;
    for seed in 0..20 {
        let big = texture(140, 140, seed);
        let r = local_distortion(&crop(&big, 20, 20, 96, 96), &crop(&big, 20, 23, 96, 96), BLOCK, SEARCH).unwrap();
        ld_gap = ld_gap.max((r.ld - 3.0).abs());
    }
    let ed = edit_distance("kitten", "sitting");
    let cases = [("0123456789", "0x2345689a"), ("abcdef", "abXdf"), ("page", "pages"), ("line", "")];
    let cer_ok = cases.iter().all(|(r, h)| {
        let ops = edit_ops(r, h);
        let m = r.chars().count() as f64;
        cer(r, h).unwrap() == (ops.insertions + ops.deletions + ops.substitutions) as f64 / m
            && ops.total() == dp_oracle(r, h)
    });
    ensure(
        self_score == 1.0 && oracle_gap < 1e-6 && ld_gap <= 0.5 && ed == 3 && dp_oracle("kitten", "sitting") == 3 && cer_ok,
        format!("ms_ssim(x,x) {self_score}, oracle gap {oracle_gap:.1e}, worst |LD-3| {ld_gap:.3}, ED {ed}, CER cases {cer_ok}"),
    )
}

fn determinism(root: &Path) -> Outcome {
    let cfg = root.join("det.cfg");
    std::fs::write(&cfg, "input_size=32\nscale_factor=8\nepochs=1\nbatch=4\nlr_max=1e-2\nseed=9\n").unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let data = dir.join("data");
        run_ok(&["gen", "--count", "8", "--size", "40", "--seed", "6", "--out", p(&data)])?;
        run_ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&dir.join("run"))])?;
        let sample: Tensor<f32> = io::load_dten(&data.join("sample_00000").join("img.dten")).unwrap();
        io::save_pnm(&dir.join("in.ppm"), &sample).unwrap();
        run_ok(&[
            "dewarp", "--model", p(&dir.join("run").join("model")), "--input", p(&dir.join("in.ppm")),
            "--output", p(&dir.join("out.ppm")), "--dump-field", p(&dir.join("field.dten")),
        ])?;
        trees.push([tree(&data), tree(&dir.join("run")), vec![
            ("out.ppm".into(), std::fs::read(dir.join("out.ppm")).unwrap()),
            ("field.dten".into(), std::fs::read(dir.join("field.dten")).unwrap()),
        ]]);
    }
    let same: Vec<bool> = (0..3).map(|k| trees[0][k] == trees[1][k]).collect();
    ensure(same.iter().all(|&s| s), format!("gen/train/dewarp identical: {same:?}"))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| {
        let d = tmp.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("dimension fidelity", Box::new(dimensions)),
        ("loss identities", Box::new(loss_identities)),
        ("geometry round trip", Box::new(geometry_round_trip)),
        ("schedule and optimizer", Box::new(schedule_and_optimizer)),
        ("toy training run", Box::new({
            let d = dir("toy");
            move || toy_training(&d)
        })),
        ("ablation harness", Box::new({
            let d = dir("ablation");
            move || ablation(&d)
        })),
        ("metrics", Box::new(metrics)),
        ("determinism", Box::new({
            let d = dir("determinism");
            move || determinism(&d)
        })),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (verdict, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(k + 1);
                ("FAIL", d)
            }
        };
        // straight to stdout so the verdicts show even when output is captured
        let line = format!("criterion {} {verdict} {name}: {detail} [{:.1}s]\n", k + 1, start.elapsed().as_secs_f64());
        std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
