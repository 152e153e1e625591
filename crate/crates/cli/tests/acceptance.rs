//! Acceptance suite: evaluates every criterion against independent oracles,
//! prints one PASS/FAIL line per criterion, writes the JSON ledger and exits
//! nonzero if anything failed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{blob_pair, grating, grating_shift, textured_pair};
use infuse_core::autonet::{grad_check, Graph, ParamStore, Tensor, Var};
use infuse_core::docsbench::{determinism_entry, Ledger, LedgerEntry};
use infuse_core::eval::{
    dataset_folds, fusion_variants, macro_f1, run_protocol, score_fold, FoldReport, ProtocolReport, Variant,
};
use infuse_core::flow::{compute_flow, compute_strain, FlowField, FlowParams};
use infuse_core::imaging::{Image, Plane};
use infuse_core::infusenet::{
    build_forward, forward_infusenet, forward_single, place_params, BackboneConfig, Fusion, MaskMode, ModelConfig,
    Stream,
};
use infuse_core::magnify::{decode, encode, manipulate, MagConfig};
use infuse_core::synth::{manifest_path, Manifest};
use infuse_core::train::{
    adam_step, lr_at_epoch, prepare_dataset, sample_pseudo_apex, train_model, AdamState, PreparedSample, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CRITERIA: u32 = 12;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn macro_f1_arithmetic() -> LedgerEntry {
    let sssnet = [
        0.7460, 0.7210, 0.8750, 0.1360, 0.0530, 0.4860, 0.2030, 0.1930, 0.3620, 0.4080, 0.2270, 0.4470,
    ];
    let infuse = [
        0.6997, 0.6804, 0.7921, 0.1929, 0.1572, 0.4438, 0.3263, 0.2987, 0.3987, 0.3523, 0.2973, 0.4364,
    ];
    let a = macro_f1(&sssnet).unwrap();
    let b = macro_f1(&infuse).unwrap();
    let pass = (a - 0.4050).abs() <= 0.0005 && (b - 0.4230).abs() <= 0.0005;
    LedgerEntry::new(
        1,
        "macro-F1 of the published per-AU rows",
        pass,
        format!("{a:.5} / {b:.5}"),
        "0.4050 / 0.4230 +- 0.0005",
    )
}

fn gradient_fidelity() -> LedgerEntry {
    const H: f64 = 1e-5;
    let mut layer_err = 0.0f64;
    let mut e2e_err = 0.0f64;
    for seed in [11u64, 22, 33] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut check = |inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, _>| {
            let r = grad_check(inputs, H, f).unwrap();
            layer_err = layer_err.max(r.max_rel_err);
        };
        let x = [rand_tensor(&[2, 2, 5, 6], &mut rng), rand_tensor(&[3, 2, 3, 3], &mut rng), rand_tensor(&[3], &mut rng)];
        let w = weights(180, &mut rng);
        check(&x, &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, w.clone())
        });
        let x = [rand_tensor(&[3, 5], &mut rng), rand_tensor(&[4, 5], &mut rng), rand_tensor(&[4], &mut rng)];
        let w = weights(12, &mut rng);
        check(&x, &|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, w.clone())
        });
        let x = [away_from_zero(&[2, 2, 4, 6], &mut rng)];
        let w = weights(24, &mut rng);
        check(&x, &|g, v| {
            let y = g.relu_pool(v[0])?;
            g.weighted_sum(y, w.clone())
        });
        let z = rand_tensor(&[2, 12], &mut rng);
        let labels: Vec<f64> = (0..24).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        check(&[z], &|g, v| g.bce_multilabel_loss(v[0], &labels));
        let x = [rand_tensor(&[2, 3, 4, 4], &mut rng)];
        let w = weights(96, &mut rng);
        check(&x, &|g, v| {
            let y = g.minmax_normalize(v[0])?;
            g.weighted_sum(y, w.clone())
        });
        let x = [rand_tensor(&[1, 2, 4, 4], &mut rng), rand_tensor(&[1, 2, 4, 4], &mut rng)];
        let w = weights(32, &mut rng);
        check(&x, &|g, v| {
            let a = g.minmax_normalize(v[1])?;
            let y = g.mul(v[0], a)?;
            g.weighted_sum(y, w.clone())
        });

        // tiny end-to-end network: 8x8 input, two blocks of two channels
        let cfg = BackboneConfig {
            widths: vec![2, 2],
            flow_in: 3,
            mag_in: 2,
            fusion: Fusion::Infuse,
            aux_flow_head: false,
        };
        let p = cfg.init_params::<f64>(seed);
        let names: Vec<String> = p.names().map(str::to_string).collect();
        let mut tensors: Vec<Tensor<f64>> = p.iter().map(|(_, t)| t.clone()).collect();
        let hb = names.iter().position(|n| n == "head/b").unwrap();
        tensors[hb] = rand_tensor(&[12], &mut rng);
        let flow = rand_tensor(&[1, 3, 8, 8], &mut rng);
        let mag = rand_tensor(&[1, 2, 8, 8], &mut rng);
        let mut labels = vec![0.0; 12];
        labels[seed as usize % 12] = 1.0;
        let r = grad_check(&tensors, 1e-6, |g, vars| {
            let pv: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let fv = g.input(flow.clone())?;
            let mv = g.input(mag.clone())?;
            let fwd = build_forward(g, &cfg, &pv, Some(fv), Some(mv), MaskMode::Flow)
                .map_err(|e| infuse_core::autonet::NetError::Shape(e.to_string()))?;
            g.bce_multilabel_loss(fwd.logits, &labels)
        })
        .unwrap();
        e2e_err = e2e_err.max(r.max_rel_err);
    }
    LedgerEntry::new(
        2,
        "finite-difference gradient checks, 3 seeds",
        layer_err < 1e-4 && e2e_err < 1e-3,
        format!("layers {layer_err:.2e}, end-to-end {e2e_err:.2e}"),
        "layers < 1e-4, end-to-end < 1e-3",
    )
}

fn pyramid_exactness() -> LedgerEntry {
    let mut worst = 0.0f64;
    let mut alpha0_exact = true;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let img = Image::from_plane(Plane::from_fn(64, 64, |_, _| rng.random_range(0.0..1.0))).unwrap();
        let lat = encode(img.plane(), 3).unwrap();
        let back = decode(&lat).unwrap();
        worst = worst.max(back.plane().max_abs_diff(img.plane()));
        let (onset, _) = textured_pair(64, i, 0.0, 0.0);
        let lo = encode(onset.plane(), 3).unwrap();
        alpha0_exact &= manipulate(&lo, &lat, 0.0).unwrap() == lat;
    }
    LedgerEntry::new(
        3,
        "pyramid round trip and alpha = 0 identity",
        worst < 1e-6 && alpha0_exact,
        format!("max abs error {worst:.2e}, alpha 0 bit-equal {alpha0_exact}"),
        "< 1e-6, bit-equal",
    )
}

fn magnification_law() -> LedgerEntry {
    // depth 5 keeps the 32 px grating period inside the amplified bands
    let (depth, period) = (5, 32.0);
    let mut worst = 0.0f64;
    for delta in [0.2, 0.3, 0.5] {
        for alpha in [2.0, 5.0] {
            let onset = grating(64, period, 0.0);
            let target = grating(64, period, delta);
            let lo = encode(onset.plane(), depth).unwrap();
            let lt = encode(target.plane(), depth).unwrap();
            let out = decode(&manipulate(&lo, &lt, alpha).unwrap()).unwrap();
            let measured = grating_shift(&onset, &out, period);
            worst = worst.max((measured / ((1.0 + alpha) * delta) - 1.0).abs());
        }
    }
    LedgerEntry::new(
        4,
        "decoded displacement follows (1 + alpha) * delta",
        worst <= 0.15,
        format!("worst relative deviation {:.1}%", 100.0 * worst),
        "within 15%",
    )
}

fn artefact_monotonicity() -> LedgerEntry {
    let (onset, apex) = textured_pair(64, 3, 0.3, 0.0);
    let mut noisy = apex.plane().clone();
    for k in 0..12 {
        let cy = (k * 37 + 11) % 60 + 2;
        let cx = (k * 53 + 5) % 60 + 2;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        for dy in 0..3 {
            for dx in 0..3 {
                let v = noisy.at(cy + dy, cx + dx) + sign * 0.08;
                *noisy.at_mut(cy + dy, cx + dx) = v.clamp(0.0, 1.0);
            }
        }
    }
    let lo = encode(onset.plane(), 3).unwrap();
    let clean_t = encode(apex.plane(), 3).unwrap();
    let noisy_t = encode(&noisy, 3).unwrap();
    let maes: Vec<f64> = [2.0, 5.0, 10.0, 20.0]
        .iter()
        .map(|&a| {
            let clean = decode(&manipulate(&lo, &clean_t, a).unwrap()).unwrap();
            let dirty = decode(&manipulate(&lo, &noisy_t, a).unwrap()).unwrap();
            dirty.plane().mean_abs_diff(clean.plane())
        })
        .collect();
    LedgerEntry::new(
        5,
        "speckle artefact error over alpha 2, 5, 10, 20",
        maes.windows(2).all(|w| w[1] >= w[0]),
        maes.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" "),
        "non-decreasing",
    )
}

fn flow_accuracy() -> LedgerEntry {
    let (a, b, mask) = blob_pair(64, 1.0);
    let f = compute_flow(&a, &b, &FlowParams::default()).unwrap();
    let (mut err, mut n) = (0.0, 0.0);
    for y in 0..64 {
        for x in 0..64 {
            if mask.at(y, x) > 0.0 {
                err += ((f.p.at(y, x) - 1.0).powi(2) + f.q.at(y, x).powi(2)).sqrt();
                n += 1.0;
            }
        }
    }
    let epe = err / n;
    let z = compute_flow(&a, &a, &FlowParams::default()).unwrap();
    let zero = z.p.data.iter().chain(&z.q.data).all(|&v| v == 0.0);
    LedgerEntry::new(
        6,
        "flow endpoint error on a 1 px blob shift; identical frames",
        epe < 0.25 && zero,
        format!("EPE {epe:.4} px, identical frames exactly zero {zero}"),
        "EPE < 0.25 px, exact zero",
    )
}

fn strain_analytics() -> LedgerEntry {
    let interior = |p: &Plane<f64>| -> Vec<f64> {
        let (h, w) = p.dims();
        (1..h - 1).flat_map(|y| (1..w - 1).map(move |x| (y, x))).map(|(y, x)| p.at(y, x)).collect()
    };
    let u = compute_strain(&FlowField::<f64>::uniform(12, 12, 0.7, -1.3));
    let uniform_zero = [&u.exx, &u.eyy, &u.exy, &u.magnitude]
        .iter()
        .all(|c| c.data.iter().all(|&v| v == 0.0));
    let a = 0.37;
    let s = compute_strain(&FlowField::<f64>::from_fn(12, 12, |_, x| (a * x as f64, 0.0)));
    let e_stretch = interior(&s.exx).iter().map(|v| (v - a).abs()).fold(0.0, f64::max);
    let s = compute_strain(&FlowField::<f64>::from_fn(12, 12, |y, x| (a * y as f64, a * x as f64)));
    let e_shear = interior(&s.exy).iter().map(|v| (v - a).abs()).fold(0.0, f64::max);
    let e_mag = interior(&s.magnitude)
        .iter()
        .map(|v| (v - 2f64.sqrt() * a).abs())
        .fold(0.0, f64::max);
    let worst = e_stretch.max(e_shear).max(e_mag);
    LedgerEntry::new(
        7,
        "strain of uniform, stretch and shear fields",
        uniform_zero && worst < 1e-10,
        format!("uniform exactly zero {uniform_zero}, worst interior error {worst:.1e}"),
        "exact zero, < 1e-10",
    )
}

fn infusion_contracts() -> LedgerEntry {
    let cfg = BackboneConfig {
        widths: vec![4, 8, 8],
        flow_in: 3,
        mag_in: 8,
        fusion: Fusion::Infuse,
        aux_flow_head: false,
    };
    let mut in_range = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..100 {
        let p = cfg.init_params::<f64>(seed);
        let mut g = Graph::new();
        let pv = place_params(&mut g, &p, false).unwrap();
        let fv = g.input(rand_tensor(&[1, 3, 16, 16], &mut rng)).unwrap();
        let mv = g.input(rand_tensor(&[1, 8, 16, 16], &mut rng)).unwrap();
        let fwd = build_forward(&mut g, &cfg, &pv, Some(fv), Some(mv), MaskMode::Flow).unwrap();
        for &m in &fwd.state.masks {
            in_range &= g.value(m).data().iter().all(|v| (0.0..=1.0).contains(v));
        }
    }
    let p = cfg.init_params::<f64>(1);
    let flow = rand_tensor(&[2, 3, 16, 16], &mut rng);
    let mag = rand_tensor(&[2, 8, 16, 16], &mut rng);
    let ones = forward_infusenet(&cfg, &p, &flow, &mag, MaskMode::Ones).unwrap();
    let mag_only = forward_single(&cfg, &p, &mag, Stream::Mag).unwrap();
    let bit_exact = ones == mag_only;
    let mut p = cfg.init_params::<f64>(2);
    let bias: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    *p.get_mut("head/b").unwrap() = Tensor::new(vec![12], bias.clone()).unwrap();
    let z = forward_infusenet(&cfg, &p, &Tensor::zeros(&[1, 3, 16, 16]), &mag_single(&mag), MaskMode::Flow).unwrap();
    let head_bias = z.data() == &bias[..];
    LedgerEntry::new(
        8,
        "mask range, ones-mask equivalence, zero-flow head bias",
        in_range && bit_exact && head_bias,
        format!("masks in [0,1] over 100 forwards {in_range}, bit-exact {bit_exact}, head bias {head_bias}"),
        "all hold exactly",
    )
}

fn mag_single(mag: &Tensor<f64>) -> Tensor<f64> {
    let per = mag.data().len() / mag.shape()[0];
    let mut shape = mag.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, mag.data()[..per].to_vec()).unwrap()
}

fn training_mechanics(sample: &PreparedSample) -> LedgerEntry {
    // learning-rate schedule against an independent running product
    let mut lr_ok = true;
    let mut worst_lr = 0.0f64;
    let mut running = 0.001f64;
    for e in 0..50 {
        let got = lr_at_epoch(0.001, 0.9, e);
        lr_ok &= got == 0.001 * 0.9f64.powi(e as i32);
        worst_lr = worst_lr.max((got - running).abs() / running);
        running *= 0.9;
    }
    lr_ok &= worst_lr < 1e-13;

    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2000)
            .map(|_| sample_pseudo_apex(4, 12, 5, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    let draws = draw(42);
    let apex_ok = draws.iter().all(|v| (4..=9).contains(v)) && draws == draw(42) && (4..=9).all(|v| draws.contains(&v));

    // first Adam step from the textbook moment recursions
    let grads = [0.5, -2.0, 1e-3, 0.0];
    let init = [1.0, -0.3, 0.2, 0.7];
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::new(vec![4], init.to_vec()).unwrap());
    let mut st = AdamState::new(&p);
    let gm = BTreeMap::from([("w".to_string(), grads.to_vec())]);
    adam_step(&mut p, &gm, &mut st, 0.001).unwrap();
    let mut adam_err = 0.0f64;
    for i in 0..4 {
        let m = (1.0 - 0.9) * grads[i];
        let v = (1.0 - 0.999) * grads[i] * grads[i];
        let (mh, vh) = (m / (1.0 - 0.9), v / (1.0 - 0.999));
        let want = init[i] - 0.001 * mh / (vh.sqrt() + 1e-8);
        adam_err = adam_err.max((p.get("w").unwrap().data()[i] - want).abs());
    }

    // 200 steps on one sample with the default optimiser settings
    let model = BackboneConfig::new(&ModelConfig::default(), sample.mag_channels).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch: 1,
        ..TrainConfig::default()
    };
    let repeated = vec![sample; 200];
    let out = train_model::<f32>(&repeated, &model, &cfg, MaskMode::Flow, 1).unwrap();
    let last = out.curve.last().unwrap().loss;
    let overfit = out.curve.len() == 200 && last < 0.05;
    LedgerEntry::new(
        9,
        "lr schedule, pseudo-apex range, first Adam step, single-sample overfit",
        lr_ok && apex_ok && adam_err < 1e-9 && overfit,
        format!(
            "lr exact {lr_ok}, pseudo-apex ok {apex_ok}, Adam error {adam_err:.1e}, loss after 200 steps {last:.4}"
        ),
        "exact; [apex, apex+5]; 1e-9; < 0.05",
    )
}

fn fast_ledger(sample: &PreparedSample) -> Ledger {
    let mut l = Ledger::default();
    for e in [
        macro_f1_arithmetic(),
        gradient_fidelity(),
        pyramid_exactness(),
        magnification_law(),
        artefact_monotonicity(),
        flow_accuracy(),
        strain_analytics(),
        infusion_contracts(),
        training_mechanics(sample),
    ] {
        l.record(e);
    }
    l
}

fn infuse_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_infuse"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{:?} exited {:?}: {}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn end_to_end(run: &Path) -> LedgerEntry {
    let r = run.to_str().unwrap();
    let mut outcome = Ok(());
    for stage in ["gen", "flow", "magnify", "train", "eval"] {
        let t = Instant::now();
        outcome = infuse_bin(&[stage, "--out", r]);
        println!("  (stage {stage}: {:.0}s)", t.elapsed().as_secs_f64());
        if outcome.is_err() {
            break;
        }
    }
    let report = outcome.and_then(|()| {
        let text = std::fs::read_to_string(run.join("eval/report.json")).map_err(|e| e.to_string())?;
        let rep: ProtocolReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        rep.validate().map_err(|e| e.to_string())?;
        Ok(rep)
    });
    match report {
        Ok(rep) => LedgerEntry::new(
            12,
            "gen, flow, magnify, train, eval on the default config",
            rep.folds.len() == 6,
            format!("exit 0, schema-valid report, {} folds", rep.folds.len()),
            "exit 0 and valid report",
        ),
        Err(e) => LedgerEntry::new(12, "gen, flow, magnify, train, eval on the default config", false, e, "exit 0 and valid report"),
    }
}

/// Scores a fold checkpoint and serialises the fold report.
fn rescore(ckpt: &Path, data: &[PreparedSample], held_out: &str) -> Result<Vec<u8>, String> {
    let params = ParamStore::<f32>::load(ckpt).map_err(|e| e.to_string())?;
    let v = Variant::new(&ModelConfig::default(), MagConfig::default().input_channels()).unwrap();
    let folds = dataset_folds(data).map_err(|e| e.to_string())?;
    let fold = folds.iter().find(|f| f.held_out == held_out).ok_or("no such fold")?;
    let rep = score_fold(data, fold, &v, &params, &TrainConfig::default()).map_err(|e| e.to_string())?;
    serde_json::to_vec(&rep).map_err(|e| e.to_string())
}

fn cli_fold_bytes(run: &Path, held_out: &str) -> Vec<u8> {
    let text = std::fs::read_to_string(run.join("eval/report.json")).unwrap_or_default();
    let rep: Option<ProtocolReport> = serde_json::from_str(&text).ok();
    rep.and_then(|r| r.folds.into_iter().find(|f| f.held_out == held_out))
        .map(|f: FoldReport| serde_json::to_vec(&f).unwrap())
        .unwrap_or_default()
}

fn protocol_determinism(data: &[PreparedSample], reference: &str, run: &Path) -> (LedgerEntry, bool) {
    let desc = "6 folds partition the corpus; reruns and checkpoints reproduce reports";
    let folds = dataset_folds(data).unwrap();
    let mut seen = vec![0usize; data.len()];
    for f in &folds {
        for &i in &f.test {
            seen[i] += 1;
        }
    }
    let partition = folds.len() == 6
        && seen.iter().all(|&c| c == 1)
        && folds.iter().all(|f| f.train.len() + f.test.len() == data.len());
    let v = Variant::new(&ModelConfig::default(), MagConfig::default().input_channels()).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let rerun = run_protocol(data, &v, &cfg, 0)
        .map(|r| r.to_json().into_bytes())
        .map_err(|e| e.to_string());
    let rerun_entry = determinism_entry(10, desc, reference.as_bytes(), rerun);
    let db = &folds[0].held_out;
    let ckpt = run.join("train").join(db).join("checkpoint");
    let ckpt_entry = determinism_entry(10, desc, &cli_fold_bytes(run, db), rescore(&ckpt, data, db));

    // the same check on a deliberately corrupted copy must fail
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("checkpoint");
    std::fs::create_dir_all(&bad).unwrap();
    for e in std::fs::read_dir(&ckpt).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), bad.join(e.file_name())).unwrap();
    }
    let victim = bad.join("head.w.ifnt");
    // header damage, so the failure cannot hide behind unchanged thresholded predictions
    let mut bytes = std::fs::read(&victim).unwrap_or_default();
    for b in bytes.iter_mut().take(4) {
        *b ^= 0x5a;
    }
    std::fs::write(&victim, bytes).unwrap();
    let corrupt_entry = determinism_entry(10, desc, &cli_fold_bytes(run, db), rescore(&bad, data, db));
    let corruption_caught = !corrupt_entry.passed();

    let pass = partition && rerun_entry.passed() && ckpt_entry.passed();
    let entry = LedgerEntry::new(
        10,
        desc,
        pass,
        format!(
            "{} folds, partition {partition}, protocol rerun {}, checkpoint rescore {}",
            folds.len(),
            rerun_entry.measured,
            ckpt_entry.measured
        ),
        "exact partition, byte-identical",
    );
    (entry, corruption_caught)
}

fn directional_ablation(latent: &[PreparedSample], decoded: &[PreparedSample]) -> (LedgerEntry, String) {
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let model = ModelConfig::default();
    let arms: BTreeMap<&str, ModelConfig> = fusion_variants(&model)
        .into_iter()
        .filter(|(n, _)| *n != "single_flow")
        .collect();
    let mut means: BTreeMap<String, f64> = BTreeMap::new();
    let mut infuse_seed0 = String::new();
    let seeds = [0u64, 1, 2];
    for (name, mc) in &arms {
        let v = Variant::new(mc, MagConfig::default().input_channels()).unwrap();
        let mut total = 0.0;
        for &s in &seeds {
            let r = run_protocol(latent, &v, &cfg, s).unwrap();
            if *name == "infuse" && s == 0 {
                infuse_seed0 = r.to_json();
            }
            total += r.protocol_macro_f1;
        }
        means.insert(name.to_string(), total / seeds.len() as f64);
    }
    let dec_cfg = MagConfig {
        decoded: true,
        ..MagConfig::default()
    };
    let v = Variant::new(&model, dec_cfg.input_channels()).unwrap();
    let total: f64 = seeds
        .iter()
        .map(|&s| run_protocol(decoded, &v, &cfg, s).unwrap().protocol_macro_f1)
        .sum();
    means.insert("infuse_decoded".into(), total / seeds.len() as f64);
    let m = |k: &str| means[k];
    let pass = m("infuse") >= m("late") && m("infuse") >= m("single_mag") && m("infuse") >= m("infuse_decoded");
    let entry = LedgerEntry::new(
        11,
        "mean macro-F1 ordering over 3 seeds, 10 epochs",
        pass,
        format!(
            "infuse {:.4}, late {:.4}, single_mag {:.4}, decoded infuse {:.4}",
            m("infuse"),
            m("late"),
            m("single_mag"),
            m("infuse_decoded")
        ),
        "infuse >= late, infuse >= single_mag, latent >= decoded",
    );
    (entry, infuse_seed0)
}

fn ledger_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ledger.json")
}

fn main() {
    let start = Instant::now();
    let work = tempfile::tempdir().expect("temp dir");
    let run = work.path().join("run");

    // end-to-end first: its corpus and flow images feed the protocol criteria
    let e2e = end_to_end(&run);
    println!("{}", e2e.line());
    let manifest = Manifest::load(manifest_path(run.join("corpus")));
    let prepared = manifest.as_ref().ok().map(|m| {
        let cache = run.join("flow");
        let lat = prepare_dataset(m, &FlowParams::default(), &MagConfig::default(), 5, Some(&cache)).unwrap();
        let dec_cfg = MagConfig {
            decoded: true,
            ..MagConfig::default()
        };
        let dec = prepare_dataset(m, &FlowParams::default(), &dec_cfg, 5, Some(&cache)).unwrap();
        (lat, dec)
    });
    let Some((latent, decoded)) = prepared else {
        panic!("corpus unavailable after the end-to-end run: {:?}", manifest.err());
    };

    let fast = fast_ledger(&latent[0]);
    for e in &fast.entries {
        println!("{}", e.line());
    }
    let again = fast_ledger(&latent[0]);
    let reproducible = again.to_json() == fast.to_json();

    let t = Instant::now();
    let (ablation, infuse_seed0) = directional_ablation(&latent, &decoded);
    let ablation_secs = t.elapsed().as_secs_f64();
    let (determinism, corruption_caught) = protocol_determinism(&latent, &infuse_seed0, &run);
    println!("{}", determinism.line());
    println!("{}", ablation.line());
    println!("  (directional ablation: {ablation_secs:.0}s)");

    let mut ledger = fast;
    for e in [determinism, ablation, e2e] {
        ledger.record(e);
    }
    let complete = ledger.validate(CRITERIA);
    let path = ledger_path();
    std::fs::write(&path, ledger.to_json()).expect("ledger written");
    println!("[check] ledger lists every criterion once: {}", complete.is_ok());
    println!("[check] re-running the fast criteria reproduces their ledger: {reproducible}");
    println!("[check] corrupted checkpoint marks the determinism criterion failed: {corruption_caught}");
    println!("ledger: {}", path.display());
    println!("acceptance suite finished in {:.0}s", start.elapsed().as_secs_f64());

    let failed: Vec<u32> = ledger.entries.iter().filter(|e| !e.passed()).map(|e| e.id).collect();
    if !failed.is_empty() || complete.is_err() || !reproducible || !corruption_caught {
        eprintln!("acceptance failures: criteria {failed:?}");
        std::process::exit(1);
    }
    println!("all {CRITERIA} criteria passed");
}
