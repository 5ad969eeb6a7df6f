//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdcm::config::RunConfig;
use rdcm::dataset::write_dataset;
use rdcm::experiment::{prepare_bundle, run_dir_name, run_loo, seed_dir, Experiment};
use rdcm_core::contrastive::{contrastive_loss, weight_plan, ContrastiveBatch, ContrastiveHyper, ContrastiveMode};
use rdcm_core::data::{Batch, TextLayout};
use rdcm_core::eval::MetricRow;
use rdcm_core::kernels::KernelSpec;
use rdcm_core::layers::{l2_normalize, softmax_rows};
use rdcm_core::mmd::{joint_mmd, marginal_mmd, DomainFeatures, MmdKernels, MmdVariant};
use rdcm_core::model::{HyperParams, LossBreakdown, Mode, ModelConfig, RdcmModel};
use rdcm_core::params::ParamId;
use rdcm_core::synth::{generate, SynthConfig};
use rdcm_core::tape::{compute_gradients, Tape};
use rdcm_core::Tensor;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- kernel oracles -------------------------------------------------------

fn k(x: &[f64], y: &[f64], sigmas: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    sigmas.iter().map(|s| (-d / (2.0 * s * s)).exp()).sum::<f64>() / sigmas.len() as f64
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// One post as (text, visual).
type Point = (Vec<f64>, Vec<f64>);

/// Biased estimator written as the three explicit double sums.
fn triple_sum(x: &[Point], y: &[Point], kern: &dyn Fn(&Point, &Point) -> f64) -> f64 {
    let mean = |a: &[Point], b: &[Point]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += kern(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

fn pairs(d: &DomainFeatures) -> Vec<Point> {
    rows(&d.text).into_iter().zip(rows(&d.visual)).collect()
}

fn random_domain(rng: &mut ChaCha8Rng, n: usize, dt: usize, dv: usize) -> DomainFeatures {
    let mut draw = |c: usize| Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let text = draw(dt);
    let visual = draw(dv);
    DomainFeatures::new(text, visual, 0).unwrap()
}

fn random_kernels(rng: &mut ChaCha8Rng) -> MmdKernels {
    let mut spec = || {
        let count = rng.random_range(1..=4);
        KernelSpec::new((0..count).map(|_| rng.random_range(0.3..6.0)).collect()).unwrap()
    };
    MmdKernels {
        text: spec(),
        visual: spec(),
    }
}

fn mmd_oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (dt, dv) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let a = random_domain(&mut rng, n, dt, dv);
        let b = random_domain(&mut rng, m, dt, dv);
        let kern = random_kernels(&mut rng);
        let (ts, vs) = (kern.text.sigmas().to_vec(), kern.visual.sigmas().to_vec());
        let (pa, pb) = (pairs(&a), pairs(&b));
        let cat = |p: &Point| [p.0.clone(), p.1.clone()].concat();
        let cases: [(f64, f64); 5] = [
            (
                joint_mmd(&a, &b, &kern).unwrap(),
                triple_sum(&pa, &pb, &|p, q| k(&p.0, &q.0, &ts) * k(&p.1, &q.1, &vs)),
            ),
            (
                marginal_mmd(&a, &b, &kern, MmdVariant::Joint).unwrap(),
                triple_sum(&pa, &pb, &|p, q| k(&p.0, &q.0, &ts) * k(&p.1, &q.1, &vs)),
            ),
            (
                marginal_mmd(&a, &b, &kern, MmdVariant::Text).unwrap(),
                triple_sum(&pa, &pb, &|p, q| k(&p.0, &q.0, &ts)),
            ),
            (
                marginal_mmd(&a, &b, &kern, MmdVariant::Vision).unwrap(),
                triple_sum(&pa, &pb, &|p, q| k(&p.1, &q.1, &vs)),
            ),
            (
                marginal_mmd(&a, &b, &kern, MmdVariant::Fusion).unwrap(),
                triple_sum(&pa, &pb, &|p, q| k(&cat(p), &cat(q), &ts)),
            ),
        ];
        for (got, want) in cases {
            worst = worst.max((got - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-12 && secs < 10.0,
        format!("50 pairs, max |diff| {worst:.2e} (tol 1e-12), {secs:.2}s (limit 10s)"),
    )
}

fn mmd_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut self_max, mut min_val, mut asym): (f64, f64, f64) = (0.0, f64::INFINITY, 0.0);
    for _ in 0..200 {
        let (dt, dv) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let a = random_domain(&mut rng, n, dt, dv);
        let b = random_domain(&mut rng, m, dt, dv);
        let kern = random_kernels(&mut rng);
        for v in [
            MmdVariant::Joint,
            MmdVariant::Fusion,
            MmdVariant::Text,
            MmdVariant::Vision,
        ] {
            self_max = self_max.max(marginal_mmd(&a, &a, &kern, v).unwrap().abs());
            let ab = marginal_mmd(&a, &b, &kern, v).unwrap();
            let ba = marginal_mmd(&b, &a, &kern, v).unwrap();
            min_val = min_val.min(ab);
            asym = asym.max((ab - ba).abs());
        }
    }
    ensure(
        self_max <= 1e-12 && min_val >= 0.0 && asym <= 1e-12,
        format!("200 trials x 4 variants: max MMD(D,D) {self_max:.2e}, min MMD {min_val:.3e}, max |MMD(a,b)-MMD(b,a)| {asym:.2e}"),
    )
}

// ---- gradients ------------------------------------------------------------

fn random_batch(rng: &mut ChaCha8Rng, layout: TextLayout, vis: usize, n: usize, offset: f64) -> Batch {
    let mut draw = |shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| offset + rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let text = draw(layout.batch_shape(n));
    let visual = draw(vec![n, vis]);
    let logits = draw(vec![n, 3]);
    Batch {
        text,
        visual,
        inst: softmax_rows(&logits).unwrap(),
        labels: (0..n).map(|i| (i % 2) as u8).collect(),
    }
}

fn component(b: &LossBreakdown, which: usize) -> f64 {
    [b.total, b.cls, b.inter, b.intra][which]
}

/// Worst relative error over every parameter entry and loss component, and
/// the number of entries that sat on a ReLU kink and were rechecked with a
/// one-sided-safe step.
fn gradient_errors(
    model: &mut RdcmModel,
    sources: &[Batch],
    target: Option<&Batch>,
    hyper: &HyperParams,
) -> (f64, usize) {
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let (mut worst, mut kinks): (f64, usize) = (0.0, 0);
    for which in 0..4 {
        let mut tape = Tape::new();
        let obj = model.objective(&mut tape, sources, target, hyper).unwrap();
        let var = [obj.total, obj.cls, obj.inter, obj.intra][which];
        model.params.zero_grad();
        compute_gradients(&tape, var, &mut model.params).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| model.params.grad(id).clone()).collect();
        let base = component(&model.total_loss(sources, target, hyper).unwrap(), which);
        for (id, g) in ids.iter().zip(&analytic) {
            for i in 0..g.len() {
                let mut at = |delta: f64| {
                    let orig = model.params.value(*id).data()[i];
                    model.params.value_mut(*id).data_mut()[i] = orig + delta;
                    let v = component(&model.total_loss(sources, target, hyper).unwrap(), which);
                    model.params.value_mut(*id).data_mut()[i] = orig;
                    v
                };
                let a = g.data()[i];
                let rel = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                let h = 1e-4;
                let (up, down) = (at(h), at(-h));
                let mut err = rel((up - down) / (2.0 * h));
                if err > 1e-4 {
                    let (fwd, bwd) = ((up - base) / h, (base - down) / h);
                    if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-6) {
                        err = rel((at(1e-6) - at(-1e-6)) / 2e-6);
                        kinks += 1;
                    }
                }
                worst = worst.max(err);
            }
        }
    }
    (worst, kinks)
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let layout = TextLayout::Pooled { dim: 5 };
    let (mut worst, mut kinks): (f64, usize) = (0.0, 0);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = RdcmModel::new(ModelConfig::new(layout, 4).with_latent_dim(6), seed).unwrap();
        // Zero biases can put an encoder output at the origin, where row
        // normalization has no derivative.
        let biases: Vec<ParamId> = model
            .params
            .iter()
            .filter(|(_, p)| p.name.contains(".b"))
            .map(|(id, _)| id)
            .collect();
        for id in biases {
            for v in model.params.value_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let sources: Vec<Batch> = (0..3)
            .map(|m| random_batch(&mut rng, layout, 4, 6, 0.3 * m as f64))
            .collect();
        let target = random_batch(&mut rng, layout, 4, 6, -0.5);
        for (mode, t) in [(Mode::Dg, None), (Mode::Da, Some(&target))] {
            let mut h = HyperParams {
                lambda_inter: 0.7,
                lambda_intra: 0.4,
                mode,
                ..HyperParams::default()
            };
            h.contrastive.beta = 0.9;
            let (w, kk) = gradient_errors(&mut model, &sources, t, &h);
            worst = worst.max(w);
            kinks += kk;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-4 && secs < 60.0,
        format!("10 seeds x DG/DA x 4 components: max rel err {worst:.2e} (tol 1e-4), {kinks} kink entries rechecked at h=1e-6, {secs:.1}s (limit 60s)"),
    )
}

// ---- contrastive ----------------------------------------------------------

fn info_nce(text: &Tensor, visual: &Tensor, tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = text.rows();
    let mut total = 0.0;
    for p in 0..n {
        let pos = dot(text.row(p), visual.row(p)) / tau;
        let denom: f64 = (0..n).map(|q| (dot(text.row(p), visual.row(q)) / tau).exp()).sum();
        total -= (pos.exp() / denom).ln();
    }
    total / n as f64
}

fn contrastive_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut draw =
        |n: usize, d: usize| Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut nce_err: f64 = 0.0;
    let mut zero_beta: f64 = 0.0;
    let mut empty: f64 = 0.0;
    for trial in 0..20 {
        let n = 2 + trial % 8;
        let batch = ContrastiveBatch {
            text: l2_normalize(&draw(n, 5)).unwrap(),
            visual: l2_normalize(&draw(n, 5)).unwrap(),
            descriptors: softmax_rows(&draw(n, 4)).unwrap(),
            real_mask: (0..n).map(|i| i % 2 == 0).collect(),
            text_descriptors: None,
        };
        let tau = 0.1 + 0.04 * trial as f64;
        let reg = contrastive_loss(&batch, &ContrastiveHyper { beta: 0.5, tau }, ContrastiveMode::Regular).unwrap();
        nce_err = nce_err.max((reg.value - info_nce(&batch.text, &batch.visual, tau)).abs());
        let z = contrastive_loss(&batch, &ContrastiveHyper { beta: 0.0, tau }, ContrastiveMode::Ours).unwrap();
        zero_beta = zero_beta.max(z.value.abs());
        let fakes = ContrastiveBatch {
            real_mask: vec![false; n],
            ..batch.clone()
        };
        let e = contrastive_loss(&fakes, &ContrastiveHyper { beta: 0.9, tau }, ContrastiveMode::Ours).unwrap();
        empty = empty.max(e.value.abs());
    }
    // Descriptor similarities 1.0, 0.5 and 0.75 against a threshold of 0.75
    // and 0.5: anything at or above the threshold gets weight zero.
    let desc = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
    let real = [true, true, true, true];
    let at_half = weight_plan(&real, &desc, None, 0.5, ContrastiveMode::Ours).unwrap();
    let at_75 = weight_plan(&real, &desc, None, 0.75, ContrastiveMode::Ours).unwrap();
    let boundary_ok = at_half.weight(0, 2) == 0.0
        && at_half.weight(0, 1) == 0.0
        && at_75.weight(0, 3) == 0.0
        && at_75.weight(0, 2) == 0.25
        && at_75.weight(0, 1) == 0.0;
    ensure(
        nce_err <= 1e-12 && zero_beta == 0.0 && empty == 0.0 && boundary_ok,
        format!(
            "Regular vs InfoNCE max |diff| {nce_err:.2e} (tol 1e-12); beta=0 loss {zero_beta}; no-anchor loss {empty}; boundary weights exact: {boundary_ok}"
        ),
    )
}

// ---- synthetic benchmark ----------------------------------------------------

struct Bench {
    rows: Vec<MetricRow>,
    targets: Vec<String>,
}

impl Bench {
    fn mean(&self, exp: &str, target: &str, f: impl Fn(&MetricRow) -> Option<f64>) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.experiment_id == exp && r.target == target)
            .filter_map(f)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn acc(&self, exp: &str, target: &str) -> f64 {
        self.mean(exp, target, |r| Some(r.accuracy))
    }

    fn avg_acc(&self, exp: &str) -> f64 {
        self.targets.iter().map(|t| self.acc(exp, t)).sum::<f64>() / self.targets.len() as f64
    }
}

fn bench_config(root: &Path) -> RunConfig {
    let data = root.join("data");
    let bundle = generate(&SynthConfig::default()).unwrap();
    let domains: Vec<_> = bundle.sources.iter().collect();
    let manifest = write_dataset(&data, &bundle.name, &bundle.layout, &domains).unwrap();
    RunConfig {
        data: Some(manifest),
        seeds: (0..5).collect(),
        latent_dim: 32,
        lambda_inter: 1.0,
        lambda_intra: 1.0,
        beta: 0.8,
        epochs: 20,
        batch_size: 32,
        adist: true,
        ..RunConfig::default()
    }
}

fn run_benchmark(root: &Path) -> (Bench, f64) {
    let start = Instant::now();
    let cfg = RunConfig {
        out: root.join("loo"),
        ..bench_config(root)
    };
    let bundle = prepare_bundle(&cfg).unwrap();
    let exps: Vec<Experiment> = ["vanilla", "dg", "da"]
        .iter()
        .map(|m| Experiment::method(m).unwrap())
        .collect();
    let (rows, table) = run_loo(&cfg, &bundle, &exps).unwrap();
    (
        Bench {
            rows,
            targets: table.targets,
        },
        start.elapsed().as_secs_f64(),
    )
}

fn dg_trend(b: &Bench, secs: f64) -> Check {
    let gains: Vec<f64> = b
        .targets
        .iter()
        .map(|t| b.acc("rdcm-dg", t) - b.acc("vanilla", t))
        .collect();
    let wins = gains.iter().filter(|&&g| g >= 0.03).count();
    let avg_gain = b.avg_acc("rdcm-dg") - b.avg_acc("vanilla");
    let per: Vec<String> = b
        .targets
        .iter()
        .zip(&gains)
        .map(|(t, g)| {
            format!(
                "{t} {:.3}->{:.3} ({:+.1})",
                b.acc("vanilla", t),
                b.acc("rdcm-dg", t),
                100.0 * g
            )
        })
        .collect();
    ensure(
        wins >= 3 && avg_gain >= 0.03 && secs < 300.0,
        format!(
            "{}; avg {:.3}->{:.3} ({:+.1} pts); {wins}/4 targets gain >= 3 pts; benchmark {secs:.0}s for 60 runs incl. DA (limit 300s)",
            per.join(", "),
            b.avg_acc("vanilla"),
            b.avg_acc("rdcm-dg"),
            100.0 * avg_gain
        ),
    )
}

fn da_ge_dg(b: &Bench) -> Check {
    let (dg, da) = (b.avg_acc("rdcm-dg"), b.avg_acc("rdcm-da"));
    ensure(
        da >= dg,
        format!("average over 4 targets x 5 seeds: DA {da:.4} vs DG {dg:.4}"),
    )
}

fn adist_trend(b: &Bench) -> Check {
    let ad = |e: &str, t: &str| b.mean(e, t, |r| r.a_distance);
    let lower = b
        .targets
        .iter()
        .filter(|t| ad("rdcm-da", t) <= ad("vanilla", t))
        .count();
    let all: Vec<f64> = b.rows.iter().filter_map(|r| r.a_distance).collect();
    let in_range = all.len() == b.rows.len() && all.iter().all(|v| (1.0..=2.0).contains(v));
    let per: Vec<String> = b
        .targets
        .iter()
        .map(|t| format!("{t} {:.3} vs {:.3}", ad("vanilla", t), ad("rdcm-da", t)))
        .collect();
    ensure(
        lower >= 3 && in_range,
        format!(
            "Vanilla vs DA: {}; DA lower on {lower}/4; all {} values in [1,2]: {in_range}",
            per.join(", "),
            all.len()
        ),
    )
}

fn ablation(root: &Path, bench: &Bench) -> Check {
    let cfg = RunConfig {
        out: root.join("ablation"),
        seeds: vec![0, 1],
        adist: false,
        ..bench_config(&root.join("ablation-data"))
    };
    let bundle = prepare_bundle(&cfg).unwrap();
    let (rows, table) = run_loo(&cfg, &bundle, &Experiment::ablation(Mode::Dg)).unwrap();
    let summary = fs::read_to_string(cfg.out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    let expected = ["rdcm-dg", "w/o-inter", "w/o-cross", "w/o-both"];
    let shape_ok = lines.len() == 5
        && lines[0] == "method,d0,d1,d2,d3,Avg"
        && lines[1..]
            .iter()
            .zip(expected)
            .all(|(l, m)| l.starts_with(&format!("{m},")) && l.split(',').count() == 6);

    // w/o-both against the Vanilla runs of the main benchmark.
    let vanilla_dir = root.join("loo").join("runs").join("vanilla");
    let both_dir = cfg.out.join("runs").join(run_dir_name("w/o-both"));
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for r in rows.iter().filter(|r| r.experiment_id == "w/o-both") {
        let v = bench
            .rows
            .iter()
            .find(|v| v.experiment_id == "vanilla" && v.target == r.target && v.seed == r.seed)
            .unwrap();
        let pa = fs::read(seed_dir(&vanilla_dir.join(&r.target), r.seed).join("params.bin")).unwrap();
        let pb = fs::read(seed_dir(&both_dir.join(&r.target), r.seed).join("params.bin")).unwrap();
        if v.accuracy.to_bits() != r.accuracy.to_bits() || pa != pb {
            mismatches.push(format!("{}/seed {}", r.target, r.seed));
        }
        compared += 1;
    }
    let cells: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.method, r.avg.0))
        .collect();
    ensure(
        shape_ok && mismatches.is_empty() && compared == 8,
        format!(
            "4-row table ok: {shape_ok} ({}); w/o-both vs Vanilla: {compared} runs compared, accuracy and params.bin bitwise equal except {:?}",
            cells.join(", "),
            mismatches
        ),
    )
}

// ---- CLI determinism --------------------------------------------------------

fn rdcm(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rdcm")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "rdcm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// SHA-256 of every file under `dir`, keyed by relative path. Report files
/// carry wall-clock timings and are skipped.
fn digests(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "report.json" && n != "config.json") {
                let hash = Sha256::digest(fs::read(&p).unwrap());
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), format!("{hash:x}"));
            }
        }
    }
    out
}

fn cli_determinism(root: &Path) -> Check {
    let cfg = root.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"latent_dim": 8, "epochs": 2, "lambda_inter": 1.0, "lambda_intra": 1.0, "beta": 0.8,
            "synth": {"samples_per_domain": 60}}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut checked = Vec::new();
    let mut differing = Vec::new();
    let mut runs: Vec<BTreeMap<PathBuf, String>> = Vec::new();
    for rep in 0..2 {
        let base = root.join(format!("rep{rep}"));
        let p = |s: &str| base.join(s).to_str().unwrap().to_string();
        let data = p("data");
        let manifest = format!("{data}/manifest.json");
        rdcm(&["synth", "--config", cfg, "--seed", "3", "--out", &data]);
        rdcm(&[
            "train",
            "--config",
            cfg,
            "--data",
            &manifest,
            "--target",
            "d1",
            "--mode",
            "da",
            "--seed",
            "0,1",
            "--adist",
            "--out",
            &p("train"),
        ]);
        rdcm(&[
            "loo",
            "--config",
            cfg,
            "--data",
            &manifest,
            "--seed",
            "0,1",
            "--methods",
            "vanilla,dg",
            "--out",
            &p("loo"),
        ]);
        rdcm(&[
            "loo",
            "--config",
            cfg,
            "--data",
            &manifest,
            "--seed",
            "0",
            "--ablation",
            "--out",
            &p("ablation"),
        ]);
        rdcm(&[
            "sweep-beta",
            "--config",
            cfg,
            "--data",
            &manifest,
            "--target",
            "d0",
            "--betas",
            "0,0.5,0.9",
            "--seed",
            "0",
            "--out",
            &p("sweep"),
        ]);
        rdcm(&[
            "mmd",
            "--data",
            &manifest,
            "--pair",
            "d0,d2",
            "--variant",
            "fusion",
            "--out",
            &p("mmd"),
        ]);
        rdcm(&[
            "adist",
            "--data",
            &manifest,
            "--domains",
            "d0,d2",
            "--params",
            &p("train/seed-0"),
            "--out",
            &p("adist"),
        ]);
        runs.push(digests(&base));
    }
    for (path, hash) in &runs[0] {
        if path.extension().is_some_and(|e| e == "csv") {
            checked.push(path.display().to_string());
        }
        if runs[1].get(path) != Some(hash) {
            differing.push(path.display().to_string());
        }
    }
    let same_set = runs[0].len() == runs[1].len();
    ensure(
        differing.is_empty() && same_set && checked.len() >= 7,
        format!(
            "synth/train/loo/ablation/sweep-beta/mmd/adist run twice: {} files hashed ({} CSVs), differing: {:?}",
            runs[0].len(),
            checked.len(),
            differing
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {name}: {detail}");
        results.push((name, r));
    };

    run("MMD oracle equivalence", &mut mmd_oracle_equivalence);
    run("MMD identities", &mut mmd_identities);
    run("Gradient suite", &mut gradient_suite);
    run("Contrastive identities", &mut contrastive_identities);
    let bench = catch_unwind(AssertUnwindSafe(|| run_benchmark(root)));
    match &bench {
        Ok((b, secs)) => {
            run("Synthetic DG trend", &mut || dg_trend(b, *secs));
            run("Synthetic DA >= DG", &mut || da_ge_dg(b));
            run("A-distance trend", &mut || adist_trend(b));
            run("Ablation structure", &mut || ablation(root, b));
        }
        Err(_) => {
            for name in [
                "Synthetic DG trend",
                "Synthetic DA >= DG",
                "A-distance trend",
                "Ablation structure",
            ] {
                run(name, &mut || Err("benchmark run panicked".into()));
            }
        }
    }
    run("CLI determinism", &mut || cli_determinism(root));

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
