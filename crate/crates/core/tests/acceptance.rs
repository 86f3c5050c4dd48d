//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2, 3, 7 and 8 are correctness properties: a failure makes
//! the process exit non-zero. Criteria 4, 5 and 6 are empirical
//! directional comparisons: their verdict is printed and reported, but a
//! FAIL there is a measurement, not a broken build.
//!
//! `SPARSEFEAT_ACCEPT=1,2,7` limits the run to some criteria.
//! `SPARSEFEAT_CIFAR10=<dir>` uses the real CIFAR-10 binaries (classes 0
//! and 1) for criteria 4 and 5 instead of the synthetic stroke images.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsefeat::arch::{Arch, PenaltySite, Protocol};
use sparsefeat::data::{load_cifar10, preprocess_cifar_split, synthetic_strokes, Dataset, Split};
use sparsefeat::dpsd::{conv_dpsd_train, dpsd_train, DpsdConfig, EpochStats};
use sparsefeat::encoder::{ConvEncoder, EncoderKind};
use sparsefeat::gradcheck::{check_slice_fn, check_tensor_fn, relative_error};
use sparsefeat::invert::{hallucinate, input_loss_grad, normalized_mse, paired_models, toy_inversion_arch};
use sparsefeat::invert::{InversionTask, InvertInit};
use sparsefeat::linalg::Matrix;
use sparsefeat::net::{evaluate, Model, Penalty};
use sparsefeat::nonlin::{soft_shrink, soft_shrink_backward, ShrinkParams};
use sparsefeat::norm::{local_cn, local_cn_backward, local_cn_cached, FloorMode, NormConfig};
use sparsefeat::pool::{pool, pool_backward, pool_cached, pyramid_pool, pyramid_pool_backward};
use sparsefeat::pool::{PoolSpec, PyramidSpec};
use sparsefeat::solver::{fista_solve, ista_solve, Lipschitz, SmoothTerm, SolveConfig};
use sparsefeat::train::{metrics_csv, pretrain, run_protocol, Labeled, TrainConfig};
use sparsefeat::{ConnectionTable, Tensor3};

use common::{lasso_cd, lasso_objective, standardized_gray};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn shapes() -> Verdict {
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: (usize, usize, usize), want: (usize, usize, usize)| {
        if got != want {
            bad.push(format!("{name}: {got:?} != {want:?}"));
        }
    };
    let caltech = Arch::preset("caltech", 101).unwrap().shapes().unwrap();
    expect("caltech input", caltech[0].input, (1, 143, 143));
    expect("caltech stage 1", caltech[0].output, (64, 26, 26));
    expect("caltech stage 2 encoder", caltech[1].encoded, (256, 18, 18));
    expect("caltech stage 2", caltech[1].output, (256, 4, 4));
    let pyr_len = Arch::preset("caltech-pyramid", 101).unwrap().feature_len().unwrap();
    expect("caltech pyramid length", (pyr_len, 1, 1), (256 * (16 + 9 + 4 + 1), 1, 1));
    let cifar = Arch::preset("cifar", 10).unwrap().shapes().unwrap();
    expect("cifar input", cifar[0].input, (3, 32, 32));
    expect("cifar stage 1", cifar[0].output, (64, 12, 12));
    expect("cifar stage 2", cifar[1].output, (256, 4, 4));
    for name in ["inversion", "inversion-nocn"] {
        let inv = Arch::preset(name, 101).unwrap().shapes().unwrap();
        expect(name, inv[0].output, (64, 66, 66));
        expect(name, inv[1].output, (128, 28, 28));
    }
    if bad.is_empty() {
        verdict(true, "caltech, caltech pyramid (7680), cifar and inversion chains exact")
    } else {
        verdict(false, bad.join("; "))
    }
}

// ---------------------------------------------------------------- 2

fn solver() -> Verdict {
    let mut r = rng(2);
    // identity dictionary: soft-threshold at λ/2
    let lambda = 0.7;
    let x: Vec<f64> = Tensor3::random_normal(1, 1, 40, 1.0, &mut r).into_vec();
    let id = Matrix::identity(40);
    let cfg = SolveConfig {
        lambda_l1: lambda,
        max_iter: 500,
        tol: f64::MIN_POSITIVE,
        lipschitz: Lipschitz::PowerIteration,
    };
    let sol = fista_solve(&SmoothTerm::recon(&x, &id), &cfg, &vec![0.0; 40]).unwrap();
    let closed: Vec<f64> = x
        .iter()
        .map(|v| v.signum() * (v.abs() - lambda / 2.0).max(0.0))
        .collect();
    let id_err = sol.z.iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut worst_oracle: f64 = 0.0;
    let mut worst_iters = 0;
    let mut reached = 0;
    let mut strict = 0;
    for _ in 0..50 {
        let mut d = Matrix::random_normal(8, 16, &mut r);
        d.normalize_columns();
        let x = Tensor3::random_normal(1, 1, 8, 1.0, &mut r).into_vec();
        let lambda = 0.5;
        let h = SmoothTerm::recon(&x, &d);
        let long = SolveConfig {
            lambda_l1: lambda,
            max_iter: 20_000,
            tol: 1e-15,
            lipschitz: Lipschitz::PowerIteration,
        };
        let f = fista_solve(&h, &long, &[0.0; 16]).unwrap();
        let oracle = lasso_objective(&d, &x, &lasso_cd(&d, &x, lambda), lambda);
        worst_oracle = worst_oracle.max((f.objective() - oracle).abs());

        let capped = SolveConfig {
            max_iter: 200,
            tol: f64::MIN_POSITIVE,
            ..long
        };
        let ista = ista_solve(&h, &capped, &[0.0; 16]).unwrap().objective();
        let fast = fista_solve(&h, &SolveConfig { max_iter: 60, ..capped }, &[0.0; 16]).unwrap();
        // objectives are compared at the solver's relative tolerance
        let slack = 1e-6 * ista.abs().max(1.0);
        if let Some(i) = fast.trace.iter().position(|&v| v <= ista + slack) {
            reached += 1;
            worst_iters = worst_iters.max(i);
        }
        strict += fast.trace.iter().any(|&v| v <= ista) as usize;
    }
    let pass = id_err < 1e-8 && worst_oracle < 1e-5 && reached == 50;
    verdict(
        pass,
        format!(
            "identity max err {id_err:.2e}; oracle max gap {worst_oracle:.2e} over 50; \
             FISTA-60 within 1e-6 rel. of ISTA-200 on {reached}/50 (worst at {worst_iters}), \
             at or below it exactly on {strict}/50"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn perturb_si(e: &mut ConvEncoder, r: &mut ChaCha8Rng) {
    let n = e.n_out();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                e.s.set(i, j, 0.1 * r.random_range(-1.0..1.0));
            }
        }
    }
    e.shrink = ShrinkParams::new((0..n).map(|_| r.random_range(0.02..0.2)).collect(), 4.0).unwrap();
}

/// Analytic and numeric gradient of `u·F(x)` over the encoder parameters,
/// skipping the pinned inhibition diagonal.
fn encoder_param_error(e: &ConvEncoder, x: &Tensor3, u: &Tensor3) -> f64 {
    let (_, cache) = e.forward_cached(x).unwrap();
    let (g, _) = e.backward(&cache, u, false).unwrap();
    let analytic = e.flatten_grad(&g);
    let p0 = e.params();
    let mut probe = e.clone();
    let numeric = sparsefeat::gradcheck::numeric_gradient(
        |p| {
            probe.set_params(p);
            probe.forward(x).unwrap().dot(u)
        },
        &p0,
        1e-6,
    );
    let keep = pinned_mask(e);
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&keep).filter(|(_, &k)| k).map(|(a, _)| *a).collect() };
    relative_error(&pick(&analytic), &pick(&numeric))
}

fn pinned_mask(e: &ConvEncoder) -> Vec<bool> {
    let nw = e.bank.weights().len();
    let n = e.n_out();
    (0..e.params().len())
        .map(|j| match e.kind {
            EncoderKind::Si if j >= nw && j < nw + n * n => (j - nw) / n != (j - nw) % n,
            _ => true,
        })
        .collect()
}

fn toy_model(seed: u64) -> Model {
    let mut m = Model::init(&Arch::preset("toy", 3).unwrap(), seed).unwrap();
    let mut r = rng(seed + 100);
    for e in &mut m.encoders {
        perturb_si(e, &mut r);
    }
    let h = Tensor3::random_normal(1, 1, m.head.u.len(), 0.5, &mut r);
    m.head.u.copy_from_slice(h.data());
    m.head.r = vec![-0.1, 0.0, 0.1];
    m
}

fn full_net_error(m: &Model, x: &Tensor3, penalty: Option<Penalty>) -> f64 {
    let (_, g) = m.loss_grad(x, 1, penalty).unwrap();
    let analytic = m.flatten_grad(&g);
    let mut probe = m.clone();
    let numeric = sparsefeat::gradcheck::numeric_gradient(
        |p| {
            probe.set_params(p);
            probe.loss_grad(x, 1, penalty).unwrap().0.loss
        },
        &m.params(),
        1e-6,
    );
    let mut keep = Vec::new();
    for e in &m.encoders {
        keep.extend(pinned_mask(e));
    }
    keep.resize(analytic.len(), true);
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&keep).filter(|(_, &k)| k).map(|(a, _)| *a).collect() };
    relative_error(&pick(&analytic), &pick(&numeric))
}

fn gradients() -> Verdict {
    let mut r = rng(3);
    let mut errs: Vec<(&str, f64, f64)> = Vec::new();

    // soft shrinkage: input, thresholds and smoothness
    let x: Vec<f64> = (0..30).map(|_| r.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..30).map(|_| r.random_range(0.05..0.8)).collect();
    let u: Vec<f64> = (0..30).map(|_| r.random_range(-1.0..1.0)).collect();
    let p = ShrinkParams::new(b.clone(), 3.0).unwrap();
    let sg = soft_shrink_backward(&x, &p, &u);
    let lin = |y: Vec<f64>| -> f64 { y.iter().zip(&u).map(|(a, b)| a * b).sum() };
    let ex = check_slice_fn(|x| lin(soft_shrink(x, &p).unwrap()), &x, &sg.dx, 1e-6);
    let eb = check_slice_fn(
        |b| lin(soft_shrink(&x, &ShrinkParams::new(b.to_vec(), 3.0).unwrap()).unwrap()),
        &b,
        &sg.db,
        1e-6,
    );
    let ebeta = check_slice_fn(
        |beta| lin(soft_shrink(&x, &ShrinkParams::new(b.clone(), beta[0]).unwrap()).unwrap()),
        &[3.0],
        &[sg.dbeta],
        1e-6,
    );
    errs.push(("soft-shrink", ex.max(eb).max(ebeta), 1e-4));

    // encoders: parameters and input
    let table = ConnectionTable::random(3, 5, 2, &mut r).unwrap();
    let x = Tensor3::random_normal(3, 8, 8, 1.0, &mut r);
    let u = Tensor3::random_normal(5, 6, 6, 1.0, &mut r);
    for kind in [EncoderKind::Si, EncoderKind::Tanh] {
        let mut e = ConvEncoder::init(kind, table.clone(), 3, &mut r);
        match kind {
            EncoderKind::Si => perturb_si(&mut e, &mut r),
            EncoderKind::Tanh => {
                e.gain = (0..5).map(|_| r.random_range(0.5..1.5)).collect();
                e.bias = (0..5).map(|_| r.random_range(-0.3..0.3)).collect();
            }
        }
        let (_, cache) = e.forward_cached(&x).unwrap();
        let (_, gin) = e.backward(&cache, &u, true).unwrap();
        let ein = check_tensor_fn(|x| e.forward(x).unwrap().dot(&u), &x, &gin.unwrap(), 1e-6);
        let ep = encoder_param_error(&e, &x, &u);
        errs.push((if kind == EncoderKind::Si { "encoder si" } else { "encoder tanh" }, ein.max(ep), 1e-4));
    }

    // contrast normalization
    let cfg = NormConfig {
        window: 5,
        sigma: 1.0,
        floor: FloorMode::MeanSigma,
    };
    let t = Tensor3::random_normal(3, 9, 9, 1.0, &mut r);
    let u = Tensor3::random_normal(3, 9, 9, 1.0, &mut r);
    let (_, cache) = local_cn_cached(&t, &cfg).unwrap();
    let g = local_cn_backward(&cache, &u, &cfg).unwrap();
    errs.push(("contrast norm", check_tensor_fn(|t| local_cn(t, &cfg).unwrap().dot(&u), &t, &g, 1e-6), 1e-4));

    // pooling
    let t = Tensor3::random_normal(2, 10, 10, 1.0, &mut r);
    let mut pool_err: f64 = 0.0;
    for spec in [PoolSpec::avg(3, 2), PoolSpec::max(3, 2), PoolSpec::avg(4, 3)] {
        let (out, cache) = pool_cached(&t, &spec).unwrap();
        let (m, h, w) = out.shape();
        let u = Tensor3::random_normal(m, h, w, 1.0, &mut r);
        let g = pool_backward(&cache, &u, &spec).unwrap();
        pool_err = pool_err.max(check_tensor_fn(|t| pool(t, &spec).unwrap().dot(&u), &t, &g, 1e-6));
    }
    let pyr = PyramidSpec::new(vec![(3, 1), (4, 2), (10, 10)]).unwrap();
    let u: Vec<f64> = (0..pyr.output_len(2, 10, 10).unwrap()).map(|_| r.random_range(-1.0..1.0)).collect();
    let g = pyramid_pool_backward((2, 10, 10), &u, &pyr).unwrap();
    pool_err = pool_err.max(check_tensor_fn(
        |t| pyramid_pool(t, &pyr).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum(),
        &t,
        &g,
        1e-6,
    ));
    errs.push(("pooling", pool_err, 1e-4));

    // full toy network, with and without the sparse-state penalty
    let m = toy_model(5);
    let x = Tensor3::random_normal(1, 12, 12, 1.0, &mut r);
    let penalty = Penalty {
        lambda: 0.4,
        site: PenaltySite::PostPool,
    };
    let net = full_net_error(&m, &x, None).max(full_net_error(&m, &x, Some(penalty)));
    errs.push(("full network", net, 1e-3));

    // inversion input gradient
    let target = m.stage_output(&Tensor3::random_normal(1, 12, 12, 1.0, &mut r)).unwrap();
    let (_, g) = input_loss_grad(&m, &x, &target).unwrap();
    let inv = check_tensor_fn(|x| input_loss_grad(&m, x, &target).unwrap().0, &x, &g, 1e-6);
    errs.push(("inversion input", inv, 1e-4));

    let pass = errs.iter().all(|(_, e, tol)| e < tol);
    let detail = errs
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, detail)
}

// ---------------------------------------------------------------- 4 and 5

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Desk {
    train: Dataset,
    test: Dataset,
    source: String,
}

fn desk_data() -> Desk {
    let (train, test, source) = match std::env::var_os("SPARSEFEAT_CIFAR10") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let tr = load_cifar10(&dir, Split::Train).unwrap().subset(&[0, 1], Some(500)).unwrap();
            let te = load_cifar10(&dir, Split::Test).unwrap().subset(&[0, 1], Some(200)).unwrap();
            (tr, te, format!("CIFAR-10 classes 0/1 from {}", dir.display()))
        }
        None => {
            let (x, y) = synthetic_strokes(700, 2024);
            let names = vec!["horizontal".to_string(), "vertical".to_string()];
            let tr = Dataset::new(x[..1000].to_vec(), y[..1000].to_vec(), names.clone(), Split::Train).unwrap();
            let te = Dataset::new(x[1000..].to_vec(), y[1000..].to_vec(), names, Split::Test).unwrap();
            (tr, te, "synthetic strokes".to_string())
        }
    };
    let (train, test, _) = preprocess_cifar_split(&train, &test).unwrap();
    Desk { train, test, source }
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        epochs: 4,
        lr: 1e-3,
        pretrain_patches: 500,
        solver_max_iter: 50,
        ..TrainConfig::default()
    };
    cfg.head.l2 = 1e-2;
    cfg
}

#[derive(Debug, Clone, Copy)]
struct RunStats {
    accuracy: f64,
    post_pool_l1: f64,
}

fn desk_run(desk: &Desk, arch: &Arch, protocol: &str, seed: u64) -> RunStats {
    let protocol: Protocol = protocol.parse().unwrap();
    let train = Labeled::new(&desk.train.samples, &desk.train.labels).unwrap();
    let out = run_protocol(arch, &protocol, train, None, &desk_config(seed)).unwrap();
    let (_, accuracy) = evaluate(&out.model, &desk.test.samples, &desk.test.labels).unwrap();
    let post_pool_l1 = desk
        .test
        .samples
        .iter()
        .map(|x| out.model.forward(x).unwrap().mean_activation_l1(PenaltySite::PostPool))
        .sum::<f64>()
        / desk.test.len() as f64;
    RunStats {
        accuracy: 100.0 * accuracy,
        post_pool_l1,
    }
}

fn protocols(desk: &Desk, d_runs: &mut Vec<RunStats>) -> Verdict {
    let arch = Arch::preset("cifar-half", 2).unwrap();
    println!("  data: {}", desk.source);
    println!("  seed      U      D     D+     U+     R+  R+L1 | L1(R+)  L1(R+L1)");
    let (mut a, mut b, mut l1_lower) = (0, 0, 0);
    let (mut rl1_acc, mut up_acc) = (0.0, 0.0);
    for &seed in &DESK_SEEDS {
        let run = |p: &str| desk_run(desk, &arch, p, seed);
        let (u, d, dp, up, rp, rl) = (run("U"), run("D"), run("D+"), run("U+"), run("R+"), run("R+L1"));
        println!(
            "  {seed:>4} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>5.2} | {:.5} {:.5}",
            u.accuracy, d.accuracy, dp.accuracy, up.accuracy, rp.accuracy, rl.accuracy, rp.post_pool_l1, rl.post_pool_l1
        );
        a += (d.accuracy >= u.accuracy) as usize;
        b += (dp.accuracy >= d.accuracy) as usize;
        l1_lower += (rl.post_pool_l1 < rp.post_pool_l1) as usize;
        rl1_acc += rl.accuracy / DESK_SEEDS.len() as f64;
        up_acc += up.accuracy / DESK_SEEDS.len() as f64;
        d_runs.push(d);
    }
    let gap = rl1_acc - up_acc;
    let pass = a >= 3 && b >= 3 && l1_lower == 5 && gap.abs() <= 5.0;
    verdict(
        pass,
        format!(
            "(a) D>=U on {a}/5; (b) D+>=D on {b}/5; (c) L1(R+L1)<L1(R+) on {l1_lower}/5, \
             mean acc R+L1 {rl1_acc:.2} vs U+ {up_acc:.2} (gap {gap:+.2})"
        ),
    )
}

fn pyramid(desk: &Desk, plain: &[RunStats]) -> Verdict {
    let arch = Arch::preset("cifar-half-pyramid", 2).unwrap();
    let plain_arch = Arch::preset("cifar-half", 2).unwrap();
    let mut wins = 0;
    for (i, &seed) in DESK_SEEDS.iter().enumerate() {
        // criterion 4 already ran the plain-pooling D runs with the same config
        let avg = plain.get(i).copied().unwrap_or_else(|| desk_run(desk, &plain_arch, "D", seed));
        let pyr = desk_run(desk, &arch, "D", seed);
        println!("  seed {seed}: avg {:.2}  pyramid {:.2}", avg.accuracy, pyr.accuracy);
        wins += (pyr.accuracy >= avg.accuracy) as usize;
    }
    verdict(wins >= 3, format!("pyramid >= average pooling on {wins}/5 seeds (protocol D)"))
}

// ---------------------------------------------------------------- 6

fn inversion() -> Verdict {
    let arch = toy_inversion_arch();
    let side = arch.input.1;
    let (mut cn, mut nocn) = paired_models(&arch, 1).unwrap();
    let (imgs, labels) = synthetic_strokes(20, 4242);
    let corpus: Vec<Tensor3> = imgs.iter().map(|x| standardized_gray(x, side)).collect();
    let cfg = TrainConfig {
        seed: 1,
        pretrain_patches: 3000,
        solver_max_iter: 50,
        ..TrainConfig::default()
    };
    pretrain(&mut cn, &"U".parse().unwrap(), Labeled::new(&corpus, &labels).unwrap(), &cfg).unwrap();
    nocn.encoders = cn.encoders.clone();

    let (test, _) = synthetic_strokes(2, 777);
    let mut wins = 0;
    let mut monotone = true;
    let mut lines = Vec::new();
    for (i, img) in test.iter().enumerate() {
        let x = standardized_gray(img, side);
        let mut errs = Vec::new();
        for model in [&cn, &nocn] {
            let task = InversionTask {
                model,
                target: model.stage_output(&x).unwrap(),
                init: InvertInit::Random(100 + i as u64),
                steps: 400,
                step: 1.0,
            };
            let inv = hallucinate(&task).unwrap();
            monotone &= inv.trace.windows(2).all(|w| w[1] <= w[0]);
            errs.push((normalized_mse(&inv.image, &x).unwrap(), *inv.trace.last().unwrap()));
        }
        wins += (errs[0].0 < errs[1].0) as usize;
        lines.push(format!(
            "  image {i}: nmse CN {:.4} (loss {:.3}) vs no-CN {:.4} (loss {:.3})",
            errs[0].0, errs[0].1, errs[1].0, errs[1].1
        ));
    }
    for l in lines {
        println!("{l}");
    }
    verdict(
        wins >= 3 && monotone,
        format!("CN lower reconstruction error on {wins}/4 images; traces monotone: {monotone}"),
    )
}

// ---------------------------------------------------------------- 7

fn determinism() -> Verdict {
    let arch = Arch::preset("toy", 2).unwrap();
    let (imgs, labels) = synthetic_strokes(40, 99);
    let xs: Vec<Tensor3> = imgs.iter().map(|x| standardized_gray(x, 12)).collect();
    let (train, test) = (Labeled::new(&xs[..60], &labels[..60]).unwrap(), Labeled::new(&xs[60..], &labels[60..]).unwrap());
    let cfg = TrainConfig {
        seed: 11,
        epochs: 3,
        pretrain_patches: 300,
        solver_max_iter: 50,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    for proto in ["Dc+L1D+L1", "U+", "R"] {
        let protocol: Protocol = proto.parse().unwrap();
        let mut bytes = Vec::new();
        for run in 0..2 {
            let out = run_protocol(&arch, &protocol, train, Some(test), &cfg).unwrap();
            let model_path = dir.path().join(format!("model{run}.bin"));
            out.model.save(&model_path).unwrap();
            let metrics_path = dir.path().join(format!("metrics{run}.csv"));
            std::fs::write(&metrics_path, metrics_csv(&out.metrics)).unwrap();
            bytes.push((std::fs::read(&model_path).unwrap(), std::fs::read(&metrics_path).unwrap()));
        }
        if bytes[0] != bytes[1] {
            mismatches.push(proto);
        }
    }
    if mismatches.is_empty() {
        verdict(true, "metrics CSV and model file bit-identical for Dc+L1 D+L1, U+, R")
    } else {
        verdict(false, format!("runs differ for {mismatches:?}"))
    }
}

// ---------------------------------------------------------------- 8

fn dpsd_invariants() -> Verdict {
    let (imgs, labels) = synthetic_strokes(60, 31);
    let gray: Vec<Tensor3> = imgs.iter().map(|x| standardized_gray(x, 32)).collect();
    let mut r = rng(8);
    let crops = |side: usize, count: usize, r: &mut ChaCha8Rng| -> (Vec<Tensor3>, Vec<usize>) {
        (0..count)
            .map(|_| {
                let n = r.random_range(0..gray.len());
                let (i, j) = (r.random_range(0..=32 - side), r.random_range(0..=32 - side));
                (gray[n].crop(i, j, side, side).unwrap(), labels[n])
            })
            .unzip()
    };
    let (patches, patch_labels) = crops(9, 400, &mut r);
    let (regions, region_labels) = crops(14, 60, &mut r);

    let mut runs: Vec<(&str, Vec<EpochStats>)> = Vec::new();
    for (name, disc) in [("patch U", false), ("patch D", true)] {
        let mut cfg = DpsdConfig::new(EncoderKind::Si, 16, 9);
        cfg.discriminative = disc;
        cfg.epochs = 5;
        cfg.seed = 3;
        let lab = disc.then_some(&patch_labels[..]);
        runs.push((name, dpsd_train(&patches, lab, &cfg).unwrap().history));
    }
    for (name, disc) in [("conv U", false), ("conv D", true)] {
        let mut cfg = DpsdConfig::new(EncoderKind::Si, 8, 5);
        cfg.convolutional = true;
        cfg.discriminative = disc;
        cfg.epochs = 4;
        cfg.seed = 4;
        cfg.solver_max_iter = 100;
        let lab = disc.then_some(&region_labels[..]);
        runs.push((name, conv_dpsd_train(&regions, lab, &cfg).unwrap().history));
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, h) in &runs {
        let dev = h.iter().map(|s| s.max_norm_deviation).fold(0.0, f64::max);
        let (first, last) = (h[0].mean_prediction_error, h[h.len() - 1].mean_prediction_error);
        pass &= dev <= 1e-10 && last < first;
        parts.push(format!("{name}: norm dev {dev:.1e}, prediction {first:.4} -> {last:.4}"));
    }
    verdict(pass, parts.join("; "))
}

// ----------------------------------------------------------------

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("SPARSEFEAT_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |c: usize| selected.as_ref().is_none_or(|s| s.contains(&c));
    let names = [
        "shape conformance",
        "solver correctness",
        "gradient integrity",
        "protocol directions",
        "pyramid pooling",
        "inversion study",
        "determinism",
        "dpsd invariants",
    ];
    // correctness criteria gate the exit status; the rest are measurements
    let gating = [true, true, true, false, false, false, true, true];

    let mut desk: Option<Desk> = None;
    let mut d_runs = Vec::new();
    let mut failed_gate = false;
    let mut summary = Vec::new();
    for c in 1..=8 {
        if !wanted(c) {
            continue;
        }
        println!("criterion {c}: {}", names[c - 1]);
        let t0 = Instant::now();
        let v = match c {
            1 => shapes(),
            2 => solver(),
            3 => gradients(),
            4 => protocols(desk.get_or_insert_with(desk_data), &mut d_runs),
            5 => pyramid(desk.get_or_insert_with(desk_data), &d_runs),
            6 => inversion(),
            7 => determinism(),
            _ => dpsd_invariants(),
        };
        let line = format!(
            "{} criterion {c} {} ({:.1} s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            names[c - 1],
            t0.elapsed().as_secs_f64(),
            v.detail
        );
        println!("{line}");
        failed_gate |= !v.pass && gating[c - 1];
        summary.push(line);
    }
    println!("\nacceptance summary");
    for l in &summary {
        println!("{l}");
    }
    if failed_gate {
        std::process::exit(1);
    }
}
