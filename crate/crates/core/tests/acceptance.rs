//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; trailing numbers select
//! criteria, e.g. `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use htcn::cli::{run, Cli, DataSource, RunConfig};
use htcn::data::{make_synthetic, LabeledImageSet};
use htcn::loss::{
    assignment_entropy, cluster_infonce_pair, cluster_loss, pairwise_mse, symmetrized_instance_loss,
    ClusterLossOptions, ClusterMatrices, ExchangeMode, InstanceLossInputs, MirroredInputs, Temperature,
};
use htcn::metrics::{acc, ari, nmi, NmiNorm};
use htcn::model::{BackboneArch, BackboneSpec, HeadNorm, HeadSpec, ArchSpec};
use htcn::numerics::{grad_check_many, softmax_rows, Graph, Tensor};
use htcn::trainer::{
    build_objective, median, parse_epoch_log, run_variant, train_step, EpochRecord, Precision, TrainConfig,
    TrainState, Variant,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");

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

fn rand_t(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_q(r: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<f64> {
    let logits = Tensor::new(vec![n, m], (0..n * m).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    softmax_rows(&logits)
}

fn row(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    let c = t.shape()[1];
    t.data()[i * c..(i + 1) * c].to_vec()
}

fn col(t: &Tensor<f64>, j: usize) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c + j]).collect()
}

// independent scalar oracles

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn naive_pair_mse(y: &Tensor<f64>, z: &Tensor<f64>) -> f64 {
    let n = y.shape()[0];
    let mut s = 0.0;
    for i in 0..n {
        let (yi, zi) = (row(y, i), row(z, i));
        let ny = yi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nz = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut d = 0.0;
        for k in 0..yi.len() {
            let e = yi[k] / ny - zi[k] / nz;
            d += e * e;
        }
        s += d;
    }
    s / n as f64
}

fn naive_instance(t: &[Tensor<f64>; 6]) -> f64 {
    let [y_a, y_c, z_b, y_b, z_a, z_c] = t;
    naive_pair_mse(y_a, z_b) + naive_pair_mse(y_c, z_b) + naive_pair_mse(y_b, z_a) + naive_pair_mse(y_b, z_c)
}

fn naive_entropy(qx: &Tensor<f64>, qy: &Tensor<f64>) -> f64 {
    let mut h = 0.0;
    for q in [qx, qy] {
        let m = q.shape()[1];
        let total: f64 = q.data().iter().sum();
        for j in 0..m {
            let p = col(q, j).iter().sum::<f64>() / total;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
    }
    h
}

fn naive_cluster_pair(qx: &Tensor<f64>, qy: &Tensor<f64>, tau: f64, entropy: bool) -> f64 {
    let m = qx.shape()[1];
    let side = |u: &Tensor<f64>, v: &Tensor<f64>| {
        let mut s = 0.0;
        for i in 0..m {
            let ui = col(u, i);
            let pos = (cos(&ui, &col(v, i)) / tau).exp();
            let mut denom = 0.0;
            for j in 0..m {
                denom += (cos(&ui, &col(v, j)) / tau).exp();
                if j != i {
                    denom += (cos(&ui, &col(u, j)) / tau).exp();
                }
            }
            s += -(pos / denom).ln();
        }
        s
    };
    let l = (side(qx, qy) + side(qy, qx)) / (2 * m) as f64;
    if entropy {
        l - naive_entropy(qx, qy)
    } else {
        l
    }
}

fn graph_instance(t: &[Tensor<f64>; 6]) -> f64 {
    let mut g = Graph::new();
    let v: Vec<_> = t.iter().map(|x| g.constant(x.clone())).collect();
    let inputs = InstanceLossInputs {
        y_a: v[0],
        y_c: v[1],
        z_b: v[2],
    };
    let mirrored = MirroredInputs {
        y_b: v[3],
        z_a: v[4],
        z_c: v[5],
    };
    let l = symmetrized_instance_loss(&mut g, &inputs, Some(&mirrored), ExchangeMode::Exchange).unwrap();
    g.value(l).data()[0]
}

fn graph_cluster(q: &[Tensor<f64>; 3], tau: f64) -> f64 {
    let mut g = Graph::new();
    let m = ClusterMatrices {
        q_a: g.constant(q[0].clone()),
        q_b: g.constant(q[1].clone()),
        q_c: g.constant(q[2].clone()),
    };
    let l = cluster_loss(&mut g, &m, Temperature::new(tau).unwrap(), ClusterLossOptions::default()).unwrap();
    g.value(l).data()[0]
}

fn instance_case(r: &mut ChaCha8Rng) -> [Tensor<f64>; 6] {
    let n = r.random_range(1..=6);
    let d = r.random_range(2..=16);
    std::array::from_fn(|_| rand_t(r, n, d))
}

fn cluster_case(r: &mut ChaCha8Rng) -> ([Tensor<f64>; 3], f64) {
    let n = r.random_range(2..=6);
    let m = r.random_range(2..=4);
    (std::array::from_fn(|_| rand_q(r, n, m)), r.random_range(0.2..1.0))
}

fn c1_gradients() -> Verdict {
    let mut r = rng(11);
    let mut worst_i = 0.0f64;
    let mut worst_c = 0.0f64;
    let cases = 25;
    for _ in 0..cases {
        let t = instance_case(&mut r);
        let e = grad_check_many(
            |g, v| {
                let inputs = InstanceLossInputs {
                    y_a: v[0],
                    y_c: v[1],
                    z_b: v[2],
                };
                let mirrored = MirroredInputs {
                    y_b: v[3],
                    z_a: v[4],
                    z_c: v[5],
                };
                Ok(symmetrized_instance_loss(g, &inputs, Some(&mirrored), ExchangeMode::Exchange).unwrap())
            },
            &t,
            1e-5,
        )
        .unwrap();
        worst_i = worst_i.max(e);

        let (q, tau) = cluster_case(&mut r);
        let e = grad_check_many(
            |g, v| {
                let m = ClusterMatrices {
                    q_a: v[0],
                    q_b: v[1],
                    q_c: v[2],
                };
                Ok(cluster_loss(g, &m, Temperature::new(tau).unwrap(), ClusterLossOptions::default()).unwrap())
            },
            &q,
            1e-5,
        )
        .unwrap();
        worst_c = worst_c.max(e);
    }
    verdict(
        worst_i < 1e-4 && worst_c < 1e-4,
        format!("{cases} instances each; max rel err instance {worst_i:.2e}, cluster {worst_c:.2e} (< 1e-4)"),
    )
}

fn c2_oracles() -> Verdict {
    let mut r = rng(22);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = instance_case(&mut r);
        worst = worst.max((graph_instance(&t) - naive_instance(&t)).abs());
        let (q, tau) = cluster_case(&mut r);
        let oracle = naive_cluster_pair(&q[0], &q[1], tau, true) + naive_cluster_pair(&q[1], &q[2], tau, true);
        worst = worst.max((graph_cluster(&q, tau) - oracle).abs());
    }
    // two orthogonal one-hot columns at τ = 1: each column sees
    // e / (e + 1 + 1), so the loss is log(1 + 2/e)
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let (qx, qy) = (g.constant(eye.clone()), g.constant(eye));
    let terms = cluster_infonce_pair(&mut g, qx, qy, Temperature::new(1.0).unwrap(), ClusterLossOptions::default())
        .unwrap();
    let closed = (1.0 + 2.0 / std::f64::consts::E).ln();
    let got = g.value(terms.infonce).data()[0];
    let closed_err = (got - closed).abs();
    verdict(
        worst < 1e-9 && closed_err < 1e-9,
        format!(
            "100 instances max |diff| {worst:.2e}; orthogonal M=2 value {got:.10} vs log(1+2/e) = {closed:.10}"
        ),
    )
}

fn c3_boundaries() -> Verdict {
    let y = [0.3, -1.2, 2.0];
    let orth = [1.2, 0.3, 0.0];
    let opp: Vec<f64> = y.iter().map(|v| -2.5 * v).collect();
    let mse = [pairwise_mse(&y, &y), pairwise_mse(&y, &orth), pairwise_mse(&y, &opp)];
    let mse_err = (mse[0] - 0.0).abs().max((mse[1] - 2.0).abs()).max((mse[2] - 4.0).abs());

    let mut worst_h = 0.0f64;
    for m in 2..=6 {
        let n = 5;
        let entropy = |q: Tensor<f64>| {
            let mut g = Graph::new();
            let (a, b) = (g.constant(q.clone()), g.constant(q));
            let h = assignment_entropy(&mut g, a, b).unwrap();
            g.value(h).data()[0]
        };
        let uniform = Tensor::filled(&[n, m], 1.0 / m as f64);
        worst_h = worst_h.max((entropy(uniform) - 2.0 * (m as f64).ln()).abs());
        let mut one_hot = Tensor::zeros(&[n, m]);
        for i in 0..n {
            one_hot.data_mut()[i * m] = 1.0;
        }
        worst_h = worst_h.max(entropy(one_hot).abs());
    }
    verdict(
        mse_err < 1e-9 && worst_h < 1e-9,
        format!("pairwise_mse {mse:?}; entropy max |err| {worst_h:.2e} over M=2..6"),
    )
}

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 4,
        precision: Precision::Fixed,
        model: ArchSpec {
            backbone: BackboneSpec {
                arch: BackboneArch::TinyCnn,
                input_resolution: 8,
                channels: vec![2, 3, 3],
                feature_dim: 4,
            },
            heads: HeadSpec {
                projection_dim: 6,
                projector_hidden: 6,
                predictor_hidden: 6,
                cluster_hidden: 6,
                norm: HeadNorm::Layer,
            },
            clusters: 3,
        },
        ..TrainConfig::default()
    };
    cfg.augment.output_size = 8;
    cfg
}

fn tiny_data() -> LabeledImageSet {
    make_synthetic(&htcn::data::SyntheticSpec {
        clusters: 3,
        per_cluster: 4,
        resolution: 8,
        ..Default::default()
    })
    .unwrap()
}

fn c4_ema() -> Verdict {
    let data = tiny_data();
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for alpha in [0.99, 0.5, 1.0, 0.0] {
        let mut cfg = tiny_cfg();
        cfg.ema_alpha = alpha;
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        for step in 0..3u64 {
            let before = state.params.clone();
            let batch = &data.images[(step as usize * 4) % 12..][..4];
            train_step(&mut state, &cfg, batch, &[step]).unwrap();
            if state.target_opt.is_some() {
                failures.push("optimizer state exists for ξ".to_string());
            }
            for (((name, new), old), theta) in state
                .params
                .target
                .iter()
                .zip(before.target.tensors())
                .zip(state.params.online.tensors())
            {
                for ((&x, &o), &t) in new.data().iter().zip(old.data()).zip(theta.data()) {
                    let expect = alpha * o + (1.0 - alpha) * t;
                    let ok = match alpha {
                        1.0 => x == o,
                        0.0 => x == t,
                        _ => (x - expect).abs() <= f64::EPSILON * expect.abs().max(1.0),
                    };
                    if !ok {
                        failures.push(format!("α={alpha} {name}: {x} vs {expect}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    // no gradient reaches any target leaf
    let cfg = tiny_cfg();
    let net = htcn::model::Network::new(&cfg.model).unwrap();
    let params = net.init::<f64>(1);
    let x = htcn::augment::images_to_tensor::<f64>(&data.images[..4]);
    let mut g = Graph::new();
    let (l, bound) = build_objective(&mut g, &net, &params, &cfg, (&x, &x, &x)).unwrap();
    let grads = g.backward(l.total).unwrap();
    let leaked = bound.target.iter().filter(|&&v| grads.get(v).is_some()).count();
    if leaked > 0 {
        failures.push(format!("{leaked} target tensors received gradient"));
    }
    verdict(
        failures.is_empty(),
        format!(
            "{checked} scalar EMA checks over α ∈ {{0.99, 0.5, 1, 0}}, {} target tensors gradient-free{}",
            bound.target.len(),
            failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
        ),
    )
}

fn brute_acc(pred: &[usize], truth: &[usize], m: usize) -> f64 {
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = 0usize;
    // Heap's algorithm over all m! relabelings
    let mut c = vec![0usize; m];
    let score = |p: &[usize]| pred.iter().zip(truth).filter(|(&a, &b)| p[a] == b).count();
    best = best.max(score(&perm));
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best as f64 / pred.len() as f64
}

fn c5_metrics() -> Verdict {
    let mut r = rng(55);
    let mut problems = Vec::new();
    for _ in 0..200 {
        let m = r.random_range(1..=6);
        let n = r.random_range(1..=40);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        let (h, b) = (acc(&pred, &truth).unwrap(), brute_acc(&pred, &truth, m));
        if (h - b).abs() > 1e-12 {
            problems.push(format!("hungarian {h} vs brute {b}"));
        }
    }
    for _ in 0..100 {
        let m = r.random_range(1..=6);
        let n = r.random_range(2..=50);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        for norm in [NmiNorm::Arithmetic, NmiNorm::Geometric] {
            let same = [nmi(&truth, &truth, norm).unwrap(), acc(&truth, &truth).unwrap(), ari(&truth, &truth).unwrap()];
            if same.iter().any(|&v| (v - 1.0).abs() > 1e-12) {
                problems.push(format!("identical partitions score {same:?}"));
            }
        }
        let mut relabel: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            relabel.swap(i, r.random_range(0..=i));
        }
        let moved: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
        let a = [nmi(&pred, &truth, NmiNorm::Arithmetic).unwrap(), acc(&pred, &truth).unwrap(), ari(&pred, &truth).unwrap()];
        let b = [nmi(&moved, &truth, NmiNorm::Arithmetic).unwrap(), acc(&moved, &truth).unwrap(), ari(&moved, &truth).unwrap()];
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
            problems.push(format!("relabel changed {a:?} to {b:?}"));
        }
    }
    let mut total = 0.0;
    for _ in 0..1000 {
        let n = 200;
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        total += ari(&pred, &truth).unwrap();
    }
    let mean_ari = total / 1000.0;
    if mean_ari.abs() > 0.02 {
        problems.push(format!("mean random ARI {mean_ari}"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "200 Hungarian-vs-brute trials, 100 relabel cases, mean random ARI {mean_ari:+.4}{}",
            problems.first().map(|p| format!("; first problem: {p}")).unwrap_or_default()
        ),
    )
}

fn c8_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("fixed.toml");
    let text = std::fs::read_to_string(DESK)
        .unwrap()
        .replace("epochs = 200", "epochs = 3")
        .replace("precision = \"fast\"", "precision = \"fixed\"")
        .replace("checkpoint_every = 50", "checkpoint_every = 1");
    std::fs::write(&cfg_path, text).unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        cli(&["train", "--config", s(&cfg_path), "--out", s(d), "--seed", "3"]);
    }
    let mut files = vec!["epochs.jsonl".to_string(), "model.ckpt".to_string()];
    for e in 1..=3 {
        files.push(format!("checkpoints/epoch-{e:06}.model"));
        files.push(format!("checkpoints/epoch-{e:06}.state"));
    }
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(dirs[0].join(f)).unwrap() != std::fs::read(dirs[1].join(f)).unwrap())
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} files compared over two fixed-precision runs, differing: {differing:?}", files.len()),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cli(args: &[&str]) {
    let parsed = Cli::try_parse_from(std::iter::once("htcn").chain(args.iter().copied())).unwrap();
    run(parsed, &mut std::io::sink()).unwrap_or_else(|e| panic!("{args:?}: {e}"));
}

/// Desk runs through the CLI, one directory per seed.
struct DeskRuns {
    _tmp: tempfile::TempDir,
    records: BTreeMap<u64, Vec<EpochRecord>>,
    curves: BTreeMap<u64, String>,
}

fn desk_runs() -> DeskRuns {
    let tmp = tempfile::tempdir().unwrap();
    let mut records = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for seed in SEEDS {
        let dir = tmp.path().join(format!("seed-{seed}"));
        cli(&["train", "--config", DESK, "--out", s(&dir), "--seed", &seed.to_string()]);
        cli(&["curves", "--out", s(&dir)]);
        let log = std::fs::read_to_string(dir.join("epochs.jsonl")).unwrap();
        records.insert(seed, parse_epoch_log(&log).unwrap());
        curves.insert(seed, std::fs::read_to_string(dir.join("curves.csv")).unwrap());
        let last = records[&seed].last().unwrap();
        eprintln!("  desk seed {seed}: acc {:.4} nmi {:.4} ari {:.4}", last.acc, last.nmi, last.ari);
    }
    DeskRuns {
        _tmp: tmp,
        records,
        curves,
    }
}

fn c6_benchmark(runs: &DeskRuns) -> Verdict {
    let accs: Vec<f64> = runs.records.values().map(|r| r.last().unwrap().acc).collect();
    let epochs = runs.records.values().map(|r| r.len()).max().unwrap();
    let med = median(&accs);
    verdict(
        med >= 0.80 && epochs <= 200,
        format!("median ACC {med:.4} over seeds {SEEDS:?} ({accs:.4?}), {epochs} epochs"),
    )
}

fn c9_curves(runs: &DeskRuns) -> Verdict {
    let mut rising = 0;
    let mut shape_ok = true;
    let mut pairs = Vec::new();
    for csv in runs.curves.values() {
        let mut lines = csv.lines();
        shape_ok &= lines.next() == Some("epoch,nmi,acc,ari,instance_loss,cluster_loss,total_loss");
        let rows: Vec<(usize, f64)> = lines
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                (c[0].parse().unwrap(), c[1].parse().unwrap())
            })
            .collect();
        shape_ok &= rows.iter().enumerate().all(|(i, (e, _))| *e == i + 1);
        let at = |e: usize| rows.iter().find(|(x, _)| *x == e).map(|(_, v)| *v);
        match (at(10), at(200)) {
            (Some(a), Some(b)) => {
                pairs.push((a, b));
                if b > a {
                    rising += 1;
                }
            }
            _ => shape_ok = false,
        }
    }
    let fmt: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect();
    verdict(
        shape_ok && rising >= 4,
        format!("NMI epoch 10 -> 200 rises in {rising}/5 seeds [{}]; per-epoch CSV ordered: {shape_ok}", fmt.join(", ")),
    )
}

fn c7_ablation(runs: &DeskRuns) -> Verdict {
    let desk = RunConfig::load(Path::new(DESK)).unwrap();
    let DataSource::Synthetic(spec) = &desk.data else { unreachable!() };
    let data = make_synthetic(spec).unwrap();
    let base = &desk.train;
    let full: Vec<EpochRecord> = runs.records.values().map(|r| r.last().unwrap().clone()).collect();
    let mut finals: BTreeMap<&str, Vec<EpochRecord>> = BTreeMap::new();
    for v in [
        Variant::DualOnlineTarget,
        Variant::DualOnlineOnline,
        Variant::InstanceOnly,
        Variant::ClusterOnly,
        Variant::NoEntropy,
    ] {
        for seed in SEEDS {
            let recs = run_variant::<f32>(base, &data, v, seed).unwrap();
            finals.entry(v.name()).or_default().push(recs.last().unwrap().clone());
        }
        let f = &finals[v.name()];
        eprintln!(
            "  {}: nmi {:.4?} share {:.3?}",
            v.name(),
            f.iter().map(|r| r.nmi).collect::<Vec<_>>(),
            f.iter().map(|r| r.largest_cluster_share).collect::<Vec<_>>()
        );
    }
    let med_nmi = |rs: &[EpochRecord]| median(&rs.iter().map(|r| r.nmi).collect::<Vec<_>>());
    let tri = med_nmi(&full);
    let (dot, doo) = (med_nmi(&finals["dual_online_target"]), med_nmi(&finals["dual_online_online"]));
    let (inst, clu) = (med_nmi(&finals["instance_only"]), med_nmi(&finals["cluster_only"]));
    let collapsed = finals["no_entropy"].iter().filter(|r| r.largest_cluster_share > 0.9).count();
    let full_shares: Vec<f64> = full.iter().map(|r| r.largest_cluster_share).collect();
    let full_balanced = full_shares.iter().all(|&s| s < 0.5);

    let streams = tri >= dot && tri >= doo;
    let losses = tri >= inst && tri >= clu;
    let entropy = collapsed >= 3 && full_balanced;
    verdict(
        streams && losses && entropy,
        format!(
            "median NMI tri {tri:.4} vs dual-online-target {dot:.4}, dual-online-online {doo:.4} [{}]; \
             full {tri:.4} vs instance-only {inst:.4}, cluster-only {clu:.4} [{}]; \
             no-entropy collapsed in {collapsed}/5, full shares {full_shares:.3?} [{}]",
            ok(streams),
            ok(losses),
            ok(entropy)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let mut results: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let mut timed = |i: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if want(i) {
            let t = Instant::now();
            let v = f();
            let secs = t.elapsed().as_secs_f64();
            println!("criterion {i} [{}] {name}: {} ({secs:.1}s)", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            results.push((i, name, v, secs));
        }
    };
    timed(1, "gradient checks", &mut c1_gradients);
    timed(2, "oracle equivalence", &mut c2_oracles);
    timed(3, "loss boundary cases", &mut c3_boundaries);
    timed(4, "EMA and stop-gradient", &mut c4_ema);
    timed(5, "metric exactness", &mut c5_metrics);
    timed(8, "determinism", &mut c8_determinism);
    let mut runs = None;
    let mut shared = || {
        if runs.is_none() {
            let t = Instant::now();
            runs = Some(desk_runs());
            eprintln!("  desk runs: {:.0}s", t.elapsed().as_secs_f64());
        }
        runs.take().unwrap()
    };
    if want(6) || want(7) || want(9) {
        let r = shared();
        timed(6, "desk benchmark", &mut || c6_benchmark(&r));
        timed(9, "convergence curves", &mut || c9_curves(&r));
        timed(7, "ablation direction", &mut || c7_ablation(&r));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
