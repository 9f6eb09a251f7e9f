//! Acceptance suite: one line per criterion, run sequentially so the timed
//! criteria do not compete for the CPU.
//!
//! A criterion marked non-gating is still measured and printed; only gating
//! failures make the process exit non-zero.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmoe::autodiff::{check_store_gradients, Tape};
use vqmoe::cluster_sim::{generate_clusters, linear_targets, oracle_assignment_check, random_maps, ClusterSpec, OracleConfig};
use vqmoe::config::RunConfig;
use vqmoe::data::Batch;
use vqmoe::diagnostics::{
    code_centroids, consistency_score, flops_count, jacobian_residual_rank, ConsistencyMode, FlopsMode, JacobianReport,
};
use vqmoe::lm::{evaluate_bpc, Model, ModelConfig, MoePath};
use vqmoe::moe::{MoeConfig, MoeLayer, RoutingDecision, VariantKind};
use vqmoe::params::ParamStore;
use vqmoe::quantizer::{assign_codes, code_to_expert, straight_through, vq_loss, Codebook, Metric};
use vqmoe::run::{self, read_metrics};
use vqmoe::{Error, Tensor};

struct Outcome {
    name: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, gating: true, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for kind in VariantKind::ALL {
        let mut admitted = 0;
        let mut seed = 0u64;
        while admitted < 20 {
            seed += 1;
            let cfg = ModelConfig {
                vocab_size: 16,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                context_length: 8,
                n_experts: 4,
                k_codes: 8,
                h_ffn: 16,
                d_low: 4,
                kind,
                seed,
                ..Default::default()
            };
            let mut model = Model::new(cfg).unwrap();
            let mut r = rng(1000 + seed);
            // 12 token rows, enough to seed 8 distinct codes
            let tokens: Vec<usize> = (0..14).map(|_| r.random_range(0..16)).collect();
            let batch = Batch { tokens, batch: 2, seq: 6 };
            model.init_codebooks(&batch, &mut r).unwrap();
            let alpha = model.cfg.alpha;
            let mut margin = f64::INFINITY;
            let report = check_store_gradients(&model.store, 1e-5, |tape, b| {
                let h = model.forward_hidden(tape, b, &batch.inputs(), 2, MoePath::Pretrain, None)?;
                for o in &h.moe {
                    margin = margin.min(o.decision.margin);
                }
                let logits = model.logits(tape, b, h.hidden)?;
                let mut loss = tape.cross_entropy_with_logits(logits, &batch.targets())?;
                for vq in h.moe.iter().filter_map(|o| o.vq_loss) {
                    let w = tape.scale(vq, alpha)?;
                    loss = tape.add(loss, w)?;
                }
                Ok(loss)
            })
            .unwrap();
            if margin <= 1e-3 {
                skipped += 1;
                continue;
            }
            admitted += 1;
            checked += report.checked;
            if report.max_rel_err > worst.0 {
                worst = (report.max_rel_err, format!("{kind} seed {seed} {}", report.worst_param));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        "gradient suite",
        worst.0 < 1e-4 && secs < 120.0,
        format!(
            "5 variants x 20 seeds, {checked} scalars, worst rel err {:.2e} ({}), {skipped} low-margin seeds skipped, {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

fn brute_argmin(z: &[f64], codes: &Tensor, metric: Metric) -> usize {
    let score = |v: &[f64]| match metric {
        Metric::Euclidean => z.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
        Metric::Cosine => {
            let dot: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum();
            -dot / (z.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt())
        }
    };
    let mut best = 0;
    for j in 1..codes.rows() {
        if score(codes.row(j)) < score(codes.row(best)) {
            best = j;
        }
    }
    best
}

fn vq_oracle() -> Outcome {
    let started = Instant::now();
    let mut r = rng(7);
    let mut mismatches = 0;
    let mut st_exact = true;
    for i in 0..1000 {
        let metric = if i % 2 == 0 { Metric::Euclidean } else { Metric::Cosine };
        let (n, k, d) = (r.random_range(1..9), r.random_range(1..17), r.random_range(1..9));
        let z = Tensor::uniform([n, d], 1.0, &mut r);
        let cb = Codebook::new(Tensor::uniform([k, d], 1.0, &mut r), metric).unwrap();
        let res = assign_codes(&z, &cb).unwrap();
        for row in 0..n {
            if res.indices[row] != brute_argmin(z.row(row), &cb.vectors, metric) {
                mismatches += 1;
            }
        }
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let q = straight_through(&mut tape, zv, &cb, &res).unwrap();
        for row in 0..n {
            st_exact &= tape.value(q).row(row) == cb.vectors.row(res.indices[row]);
        }
    }

    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), true);
    let code = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let cb = Codebook::new(code.clone(), Metric::Euclidean).unwrap();
    let res = assign_codes(tape.value(z), &cb).unwrap();
    let cv = tape.leaf(code, true);
    let l = vq_loss(&mut tape, z, cv, &res, 0.25).unwrap();
    let hand = tape.value(l).data()[0];

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -2.0, 3.0]).unwrap(), true);
    let s = tape.stop_gradient(x).unwrap();
    let identity = tape.value(s) == tape.value(x);
    // only the plain sum reaches x, so its gradient is exactly ones
    let stopped = tape.squared_l2(s).unwrap();
    let plain = tape.sum(x).unwrap();
    let loss = tape.add(stopped, plain).unwrap();
    let blocked = tape.backward(loss).unwrap().wrt(x) == vec![1.0; 3];

    let secs = started.elapsed().as_secs_f64();
    outcome(
        "VQ oracle",
        mismatches == 0 && st_exact && hand == 1.25 && identity && blocked && secs < 30.0,
        format!(
            "1000 instances, {mismatches} mismatches; straight-through exact {st_exact}; hand vq_loss {hand}; \
             sg identity {identity}, gradient blocked {blocked}; {secs:.2}s"
        ),
    )
}

fn code_mapping() -> Outcome {
    let mut bad = Vec::new();
    for n in 1..=16 {
        for k in 1..=64 {
            let mut counts = vec![0usize; n];
            for c in 0..k {
                counts[code_to_expert(c, n)] += 1;
            }
            let (lo, hi) = (k / n, k.div_ceil(n));
            if counts.iter().any(|&c| c != lo && c != hi) {
                bad.push((n, k));
            }
        }
        if (0..n).any(|c| code_to_expert(c, n) != c) {
            bad.push((n, n));
        }
    }
    outcome(
        "code-to-expert mapping",
        bad.is_empty(),
        format!("N in 1..=16, K in 1..=64: {} violations; K = N is the identity", bad.len()),
    )
}

fn jacobian_layer(kind: VariantKind, seed: u64) -> (ParamStore, MoeLayer) {
    let mut store = ParamStore::new();
    let cfg = MoeConfig::new(kind, 32, 64, 4, 8);
    let layer = MoeLayer::new(&mut store, "moe", cfg, &mut rng(seed)).unwrap();
    layer
        .init_codebook(&mut store, &Tensor::uniform([32, 32], 1.0, &mut rng(seed + 1)), &mut rng(seed + 2))
        .unwrap();
    (store, layer)
}

fn admissible(kind: VariantKind, count: usize) -> Vec<JacobianReport> {
    let (store, layer) = jacobian_layer(kind, 90);
    let mut r = rng(91);
    let mut out = Vec::new();
    while out.len() < count {
        let x = Tensor::uniform([1, 32], 1.0, &mut r).into_data();
        match jacobian_residual_rank(&store, &layer, &x) {
            Ok(rep) => out.push(rep),
            Err(Error::Margin { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    out
}

fn jacobian_ranks() -> Vec<Outcome> {
    let started = Instant::now();
    let smoe = admissible(VariantKind::Smoe, 50);
    let vq = admissible(VariantKind::Vqmoe, 50);
    let secs = started.elapsed().as_secs_f64();
    let smoe_max = smoe.iter().map(|r| r.numerical_rank).max().unwrap();
    let vq_max = vq.iter().map(|r| r.numerical_rank).max().unwrap();
    let above = vq.iter().filter(|r| r.numerical_rank > 4).count();
    let mut hist = [0usize; 15];
    for r in &vq {
        hist[r.numerical_rank.min(14)] += 1;
    }
    let spread: Vec<String> =
        hist.iter().enumerate().filter(|(_, &c)| c > 0).map(|(k, c)| format!("{k}:{c}")).collect();
    vec![
        outcome(
            "Jacobian rank bounds",
            smoe_max <= 4 && vq_max <= 14 && secs < 300.0,
            format!("d=32 N=4 k=2 K=8, 50 probes each: smoe max rank {smoe_max} (<= 4), vqmoe max rank {vq_max} (<= 14), {secs:.1}s"),
        ),
        Outcome {
            name: "Jacobian vqmoe rank above N",
            pass: above * 5 >= vq.len() * 4,
            gating: false,
            detail: format!(
                "vqmoe rank > 4 on {above}/50 probes (needs >= 40); rank histogram {}",
                spread.join(" ")
            ),
        },
    ]
}

fn tiny(kind: VariantKind) -> ModelConfig {
    ModelConfig { kind, ..Default::default() }
}

fn flops_anchor() -> Outcome {
    let cfg = RunConfig::parse(include_str!("../../../configs/base.cfg")).unwrap();
    let fine = flops_count(&cfg.model, FlopsMode::FinetuneDiscrete).total() as f64;
    let smoe = flops_count(&ModelConfig { kind: VariantKind::Smoe, ..cfg.model.clone() }, FlopsMode::Pretrain).total() as f64;
    let ratio = fine / smoe;
    let target = 5.6145 / 7.7620;
    let rel = (ratio - target).abs() / target;

    // hand tally for d=64, h=128, N=K=4, k=2, T=128, two layers, cosine scan
    let (d, h, n, k, t, l, v) = (64u64, 128u64, 4u64, 2u64, 128u64, 2u64, 256u64);
    let attention = l * (2 * 4 * d * d + 2 * t * d);
    let head = 2 * d * v;
    let expert = 2 * 2 * d * h;
    let router = 2 * n * d;
    let scan = 2 * 4 * d + d;
    let gate = 2 * 2 * d;
    let smoe_hand = attention + head + l * (router + k * expert);
    let vq_hand = attention + head + l * (router + k * expert + scan + gate + expert);
    let ft_hand = attention + head + l * (scan + expert);
    let got = [
        flops_count(&tiny(VariantKind::Smoe), FlopsMode::Pretrain).total(),
        flops_count(&tiny(VariantKind::Vqmoe), FlopsMode::Pretrain).total(),
        flops_count(&tiny(VariantKind::Vqmoe), FlopsMode::FinetuneDiscrete).total(),
    ];
    let hand = [smoe_hand, vq_hand, ft_hand];
    outcome(
        "FLOPs anchor",
        rel <= 0.02 && got == hand,
        format!(
            "base stanza fine-tune/pre-train {ratio:.4} vs {target:.4} ({:+.2}%); tiny counts {got:?} vs hand {hand:?}",
            100.0 * (ratio - target) / target
        ),
    )
}

fn consistency() -> Outcome {
    let mut store = ParamStore::new();
    let mut cfg = MoeConfig::new(VariantKind::Vqmoe, 8, 16, 4, 4);
    cfg.metric = Metric::Euclidean;
    let layer = MoeLayer::new(&mut store, "moe", cfg, &mut rng(3)).unwrap();
    layer.init_codebook(&mut store, &Tensor::uniform([16, 8], 1.0, &mut rng(4)), &mut rng(5)).unwrap();
    let x = Tensor::uniform([2000, 8], 1.0, &mut rng(6));
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let dec = layer.forward_discrete(&mut tape, &b, xv).unwrap().decision;
    let centroids = code_centroids(&layer.codebook(&store).unwrap(), 4);
    let mode = ConsistencyMode::Definitional { metric: Metric::Euclidean };
    let vq = consistency_score(&x, &dec, &centroids, mode, 0).unwrap().score;

    let tokens = 10_000;
    let x = Tensor::uniform([tokens, 8], 1.0, &mut rng(8));
    let mut r = rng(9);
    let random = RoutingDecision {
        k: 1,
        expert_indices: (0..tokens).map(|_| r.random_range(0..4)).collect(),
        gate_weights: vec![1.0; tokens],
        code_indices: None,
        gc_gd: None,
        margin: f64::INFINITY,
    };
    let centroids = Tensor::uniform([4, 8], 1.0, &mut rng(10));
    let rand_score = consistency_score(&x, &random, &centroids, mode, 0).unwrap().score;
    outcome(
        "consistency",
        vq == 1.0 && (rand_score - 0.25).abs() <= 0.05,
        format!("vqmoe discrete path {vq}; random router {rand_score:.4} (1/N = 0.25 +- 0.05)"),
    )
}

fn oracle() -> Outcome {
    let started = Instant::now();
    let spec = |n| ClusterSpec {
        n_clusters: n,
        d: 8,
        points_per_cluster: 100,
        center_separation: 4.0,
        noise_sigma: 0.4,
        seed: 0,
    };
    let c3 = generate_clusters(&spec(3)).unwrap();
    let y3 = linear_targets(&c3, &random_maps(3, 8, 1)).unwrap();
    let r3 = oracle_assignment_check(&c3, &y3, &OracleConfig::default()).unwrap();
    let c2 = generate_clusters(&spec(2)).unwrap();
    let y2 = linear_targets(&c2, &random_maps(2, 8, 5)).unwrap();
    let r2 = oracle_assignment_check(&c2, &y2, &OracleConfig::default()).unwrap();
    let swap_worse = r2.rows[1].total_loss > r2.rows[0].total_loss;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        "permutation oracle",
        r3.rows.len() == 6 && r3.identity_strictly_minimal() && swap_worse && secs < 180.0,
        format!(
            "N=3: identity {:.5}, best other {:.5}, margin {:.5}; N=2: identity {:.5}, swap {:.5}; {secs:.1}s",
            r3.identity_loss(),
            r3.best_other().unwrap(),
            r3.margin(),
            r2.rows[0].total_loss,
            r2.rows[1].total_loss
        ),
    )
}

fn desk_config(kind: VariantKind) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.synthetic_bytes = Some(1 << 20);
    c.data.synthetic_seed = 0;
    c.model.kind = kind;
    c.train.batch_size = 8;
    c.train.lr_max = 1e-3;
    c.finetune.target_accuracy = 0.95;
    c
}

fn decomposition_holds(dir: &Path, alpha: f64) -> (bool, usize) {
    let recs = read_metrics(&dir.join("metrics.jsonl")).unwrap();
    let ok = recs.iter().all(|r| {
        let expect = r.task_loss + alpha * r.vq_loss;
        (r.total_loss - expect).abs() <= 1e-12 * expect.abs().max(1.0)
    });
    (ok, recs.len())
}

fn desk_training(work: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut all_below = true;
    let mut decomposition = true;
    let mut timed = 0.0;
    for kind in VariantKind::ALL {
        let cfg = desk_config(kind);
        let out = work.join(kind.as_str());
        let s = run::pretrain(&cfg, &out, None).unwrap();
        let (ok, n) = decomposition_holds(&out, cfg.model.alpha);
        decomposition &= ok && n > 0;
        all_below &= s.test_bpc < 2.8;
        if matches!(kind, VariantKind::Smoe | VariantKind::Vqmoe) {
            timed += s.seconds;
        }
        lines.push(format!("{kind} {:.3} ({:.0}s)", s.test_bpc, s.seconds));
    }
    let splits = run::load_splits(&desk_config(VariantKind::Vqmoe)).unwrap();
    let untrained = evaluate_bpc(&Model::new(desk_config(VariantKind::Vqmoe).model).unwrap(), &splits.test).unwrap();

    let mut short = desk_config(VariantKind::Vqmoe);
    short.train.steps = 300;
    let (a, b) = (work.join("rerun_a"), work.join("rerun_b"));
    run::pretrain(&short, &a, None).unwrap();
    run::pretrain(&short, &b, None).unwrap();
    let same = ["metrics.jsonl", "ckpt_300.vqmo", "bpc.txt"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());

    outcome(
        "desk-scale training",
        all_below && timed < 1200.0 && decomposition && same,
        format!(
            "5000 steps, 1 MiB corpus, test BPC: {}; untrained {untrained:.3}; vqmoe + smoe {:.1} min; \
             loss identity at every logged step {decomposition}; 300-step reruns byte-identical {same}",
            lines.join(", "),
            timed / 60.0
        ),
    )
}

fn finetune_path(work: &Path) -> Outcome {
    let cfg = desk_config(VariantKind::Vqmoe);
    let from = work.join("vqmoe").join("ckpt_5000.vqmo");
    let s = run::finetune(&cfg, &from, &work.join("finetune")).unwrap();
    let rel = (s.measured_flops_ratio - s.analytic_flops_ratio).abs() / s.analytic_flops_ratio;
    outcome(
        "fine-tune path",
        s.accuracy > 0.95 && s.codebook_digest_before == s.codebook_digest_after && rel <= 0.05,
        format!(
            "accuracy {:.4} after {} steps; codebook digest unchanged {}; step cost ratio measured {:.4} vs analytic {:.4} ({:+.2}%)",
            s.accuracy,
            s.steps,
            s.codebook_digest_before == s.codebook_digest_after,
            s.measured_flops_ratio,
            s.analytic_flops_ratio,
            100.0 * (s.measured_flops_ratio - s.analytic_flops_ratio) / s.analytic_flops_ratio
        ),
    )
}

fn report(o: &Outcome) {
    let tag = match (o.pass, o.gating) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (non-gating)",
    };
    println!("[{tag}] {}: {}", o.name, o.detail);
}

fn main() {
    let quick = std::env::args().any(|a| a == "--quick");
    let work = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut record = |o: Outcome| {
        report(&o);
        results.push(o);
    };
    record(gradient_suite());
    record(vq_oracle());
    record(code_mapping());
    for o in jacobian_ranks() {
        record(o);
    }
    record(flops_anchor());
    record(consistency());
    record(oracle());
    if quick {
        println!("[SKIP] desk-scale training and fine-tune path (--quick)");
    } else {
        record(desk_training(work.path()));
        record(finetune_path(work.path()));
    }
    let failed = results.iter().filter(|o| !o.pass && o.gating).count();
    let passed = results.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass, {failed} gating failures", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
