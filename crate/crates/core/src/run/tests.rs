use super::*;
use crate::diagnostics::read_pca_csv;

fn tiny(kind: VariantKind) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.synthetic_bytes = Some(30_000);
    c.data.synthetic_seed = 3;
    c.model.kind = kind;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.n_layers = 1;
    c.model.context_length = 32;
    c.model.h_ffn = 24;
    c.model.d_low = 4;
    c.train.steps = 6;
    c.train.batch_size = 2;
    c.train.lr_max = 1e-3;
    c.train.log_every = 2;
    c.train.ckpt_every = 3;
    c.finetune.seq_len = 9;
    c.finetune.eval_size = 32;
    c.finetune.eval_every = 2;
    c.finetune.cfg.steps = 4;
    c.finetune.cfg.batch_size = 4;
    c.finetune.cfg.hidden = 8;
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn write_probe(dir: &Path) -> PathBuf {
    let p = dir.join("probe.bin");
    std::fs::write(&p, synthetic_corpus(400, 11)).unwrap();
    p
}

#[test]
fn pretrain_writes_reproducible_artifacts() {
    let cfg = tiny(VariantKind::Vqmoe);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = pretrain(&cfg, a.path(), None).unwrap();
    let sb = pretrain(&cfg, b.path(), None).unwrap();
    assert_eq!(sa.steps, 6);
    assert_eq!(sa.valid_bpc.to_bits(), sb.valid_bpc.to_bits());
    for name in ["metrics.jsonl", "ckpt_3.vqmo", "ckpt_6.vqmo", "bpc.txt"] {
        assert_eq!(read(&a.path().join(name)), read(&b.path().join(name)), "{name}");
    }
    let recs = read_metrics(&a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
    for r in &recs {
        assert_eq!(r.schema_version, METRICS_SCHEMA_VERSION);
        let expect = r.task_loss + cfg.model.alpha * r.vq_loss;
        assert!((r.total_loss - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{r:?}");
    }
}

#[test]
fn resumed_pretraining_matches_a_straight_run() {
    let cfg = tiny(VariantKind::Smoe);
    let straight = tempfile::tempdir().unwrap();
    pretrain(&cfg, straight.path(), None).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    std::fs::copy(straight.path().join("ckpt_3.vqmo"), resumed.path().join("ckpt_3.vqmo")).unwrap();
    pretrain(&cfg, resumed.path(), Some(&resumed.path().join("ckpt_3.vqmo"))).unwrap();
    assert_eq!(read(&straight.path().join("ckpt_6.vqmo")), read(&resumed.path().join("ckpt_6.vqmo")));
    let tail: Vec<_> = read_metrics(&resumed.path().join("metrics.jsonl")).unwrap();
    let full: Vec<_> = read_metrics(&straight.path().join("metrics.jsonl")).unwrap();
    assert_eq!(tail, full.into_iter().filter(|r| r.step >= 3).collect::<Vec<_>>());

    let mut other = cfg.clone();
    other.train.steps = 9;
    let e = pretrain(&other, resumed.path(), Some(&resumed.path().join("ckpt_3.vqmo"))).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn missing_corpus_names_the_path() {
    let mut cfg = tiny(VariantKind::Smoe);
    cfg.data.path = Some(PathBuf::from("/nonexistent/corpus.txt"));
    let dir = tempfile::tempdir().unwrap();
    let e = pretrain(&cfg, dir.path(), None).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("/nonexistent/corpus.txt"), "{e}");

    cfg.data.path = None;
    cfg.data.synthetic_bytes = None;
    assert_eq!(pretrain(&cfg, dir.path(), None).unwrap_err().exit_code(), 1);
}

#[test]
fn finetune_keeps_the_codebook_and_matches_the_counter() {
    let cfg = tiny(VariantKind::Vqmoe);
    let dir = tempfile::tempdir().unwrap();
    pretrain(&cfg, dir.path(), None).unwrap();
    let out = dir.path().join("ft");
    let s = finetune(&cfg, &dir.path().join("ckpt_6.vqmo"), &out).unwrap();
    assert_eq!(s.codebook_digest_before, s.codebook_digest_after);
    assert_eq!(s.codebook_digest_before.len(), 64);
    let rel = (s.measured_flops_ratio - s.analytic_flops_ratio).abs() / s.analytic_flops_ratio;
    assert!(rel < 0.01, "measured {} analytic {}", s.measured_flops_ratio, s.analytic_flops_ratio);
    assert!((0.0..=1.0).contains(&s.accuracy));
    let text = std::fs::read_to_string(out.join("finetune.txt")).unwrap();
    assert!(text.contains("codebook_digest_after = "));

    let mut long = cfg.clone();
    long.finetune.seq_len = 40;
    assert_eq!(finetune(&long, &dir.path().join("ckpt_6.vqmo"), &out).unwrap_err().exit_code(), 1);
}

#[test]
fn finetune_refuses_router_checkpoints() {
    let cfg = tiny(VariantKind::Smoe);
    let dir = tempfile::tempdir().unwrap();
    pretrain(&cfg, dir.path(), None).unwrap();
    let e = finetune(&cfg, &dir.path().join("ckpt_6.vqmo"), dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("needs a vqmoe checkpoint"), "{e}");
}

#[test]
fn unknown_report_lists_the_valid_names() {
    let e = "spectrum".parse::<Report>().unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("consistency, jacobian, pca, drift, flops"), "{e}");
    for r in Report::ALL {
        assert_eq!(r.as_str().parse::<Report>().unwrap(), r);
    }
}

fn flops_field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

#[test]
fn flops_report_on_the_base_stanza_hits_the_reference_ratio() {
    let cfg = RunConfig::parse(include_str!("../../../../configs/base.cfg")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = analyze(&cfg, Report::Flops, &AnalyzeArgs::default(), dir.path()).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let ratio = flops_field(&text, "finetune_over_smoe_pretrain");
    assert!((ratio - 0.7233).abs() <= 0.02 * 0.7233, "{ratio}");
    assert!(flops_field(&text, "finetune_over_pretrain") < ratio);
}

#[test]
fn checkpoint_reports_write_their_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let probe = write_probe(dir.path());
    for kind in [VariantKind::Smoe, VariantKind::Vqmoe] {
        let cfg = tiny(kind);
        let run = dir.path().join(kind.to_string());
        pretrain(&cfg, &run, None).unwrap();
        let args = AnalyzeArgs {
            checkpoints: vec![run.join("ckpt_3.vqmo"), run.join("ckpt_6.vqmo")],
            probe: Some(probe.clone()),
            layer: None,
            max_probes: 4,
        };
        let out = run.join("analysis");

        let p = analyze(&cfg, Report::Consistency, &args, &out).unwrap();
        let rows = std::fs::read_to_string(p).unwrap().lines().count();
        // header, two definitional rows, one temporal row
        assert_eq!(rows, 4, "{kind}");

        let p = analyze(&cfg, Report::Pca, &args, &out).unwrap();
        let back = read_pca_csv(&p).unwrap();
        write_pca_csv(&out.join("again.csv"), &back).unwrap();
        assert_eq!(read(&p), read(&out.join("again.csv")));

        let p = analyze(&cfg, Report::Drift, &args, &out).unwrap();
        assert!(std::fs::read_to_string(p).unwrap().lines().count() >= 2);

        analyze(&cfg, Report::Jacobian, &args, &out).unwrap();
        let model = checkpoint::load(&run.join("ckpt_6.vqmo")).unwrap().state.model;
        let snap = Snapshot::capture(&model, &probe_batch(&probe, 32, 4).unwrap(), 0, 0).unwrap();
        let mut checked = 0;
        for t in 0..snap.tokens.rows() {
            if let Ok(r) = jacobian_residual_rank(&model.store, &model.blocks[0].moe, snap.tokens.row(t)) {
                assert!(r.numerical_rank <= r.bound, "{kind}: {r:?}");
                checked += 1;
            }
            if checked == 4 {
                break;
            }
        }
        assert!(checked > 0);

        let one = AnalyzeArgs { checkpoints: vec![run.join("ckpt_6.vqmo")], ..args.clone() };
        assert!(analyze(&cfg, Report::Drift, &one, &out).is_err());
        let no_probe = AnalyzeArgs { probe: None, ..args.clone() };
        assert_eq!(analyze(&cfg, Report::Pca, &no_probe, &out).unwrap_err().exit_code(), 1);
        let bad_layer = AnalyzeArgs { layer: Some(3), ..args };
        assert_eq!(analyze(&cfg, Report::Pca, &bad_layer, &out).unwrap_err().exit_code(), 1);
    }
}

fn small_sim(n: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.simulate.spec.n_clusters = n;
    c.simulate.spec.points_per_cluster = 20;
    c.simulate.oracle.warmup_steps = 50;
    c.simulate.oracle.steps = 5;
    c.simulate.router.steps = 20;
    c
}

#[test]
fn simulate_writes_one_row_per_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let s = simulate(&small_sim(2), dir.path()).unwrap();
    assert_eq!(s.oracle.rows.len(), 2);
    let prop1 = std::fs::read_to_string(dir.path().join("prop1_report.csv")).unwrap();
    assert_eq!(prop1.lines().count(), 3);
    let thm1 = std::fs::read_to_string(dir.path().join("thm1_series.csv")).unwrap();
    let vq: Vec<f64> = thm1.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(!vq.is_empty());
    assert!(vq.iter().all(|&v| v == 1.0), "{vq:?}");
}

#[test]
fn simulate_guards_against_factorial_blowup() {
    let dir = tempfile::tempdir().unwrap();
    let e = simulate(&small_sim(7), dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("n_clusters <= 6"), "{e}");
}

#[test]
fn shipped_configs_parse() {
    let desk = RunConfig::parse(include_str!("../../../../configs/desk.cfg")).unwrap();
    assert_eq!(desk.data.synthetic_bytes, Some(1 << 20));
    assert_eq!((desk.train.batch_size, desk.train.lr_max), (8, 1e-3));
    let base = RunConfig::parse(include_str!("../../../../configs/base.cfg")).unwrap();
    assert_eq!((base.model.d_model, base.model.n_experts, base.model.k_codes), (256, 16, 16));
}
