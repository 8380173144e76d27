mod common;

use common::*;
use nmt_core::kernels::{grad_check, Tape, Tensor};
use nmt_core::model::{
    forward, Batch, DecoderKind, Example, ForwardOutput, ModelConfig, ModelParams, ParamVars, EOS, SHIFT,
};
use nmt_core::trainer::*;
use nmt_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_token_batch() -> Batch {
    Batch::new(&[Example {
        src: vec![5],
        src_factors: Vec::new(),
        trg: Vec::new(),
        trg_factors: Vec::new(),
    }])
    .unwrap()
}

fn output_of(tape: &mut Tape<f64>, logits: Tensor<f64>) -> ForwardOutput {
    let l = tape.constant(logits);
    ForwardOutput {
        encoder_out: l,
        logits: l,
        factor_logits: Vec::new(),
        nvs_logits: None,
    }
}

fn no_smoothing() -> LossConfig {
    LossConfig {
        label_smoothing: 0.0,
        ..LossConfig::default()
    }
}

#[test]
fn uniform_logits_give_log_v() {
    let mut tape = Tape::<f64>::new();
    let out = output_of(&mut tape, Tensor::zeros(&[1, 4]));
    let (_, m) = compute_loss(&mut tape, &out, &one_token_batch(), &no_smoothing()).unwrap();
    assert!((m.loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_prediction_gives_zero_loss() {
    let mut tape = Tape::<f64>::new();
    let mut l = vec![0.0; 4];
    l[EOS as usize] = 1e4;
    let out = output_of(&mut tape, Tensor::new(vec![1, 4], l).unwrap());
    let (_, m) = compute_loss(&mut tape, &out, &one_token_batch(), &no_smoothing()).unwrap();
    assert!(m.loss.abs() < 1e-12);
    assert_eq!(m.surface.correct, 1);
}

fn factor_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex: Vec<Example> = (0..3)
        .map(|_| {
            let n = rng.gen_range(1..4);
            Example {
                src: (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..9)).collect(),
                src_factors: Vec::new(),
                trg: (0..n).map(|_| rng.gen_range(4..9)).collect(),
                trg_factors: vec![std::iter::once(SHIFT).chain((0..n).map(|_| rng.gen_range(5..7))).collect()],
            }
        })
        .collect();
    Batch::new(&ex).unwrap()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

/// Independent loss: smoothed CE per stream over non-pad rows / tokens, BCE / (batch · V).
fn reference_loss(b: &Batch, l: &Tensor<f64>, f: &Tensor<f64>, z: &Tensor<f64>, cfg: &LossConfig) -> f64 {
    let ce = |logits: &Tensor<f64>, labels: &[u32]| -> f64 {
        let v = logits.cols();
        let eps = cfg.label_smoothing as f64;
        let mut total = 0.0;
        for (r, &t) in labels.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let row = logits.row(r);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                let q = eps / v as f64 + if j == t as usize { 1.0 - eps } else { 0.0 };
                total -= q * (x - lse);
            }
        }
        total / b.num_target_tokens() as f64
    };
    let v = z.cols();
    let mut bce = 0.0;
    for i in 0..b.size {
        for j in 0..v {
            let y = if b.nvs_targets[i].contains(&(j as u32)) { 1.0 } else { 0.0 };
            let p = 1.0 / (1.0 + (-z.row(i)[j]).exp());
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    let w = cfg.factor_weights[0] as f64;
    ce(l, &b.labels) + w * ce(f, &b.factor_labels[0]) + cfg.nvs_weight as f64 * bce / (b.size * v) as f64
}

#[test]
fn loss_matches_reference_and_gradient_checks() {
    let cfg = LossConfig {
        label_smoothing: 0.1,
        factor_weights: vec![0.5],
        nvs_weight: 0.7,
    };
    for seed in 0..5 {
        let b = factor_batch(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rows = b.size * b.trg_len;
        let (l, f, z) = (random(&mut rng, rows, 9), random(&mut rng, rows, 7), random(&mut rng, b.size, 9));
        let mut tape = Tape::<f64>::new();
        let out = ForwardOutput {
            encoder_out: tape.constant(l.clone()),
            logits: tape.constant(l.clone()),
            factor_logits: vec![tape.constant(f.clone())],
            nvs_logits: Some(tape.constant(z.clone())),
        };
        let (_, m) = compute_loss(&mut tape, &out, &b, &cfg).unwrap();
        let r = reference_loss(&b, &l, &f, &z, &cfg);
        assert!((m.loss - r).abs() < 1e-6, "{} vs {r}", m.loss);

        for which in 0..3 {
            let point = [&l, &f, &z][which].clone();
            let err = grad_check(
                |tape, x| {
                    let c = |t: &mut Tape<f64>, v: &Tensor<f64>| t.constant(v.clone());
                    let out = ForwardOutput {
                        encoder_out: x,
                        logits: if which == 0 { x } else { c(tape, &l) },
                        factor_logits: vec![if which == 1 { x } else { c(tape, &f) }],
                        nvs_logits: Some(if which == 2 { x } else { c(tape, &z) }),
                    };
                    Ok(compute_loss(tape, &out, &b, &cfg)?.0)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "stream {which}: {err}");
        }
    }
}

#[test]
fn shift_labels_are_excluded_from_factor_accuracy() {
    let b = factor_batch(1);
    let rows = b.size * b.trg_len;
    let mut tape = Tape::<f64>::new();
    let logits = Tensor::zeros(&[rows, 9]);
    // factor logits always predict SHIFT
    let mut f = vec![0.0; rows * 7];
    for r in 0..rows {
        f[r * 7 + SHIFT as usize] = 5.0;
    }
    let out = ForwardOutput {
        encoder_out: tape.constant(logits.clone()),
        logits: tape.constant(logits),
        factor_logits: vec![tape.constant(Tensor::new(vec![rows, 7], f).unwrap())],
        nvs_logits: None,
    };
    let (_, m) = compute_loss(&mut tape, &out, &b, &LossConfig::default()).unwrap();
    let shifted = b.factor_labels[0].iter().filter(|&&x| x != 0 && x != SHIFT).count();
    assert_eq!(m.factors[0].total, shifted);
    assert_eq!(m.factors[0].correct, 0);
}

#[test]
fn glob_patterns() {
    assert!(glob_match("*", "anything.at.all"));
    assert!(glob_match("encoder.*", "encoder.layer0.ffn.w1"));
    assert!(!glob_match("encoder.*", "decoder.layer0.ffn.w1"));
    assert!(glob_match("*.layer?.ffn.*", "decoder.layer1.ffn.b2"));
    assert!(!glob_match("*.layer?.ffn.*", "decoder.layer10.ffn.b2"));
    assert!(glob_match("a*b*c", "axxbyyc"));
    assert!(!glob_match("a*b*c", "axxbyy"));
}

#[test]
fn presets_and_patterns() {
    let cfg = ModelConfig::default();
    let fresh = ModelParams::init(&cfg, 1).unwrap();

    let mut p = fresh.clone();
    freeze_params(&mut p, &FreezeSpec::parse("all_except_decoder").unwrap());
    for n in p.names() {
        assert_eq!(p.is_frozen(n), !n.starts_with("decoder."), "{n}");
    }

    let mut p = fresh.clone();
    freeze_params(&mut p, &FreezeSpec::parse("all_except_feed_forward").unwrap());
    assert!(!p.is_frozen("encoder.layer0.ffn.w1"));
    assert!(p.is_frozen("encoder.layer0.ffn_norm.gain") || !p.contains("encoder.layer0.ffn_norm.gain"));

    let mut p = fresh.clone();
    freeze_params(&mut p, &FreezeSpec::parse("all_except_embeddings").unwrap());
    assert!(!p.is_frozen("source.embed.surface"));
    assert!(p.is_frozen("output.bias"));

    let mut p = fresh.clone();
    freeze_params(&mut p, &FreezeSpec::parse("all_except_output_layer").unwrap());
    assert!(!p.is_frozen("output.bias"));
    assert!(p.is_frozen("decoder.final_norm.gain") || !p.contains("decoder.final_norm.gain"));

    let mut p = fresh;
    let unmatched = freeze_params(&mut p, &FreezeSpec::parse("encoder.*,nothing.here").unwrap());
    assert_eq!(unmatched, vec!["nothing.here".to_string()]);
    assert!(p.is_frozen("source.embed.surface") == false);
    assert!(p.names().filter(|n| n.starts_with("encoder.")).all(|n| p.is_frozen(n)));
}

#[test]
fn frozen_encoder_skips_its_backward_pass() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 2).unwrap();
    let mut frozen = params.clone();
    freeze_params(&mut frozen, &FreezeSpec::parse("encoder.*,source.*").unwrap());
    let b = Batch::new(&[
        Example {
            src: vec![5, 6, 7],
            src_factors: Vec::new(),
            trg: vec![8, 9],
            trg_factors: Vec::new(),
        },
        Example {
            src: vec![10],
            src_factors: Vec::new(),
            trg: vec![11, 12, 13],
            trg_factors: Vec::new(),
        },
    ])
    .unwrap();
    let run = |p: &ModelParams| {
        let mut tape = Tape::<f32>::new();
        let vars = ParamVars::bind(&mut tape, p);
        let out = forward(&mut tape, &cfg, &vars, &b).unwrap();
        let (loss, _) = compute_loss(&mut tape, &out, &b, &LossConfig::default()).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<(String, Option<Tensor>)> = vars
            .iter()
            .map(|(n, v)| (n.to_string(), tape.grad(v).cloned()))
            .collect();
        (tape.backward_ops(), grads)
    };
    let (ops_full, g_full) = run(&params);
    let (ops_frozen, g_frozen) = run(&frozen);
    assert!(ops_frozen < ops_full, "{ops_frozen} vs {ops_full}");
    for ((n, a), (_, b)) in g_full.iter().zip(&g_frozen) {
        if n.starts_with("decoder.") || n.starts_with("output.") {
            assert_eq!(a, b, "{n}");
        }
        if n.starts_with("encoder.") || n.starts_with("source.") {
            assert!(b.is_none(), "{n}");
        }
    }
}

fn checkpoint_records(dir: &std::path::Path, values: &[(f32, f64)]) -> Vec<CheckpointRecord> {
    values
        .iter()
        .enumerate()
        .map(|(i, &(v, loss))| {
            let mut p = ModelParams::new();
            p.insert("output.bias", Tensor::new(vec![2], vec![v, -v]).unwrap()).unwrap();
            let file = dir.join(format!("params.{i:05}"));
            p.save(&file).unwrap();
            CheckpointRecord {
                update: i * 10,
                validation_loss: loss,
                file,
            }
        })
        .collect()
}

#[test]
fn averaging_takes_the_arithmetic_mean() {
    let dir = tempfile::tempdir().unwrap();
    let recs = checkpoint_records(dir.path(), &[(1.0, 0.5), (3.0, 0.4)]);
    let avg = average_checkpoints(&recs, 2).unwrap();
    assert_eq!(avg.get("output.bias").unwrap().data(), &[2.0, -2.0]);
    let one = average_checkpoints(&recs, 1).unwrap();
    assert_eq!(one, ModelParams::load(&recs[1].file).unwrap());
    assert!(average_checkpoints(&recs, 3).is_err());
}

#[test]
fn averaging_excludes_the_worst_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let vals: Vec<(f32, f64)> = (0..10).map(|i| (i as f32 * 0.37, 1.0 + i as f64 * 0.1)).collect();
    let recs = checkpoint_records(dir.path(), &vals);
    let before = average_checkpoints(&recs, 8).unwrap();
    let mut perturbed = vals.clone();
    perturbed[8].0 = 1e6;
    perturbed[9].0 = -1e6;
    let dir2 = tempfile::tempdir().unwrap();
    let recs2 = checkpoint_records(dir2.path(), &perturbed);
    assert_eq!(average_checkpoints(&recs2, 8).unwrap(), before);
}

#[test]
fn averaging_ties_prefer_earlier_updates() {
    let dir = tempfile::tempdir().unwrap();
    let recs = checkpoint_records(dir.path(), &[(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)]);
    let best = select_best(&recs, 2);
    assert_eq!(best.iter().map(|r| r.update).collect::<Vec<_>>(), vec![0, 10]);
}

#[test]
fn averaging_rejects_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs = checkpoint_records(dir.path(), &[(1.0, 0.5), (3.0, 0.4)]);
    let mut p = ModelParams::new();
    p.insert("output.bias", Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
    p.save(&recs[1].file).unwrap();
    match average_checkpoints(&recs, 2) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("output.bias"), "{m}"),
        other => panic!("{other:?}"),
    }
    recs.truncate(1);
}

#[test]
fn metrics_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let recs = checkpoint_records(dir.path(), &[(1.0, 0.123456789012345), (3.0, 2.5)]);
    write_metrics(dir.path(), &recs).unwrap();
    assert_eq!(read_metrics(dir.path()).unwrap(), recs);
}

struct Toy {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    set: nmt_core::dataprep::ShardSet,
    cfg: ModelConfig,
    held: Vec<Example>,
}

fn toy(n: usize) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let (train_c, test_c) = copy_corpus(n + 50, 20, 10, 4).split(50);
    let set = prepare(dir.path(), "data", &train_c, 2, None);
    let v = set.vocabularies().unwrap();
    let cfg = ModelConfig {
        d_model: 32,
        ff_dim: 64,
        ..config_for(&v)
    };
    let held = encode(&test_c, &v);
    Toy {
        root: dir.path().to_path_buf(),
        _dir: dir,
        set,
        cfg,
        held,
    }
}

fn small(max_updates: usize, interval: usize) -> TrainConfig {
    TrainConfig {
        max_updates,
        checkpoint_interval: interval,
        batch_tokens: 128,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_updates_writes_the_initial_checkpoint() {
    let t = toy(200);
    let out = t.root.join("m");
    let s = train(&t.cfg, &t.set, &t.held, &small(0, 1), &out, TrainStart::Fresh).unwrap();
    assert_eq!(s.params, ModelParams::init(&t.cfg, 13).unwrap());
    assert_eq!(s.checkpoints.len(), 1);
    assert_eq!(ModelParams::load(&out.join("params.00000")).unwrap(), s.params);
    assert_eq!(ModelParams::load(&out.join(BEST_PARAMS)).unwrap(), s.params);
    let m = TrainedModel::open(&out).unwrap();
    assert_eq!(m.config, t.cfg);
}

#[test]
fn initial_loss_is_near_uniform() {
    let t = toy(200);
    let s = train(&t.cfg, &t.set, &t.held, &small(1, 1), &t.root.join("m"), TrainStart::Fresh).unwrap();
    let ln_v = (t.cfg.target_vocab_size as f64).ln();
    assert!((s.losses[0] - ln_v).abs() < 0.05 * ln_v, "{} vs {ln_v}", s.losses[0]);
}

#[test]
fn training_is_deterministic() {
    let t = toy(300);
    let a = train(&t.cfg, &t.set, &t.held, &small(100, 50), &t.root.join("a"), TrainStart::Fresh).unwrap();
    let b = train(&t.cfg, &t.set, &t.held, &small(100, 50), &t.root.join("b"), TrainStart::Fresh).unwrap();
    assert_eq!(
        std::fs::read(t.root.join("a/params.00100")).unwrap(),
        std::fs::read(t.root.join("b/params.00100")).unwrap()
    );
    assert_eq!(a.losses, b.losses);
}

#[test]
fn resuming_reproduces_the_trajectory() {
    let t = toy(300);
    let full = train(&t.cfg, &t.set, &t.held, &small(120, 40), &t.root.join("full"), TrainStart::Fresh).unwrap();
    let part = t.root.join("part");
    let first = train(&t.cfg, &t.set, &t.held, &small(40, 40), &part, TrainStart::Fresh).unwrap();
    let rest = train(&t.cfg, &t.set, &t.held, &small(120, 40), &part, TrainStart::Resume).unwrap();
    assert_eq!(first.losses, full.losses[..40]);
    assert_eq!(rest.losses, full.losses[40..]);
    assert_eq!(rest.params, full.params);
    assert_eq!(read_metrics(&part).unwrap().len(), 4);
}

#[test]
fn total_freeze_leaves_parameters_untouched() {
    let t = toy(200);
    let tc = TrainConfig {
        freeze: Some(FreezeSpec::parse("*").unwrap()),
        ..small(3, 3)
    };
    let s = train(&t.cfg, &t.set, &t.held, &tc, &t.root.join("m"), TrainStart::Fresh).unwrap();
    let init = ModelParams::init(&t.cfg, 13).unwrap();
    for (n, p) in init.iter() {
        assert_eq!(s.params.get(n).unwrap().data(), p.data(), "{n}");
    }
    assert_eq!(s.last_backward_ops, 0);
}

#[test]
fn decoder_only_training_keeps_the_rest_bit_identical() {
    let t = toy(200);
    let tc = TrainConfig {
        freeze: Some(FreezeSpec::parse("all_except_decoder").unwrap()),
        ..small(20, 10)
    };
    let s = train(&t.cfg, &t.set, &t.held, &tc, &t.root.join("m"), TrainStart::Fresh).unwrap();
    let init = ModelParams::init(&t.cfg, 13).unwrap();
    let mut changed = 0;
    for (n, p) in init.iter() {
        let now = s.params.get(n).unwrap().data();
        if n.starts_with("decoder.") {
            changed += usize::from(now != p.data());
        } else {
            assert_eq!(now, p.data(), "{n}");
        }
    }
    assert!(changed > 0);
}

#[test]
fn fine_tuning_starts_from_given_params() {
    let t = toy(200);
    let base = train(&t.cfg, &t.set, &t.held, &small(10, 10), &t.root.join("a"), TrainStart::Fresh).unwrap();
    let tuned =
        train(&t.cfg, &t.set, &t.held, &small(0, 1), &t.root.join("b"), TrainStart::Params(base.params.clone())).unwrap();
    assert_eq!(tuned.params, base.params);
}

#[test]
fn training_loss_decreases_on_the_copy_task() {
    let t = toy(1000);
    let s = train(&t.cfg, &t.set, &t.held, &small(200, 100), &t.root.join("m"), TrainStart::Fresh).unwrap();
    let head: f64 = s.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = s.losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
    let recs = &s.checkpoints;
    assert!(recs.last().unwrap().validation_loss < recs[0].validation_loss);
    assert!(t.root.join("m").join(AVERAGED_PARAMS).exists());
}

#[test]
fn non_finite_loss_aborts_with_the_update_index() {
    let t = toy(200);
    let mut p = ModelParams::init(&t.cfg, 13).unwrap();
    p.get_mut("output.bias").unwrap().data_mut()[4] = f32::NAN;
    match train(&t.cfg, &t.set, &t.held, &small(5, 5), &t.root.join("m"), TrainStart::Params(p)) {
        Err(e @ Error::Numeric(_)) => {
            assert!(e.to_string().contains("update 1"), "{e}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let t = toy(100);
    let bad = [
        TrainConfig {
            checkpoint_interval: 10,
            ..small(5, 5)
        },
        TrainConfig {
            average_best: 0,
            ..small(5, 5)
        },
    ];
    for tc in bad {
        assert!(matches!(
            train(&t.cfg, &t.set, &t.held, &tc, &t.root.join("m"), TrainStart::Fresh),
            Err(Error::Config(_))
        ));
    }
    let wrong = ModelConfig {
        target_vocab_size: 99,
        ..t.cfg.clone()
    };
    assert!(train(&wrong, &t.set, &t.held, &small(1, 1), &t.root.join("m"), TrainStart::Fresh).is_err());
}

#[test]
fn ssru_decoder_trains_too() {
    let t = toy(200);
    let cfg = ModelConfig {
        decoder_kind: DecoderKind::Ssru,
        ..t.cfg.clone()
    };
    let s = train(&cfg, &t.set, &t.held, &small(30, 30), &t.root.join("m"), TrainStart::Fresh).unwrap();
    assert!(s.losses.iter().all(|l| l.is_finite()));
    assert!(s.losses[29] < s.losses[0]);
}
