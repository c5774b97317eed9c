use mlgl_core::autodiff::{Mode, Tape};
use mlgl_core::gradcheck::{check_params, relative_error, DEFAULT_STEP};
use mlgl_core::graph::{FusionMode, NodeKind};
use mlgl_core::loss::{BatchTargets, LossValues, Objective};
use mlgl_core::{LabelSet, Mlgl, ModelConfig, SeededRng, Taxonomy, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        n_fae: 5,
        n_cae: 2,
        n_mels: 16,
        channels: [3, 4, 6],
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn taxonomy(cfg: &ModelConfig) -> Taxonomy {
    Taxonomy::new(
        (0..cfg.n_fae).map(|i| format!("f{i}")).collect(),
        (0..cfg.n_cae).map(|i| format!("c{i}")).collect(),
        (0..cfg.n_fae).map(|i| i % cfg.n_cae).collect(),
    )
    .unwrap()
}

fn random_input(n: usize, frames: usize, mels: usize, seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    let data = (0..n * frames * mels).map(|_| rng.normal()).collect();
    Tensor::new([n, 1, frames, mels], data).unwrap()
}

fn random_labels(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<LabelSet> {
    let tax = taxonomy(cfg);
    let mut rng = SeededRng::with_stream(seed, 5);
    (0..n)
        .map(|_| {
            let fae = (0..cfg.n_fae).map(|_| rng.bernoulli(0.4)).collect();
            LabelSet::new(&tax, fae, rng.uniform_in(1.0, 10.0)).unwrap()
        })
        .collect()
}

fn loss_on(
    model: &Mlgl<f64>,
    store: &mlgl_core::ParamStore<f64>,
    tape: &mut Tape<f64>,
    x: &Tensor<f64>,
    targets: &BatchTargets<f64>,
    objective: &Objective,
) -> mlgl_core::Result<mlgl_core::Var> {
    let input = tape.constant(x.clone());
    let mut rng = SeededRng::new(0);
    let out = model.forward_with(store, tape, input, &mut Mode::Train(&mut rng))?;
    Ok(objective.record(tape, &out, targets)?.total)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..5 {
        let cfg = ModelConfig {
            fusion: FusionMode::ALL[seed as usize],
            ..small_config()
        };
        let model = Mlgl::<f64>::new(cfg.clone(), seed).unwrap();
        let x = random_input(3, 12, 16, 100 + seed);
        let labels = random_labels(&cfg, 3, seed);
        let targets = BatchTargets::from_labels(&labels);
        let objective = Objective::default();
        let checks = check_params(model.store(), DEFAULT_STEP, 3, seed, |tape, store| {
            loss_on(&model, store, tape, &x, &targets, &objective)
        })
        .unwrap();
        let analytic: Vec<f64> = checks.iter().flat_map(|c| c.analytic.clone()).collect();
        let numeric: Vec<f64> = checks.iter().flat_map(|c| c.numeric.clone()).collect();
        let total = relative_error(&analytic, &numeric);
        assert!(total <= 1e-4, "seed {seed}: aggregate relative error {total:e}");
        for c in &checks {
            let scale = c.analytic.iter().chain(&c.numeric).fold(1e-3f64, |m, v| m.max(v.abs()));
            let worst = c
                .analytic
                .iter()
                .zip(&c.numeric)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            assert!(worst / scale <= 1e-4, "seed {seed}: {} off by {worst:e}", c.name);
        }
    }
}

fn grads_with(objective: &Objective, seed: u64) -> (Mlgl<f64>, Vec<(String, f64)>) {
    let cfg = small_config();
    let model = Mlgl::<f64>::new(cfg.clone(), seed).unwrap();
    let x = random_input(4, 16, 16, seed + 7);
    let targets = BatchTargets::from_labels(&random_labels(&cfg, 4, seed));
    let mut tape = Tape::new();
    let loss = loss_on(&model, model.store(), &mut tape, &x, &targets, objective).unwrap();
    let grads = tape.backward(loss).unwrap();
    let norms = model
        .store()
        .param_ids()
        .map(|id| {
            let g = grads.param(id).map_or(0.0, |g| g.iter().map(|v| v.abs()).sum());
            (model.store().param_name(id).to_string(), g)
        })
        .collect();
    (model, norms)
}

#[test]
fn first_loss_alone_reaches_only_fine_level_one() {
    let mut objective = Objective::default();
    objective.lambdas = [0.0; 9];
    objective.lambdas[0] = 1.0;
    let (_, norms) = grads_with(&objective, 3);
    for (name, g) in norms {
        let own = name.starts_with("backbone.fae.") || name.starts_with("embed.fae.") || name.starts_with("head.l1.fae.");
        if own {
            assert!(g > 0.0, "{name} got no gradient");
        } else {
            assert_eq!(g, 0.0, "{name} got gradient from L1");
        }
    }
}

#[test]
fn no_dead_parameters() {
    for fusion in FusionMode::ALL {
        let cfg = ModelConfig {
            fusion,
            gating_shared_bias: false,
            ..small_config()
        };
        let model = Mlgl::<f64>::new(cfg.clone(), 9).unwrap();
        let x = random_input(4, 16, 16, 1);
        let targets = BatchTargets::from_labels(&random_labels(&cfg, 4, 2));
        let mut tape = Tape::new();
        let loss = loss_on(&model, model.store(), &mut tape, &x, &targets, &Objective::default()).unwrap();
        let grads = tape.backward(loss).unwrap();
        for id in model.store().param_ids() {
            let g: f64 = grads.param(id).map_or(0.0, |g| g.iter().map(|v| v.abs()).sum());
            assert!(g > 0.0, "{fusion:?}: {} is dead", model.store().param_name(id));
        }
    }
}

#[test]
fn level_one_equals_composed_components() {
    let cfg = small_config();
    let model = Mlgl::<f64>::new(cfg, 4).unwrap();
    let x = random_input(2, 16, 16, 3);
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let out = model.forward(&mut tape, input, &mut Mode::Eval).unwrap();
    for kind in NodeKind::ALL {
        let mut t2 = Tape::new();
        let inp = t2.constant(x.clone());
        let f = model.backbone(kind).forward(&mut t2, model.store(), inp, &Mode::Eval, 1e-5).unwrap();
        let e = model.embedding(kind).forward(&mut t2, model.store(), f).unwrap();
        let p = model.heads(1, kind).forward(&mut t2, model.store(), e).unwrap();
        assert_eq!(t2.value(p).data(), tape.value(out.levels[0].get(kind)).data());
    }
}

#[test]
fn attention_rows_are_convex_combinations_of_keys() {
    let model = Mlgl::<f64>::new(small_config(), 5).unwrap();
    let x = random_input(2, 16, 16, 8);
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let out = model.forward(&mut tape, input, &mut Mode::Eval).unwrap();
    for w in out.attention {
        let w = tape.value(w.unwrap());
        let n = w.shape()[2];
        for row in w.data().chunks(n) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn embeddings_are_isolated_per_branch() {
    let cfg = small_config();
    let mut model = Mlgl::<f64>::new(cfg, 6).unwrap();
    let x = random_input(2, 16, 16, 4);
    let before = model.predict(&x).unwrap();
    for v in model.store_mut().get_mut("embed.fae.weight").unwrap().data_mut() {
        *v += 0.3;
    }
    let after = model.predict(&x).unwrap();
    assert_ne!(before.levels[0].fae, after.levels[0].fae);
    assert_eq!(before.levels[0].cae, after.levels[0].cae);
    assert_eq!(before.levels[0].ar, after.levels[0].ar);
}

#[test]
fn event_heads_are_monotone_in_bias() {
    let mut model = Mlgl::<f64>::new(small_config(), 8).unwrap();
    let x = random_input(1, 16, 16, 2);
    let base = model.predict(&x).unwrap();
    model.store_mut().get_mut("head.l3.fae.bias").unwrap().data_mut()[0] += 0.5;
    model.store_mut().get_mut("head.l3.ar.bias").unwrap().data_mut()[0] += 0.5;
    let up = model.predict(&x).unwrap();
    assert!(up.levels[2].fae[0] > base.levels[2].fae[0]);
    assert!((up.levels[2].ar[0] - base.levels[2].ar[0] - 0.5).abs() < 1e-12);
    assert!(base.levels.iter().all(|l| l.fae.iter().chain(&l.cae).all(|&p| p > 0.0 && p < 1.0)));
}

#[test]
fn global_graph_is_permutation_equivariant() {
    let model = Mlgl::<f64>::new(small_config(), 2).unwrap();
    let gcg = model.global_graph();
    let n = gcg.nodes();
    let mut rng = SeededRng::new(1);
    let h: Vec<f64> = (0..2 * n * 64).map(|_| rng.normal()).collect();
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut hp = vec![0.0; h.len()];
    for b in 0..2 {
        for (i, &p) in perm.iter().enumerate() {
            let dst = (b * n + i) * 64;
            let src = (b * n + p) * 64;
            hp[dst..dst + 64].copy_from_slice(&h[src..src + 64]);
        }
    }
    let run = |data: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new([2, n, 64], data).unwrap());
        let o = gcg.forward(&mut tape, model.store(), v, 0.0, &mut Mode::Eval).unwrap();
        tape.value(o).data().to_vec()
    };
    let (o, op) = (run(h), run(hp));
    for b in 0..2 {
        for (i, &p) in perm.iter().enumerate() {
            for d in 0..64 {
                let a = op[(b * n + i) * 64 + d];
                let e = o[(b * n + p) * 64 + d];
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn losses_match_scalar_loop_oracle() {
    let cfg = small_config();
    for seed in 0..5 {
        let model = Mlgl::<f64>::new(cfg.clone(), seed).unwrap();
        let x = random_input(3, 16, 16, seed);
        let labels = random_labels(&cfg, 3, seed + 1);
        let targets = BatchTargets::from_labels(&labels);
        let objective = Objective::default();
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let out = model.forward(&mut tape, input, &mut Mode::Eval).unwrap();
        let vars = objective.record(&mut tape, &out, &targets).unwrap();
        let values = LossValues::read(&tape, &vars);

        let mut oracle_total = 0.0;
        for (i, &got) in values.terms.iter().enumerate() {
            let level = &out.levels[i / 3];
            let expected = match i % 3 {
                1 => {
                    let p = tape.value(level.ar).data();
                    let mut s = 0.0;
                    for (k, l) in labels.iter().enumerate() {
                        s += (p[k] - l.ar).powi(2);
                    }
                    s / labels.len() as f64
                }
                r => {
                    let (var, n) = if r == 0 { (level.fae, cfg.n_fae) } else { (level.cae, cfg.n_cae) };
                    let p = tape.value(var).data();
                    let mut s = 0.0;
                    for (k, l) in labels.iter().enumerate() {
                        let y = if r == 0 { &l.fae } else { &l.cae };
                        for c in 0..n {
                            let q = p[k * n + c].clamp(1e-7, 1.0 - 1e-7);
                            s -= if y[c] { q.ln() } else { (1.0 - q).ln() };
                        }
                    }
                    s / (labels.len() * n) as f64
                }
            };
            assert!((got - expected).abs() < 1e-6, "term {}: {got} vs {expected}", i + 1);
            oracle_total += got;
        }
        assert!((values.total - oracle_total).abs() < 1e-9);
    }
}

#[test]
fn uniform_probabilities_give_ln2() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::full([2, 24], 0.5));
    let y: Vec<f64> = (0..48).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let l = tape.bce_mean(p, &y, 1e-7).unwrap();
    assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let mut tape = Tape::<f64>::new();
    let y = [1.0, 0.0, 1.0];
    let p = tape.constant(Tensor::new([3], y.to_vec()).unwrap());
    let l = tape.bce_mean(p, &y, 1e-7).unwrap();
    assert!(tape.item(l) <= 1.1e-7);
    let a = tape.constant(Tensor::new([2], vec![3.0, 7.5]).unwrap());
    let m = tape.mse(a, &[3.0, 7.5]).unwrap();
    assert_eq!(tape.item(m), 0.0);
}

#[test]
fn nan_prediction_names_the_head() {
    let mut model = Mlgl::<f64>::new(small_config(), 1).unwrap();
    model.store_mut().get_mut("head.l2.cae.bias").unwrap().data_mut()[0] = f64::NAN;
    let cfg = small_config();
    let x = random_input(2, 16, 16, 0);
    let targets = BatchTargets::from_labels(&random_labels(&cfg, 2, 0));
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let out = model.forward(&mut tape, input, &mut Mode::Eval).unwrap();
    match Objective::default().record(&mut tape, &out, &targets) {
        Err(mlgl_core::Error::NonFinite { head }) => assert_eq!(head, "level2.cae"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn default_parameter_count_is_in_budget() {
    let model = Mlgl::<f32>::new(ModelConfig::default(), 0).unwrap();
    let n = model.param_count();
    assert!((3_500_000..=4_700_000).contains(&n), "{n} parameters");
}

#[test]
fn same_seed_builds_identical_models() {
    let a = Mlgl::<f64>::new(small_config(), 42).unwrap();
    let b = Mlgl::<f64>::new(small_config(), 42).unwrap();
    let c = Mlgl::<f64>::new(small_config(), 43).unwrap();
    let flat = |m: &Mlgl<f64>| m.store().named_tensors().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn rejects_wrong_input_shape() {
    let model = Mlgl::<f64>::new(small_config(), 0).unwrap();
    assert!(matches!(
        model.predict(&random_input(1, 16, 12, 0)),
        Err(mlgl_core::Error::Contract(_))
    ));
    assert!(matches!(
        model.predict(&random_input(1, 4, 16, 0)),
        Err(mlgl_core::Error::Input(_))
    ));
}
