use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sal_lab::avr::{ProblemInstance, TaskKind, TaskStructure};
use sal_lab::model::{stack_instances, ModelOutput, ScarConfig, ScarModel};
use sal_lab::taskgen::{generate, instances, GeneratorConfig, Rule};
use sal_lab::tensor::{Graph, Tensor};
use sal_lab::training::{
    apply_pipeline, augment, compute_loss, evaluate, evaluate_metrics, loss_graph, run_regime, sample_pipeline,
    train_phase, AugmentConfig, EarlyStopping, MetricLog, PlateauScheduler, Regime, RegimeSpec, TaskBatcher,
    RuleGroup, TaskData, TaskSampling, TrainConfig, Transform,
};
use sal_lab::Error;

fn output(scores: Vec<f64>, rules: Option<Vec<Vec<f64>>>) -> ModelOutput<f64> {
    ModelOutput::from_scores(scores, rules).unwrap()
}

#[test]
fn uniform_scores_cost_log_answers() {
    for a in [4usize, 5, 8] {
        let l = compute_loss(&output(vec![0.7; a], None), a - 1, None, 10.0, RuleGroup::Label).unwrap();
        assert!((l.total - (a as f64).ln()).abs() < 1e-12);
        assert_eq!(l.aux, 0.0);
    }
}

#[test]
fn saturated_scores_cost_nothing() {
    let mut s = vec![0.0; 8];
    s[3] = 30.0;
    assert!(compute_loss(&output(s, None), 3, None, 10.0, RuleGroup::Label).unwrap().total < 1e-9);
}

#[test]
fn beta_weights_the_rule_loss() {
    // Two answers: CE = ln(1 + e^{-s}) = 1 and one rule logit with BCE = 0.2.
    let s = -(std::f64::consts::E - 1.0).ln();
    let z = -(0.2f64.exp() - 1.0).ln();
    let out = output(vec![s, 0.0], Some(vec![vec![z], vec![-5.0]]));
    let l = compute_loss(&out, 0, Some(&[1]), 10.0, RuleGroup::Label).unwrap();
    assert!((l.ce - 1.0).abs() < 1e-12);
    assert!((l.aux - 0.2).abs() < 1e-12);
    assert!((l.total - 3.0).abs() < 1e-12);
    // Missing annotations drop the auxiliary term.
    assert!((compute_loss(&out, 0, None, 10.0, RuleGroup::Label).unwrap().total - 1.0).abs() < 1e-12);
}

#[test]
fn rule_group_selects_which_logits_are_scored() {
    // Answer 1 ranks first, label is 0; each group's single logit has a
    // known BCE against target 1: ln(1 + e^{-z}).
    let bce = |z: f64| (-z).exp().ln_1p();
    let zs = [2.0, -1.0, 0.5];
    let out = output(vec![0.0, 3.0, 1.0], Some(zs.iter().map(|&z| vec![z]).collect()));
    assert_eq!(out.prediction, 1);
    let aux = |g| compute_loss(&out, 0, Some(&[1]), 1.0, g).unwrap().aux;
    assert!((aux(RuleGroup::Label) - bce(2.0)).abs() < 1e-12);
    assert!((aux(RuleGroup::Predicted) - bce(-1.0)).abs() < 1e-12);
    let mean = zs.iter().map(|&z| bce(z)).sum::<f64>() / 3.0;
    assert!((aux(RuleGroup::Mean) - mean).abs() < 1e-12);
    for g in [RuleGroup::Label, RuleGroup::Predicted, RuleGroup::Mean] {
        assert_eq!(g.to_string().parse::<RuleGroup>().unwrap(), g);
    }
    assert!("all".parse::<RuleGroup>().is_err());
}

#[test]
fn loss_rejects_bad_inputs() {
    let out = output(vec![0.0; 4], Some(vec![vec![0.0; 3]; 4]));
    assert!(compute_loss(&out, 4, None, 1.0, RuleGroup::Label).is_err());
    assert!(compute_loss(&out, 0, Some(&[1, 0]), 1.0, RuleGroup::Label).is_err());
}

fn tiny_f64() -> ScarModel<f64> {
    ScarModel::new(ScarConfig::scar_tiny(), 5).unwrap()
}

fn rpm_batch<T: sal_lab::Scalar>(n: usize, seed: u64) -> Vec<ProblemInstance<T>> {
    instances(generate(&GeneratorConfig::new(TaskKind::Rpm, n, seed)).unwrap())
        .into_iter()
        .map(|i| ProblemInstance {
            panels: i.panels.iter().map(Tensor::cast).collect(),
            label: i.label,
            rules: i.rules,
        })
        .collect()
}

fn rule_targets(batch: &[ProblemInstance<f64>]) -> Tensor<f64> {
    let w = batch[0].rules.as_ref().unwrap().len();
    Tensor::new(
        vec![batch.len(), w],
        batch.iter().flat_map(|i| i.rules.iter().flatten().map(|&b| f64::from(b))).collect(),
    )
    .unwrap()
}

#[test]
fn graph_loss_matches_per_instance_loss() {
    let mut model = tiny_f64();
    model.ensure_rule_head(TaskKind::Rpm, 12).unwrap();
    let batch = rpm_batch::<f64>(3, 9);
    let s = TaskStructure::rpm();
    let mut g = Graph::inference();
    let vars = model.forward(&mut g, &stack_instances(&batch).unwrap(), &s, false).unwrap();
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let targets = rule_targets(&batch);
    let outs = model.predict(&batch, &s).unwrap();
    for group in [RuleGroup::Label, RuleGroup::Predicted, RuleGroup::Mean] {
        let loss = loss_graph(&mut g, &model, &vars, TaskKind::Rpm, &labels, Some(&targets), 10.0, group).unwrap();
        let mut expect = [0.0; 3];
        for (inst, out) in batch.iter().zip(&outs) {
            let l = compute_loss(out, inst.label, inst.rules.as_deref(), 10.0, group).unwrap();
            expect[0] += l.total / 3.0;
            expect[1] += l.ce / 3.0;
            expect[2] += l.aux / 3.0;
        }
        assert!((g.value(loss.total).item() - expect[0]).abs() < 1e-10, "{group}");
        assert!((g.value(loss.ce).item() - expect[1]).abs() < 1e-10, "{group}");
        assert!((g.value(loss.aux.unwrap()).item() - expect[2]).abs() < 1e-10, "{group}");
    }
}

#[test]
fn zero_beta_leaves_rule_head_without_gradient() {
    let mut model = tiny_f64();
    model.ensure_rule_head(TaskKind::Rpm, 12).unwrap();
    let batch = rpm_batch::<f64>(2, 4);
    let s = TaskStructure::rpm();
    let head: Vec<_> = model
        .store()
        .trainable_ids()
        .filter(|&id| model.store().name(id).starts_with("rule_head."))
        .collect();
    assert_eq!(head.len(), 4);
    let norm = |beta: f64| {
        let mut g = Graph::new();
        let vars = model.forward(&mut g, &stack_instances(&batch).unwrap(), &s, true).unwrap();
        let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
        let loss = loss_graph(&mut g, &model, &vars, TaskKind::Rpm, &labels, Some(&rule_targets(&batch)), beta, RuleGroup::Label).unwrap();
        let grads = g.backward(loss.total).unwrap().param_map(model.store());
        head.iter()
            .map(|id| grads[id].data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    };
    assert_eq!(norm(0.0), 0.0);
    assert!(norm(10.0) > 0.0);
}

fn panel(n: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
    Tensor::from_fn(vec![n, n], |k| f(k / n, k % n))
}

fn instance_of(panels: Vec<Tensor<f32>>) -> ProblemInstance<f32> {
    ProblemInstance {
        panels,
        label: 1,
        rules: Some(vec![0, 1, 1]),
    }
}

#[test]
fn transforms_follow_index_oracles() {
    let n = 5;
    let x = panel(n, |i, j| (i * 10 + j) as f32);
    let check = |t: Transform, oracle: &dyn Fn(usize, usize) -> (usize, usize)| {
        let y = t.apply(&x).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (a, b) = oracle(i, j);
                assert_eq!(y.data()[i * n + j], x.data()[a * n + b], "{t:?} at ({i}, {j})");
            }
        }
    };
    check(Transform::VerticalFlip, &|i, j| (n - 1 - i, j));
    check(Transform::HorizontalFlip, &|i, j| (i, n - 1 - j));
    check(Transform::Transpose, &|i, j| (j, i));
    check(Transform::Rotate90, &|i, j| (j, n - 1 - i));
    check(Transform::Rotate { quarter_turns: 2 }, &|i, j| (n - 1 - i, n - 1 - j));
    check(Transform::Rotate { quarter_turns: 3 }, &|i, j| (n - 1 - j, i));
}

#[test]
fn flips_are_involutions_and_rotations_cycle() {
    let x = panel(6, |i, j| ((i * 7 + j * 3) % 11) as f32 / 10.0);
    let hh = Transform::HorizontalFlip
        .apply(&Transform::HorizontalFlip.apply(&x).unwrap())
        .unwrap();
    assert_eq!(hh.data(), x.data());
    let mut r = x.clone();
    for _ in 0..4 {
        r = Transform::Rotate90.apply(&r).unwrap();
    }
    assert_eq!(r.data(), x.data());
    let inst = instance_of(vec![x.clone(), x.clone()]);
    let twice = apply_pipeline(
        &apply_pipeline(&inst, &[Transform::HorizontalFlip]).unwrap(),
        &[Transform::HorizontalFlip],
    )
    .unwrap();
    assert_eq!(twice, inst);
}

#[test]
fn no_augmentation_branch_is_identity() {
    let inst = instance_of(vec![panel(4, |i, j| (i + j) as f32 / 8.0); 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let off = AugmentConfig {
        probability: 0.0,
        transform_probability: 1.0,
    };
    for _ in 0..20 {
        assert_eq!(augment(&inst, &off, &mut rng).unwrap(), inst);
    }
}

#[test]
fn one_pipeline_for_every_panel() {
    let a = panel(6, |i, j| (i * 6 + j) as f32 / 36.0);
    let b = panel(6, |i, j| ((i + 2 * j) % 5) as f32 / 5.0);
    let inst = instance_of(vec![a.clone(), b.clone(), a.clone()]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let always = AugmentConfig {
        probability: 1.0,
        transform_probability: 0.5,
    };
    for _ in 0..30 {
        let out = augment(&inst, &always, &mut rng).unwrap();
        assert_eq!(out.label, inst.label);
        assert_eq!(out.rules, inst.rules);
        assert_eq!(out.panels[0], out.panels[2]);
        // Re-derive the pipeline from panel 0 and confirm it explains panel 1.
        let explains = all_pipelines().into_iter().any(|p| {
            apply_pipeline(&inst, &p).unwrap().panels == out.panels
        });
        assert!(explains);
    }
    let tall = instance_of(vec![Tensor::zeros(vec![4, 6])]);
    assert!(apply_pipeline(&tall, &[Transform::Transpose]).is_err());
    assert!(apply_pipeline(&tall, &[Transform::VerticalFlip]).is_ok());
}

fn all_pipelines() -> Vec<Vec<Transform>> {
    let mut out = Vec::new();
    for mask in 0..32u32 {
        for turns in [2u8, 3] {
            let mut p = Vec::new();
            let all = [
                Transform::VerticalFlip,
                Transform::HorizontalFlip,
                Transform::Rotate90,
                Transform::Rotate { quarter_turns: turns },
                Transform::Transpose,
            ];
            for (k, t) in all.into_iter().enumerate() {
                if mask & (1 << k) != 0 {
                    p.push(t);
                }
            }
            out.push(p);
        }
    }
    out
}

#[test]
fn pipeline_sampling_frequencies() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 40_000;
    let mut augmented = 0;
    let mut counts = [0usize; 5];
    let mut rot = [0usize; 2];
    for _ in 0..n {
        let p = sample_pipeline(&cfg, &mut rng);
        if !p.is_empty() {
            augmented += 1;
        }
        let order: Vec<usize> = p
            .iter()
            .map(|t| match t {
                Transform::VerticalFlip => 0,
                Transform::HorizontalFlip => 1,
                Transform::Rotate90 => 2,
                Transform::Rotate { quarter_turns } => {
                    rot[usize::from(*quarter_turns == 3)] += 1;
                    3
                }
                Transform::Transpose => 4,
            })
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]), "pipeline out of order: {p:?}");
        for k in order {
            counts[k] += 1;
        }
    }
    // An instance is augmented with probability 0.5, but a drawn pipeline can
    // still be empty with probability 0.75^5.
    let expect_nonempty = 0.5 * (1.0 - 0.75f64.powi(5));
    assert!((augmented as f64 / n as f64 - expect_nonempty).abs() < 0.01);
    for c in counts {
        assert!((c as f64 / n as f64 - 0.125).abs() < 0.01, "{counts:?}");
    }
    assert!((rot[0] as f64 / (rot[0] + rot[1]) as f64 - 0.5).abs() < 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_permute_pixels(seed in any::<u64>(), n in 1usize..7, which in 0usize..6) {
        let t = [
            Transform::VerticalFlip,
            Transform::HorizontalFlip,
            Transform::Rotate90,
            Transform::Rotate { quarter_turns: 2 },
            Transform::Rotate { quarter_turns: 3 },
            Transform::Transpose,
        ][which];
        let x = panel(n, |i, j| ((seed as usize).wrapping_mul(31).wrapping_add(i * 13 + j * 7) % 97) as f32);
        let y = t.apply(&x).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn augmented_instances_keep_their_certified_answer() {
    // Transforms permute pixels, so every panel keeps its shade histogram and
    // ink area: shade, size and count survive and the stored label stays valid.
    let gen = generate(&GeneratorConfig::new(TaskKind::Rpm, 20, 6)).unwrap();
    let s = TaskStructure::rpm();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let always = AugmentConfig {
        probability: 1.0,
        transform_probability: 0.5,
    };
    for g in &gen {
        assert_eq!(sal_lab::taskgen::solve(g, &s), Some(g.instance.label));
        let out = augment(&g.instance, &always, &mut rng).unwrap();
        assert_eq!(out.label, g.instance.label);
        for (p, q) in g.instance.panels.iter().zip(&out.panels) {
            let ink = |t: &Tensor<f32>| {
                let mut v: Vec<u32> = t.data().iter().map(|x| (x * 4.0).round() as u32).collect();
                v.sort_unstable();
                v
            };
            assert_eq!(ink(p), ink(q));
        }
    }
}

#[test]
fn plateau_schedule_arithmetic() {
    let mut s = PlateauScheduler::new(0.1, 5, 1e-4);
    let mut lr = 1e-3;
    lr = s.step(1.0, lr);
    for _ in 0..12 {
        lr = s.step(1.0, lr);
    }
    assert_eq!(s.reductions(), 2);
    assert!((lr - 1e-5).abs() < 1e-18);
    // Improvements smaller than min_delta do not reset the count.
    let mut s = PlateauScheduler::new(0.1, 2, 1e-4);
    let mut lr = 1.0;
    for loss in [1.0, 0.99995, 0.99996, 0.99997] {
        lr = s.step(loss, lr);
    }
    assert_eq!(lr, 0.1);
}

#[test]
fn early_stopping_counts_stale_epochs() {
    let mut e = EarlyStopping::new(17, 1e-4);
    assert!(e.update(2.0).improved);
    for k in 1..17 {
        let d = e.update(2.0 - 5e-5 * (k % 2) as f64);
        assert!(!d.improved && !d.stop, "epoch {k}");
    }
    assert!(e.update(2.0).stop);
    let mut e = EarlyStopping::new(3, 0.0);
    e.update(1.0);
    e.update(1.0);
    assert!(e.update(0.5).improved);
    assert_eq!(e.best(), 0.5);
}

#[test]
fn mtl_batches_are_homogeneous_and_uniform() {
    let sizes = vec![900, 300];
    let mut b = TaskBatcher::new(sizes.clone(), 128, TaskSampling::Uniform, ChaCha8Rng::seed_from_u64(7)).unwrap();
    b.start_epoch();
    let mut counts = [0usize; 2];
    for _ in 0..1000 {
        let batch = b.next_batch();
        assert!(!batch.indices.is_empty());
        assert!(batch.indices.iter().all(|&i| i < sizes[batch.task]));
        counts[batch.task] += 1;
    }
    assert!((counts[0] as f64 / 1000.0 - 0.5).abs() <= 0.05, "{counts:?}");

    let mut p = TaskBatcher::new(sizes, 16, TaskSampling::Proportional, ChaCha8Rng::seed_from_u64(7)).unwrap();
    p.start_epoch();
    let share = (0..4000).filter(|_| p.next_batch().task == 0).count() as f64 / 4000.0;
    assert!((share - 0.75).abs() < 0.03, "{share}");
}

#[test]
fn single_task_epoch_visits_every_instance_once() {
    let mut b = TaskBatcher::new(vec![70], 32, TaskSampling::Uniform, ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(b.batches_per_epoch(), 3);
    for _ in 0..2 {
        b.start_epoch();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_batch().indices).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..70).collect::<Vec<_>>());
    }
    assert!(TaskBatcher::new(vec![], 4, TaskSampling::Uniform, ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(TaskBatcher::new(vec![3, 0], 4, TaskSampling::Uniform, ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn config_overrides_and_validation() {
    let mut c = TrainConfig::default();
    assert_eq!((c.lr, c.beta, c.plateau_patience, c.early_stop_patience), (1e-3, 10.0, 5, 17));
    assert_eq!((c.batch_small, c.batch_large), (32, 128));
    c.apply_overrides("# comment\nlr = 0.01\n\nbeta=0\nmax_epochs = 3 # trailing\ntask_sampling = proportional\n")
        .unwrap();
    assert_eq!((c.lr, c.beta, c.max_epochs), (0.01, 0.0, 3));
    assert_eq!(c.task_sampling, TaskSampling::Proportional);
    assert_eq!((c.rule_group, c.log_batches), (RuleGroup::Label, false));
    c.apply_overrides("rule_group = mean\nlog_batches = true").unwrap();
    assert_eq!((c.rule_group, c.log_batches), (RuleGroup::Mean, true));
    assert!(c.clone().apply_overrides("rule_group = odd").is_err());
    assert_eq!(c.finetune_max_epochs, None);
    c.apply_overrides("finetune_max_epochs = 4").unwrap();
    assert_eq!((c.max_epochs, c.finetune_max_epochs), (3, Some(4)));
    assert!(c.clone().apply_overrides("finetune_max_epochs = 0").is_err());
    assert!(c.clone().apply_overrides("nonsense = 1").is_err());
    assert!(c.clone().apply_overrides("lr 1").is_err());
    assert!(c.clone().apply_overrides("beta = -1").is_err());
    assert!(c.clone().apply_overrides("augment_probability = 1.5").is_err());
    assert!(c.clone().apply_overrides("early_stop_patience = 0").is_err());
    assert_eq!(c.batch_size_for(&[500]), 32);
    assert_eq!(c.batch_size_for(&[500, 500]), 128);
    assert_eq!(c.batch_size_for(&[50_000]), 128);
}

#[test]
fn regime_specs_are_checked() {
    assert!(RegimeSpec::stl(TaskKind::Rpm).validate().is_ok());
    let two = RegimeSpec {
        regime: Regime::Stl,
        pretrain: vec![TaskKind::Rpm, TaskKind::Vap],
        target: None,
    };
    assert!(two.validate().is_err());
    assert!(RegimeSpec::tl(vec![TaskKind::Rpm, TaskKind::Vap], TaskKind::O3).validate().is_ok());
    assert!(RegimeSpec::tl(vec![TaskKind::Rpm, TaskKind::O3], TaskKind::O3).validate().is_err());
    assert!(RegimeSpec::mtl(vec![TaskKind::Rpm, TaskKind::O3], Some(TaskKind::O3)).validate().is_ok());
    assert!(RegimeSpec::mtl(vec![TaskKind::Rpm, TaskKind::Rpm], None).validate().is_err());
    assert_eq!("tl".parse::<Regime>().unwrap(), Regime::Tl);
}

fn o3_data(n: usize, seed: u64) -> Vec<ProblemInstance<f32>> {
    instances(generate(&GeneratorConfig::new(TaskKind::O3, n, seed)).unwrap())
}

#[test]
fn untrained_model_is_at_chance_and_deterministic() {
    let model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 1).unwrap();
    let mut data = o3_data(2000, 31);
    let s = TaskStructure::o3(5).unwrap();
    let a = evaluate(&model, &data, &s).unwrap();
    assert_eq!(evaluate(&model, &data, &s).unwrap(), a);
    // Random features already single out the odd panel somewhat, so chance
    // is measured against labels drawn independently of the panels.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for inst in &mut data {
        inst.label = rand::Rng::gen_range(&mut rng, 0..5);
    }
    let chance = evaluate(&model, &data, &s).unwrap();
    assert!((chance - 0.2).abs() <= 0.05, "accuracy {chance}");
    assert!(evaluate(&model, &data, &TaskStructure::o3(6).unwrap()).is_err());
    assert!(evaluate(&model, &[], &s).is_err());
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        augment: AugmentConfig::disabled(),
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn memorises_a_small_split() {
    let data = o3_data(10, 2);
    let s = TaskStructure::o3(5).unwrap();
    let task = TaskData {
        structure: s,
        train: data.clone(),
        val: data.clone(),
    };
    let mut model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 3).unwrap();
    let mut cfg = quick_config(150);
    cfg.batch_size = Some(10);
    cfg.early_stop_patience = 40;
    let mut log = MetricLog::in_memory();
    let report = train_phase(&mut model, &[task], &cfg, &mut log).unwrap();
    assert!(report.best_epoch > 0);
    assert_eq!(evaluate(&model, &data, &s).unwrap(), 1.0);
    // The restored weights are those of the best validation epoch.
    let m = evaluate_metrics(&model, &data, &s, cfg.beta, RuleGroup::Label).unwrap();
    assert!((m.loss - report.best_val_loss).abs() < 1e-5 * report.best_val_loss.max(1.0));
}

#[test]
fn nan_loss_aborts_with_coordinates() {
    let data = o3_data(6, 3);
    let s = TaskStructure::o3(5).unwrap();
    let task = TaskData {
        structure: s,
        train: data.clone(),
        val: data,
    };
    let mut model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 0).unwrap();
    let id = model.store().id("reasoner.out.bias").unwrap();
    model.store_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let mut cfg = quick_config(3);
    cfg.batch_size = Some(2);
    let err = train_phase(&mut model, &[task], &cfg, &mut MetricLog::in_memory()).unwrap_err();
    match err {
        Error::NanLoss { epoch, batch } => {
            assert_eq!((epoch, batch), (1, 1));
        }
        other => panic!("expected NanLoss, got {other}"),
    }
}

#[test]
fn per_batch_rows_are_logged_on_request() {
    let data = o3_data(10, 4);
    let task = TaskData {
        structure: TaskStructure::o3(5).unwrap(),
        train: data.clone(),
        val: data,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(3);
    cfg.batch_size = Some(5);
    cfg.early_stop_patience = 10;

    let mut model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 0).unwrap();
    let mut log = MetricLog::to_files(dir.path(), "off").unwrap();
    train_phase(&mut model, std::slice::from_ref(&task), &cfg, &mut log).unwrap();
    assert!(log.batch_rows().is_empty());
    assert!(!dir.path().join("off.batches.csv").exists());

    cfg.log_batches = true;
    let mut model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 0).unwrap();
    let mut log = MetricLog::to_files(dir.path(), "on").unwrap();
    train_phase(&mut model, &[task], &cfg, &mut log).unwrap();
    let coords: Vec<(usize, usize)> = log.batch_rows().iter().map(|r| (r.epoch, r.batch)).collect();
    assert_eq!(coords, [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)]);
    assert!(log.batch_rows().iter().all(|r| r.task == "o3" && r.loss.is_finite()));
    let text = std::fs::read_to_string(dir.path().join("on.batches.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,batch,task,loss,ce,aux,accuracy,lr");
    assert_eq!(lines.count(), 6);
}

#[test]
fn empty_splits_are_rejected() {
    let s = TaskStructure::o3(5).unwrap();
    let task = TaskData {
        structure: s,
        train: Vec::new(),
        val: o3_data(2, 1),
    };
    let mut model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 0).unwrap();
    assert!(train_phase(&mut model, &[task], &quick_config(1), &mut MetricLog::in_memory()).is_err());
    assert!(train_phase(&mut model, &[], &quick_config(1), &mut MetricLog::in_memory()).is_err());
}

#[test]
fn split_is_seeded_and_disjoint() {
    let data = o3_data(40, 5);
    let a = TaskData::split(TaskStructure::o3(5).unwrap(), data.clone(), 0.25, 9).unwrap();
    let b = TaskData::split(TaskStructure::o3(5).unwrap(), data, 0.25, 9).unwrap();
    assert_eq!((a.train.len(), a.val.len()), (30, 10));
    assert_eq!(a.val, b.val);
    for v in &a.val {
        assert!(!a.train.contains(v));
    }
}

fn small_task(kind: TaskKind, n: usize, seed: u64) -> TaskData<f32> {
    let cfg = GeneratorConfig::new(kind, n, seed);
    let s = cfg.structure().unwrap();
    TaskData::split(s, instances(generate(&cfg).unwrap()), 0.2, seed).unwrap()
}

#[test]
fn transfer_run_writes_phases_and_keeps_pretraining_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![small_task(TaskKind::Rpm, 10, 1), small_task(TaskKind::Vap, 10, 2), small_task(TaskKind::O3, 10, 3)];
    let spec = RegimeSpec::tl(vec![TaskKind::Rpm, TaskKind::Vap], TaskKind::O3);
    let mut cfg = quick_config(2);
    cfg.batch_size = Some(4);
    cfg.finetune_max_epochs = Some(1);
    let model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 0).unwrap();
    let out = run_regime(&spec, &data, &cfg, model, Some(dir.path())).unwrap();
    assert_eq!(out.phases.len(), 2);
    assert_eq!(out.phases[0].name, "pretrain");
    assert_eq!(out.phases[1].name, "finetune");
    assert_eq!((out.phases[0].report.epochs, out.phases[1].report.epochs), (2, 1));
    let pre = std::fs::read(dir.path().join("pretrain.salc")).unwrap();
    assert_eq!(pre, out.phases[0].checkpoint);
    assert_ne!(pre, out.phases[1].checkpoint);
    assert_eq!(std::fs::read(dir.path().join("model.salc")).unwrap(), out.phases[1].checkpoint);
    // Pre-training logs both tasks; fine-tuning only the target.
    let tasks: std::collections::BTreeSet<_> = out.phases[0].rows.iter().map(|r| r.task.clone()).collect();
    assert_eq!(tasks.into_iter().collect::<Vec<_>>(), vec!["rpm", "vap"]);
    assert!(out.phases[1].rows.iter().all(|r| r.task == "o3"));
    let csv = std::fs::read_to_string(dir.path().join("finetune.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,task,split,loss,ce,aux,accuracy,lr,wall_seconds"
    );
    let jsonl = std::fs::read_to_string(dir.path().join("pretrain.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), out.phases[0].rows.len());
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    // The fine-tuned model carries rule heads for every task it saw.
    let reloaded = ScarModel::<f32>::load(&dir.path().join("model.salc")).unwrap();
    assert_eq!(reloaded.rule_head_tasks().count(), 3);
}

#[test]
fn deterministic_runs_are_identical() {
    let data = vec![small_task(TaskKind::Vap, 12, 4)];
    let spec = RegimeSpec::stl(TaskKind::Vap);
    let mut cfg = quick_config(2);
    cfg.augment = AugmentConfig::default();
    cfg.batch_size = Some(4);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let model = ScarModel::<f32>::new(ScarConfig::scar_tiny(), 0).unwrap();
        run_regime(&spec, &data, &cfg, model, Some(dir.path())).unwrap();
        (
            std::fs::read(dir.path().join("train.csv")).unwrap(),
            std::fs::read(dir.path().join("model.salc")).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn rule_subset_configs_train_without_annotations_mismatch() {
    let cfg = GeneratorConfig::new(TaskKind::Rpm, 8, 1).with_rules(vec!["shape:constant".parse::<Rule>().unwrap()]);
    let data = instances(generate(&cfg).unwrap());
    assert!(data.iter().all(|i| i.rules.as_ref().unwrap().len() == 12));
}
