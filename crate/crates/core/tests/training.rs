use proptest::prelude::*;
use qam_core::answer::AnswerVocabulary;
use qam_core::checkpoint::write_checkpoint;
use qam_core::encoder::Vocabulary;
use qam_core::model::{FeatureNorm, Model, ModelConfig};
use qam_core::shapeworld::{generate_dataset, shapeworld_taxonomy, Category, GeneratorConfig};
use qam_core::train::{
    batch_gradient, evaluate, init_params, items_from_examples, layer_stds, samples, train, Item, OptimizerState,
    TrainConfig, TrainData, INIT_STD_RANGE,
};
use qam_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        reduced_channels: 6,
        embed_dim: 8,
        question_dim: 12,
        fusion_dim: 16,
        ..ModelConfig::default()
    }
}

struct Fixture {
    qv: Vocabulary,
    av: AnswerVocabulary,
    train: Vec<Item>,
    test: Vec<Item>,
}

fn fixture(n_train: usize, n_test: usize, seed: u64) -> Fixture {
    let ds = generate_dataset(&GeneratorConfig {
        seed,
        train: n_train,
        test: n_test,
        ..GeneratorConfig::default()
    })
    .unwrap();
    Fixture {
        qv: ds.question_vocab().unwrap(),
        av: ds.answer_vocab().unwrap(),
        train: items_from_examples(&ds.train, 3).unwrap(),
        test: items_from_examples(&ds.test, 3).unwrap(),
    }
}

impl Fixture {
    fn data(&self) -> TrainData<'_> {
        TrainData {
            question_vocab: self.qv.clone(),
            answer_vocab: self.av.clone(),
            train: &self.train,
            test: &self.test,
        }
    }

    fn model(&self, config: ModelConfig, seed: u64) -> Model {
        let norm = FeatureNorm::fit(self.train.iter().map(|it| &it.features), config.channels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(config, self.qv.clone(), self.av.clone(), norm, &mut rng).unwrap()
    }
}

fn initialized(f: &Fixture, attention: bool, seed: u64) -> (Model, Vec<qam_core::model::Sample>) {
    let mut model = f.model(ModelConfig { attention, ..small_model() }, seed);
    let calib = samples(&model, &f.train[..f.train.len().min(32)]).unwrap();
    init_params(&mut model, &calib, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, calib)
}

#[test]
fn init_puts_every_layer_in_range_with_zero_biases() {
    let f = fixture(60, 0, 1);
    for attention in [true, false] {
        let (model, calib) = initialized(&f, attention, 4);
        let stds = layer_stds(&model, &calib).unwrap();
        let labels: Vec<&str> = stds.iter().map(|(l, _)| *l).collect();
        assert_eq!(labels.contains(&"attention"), attention);
        assert_eq!(labels.contains(&"kernel"), attention);
        for (label, std) in stds {
            assert!(
                (INIT_STD_RANGE.0..=INIT_STD_RANGE.1).contains(&std),
                "attention={attention}: {label} std {std}"
            );
        }
        for (name, t) in model.named_params() {
            if name.rsplit('.').next().unwrap().starts_with("b_") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name} is not zero");
            }
        }
    }
}

#[test]
fn init_is_deterministic() {
    let f = fixture(40, 0, 2);
    let (a, _) = initialized(&f, true, 9);
    let (b, _) = initialized(&f, true, 9);
    let (c, _) = initialized(&f, true, 10);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_rejects_empty_calibration() {
    let f = fixture(10, 0, 2);
    let mut model = f.model(small_model(), 0);
    assert!(init_params(&mut model, &[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn memorizes_a_single_item() {
    let f = fixture(1, 0, 3);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 200,
        model: small_model(),
        ..TrainConfig::default()
    };
    let t = train(&cfg, f.data(), 1, |_, _| Ok(())).unwrap();
    let last = t.history.last().unwrap();
    assert_eq!(t.history.len(), 201);
    assert_eq!(last.train_acc, 1.0);
    assert_eq!(last.val_acc, None);
    let r = evaluate(&t.model, &f.train, &shapeworld_taxonomy(), 1).unwrap();
    assert_eq!((r.acc, r.wups09, r.wups00), (1.0, 1.0, 1.0));
}

#[test]
fn first_epoch_lowers_the_loss_on_the_default_dataset() {
    let f = fixture(2000, 0, 0);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let t = train(&cfg, f.data(), 1, |_, _| Ok(())).unwrap();
    assert!(t.history[1].loss < t.history[0].loss, "{:?}", t.history);
}

#[test]
fn identical_batches_give_identical_gradients() {
    let f = fixture(30, 0, 5);
    let (mut model, calib) = initialized(&f, true, 1);
    let batch = [0, 3, 3, 7];
    let grads = |m: &Model| -> Vec<Vec<f64>> {
        m.named_params()
            .into_iter()
            .map(|(_, t)| t.grad().unwrap().to_vec())
            .collect()
    };
    let l1 = batch_gradient(&mut model, &calib, &batch).unwrap();
    let g1 = grads(&model);
    let l2 = batch_gradient(&mut model, &calib, &batch).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, grads(&model));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let f = fixture(40, 10, 6);
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 2,
        seed: 3,
        model: small_model(),
        ..TrainConfig::default()
    };
    let run = || {
        let mut per_epoch = Vec::new();
        let t = train(&cfg, f.data(), 1, |_, m| {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, m, Some(&cfg))?;
            per_epoch.push(buf);
            Ok(())
        })
        .unwrap();
        (per_epoch, t.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(a[0], a[2]);
}

#[test]
fn evaluation_ignores_jobs_and_order() {
    let f = fixture(10, 37, 7);
    let (model, _) = initialized(&f, true, 2);
    let tax = shapeworld_taxonomy();
    let base = evaluate(&model, &f.test, &tax, 1).unwrap();
    for jobs in [2, 3, 8] {
        assert_eq!(evaluate(&model, &f.test, &tax, jobs).unwrap(), base);
    }
    let mut rev = f.test.clone();
    rev.reverse();
    let r = evaluate(&model, &rev, &tax, 4).unwrap();
    assert!((r.acc - base.acc).abs() < 1e-12);
    assert!((r.wups09 - base.wups09).abs() < 1e-12);
    assert!((r.wups00 - base.wups00).abs() < 1e-12);
    for (k, v) in &base.per_category {
        assert!((r.per_category[k] - v).abs() < 1e-12);
    }
}

#[test]
fn uniform_output_scores_chance_on_balanced_answers() {
    let answers = ["red", "green", "blue", "yellow"];
    let qv = Vocabulary::build(["what color is the object"]).unwrap();
    let av = AnswerVocabulary::build(answers).unwrap();
    let config = ModelConfig {
        channels: 4,
        reduced_channels: 2,
        embed_dim: 4,
        question_dim: 4,
        fusion_dim: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, qv, av, FeatureNorm::identity(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (name, t) in model.named_params_mut() {
        if name.starts_with("answer.w_ha") || name.starts_with("answer.b_a") {
            t.values_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items: Vec<Item> = (0..40)
        .map(|i| Item {
            question: "what color is the object".into(),
            answer: answers[i % 4].into(),
            category: Category::Color,
            gt_cells: Vec::new(),
            features: Tensor::uniform(&[4, 3, 3], 1.0, &mut rng),
        })
        .collect();
    let r = evaluate(&model, &items, &shapeworld_taxonomy(), 1).unwrap();
    assert_eq!(r.acc, 0.25);
}

proptest! {
    #[test]
    fn one_step_decreases_half_square(x in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        let mut st = OptimizerState::new([&[1usize][..]], 0.95, 1e-6, 0.1);
        let mut v = [x];
        st.update(0, &mut v, &[x]).unwrap();
        prop_assert!(0.5 * v[0] * v[0] < 0.5 * x * x);
    }

    #[test]
    fn running_averages_stay_nonnegative(gs in proptest::collection::vec(-10f64..10.0, 1..20)) {
        let mut st = OptimizerState::new([&[1usize][..]], 0.95, 1e-6, 0.1);
        let mut v = [0.5];
        for g in gs {
            st.update(0, &mut v, &[g]).unwrap();
            prop_assert!(st.mean_sq_grad(0)[0] >= 0.0 && st.mean_sq_delta(0)[0] >= 0.0);
        }
    }
}
