use ia2u_core::classifier::Classifier;
use ia2u_core::graph::Graph;
use ia2u_core::optim::AdamW;
use ia2u_core::schedule::lr_at;
use ia2u_core::tasks::{TaskKind, TaskModel, TaskTarget};
use ia2u_core::tensor::Tensor;
use ia2u_core::train::{make_batch, train_classifier};
use ia2u_core::watersim::{degrade, generate_in_memory, sample_params, SceneSample, NUM_WATER_TYPES};
use ia2u_core::{ImageTensor, RunConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> RunConfig {
    RunConfig {
        channels: 8,
        fen_blocks: 2,
        ..RunConfig::default()
    }
}

fn colour_stats(s: &SceneSample) -> [f64; 6] {
    let t = s.degraded.tensor();
    let plane = t.shape()[2] * t.shape()[3];
    let mut out = [0.0; 6];
    for c in 0..3 {
        let v = &t.data()[c * plane..(c + 1) * plane];
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        out[c] = mean;
        out[3 + c] = var.sqrt();
    }
    out
}

#[test]
fn water_types_are_separable_by_colour_statistics() {
    let [train, _, test] = generate_in_memory(180, 9, 90, 32, false, 0).unwrap();
    let mut sums = vec![[0.0; 6]; NUM_WATER_TYPES];
    let mut counts = vec![0.0; NUM_WATER_TYPES];
    for s in &train {
        for (a, b) in sums[s.water_type].iter_mut().zip(colour_stats(s)) {
            *a += b;
        }
        counts[s.water_type] += 1.0;
    }
    let centroids: Vec<[f64; 6]> = sums.iter().zip(&counts).map(|(s, n)| s.map(|v| v / n)).collect();
    let hits = test
        .iter()
        .filter(|s| {
            let f = colour_stats(s);
            let nearest = (0..NUM_WATER_TYPES)
                .min_by(|&a, &b| {
                    let d = |k: usize| centroids[k].iter().zip(&f).map(|(c, x)| (c - x).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            nearest == s.water_type
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    assert!(acc > 0.8, "nearest-centroid accuracy {acc}");
}

#[test]
fn corpus_is_balanced_over_water_types() {
    let [train, val, test] = generate_in_memory(90, 18, 9, 16, true, 5).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (90, 18, 9));
    for t in 0..NUM_WATER_TYPES {
        assert_eq!(train.iter().filter(|s| s.water_type == t).count(), 10);
    }
    assert!(train.iter().any(|s| !s.boxes.is_empty()));
}

#[test]
fn same_seed_gives_identical_initialisation() {
    let build = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Classifier::<f32>::new(&mut rng);
        TaskModel::new(TaskKind::Uie, &small(), Some(c), &mut rng).unwrap()
    };
    let (a, b, c) = (build(3), build(3), build(4));
    assert_eq!(a.store, b.store);
    assert_eq!(a.classifier().unwrap().store(), b.classifier().unwrap().store());
    assert_ne!(a.store, c.store);
}

#[test]
fn trained_classifier_is_frozen_and_receives_no_gradient() {
    let [train, val, _] = generate_in_memory(18, 9, 9, 32, false, 1).unwrap();
    let cfg = RunConfig {
        epochs: 1,
        ..RunConfig::classifier()
    };
    let (cls, history) = train_classifier(&train, &val, &cfg, &mut |_| {}).unwrap();
    assert_eq!(history.len(), 1);
    assert!(cls.is_frozen());
    let frozen = cls.store().clone();

    let mut model = TaskModel::new(TaskKind::Uie, &small(), Some(cls), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let refs: Vec<&SceneSample> = train.iter().take(2).collect();
    let b = make_batch(&refs, None).unwrap();
    let mut g = Graph::new();
    let x = g.constant(b.inputs);
    let out = model.forward(&mut g, x).unwrap();
    let loss = model.loss(&mut g, out, TaskTarget::Image(&b.clean)).unwrap();
    let grads = g.backward(loss).unwrap();
    let pg = g.param_grads(&grads);
    assert!(pg.keys().all(|id| model.store.name(*id).starts_with("fen.") || model.store.name(*id).starts_with("uie.")));
    AdamW::new(0.9, 0.95, 0.05).step(&mut model.store, &pg, 1e-3);
    assert_eq!(model.classifier().unwrap().store(), &frozen);
}

#[test]
fn every_plugin_parameter_gets_gradient_after_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = Classifier::<f32>::new(&mut rng);
    let mut model = TaskModel::new(TaskKind::Uie, &small(), Some(c), &mut rng).unwrap();
    let [train, _, _] = generate_in_memory(4, 1, 1, 32, false, 2).unwrap();
    let refs: Vec<&SceneSample> = train.iter().collect();
    let b = make_batch(&refs, None).unwrap();
    let mut opt = AdamW::new(0.9, 0.95, 0.0);
    let mut last = None;
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.constant(b.inputs.clone());
        let out = model.forward(&mut g, x).unwrap();
        let loss = model.loss(&mut g, out, TaskTarget::Image(&b.clean)).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        opt.step(&mut model.store, &pg, 1e-3);
        last = Some(pg);
    }
    let pg = last.unwrap();
    let mut unreached = Vec::new();
    for id in model.store.ids() {
        let name = model.store.name(id);
        if !name.starts_with("fen.") {
            continue;
        }
        match pg.get(&id) {
            Some(g) if g.data().iter().any(|v| *v != 0.0) => {}
            _ => unreached.push(name.to_string()),
        }
    }
    assert!(unreached.is_empty(), "no gradient: {unreached:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn degraded_pixels_stay_in_unit_range(seed in any::<u64>(), water_type in 0..NUM_WATER_TYPES, v in 0.0f32..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_params(water_type, &mut rng).unwrap();
        let img = ImageTensor::new(Tensor::full(&[1, 3, 16, 16], v)).unwrap();
        let out = degrade(&img, &p).unwrap();
        prop_assert!(out.tensor().data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn schedule_stays_between_endpoints(total in 1usize..500, warm in 0usize..500, step in 0usize..500, lo in 0.0f64..1e-3, span in 0.0f64..1e-2) {
        let warm = warm.min(total);
        let step = step.min(total);
        let lr = lr_at(step, warm, total, lo, lo + span).unwrap();
        prop_assert!(lr >= lo - 1e-15 && lr <= lo + span + 1e-15);
    }
}
