use plainseg::io::{batch, generate_sample, Sample, SyntheticSpec};
use plainseg::model::ModelConfig;
use plainseg::nn::{ParamEntry, ParamGroup, ParamRole, ParamStore};
use plainseg::train::{AdamW, AdamWConfig, TrainConfig};
use plainseg::{Segmenter32, Tensor64, Trainer32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples(n: usize) -> Vec<Sample> {
    let spec = SyntheticSpec { num_classes: 4, seed: 11, ..Default::default() };
    (0..n).map(|i| generate_sample(&spec, i).unwrap()).collect()
}

fn trainer(cfg: ModelConfig, iters: usize, warmup: usize) -> Trainer32 {
    let tc = TrainConfig { iters, warmup_iters: warmup, batch_size: 1, ..TrainConfig::tiny() };
    Trainer32::new(Segmenter32::new(&cfg, 0).unwrap(), tc).unwrap()
}

#[test]
fn overfits_a_single_image() {
    let data = samples(1);
    let (x, y) = batch::<f32>(&[&data[0]]).unwrap();
    let mut t = trainer(ModelConfig::plainseg_tiny(4), 50, 5);
    let losses: Vec<f64> = (0..50).map(|_| t.step(&x, &y).unwrap().loss).collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.2 * first, "loss {first:.3} -> {last:.3}");
}

#[test]
fn dense_baseline_overfits_too() {
    let data = samples(1);
    let (x, y) = batch::<f32>(&[&data[0]]).unwrap();
    let cfg = ModelConfig { variant: plainseg::model::Variant::Linear, ..ModelConfig::plainseg_tiny(4) };
    let mut t = trainer(cfg, 50, 5);
    let losses: Vec<f64> = (0..50).map(|_| t.step(&x, &y).unwrap().loss).collect();
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn same_seed_same_trace() {
    let data = samples(2);
    let refs: Vec<&Sample> = data.iter().collect();
    let (x, y) = batch::<f32>(&refs).unwrap();
    let run = || {
        let mut t = trainer(ModelConfig::hier_tiny(4), 10, 2);
        (0..4).map(|_| t.step(&x, &y).unwrap().loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn first_warmup_step_moves_nothing() {
    let data = samples(1);
    let (x, y) = batch::<f32>(&[&data[0]]).unwrap();
    let mut t = trainer(ModelConfig::plainseg_tiny(4), 10, 5);
    let before = t.model.store.clone();
    let r = t.step(&x, &y).unwrap();
    assert!(r.lrs.iter().all(|&(_, lr)| lr == 0.0));
    for ((_, a), (_, b)) in before.iter().zip(t.model.store.iter()) {
        if a.role != ParamRole::Buffer {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }
    // the second step has a positive rate and does move weights
    t.step(&x, &y).unwrap();
    assert!(before.iter().zip(t.model.store.iter()).any(|((_, a), (_, b))| a.value.data() != b.value.data()));
}

fn store(values: &[f64], role: ParamRole) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert(ParamEntry {
        name: "p".into(),
        value: Tensor64::from_f64([values.len()], values).unwrap(),
        group: ParamGroup::Head,
        role,
    });
    s
}

#[test]
fn adamw_first_step_closed_form() {
    let (lr, wd) = (0.01, 0.1);
    let p0 = [1.0, -2.0, 0.5];
    let g = [0.3, -0.7, 1e-9];
    let mut s = store(&p0, ParamRole::Weight);
    let id = s.id_of("p").unwrap();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..AdamWConfig::default() });
    opt.step(&mut s, &[(id, Tensor64::from_f64([3], &g).unwrap())], |_| lr).unwrap();
    // after one step the bias-corrected moments are g and g^2
    for i in 0..3 {
        let want = p0[i] * (1.0 - lr * wd) - lr * g[i] / (g[i].abs() + 1e-8);
        assert!((s.get(id).value.data()[i] - want).abs() < 1e-12, "{i}");
    }
}

#[test]
fn no_decay_params_skip_weight_decay() {
    let mut s = store(&[2.0], ParamRole::NoDecay);
    let id = s.id_of("p").unwrap();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() });
    opt.step(&mut s, &[(id, Tensor64::from_f64([1], &[0.0]).unwrap())], |_| 0.1).unwrap();
    assert_eq!(s.get(id).value.data(), &[2.0]);
}

#[test]
fn zero_decay_matches_plain_adam() {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
    let mut p: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut s = store(&p, ParamRole::Weight);
    let id = s.id_of("p").unwrap();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=20 {
        let g: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        opt.step(&mut s, &[(id, Tensor64::from_f64([6], &g).unwrap())], |_| lr).unwrap();
        for i in 0..6 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - f64::powi(b1, t));
            let vh = v[i] / (1.0 - f64::powi(b2, t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    let got = s.get(id).value.data();
    for i in 0..6 {
        assert!((got[i] - p[i]).abs() < 1e-12, "{i}: {} vs {}", got[i], p[i]);
    }
}
