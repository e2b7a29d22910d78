use lowshot::checkpoint::Checkpoint;
use lowshot::decoder::{init_params, Descriptor};
use lowshot::engine::{GradSet, ParamSet, Tensor};
use lowshot::optim::{Adam, AdamConfig, Optimizer, RmsProp, RmsPropConfig};

fn scalar(p: f64) -> ParamSet<f64> {
    let mut s = ParamSet::new();
    s.push("p", Tensor::from_f64([1], &[p]).unwrap(), true).unwrap();
    s
}

fn grad_of(g: f64) -> GradSet<f64> {
    GradSet {
        grads: vec![Some(Tensor::from_f64([1], &[g]).unwrap())],
    }
}

fn value(p: &ParamSet<f64>) -> f64 {
    p.leaves()[0].tensor.data()[0]
}

/// Textbook Adam on a scalar.
fn adam_oracle(p0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = vec![p];
    for t in 1..=steps {
        let g = grad(p);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}

#[test]
fn adam_first_step_closed_form() {
    for &g in &[0.5, -3.0, 1e-3] {
        let mut p = scalar(2.0);
        let lr = 1e-3;
        Adam::new(AdamConfig::with_lr(lr)).step(&mut p, &grad_of(g)).unwrap();
        let step = (2.0 - value(&p)).abs();
        let exact = lr * g.abs() / (g.abs() + 1e-8);
        assert!((step - exact).abs() <= 1e-15, "g={g}: {step} vs {exact}");
        // The ε·√(1−β2) variant of the first step differs only at O(ε/|g|).
        let variant = lr * g.abs() / (g.abs() + 1e-8 * (1.0f64 - 0.999).sqrt());
        assert!((step - variant).abs() <= lr * 1e-5);
        assert!((step - lr).abs() <= lr * 1e-5);
    }
}

#[test]
fn adam_quadratic_trajectory_matches_oracle() {
    let oracle = adam_oracle(1.0, 0.1, 100, |p| p);
    let mut p = scalar(1.0);
    let mut opt = Adam::new(AdamConfig::with_lr(0.1));
    for t in 1..=100 {
        let g = value(&p);
        opt.step(&mut p, &grad_of(g)).unwrap();
        assert!((value(&p) - oracle[t]).abs() <= 1e-12, "step {t}");
    }
    assert!(value(&p).abs() < 0.05, "final {}", value(&p));
    assert_eq!(opt.steps(), 100);
}

#[test]
fn rmsprop_without_momentum_is_plain_rmsprop() {
    let cfg = RmsPropConfig {
        lr: 1e-2,
        momentum: 0.0,
        ..Default::default()
    };
    let mut p = scalar(1.0);
    let mut opt = RmsProp::new(cfg);
    let (mut q, mut s) = (1.0f64, 0.0f64);
    for _ in 0..50 {
        let g = value(&p);
        opt.step(&mut p, &grad_of(g)).unwrap();
        s = cfg.rho * s + (1.0 - cfg.rho) * q * q;
        q -= cfg.lr * q / (s.sqrt() + cfg.eps);
        assert!((value(&p) - q).abs() <= 1e-12);
    }
}

#[test]
fn rmsprop_with_momentum_shrinks_quadratic() {
    let cfg = RmsPropConfig::default();
    assert_eq!((cfg.lr, cfg.rho, cfg.momentum, cfg.eps), (1e-3, 0.99, 0.9, 1e-8));
    let mut p = scalar(1.0);
    let mut opt = RmsProp::new(cfg);
    let (mut q, mut s, mut b) = (1.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let g = value(&p);
        opt.step(&mut p, &grad_of(g)).unwrap();
        s = 0.99 * s + 0.01 * q * q;
        b = 0.9 * b + q / (s.sqrt() + 1e-8);
        q -= 1e-3 * b;
    }
    assert!((value(&p) - q).abs() <= 1e-12);
    assert!(value(&p).abs() < 1.0);
}

#[test]
fn optimizer_state_survives_checkpoint_round_trip() {
    let d = Descriptor::desk();
    let dec = init_params::<f32>(1, d).unwrap();
    let mut params = dec.params.clone();
    let grads = GradSet {
        grads: params
            .leaves()
            .iter()
            .map(|l| Some(l.tensor.map(|v| 0.5 * v + 0.01)))
            .collect(),
    };
    let mut adam = Adam::<f32>::new(AdamConfig::default());
    for _ in 0..3 {
        adam.step(&mut params, &grads).unwrap();
    }
    let mut ck = Checkpoint::new(dec.clone(), Vec::new());
    ck.optimizer = adam.state_records(&params);
    let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.optimizer, ck.optimizer);

    let mut resumed = Adam::<f32>::new(AdamConfig::default());
    resumed.restore(&params, &back.optimizer).unwrap();
    let mut a = params.clone();
    let mut b = params.clone();
    adam.step(&mut a, &grads).unwrap();
    resumed.step(&mut b, &grads).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.leaves().iter().zip(params.leaves()) {
        assert_eq!(x.tensor.shape(), y.tensor.shape());
    }
}
