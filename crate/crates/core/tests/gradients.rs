//! Analytic gradients of every training loss against central finite
//! differences, in double precision.

use tmd_core::nets::{backward_with, ArchConfig, BackwardOptions, LossInputs, LossTag, Network};
use tmd_core::rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

struct Fixture {
    net: Network<f64>,
    real: Vec<f64>,
    z: Vec<f64>,
    codes: Vec<usize>,
    prior: Vec<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut arch = ArchConfig::mlp(8, 3, 4);
    arch.mlp_widths = Some(vec![12, 10]);
    let mut net: Network<f64> = Network::init(&arch, seed).unwrap();
    // larger weights than the default init so every term carries signal
    let mut r = rng::seeded(seed + 100);
    for seq in [&mut net.generator, &mut net.trunk, &mut net.d_head] {
        for p in seq.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.4 * rng::standard_normal(&mut r));
        }
    }
    for p in net.q_head.as_mut().unwrap().params_mut() {
        p.iter_mut().for_each(|v| *v = 0.4 * rng::standard_normal(&mut r));
    }
    let batch = 4;
    Fixture {
        net,
        real: (0..batch * 8).map(|_| 0.8 * (2.0 * rng::uniform(&mut r) - 1.0)).collect(),
        z: (0..batch * 4).map(|_| rng::standard_normal(&mut r)).collect(),
        codes: (0..batch).map(|i| i % 3).collect(),
        prior: vec![0.4, -0.3, 0.1],
    }
}

fn loss(f: &Fixture, net: &Network<f64>, tag: LossTag, prior: &[f64]) -> f64 {
    let inputs = LossInputs {
        real: &f.real,
        z: &f.z,
        codes: Some(&f.codes),
        prior_logits: prior,
    };
    backward_with(net, tag, inputs, BackwardOptions::default()).unwrap().loss
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

type Group = fn(&mut Network<f64>) -> Vec<&mut Vec<f64>>;

fn check(tag: LossTag, seed: u64) {
    let f = fixture(seed);
    let inputs = LossInputs {
        real: &f.real,
        z: &f.z,
        codes: Some(&f.codes),
        prior_logits: &f.prior,
    };
    let ev = backward_with(&f.net, tag, inputs, BackwardOptions::default()).unwrap();
    let groups: [(&str, Group, &Vec<Vec<f64>>); 4] = [
        ("generator", |n| n.generator.params_mut(), &ev.gradients.generator),
        ("trunk", |n| n.trunk.params_mut(), &ev.gradients.trunk),
        ("d_head", |n| n.d_head.params_mut(), &ev.gradients.d_head),
        ("q_head", |n| n.q_head.as_mut().unwrap().params_mut(), &ev.gradients.q_head),
    ];
    for (name, get, analytic) in groups {
        let count = get(&mut f.net.clone()).len();
        assert_eq!(count, analytic.len(), "{name}");
        for t in 0..count {
            let len = analytic[t].len();
            let mut numeric = vec![0.0; len];
            for j in 0..len {
                let mut plus = f.net.clone();
                get(&mut plus)[t][j] += H;
                let mut minus = f.net.clone();
                get(&mut minus)[t][j] -= H;
                numeric[j] = (loss(&f, &plus, tag, &f.prior) - loss(&f, &minus, tag, &f.prior)) / (2.0 * H);
            }
            let e = rel_err(&analytic[t], &numeric);
            assert!(e < TOL, "{tag:?} {name}[{t}]: relative error {e:e}");
        }
    }
    if tag == LossTag::Prior {
        let numeric: Vec<f64> = (0..f.prior.len())
            .map(|j| {
                let mut p = f.prior.clone();
                let mut m = f.prior.clone();
                p[j] += H;
                m[j] -= H;
                (loss(&f, &f.net, tag, &p) - loss(&f, &f.net, tag, &m)) / (2.0 * H)
            })
            .collect();
        let e = rel_err(&ev.gradients.prior, &numeric);
        assert!(e < TOL, "prior logits: relative error {e:e}");
    }
}

#[test]
fn discriminator_loss_gradients() {
    check(LossTag::Discriminator, 1);
}

#[test]
fn generator_loss_gradients() {
    check(LossTag::Generator { lambda: 1.0 }, 2);
    check(LossTag::Generator { lambda: 0.7 }, 3);
}

#[test]
fn info_gradients() {
    check(LossTag::Info, 4);
}

#[test]
fn prior_loss_gradients() {
    check(LossTag::Prior, 5);
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let f = fixture(6);
    let inputs = LossInputs {
        real: &f.real,
        z: &f.z,
        codes: Some(&f.codes),
        prior_logits: &f.prior,
    };
    let ev = backward_with(&f.net, LossTag::Discriminator, inputs, BackwardOptions::default()).unwrap();
    assert!(ev.gradients.q_head.iter().flatten().all(|&g| g == 0.0));
    let ev = backward_with(&f.net, LossTag::Info, inputs, BackwardOptions::default()).unwrap();
    assert!(ev.gradients.d_head.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn scaling_the_loss_scales_gradients() {
    let f = fixture(7);
    let inputs = LossInputs {
        real: &f.real,
        z: &f.z,
        codes: Some(&f.codes),
        prior_logits: &f.prior,
    };
    for tag in [LossTag::Discriminator, LossTag::Generator { lambda: 1.0 }, LossTag::Prior] {
        let one = backward_with(&f.net, tag, inputs, BackwardOptions::default()).unwrap();
        let two = backward_with(&f.net, tag, inputs, BackwardOptions { scale: 2.0, ..Default::default() }).unwrap();
        let mut doubled = one.gradients.clone();
        doubled.scale(2.0);
        for ((_, a), (_, b)) in doubled.groups().iter().zip(two.gradients.groups().iter()) {
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        assert!((2.0 * one.loss - two.loss).abs() < 1e-12);
    }
}
