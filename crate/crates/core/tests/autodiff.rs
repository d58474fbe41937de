//! Central-difference checks for every differentiable op and both probing
//! losses, plus stop-gradient and graph bookkeeping.

mod common;

use std::sync::Arc;

use probekit::tensor::{Graph, ParamStore, Tensor};

use common::fd::{self, FdCase, TOL};

fn check_all(cases: Vec<FdCase>) {
    for case in cases {
        let worst = case.worst_error();
        assert!(worst < TOL, "{}: max rel err {worst:e}", case.label);
    }
}

#[test]
fn matmul_transpose_linear_and_conv() {
    check_all(fd::linear_algebra());
}

#[test]
fn elementwise_ops_with_broadcast() {
    check_all(fd::elementwise());
}

#[test]
fn reductions_and_losses() {
    check_all(fd::reductions_and_losses());
}

#[test]
fn shape_ops() {
    check_all(fd::shape_ops());
}

#[test]
fn probe_and_perceptual_losses() {
    check_all(fd::probing_losses());
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

#[test]
fn stop_grad_blocks_gradient_but_keeps_value() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(
            "x",
            Arc::new(Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap()),
            true,
        )
        .unwrap();
    let d = g.stop_grad(x);
    assert_eq!(g.value(d).data(), g.value(x).data());
    assert!(!g.requires_grad(d));
    // y = x * sg(x): dy/dx = sg(x), not 2x.
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn frozen_params_and_no_grad_graphs() {
    let mut p = store(vec![
        ("w", Tensor::full(&[2], 2.0)),
        ("v", Tensor::full(&[2], 3.0)),
    ]);
    p.freeze("v");
    let mut g = Graph::<f64>::new();
    let (w, v) = (g.param(&p, "w").unwrap(), g.param(&p, "v").unwrap());
    let m = g.mul(w, v).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["w"]);
    assert_eq!(grads.get("w").unwrap().data(), &[3.0, 3.0]);

    let mut ng = Graph::<f64>::no_grad();
    let w = ng.param(&p, "w").unwrap();
    assert!(!ng.requires_grad(w));
    ng.note_activation();
    assert_eq!(ng.activations(), 0);
}

#[test]
fn memo_builds_once() {
    let mut g = Graph::<f64>::new();
    let a = g.memo("k", |g| g.constant(Tensor::scalar(1.0))).unwrap();
    let n = g.len();
    let b = g.memo("k", |g| g.constant(Tensor::scalar(2.0))).unwrap();
    assert_eq!(g.len(), n);
    assert_eq!(g.value(a).item(), g.value(b).item());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let err = g
        .constant(Tensor::from_f64(&[1], &[f64::NAN]).unwrap())
        .unwrap_err();
    assert!(matches!(err, probekit::Error::Numeric(_)));
    let x = g
        .constant(Tensor::from_f64(&[1], &[1e300]).unwrap())
        .unwrap();
    assert!(matches!(
        g.mul(x, x).unwrap_err(),
        probekit::Error::Numeric(_)
    ));
}

#[test]
fn shape_mismatches_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(g.matmul(a, b).is_err());
    let c = g.constant(Tensor::zeros(&[4])).unwrap();
    assert!(g.add(a, c).is_err());
    assert!(g.backward(a).is_err());
}
