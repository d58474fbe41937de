//! The central-difference battery: one case per differentiable op
//! (and op variant) plus both probing losses.

use probekit::detector::DetectorNet;
use probekit::probe::{perceptual_loss, probe_loss, PerceptualExtractor};
use probekit::rng::{self, Rng};
use probekit::tensor::{finite_diff_check, Graph, ParamStore, Tensor, Var};
use probekit::Result;

use super::SIZE;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Rng) -> ParamStore<f64>>;
type Loss = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var>>;

pub struct FdCase {
    pub label: String,
    build: Build,
    loss: Loss,
}

impl FdCase {
    fn new(
        label: impl Into<String>,
        build: impl Fn(&mut Rng) -> ParamStore<f64> + 'static,
        loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            build: Box::new(build),
            loss: Box::new(loss),
        }
    }

    /// Worst relative error over all instances.
    pub fn worst_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..INSTANCES {
            let seed = rng::derive_index(rng::derive(0xfd, &self.label), i);
            let params = (self.build)(&mut rng::rng(seed));
            let err = finite_diff_check(|g, p| (self.loss)(g, p, seed), &params, EPS).unwrap();
            worst = worst.max(err);
        }
        worst
    }
}

/// Normal entries pushed away from zero so ReLU kinks are not straddled.
fn away_from_zero(dims: &[usize], r: &mut Rng) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(dims, 1.0, r);
    t.map(|v| {
        if v.abs() < 0.05 {
            v + 0.1f64.copysign(v)
        } else {
            v
        }
    })
}

/// `sum(out ⊙ R)` for a fixed random `R`, turning any output into a scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let dims = g.value(out).dims().to_vec();
    let w = Tensor::randn(&dims, 1.0, &mut rng::rng(seed));
    let wv = g.constant(w)?;
    let p = g.mul(out, wv)?;
    g.sum(p)
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

fn two(r: &mut Rng, a: &[usize], b: &[usize]) -> ParamStore<f64> {
    store(vec![
        ("a", Tensor::randn(a, 1.0, r)),
        ("b", Tensor::randn(b, 1.0, r)),
    ])
}

pub fn linear_algebra() -> Vec<FdCase> {
    let linear_build = |r: &mut Rng| {
        store(vec![
            ("x", Tensor::randn(&[4, 3], 1.0, r)),
            ("w", Tensor::randn(&[2, 3], 1.0, r)),
            ("b", Tensor::randn(&[2], 1.0, r)),
        ])
    };
    let mut out = vec![
        FdCase::new(
            "matmul",
            |r| two(r, &[3, 4], &[4, 2]),
            |g, p, s| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let m = g.matmul(a, b)?;
                project(g, m, s)
            },
        ),
        FdCase::new(
            "transpose",
            |r| store(vec![("a", Tensor::randn(&[3, 5], 1.0, r))]),
            |g, p, s| {
                let a = g.param(p, "a")?;
                let t = g.transpose(a)?;
                project(g, t, s)
            },
        ),
        FdCase::new("linear-bias", linear_build, |g, p, s| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.linear(x, w, Some(b))?;
            project(g, y, s)
        }),
        FdCase::new("linear", linear_build, |g, p, s| {
            let (x, w) = (g.param(p, "x")?, g.param(p, "w")?);
            let y = g.linear(x, w, None)?;
            project(g, y, s)
        }),
    ];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        out.push(FdCase::new(
            format!("conv-{stride}-{pad}"),
            |r| {
                store(vec![
                    ("x", Tensor::randn(&[2, 2, 5, 5], 1.0, r)),
                    ("w", Tensor::randn(&[3, 2, 3, 3], 0.5, r)),
                    ("b", Tensor::randn(&[3], 1.0, r)),
                ])
            },
            move |g, p, s| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.conv2d(x, w, Some(b), stride, pad)?;
                project(g, y, s)
            },
        ));
    }
    out
}

pub fn elementwise() -> Vec<FdCase> {
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    type Un = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let mut out = Vec::new();
    let bins: [(&str, Bin); 3] = [
        ("add", Graph::add),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ];
    for (name, op) in bins {
        out.push(FdCase::new(
            name,
            |r| two(r, &[3, 4], &[4]),
            move |g, p, s| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let y = op(g, a, b)?;
                project(g, y, s)
            },
        ));
    }
    let uns: [(&str, Un); 4] = [
        ("sigmoid", Graph::sigmoid),
        ("softplus", Graph::softplus),
        ("relu", Graph::relu),
        ("silu", Graph::silu),
    ];
    for (name, op) in uns {
        out.push(FdCase::new(
            name,
            |r| store(vec![("a", away_from_zero(&[3, 4], r).map(|v| 3.0 * v))]),
            move |g, p, s| {
                let a = g.param(p, "a")?;
                let y = op(g, a)?;
                project(g, y, s)
            },
        ));
    }
    out.push(FdCase::new(
        "scale",
        |r| store(vec![("a", Tensor::randn(&[6], 1.0, r))]),
        |g, p, s| {
            let a = g.param(p, "a")?;
            let y = g.scale(a, -1.7)?;
            project(g, y, s)
        },
    ));
    out
}

pub fn reductions_and_losses() -> Vec<FdCase> {
    let build = |r: &mut Rng| two(r, &[3, 4], &[3, 4]);
    vec![
        FdCase::new("sum", build, |g, p, _| {
            let a = g.param(p, "a")?;
            let sq = g.mul(a, a)?;
            g.sum(sq)
        }),
        FdCase::new("mean", build, |g, p, _| {
            let a = g.param(p, "a")?;
            let sq = g.mul(a, a)?;
            g.mean(sq)
        }),
        FdCase::new("mse", build, |g, p, _| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            g.mse(a, b)
        }),
        FdCase::new(
            "bce",
            |r| store(vec![("z", Tensor::randn(&[6], 2.0, r))]),
            |g, p, s| {
                let z = g.param(p, "z")?;
                let mut r = rng::rng(s);
                let y: Vec<f64> = (0..6).map(|_| rand::Rng::random::<f64>(&mut r)).collect();
                g.bce_with_logits(z, &y)
            },
        ),
    ]
}

pub fn shape_ops() -> Vec<FdCase> {
    vec![
        FdCase::new(
            "concat",
            |r| two(r, &[2, 3], &[1, 3]),
            |g, p, s| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let c = g.concat(&[a, b, a])?;
                project(g, c, s)
            },
        ),
        FdCase::new(
            "reshape",
            |r| store(vec![("a", Tensor::randn(&[2, 6], 1.0, r))]),
            |g, p, s| {
                let a = g.param(p, "a")?;
                let b = g.reshape(a, &[3, 4])?;
                let sq = g.mul(b, b)?;
                project(g, sq, s)
            },
        ),
        FdCase::new(
            "embed",
            |r| store(vec![("t", Tensor::randn(&[4, 3], 1.0, r))]),
            |g, p, s| {
                let t = g.param(p, "t")?;
                let e = g.embed(t, &[2, 0, 2, 3])?;
                project(g, e, s)
            },
        ),
    ]
}

pub fn probing_losses() -> Vec<FdCase> {
    vec![
        FdCase::new(
            "probe-loss",
            |r| store(vec![("x", Tensor::randn(&[3, SIZE * SIZE], 0.5, r))]),
            |g, p, s| {
                let det = DetectorNet::<f64>::new(SIZE, s).unwrap().frozen();
                let x = g.param(p, "x")?;
                probe_loss(g, &det, x)
            },
        ),
        FdCase::new(
            "perceptual",
            |r| store(vec![("x", Tensor::randn(&[2, SIZE * SIZE], 0.5, r))]),
            |g, p, s| {
                let ext = PerceptualExtractor::<f64>::new(SIZE, s).unwrap();
                let base = Tensor::randn(&[2, SIZE * SIZE], 0.5, &mut rng::rng(s ^ 1));
                let x = g.param(p, "x")?;
                perceptual_loss(g, &ext, x, &base)
            },
        ),
    ]
}

pub fn all_cases() -> Vec<FdCase> {
    [
        linear_algebra(),
        elementwise(),
        reductions_and_losses(),
        shape_ops(),
        probing_losses(),
    ]
    .into_iter()
    .flatten()
    .collect()
}
