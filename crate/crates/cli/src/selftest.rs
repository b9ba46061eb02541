//! Gradient and invariance checks runnable from the command line.

use reprobe::analysis::linear_cka;
use reprobe::diff::{finite_diff_check, Graph, NodeId, ParamSet, RngStream, Tensor};
use reprobe::losses::{cross_entropy, distillation, ewc_penalty, simclr, supcon, FisherAnchor, Reduction};
use reprobe::probe::{fit_linear_probe, ProbeSpec};
use reprobe::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            passed: value <= bound,
        }
    }
}

/// Loss families covered by the gradient suite.
pub const GRADIENT_LOSSES: [&str; 5] = ["cross-entropy", "supcon", "simclr", "distillation", "ewc"];

fn random(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("finite")
}

/// Max relative finite-difference error of `loss` for a batch of `n` rows of width `d`.
/// The parameter is an affine map `[d, d]` feeding the loss, so every input gradient is exercised.
pub fn gradient_error(loss: &str, n: usize, d: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let x = random(&[n, d], 1.0, &mut rng);
    let mut ps = ParamSet::new();
    let w = ps.insert("w", random(&[d, d], 0.5, &mut rng))?;
    let b = ps.insert("b", random(&[d], 0.1, &mut rng))?;
    let labels: Vec<usize> = (0..n).map(|i| i % d.min(3)).collect();
    let grouped: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let teacher = random(&[n, d], 1.0, &mut rng);
    let anchor = FisherAnchor {
        task: 0,
        entries: vec![
            (w, random(&[d, d], 0.5, &mut rng), random(&[d, d], 1.0, &mut rng).map(|v| v * v)),
            (b, random(&[d], 0.1, &mut rng), random(&[d], 1.0, &mut rng).map(|v| v * v)),
        ],
    };
    let kind = loss.to_string();
    let f = move |g: &mut Graph<f64>, p: &ParamSet<f64>| -> Result<NodeId> {
        let xi = g.input(x.clone());
        let wn = g.param(p, w);
        let bn = g.param(p, b);
        let z = g.affine(xi, wn, Some(bn))?;
        match kind.as_str() {
            "cross-entropy" => cross_entropy(g, z, &labels),
            "supcon" => supcon(g, z, &grouped, 0.5, Reduction::Mean),
            "simclr" => simclr(g, z, 0.5, Reduction::Mean),
            "distillation" => distillation(g, z, &teacher, 2.0),
            "ewc" => ewc_penalty(g, p, std::slice::from_ref(&anchor), 3.0),
            other => Err(reprobe::Error::InvalidArgument(format!("unknown loss {other}"))),
        }
    };
    finite_diff_check(&ps, f, 1e-6, None, &mut rng.fork("coords"))
}

/// Three seeded sizes per loss family.
pub const GRADIENT_SIZES: [(usize, usize); 3] = [(4, 3), (6, 5), (10, 8)];

pub fn gradient_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for loss in GRADIENT_LOSSES {
        for (k, &(n, d)) in GRADIENT_SIZES.iter().enumerate() {
            let err = gradient_error(loss, n, d, seed + k as u64).unwrap_or(f64::INFINITY);
            out.push(Check::at_most(format!("gradient {loss} n={n} d={d}"), err, 1e-4));
        }
    }
    out
}

pub fn cka_suite(seed: u64) -> Vec<Check> {
    let mut rng = RngStream::new(seed);
    let x = random(&[30, 6], 1.0, &mut rng);
    let y = random(&[30, 4], 1.0, &mut rng);
    let cka = |a: &Tensor<f64>, b: &Tensor<f64>| linear_cka(a, b, true).unwrap_or(f64::NAN);
    let q = orthogonal(6, &mut rng);
    let xq = x.matmul(&q).expect("shapes");
    let stretched = x.matmul(&anisotropic(6, 10.0)).expect("shapes");
    let worked = cka(
        &Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).expect("finite"),
        &Tensor::new(vec![3, 1], vec![0.0, 1.0, 4.0]).expect("finite"),
    );
    vec![
        Check::at_most("cka self-similarity", (cka(&x, &x) - 1.0).abs(), 1e-12),
        Check::at_most("cka orthogonal invariance", (cka(&x, &xq) - 1.0).abs(), 1e-12),
        Check::at_most("cka scale invariance", (cka(&x.map(|v| 3.5 * v), &y) - cka(&x, &y)).abs(), 1e-12),
        Check::at_most("cka symmetry", (cka(&x, &y) - cka(&y, &x)).abs(), 1e-12),
        Check::at_most("cka worked value 12/13", (worked - 12.0 / 13.0).abs(), 1e-12),
        Check::at_most("cka non-orthogonal witness", cka(&x, &stretched), 0.99),
    ]
}

/// `diag(1, …, 1, s)`.
fn anisotropic(d: usize, s: f64) -> Tensor<f64> {
    let mut m = Tensor::zeros(&[d, d]);
    for i in 0..d {
        m.data_mut()[i * d + i] = if i + 1 == d { s } else { 1.0 };
    }
    m
}

/// Random orthogonal matrix by Gram-Schmidt on a gaussian draw.
pub fn orthogonal(d: usize, rng: &mut RngStream) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let data = (0..d).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    Tensor::new(vec![d, d], data).expect("finite")
}

pub fn probe_suite(seed: u64) -> Vec<Check> {
    let mut rng = RngStream::new(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let c = i % 2;
        let s = if c == 0 { -3.0 } else { 3.0 };
        rows.push(vec![s + 0.5 * rng.normal(), 0.5 * rng.normal()]);
        labels.push(c);
    }
    let x = Tensor::from_rows(&rows).expect("finite");
    let acc = fit_linear_probe(&x, &labels, &ProbeSpec::default())
        .map(|r| r.train_accuracy)
        .unwrap_or(0.0);
    vec![Check::at_most("probe separable training error", 1.0 - acc, 0.0)]
}

pub fn run_all(seed: u64) -> Vec<Check> {
    let mut v = gradient_suite(seed);
    v.extend(cka_suite(seed));
    v.extend(probe_suite(seed));
    v
}
