#![allow(dead_code)]

pub mod grad_cases;
pub mod oracles;

use jdd::tensor::{Graph, Scalar, Tensor, Var};
use jdd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(scale * z)
    })
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(lo..hi)))
}

/// Builds an output from leaf variables. Called once per analytic pass and
/// twice per probed coordinate, so it must be deterministic.
pub trait ForwardFn<T: Scalar>: Fn(&mut Graph<T>, &[Var]) -> Result<Var> {}
impl<T: Scalar, F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>> ForwardFn<T> for F {}

/// `mean((f(x) - target)²)`. The target sits a small random offset away from
/// the unperturbed output, which keeps the loss value small next to its
/// gradient and so limits rounding error in the difference quotient.
fn loss<T: Scalar>(g: &mut Graph<T>, vars: &[Var], f: &impl ForwardFn<T>, target: &Tensor<T>) -> Var {
    let out = f(g, vars).expect("forward");
    let t = g.input(target.clone());
    g.mean_square(out, t).expect("loss")
}

fn eval<T: Scalar>(inputs: &[Tensor<T>], f: &impl ForwardFn<T>, target: &Tensor<T>) -> (f64, Vec<bool>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&mut g, &vars, f, target);
    (g.value(l).item().expect("scalar loss").as_f64(), g.activation_pattern())
}

/// Relative errors |analytic - numeric| / max(|analytic|, |numeric|), with
/// Euclidean norms over the probed coordinates.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// One entry per checked input.
    pub per_input: Vec<(usize, f64)>,
    /// All probed coordinates of all checked inputs taken as one vector.
    pub combined: f64,
    /// Probes discarded because the two evaluations straddled a ReLU kink.
    pub kinked: usize,
    pub probed: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().map(|&(_, e)| e).fold(0.0, f64::max)
    }
}

fn rel(diff2: f64, a2: f64, n2: f64) -> f64 {
    diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-30)
}

/// Probes up to `max_probes` coordinates of each input listed in `check` by
/// central differences with step `h` and compares with backpropagation.
///
/// A probe whose `+h` and `-h` evaluations put some ReLU input on different
/// sides of zero measures the kink rather than the derivative and is dropped.
pub fn grad_report<T: Scalar>(
    inputs: &[Tensor<T>],
    check: &[usize],
    f: impl ForwardFn<T>,
    h: f64,
    max_probes: usize,
    seed: u64,
) -> GradReport {
    let mut rng = rng(seed);
    let target = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        let out = g.value(out).clone();
        let offset: Tensor<T> = randn(&mut rng, out.shape(), 0.01);
        Tensor::new(out.shape().to_vec(), out.data().iter().zip(offset.data()).map(|(&a, &b)| a + b).collect())
            .expect("same shape")
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars, &f, &target);
    g.backward(l).expect("backward");
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad").clone()).collect();

    let mut work = inputs.to_vec();
    let mut per_input = Vec::new();
    let (mut probed, mut kinked) = (0, 0);
    let (mut all_d, mut all_a, mut all_n) = (0.0, 0.0, 0.0);
    for &i in check {
        let n = inputs[i].len();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let exhaustive = n <= max_probes;
        let attempts = if exhaustive { n } else { 4 * max_probes };
        let mut accepted = 0;
        for attempt in 0..attempts {
            if accepted == max_probes {
                break;
            }
            let k = if exhaustive { attempt } else { rng.random_range(0..n) };
            let x0 = work[i].data()[k].as_f64();
            work[i].data_mut()[k] = T::lit(x0 + h);
            let hi = work[i].data()[k].as_f64();
            let (up, up_pattern) = eval(&work, &f, &target);
            work[i].data_mut()[k] = T::lit(x0 - h);
            let lo = work[i].data()[k].as_f64();
            let (down, down_pattern) = eval(&work, &f, &target);
            work[i].data_mut()[k] = inputs[i].data()[k];
            probed += 1;
            if up_pattern != down_pattern {
                kinked += 1;
                continue;
            }
            accepted += 1;
            // Divide by the representable step so rounding of x0 ± h does not bias the quotient.
            let numeric = (up - down) / (hi - lo);
            let a = analytic[i].data()[k].as_f64();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        per_input.push((i, rel(diff2, a2, n2)));
        all_d += diff2;
        all_a += a2;
        all_n += n2;
    }
    GradReport { per_input, combined: rel(all_d, all_a, all_n), kinked, probed }
}

/// Worst per-input relative error of [`grad_report`].
pub fn grad_check<T: Scalar>(
    inputs: &[Tensor<T>],
    check: &[usize],
    f: impl ForwardFn<T>,
    h: f64,
    max_probes: usize,
    seed: u64,
) -> f64 {
    grad_report(inputs, check, f, h, max_probes, seed).worst()
}

/// Runs the `jdd` binary and returns its exit code and stderr.
pub fn jdd<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> (i32, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_jdd")).args(args).output().expect("spawn jdd");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Every file under `dir` as (relative path, bytes), sorted by path.
pub fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("read dir")
        .map(|e| {
            let p = e.expect("entry").path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).expect("read file"))
        })
        .collect();
    out.sort();
    out
}

/// A small training config as JSON, for the binary.
pub fn tiny_run_config(steps: usize, seed: u64) -> String {
    format!(
        r#"{{"train": {{"steps": {steps}, "seed": {seed}, "lr": 0.001, "batch_size": 2, "patch_size": 16,
            "generator": {{"res_blocks": 1, "trunk_width": 4}},
            "discriminator": {{"base_width": 2, "max_width": 8}}}}}}"#
    )
}
