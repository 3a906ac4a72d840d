//! Kernel MMD between action sample sets and a state-conditioned Gaussian
//! policy, used both as the fitted behavior model and as the BEAR actor.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::TrainingArrays;
use crate::diffnet::{Activation, MlpParams, MlpSpec, OptimState, Rng, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    kind: KernelKind,
    sigma: f64,
}

impl Kernel {
    pub fn new(kind: KernelKind, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("kernel bandwidth must be > 0, got {sigma}")));
        }
        Ok(Self { kind, sigma })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        match self.kind {
            KernelKind::Gaussian => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.sigma * self.sigma)).exp()
            }
            KernelKind::Laplacian => {
                let d1: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
                (-d1 / self.sigma).exp()
            }
        }
    }

    /// `∂k(u, y)/∂y_j` for a precomputed `k = k(u, y)`.
    fn dk_dy(&self, k: f64, u: f64, y: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => k * (u - y) / (self.sigma * self.sigma),
            KernelKind::Laplacian => {
                let d = u - y;
                if d == 0.0 {
                    0.0
                } else {
                    k * d.signum() / self.sigma
                }
            }
        }
    }
}

pub fn kernel_eval(k: &Kernel, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("kernel inputs of length {} and {}", x.len(), y.len())));
    }
    Ok(k.eval(ArrayView1::from(x), ArrayView1::from(y)))
}

fn mean_gram(k: &Kernel, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for x in a.rows() {
        for y in b.rows() {
            total += k.eval(x, y);
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

fn check_sets(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::Contract("MMD needs nonempty sample sets".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "sample dimensions differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD between the rows of `x` and `y`.
pub fn mmd_squared(x: &Array2<f64>, y: &Array2<f64>, k: &Kernel) -> Result<f64> {
    check_sets(x, y)?;
    let v = mean_gram(k, x, x) + mean_gram(k, y, y) - 2.0 * mean_gram(k, x, y);
    Ok(v.max(0.0))
}

/// Squared MMD together with its gradient with respect to every row of `y`.
pub fn mmd_squared_grad_y(x: &Array2<f64>, y: &Array2<f64>, k: &Kernel) -> Result<(f64, Array2<f64>)> {
    check_sets(x, y)?;
    let (n, m, d) = (x.nrows(), y.nrows(), y.ncols());
    let mut grad = Array2::zeros((m, d));
    let mut kxx = 0.0;
    let mut kyy = 0.0;
    let mut kxy = 0.0;
    for a in x.rows() {
        for b in x.rows() {
            kxx += k.eval(a, b);
        }
    }
    for l in 0..m {
        let yl = y.row(l);
        for i in 0..m {
            let yi = y.row(i);
            let kv = k.eval(yi, yl);
            kyy += kv;
            for j in 0..d {
                grad[[l, j]] += 2.0 * k.dk_dy(kv, yi[j], yl[j]) / (m * m) as f64;
            }
        }
        for xi in x.rows() {
            let kv = k.eval(xi, yl);
            kxy += kv;
            for j in 0..d {
                grad[[l, j]] -= 2.0 * k.dk_dy(kv, xi[j], yl[j]) / (n * m) as f64;
            }
        }
    }
    let v = kxx / (n * n) as f64 + kyy / (m * m) as f64 - 2.0 * kxy / (n * m) as f64;
    Ok((v.max(0.0), grad))
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// State-conditioned diagonal Gaussian over actions. The network emits
/// `2·action_dim` values: a pre-tanh mean and a log-std clamped to
/// `[LOG_STD_MIN, LOG_STD_MAX]`. Samples are clipped to the action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: MlpParams,
    pub action_dim: usize,
}

pub type BehaviorModel = GaussianPolicy;

/// Forward cache for [`GaussianPolicy::backward`].
#[derive(Debug, Clone)]
pub struct GaussianForward {
    tape: Tape,
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    /// 1 where the raw log-std lies inside the clamp interval.
    ls_active: Array2<f64>,
}

/// Reparameterized draws: row `i·m + k` is sample `k` for state `i`.
#[derive(Debug, Clone)]
pub struct GaussianDraw {
    pub samples: Array2<f64>,
    eps: Array2<f64>,
    /// 1 where the unclipped sample lay inside the box.
    inside: Array2<f64>,
    pub per_state: usize,
}

impl GaussianPolicy {
    pub fn init(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(
            state_dim,
            hidden.to_vec(),
            2 * action_dim,
            Activation::Relu,
            Activation::Identity,
        )?;
        Ok(Self {
            net: MlpParams::init(&spec, rng)?,
            action_dim,
        })
    }

    pub fn forward(&self, states: &Array2<f64>) -> Result<GaussianForward> {
        let d = self.action_dim;
        let (out, tape) = self.net.forward(states)?;
        let mean = out.slice(s![.., ..d]).mapv(f64::tanh);
        let raw = out.slice(s![.., d..]).to_owned();
        let ls_active = raw.mapv(|v| if v > LOG_STD_MIN && v < LOG_STD_MAX { 1.0 } else { 0.0 });
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok(GaussianForward {
            tape,
            mean,
            log_std,
            ls_active,
        })
    }

    pub fn mean_action(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(states)?.mean)
    }

    pub fn draw(&self, fwd: &GaussianForward, m: usize, rng: &mut Rng) -> GaussianDraw {
        let (b, d) = fwd.mean.dim();
        let mut samples = Array2::zeros((b * m, d));
        let mut eps = Array2::zeros((b * m, d));
        let mut inside = Array2::zeros((b * m, d));
        for i in 0..b {
            for k in 0..m {
                let r = i * m + k;
                for j in 0..d {
                    let e = rng.normal();
                    let v = fwd.mean[[i, j]] + fwd.log_std[[i, j]].exp() * e;
                    eps[[r, j]] = e;
                    samples[[r, j]] = v.clamp(-1.0, 1.0);
                    inside[[r, j]] = if (-1.0..=1.0).contains(&v) { 1.0 } else { 0.0 };
                }
            }
        }
        GaussianDraw {
            samples,
            eps,
            inside,
            per_state: m,
        }
    }

    /// Parameter gradient given upstream gradients on the mean action, on
    /// the (clamped) log-std, and on reparameterized samples.
    pub fn backward(
        &self,
        fwd: &GaussianForward,
        d_mean: Option<&Array2<f64>>,
        d_log_std: Option<&Array2<f64>>,
        draw: Option<(&GaussianDraw, &Array2<f64>)>,
    ) -> Result<crate::diffnet::ParamGrads> {
        let (b, d) = fwd.mean.dim();
        let mut g_mean = Array2::<f64>::zeros((b, d));
        let mut g_ls = Array2::<f64>::zeros((b, d));
        if let Some(dm) = d_mean {
            g_mean += dm;
        }
        if let Some(dl) = d_log_std {
            g_ls += dl;
        }
        if let Some((dr, ds)) = draw {
            let m = dr.per_state;
            for i in 0..b {
                for k in 0..m {
                    let r = i * m + k;
                    for j in 0..d {
                        let g = ds[[r, j]] * dr.inside[[r, j]];
                        g_mean[[i, j]] += g;
                        g_ls[[i, j]] += g * fwd.log_std[[i, j]].exp() * dr.eps[[r, j]];
                    }
                }
            }
        }
        let mut out = Array2::zeros((b, 2 * d));
        out.slice_mut(s![.., ..d])
            .assign(&(&g_mean * &fwd.mean.mapv(|t| 1.0 - t * t)));
        out.slice_mut(s![.., d..]).assign(&(&g_ls * &fwd.ls_active));
        self.net.backward_params(&fwd.tape, &out)
    }

    /// Mean negative log-likelihood of `actions` and its parameter gradient.
    pub fn nll_and_grad(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<(f64, crate::diffnet::ParamGrads)> {
        let fwd = self.forward(states)?;
        let b = states.nrows() as f64;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let diff = actions - &fwd.mean;
        let inv_var = fwd.log_std.mapv(|l| (-2.0 * l).exp());
        let z2 = &diff * &diff * &inv_var;
        let nll = (z2.mapv(|v| 0.5 * v) + &fwd.log_std).sum() / b
            + half_log_2pi * self.action_dim as f64;
        let d_mean = -(&diff * &inv_var) / b;
        let d_ls = z2.mapv(|v| (1.0 - v) / b);
        let grads = self.backward(&fwd, Some(&d_mean), Some(&d_ls), None)?;
        Ok((nll, grads))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 5000,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

/// Maximum-likelihood fit of a Gaussian policy to the dataset's (s, a)
/// pairs. Returns the model and the per-step training NLL. When the batch
/// size covers the dataset every step uses the full data.
pub fn behavior_fit(
    data: &TrainingArrays,
    cfg: &BehaviorConfig,
    rng: &Rng,
) -> Result<(BehaviorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Missing("cannot fit a behavior model on an empty dataset".into()));
    }
    let mut init_rng = rng.child_named("behavior-init");
    let mut batch_rng = rng.child_named("behavior-batches");
    let mut model = GaussianPolicy::init(
        data.states.ncols(),
        data.actions.ncols(),
        &cfg.hidden,
        &mut init_rng,
    )?;
    let mut opt = OptimState::new(&model.net, cfg.lr);
    let full = cfg.batch_size >= data.len();
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (nll, grads) = if full {
            model.nll_and_grad(&data.states, &data.actions)?
        } else {
            let batch = data.sample(cfg.batch_size, &mut batch_rng);
            model.nll_and_grad(&batch.states, &batch.actions)?
        };
        if !nll.is_finite() {
            return Err(Error::Numerical {
                row: 0,
                what: "behavior NLL became non-finite".into(),
            });
        }
        opt.step(&mut model.net, &grads)?;
        history.push(nll);
    }
    Ok((model, history))
}

/// `m` clipped draws per state, state-major.
pub fn behavior_sample(
    model: &BehaviorModel,
    states: &Array2<f64>,
    m: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let fwd = model.forward(states)?;
    Ok(model.draw(&fwd, m, rng).samples)
}

/// Per-state MMD² between `m`-sample blocks of two state-major sample sets,
/// with gradients with respect to the second set.
pub fn blockwise_mmd(
    x: &Array2<f64>,
    y: &Array2<f64>,
    m: usize,
    k: &Kernel,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if x.dim() != y.dim() || m == 0 || x.nrows() % m != 0 {
        return Err(Error::Shape("blockwise MMD needs equal state-major sample sets".into()));
    }
    let b = x.nrows() / m;
    let mut vals = Array1::zeros(b);
    let mut grad = Array2::zeros(y.dim());
    for i in 0..b {
        let xs = x.slice(s![i * m..(i + 1) * m, ..]).to_owned();
        let ys = y.slice(s![i * m..(i + 1) * m, ..]).to_owned();
        let (v, g) = mmd_squared_grad_y(&xs, &ys, k)?;
        vals[i] = v;
        grad.slice_mut(s![i * m..(i + 1) * m, ..]).assign(&g);
    }
    Ok((vals, grad))
}

/// Column means of each `m`-row block.
pub fn block_means(x: &Array2<f64>, m: usize) -> Array2<f64> {
    let b = x.nrows() / m;
    let mut out = Array2::zeros((b, x.ncols()));
    for i in 0..b {
        out.row_mut(i)
            .assign(&x.slice(s![i * m..(i + 1) * m, ..]).mean_axis(Axis(0)).expect("m > 0"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::fd::central_difference;
    use ndarray::array;

    fn gauss(s: f64) -> Kernel {
        Kernel::new(KernelKind::Gaussian, s).unwrap()
    }

    #[test]
    fn kernel_closed_forms() {
        let g = gauss(1.0);
        let l = Kernel::new(KernelKind::Laplacian, 1.0).unwrap();
        assert_eq!(kernel_eval(&g, &[0.3, 0.1], &[0.3, 0.1]).unwrap(), 1.0);
        assert_eq!(kernel_eval(&l, &[0.3, 0.1], &[0.3, 0.1]).unwrap(), 1.0);
        assert!((kernel_eval(&g, &[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel_eval(&l, &[0.0, 0.0], &[1.0, -2.0]).unwrap() - (-3.0f64).exp()).abs() < 1e-15);
        assert!(Kernel::new(KernelKind::Gaussian, 0.0).is_err());
        assert!(Kernel::new(KernelKind::Laplacian, -1.0).is_err());
        assert!(kernel_eval(&g, &[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mmd_identical_and_two_point() {
        let x = array![[0.1, -0.4], [0.7, 0.2], [-0.3, 0.9]];
        assert!(mmd_squared(&x, &x, &gauss(0.7)).unwrap().abs() < 1e-12);
        for sigma in [0.3, 1.0, 2.5] {
            let v = mmd_squared(&array![[0.0]], &array![[1.0]], &gauss(sigma)).unwrap();
            let expect = 2.0 - 2.0 * (-1.0 / (2.0 * sigma * sigma)).exp();
            assert!((v - expect).abs() < 1e-10);
        }
        assert!(mmd_squared(&x, &array![[0.0]], &gauss(1.0)).is_err());
    }

    #[test]
    fn mmd_grad_matches_fd() {
        let x = array![[0.1, -0.4], [0.7, 0.2], [-0.3, 0.9], [0.0, 0.05]];
        let y = array![[0.5, 0.1], [-0.2, -0.6], [0.33, 0.4], [0.8, -0.9]];
        for k in [gauss(0.8), Kernel::new(KernelKind::Laplacian, 1.0).unwrap()] {
            let (_, g) = mmd_squared_grad_y(&x, &y, &k).unwrap();
            let fd = central_difference(
                |flat| {
                    let yy = Array2::from_shape_vec((4, 2), flat.to_vec()).unwrap();
                    mmd_squared(&x, &yy, &k).unwrap()
                },
                y.as_slice().unwrap(),
                1e-6,
            )
            .unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn separated_clouds_score_higher() {
        let mut rng = Rng::new(3);
        let k = gauss(1.0);
        let cloud = |rng: &mut Rng, c: f64| Array2::from_shape_fn((8, 2), |_| c + 0.2 * rng.normal());
        for _ in 0..100 {
            let a = cloud(&mut rng, 0.0);
            let b = cloud(&mut rng, 0.0);
            let far = cloud(&mut rng, 2.0);
            assert!(mmd_squared(&a, &far, &k).unwrap() > mmd_squared(&a, &b, &k).unwrap());
        }
    }

    #[test]
    fn policy_grad_matches_fd() {
        let mut rng = Rng::new(11);
        let mut pol = GaussianPolicy::init(3, 2, &[5], &mut rng).unwrap();
        // Shrink weights so tanh and the clamp stay in their smooth region.
        for l in pol.net.layers_mut() {
            l.weight.mapv_inplace(|w| 0.5 * w);
        }
        let states = Array2::from_shape_fn((4, 3), |_| rng.uniform(-1.0, 1.0));
        let actions = Array2::from_shape_fn((4, 2), |_| rng.uniform(-0.5, 0.5));
        let (_, g) = pol.nll_and_grad(&states, &actions).unwrap();
        let mut work = pol.clone();
        let fd = central_difference(
            |theta| {
                work.net.set_from_vec(theta).unwrap();
                work.nll_and_grad(&states, &actions).unwrap().0
            },
            &pol.net.to_vec(),
            1e-6,
        )
        .unwrap();
        for (a, b) in g.to_vec().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }

        let fwd = pol.forward(&states).unwrap();
        let draw = pol.draw(&fwd, 3, &mut Rng::new(2));
        let w = Array2::from_shape_fn(draw.samples.dim(), |(i, j)| (i as f64 - 2.0 * j as f64) * 0.1);
        let g = pol.backward(&fwd, None, None, Some((&draw, &w))).unwrap();
        let fd = central_difference(
            |theta| {
                work.net.set_from_vec(theta).unwrap();
                let f = work.forward(&states).unwrap();
                let dr = work.draw(&f, 3, &mut Rng::new(2));
                (&dr.samples * &w).sum()
            },
            &pol.net.to_vec(),
            1e-6,
        )
        .unwrap();
        for (a, b) in g.to_vec().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    fn toy(n: usize, f: impl Fn(f64) -> [f64; 2]) -> TrainingArrays {
        let mut rng = Rng::new(5);
        let states = Array2::from_shape_fn((n, 2), |_| rng.uniform(-1.0, 1.0));
        let mut actions = Array2::zeros((n, 2));
        for i in 0..n {
            let a = f(states[[i, 0]]);
            actions[[i, 0]] = a[0];
            actions[[i, 1]] = a[1];
        }
        TrainingArrays {
            next_states: states.clone(),
            states,
            actions,
            rewards: Array1::zeros(n),
            dones: Array1::zeros(n),
        }
    }

    #[test]
    fn fit_constant_action() {
        let data = toy(64, |_| [0.4, -0.2]);
        let cfg = BehaviorConfig {
            hidden: vec![16],
            steps: 3000,
            batch_size: 64,
            lr: 3e-3,
        };
        let (model, hist) = behavior_fit(&data, &cfg, &Rng::new(1)).unwrap();
        assert!(hist[..100].windows(2).all(|w| w[1] < w[0]), "NLL not monotone");
        let fwd = model.forward(&data.states).unwrap();
        for r in fwd.mean.rows() {
            assert!((r[0] - 0.4).abs() < 0.02 && (r[1] + 0.2).abs() < 0.02, "{r}");
        }
        assert!(fwd.log_std.iter().all(|&l| l < -3.5), "std not near floor");
        let samples = behavior_sample(&model, &data.states, 4, &mut Rng::new(0)).unwrap();
        let expect = block_means(&samples, 4);
        for (a, b) in expect.iter().zip(fwd.mean.iter()) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn samples_clipped_and_reproducible() {
        let mut rng = Rng::new(9);
        let mut pol = GaussianPolicy::init(2, 2, &[8], &mut rng).unwrap();
        let last = pol.net.layers_mut().len() - 1;
        pol.net.layers_mut()[last].bias.assign(&array![0.9, -0.9, 1.9, 1.9]);
        let states = Array2::from_shape_fn((10, 2), |_| rng.uniform(-1.0, 1.0));
        let a = behavior_sample(&pol, &states, 1, &mut Rng::new(4)).unwrap();
        let b = behavior_sample(&pol, &states, 1, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let many = behavior_sample(&pol, &states, 50, &mut Rng::new(4)).unwrap();
        assert!(many.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sample_mean_converges() {
        let mut rng = Rng::new(12);
        let mut pol = GaussianPolicy::init(2, 1, &[8], &mut rng).unwrap();
        let last = pol.net.layers_mut().len() - 1;
        pol.net.layers_mut()[last].bias.assign(&array![0.1, -2.0]);
        let states = array![[0.2, -0.1]];
        let mean = pol.mean_action(&states).unwrap()[[0, 0]];
        let draws = behavior_sample(&pol, &states, 10_000, &mut Rng::new(1)).unwrap();
        assert!((draws.mean().unwrap() - mean).abs() < 0.05);
    }
}
