//! One-sided penalty on the action-gradient norm of a scalar critic.
//!
//! For a critic `Q(s, a)` over the concatenated input `x = [s, a]` the penalty
//! is `mean_i [max(0, ‖∇_a Q(s_i, a_i)‖₂ − k)]²`. Its parameter gradient is
//! obtained by differentiating the explicit input-gradient recurrence:
//!
//! * forward:   `z_l = h_{l-1} W_lᵀ + b_l`, `h_l = σ_l(z_l)`
//! * input VJP: `Δ_{L-1} = σ'_{L-1}(z_{L-1})`, `U_l = Δ_l W_l`,
//!   `Δ_{l-1} = U_l ⊙ σ'_{l-1}(z_{l-1})`, `∇_x Q = U_0`
//!
//! and then running reverse mode over both passes. The reverse sweep over the
//! input VJP goes from layer 0 upward and produces `W̄_l += Δ_lᵀ Ū_l` plus a
//! direct pre-activation adjoint `Ū_{l+1} ⊙ Δ̄_l ⊙ σ''(z_l)`; a standard
//! backprop sweep over the forward pass then collects the rest.

use ndarray::{s, Array2, Axis, Zip};

use super::mlp::{Activation, MlpParams, ParamGrads};
use crate::error::{Error, Result};

/// Penalty value, its parameter gradient and the per-row action-gradient norms.
#[derive(Debug, Clone)]
pub struct PenaltyOutput {
    pub penalty: f64,
    pub grads: ParamGrads,
    pub norms: Vec<f64>,
}

struct InputGradPass {
    /// Input of every layer (`h_{l-1}`; index 0 is the batch itself).
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    /// `Δ_l`: adjoint of `z_l` in the input-gradient pass.
    delta: Vec<Array2<f64>>,
    /// `U_l = Δ_l W_l`, adjoint of the layer's input; `U_0 = ∇_x Q`.
    upstream: Vec<Array2<f64>>,
}

fn activation_of(params: &MlpParams, layer: usize) -> Activation {
    let spec = params.spec();
    if layer == spec.hidden_dims.len() {
        spec.output_activation
    } else {
        spec.hidden_activation
    }
}

fn input_grad_pass(params: &MlpParams, x: &Array2<f64>) -> InputGradPass {
    let layers = params.layers();
    let n = layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<Array2<f64>> = Vec::with_capacity(n);
    for (l, layer) in layers.iter().enumerate() {
        let act = activation_of(params, l);
        let h_in = if l == 0 { x.clone() } else { post[l - 1].clone() };
        let mut z = h_in.dot(&layer.weight.t());
        z += &layer.bias;
        let h = z.mapv(|v| act.apply(v));
        inputs.push(h_in);
        pre.push(z);
        post.push(h);
    }

    let mut delta = vec![Array2::zeros((0, 0)); n];
    let mut upstream = vec![Array2::zeros((0, 0)); n];
    let out_act = activation_of(params, n - 1);
    let mut d = Array2::zeros(pre[n - 1].dim());
    Zip::from(&mut d)
        .and(&pre[n - 1])
        .and(&post[n - 1])
        .for_each(|d, &z, &h| *d = out_act.deriv(z, h));
    for l in (0..n).rev() {
        let u = d.dot(&layers[l].weight);
        delta[l] = d;
        if l > 0 {
            let act = activation_of(params, l - 1);
            let mut next = u.clone();
            Zip::from(&mut next)
                .and(&pre[l - 1])
                .and(&post[l - 1])
                .for_each(|v, &z, &h| *v *= act.deriv(z, h));
            d = next;
        } else {
            d = Array2::zeros((0, 0));
        }
        upstream[l] = u;
    }
    InputGradPass {
        inputs,
        pre,
        post,
        delta,
        upstream,
    }
}

fn check_critic(params: &MlpParams, states: &Array2<f64>, actions: &Array2<f64>) -> Result<()> {
    let spec = params.spec();
    if spec.output_dim != 1 {
        return Err(Error::Contract("gradient penalty needs a scalar critic".into()));
    }
    if states.nrows() != actions.nrows() {
        return Err(Error::Shape(format!(
            "{} state rows vs {} action rows",
            states.nrows(),
            actions.nrows()
        )));
    }
    if states.ncols() + actions.ncols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "state {} + action {} columns != critic input {}",
            states.ncols(),
            actions.ncols(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// Concatenates state and action columns into a critic input batch.
pub fn concat_inputs(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    let sd = states.ncols();
    let mut x = Array2::zeros((states.nrows(), sd + actions.ncols()));
    x.slice_mut(s![.., ..sd]).assign(states);
    x.slice_mut(s![.., sd..]).assign(actions);
    x
}

/// `‖∇_a Q(s_i, a_i)‖₂` for every row.
pub fn action_grad_norms(
    params: &MlpParams,
    states: &Array2<f64>,
    actions: &Array2<f64>,
) -> Result<Vec<f64>> {
    check_critic(params, states, actions)?;
    let x = concat_inputs(states, actions);
    let g = params.input_gradient(&x)?;
    let sd = states.ncols();
    Ok(g.slice(s![.., sd..])
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect())
}

/// Penalty `mean_i [max(0, ‖∇_a Q‖ − k)]²` and its exact parameter gradient.
pub fn gp_value_and_param_grad(
    params: &MlpParams,
    states: &Array2<f64>,
    actions: &Array2<f64>,
    k: f64,
) -> Result<PenaltyOutput> {
    if !(k > 0.0) {
        return Err(Error::Contract(format!("penalty threshold must be > 0, got {k}")));
    }
    check_critic(params, states, actions)?;
    let batch = states.nrows();
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let sd = states.ncols();
    let x = concat_inputs(states, actions);
    let pass = input_grad_pass(params, &x);
    let g = &pass.upstream[0];

    // Adjoint of ∇_x Q from the hinge; zero on state columns.
    let mut g_bar = Array2::<f64>::zeros(g.dim());
    let mut norms = Vec::with_capacity(batch);
    let mut penalty = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (i, row) in g.rows().into_iter().enumerate() {
        let ga = row.slice(s![sd..]);
        let norm = ga.dot(&ga).sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical {
                row: i,
                what: "action-gradient norm".into(),
            });
        }
        norms.push(norm);
        let excess = norm - k;
        if excess > 0.0 {
            penalty += excess * excess;
            let coef = 2.0 * excess / norm * inv_b;
            let mut dst = g_bar.slice_mut(s![i, sd..]);
            dst.assign(&ga);
            dst *= coef;
        }
    }
    penalty *= inv_b;

    let mut grads = ParamGrads::zeros_like(params);
    if penalty == 0.0 {
        return Ok(PenaltyOutput {
            penalty,
            grads,
            norms,
        });
    }

    let layers = params.layers();
    let n = layers.len();
    // With σ'' ≡ 0 the input gradient is locally constant in the biases and
    // in every pre-activation, so only the W̄_l += Δ_lᵀ Ū_l terms survive.
    let curved = (0..n).any(|l| !activation_of(params, l).is_piecewise_linear());
    // Direct adjoints of z_l coming from the input-gradient pass.
    let mut z_bar_direct: Vec<Array2<f64>> = Vec::with_capacity(n);
    let mut u_bar = g_bar;
    for l in 0..n {
        let act = activation_of(params, l);
        grads.layers[l].weight += &pass.delta[l].t().dot(&u_bar);
        if l + 1 == n {
            break;
        }
        let mut delta_bar = u_bar.dot(&layers[l].weight.t());
        if !curved {
            Zip::from(&mut delta_bar)
                .and(&pass.pre[l])
                .and(&pass.post[l])
                .for_each(|v, &z, &h| *v *= act.deriv(z, h));
            u_bar = delta_bar;
            continue;
        }
        // Δ_l = U_{l+1} ⊙ σ'(z_l) for hidden layers.
        let mut zb = Array2::zeros(delta_bar.dim());
        Zip::from(&mut zb)
            .and(&delta_bar)
            .and(&pass.upstream[l + 1])
            .and(&pass.pre[l])
            .and(&pass.post[l])
            .for_each(|o, &db, &u, &z, &h| *o = db * u * act.second_deriv(z, h));
        Zip::from(&mut delta_bar)
            .and(&pass.pre[l])
            .and(&pass.post[l])
            .for_each(|v, &z, &h| *v *= act.deriv(z, h));
        u_bar = delta_bar;
        z_bar_direct.push(zb);
    }
    if !curved {
        return finish(penalty, grads, norms);
    }
    // Output layer: its Δ is σ'(z) itself.
    {
        let l = n - 1;
        let act = activation_of(params, l);
        let delta_bar = u_bar.dot(&layers[l].weight.t());
        let mut zb = Array2::zeros(delta_bar.dim());
        Zip::from(&mut zb)
            .and(&delta_bar)
            .and(&pass.pre[l])
            .and(&pass.post[l])
            .for_each(|o, &db, &z, &h| *o = db * act.second_deriv(z, h));
        z_bar_direct.push(zb);
    }

    // Ordinary backprop through the forward pass.
    let mut h_bar: Option<Array2<f64>> = None;
    for l in (0..n).rev() {
        let act = activation_of(params, l);
        let mut z_bar = std::mem::take(&mut z_bar_direct[l]);
        if let Some(hb) = h_bar.take() {
            Zip::from(&mut z_bar)
                .and(&hb)
                .and(&pass.pre[l])
                .and(&pass.post[l])
                .for_each(|o, &hb, &z, &h| *o += hb * act.deriv(z, h));
        }
        grads.layers[l].weight += &z_bar.t().dot(&pass.inputs[l]);
        grads.layers[l].bias += &z_bar.sum_axis(Axis(0));
        if l > 0 {
            h_bar = Some(z_bar.dot(&layers[l].weight));
        }
    }

    finish(penalty, grads, norms)
}

fn finish(penalty: f64, grads: ParamGrads, norms: Vec<f64>) -> Result<PenaltyOutput> {
    if !grads.is_finite() {
        return Err(Error::Numerical {
            row: 0,
            what: "penalty parameter gradient".into(),
        });
    }
    Ok(PenaltyOutput {
        penalty,
        grads,
        norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::mlp::{Layer, MlpSpec};
    use crate::diffnet::rng::Rng;
    use ndarray::{array, Array1};

    /// Q(s, a) = c·a through one identity hidden unit: W1 = [0, c], W2 = [1].
    fn linear_critic(c: &[f64]) -> MlpParams {
        let spec = MlpSpec::new(1 + c.len(), vec![1], 1, Activation::Identity, Activation::Identity)
            .unwrap();
        let mut w1 = vec![0.0];
        w1.extend_from_slice(c);
        MlpParams::from_layers(
            &spec,
            vec![
                Layer {
                    weight: Array2::from_shape_vec((1, 1 + c.len()), w1).unwrap(),
                    bias: Array1::zeros(1),
                },
                Layer {
                    weight: array![[1.0]],
                    bias: Array1::zeros(1),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn linear_critic_closed_form() {
        let c = [3.0 / 5f64.sqrt(), 6.0 / 5f64.sqrt()]; // ‖c‖ = 3
        let p = linear_critic(&c);
        let states = array![[0.2], [-0.7], [1.1]];
        let actions = array![[0.1, 0.3], [-0.5, 0.9], [0.0, 0.0]];
        let out = gp_value_and_param_grad(&p, &states, &actions, 1.0).unwrap();
        assert!((out.penalty - 4.0).abs() < 1e-10);
        // ∂p/∂c = 2(‖c‖−k)·c/‖c‖, and c = w2·w1_a with w2 = 1.
        for (j, cj) in c.iter().enumerate() {
            let expect = 2.0 * 2.0 * cj / 3.0;
            assert!((out.grads.layers[0].weight[[0, 1 + j]] - expect).abs() < 1e-10);
        }
        // ∂p/∂w2 = 2(‖c‖−k)·(c/‖c‖)·w1_a = 2·2·‖c‖.
        assert!((out.grads.layers[1].weight[[0, 0]] - 12.0).abs() < 1e-10);
        assert_eq!(out.grads.layers[0].weight[[0, 0]], 0.0);
    }

    #[test]
    fn below_threshold_is_zero() {
        let p = linear_critic(&[0.3, 0.4]);
        let states = array![[0.2], [0.4]];
        let actions = array![[0.1, 0.3], [-0.5, 0.9]];
        let out = gp_value_and_param_grad(&p, &states, &actions, 1.0).unwrap();
        assert_eq!(out.penalty, 0.0);
        assert_eq!(out.grads.max_abs(), 0.0);
        assert!(out.norms.iter().all(|n| (n - 0.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = linear_critic(&[0.3, 0.4]);
        assert!(gp_value_and_param_grad(&p, &array![[0.0]], &array![[0.0, 0.0]], 0.0).is_err());
        assert!(matches!(
            gp_value_and_param_grad(&p, &array![[0.0], [1.0]], &array![[0.0, 0.0]], 1.0),
            Err(Error::Shape(_))
        ));
    }

    fn check_against_finite_differences(hidden: Activation, seed: u64) {
        let spec = MlpSpec::new(4, vec![6, 5], 1, hidden, Activation::Identity).unwrap();
        let mut rng = Rng::new(seed);
        let mut p = MlpParams::init(&spec, &mut rng).unwrap();
        // Scale up so that norms clear the threshold.
        for l in p.layers_mut() {
            l.weight *= 3.0;
        }
        let states = Array2::from_shape_fn((5, 2), |_| rng.uniform(-1.0, 1.0));
        let actions = Array2::from_shape_fn((5, 2), |_| rng.uniform(-1.0, 1.0));
        let k = 0.5;
        let out = gp_value_and_param_grad(&p, &states, &actions, k).unwrap();
        assert!(out.penalty > 0.0);
        assert!(out.norms.iter().all(|n| (n - k).abs() > 1e-3));
        let base = p.to_vec();
        let analytic = out.grads.to_vec();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += h;
            p.set_from_vec(&v).unwrap();
            let up = gp_value_and_param_grad(&p, &states, &actions, k).unwrap().penalty;
            v[i] -= 2.0 * h;
            p.set_from_vec(&v).unwrap();
            let down = gp_value_and_param_grad(&p, &states, &actions, k).unwrap().penalty;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn tanh_critic_matches_finite_differences() {
        check_against_finite_differences(Activation::Tanh, 99);
    }

    #[test]
    fn relu_critic_matches_finite_differences() {
        // Relu pre-activations sit far from 0 relative to h for this seed.
        check_against_finite_differences(Activation::Relu, 7);
    }
}
