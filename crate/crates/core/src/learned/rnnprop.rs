use rand::Rng;

use super::lstm::{lstm_cell, lstm_params, LstmState};
use super::{Policy, PolicyStep, StepContext, HIDDEN};
use crate::error::{Error, Result};
use crate::optimizee::ParamLayout;
use crate::params::ParamSet;
use crate::pool::{stabilized_root, DEFAULT_EPS};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const FEATURES: usize = 2;

/// Two-layer coordinate-wise LSTM fed with the Adam and RMSProp directions,
/// followed by a tanh output layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnnProp {
    /// Half-width of the uniform initialization of the output layer.
    pub out_init: f64,
}

impl Default for RnnProp {
    fn default() -> Self {
        Self { out_init: 0.01 }
    }
}

/// Per-coordinate state outside the tape: moment EMAs and both LSTM layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    pub lstm: [LstmState; 2],
}

impl CoordState {
    pub fn zeros(coords: usize) -> Self {
        Self {
            m: Tensor::zeros(&[coords]),
            v: Tensor::zeros(&[coords]),
            step: 0,
            lstm: [LstmState::zeros(coords, HIDDEN), LstmState::zeros(coords, HIDDEN)],
        }
    }

    pub fn coords(&self) -> usize {
        self.m.numel()
    }
}

/// Bias-corrected `(m_hat / sqrt(v_hat + eps), g / sqrt(v_hat + eps), m', v')`.
fn features_taped(tape: &mut Tape, g: Var, m: Var, v: Var, step: u64) -> Result<[Var; 4]> {
    let gm = tape.scale(g, 1.0 - BETA1)?;
    let mm = tape.scale(m, BETA1)?;
    let m = tape.add(mm, gm)?;
    let g2 = tape.square(g)?;
    let g2 = tape.scale(g2, 1.0 - BETA2)?;
    let vv = tape.scale(v, BETA2)?;
    let v = tape.add(vv, g2)?;
    let t = step as i32;
    let m_hat = tape.scale(m, 1.0 / (1.0 - BETA1.powi(t)))?;
    let v_hat = tape.scale(v, 1.0 / (1.0 - BETA2.powi(t)))?;
    let denom = stabilized_root(tape, v_hat, DEFAULT_EPS)?;
    let adam = tape.div(m_hat, denom)?;
    let rms = tape.div(g, denom)?;
    Ok([adam, rms, m, v])
}

/// LSTM stack and output layer on flat `[D]` features.
fn core_taped(tape: &mut Tape, phi: &[Var], adam: Var, rms: Var, lstm: [Var; 4]) -> Result<(Var, [Var; 4])> {
    let d = tape.try_value(adam)?.numel();
    let a = tape.reshape(adam, &[d, 1])?;
    let r = tape.reshape(rms, &[d, 1])?;
    let x = tape.concat(&[a, r], 1)?;
    let (h1, c1) = lstm_cell(tape, [phi[0], phi[1], phi[2]], x, lstm[0], lstm[1])?;
    let (h2, c2) = lstm_cell(tape, [phi[3], phi[4], phi[5]], h1, lstm[2], lstm[3])?;
    let out = tape.affine(h2, phi[6], phi[7])?;
    let out = tape.tanh(out)?;
    let update = tape.reshape(out, &[d])?;
    Ok((update, [h1, c1, h2, c2]))
}

impl Policy for RnnProp {
    fn name(&self) -> String {
        "rnnprop".into()
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = seed::rng(seed);
        let mut entries = lstm_params("lstm1", FEATURES, HIDDEN, &mut rng);
        entries.extend(lstm_params("lstm2", HIDDEN, HIDDEN, &mut rng));
        let w = (0..HIDDEN).map(|_| rng.random_range(-self.out_init..=self.out_init)).collect();
        entries.push(("out.w".into(), Tensor::matrix(HIDDEN, 1, w).expect("out shape")));
        entries.push(("out.b".into(), Tensor::vector(vec![0.0])));
        ParamSet::from_entries(entries).expect("unique names")
    }

    fn initial_state(&self, layout: &ParamLayout) -> Vec<Tensor> {
        let s = CoordState::zeros(layout.total());
        let [l1, l2] = s.lstm;
        vec![s.m, s.v, l1.h, l1.c, l2.h, l2.c]
    }

    fn step(&self, tape: &mut Tape, phi: &[Var], grad: Var, state: &[Var], ctx: &StepContext) -> Result<PolicyStep> {
        let [adam, rms, m, v] = features_taped(tape, grad, state[0], state[1], ctx.step)?;
        let (update, [h1, c1, h2, c2]) = core_taped(tape, phi, adam, rms, [state[2], state[3], state[4], state[5]])?;
        Ok(PolicyStep {
            update,
            state: vec![m, v, h1, c1, h2, c2],
            weights: None,
        })
    }
}

/// Updates the moment EMAs with `grad` and returns the Adam and RMSProp
/// directions (shaped like `grad`).
pub fn rnnprop_features(grad: &Tensor, state: &CoordState) -> Result<(Tensor, Tensor, CoordState)> {
    if grad.numel() != state.coords() {
        return Err(Error::ShapeMismatch {
            op: "rnnprop_features",
            lhs: grad.shape().to_vec(),
            rhs: state.m.shape().to_vec(),
        });
    }
    if !grad.all_finite() {
        return Err(Error::Divergence("non-finite gradient fed to rnnprop".into()));
    }
    let mut tape = Tape::new();
    let g = tape.leaf(grad.clone().reshape(vec![grad.numel()])?);
    let m = tape.leaf(state.m.clone());
    let v = tape.leaf(state.v.clone());
    let step = state.step + 1;
    let [adam, rms, m, v] = features_taped(&mut tape, g, m, v, step)?;
    let shape = grad.shape().to_vec();
    Ok((
        tape.value(adam).clone().reshape(shape.clone())?,
        tape.value(rms).clone().reshape(shape)?,
        CoordState {
            m: tape.value(m).clone(),
            v: tape.value(v).clone(),
            step,
            lstm: state.lstm.clone(),
        },
    ))
}

/// One LSTM step on precomputed features; the update has the features' shape.
pub fn rnnprop_step(params: &ParamSet, adam_dir: &Tensor, rmsprop_dir: &Tensor, state: &CoordState) -> Result<(Tensor, CoordState)> {
    if adam_dir.shape() != rmsprop_dir.shape() || adam_dir.numel() != state.coords() {
        return Err(Error::ShapeMismatch {
            op: "rnnprop_step",
            lhs: adam_dir.shape().to_vec(),
            rhs: state.m.shape().to_vec(),
        });
    }
    let d = adam_dir.numel();
    let mut tape = Tape::new();
    let phi = params.leaves(&mut tape);
    let a = tape.leaf(adam_dir.clone().reshape(vec![d])?);
    let r = tape.leaf(rmsprop_dir.clone().reshape(vec![d])?);
    let [l1, l2] = &state.lstm;
    let lstm = [l1.h.clone(), l1.c.clone(), l2.h.clone(), l2.c.clone()].map(|t| tape.leaf(t));
    let (update, [h1, c1, h2, c2]) = core_taped(&mut tape, &phi, a, r, lstm)?;
    let next: Vec<Tensor> = [h1, c1, h2, c2].iter().map(|&v| tape.value(v).clone()).collect();
    if !next.iter().all(Tensor::all_finite) || !tape.value(update).all_finite() {
        return Err(Error::Divergence("non-finite LSTM activation".into()));
    }
    let mut it = next.into_iter();
    let mut layer = || LstmState {
        h: it.next().expect("four states"),
        c: it.next().expect("four states"),
    };
    let lstm = [layer(), layer()];
    Ok((
        tape.value(update).clone().reshape(adam_dir.shape().to_vec())?,
        CoordState {
            m: state.m.clone(),
            v: state.v.clone(),
            step: state.step,
            lstm,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learned::{ndim_one_hot, policy_step_value};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn first_step_features_are_unit() {
        let (a, r, s) = rnnprop_features(&Tensor::vector(vec![1.0]), &CoordState::zeros(1)).unwrap();
        assert_abs_diff_eq!(a.item(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.item(), 1.0, epsilon = 1e-9);
        assert_eq!(s.step, 1);
        let (a, r, _) = rnnprop_features(&Tensor::vector(vec![0.0]), &CoordState::zeros(1)).unwrap();
        assert_eq!((a.item(), r.item()), (0.0, 0.0));
    }

    #[test]
    fn features_match_plain_ema() {
        let mut rng = seed::rng(11);
        let mut state = CoordState::zeros(4);
        let (mut m, mut v) = ([0.0f64; 4], [0.0f64; 4]);
        for t in 1..=20 {
            let g: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (a, r, next) = rnnprop_features(&Tensor::vector(g.clone()), &state).unwrap();
            for i in 0..4 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                let den = (vh + 1e-10).sqrt();
                assert_abs_diff_eq!(a.data()[i], mh / den, epsilon = 1e-12);
                assert_abs_diff_eq!(r.data()[i], g[i] / den, epsilon = 1e-12);
            }
            state = next;
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_update() {
        let policy = RnnProp::default();
        let mut params = policy.init_params(3);
        *params.get_mut("out.w").unwrap() = Tensor::zeros(&[HIDDEN, 1]);
        let state = CoordState::zeros(5);
        let g = Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 9.0]);
        let (a, r, state) = rnnprop_features(&g, &state).unwrap();
        let (u, _) = rnnprop_step(&params, &a, &r, &state).unwrap();
        assert!(u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn update_shape_follows_parameter_tensor() {
        let params = RnnProp::default().init_params(0);
        let g = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 - 6.0).collect()).unwrap();
        let state = CoordState::zeros(12);
        let (a, r, state) = rnnprop_features(&g, &state).unwrap();
        let (u, next) = rnnprop_step(&params, &a, &r, &state).unwrap();
        assert_eq!(u.shape(), &[3, 4]);
        assert_eq!(next.lstm[0].h.shape(), &[12, HIDDEN]);
        assert_eq!(next.lstm[1].c.shape(), &[12, HIDDEN]);
    }

    #[test]
    fn update_bounded_by_output_layer() {
        let policy = RnnProp { out_init: 0.5 };
        let params = policy.init_params(8);
        let bound = (params.get("out.w").unwrap().data().iter().map(|w| w.abs()).sum::<f64>()
            + params.get("out.b").unwrap().item().abs())
        .tanh();
        let mut rng = seed::rng(2);
        let mut state = CoordState::zeros(16);
        for _ in 0..10 {
            let g = Tensor::vector((0..16).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 100.0 * z }).collect());
            let (a, r, s) = rnnprop_features(&g, &state).unwrap();
            let (u, s) = rnnprop_step(&params, &a, &r, &s).unwrap();
            assert!(u.max_abs() <= bound);
            state = s;
        }
    }

    #[test]
    fn coordinate_permutation_equivariance() {
        let policy = RnnProp { out_init: 0.3 };
        let params = policy.init_params(1);
        let layout = ParamLayout::new([("w", vec![6])]);
        let onehot = ndim_one_hot(&layout).unwrap();
        let perm = [4, 0, 5, 2, 1, 3];
        let permute = |t: &Tensor| -> Tensor {
            let cols = t.numel() / 6;
            let data = perm.iter().flat_map(|&p| t.data()[p * cols..(p + 1) * cols].to_vec()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let mut rng = seed::rng(6);
        let mut s = policy.initial_state(&layout);
        let mut sp = s.clone();
        for step in 1..=4 {
            let g = Tensor::vector((0..6).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect());
            let ctx = StepContext {
                step,
                ndim_one_hot: &onehot,
            };
            let (u, ns, _) = policy_step_value(&policy, &params, &g, &s, &ctx).unwrap();
            let (up, nsp, _) = policy_step_value(&policy, &params, &permute(&g), &sp, &ctx).unwrap();
            assert_eq!(permute(&u), up);
            for (a, b) in ns.iter().zip(&nsp) {
                assert_eq!(&permute(a), b);
            }
            s = ns;
            sp = nsp;
        }
    }
}
