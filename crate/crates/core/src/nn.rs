//! Layer building blocks shared by the PointConv operator and the networks.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform in `±scale`.
    Uniform(f64),
    Zeros,
}

pub fn init_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Glorot => {
            let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::of(rng.random_range(-a..a)))
        }
        Init::Uniform(a) => Tensor::from_fn(shape, |_| T::of(rng.random_range(-a..=a))),
    }
}

struct StatUpdate<T> {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

/// Per-forward context: parameter source, mode, pending BN statistics and
/// the dropout RNG.
pub struct Ctx<'s, T> {
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    updates: RefCell<Vec<StatUpdate<T>>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Ctx { store, mode, updates: RefCell::new(Vec::new()), rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Ctx::new(store, Mode::Eval, 0)
    }

    pub fn param<'t>(&self, tape: &'t Tape<T>, id: ParamId) -> Var<'t, T> {
        tape.param(self.store, id)
    }

    /// Batch statistics gathered during a train-mode forward; releases the
    /// borrow of the store so they can be committed.
    pub fn take_stats(self) -> BnStats<T> {
        BnStats(self.updates.into_inner())
    }
}

/// Pending running-statistics updates from one train-mode forward.
pub struct BnStats<T>(Vec<StatUpdate<T>>);

impl<T: Scalar> BnStats<T> {
    pub fn commit(self, store: &mut ParamStore<T>) {
        let m = T::of(BN_MOMENTUM);
        for u in self.0 {
            for (id, batch) in [(u.mean, u.batch_mean), (u.var, u.batch_var)] {
                let run = &mut store.get_mut(id).value;
                for (r, b) in run.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
    }
}

/// Equal-weight average of the batch statistics of several train-mode
/// forwards over the same network.
#[derive(Debug, Default)]
pub struct BnAverage {
    sums: Vec<(ParamId, Vec<f64>)>,
    batches: usize,
}

impl BnAverage {
    pub fn add<T: Scalar>(&mut self, stats: BnStats<T>) {
        let flat = stats.0.into_iter().flat_map(|u| [(u.mean, u.batch_mean), (u.var, u.batch_var)]);
        if self.batches == 0 {
            self.sums = flat.map(|(id, v)| (id, v.iter().map(|x| x.f64()).collect())).collect();
        } else {
            for ((id, sum), (bid, v)) in self.sums.iter_mut().zip(flat) {
                debug_assert_eq!(*id, bid);
                sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x.f64());
            }
        }
        self.batches += 1;
    }

    /// Overwrite the running statistics with the averages.
    pub fn commit<T: Scalar>(self, store: &mut ParamStore<T>) {
        if self.batches == 0 {
            return;
        }
        let n = self.batches as f64;
        for (id, sum) in self.sums {
            for (r, s) in store.get_mut(id).value.data_mut().iter_mut().zip(sum) {
                *r = T::of(s / n);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor(&[d_in, d_out], init, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Dense { weight, bias, d_in, d_out }
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, ctx: &Ctx<'_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(tape, self.weight);
        let b = self.bias.map(|b| ctx.param(tape, b));
        x.linear(w, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// Per-channel batch normalization over all leading axes.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, ctx: &Ctx<'_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = *x.shape().last().expect("rank >= 1");
        if c != self.channels {
            return Err(Error::ShapeMismatch { op: "batch_norm", lhs: x.shape(), rhs: vec![self.channels] });
        }
        let gamma = ctx.param(tape, self.gamma);
        let beta = ctx.param(tape, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = tape.batch_norm_train(x, gamma, beta)?;
                ctx.updates.borrow_mut().push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.value(self.running_mean).data();
                let var = ctx.store.value(self.running_var).data();
                tape.batch_norm_eval(x, gamma, beta, mean, var)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Linear -> [BN] -> ReLU stack.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Dense, Option<BatchNorm>)>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        widths: &[usize],
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = d_in;
        for (i, &w) in widths.iter().enumerate() {
            let dense = Dense::new(store, &format!("{name}.{i}"), d, w, true, Init::Glorot, rng);
            let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.{i}.bn"), w));
            layers.push((dense, bn));
            d = w;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|(d, _)| d.d_out)
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, ctx: &Ctx<'_, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (dense, bn) in &self.layers {
            x = dense.forward(tape, ctx, x)?;
            if let Some(bn) = bn {
                x = bn.forward(tape, ctx, x)?;
            }
            x = x.relu();
        }
        Ok(x)
    }
}

/// Inverted dropout with keep-probability `1 - p`; identity in eval mode.
pub fn dropout<'t, T: Scalar>(tape: &'t Tape<T>, ctx: &Ctx<'_, T>, x: Var<'t, T>, p: f64) -> Result<Var<'t, T>> {
    if ctx.mode == Mode::Eval || p <= 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = T::of(1.0 / (1.0 - p));
    let mut rng = ctx.rng.borrow_mut();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() >= p { keep } else { T::zero() });
    x.mul(tape.constant(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_before_train_uses_initial_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, -4.0]).unwrap());
        let y = bn.forward(&tape, &ctx, x).unwrap();
        let y = y.value().to_f64_vec();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - 3.0 * s).abs() < 1e-12 && (y[1] + 4.0 * s).abs() < 1e-12);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&store, Mode::Train, 0);
        let x = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap());
        bn.forward(&tape, &ctx, x).unwrap();
        ctx.take_stats().commit(&mut store);
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(bn.forward(&tape, &ctx, x).is_err());
    }
}
