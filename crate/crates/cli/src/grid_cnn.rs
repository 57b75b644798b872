//! Image CNN baseline with the same channel structure as
//! [`image_network`](crate::config::image_network), built from the tensor
//! engine's row gather (im2col) and dense layers.

use std::path::Path;
use std::rc::Rc;

use pointconv::network::{SamplingPolicy, Task};
use pointconv::nn::{dropout, BatchNorm, Ctx, Dense, Init, Mlp};
use pointconv::training::Model;
use pointconv::{Error, ParamStore, PointCloud, Result, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 3x3, stride 2, zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub dense: Dense,
    pub bn: BatchNorm,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// Input rows are `[B * side * side, C]` in row-major pixel order.
    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        x: Var<'t, T>,
        batch: usize,
        side: usize,
    ) -> Result<(Var<'t, T>, usize)> {
        let out_side = side.div_ceil(self.stride);
        let pad = (self.kernel / 2) as i64;
        let taps = self.kernel * self.kernel;
        let mut index = Vec::with_capacity(batch * out_side * out_side * taps);
        let mut weight = Vec::with_capacity(index.capacity());
        for b in 0..batch {
            for r in 0..out_side {
                for c in 0..out_side {
                    for dr in 0..self.kernel as i64 {
                        for dc in 0..self.kernel as i64 {
                            let (sr, sc) = ((r * self.stride) as i64 + dr - pad, (c * self.stride) as i64 + dc - pad);
                            let inside = (0..side as i64).contains(&sr) && (0..side as i64).contains(&sc);
                            index.push(if inside { b * side * side + (sr as usize) * side + sc as usize } else { 0 });
                            weight.push(if inside { T::one() } else { T::zero() });
                        }
                    }
                }
            }
        }
        let c_in = *x.shape().last().expect("rank 2");
        let rows = batch * out_side * out_side;
        let cols = tape.gather_rows(x, Rc::from(index), Some(Rc::from(weight)))?.reshape(&[rows, taps * c_in])?;
        let y = self.dense.forward(tape, ctx, cols)?;
        Ok((self.bn.forward(tape, ctx, y)?.relu(), out_side))
    }
}

#[derive(Clone, Debug)]
pub struct GridCnn<T> {
    pub store: ParamStore<T>,
    pub side: usize,
    pub channels: usize,
    pub pre: Mlp,
    pub convs: Vec<Conv>,
    pub hidden: Vec<(Dense, BatchNorm)>,
    pub out: Dense,
    pub dropout: f64,
    pub classes: usize,
}

impl<T: Scalar> GridCnn<T> {
    /// `pre` per-pixel widths, then one stride-2 conv per entry of
    /// `conv_channels`, mean pool, `hidden` FC widths, `classes` logits.
    pub fn new(
        side: usize,
        channels: usize,
        pre: &[usize],
        conv_channels: &[usize],
        hidden: &[usize],
        classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pre_mlp = Mlp::new(&mut store, "pre", channels, pre, true, &mut rng);
        let mut c = pre_mlp.out_dim().unwrap_or(channels);
        let mut convs = Vec::new();
        for (i, &w) in conv_channels.iter().enumerate() {
            let dense = Dense::new(&mut store, &format!("conv{i}"), 9 * c, w, true, Init::Glorot, &mut rng);
            let bn = BatchNorm::new(&mut store, &format!("conv{i}.bn"), w);
            convs.push(Conv { dense, bn, kernel: 3, stride: 2 });
            c = w;
        }
        let mut fcs = Vec::new();
        for (i, &w) in hidden.iter().enumerate() {
            let dense = Dense::new(&mut store, &format!("fc{i}"), c, w, true, Init::Glorot, &mut rng);
            let bn = BatchNorm::new(&mut store, &format!("fc{i}.bn"), w);
            fcs.push((dense, bn));
            c = w;
        }
        let out = Dense::new(&mut store, "fc.out", c, classes, true, Init::Glorot, &mut rng);
        GridCnn { store, side, channels, pre: pre_mlp, convs, hidden: fcs, out, dropout: 0.0, classes }
    }

    /// The baseline matching [`image_network`](crate::config::image_network).
    pub fn image_baseline(classes: usize, seed: u64) -> Self {
        GridCnn::new(pointconv::data::BAR_SIDE, 1, &[16], &[32, 64], &[32], classes, seed)
    }
}

impl<T: Scalar> Model<T> for GridCnn<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn task(&self) -> Task {
        Task::Classify
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn min_batch(&self) -> usize {
        2
    }

    /// Clouds must come from images: `side^2` points in row-major pixel
    /// order. Positions are ignored.
    fn logits<'t>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        clouds: &[&PointCloud<T>],
        _policy: SamplingPolicy,
    ) -> Result<Var<'t, T>> {
        let px = self.side * self.side;
        let mut feats = Vec::with_capacity(clouds.len() * px * self.channels);
        for c in clouds {
            if c.len() != px || c.channels != self.channels {
                return Err(Error::Config(format!(
                    "grid CNN expects {px} pixels x {} channels, got {} x {}",
                    self.channels,
                    c.len(),
                    c.channels
                )));
            }
            feats.extend_from_slice(&c.features);
        }
        let b = clouds.len();
        let mut x = tape.constant(Tensor::new(vec![b * px, self.channels], feats)?);
        x = self.pre.forward(tape, ctx, x)?;
        let mut side = self.side;
        for conv in &self.convs {
            let (y, s) = conv.forward(tape, ctx, x, b, side)?;
            x = y;
            side = s;
        }
        let c = *x.shape().last().expect("rank 2");
        x = x.reshape(&[b, side * side, c])?.mean(1)?;
        for (dense, bn) in &self.hidden {
            x = bn.forward(tape, ctx, dense.forward(tape, ctx, x)?)?.relu();
        }
        let x = dropout(tape, ctx, x, self.dropout)?;
        self.out.forward(tape, ctx, x)
    }

    fn save(&self, path: &Path) -> Result<()> {
        Err(Error::invalid(format!("grid CNN has no checkpoint format ({})", path.display())))
    }
}
