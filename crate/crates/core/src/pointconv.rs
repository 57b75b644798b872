//! The PointConv operator.
//!
//! For one local region with `K` neighbors, PointConv computes
//!
//! ```text
//! F_out[o] = sum_k sum_c S[k] * W[k, c, o] * F_in[k, c]
//! ```
//!
//! where `W = H(M)` is produced by a shared MLP of the local coordinates:
//! `M` is the last hidden activation (`K x C_mid`) and `H` the final linear
//! layer (`C_mid -> C_in * C_out`). `S` is a learned transform of inverse
//! density.
//!
//! Two evaluation routes are provided. [`PointConvLayer::forward_naive`]
//! materializes `W` for every region. [`PointConvLayer::forward_efficient`]
//! contracts the neighbor axis first, `G = M^T (S * F_in)` (`C_mid x C_in`
//! per region), and then applies `H` as a single `(C_mid * C_in) -> C_out`
//! linear map, so the per-region `K x C_in x C_out` filter never exists.
//! The bias of `H` is folded in as `(sum_k S * F_in) @ b`.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Dense, Init};
use crate::params::ParamStore;
use crate::point_ops::Neighborhood;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the inverse-density scale `S` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    /// DensityNet MLP on the normalized inverse density.
    #[default]
    Mlp,
    /// `S = 1`.
    Disabled,
    /// `S` = normalized inverse density, untransformed.
    Raw,
}

impl fmt::Display for DensityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityMode::Mlp => "mlp",
            DensityMode::Disabled => "disabled",
            DensityMode::Raw => "raw",
        })
    }
}

/// Shape of one PointConv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConvConfig {
    pub dim: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    /// Neighborhood size; only used to scale the initialization of `H`.
    pub k: usize,
    /// Number of hidden WeightNet layers, each `C_mid` wide.
    #[serde(default = "default_weight_layers")]
    pub weight_layers: usize,
    #[serde(default)]
    pub weight_bn: bool,
    #[serde(default)]
    pub density: DensityMode,
}

fn default_weight_layers() -> usize {
    2
}

impl PointConvConfig {
    pub fn new(dim: usize, c_in: usize, c_mid: usize, c_out: usize, k: usize) -> Self {
        PointConvConfig { dim, c_in, c_mid, c_out, k, weight_layers: 2, weight_bn: false, density: DensityMode::Mlp }
    }

    pub fn with_density(mut self, density: DensityMode) -> Self {
        self.density = density;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 || self.k == 0 {
            return Err(Error::Config(format!("PointConv extents must be positive: {self:?}")));
        }
        if self.weight_layers == 0 {
            return Err(Error::Config("WeightNet needs at least one hidden layer".into()));
        }
        Ok(())
    }
}

/// Hidden widths of the DensityNet.
pub const DENSITY_HIDDEN: [usize; 2] = [16, 8];

#[derive(Clone, Debug)]
pub struct WeightNet {
    pub hidden: Vec<(Dense, Option<BatchNorm>)>,
    /// Final linear layer `C_mid -> C_in * C_out`, output index `c_in * C_out + c_out`.
    pub h: Dense,
}

#[derive(Clone, Debug)]
pub struct DensityNet {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct PointConvLayer {
    pub config: PointConvConfig,
    pub weight_net: WeightNet,
    pub density_net: Option<DensityNet>,
}

/// Constant region inputs prepared for the tape.
pub struct RegionInputs<'t, T> {
    /// `[R, K, dim]`
    pub local_coords: Var<'t, T>,
    /// `[R, K, C_in]`
    pub features: Var<'t, T>,
    /// `[R, K]`; may be absent when density is disabled.
    pub inverse_density: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> RegionInputs<'t, T> {
    /// Lift a [`Neighborhood`] onto the tape as constants.
    pub fn from_neighborhood(tape: &'t Tape<T>, n: &Neighborhood<T>) -> Result<Self> {
        let r = n.regions();
        Ok(RegionInputs {
            local_coords: tape.constant(Tensor::new(vec![r, n.k, n.dim], n.local_coords.clone())?),
            features: tape.constant(Tensor::new(vec![r, n.k, n.channels], n.grouped_features.clone())?),
            inverse_density: match &n.grouped_inverse_density {
                Some(s) => Some(tape.constant(Tensor::new(vec![r, n.k], s.clone())?)),
                None => None,
            },
        })
    }
}

/// Element counts of per-region intermediate buffers created by a PointConv
/// contraction, excluding its inputs (`M`, `S`, `F_in`) and output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransientMeter {
    pub buffers: Vec<(&'static str, usize)>,
}

impl TransientMeter {
    pub fn record(&mut self, label: &'static str, elements: usize) {
        self.buffers.push((label, elements));
    }

    /// Total of all recorded buffers: the peak if they were all live at once.
    pub fn peak(&self) -> usize {
        self.buffers.iter().map(|b| b.1).sum()
    }

    /// The largest single buffer.
    pub fn dominant(&self) -> (&'static str, usize) {
        self.buffers.iter().copied().max_by_key(|b| b.1).unwrap_or(("none", 0))
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.buffers.iter().find(|b| b.0 == label).map(|b| b.1)
    }
}

fn record(meter: &mut Option<&mut TransientMeter>, label: &'static str, v: usize) {
    if let Some(m) = meter.as_deref_mut() {
        m.record(label, v);
    }
}

impl PointConvLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: PointConvConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.weight_layers);
        let mut d = config.dim;
        for i in 0..config.weight_layers {
            let dense = Dense::new(store, &format!("{name}.weightnet.{i}"), d, config.c_mid, true, Init::Glorot, rng);
            let bn = config.weight_bn.then(|| BatchNorm::new(store, &format!("{name}.weightnet.{i}.bn"), config.c_mid));
            hidden.push((dense, bn));
            d = config.c_mid;
        }
        let h_scale = 1.0 / ((config.c_mid * config.k) as f64).sqrt();
        let h = Dense::new(
            store,
            &format!("{name}.weightnet.h"),
            config.c_mid,
            config.c_in * config.c_out,
            true,
            Init::Uniform(h_scale),
            rng,
        );
        let density_net = (config.density == DensityMode::Mlp).then(|| {
            let mut layers = Vec::new();
            let mut d = 1;
            for (i, &w) in DENSITY_HIDDEN.iter().chain(&[1]).enumerate() {
                layers.push(Dense::new(store, &format!("{name}.densitynet.{i}"), d, w, true, Init::Glorot, rng));
                d = w;
            }
            DensityNet { layers }
        });
        Ok(PointConvLayer { config, weight_net: WeightNet { hidden, h }, density_net })
    }

    /// Number of trainable scalars, from the layer shape alone.
    pub fn param_count(config: &PointConvConfig) -> usize {
        let (d, m) = (config.dim, config.c_mid);
        let mut n = d * m + m + (config.weight_layers - 1) * (m * m + m);
        if config.weight_bn {
            n += config.weight_layers * 2 * m;
        }
        n += m * config.c_in * config.c_out + config.c_in * config.c_out;
        if config.density == DensityMode::Mlp {
            n += (16 + 16) + (16 * 8 + 8) + (8 + 1);
        }
        n
    }

    /// `M`: the last hidden WeightNet activation, `[.., C_mid]`.
    pub fn weight_net_hidden<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        local_coords: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = local_coords.shape();
        if shape.last() != Some(&self.config.dim) {
            return Err(Error::ShapeMismatch { op: "weight_net_hidden", lhs: shape, rhs: vec![self.config.dim] });
        }
        let mut x = local_coords;
        for (dense, bn) in &self.weight_net.hidden {
            x = dense.forward(tape, ctx, x)?;
            if let Some(bn) = bn {
                x = bn.forward(tape, ctx, x)?;
            }
            x = x.relu();
        }
        Ok(x)
    }

    /// `S` for every neighbor, `[R, K]`.
    pub fn density_scale<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        inverse_density: Option<Var<'t, T>>,
        regions: usize,
        k: usize,
    ) -> Result<Var<'t, T>> {
        match self.config.density {
            DensityMode::Disabled => Ok(tape.constant(Tensor::ones(&[regions, k]))),
            DensityMode::Raw => inverse_density.ok_or(Error::MissingDensity),
            DensityMode::Mlp => {
                let s = inverse_density.ok_or(Error::MissingDensity)?;
                let net = self.density_net.as_ref().expect("mlp mode builds a DensityNet");
                let mut x = s.reshape(&[regions * k, 1])?;
                let last = net.layers.len() - 1;
                for (i, dense) in net.layers.iter().enumerate() {
                    x = dense.forward(tape, ctx, x)?;
                    x = if i < last { x.relu() } else { x.sigmoid() };
                }
                x.reshape(&[regions, k])
            }
        }
    }

    fn check_inputs<T: Scalar>(&self, input: &RegionInputs<'_, T>) -> Result<(usize, usize)> {
        let fs = input.features.shape();
        let ls = input.local_coords.shape();
        if fs.len() != 3 || fs[2] != self.config.c_in {
            return Err(Error::ShapeMismatch { op: "pointconv features", lhs: fs, rhs: vec![self.config.c_in] });
        }
        if ls.len() != 3 || ls[0] != fs[0] || ls[1] != fs[1] || ls[2] != self.config.dim {
            return Err(Error::ShapeMismatch { op: "pointconv local_coords", lhs: ls, rhs: fs });
        }
        Ok((fs[0], fs[1]))
    }

    /// `S * F_in`, `[R, K, C_in]`.
    fn scaled_features<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        input: &RegionInputs<'t, T>,
        regions: usize,
        k: usize,
    ) -> Result<Var<'t, T>> {
        if self.config.density == DensityMode::Disabled {
            return Ok(input.features);
        }
        let s = self.density_scale(tape, ctx, input.inverse_density, regions, k)?;
        s.reshape(&[regions, k, 1])?.mul(input.features)
    }

    /// Reference route: materializes `W` for every region. Output `[R, C_out]`.
    pub fn forward_naive<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        input: &RegionInputs<'t, T>,
        mut meter: Option<&mut TransientMeter>,
    ) -> Result<Var<'t, T>> {
        let (r, k) = self.check_inputs(input)?;
        let (c_in, c_out) = (self.config.c_in, self.config.c_out);
        let m = self.weight_net_hidden(tape, ctx, input.local_coords)?;
        let w = self.weight_net.h.forward(tape, ctx, m)?;
        record(&mut meter, "W", r * k * c_in * c_out);
        let f = self.scaled_features(tape, ctx, input, r, k)?;
        if self.config.density != DensityMode::Disabled {
            record(&mut meter, "S*F", r * k * c_in);
        }
        let f = f.reshape(&[r, 1, k * c_in])?;
        let w = w.reshape(&[r, k * c_in, c_out])?;
        f.matmul(w)?.reshape(&[r, c_out])
    }

    /// Reordered route: contracts over neighbors before applying `H`.
    /// Output `[R, C_out]`, equal to [`forward_naive`](Self::forward_naive)
    /// in exact arithmetic.
    pub fn forward_efficient<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        input: &RegionInputs<'t, T>,
        mut meter: Option<&mut TransientMeter>,
    ) -> Result<Var<'t, T>> {
        let (r, k) = self.check_inputs(input)?;
        let (c_in, c_mid, c_out) = (self.config.c_in, self.config.c_mid, self.config.c_out);
        let m = self.weight_net_hidden(tape, ctx, input.local_coords)?;
        let f = self.scaled_features(tape, ctx, input, r, k)?;
        if self.config.density != DensityMode::Disabled {
            record(&mut meter, "S*F", r * k * c_in);
        }
        // G[r, m, c] = sum_k M[r, k, m] * F~[r, k, c]
        let g = m.matmul_t(f, true, false)?;
        record(&mut meter, "M^T F", r * c_mid * c_in);
        let g = g.reshape(&[r, c_mid * c_in])?;
        let h = ctx.param(tape, self.weight_net.h.weight).reshape(&[c_mid * c_in, c_out])?;
        let mut out = g.linear(h, None)?;
        if let Some(b) = self.weight_net.h.bias {
            let fsum = f.sum(1)?;
            record(&mut meter, "sum_k F~", r * c_in);
            let b = ctx.param(tape, b).reshape(&[c_in, c_out])?;
            out = out.add(fsum.linear(b, None)?)?;
        }
        Ok(out)
    }

    /// The filter `W(delta)` at each of the given local offsets (row-major
    /// `[n, dim]`), eval mode. Shape `[n, C_in * C_out]`, `c_in`-major.
    pub fn weights_at<T: Scalar>(&self, store: &ParamStore<T>, offsets: &[T]) -> Result<Tensor<T>> {
        let dim = self.config.dim;
        if offsets.is_empty() || !offsets.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!("{} coordinates for {dim}-d offsets", offsets.len())));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(store);
        let local = tape.constant(Tensor::new(vec![offsets.len() / dim, dim], offsets.to_vec())?);
        let m = self.weight_net_hidden(&tape, &ctx, local)?;
        let w = self.weight_net.h.forward(&tape, &ctx, m)?;
        let out = w.value().clone();
        Ok(out)
    }

    /// Evaluate the learned weight function on a `side x side` grid spanning
    /// `[-extent, extent]^2` in the plane `coord[axis] = offset` (for 2-D
    /// layers the plane is the layer's own space). Returns one row-major
    /// image per `(c_in, c_out)` pair, in `c_in`-major order.
    pub fn sample_weight_function<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        plane: Plane,
        side: usize,
        extent: f64,
    ) -> Result<Vec<Vec<f64>>> {
        if side == 0 {
            return Err(Error::invalid("grid side must be positive"));
        }
        let dim = self.config.dim;
        let free: Vec<usize> = if dim == 2 { vec![0, 1] } else { (0..dim).filter(|&a| a != plane.axis).take(2).collect() };
        let mut coords = Vec::with_capacity(side * side * dim);
        for row in 0..side {
            for col in 0..side {
                let mut p = vec![T::zero(); dim];
                if dim > 2 {
                    p[plane.axis] = T::of(plane.offset);
                }
                p[free[0]] = T::of(grid_coord(col, side, extent));
                p[free[1]] = T::of(-grid_coord(row, side, extent));
                coords.extend(p);
            }
        }
        let w = self.weights_at(store, &coords)?;
        let pairs = self.config.c_in * self.config.c_out;
        let mut images = vec![Vec::with_capacity(side * side); pairs];
        for px in w.data().chunks_exact(pairs) {
            for (img, &v) in images.iter_mut().zip(px) {
                img.push(v.f64());
            }
        }
        Ok(images)
    }
}

fn grid_coord(i: usize, side: usize, extent: f64) -> f64 {
    if side == 1 {
        0.0
    } else {
        -extent + 2.0 * extent * i as f64 / (side - 1) as f64
    }
}

/// Slicing plane for weight-function images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub axis: usize,
    pub offset: f64,
}

impl Plane {
    /// The `z = 0` plane.
    pub const Z0: Plane = Plane { axis: 2, offset: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Pgm,
    Csv,
}

/// Write one weight-function image as `wfn_{layer}_{cin}_{cout}.{pgm,csv}`.
///
/// PGM output is binary 16-bit (big-endian samples), linearly mapped from
/// the image's own min/max; a constant image maps to mid-gray.
pub fn write_weight_image(
    dir: &Path,
    layer: &str,
    cin: usize,
    cout: usize,
    side: usize,
    values: &[f64],
    format: ImageFormat,
) -> Result<PathBuf> {
    let ext = match format {
        ImageFormat::Pgm => "pgm",
        ImageFormat::Csv => "csv",
    };
    let path = dir.join(format!("wfn_{layer}_{cin}_{cout}.{ext}"));
    let mut buf = Vec::new();
    match format {
        ImageFormat::Pgm => {
            write!(buf, "P5\n{side} {side}\n65535\n").expect("vec write");
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in values {
                let q = if hi > lo { ((v - lo) / (hi - lo) * 65535.0).round() as u16 } else { 32768 };
                buf.extend_from_slice(&q.to_be_bytes());
            }
        }
        ImageFormat::Csv => {
            for row in values.chunks(side) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
                writeln!(buf, "{}", line.join(",")).expect("vec write");
            }
        }
    }
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c_in: usize, c_mid: usize, c_out: usize, density: DensityMode) -> (ParamStore<f64>, PointConvLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = PointConvConfig::new(3, c_in, c_mid, c_out, 2).with_density(density);
        let l = PointConvLayer::new(&mut store, "pc", cfg, &mut rng).unwrap();
        (store, l)
    }

    fn set(store: &mut ParamStore<f64>, id: crate::params::ParamId, v: &[f64]) {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::from_f64(&shape, v).unwrap();
    }

    #[test]
    fn density_modes() {
        let tape = Tape::new();
        let inv = tape.constant(Tensor::from_f64(&[1, 3], &[0.2, 0.5, 1.0]).unwrap());
        let (store, l) = layer(1, 1, 1, DensityMode::Disabled);
        let ctx = Ctx::eval(&store);
        assert_eq!(l.density_scale(&tape, &ctx, Some(inv), 1, 3).unwrap().value().data(), &[1.0; 3]);
        let (store, l) = layer(1, 1, 1, DensityMode::Raw);
        let ctx = Ctx::eval(&store);
        assert_eq!(l.density_scale(&tape, &ctx, Some(inv), 1, 3).unwrap().value().data(), &[0.2, 0.5, 1.0]);
        let (mut store, l) = layer(1, 1, 1, DensityMode::Mlp);
        for dense in &l.density_net.as_ref().unwrap().layers {
            let n = store.value(dense.weight).len();
            set(&mut store, dense.weight, &vec![0.0; n]);
        }
        let ctx = Ctx::eval(&store);
        assert_eq!(l.density_scale(&tape, &ctx, Some(inv), 1, 3).unwrap().value().data(), &[0.5; 3]);
    }

    /// Force M and H so that W is a chosen scalar per neighbor.
    fn scalar_chain(k: usize, m_vals: &[f64], h: f64, s: &[f64], f: &[f64]) -> (f64, f64) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = PointConvConfig::new(1, 1, 1, 1, k).with_density(DensityMode::Raw);
        cfg.weight_layers = 1;
        let l = PointConvLayer::new(&mut store, "pc", cfg, &mut rng).unwrap();
        // hidden: relu(1 * x + 0) with x = the wanted M value
        let (dense, _) = &l.weight_net.hidden[0];
        set(&mut store, dense.weight, &[1.0]);
        set(&mut store, l.weight_net.h.weight, &[h]);
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let input = RegionInputs {
            local_coords: tape.constant(Tensor::from_f64(&[1, k, 1], m_vals).unwrap()),
            features: tape.constant(Tensor::from_f64(&[1, k, 1], f).unwrap()),
            inverse_density: Some(tape.constant(Tensor::from_f64(&[1, k], s).unwrap())),
        };
        let a = l.forward_naive(&tape, &ctx, &input, None).unwrap().value().item();
        let b = l.forward_efficient(&tape, &ctx, &input, None).unwrap().value().item();
        (a, b)
    }

    #[test]
    fn scalar_chain_is_thirty() {
        assert_eq!(scalar_chain(1, &[2.0], 3.0, &[1.0], &[5.0]), (30.0, 30.0));
    }

    #[test]
    fn two_neighbor_hand_arithmetic() {
        // W = [2, 3] via M = [2, 3], H = 1
        let (a, b) = scalar_chain(2, &[2.0, 3.0], 1.0, &[0.5, 1.0], &[4.0, 2.0]);
        assert_eq!(a, 10.0);
        assert_eq!(b, 10.0);
    }

    #[test]
    fn identical_coords_give_identical_rows() {
        let (store, l) = layer(2, 4, 3, DensityMode::Disabled);
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]).unwrap());
        let m = l.weight_net_hidden(&tape, &ctx, x).unwrap();
        let v = m.value();
        assert_eq!(&v.data()[..4], &v.data()[4..]);
    }

    #[test]
    fn zero_weights_leave_bias_pattern() {
        let (mut store, l) = layer(1, 3, 1, DensityMode::Disabled);
        for (dense, _) in &l.weight_net.hidden {
            let n = store.value(dense.weight).len();
            set(&mut store, dense.weight, &vec![0.0; n]);
            let bias = dense.bias.unwrap();
            set(&mut store, bias, &[0.5, 0.0, 2.0]);
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.4, 0.1, -0.9, 3.0, 2.0, 1.0]).unwrap());
        let m = l.weight_net_hidden(&tape, &ctx, x).unwrap();
        assert_eq!(m.value().data(), &[0.5, 0.0, 2.0, 0.5, 0.0, 2.0]);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let (store, l) = layer(2, 2, 2, DensityMode::Disabled);
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let input = RegionInputs {
            local_coords: tape.constant(Tensor::zeros(&[1, 2, 3])),
            features: tape.constant(Tensor::zeros(&[1, 2, 3])),
            inverse_density: None,
        };
        assert!(l.forward_naive(&tape, &ctx, &input, None).is_err());
        assert!(l.forward_efficient(&tape, &ctx, &input, None).is_err());
    }

    #[test]
    fn zero_final_layer_gives_constant_images() {
        let (mut store, l) = layer(2, 3, 2, DensityMode::Disabled);
        let h = l.weight_net.h.weight;
        let n = store.value(h).len();
        set(&mut store, h, &vec![0.0; n]);
        set(&mut store, l.weight_net.h.bias.unwrap(), &[0.1, 0.2, 0.3, 0.4]);
        let imgs = l.sample_weight_function(&store, Plane::Z0, 5, 1.0).unwrap();
        assert_eq!(imgs.len(), 4);
        for (img, want) in imgs.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert_eq!(img.len(), 25);
            assert!(img.iter().all(|&v| v == want));
        }
    }

    #[test]
    fn param_count_formula() {
        for density in [DensityMode::Mlp, DensityMode::Disabled] {
            let (store, l) = layer(3, 5, 4, density);
            assert_eq!(store.num_trainable(), PointConvLayer::param_count(&l.config));
        }
    }
}
