//! Hierarchical PointConv networks: feature-encoding levels, PointDeconv
//! feature propagation, classification / segmentation heads, and the
//! checkpoint format.
//!
//! Level 0 is the input cloud. Encoder `i` reads level `i` and writes level
//! `i + 1`. Propagator `j` climbs back from the coarsest level to level
//! `L - 1 - j`, so after the last propagator features are at input
//! resolution again.

use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, Ctx, Dense, Init, Mlp};
use crate::params::ParamStore;
use crate::point_ops::{
    farthest_point_sample_raw, inverse_density, kde_density_raw, knn_indices_raw, local_coordinates, three_nn_weights, FpsStart,
    PointCloud, DEFAULT_BANDWIDTH, INVERSE_DENSITY_EPS,
};
use crate::pointconv::{DensityMode, PointConvConfig, PointConvLayer, RegionInputs};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Segment,
}

fn default_weight_layers() -> usize {
    2
}

/// One feature-encoding level: sample, group, PointConv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSpec {
    pub n_out: usize,
    pub k: usize,
    /// Per-point MLP applied to the level's features before grouping.
    #[serde(default)]
    pub mlp_channels: Vec<usize>,
    pub c_mid: usize,
    pub c_out: usize,
    #[serde(default)]
    pub density: DensityMode,
    #[serde(default = "default_weight_layers")]
    pub weight_layers: usize,
}

/// One PointDeconv level: interpolate, concatenate skip, PointConv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationSpec {
    pub skip_level: usize,
    pub k: usize,
    pub c_mid: usize,
    pub c_out: usize,
    #[serde(default)]
    pub density: DensityMode,
    #[serde(default = "default_weight_layers")]
    pub weight_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Hidden fully-connected widths.
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Dropout before the final linear layer.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub task: Task,
    pub input_dim: usize,
    pub input_channels: usize,
    pub encoders: Vec<EncodingSpec>,
    #[serde(default)]
    pub propagators: Vec<PropagationSpec>,
    pub head: HeadSpec,
    /// KDE bandwidth used at every level.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub weight_bn: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    /// Desk-scale classification network.
    pub fn classification_default(input_channels: usize, classes: usize) -> Self {
        let enc = |n_out, c_out, mlp: Vec<usize>| EncodingSpec {
            n_out,
            k: 16,
            mlp_channels: mlp,
            c_mid: 8,
            c_out,
            density: DensityMode::Mlp,
            weight_layers: 2,
        };
        NetworkConfig {
            task: Task::Classify,
            input_dim: 3,
            input_channels,
            encoders: vec![enc(256, 64, vec![32]), enc(64, 128, vec![]), enc(16, 256, vec![])],
            propagators: vec![],
            head: HeadSpec { hidden: vec![128], classes, dropout: 0.4, batch_norm: true },
            bandwidth: DEFAULT_BANDWIDTH,
            weight_bn: false,
            seed: 0,
        }
    }

    /// Desk-scale 3-level U-shaped segmentation network.
    pub fn segmentation_default(input_channels: usize, classes: usize) -> Self {
        let mut cfg = NetworkConfig::classification_default(input_channels, classes);
        cfg.task = Task::Segment;
        cfg.propagators = [(2, 128), (1, 64), (0, 64)]
            .into_iter()
            .map(|(skip_level, c_out)| PropagationSpec {
                skip_level,
                k: 16,
                c_mid: 8,
                c_out,
                density: DensityMode::Mlp,
                weight_layers: 2,
            })
            .collect();
        cfg.head = HeadSpec { hidden: vec![64], classes, dropout: 0.0, batch_norm: true };
        cfg
    }

    /// Set the density mode of every PointConv layer.
    pub fn with_density(mut self, density: DensityMode) -> Self {
        self.encoders.iter_mut().for_each(|e| e.density = density);
        self.propagators.iter_mut().for_each(|p| p.density = density);
        self
    }

    /// Set `C_mid` of every PointConv layer.
    pub fn with_c_mid(mut self, c_mid: usize) -> Self {
        self.encoders.iter_mut().for_each(|e| e.c_mid = c_mid);
        self.propagators.iter_mut().for_each(|p| p.c_mid = c_mid);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.input_dim == 2 || self.input_dim == 3) {
            return bad(format!("input_dim must be 2 or 3, got {}", self.input_dim));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.encoders.is_empty() {
            return bad("at least one encoder is required".into());
        }
        if self.head.classes == 0 {
            return bad("class count must be positive".into());
        }
        if !(self.bandwidth > 0.0) {
            return bad(format!("bandwidth must be positive, got {}", self.bandwidth));
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.head.dropout));
        }
        let mut prev = usize::MAX;
        for (i, e) in self.encoders.iter().enumerate() {
            if e.k == 0 || e.n_out == 0 || e.c_mid == 0 || e.c_out == 0 {
                return bad(format!("encoder {i} has a zero extent"));
            }
            if e.n_out > prev {
                return bad(format!("encoder {i} samples {} points from a level of {prev}", e.n_out));
            }
            prev = e.n_out;
        }
        match self.task {
            Task::Classify if !self.propagators.is_empty() => {
                return bad("classification networks take no propagators".into());
            }
            Task::Segment => {
                if self.propagators.len() != self.encoders.len() {
                    return bad(format!(
                        "segmentation needs one propagator per encoder ({} vs {})",
                        self.propagators.len(),
                        self.encoders.len()
                    ));
                }
                let levels = self.encoders.len();
                for (j, p) in self.propagators.iter().enumerate() {
                    if p.skip_level != levels - 1 - j {
                        return bad(format!(
                            "propagator {j} must target level {} to mirror the encoders, got {}",
                            levels - 1 - j,
                            p.skip_level
                        ));
                    }
                    if p.k == 0 || p.c_mid == 0 || p.c_out == 0 {
                        return bad(format!("propagator {j} has a zero extent"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Channel count of the features entering each encoder's PointConv
    /// (the "skip" features of each level), and the output of the last one.
    fn level_channels(&self) -> (Vec<usize>, usize) {
        let mut skip = Vec::new();
        let mut c = self.input_channels;
        for e in &self.encoders {
            if let Some(&w) = e.mlp_channels.last() {
                c = w;
            }
            skip.push(c);
            c = e.c_out;
        }
        (skip, c)
    }
}

/// Non-differentiable geometry of one encoding level for one cloud.
#[derive(Clone, Debug)]
pub struct LevelGeometry<T> {
    /// Indices into the level's points.
    pub centroids: Vec<usize>,
    pub k: usize,
    /// `N' x K` indices into the level's points.
    pub neighbors: Vec<usize>,
    pub local_coords: Vec<T>,
    pub inverse_density: Option<Vec<T>>,
}

/// Geometry of one propagation step for one cloud.
#[derive(Clone, Debug)]
pub struct PropGeometry<T> {
    /// `N_fine x 3` indices into the coarse level and their weights.
    pub interp_index: Vec<usize>,
    pub interp_weight: Vec<T>,
    /// Neighborhood at the fine level with every fine point as centroid.
    pub group: LevelGeometry<T>,
}

/// All geometry a forward pass needs for one cloud.
#[derive(Clone, Debug)]
pub struct CloudPlan<T> {
    pub dim: usize,
    /// Positions of every level, level 0 first.
    pub positions: Vec<Vec<T>>,
    pub encoders: Vec<LevelGeometry<T>>,
    pub propagators: Vec<PropGeometry<T>>,
}

impl<T: Scalar> CloudPlan<T> {
    pub fn level_size(&self, level: usize) -> usize {
        self.positions[level].len() / self.dim
    }
}

/// How FPS seeds each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingPolicy {
    Canonical,
    /// Random start per level, drawn from a generator seeded with this value.
    Random(u64),
}

fn normalized_inverse_density<T: Scalar>(positions: &[T], dim: usize, h: f64) -> Result<Vec<T>> {
    let d = kde_density_raw(positions, dim, T::of(h))?;
    Ok(inverse_density(&d, T::of(INVERSE_DENSITY_EPS)))
}

/// Group `k` neighbors around `centroids` within one point set.
pub fn group_level<T: Scalar>(
    positions: &[T],
    dim: usize,
    centroids: &[usize],
    k: usize,
    inv_density: Option<&[T]>,
) -> Result<LevelGeometry<T>> {
    let queries: Vec<T> = centroids.iter().flat_map(|&c| positions[c * dim..(c + 1) * dim].iter().copied()).collect();
    let neighbors = knn_indices_raw(&queries, positions, dim, k, Some(centroids))?;
    let local_coords = local_coordinates(positions, dim, centroids, &neighbors, k);
    let inverse_density = inv_density.map(|s| neighbors.iter().map(|&j| s[j]).collect());
    Ok(LevelGeometry { centroids: centroids.to_vec(), k, neighbors, local_coords, inverse_density })
}

/// Compute the full geometry plan of one cloud for `config`.
pub fn plan_cloud<T: Scalar>(config: &NetworkConfig, positions: &[T], policy: SamplingPolicy) -> Result<CloudPlan<T>> {
    let dim = config.input_dim;
    if positions.is_empty() || !positions.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!("{} coordinates for {dim}-d points", positions.len())));
    }
    let mut rng = match policy {
        SamplingPolicy::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        SamplingPolicy::Canonical => None,
    };
    let levels = config.encoders.len();
    // Density is needed at level l if the encoder reading it or the
    // propagator writing it uses density.
    let mut need_density = vec![false; levels + 1];
    for (i, e) in config.encoders.iter().enumerate() {
        need_density[i] |= e.density != DensityMode::Disabled;
    }
    for p in &config.propagators {
        need_density[p.skip_level] |= p.density != DensityMode::Disabled;
    }

    let mut level_pos = vec![positions.to_vec()];
    let mut densities: Vec<Option<Vec<T>>> = Vec::new();
    let mut encoders = Vec::with_capacity(levels);
    for (i, e) in config.encoders.iter().enumerate() {
        let pos = &level_pos[i];
        let n = pos.len() / dim;
        if e.n_out > n {
            return Err(Error::invalid(format!("encoder {i}: n_out={} exceeds {n} points", e.n_out)));
        }
        let inv = if need_density[i] { Some(normalized_inverse_density(pos, dim, config.bandwidth)?) } else { None };
        let start = match rng.as_mut() {
            Some(r) => FpsStart::Index(r.random_range(0..n)),
            None => FpsStart::Canonical,
        };
        let centroids = farthest_point_sample_raw(pos, dim, e.n_out, start)?;
        let geo = group_level(pos, dim, &centroids, e.k, inv.as_deref().filter(|_| e.density != DensityMode::Disabled))?;
        let next: Vec<T> = centroids.iter().flat_map(|&c| pos[c * dim..(c + 1) * dim].iter().copied()).collect();
        densities.push(inv);
        encoders.push(geo);
        level_pos.push(next);
    }
    densities.push(if need_density[levels] {
        Some(normalized_inverse_density(&level_pos[levels], dim, config.bandwidth)?)
    } else {
        None
    });

    let mut propagators = Vec::with_capacity(config.propagators.len());
    for p in &config.propagators {
        let fine = &level_pos[p.skip_level];
        let coarse = &level_pos[p.skip_level + 1];
        let (interp_index, interp_weight) = three_nn_weights(fine, coarse, dim)?;
        let all: Vec<usize> = (0..fine.len() / dim).collect();
        let inv = densities[p.skip_level].as_deref().filter(|_| p.density != DensityMode::Disabled);
        let group = group_level(fine, dim, &all, p.k, inv)?;
        propagators.push(PropGeometry { interp_index, interp_weight, group });
    }
    Ok(CloudPlan { dim, positions: level_pos, encoders, propagators })
}

/// Plans for a batch, computed in parallel on the current rayon pool.
pub fn plan_batch<T: Scalar>(
    config: &NetworkConfig,
    clouds: &[&PointCloud<T>],
    policy: SamplingPolicy,
) -> Result<Vec<CloudPlan<T>>> {
    clouds
        .par_iter()
        .enumerate()
        .map(|(b, c)| {
            let p = match policy {
                SamplingPolicy::Random(seed) => SamplingPolicy::Random(seed.wrapping_add(b as u64 * 0x9E37_79B9)),
                SamplingPolicy::Canonical => SamplingPolicy::Canonical,
            };
            plan_cloud(config, &c.positions, p)
        })
        .collect()
}

/// Stack per-cloud region geometry into tape constants, offsetting neighbor
/// indices by each cloud's row offset in the stacked feature matrix.
fn stack_regions<'t, T: Scalar>(
    tape: &'t Tape<T>,
    features: Var<'t, T>,
    geos: &[&LevelGeometry<T>],
    offsets: &[usize],
    dim: usize,
) -> Result<RegionInputs<'t, T>> {
    let k = geos[0].k;
    let regions: usize = geos.iter().map(|g| g.centroids.len()).sum();
    let mut index = Vec::with_capacity(regions * k);
    let mut local = Vec::with_capacity(regions * k * dim);
    let mut inv = Vec::with_capacity(regions * k);
    let with_density = geos.iter().all(|g| g.inverse_density.is_some());
    for (g, &off) in geos.iter().zip(offsets) {
        index.extend(g.neighbors.iter().map(|&j| j + off));
        local.extend_from_slice(&g.local_coords);
        if let Some(s) = g.inverse_density.as_ref().filter(|_| with_density) {
            inv.extend_from_slice(s);
        }
    }
    let c = *features.shape().last().expect("rank 2");
    let grouped = tape.gather_rows(features, Rc::from(index), None)?.reshape(&[regions, k, c])?;
    Ok(RegionInputs {
        local_coords: tape.constant(Tensor::new(vec![regions, k, dim], local)?),
        features: grouped,
        inverse_density: if with_density { Some(tape.constant(Tensor::new(vec![regions, k], inv)?)) } else { None },
    })
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

/// Sample -> group -> PointConv -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct EncodingModule {
    pub spec: EncodingSpec,
    pub mlp: Mlp,
    pub conv: PointConvLayer,
    pub bn: BatchNorm,
}

impl EncodingModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &EncodingSpec,
        dim: usize,
        c_in: usize,
        weight_bn: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(store, &format!("{name}.mlp"), c_in, &spec.mlp_channels, true, rng);
        let conv_in = mlp.out_dim().unwrap_or(c_in);
        let mut cfg = PointConvConfig::new(dim, conv_in, spec.c_mid, spec.c_out, spec.k).with_density(spec.density);
        cfg.weight_layers = spec.weight_layers;
        cfg.weight_bn = weight_bn;
        let conv = PointConvLayer::new(store, &format!("{name}.conv"), cfg, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.c_out);
        Ok(EncodingModule { spec: spec.clone(), mlp, conv, bn })
    }

    /// Features `[sum N_l, C]` of a batch at level `l` to level `l + 1`.
    /// Returns (features entering PointConv, output features).
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        features: Var<'t, T>,
        geos: &[&LevelGeometry<T>],
        level_sizes: &[usize],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let x = self.mlp.forward(tape, ctx, features)?;
        let regions = stack_regions(tape, x, geos, &offsets(level_sizes.iter().copied()), self.conv.config.dim)?;
        let y = self.conv.forward_efficient(tape, ctx, &regions, None)?;
        let y = self.bn.forward(tape, ctx, y)?.relu();
        Ok((x, y))
    }

    /// Encode a single cloud (density, sampling and grouping computed here).
    /// Returns the sampled cloud carrying the output features.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cloud: &PointCloud<T>,
        start: FpsStart,
        bandwidth: f64,
    ) -> Result<PointCloud<T>> {
        let dim = cloud.dim;
        let n = cloud.len();
        if self.spec.n_out > n {
            return Err(Error::invalid(format!("n_out={} exceeds {n} points", self.spec.n_out)));
        }
        let inv = match self.spec.density {
            DensityMode::Disabled => None,
            _ => Some(normalized_inverse_density(&cloud.positions, dim, bandwidth)?),
        };
        let centroids = farthest_point_sample_raw(&cloud.positions, dim, self.spec.n_out, start)?;
        let geo = group_level(&cloud.positions, dim, &centroids, self.spec.k, inv.as_deref())?;
        let tape = Tape::new();
        let ctx = Ctx::eval(store);
        let f = tape.constant(Tensor::new(vec![n, cloud.channels], cloud.features.clone())?);
        let (_, y) = self.forward(&tape, &ctx, f, &[&geo], &[n])?;
        let mut out = cloud.select(&centroids);
        out.channels = self.spec.c_out;
        out.features = y.value().data().to_vec();
        out.density = None;
        Ok(out)
    }
}

/// Interpolate -> concatenate skip -> PointConv -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct PropagationModule {
    pub spec: PropagationSpec,
    pub conv: PointConvLayer,
    pub bn: BatchNorm,
}

impl PropagationModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &PropagationSpec,
        dim: usize,
        c_in: usize,
        weight_bn: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut cfg = PointConvConfig::new(dim, c_in, spec.c_mid, spec.c_out, spec.k).with_density(spec.density);
        cfg.weight_layers = spec.weight_layers;
        cfg.weight_bn = weight_bn;
        let conv = PointConvLayer::new(store, &format!("{name}.conv"), cfg, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.c_out);
        Ok(PropagationModule { spec: spec.clone(), conv, bn })
    }

    /// `coarse` is `[sum N_coarse, C]`, `skip` is `[sum N_fine, C_skip]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        coarse: Var<'t, T>,
        skip: Var<'t, T>,
        geos: &[&PropGeometry<T>],
        coarse_sizes: &[usize],
        fine_sizes: &[usize],
    ) -> Result<Var<'t, T>> {
        let coarse_off = offsets(coarse_sizes.iter().copied());
        let fine_total: usize = fine_sizes.iter().sum();
        let mut index = Vec::with_capacity(fine_total * 3);
        let mut weight = Vec::with_capacity(fine_total * 3);
        for (g, &off) in geos.iter().zip(&coarse_off) {
            index.extend(g.interp_index.iter().map(|&j| j + off));
            weight.extend_from_slice(&g.interp_weight);
        }
        if index.len() != fine_total * 3 || skip.shape()[0] != fine_total {
            return Err(Error::ShapeMismatch { op: "propagate", lhs: vec![index.len() / 3], rhs: skip.shape() });
        }
        let c = *coarse.shape().last().expect("rank 2");
        let interp = tape.gather_rows(coarse, Rc::from(index), Some(Rc::from(weight)))?.reshape(&[fine_total, 3, c])?.sum(1)?;
        let x = tape.concat(&[interp, skip])?;
        let groups: Vec<&LevelGeometry<T>> = geos.iter().map(|g| &g.group).collect();
        let regions = stack_regions(tape, x, &groups, &offsets(fine_sizes.iter().copied()), self.conv.config.dim)?;
        let y = self.conv.forward_efficient(tape, ctx, &regions, None)?;
        Ok(self.bn.forward(tape, ctx, y)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Vec<(Dense, Option<BatchNorm>)>,
    pub out: Dense,
    pub dropout: f64,
}

impl Head {
    fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, ctx: &Ctx<'_, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (dense, bn) in &self.hidden {
            x = dense.forward(tape, ctx, x)?;
            if let Some(bn) = bn {
                x = bn.forward(tape, ctx, x)?;
            }
            x = x.relu();
        }
        let x = dropout(tape, ctx, x, self.dropout)?;
        self.out.forward(tape, ctx, x)
    }
}

/// A complete network together with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    pub encoders: Vec<EncodingModule>,
    pub propagators: Vec<PropagationModule>,
    pub head: Head,
}

impl<T: Scalar> Network<T> {
    /// Build and initialize from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let dim = config.input_dim;
        let (skip_channels, top) = config.level_channels();
        let mut encoders = Vec::new();
        let mut c = config.input_channels;
        for (i, spec) in config.encoders.iter().enumerate() {
            encoders.push(EncodingModule::new(&mut store, &format!("enc{i}"), spec, dim, c, config.weight_bn, &mut rng)?);
            c = spec.c_out;
        }
        let mut propagators = Vec::new();
        let mut c = top;
        for (j, spec) in config.propagators.iter().enumerate() {
            let c_in = c + skip_channels[spec.skip_level];
            propagators.push(PropagationModule::new(
                &mut store,
                &format!("prop{j}"),
                spec,
                dim,
                c_in,
                config.weight_bn,
                &mut rng,
            )?);
            c = spec.c_out;
        }
        let mut hidden = Vec::new();
        for (i, &w) in config.head.hidden.iter().enumerate() {
            let dense = Dense::new(&mut store, &format!("head.{i}"), c, w, true, Init::Glorot, &mut rng);
            let bn = config.head.batch_norm.then(|| BatchNorm::new(&mut store, &format!("head.{i}.bn"), w));
            hidden.push((dense, bn));
            c = w;
        }
        let out = Dense::new(&mut store, "head.out", c, config.head.classes, true, Init::Glorot, &mut rng);
        let head = Head { hidden, out, dropout: config.head.dropout };
        Ok(Network { config, store, encoders, propagators, head })
    }

    pub fn plan(&self, clouds: &[&PointCloud<T>], policy: SamplingPolicy) -> Result<Vec<CloudPlan<T>>> {
        plan_batch(&self.config, clouds, policy)
    }

    /// Logits: `[B, classes]` for classification, `[sum N, classes]` for
    /// segmentation (clouds stacked in order).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        ctx: &Ctx<'_, T>,
        clouds: &[&PointCloud<T>],
        plans: &[CloudPlan<T>],
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        if clouds.is_empty() || clouds.len() != plans.len() {
            return Err(Error::invalid("forward needs one plan per cloud and at least one cloud"));
        }
        let mut feats = Vec::new();
        for c in clouds {
            if c.channels != cfg.input_channels || c.dim != cfg.input_dim {
                return Err(Error::Config(format!(
                    "cloud has dim {} / {} channels, network expects {} / {}",
                    c.dim, c.channels, cfg.input_dim, cfg.input_channels
                )));
            }
            feats.extend_from_slice(&c.features);
        }
        let total: usize = clouds.iter().map(|c| c.len()).sum();
        let mut x = tape.constant(Tensor::new(vec![total, cfg.input_channels], feats)?);
        let levels = cfg.encoders.len();
        let sizes: Vec<Vec<usize>> = (0..=levels).map(|l| plans.iter().map(|p| p.level_size(l)).collect()).collect();
        let mut skips = Vec::with_capacity(levels);
        for (i, enc) in self.encoders.iter().enumerate() {
            let geos: Vec<&LevelGeometry<T>> = plans.iter().map(|p| &p.encoders[i]).collect();
            let (skip, y) = enc.forward(tape, ctx, x, &geos, &sizes[i])?;
            skips.push(skip);
            x = y;
        }
        match cfg.task {
            Task::Classify => {
                let b = clouds.len();
                let n_last = cfg.encoders[levels - 1].n_out;
                let c = *x.shape().last().expect("rank 2");
                let pooled = x.reshape(&[b, n_last, c])?.mean(1)?;
                self.head.forward(tape, ctx, pooled)
            }
            Task::Segment => {
                for (j, prop) in self.propagators.iter().enumerate() {
                    let fine = prop.spec.skip_level;
                    let geos: Vec<&PropGeometry<T>> = plans.iter().map(|p| &p.propagators[j]).collect();
                    x = prop.forward(tape, ctx, x, skips[fine], &geos, &sizes[fine + 1], &sizes[fine])?;
                }
                self.head.forward(tape, ctx, x)
            }
        }
    }

    /// Eval-mode logits as plain values, canonical sampling.
    pub fn predict(&self, clouds: &[&PointCloud<T>]) -> Result<Tensor<T>> {
        let plans = self.plan(clouds, SamplingPolicy::Canonical)?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&self.store);
        let logits = self.forward(&tape, &ctx, clouds, &plans)?;
        let v = logits.value().clone();
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(self, path)
    }
}

const MAGIC: &[u8; 4] = b"PCNV";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a network: magic `PCNV`, `u32` version, `u32` element width in
/// bytes, `u32` length + JSON config, `u32` tensor count, then per tensor
/// `u32` name length, name, `u32` rank, `u32` dims, raw little-endian data.
pub fn encode_params<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, T::BYTES as u32);
    let cfg = serde_json::to_vec(&net.config)?;
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    put_u32(&mut buf, net.store.len() as u32);
    for (_, p) in net.store.iter() {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
    }
    Ok(buf)
}

pub fn save_params<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let buf = encode_params(net)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { path: self.path.to_path_buf(), expected: self.pos + n, actual: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse a checkpoint produced by [`encode_params`].
pub fn decode_params<T: Scalar>(buf: &[u8], path: &Path) -> Result<Network<T>> {
    let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(fmt("bad magic, expected PCNV".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let width = r.u32()? as usize;
    if width != 4 && width != 8 {
        return Err(fmt(format!("unsupported element width {width}")));
    }
    let len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(len)?).map_err(|e| fmt(format!("config: {e}")))?;
    let mut saved = ParamStore::<T>::new();
    let count = r.u32()?;
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let elems: usize = shape.iter().product();
        let raw = r.take(elems * width)?;
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|b| if width == 4 { T::of(f32::read_le(b) as f64) } else { T::of(f64::read_le(b)) })
            .collect();
        saved.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(fmt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut net = Network::new(config)?;
    net.store.load_values(&saved)?;
    Ok(net)
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    decode_params(&buf, path)
}

/// Load a checkpoint and require it to match `expected` in task, input
/// shape, class count and layer structure.
pub fn load_params_checked<T: Scalar>(path: &Path, expected: &NetworkConfig) -> Result<Network<T>> {
    let net = load_params::<T>(path)?;
    let got = &net.config;
    let mismatch = |what: &str, a: String, b: String| Err(Error::Config(format!("checkpoint {what} is {a}, expected {b}")));
    if got.head.classes != expected.head.classes {
        return mismatch("class count", got.head.classes.to_string(), expected.head.classes.to_string());
    }
    if got.task != expected.task {
        return mismatch("task", format!("{:?}", got.task), format!("{:?}", expected.task));
    }
    if (got.input_dim, got.input_channels) != (expected.input_dim, expected.input_channels) {
        return mismatch(
            "input (dim, channels)",
            format!("{:?}", (got.input_dim, got.input_channels)),
            format!("{:?}", (expected.input_dim, expected.input_channels)),
        );
    }
    if got.encoders != expected.encoders || got.propagators != expected.propagators {
        return mismatch("layer structure", "different".into(), "the requested config".into());
    }
    Ok(net)
}
