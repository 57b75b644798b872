//! Numerical verification workloads: route equivalence, transient-memory
//! accounting, grid reduction and gradient checks.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use pointconv::gradcheck::{gradient_check_params, DEFAULT_EPS};
use pointconv::network::{group_level, PropGeometry, PropagationModule, PropagationSpec};
use pointconv::nn::{BatchNorm, Ctx, Mode};
use pointconv::point_ops::{
    farthest_point_sample_raw, inverse_density, kde_density_raw, knn_indices_raw, local_coordinates, three_nn_weights, FpsStart,
    DEFAULT_BANDWIDTH, INVERSE_DENSITY_EPS,
};
use pointconv::pointconv::{RegionInputs, TransientMeter};
use pointconv::tensor::max_rel_diff;
use pointconv::{DensityMode, ParamStore, PointConvConfig, PointConvLayer, Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::CliError;

/// `B,N,K,C_in,C_mid,C_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub n: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
}

impl Dims {
    pub const fn new(b: usize, n: usize, k: usize, c_in: usize, c_mid: usize, c_out: usize) -> Self {
        Dims { b, n, k, c_in, c_mid, c_out }
    }

    pub fn regions(&self) -> usize {
        self.b * self.n
    }
}

impl FromStr for Dims {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let v: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("dims `{s}`: {e}")))?;
        match v[..] {
            [b, n, k, c_in, c_mid, c_out] if v.iter().all(|&x| x > 0) => Ok(Dims { b, n, k, c_in, c_mid, c_out }),
            _ => Err(CliError::Usage(format!("dims `{s}` must be six positive integers B,N,K,cin,cmid,cout"))),
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},{}", self.b, self.n, self.k, self.c_in, self.c_mid, self.c_out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bound(self) -> f64 {
        match self {
            Precision::F32 => 1e-5,
            Precision::F64 => 1e-10,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

fn normal<T: Scalar>(rng: &mut impl Rng) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

/// Random clouds in `[-1, 1]^3` grouped with every point as a centroid.
/// Returns (local coords, features, inverse densities), each stacked over
/// the batch in region order.
fn random_regions<T: Scalar>(d: &Dims, rng: &mut impl Rng) -> pointconv::Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (mut local, mut feats, mut inv) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..d.b {
        let pos: Vec<T> = (0..d.n * 3).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        let f: Vec<T> = (0..d.n * d.c_in).map(|_| normal(rng)).collect();
        let s = inverse_density(&kde_density_raw(&pos, 3, T::of(DEFAULT_BANDWIDTH))?, T::of(INVERSE_DENSITY_EPS));
        let all: Vec<usize> = (0..d.n).collect();
        let nbr = knn_indices_raw(&pos, &pos, 3, d.k, Some(&all))?;
        local.extend(local_coordinates(&pos, 3, &all, &nbr, d.k));
        for &j in &nbr {
            feats.extend_from_slice(&f[j * d.c_in..(j + 1) * d.c_in]);
            inv.push(s[j]);
        }
    }
    Ok((local, feats, inv))
}

fn region_inputs<'t, T: Scalar>(
    tape: &'t Tape<T>,
    d: &Dims,
    local: &[T],
    feats: &[T],
    inv: &[T],
) -> pointconv::Result<RegionInputs<'t, T>> {
    let r = d.regions();
    Ok(RegionInputs {
        local_coords: tape.constant(Tensor::new(vec![r, d.k, 3], local.to_vec())?),
        features: tape.constant(Tensor::new(vec![r, d.k, d.c_in], feats.to_vec())?),
        inverse_density: Some(tape.constant(Tensor::new(vec![r, d.k], inv.to_vec())?)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub dims: Dims,
    pub precision: Precision,
    pub trials: usize,
    pub max_forward_rel: f64,
    pub max_grad_rel: f64,
}

impl EquivalenceReport {
    pub fn max_rel_err(&self) -> f64 {
        self.max_forward_rel.max(self.max_grad_rel)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.precision.bound()
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "dims {} ({}), {} trials: forward max_rel_err {:.3e}, gradient max_rel_err {:.3e}",
            self.dims, self.precision, self.trials, self.max_forward_rel, self.max_grad_rel
        )?;
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let cmp = if self.passed() { "<" } else { ">=" };
        write!(f, "{verdict} max_rel_err {cmp} {:.0e}", self.precision.bound())
    }
}

/// One trial: (forward rel diff, parameter-gradient rel diff).
fn equivalence_trial<T: Scalar>(d: &Dims, seed: u64) -> pointconv::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    let cfg = PointConvConfig::new(3, d.c_in, d.c_mid, d.c_out, d.k).with_density(DensityMode::Mlp);
    let layer = PointConvLayer::new(&mut store, "pc", cfg, &mut rng)?;
    let (local, feats, inv) = random_regions::<T>(d, &mut rng)?;
    let probe = Tensor::from_fn(&[d.regions(), d.c_out], |_| normal::<T>(&mut rng));
    let run = |naive: bool| -> pointconv::Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let ctx = Ctx::new(&store, Mode::Train, 0);
        let input = region_inputs(&tape, d, &local, &feats, &inv)?;
        let out = if naive {
            layer.forward_naive(&tape, &ctx, &input, None)?
        } else {
            layer.forward_efficient(&tape, &ctx, &input, None)?
        };
        let value = out.value().clone();
        let loss = out.mul(tape.constant(probe.clone()))?.sum_all()?;
        let grads = tape.gradients(loss)?;
        let g = store
            .trainable_ids()
            .into_iter()
            .map(|id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
            .collect();
        Ok((value, g))
    };
    let (naive_out, naive_g) = run(true)?;
    let (eff_out, eff_g) = run(false)?;
    let fwd = max_rel_diff(eff_out.data(), naive_out.data());
    // One infinity norm over the whole parameter-gradient vector, matching
    // the forward comparison.
    let flat = |g: &[Tensor<T>]| -> Vec<T> { g.iter().flat_map(|t| t.data().iter().copied()).collect() };
    let grad = max_rel_diff(&flat(&eff_g), &flat(&naive_g));
    Ok((fwd, grad))
}

/// Compare the naive and reordered PointConv routes over random trials.
pub fn equivalence(dims: Dims, trials: usize, precision: Precision, seed: u64) -> pointconv::Result<EquivalenceReport> {
    let mut report = EquivalenceReport { dims, precision, trials, max_forward_rel: 0.0, max_grad_rel: 0.0 };
    for t in 0..trials {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let (f, g) = match precision {
            Precision::F32 => equivalence_trial::<f32>(&dims, s)?,
            Precision::F64 => equivalence_trial::<f64>(&dims, s)?,
        };
        report.max_forward_rel = report.max_forward_rel.max(f);
        report.max_grad_rel = report.max_grad_rel.max(g);
    }
    Ok(report)
}

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub analytic: Dims,
    /// `B N K C_in C_out` 4-byte elements.
    pub naive_bytes: f64,
    /// `(B N C_in C_mid + C_mid C_in C_out)` 4-byte elements.
    pub efficient_bytes: f64,
    pub desk: Dims,
    pub naive_meter: TransientMeter,
    pub efficient_meter: TransientMeter,
    pub measured_ratio: f64,
    pub expected_ratio: f64,
    /// Allowed deviation of the measured ratio: one `C_in x C_mid` block
    /// relative to the naive filter size.
    pub slack: f64,
}

impl MemoryReport {
    pub fn analytic_ratio(&self) -> f64 {
        self.efficient_bytes / self.naive_bytes
    }

    pub fn passed(&self) -> bool {
        (self.measured_ratio - self.expected_ratio).abs() <= self.slack
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.analytic;
        writeln!(f, "analytic dims B={} N={} K={} C_in={} C_mid={} C_out={}", a.b, a.n, a.k, a.c_in, a.c_mid, a.c_out)?;
        writeln!(f, "  naive filter bytes        {:>16.0}  ({:.4} GiB)", self.naive_bytes, self.naive_bytes / GIB)?;
        writeln!(f, "  efficient dominant bytes  {:>16.0}  ({:.4} GiB)", self.efficient_bytes, self.efficient_bytes / GIB)?;
        writeln!(f, "  ratio                     {:.6} (1/{:.1})", self.analytic_ratio(), 1.0 / self.analytic_ratio())?;
        let d = &self.desk;
        writeln!(
            f,
            "measured transients at B={} N={} K={} C_in={} C_mid={} C_out={} (elements)",
            d.b, d.n, d.k, d.c_in, d.c_mid, d.c_out
        )?;
        for (route, m) in [("naive", &self.naive_meter), ("efficient", &self.efficient_meter)] {
            let parts: Vec<String> = m.buffers.iter().map(|(l, n)| format!("{l}={n}")).collect();
            let (dl, dn) = m.dominant();
            writeln!(f, "  {route:<10} {}  dominant {dl}={dn}  peak {}", parts.join(" "), m.peak())?;
        }
        writeln!(
            f,
            "  dominant ratio {:.6} expected C_mid/(K*C_out) = {:.6} (slack {:.2e})",
            self.measured_ratio, self.expected_ratio, self.slack
        )?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Analytic byte counts at `analytic` plus instrumented transient counts
/// from running both routes at `desk`.
pub fn bench_memory(analytic: Dims, desk: Dims, seed: u64) -> pointconv::Result<MemoryReport> {
    let a = analytic;
    let naive_bytes = (a.b * a.n * a.k * a.c_in * a.c_out) as f64 * 4.0;
    let efficient_bytes = (a.b * a.n * a.c_in * a.c_mid + a.c_mid * a.c_in * a.c_out) as f64 * 4.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let cfg = PointConvConfig::new(3, desk.c_in, desk.c_mid, desk.c_out, desk.k);
    let layer = PointConvLayer::new(&mut store, "pc", cfg, &mut rng)?;
    let (local, feats, inv) = random_regions::<f32>(&desk, &mut rng)?;
    let tape = Tape::new();
    let ctx = Ctx::eval(&store);
    let input = region_inputs(&tape, &desk, &local, &feats, &inv)?;
    let mut naive_meter = TransientMeter::default();
    let mut efficient_meter = TransientMeter::default();
    layer.forward_naive(&tape, &ctx, &input, Some(&mut naive_meter))?;
    layer.forward_efficient(&tape, &ctx, &input, Some(&mut efficient_meter))?;
    let naive_dom = naive_meter.dominant().1 as f64;
    let measured_ratio = efficient_meter.dominant().1 as f64 / naive_dom;
    let expected_ratio = desk.c_mid as f64 / (desk.k * desk.c_out) as f64;
    let slack = (desk.c_in * desk.c_mid) as f64 / naive_dom;
    Ok(MemoryReport {
        analytic,
        naive_bytes,
        efficient_bytes,
        desk,
        naive_meter,
        efficient_meter,
        measured_ratio,
        expected_ratio,
        slack,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub side: usize,
    pub kernel: usize,
    pub interior: usize,
    pub max_rel_err: f64,
    /// Worst absolute deviation of a constant-input interior output from
    /// `(sum of stencil) * feature`.
    pub constant_abs_err: f64,
}

pub const GRID_TOLERANCE: f64 = 1e-5;

impl GridReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRID_TOLERANCE && self.constant_abs_err < GRID_TOLERANCE
    }
}

impl fmt::Display for GridReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} side {} kernel {}: {} interior points, max_rel_err {:.3e}, constant-input err {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.side,
            self.kernel,
            self.interior,
            self.max_rel_err,
            self.constant_abs_err
        )
    }
}

const GRID_C_IN: usize = 2;
const GRID_C_MID: usize = 8;
const GRID_C_OUT: usize = 3;

/// PointConv (density off, `K = kernel^2`) on a regular `side x side` grid
/// against a sliding-window convolution whose stencil is the layer's weight
/// function sampled at the grid offsets. Grid spacing is `1 / side`, origin
/// at `origin`.
pub fn grid_equiv(side: usize, kernel: usize, seed: u64, origin: [f64; 2]) -> Result<GridReport, CliError> {
    if kernel.is_multiple_of(2) || kernel == 0 {
        return Err(CliError::Usage(format!("kernel must be odd, got {kernel}")));
    }
    if side < kernel + 2 {
        return Err(CliError::Usage(format!("side must be at least kernel + 2 = {}, got {side}", kernel + 2)));
    }
    let h = 1.0 / side as f64;
    let rad = kernel / 2;
    let k = kernel * kernel;
    let n = side * side;
    let at = |r: usize, c: usize| r * side + c;
    let mut pos = Vec::with_capacity(2 * n);
    for r in 0..side {
        for c in 0..side {
            pos.push(origin[0] + c as f64 * h);
            pos.push(origin[1] - r as f64 * h);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = PointConvConfig::new(2, GRID_C_IN, GRID_C_MID, GRID_C_OUT, k).with_density(DensityMode::Disabled);
    let layer = PointConvLayer::new(&mut store, "grid", cfg, &mut rng)?;
    let all: Vec<usize> = (0..n).collect();
    let nbr = knn_indices_raw(&pos, &pos, 2, k, Some(&all))?;
    let interior: Vec<(usize, usize)> = (rad..side - rad).flat_map(|r| (rad..side - rad).map(move |c| (r, c))).collect();
    // kNN must pick out exactly the square stencil around interior points.
    for &(r, c) in &interior {
        let mut got: Vec<usize> = nbr[at(r, c) * k..(at(r, c) + 1) * k].to_vec();
        got.sort_unstable();
        let mut want: Vec<usize> = (r - rad..=r + rad).flat_map(|rr| (c - rad..=c + rad).map(move |cc| at(rr, cc))).collect();
        want.sort_unstable();
        if got != want {
            return Err(CliError::Usage(format!("kernel {kernel}: the {k} nearest grid neighbors are not the square stencil")));
        }
    }
    let local = local_coordinates(&pos, 2, &all, &nbr, k);

    // Stencil: W at every offset (dr, dc), row-major over the window.
    let mut offsets = Vec::with_capacity(2 * k);
    for dr in 0..kernel {
        for dc in 0..kernel {
            offsets.push((dc as f64 - rad as f64) * h);
            offsets.push(-(dr as f64 - rad as f64) * h);
        }
    }
    let stencil = layer.weights_at(&store, &offsets)?;
    let w = |tap: usize, ci: usize, co: usize| stencil.data()[tap * GRID_C_IN * GRID_C_OUT + ci * GRID_C_OUT + co];

    let conv = |feats: &[f64]| -> pointconv::Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&store);
        let grouped: Vec<f64> = nbr.iter().flat_map(|&j| feats[j * GRID_C_IN..(j + 1) * GRID_C_IN].iter().copied()).collect();
        let input = RegionInputs {
            local_coords: tape.constant(Tensor::new(vec![n, k, 2], local.clone())?),
            features: tape.constant(Tensor::new(vec![n, k, GRID_C_IN], grouped)?),
            inverse_density: None,
        };
        let out = layer.forward_efficient(&tape, &ctx, &input, None)?;
        let out = out.value();
        let mut got = Vec::new();
        let mut want = Vec::new();
        for &(r, c) in &interior {
            got.extend_from_slice(&out.data()[at(r, c) * GRID_C_OUT..(at(r, c) + 1) * GRID_C_OUT]);
            for co in 0..GRID_C_OUT {
                let mut acc = 0.0;
                for dr in 0..kernel {
                    for dc in 0..kernel {
                        let src = at(r + dr - rad, c + dc - rad);
                        for ci in 0..GRID_C_IN {
                            acc += w(dr * kernel + dc, ci, co) * feats[src * GRID_C_IN + ci];
                        }
                    }
                }
                want.push(acc);
            }
        }
        Ok((got, want))
    };

    let feats: Vec<f64> = (0..n * GRID_C_IN).map(|_| normal(&mut rng)).collect();
    let (got, want) = conv(&feats)?;
    let max_rel_err = max_rel_diff(&got, &want);

    let constant = [0.7, -0.3];
    let flat: Vec<f64> = (0..n).flat_map(|_| constant).collect();
    let (got_c, _) = conv(&flat)?;
    let mut expect = [0.0; GRID_C_OUT];
    for (co, e) in expect.iter_mut().enumerate() {
        for tap in 0..k {
            for (ci, &v) in constant.iter().enumerate() {
                *e += w(tap, ci, co) * v;
            }
        }
    }
    let constant_abs_err =
        got_c.chunks_exact(GRID_C_OUT).flat_map(|row| row.iter().zip(&expect).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
    Ok(GridReport { side, kernel, interior: interior.len(), max_rel_err, constant_abs_err })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub component: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const GRADCHECK_COMPONENTS: [&str; 6] = ["density_net", "weight_net", "pointconv", "propagation", "batch_norm", "loss"];

/// Shift every parameter randomly so zero-initialized biases do not park
/// ReLU inputs exactly on the kink.
fn jitter_params(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for id in store.trainable_ids() {
        for v in store.get_mut(id).value.data_mut() {
            *v += 0.1 * normal::<f64>(rng);
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(rng))
}

/// Finite-difference check of one component at one seed (64-bit).
pub fn gradcheck_component(component: &str, seed: u64) -> Result<GradCheckEntry, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let (regions, k, c_in, c_mid, c_out) = (6, 4, 3, 4, 2);
    let report = match component {
        "density_net" | "weight_net" | "pointconv" => {
            let cfg = PointConvConfig::new(3, c_in, c_mid, c_out, k).with_density(DensityMode::Mlp);
            let layer = PointConvLayer::new(&mut store, "pc", cfg, &mut rng)?;
            jitter_params(&mut store, &mut rng);
            let d = Dims::new(1, regions, k, c_in, c_mid, c_out);
            let (local, feats, inv) = random_regions::<f64>(&d, &mut rng)?;
            let feat_id = store.add("input.features", Tensor::new(vec![regions, k, c_in], feats)?);
            // Spread inverse densities over (0, 1] so the DensityNet sees a range.
            let inv: Vec<f64> = inv.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let probe_s = random_tensor(&[regions, k], &mut rng);
            let probe_w = random_tensor(&[regions * k, c_in * c_out], &mut rng);
            let probe_o = random_tensor(&[regions, c_out], &mut rng);
            let comp = component.to_string();
            gradient_check_params(
                &store,
                |tape, s| {
                    let ctx = Ctx::new(s, Mode::Train, 0);
                    let input = RegionInputs {
                        local_coords: tape.constant(Tensor::new(vec![regions, k, 3], local.clone())?),
                        features: tape.param(s, feat_id),
                        inverse_density: Some(tape.constant(Tensor::new(vec![regions, k], inv.clone())?)),
                    };
                    match comp.as_str() {
                        "density_net" => layer
                            .density_scale(tape, &ctx, input.inverse_density, regions, k)?
                            .mul(tape.constant(probe_s.clone()))?
                            .sum_all(),
                        "weight_net" => {
                            let flat = input.local_coords.reshape(&[regions * k, 3])?;
                            let m = layer.weight_net_hidden(tape, &ctx, flat)?;
                            let w = layer.weight_net.h.forward(tape, &ctx, m)?;
                            w.mul(tape.constant(probe_w.clone()))?.sum_all()
                        }
                        _ => layer.forward_efficient(tape, &ctx, &input, None)?.mul(tape.constant(probe_o.clone()))?.sum_all(),
                    }
                },
                DEFAULT_EPS,
            )?
        }
        "propagation" => {
            let (n_fine, n_coarse, c_coarse, c_skip) = (12, 5, 3, 2);
            let fine: Vec<f64> = (0..n_fine * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cidx = farthest_point_sample_raw(&fine, 3, n_coarse, FpsStart::Canonical)?;
            let coarse: Vec<f64> = cidx.iter().flat_map(|&i| fine[i * 3..i * 3 + 3].iter().copied()).collect();
            let (interp_index, interp_weight) = three_nn_weights(&fine, &coarse, 3)?;
            let inv = inverse_density(&kde_density_raw(&fine, 3, DEFAULT_BANDWIDTH)?, INVERSE_DENSITY_EPS);
            let all: Vec<usize> = (0..n_fine).collect();
            let group = group_level(&fine, 3, &all, k, Some(&inv))?;
            let geo = PropGeometry { interp_index, interp_weight, group };
            let spec = PropagationSpec { skip_level: 0, k, c_mid, c_out, density: DensityMode::Mlp, weight_layers: 2 };
            let module = PropagationModule::new(&mut store, "prop", &spec, 3, c_coarse + c_skip, false, &mut rng)?;
            jitter_params(&mut store, &mut rng);
            let coarse_id = store.add("input.coarse", random_tensor(&[n_coarse, c_coarse], &mut rng));
            let skip_id = store.add("input.skip", random_tensor(&[n_fine, c_skip], &mut rng));
            let probe = random_tensor(&[n_fine, c_out], &mut rng);
            gradient_check_params(
                &store,
                |tape, s| {
                    let ctx = Ctx::new(s, Mode::Train, 0);
                    let out = module.forward(
                        tape,
                        &ctx,
                        tape.param(s, coarse_id),
                        tape.param(s, skip_id),
                        &[&geo],
                        &[n_coarse],
                        &[n_fine],
                    )?;
                    out.mul(tape.constant(probe.clone()))?.sum_all()
                },
                DEFAULT_EPS,
            )?
        }
        "batch_norm" => {
            let bn = BatchNorm::new(&mut store, "bn", 4);
            let gamma = random_tensor(&[4], &mut rng);
            store.get_mut(bn.gamma).value = gamma;
            let x = store.add("input.x", random_tensor(&[8, 4], &mut rng));
            let probe = random_tensor(&[8, 4], &mut rng);
            gradient_check_params(
                &store,
                |tape, s| {
                    let ctx = Ctx::new(s, Mode::Train, 0);
                    bn.forward(tape, &ctx, tape.param(s, x))?.mul(tape.constant(probe.clone()))?.sum_all()
                },
                DEFAULT_EPS,
            )?
        }
        "loss" => {
            let logits = store.add("input.logits", random_tensor(&[6, 5], &mut rng));
            let labels: Rc<[usize]> = (0..6).map(|_| rng.random_range(0..5)).collect();
            gradient_check_params(&store, |tape, s| tape.softmax_cross_entropy(tape.param(s, logits), &labels), DEFAULT_EPS)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown gradcheck component `{other}`; expected one of {}",
                GRADCHECK_COMPONENTS.join(", ")
            )))
        }
    };
    let component = GRADCHECK_COMPONENTS.iter().copied().find(|&c| c == component).expect("matched above");
    Ok(GradCheckEntry { component, seed, max_rel_err: report.max_rel_err, checked: report.checked, worst: report.worst })
}

/// Every component at every seed.
pub fn gradcheck_suite(seeds: &[u64]) -> Result<Vec<GradCheckEntry>, CliError> {
    let mut out = Vec::new();
    for &seed in seeds {
        for c in GRADCHECK_COMPONENTS {
            out.push(gradcheck_component(c, seed)?);
        }
    }
    Ok(out)
}
