//! Training-based workflows behind the CLI commands.

use std::fmt;
use std::path::{Path, PathBuf};

use pointconv::data::{
    classification_split, image_cloud_split, image_to_pointcloud, save_cloud, segmentation_split, write_dataset, Image, Manifest,
};
use pointconv::network::{load_params, Task};
use pointconv::pointconv::{write_weight_image, ImageFormat, Plane};
use pointconv::training::{evaluate, train, Metrics, TrainReport};
use pointconv::{DensityMode, Error, Network, PointCloud, PointConvLayer};

use crate::config::{Dataset, ExperimentConfig};
use crate::grid_cnn::GridCnn;
use crate::CliError;

pub type Cloud = PointCloud<f32>;

/// Train/test clouds for `cfg`: from manifests when given, else generated.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Vec<Cloud>, Vec<Cloud>), CliError> {
    let d = &cfg.data;
    if let Some(train_path) = &d.train_manifest {
        let train = Manifest::load(train_path)?.load_clouds(train_path)?;
        let test = match &d.test_manifest {
            Some(p) => Manifest::load(p)?.load_clouds(p)?,
            None => Vec::new(),
        };
        return Ok((train, test));
    }
    let seed = d.seed.unwrap_or(cfg.train.seed);
    Ok(match d.dataset {
        Dataset::Shapes => classification_split(d.n_train, d.n_test, d.n_points, seed)?,
        Dataset::Parts => segmentation_split(d.n_train, d.n_test, d.n_points, seed)?,
        Dataset::Bars => image_cloud_split(d.n_train, d.n_test, seed)?,
    })
}

/// Train a fresh network. With `out_dir`, writes `model.pcnv` (best test
/// checkpoint) and `log.csv` there.
pub fn run_train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<(Network<f32>, TrainReport), CliError> {
    let (train_set, test_set) = datasets(cfg)?;
    let mut net = Network::<f32>::new(cfg.network.clone())?;
    let mut tcfg = cfg.train.clone();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tcfg.checkpoint = Some(dir.join("model.pcnv"));
        tcfg.log_path = Some(dir.join("log.csv"));
    }
    let report = train(&mut net, &train_set, &test_set, &tcfg)?;
    Ok((net, report))
}

pub fn run_eval(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<Metrics, CliError> {
    let net = load_params::<f32>(checkpoint)?;
    let (_, test_set) = datasets(cfg)?;
    if test_set.is_empty() {
        return Err(CliError::Usage("no test data to evaluate".into()));
    }
    Ok(evaluate(&net, &test_set, cfg.train.batch_size)?)
}

pub fn format_metrics(m: &Metrics) -> String {
    let ious: Vec<String> = m.per_class_iou.iter().map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))).collect();
    format!("loss {:.4} accuracy {:.4} miou {:.4} per_class_iou [{}]", m.loss, m.accuracy, m.miou, ious.join(", "))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub density: DensityMode,
    pub metrics: Metrics,
}

/// Train the same segmentation setup with each density treatment.
pub fn ablate_density(base: &ExperimentConfig) -> Result<Vec<AblationRow>, CliError> {
    if base.network.task != Task::Segment {
        return Err(CliError::Usage("ablate-density needs a segmentation config".into()));
    }
    let (train_set, test_set) = datasets(base)?;
    if test_set.is_empty() {
        return Err(CliError::Usage("ablate-density needs a test split".into()));
    }
    let mut rows = Vec::new();
    for density in [DensityMode::Mlp, DensityMode::Disabled, DensityMode::Raw] {
        let mut net = Network::<f32>::new(base.network.clone().with_density(density))?;
        let report = train(&mut net, &train_set, &test_set, &base.train)?;
        let metrics = report.final_test.expect("test split is non-empty");
        rows.push(AblationRow { density, metrics });
    }
    Ok(rows)
}

pub struct AblationTable<'a>(pub &'a [AblationRow]);

impl fmt::Display for AblationTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let get = |m: DensityMode| self.0.iter().find(|r| r.density == m).map(|r| r.metrics.miou);
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "{:<12} {:<12} {:<12}", "mlp", "no-density", "raw-density")?;
        write!(
            f,
            "{:<12} {:<12} {:<12}",
            cell(get(DensityMode::Mlp)),
            cell(get(DensityMode::Disabled)),
            cell(get(DensityMode::Raw))
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub c_mid: usize,
    pub accuracies: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation (0 for a single trial).
    pub fn sd(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Test accuracy for every `C_mid` in `values`, `trials` seeds each.
pub fn sweep_cmid(base: &ExperimentConfig, values: &[usize], trials: usize) -> Result<Vec<SweepRow>, CliError> {
    let (train_set, test_set) = datasets(base)?;
    if test_set.is_empty() {
        return Err(CliError::Usage("sweep-cmid needs a test split".into()));
    }
    let mut rows = Vec::new();
    for &c_mid in values {
        let mut accuracies = Vec::new();
        for t in 0..trials {
            let mut ncfg = base.network.clone().with_c_mid(c_mid);
            ncfg.seed = base.network.seed.wrapping_add(t as u64);
            let mut tcfg = base.train.clone();
            tcfg.seed = base.train.seed.wrapping_add(t as u64);
            let mut net = Network::<f32>::new(ncfg)?;
            let report = train(&mut net, &train_set, &test_set, &tcfg)?;
            accuracies.push(report.final_test.expect("test split is non-empty").accuracy);
        }
        rows.push(SweepRow { c_mid, accuracies });
    }
    Ok(rows)
}

/// PointConv layers of a network by name: `enc{i}`, `prop{j}`.
pub fn conv_layers(net: &Network<f32>) -> Vec<(String, &PointConvLayer)> {
    let enc = net.encoders.iter().enumerate().map(|(i, e)| (format!("enc{i}"), &e.conv));
    let prop = net.propagators.iter().enumerate().map(|(j, p)| (format!("prop{j}"), &p.conv));
    enc.chain(prop).collect()
}

/// Write one weight-function image per `(c_in, c_out)` pair of `layer`,
/// sampled on a `side x side` grid over `[-extent, extent]^2` (the `z = 0`
/// plane for 3-D layers).
pub fn viz_filters(
    checkpoint: &Path,
    layer: &str,
    out_dir: &Path,
    side: usize,
    extent: f64,
    format: ImageFormat,
) -> Result<Vec<PathBuf>, CliError> {
    let net = load_params::<f32>(checkpoint)?;
    let layers = conv_layers(&net);
    let Some((_, conv)) = layers.iter().find(|(n, _)| n == layer) else {
        let names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
        return Err(CliError::Usage(format!("no layer `{layer}`; available: {}", names.join(", "))));
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let images = conv.sample_weight_function(&net.store, Plane::Z0, side, extent)?;
    let c_out = conv.config.c_out;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        paths.push(write_weight_image(out_dir, layer, i / c_out, i % c_out, side, img, format)?);
    }
    Ok(paths)
}

/// Generate the configured dataset into `out_dir` as `.pcb` files plus
/// `train.json` / `test.json` manifests.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let (train_set, test_set) = datasets(cfg)?;
    let task = Some(cfg.network.task);
    let classes = cfg.network.head.classes;
    let train = write_dataset(out_dir, "train", &train_set, task, classes)?;
    let test = write_dataset(out_dir, "test", &test_set, task, classes)?;
    Ok((train, test))
}

/// Read a binary or ASCII PGM (`P5`/`P2`) or PPM (`P6`/`P3`) with maxval
/// up to 255.
pub fn read_pnm(path: &Path) -> Result<Image, CliError> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| CliError::Core(Error::Format { path: path.to_path_buf(), reason: reason.to_string() });
    // Header tokens, skipping comments; remember where the raster starts.
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 && i < bytes.len() {
        match bytes[i] {
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
            }
        }
    }
    if tokens.len() < 4 {
        return Err(bad("incomplete header"));
    }
    let channels = match tokens[0].as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        _ => return Err(bad("not a PGM/PPM file (expected P2, P3, P5 or P6)")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only maxval 1..=255 is supported"));
    }
    let n = width * height * channels;
    let raw: Vec<usize> = if tokens[0] == "P5" || tokens[0] == "P6" {
        let body = &bytes[(i + 1).min(bytes.len())..];
        if body.len() < n {
            return Err(CliError::Core(Error::Truncated { path: path.to_path_buf(), expected: i + 1 + n, actual: bytes.len() }));
        }
        body[..n].iter().map(|&b| b as usize).collect()
    } else {
        let text = String::from_utf8_lossy(&bytes[i..]);
        let vals: Vec<usize> = text.split_whitespace().map(num).collect::<Result<_, _>>()?;
        if vals.len() < n {
            return Err(bad("too few samples"));
        }
        vals[..n].to_vec()
    };
    let data = raw.iter().map(|&v| ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8).collect();
    Ok(Image::new(height, width, channels, data)?)
}

pub fn img2cloud(input: &Path, output: &Path) -> Result<Cloud, CliError> {
    let img = read_pnm(input)?;
    let cloud: Cloud = image_to_pointcloud(&img)?;
    save_cloud(&cloud, output)?;
    Ok(cloud)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityRow {
    pub seed: u64,
    pub pointconv: f64,
    pub grid: f64,
}

impl ParityRow {
    pub fn gap(&self) -> f64 {
        (self.pointconv - self.grid).abs()
    }
}

/// Final test accuracy of the PointConv image network and the grid CNN
/// baseline, trained identically, for each seed.
pub fn grid_parity(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<ParityRow>, CliError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.network.seed = seed;
        cfg.train.seed = seed;
        cfg.data.seed = Some(seed);
        let (train_set, test_set) = datasets(&cfg)?;
        let mut tcfg = cfg.train.clone();
        tcfg.checkpoint = None;
        tcfg.log_path = None;
        let mut net = Network::<f32>::new(cfg.network.clone())?;
        let pc = train(&mut net, &train_set, &test_set, &tcfg)?;
        let mut cnn = GridCnn::<f32>::image_baseline(cfg.network.head.classes, seed);
        let grid = train(&mut cnn, &train_set, &test_set, &tcfg)?;
        let acc = |r: &TrainReport| r.final_test.as_ref().map_or(0.0, |m| m.accuracy);
        rows.push(ParityRow { seed, pointconv: acc(&pc), grid: acc(&grid) });
    }
    Ok(rows)
}
