//! Ground-truth scenes and the measurement process.
//!
//! Scene cell values live in `[0, 1]`. The diffusion model works on the
//! affine image `2v - 1` in `[-1, 1]` ("model space"); [`to_model`] and
//! [`to_unit`] convert between the two.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{GaussianMixturePrior, MixtureComponent, Observed};
use crate::error::{ensure_dim, Error, Result};
use crate::layout::Layout;
use crate::scalar::Scalar;
use crate::seed::StreamRng;

pub fn to_model<F: Scalar>(v: F) -> F {
    F::two() * v - F::one()
}

pub fn to_unit<F: Scalar>(m: F) -> F {
    (m + F::one()) * F::half()
}

/// Additive Gaussian noise on revealed content (unit space).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoise {
    pub mu: f64,
    pub sigma: f64,
}

/// How a location's `y` is obtained from its cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockReduce {
    /// Fraction of target content: mean of the per-cell ratios.
    #[default]
    Mean,
    /// Block count sum over the largest block count sum in the scene.
    CountRatio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<F> {
    layout: Layout,
    grid: Vec<F>,
    cell_target: Vec<F>,
    location_y: Vec<F>,
    noise: Option<ObservationNoise>,
}

impl<F: Scalar> Scene<F> {
    pub fn new(
        layout: Layout,
        grid: Vec<F>,
        cell_target: Vec<F>,
        reduce: BlockReduce,
    ) -> Result<Self> {
        ensure_dim(layout.cells(), grid.len())?;
        ensure_dim(layout.cells(), cell_target.len())?;
        let unit = |v: &F| *v >= F::zero() && *v <= F::one();
        if !grid.iter().all(unit) {
            return Err(Error::InvalidRange {
                name: "grid",
                detail: "cell values must lie in [0, 1]".into(),
            });
        }
        if reduce == BlockReduce::Mean && !cell_target.iter().all(unit) {
            return Err(Error::InvalidRange {
                name: "target",
                detail: "target ratios must lie in [0, 1]".into(),
            });
        }
        let sums: Vec<F> = (0..layout.locations())
            .map(|l| {
                layout
                    .coords(l)
                    .unwrap()
                    .iter()
                    .map(|&c| cell_target[c])
                    .sum()
            })
            .collect();
        let location_y = match reduce {
            BlockReduce::Mean => {
                let area = F::of(layout.patch_area() as f64);
                sums.into_iter().map(|s| s / area).collect()
            }
            BlockReduce::CountRatio => {
                let max = sums.iter().copied().fold(F::zero(), F::max);
                if max > F::zero() {
                    sums.into_iter().map(|s| s / max).collect()
                } else {
                    sums
                }
            }
        };
        Ok(Self {
            layout,
            grid,
            cell_target,
            location_y,
            noise: None,
        })
    }

    pub fn with_noise(mut self, noise: Option<ObservationNoise>) -> Self {
        self.noise = noise;
        self
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn grid(&self) -> &[F] {
        &self.grid
    }

    pub fn cell_target(&self) -> &[F] {
        &self.cell_target
    }

    pub fn location_y(&self) -> &[F] {
        &self.location_y
    }

    pub fn noise(&self) -> Option<ObservationNoise> {
        self.noise
    }

    /// Number of locations holding any target content.
    pub fn target_locations(&self) -> usize {
        self.location_y.iter().filter(|&&y| y > F::zero()).count()
    }

    pub fn total_target(&self) -> F {
        self.location_y.iter().copied().sum()
    }

    pub fn model_grid(&self) -> Vec<F> {
        self.grid.iter().map(|&v| to_model(v)).collect()
    }

    /// Reveals a location. Content carries observation noise if configured;
    /// `y` is always exact.
    pub fn measure(
        &self,
        location: usize,
        log: &MeasurementLog<F>,
        step: usize,
        rng: &mut StreamRng,
    ) -> Result<Measurement<F>> {
        let coords = self.layout.coords(location)?;
        if log.contains(location) {
            return Err(Error::RepeatMeasurement(location));
        }
        let content = coords
            .iter()
            .map(|&c| match self.noise {
                Some(n) => {
                    self.grid[c] + F::of(n.mu + n.sigma * rng.sample::<f64, _>(StandardNormal))
                }
                None => self.grid[c],
            })
            .collect();
        Ok(Measurement {
            location,
            content,
            y: self.location_y[location],
            step,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<F> {
    pub location: usize,
    /// Revealed cell values, unit space, in the location's cell order.
    pub content: Vec<F>,
    pub y: F,
    pub step: usize,
}

impl<F: Scalar> Measurement<F> {
    pub fn model_patch(&self) -> Vec<F> {
        self.content.iter().map(|&v| to_model(v)).collect()
    }
}

/// Ordered measurements of one episode plus the observed coordinates in
/// model space.
#[derive(Debug, Clone, Default)]
pub struct MeasurementLog<F> {
    measurements: Vec<Measurement<F>>,
    observed: Observed<F>,
}

impl<F: Scalar> MeasurementLog<F> {
    pub fn new() -> Self {
        Self {
            measurements: Vec::new(),
            observed: Observed::new(),
        }
    }

    pub fn push(&mut self, m: Measurement<F>, layout: &Layout) -> Result<()> {
        if self.contains(m.location) {
            return Err(Error::RepeatMeasurement(m.location));
        }
        let coords = layout.coords(m.location)?;
        ensure_dim(coords.len(), m.content.len())?;
        for (&c, &v) in coords.iter().zip(&m.content) {
            self.observed.push(c, to_model(v));
        }
        self.measurements.push(m);
        Ok(())
    }

    pub fn contains(&self, location: usize) -> bool {
        self.measurements.iter().any(|m| m.location == location)
    }

    pub fn measurements(&self) -> &[Measurement<F>] {
        &self.measurements
    }

    pub fn observed(&self) -> &Observed<F> {
        &self.observed
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

/// Target definition for generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Cell is target iff its unit value exceeds the threshold.
    Threshold(f64),
    /// Per-component target ratio maps, one per mixture component.
    ComponentLabels(Vec<Vec<f64>>),
}

impl Default for TargetRule {
    fn default() -> Self {
        TargetRule::Threshold(0.5)
    }
}

/// Samples a component by weight, then a grid from it; values are mapped to
/// unit space and clipped to `[0, 1]`.
pub fn gen_gmm_scene<F: Scalar>(
    prior: &GaussianMixturePrior<F>,
    layout: &Layout,
    rule: &TargetRule,
    rng: &mut StreamRng,
) -> Result<Scene<F>> {
    ensure_dim(layout.cells(), prior.dimension())?;
    let u: f64 = rng.gen();
    let comps = prior.components();
    let mut acc = 0.0;
    let mut k = comps.len() - 1;
    for (i, c) in comps.iter().enumerate() {
        acc += c.weight.as_f64();
        if u < acc {
            k = i;
            break;
        }
    }
    let c = &comps[k];
    let sd = c.variance.sqrt();
    let grid: Vec<F> = c
        .mean
        .iter()
        .map(|&m| {
            let z = F::of(rng.sample::<f64, _>(StandardNormal));
            to_unit(m + sd * z).max(F::zero()).min(F::one())
        })
        .collect();
    let target = match rule {
        TargetRule::Threshold(theta) => {
            let th = F::of(*theta);
            grid.iter()
                .map(|&v| if v > th { F::one() } else { F::zero() })
                .collect()
        }
        TargetRule::ComponentLabels(maps) => {
            let map = maps.get(k).ok_or_else(|| {
                Error::config(
                    "scene.target_rule",
                    format!("no label map for component {k}"),
                )
            })?;
            ensure_dim(layout.cells(), map.len())?;
            map.iter().map(|&v| F::of(v)).collect()
        }
    };
    Scene::new(layout.clone(), grid, target, BlockReduce::Mean)
}

/// Parameters of the synthetic blob-field mixture used by the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobPriorConfig {
    pub components: usize,
    pub blobs: (usize, usize),
    pub radius: (f64, f64),
    pub background: f64,
    pub amplitude: f64,
    /// Per-cell variance of each component, model space.
    pub variance: f64,
    pub seed: u64,
}

impl Default for BlobPriorConfig {
    fn default() -> Self {
        Self {
            components: 8,
            blobs: (2, 3),
            radius: (1.2, 2.5),
            background: 0.1,
            amplitude: 0.8,
            variance: 0.01,
            seed: 0,
        }
    }
}

/// Equal-weight mixture whose component means are smooth backgrounds with a
/// few Gaussian bumps at random positions.
pub fn blob_prior<F: Scalar>(
    rows: usize,
    cols: usize,
    cfg: &BlobPriorConfig,
    rng: &mut StreamRng,
) -> Result<GaussianMixturePrior<F>> {
    if cfg.components == 0
        || cfg.blobs.0 > cfg.blobs.1
        || !(cfg.radius.0 > 0.0 && cfg.radius.0 <= cfg.radius.1)
    {
        return Err(Error::config("prior", "invalid blob prior parameters"));
    }
    let w = F::one() / F::of(cfg.components as f64);
    let components = (0..cfg.components)
        .map(|_| {
            let n = rng.gen_range(cfg.blobs.0..=cfg.blobs.1);
            let blobs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..rows as f64),
                        rng.gen_range(0.0..cols as f64),
                        rng.gen_range(cfg.radius.0..=cfg.radius.1),
                    )
                })
                .collect();
            let mean = (0..rows * cols)
                .map(|i| {
                    let (r, c) = ((i / cols) as f64 + 0.5, (i % cols) as f64 + 0.5);
                    let bump: f64 = blobs
                        .iter()
                        .map(|&(br, bc, rad)| {
                            (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * rad * rad)).exp()
                        })
                        .fold(0.0, f64::max);
                    let v = (cfg.background + cfg.amplitude * bump).clamp(0.0, 1.0);
                    to_model(F::of(v))
                })
                .collect();
            MixtureComponent {
                weight: w,
                mean,
                variance: F::of(cfg.variance),
            }
        })
        .collect();
    GaussianMixturePrior::new(components, rows * cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SceneFormat {
    #[default]
    Csv,
    Pgm,
}

impl SceneFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(SceneFormat::Csv),
            "pgm" => Some(SceneFormat::Pgm),
            _ => None,
        }
    }
}

/// Where per-cell target ratios come from when loading a grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetChannel {
    /// `y = 1` where the normalized value exceeds the threshold.
    Threshold(f64),
    /// Sibling `<name>.target.csv` with per-cell ratios.
    TargetFile,
    /// Values are occurrence counts; `y` is the count share of the busiest block.
    Counts,
}

pub fn target_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    path.with_file_name(format!("{stem}.target.csv"))
}

fn read_csv_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut rows = 0;
    let mut cols = None;
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::parse(
                path,
                format!("row {rows} has {} fields", rec.len()),
            ));
        }
        for f in rec.iter() {
            values.push(
                f.parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("`{f}`: {e}")))?,
            );
        }
        rows += 1;
    }
    match cols {
        Some(c) if rows > 0 => Ok((rows, c, values)),
        _ => Err(Error::parse(path, "empty grid")),
    }
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::parse(path, e.to_string()))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let values = img
        .pixels()
        .map(|p| p.0[0] as f64 / u16::MAX as f64)
        .collect();
    Ok((h as usize, w as usize, values))
}

/// Loads a grid file. CSV values already in `[0, 1]` are kept, otherwise
/// they are min-max rescaled; PGM pixels are divided by the max value.
pub fn load_scene<F: Scalar>(
    path: &Path,
    format: SceneFormat,
    target: &TargetChannel,
    block: usize,
) -> Result<Scene<F>> {
    let (rows, cols, raw) = match format {
        SceneFormat::Csv => read_csv_grid(path)?,
        SceneFormat::Pgm => read_pgm(path)?,
    };
    let layout = Layout::new(rows, cols, block)?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::parse(path, "non-finite cell value"));
    }
    let grid: Vec<f64> = if lo >= 0.0 && hi <= 1.0 {
        raw.clone()
    } else if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; raw.len()]
    };
    let (cell_target, reduce) = match target {
        TargetChannel::Threshold(th) => (
            grid.iter()
                .map(|&v| if v > *th { 1.0 } else { 0.0 })
                .collect(),
            BlockReduce::Mean,
        ),
        TargetChannel::TargetFile => {
            let tp = target_path(path);
            let (r, c, t) = read_csv_grid(&tp)?;
            if (r, c) != (rows, cols) {
                return Err(Error::parse(
                    &tp,
                    format!("target grid is {r}x{c}, scene is {rows}x{cols}"),
                ));
            }
            (t, BlockReduce::Mean)
        }
        TargetChannel::Counts => {
            if lo < 0.0 {
                return Err(Error::parse(path, "counts must be non-negative"));
            }
            let max = if hi > 0.0 { hi } else { 1.0 };
            (
                raw.iter().map(|v| v / max).collect(),
                BlockReduce::CountRatio,
            )
        }
    };
    Scene::new(
        layout,
        grid.into_iter().map(F::of).collect(),
        cell_target.into_iter().map(F::of).collect(),
        reduce,
    )
}

fn write_csv_grid<F: Scalar>(path: &Path, cols: usize, values: &[F]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    for row in values.chunks(cols) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the grid (and for CSV the sibling target file). PGM output is
/// 8-bit binary, so only grids on the `k/255` lattice survive exactly.
pub fn save_scene<F: Scalar>(scene: &Scene<F>, path: &Path, format: SceneFormat) -> Result<()> {
    let l = scene.layout();
    match format {
        SceneFormat::Csv => {
            write_csv_grid(path, l.cols(), scene.grid())?;
            write_csv_grid(&target_path(path), l.cols(), scene.cell_target())
        }
        SceneFormat::Pgm => {
            let mut bytes = format!("P5\n{} {}\n255\n", l.cols(), l.rows()).into_bytes();
            bytes.extend(
                scene
                    .grid()
                    .iter()
                    .map(|v| (v.as_f64() * 255.0).round() as u8),
            );
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
    }
}

/// Equal-weight mixture with one component per grid file in `dir`.
pub fn empirical_prior_from_dir<F: Scalar>(
    dir: &Path,
    variance: f64,
) -> Result<GaussianMixturePrior<F>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            SceneFormat::from_path(p).is_some() && !p.to_string_lossy().ends_with(".target.csv")
        })
        .collect();
    paths.sort();
    let examples = paths
        .iter()
        .map(|p| {
            let fmt = SceneFormat::from_path(p).unwrap();
            load_scene::<F>(p, fmt, &TargetChannel::Threshold(1.0), 1).map(|s| s.model_grid())
        })
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(Error::parse(dir, "no .csv or .pgm grids found"));
    }
    let dim = examples[0].len();
    if let Some(bad) = examples.iter().position(|e| e.len() != dim) {
        return Err(Error::parse(
            &paths[bad],
            "grid size differs from the rest of the corpus",
        ));
    }
    GaussianMixturePrior::empirical(examples, F::of(variance))
}
