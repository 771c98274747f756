//! Subcommands. Pipeline stages parse into the same types, so a stage and
//! the corresponding subcommand run identical code.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use tomoseg_core::attenuation::{self, AttenuationModel, MineralTable};
use tomoseg_core::binarize::{self, BinarizeParams, Floor, SauvolaParams};
use tomoseg_core::descriptors;
use tomoseg_core::mergegraph::{self, EdgeRecord};
use tomoseg_core::neuralnet::{self, MlpModel, Sample, TrainConfig};
use tomoseg_core::phantom::{self, PhantomSpec};
use tomoseg_core::prefilter::{self, NlmParams, UnsharpParams};
use tomoseg_core::register::{self, RegisterOptions, RegistrationResult};
use tomoseg_core::volgrid::{self, AnyVolume};
use tomoseg_core::watershed::{self, WatershedParams};
use tomoseg_core::{Axis, Grid2};

use crate::files;

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Non-local means denoising of a u16 volume.
    Denoise(DenoiseArgs),
    /// Unsharp masking of a u16 volume.
    Unsharp(UnsharpArgs),
    /// Sauvola thresholding followed by a morphological opening.
    Binarize(BinarizeArgs),
    /// Marker-based watershed of a binary mask.
    Watershed(WatershedArgs),
    /// Writes the per-edge feature table of a labeling.
    EdgeFeatures(EdgeFeaturesArgs),
    /// Trains the merge classifier on an edge-feature table.
    TrainMerge(TrainMergeArgs),
    /// Merges oversegmented regions with a trained classifier.
    Merge(MergeArgs),
    /// Size and shape descriptors of a label plane.
    Descriptors(DescriptorsArgs),
    /// Places a 2D section inside a binary volume.
    Register(RegisterArgs),
    /// Attenuation calibration, prediction and validation.
    #[command(subcommand)]
    Attenuation(AttenuationCommand),
    /// Generates a synthetic particle system.
    Phantom(PhantomArgs),
}

#[derive(Subcommand, Debug, Clone)]
pub enum AttenuationCommand {
    /// Fits rho*mu_m against mean grayscale along a registered section.
    Fit(FitArgs),
    /// Applies a fitted model voxelwise.
    Predict(PredictArgs),
    /// Compares predictions with tabulated values on another section.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DenoiseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Filter strength; estimated from the noise level when omitted.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub patch: usize,
    #[arg(long, default_value_t = 5)]
    pub search: usize,
}

#[derive(Args, Debug, Clone)]
pub struct UnsharpArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub c: f64,
    #[arg(long, default_value_t = 2.0)]
    pub blur_sigma: f64,
}

#[derive(Args, Debug, Clone)]
pub struct BinarizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Half width of the Sauvola window.
    #[arg(long, default_value_t = 15)]
    pub window: usize,
    #[arg(long, default_value_t = 0.34)]
    pub k: f64,
    #[arg(long, default_value_t = 32768.0)]
    pub r: f64,
    #[arg(long, default_value_t = 1)]
    pub open_radius: usize,
    /// Global floor: `otsu`, `none` or a gray value.
    #[arg(long, default_value = "otsu")]
    pub floor: String,
}

#[derive(Args, Debug, Clone)]
pub struct WatershedArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub h_depth: f64,
    #[arg(long, default_value_t = 26)]
    pub conn: u8,
}

#[derive(Args, Debug, Clone)]
pub struct EdgeFeaturesArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub gray: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth particle labels; fills the label column.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainMergeArgs {
    /// One or more edge-feature tables, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "grid")]
    pub hidden: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct MergeArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub gray: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
}

#[derive(Args, Debug, Clone)]
pub struct DescriptorsArgs {
    /// u32 particle labels, or a u8/bit plane whose 8-connected
    /// components are the particles.
    #[arg(long)]
    pub labels: PathBuf,
    /// `axis,index` of the slice to analyze in a volume.
    #[arg(long)]
    pub slice: Option<String>,
    /// Pixel size; defaults to the file's spacing.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-descriptor histograms.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Args, Debug, Clone)]
pub struct RegisterArgs {
    #[arg(long)]
    pub vol: PathBuf,
    #[arg(long)]
    pub plane: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,2,1")]
    pub pyramid: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Grayscale volume; omit with `--published`.
    #[arg(long, required_unless_present = "published")]
    pub gray: Option<PathBuf>,
    /// Mineral-code section.
    #[arg(long, required_unless_present = "published")]
    pub plane: Option<PathBuf>,
    /// Registration result of the section.
    #[arg(long, required_unless_present = "published")]
    pub transform: Option<PathBuf>,
    /// Fit the table's own mean grayscale column instead of a section.
    #[arg(long)]
    pub published: bool,
    /// Mineral table CSV; the built-in table when omitted.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Weight minerals by phase size.
    #[arg(long)]
    pub weighted: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub gray: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Restricts the prediction to these voxels.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// u16 volume of `rho*mu_m * scale`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10000.0)]
    pub scale: f64,
    /// Bit volume of masked voxels outside the calibrated range.
    #[arg(long)]
    pub flags: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ValidateArgs {
    #[arg(long)]
    pub gray: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plane: PathBuf,
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Scatter CSV `mineral,predicted,true`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct PhantomArgs {
    /// key=value specification; defaults for missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub table: Option<PathBuf>,
}

fn table(path: &Option<PathBuf>) -> Result<MineralTable> {
    match path {
        Some(p) => MineralTable::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(MineralTable::builtin()),
    }
}

fn read_transform(path: &Path) -> Result<register::RigidTransform> {
    RegistrationResult::parse_transform(&files::read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn parse_slice(s: &str) -> Result<(Axis, usize)> {
    let (a, i) = s.split_once(',').context("slice must be `axis,index`")?;
    let axis = match a.trim() {
        "x" => Axis::X,
        "y" => Axis::Y,
        "z" => Axis::Z,
        other => bail!("unknown axis '{other}'"),
    };
    Ok((axis, i.trim().parse().context("bad slice index")?))
}

/// Section at volume pitch. A plane finer than the volume is resampled
/// by nearest pixel over its full extent.
fn plane_mask(plane_path: &Path, vol_spacing: f64) -> Result<tomoseg_core::BinaryPlane> {
    let plane = files::load_label_plane(plane_path)?;
    let s = plane.spacing() / vol_spacing;
    let size = (
        ((plane.nx() - 1) as f64 * s + 1e-9).floor() as usize + 1,
        ((plane.ny() - 1) as f64 * s + 1e-9).floor() as usize + 1,
    );
    Ok(phantom::section_mask(&plane, vol_spacing, size)?)
}

impl Command {
    /// Files read by the command, volume sidecars included.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let vols: Vec<&PathBuf>;
        let mut plain: Vec<&PathBuf> = Vec::new();
        match self {
            Command::Denoise(a) => vols = vec![&a.input],
            Command::Unsharp(a) => vols = vec![&a.input],
            Command::Binarize(a) => vols = vec![&a.input],
            Command::Watershed(a) => vols = vec![&a.mask],
            Command::EdgeFeatures(a) => vols = [Some(&a.labels), Some(&a.gray), a.truth.as_ref()].into_iter().flatten().collect(),
            Command::TrainMerge(a) => {
                vols = vec![];
                plain = a.features.iter().collect();
            }
            Command::Merge(a) => {
                vols = vec![&a.labels, &a.gray];
                plain = vec![&a.model];
            }
            Command::Descriptors(a) => vols = vec![&a.labels],
            Command::Register(a) => vols = vec![&a.vol, &a.plane],
            Command::Attenuation(AttenuationCommand::Fit(a)) => {
                vols = [a.gray.as_ref(), a.plane.as_ref()].into_iter().flatten().collect();
                plain = [a.transform.as_ref(), a.table.as_ref()].into_iter().flatten().collect();
            }
            Command::Attenuation(AttenuationCommand::Predict(a)) => {
                vols = [Some(&a.gray), a.mask.as_ref()].into_iter().flatten().collect();
                plain = vec![&a.model];
            }
            Command::Attenuation(AttenuationCommand::Validate(a)) => {
                vols = vec![&a.gray, &a.plane];
                plain = [Some(&a.model), Some(&a.transform), a.table.as_ref()].into_iter().flatten().collect();
            }
            Command::Phantom(a) => {
                vols = vec![];
                plain = [a.spec.as_ref(), a.table.as_ref()].into_iter().flatten().collect();
            }
        }
        let mut out: Vec<PathBuf> = Vec::new();
        for v in vols {
            out.push(v.clone());
            out.push(volgrid::meta_path(v));
        }
        out.extend(plain.into_iter().cloned());
        out
    }

    /// Files written by the command; for a phantom, everything in its
    /// output directory after the run.
    pub fn outputs(&self) -> Vec<PathBuf> {
        let vol = |p: &PathBuf| vec![p.clone(), volgrid::meta_path(p)];
        match self {
            Command::Denoise(a) => vol(&a.out),
            Command::Unsharp(a) => vol(&a.out),
            Command::Binarize(a) => vol(&a.out),
            Command::Watershed(a) => vol(&a.out),
            Command::EdgeFeatures(a) => vec![a.out.clone()],
            Command::TrainMerge(a) => vec![a.out.clone()],
            Command::Merge(a) => vol(&a.out),
            Command::Descriptors(a) => {
                let mut v = vec![a.out.clone()];
                if let Some(dir) = &a.hist {
                    v.extend(descriptors::DESCRIPTOR_NAMES.iter().map(|n| dir.join(format!("{n}.csv"))));
                }
                v
            }
            Command::Register(a) => vec![a.out.clone()],
            Command::Attenuation(AttenuationCommand::Fit(a)) => vec![a.out.clone()],
            Command::Attenuation(AttenuationCommand::Predict(a)) => {
                let mut v = vol(&a.out);
                if let Some(f) = &a.flags {
                    v.extend(vol(f));
                }
                v
            }
            Command::Attenuation(AttenuationCommand::Validate(a)) => vec![a.out.clone()],
            Command::Phantom(a) => {
                let mut v: Vec<PathBuf> = std::fs::read_dir(&a.out_dir)
                    .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect())
                    .unwrap_or_default();
                v.sort();
                v
            }
        }
    }

    /// Runs the command and returns a short report for the terminal.
    pub fn run(&self) -> Result<String> {
        match self {
            Command::Denoise(a) => denoise(a),
            Command::Unsharp(a) => unsharp(a),
            Command::Binarize(a) => run_binarize(a),
            Command::Watershed(a) => run_watershed(a),
            Command::EdgeFeatures(a) => edge_features(a),
            Command::TrainMerge(a) => train_merge(a),
            Command::Merge(a) => merge(a),
            Command::Descriptors(a) => run_descriptors(a),
            Command::Register(a) => run_register(a),
            Command::Attenuation(AttenuationCommand::Fit(a)) => fit(a),
            Command::Attenuation(AttenuationCommand::Predict(a)) => predict(a),
            Command::Attenuation(AttenuationCommand::Validate(a)) => validate(a),
            Command::Phantom(a) => run_phantom(a),
        }
    }
}

fn denoise(a: &DenoiseArgs) -> Result<String> {
    let vol = files::load_scalar(&a.input)?;
    let base = match a.h {
        Some(h) => NlmParams { h, ..NlmParams::default() },
        None => NlmParams::estimated_for(&vol),
    };
    let p = NlmParams {
        sigma: a.sigma,
        patch_radius: a.patch,
        search_radius: a.search,
        ..base
    };
    let out = prefilter::nonlocal_means(&vol, &p)?;
    files::save(&a.out, AnyVolume::U16(out))?;
    Ok(format!("h {}", p.h))
}

fn unsharp(a: &UnsharpArgs) -> Result<String> {
    let vol = files::load_scalar(&a.input)?;
    let p = UnsharpParams {
        c: a.c,
        blur_sigma: a.blur_sigma,
    };
    files::save(&a.out, AnyVolume::U16(prefilter::unsharp_mask(&vol, &p)?))?;
    Ok(String::new())
}

fn run_binarize(a: &BinarizeArgs) -> Result<String> {
    let vol = files::load_scalar(&a.input)?;
    let floor = match a.floor.trim() {
        "otsu" => Floor::Otsu,
        "none" => Floor::None,
        v => Floor::Fixed(v.parse().with_context(|| format!("bad floor '{v}'"))?),
    };
    let p = BinarizeParams {
        sauvola: SauvolaParams {
            window_radius: a.window,
            k: a.k,
            r: a.r,
        },
        floor,
        open_radius: a.open_radius,
    };
    let mask = binarize::binarize(&vol, &p)?;
    let n = mask.count();
    files::save(&a.out, AnyVolume::Bit(mask))?;
    Ok(format!("foreground voxels {n}"))
}

fn run_watershed(a: &WatershedArgs) -> Result<String> {
    let mask = files::load_binary(&a.mask)?;
    let p = WatershedParams {
        h_depth: a.h_depth,
        connectivity: a.conn,
    };
    let labels = watershed::segment(&mask, &p)?;
    let n = labels.max_label();
    files::save(&a.out, AnyVolume::U32(labels))?;
    Ok(format!("regions {n}"))
}

fn edge_features(a: &EdgeFeaturesArgs) -> Result<String> {
    let labels = files::load_labels(&a.labels)?;
    let gray = files::load_scalar(&a.gray)?;
    let graph = mergegraph::build_region_graph(&labels);
    let grad = mergegraph::sobel_gradient_magnitude(&gray);
    let feats = mergegraph::extract_edge_features(&graph, &gray, &grad, &labels)?;
    let (rows, note) = match &a.truth {
        Some(t) => {
            let truth = files::load_labels(t)?;
            let ds = phantom::edge_training_set(&truth, &labels, &graph, &feats)?;
            let note = format!(
                "positive {} negative {} excluded {}",
                ds.positives(),
                ds.negatives(),
                ds.excluded_edges
            );
            (ds.records, note)
        }
        None => {
            let rows = graph
                .edges
                .iter()
                .zip(&feats)
                .map(|(e, f)| EdgeRecord {
                    v1: e.a,
                    v2: e.b,
                    features: *f,
                    label: None,
                })
                .collect();
            (rows, format!("edges {}", feats.len()))
        }
    };
    mergegraph::write_edge_csv(&a.out, &rows)?;
    Ok(note)
}

fn train_merge(a: &TrainMergeArgs) -> Result<String> {
    let mut samples = Vec::new();
    for p in &a.features {
        for r in mergegraph::read_edge_csv(p)? {
            if let Some(l) = r.label {
                samples.push(Sample::new(r.features.to_vec(), l as f64));
            }
        }
    }
    if samples.is_empty() {
        bail!("no labeled edges in the feature tables");
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        rng_seed: a.seed,
        ..TrainConfig::default()
    };
    let grid = match (&a.hidden, &a.grid) {
        (Some(m), _) => vec![*m],
        (None, Some(g)) => g.clone(),
        (None, None) => neuralnet::DEFAULT_GRID.to_vec(),
    };
    let res = neuralnet::grid_search(&samples, &grid, &cfg)?;
    res.model.save(&a.out)?;
    let losses: Vec<String> = res.losses.iter().map(|(m, l)| format!("{m}:{l:.4}")).collect();
    Ok(format!("samples {} hidden {} losses {}", samples.len(), res.best_m, losses.join(" ")))
}

fn merge(a: &MergeArgs) -> Result<String> {
    let labels = files::load_labels(&a.labels)?;
    let gray = files::load_scalar(&a.gray)?;
    let model = MlpModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let graph = mergegraph::build_region_graph(&labels);
    let grad = mergegraph::sobel_gradient_magnitude(&gray);
    let feats = mergegraph::extract_edge_features(&graph, &gray, &grad, &labels)?;
    let xs: Vec<Vec<f64>> = feats.iter().map(|f| f.to_vec()).collect();
    let weights = model.predict_many(&xs)?;
    let merged = mergegraph::merge_regions(&labels, &graph, &weights, a.lambda)?;
    let report = format!("regions {} -> {}", labels.max_label(), merged.max_label());
    files::save(&a.out, AnyVolume::U32(merged))?;
    Ok(report)
}

fn run_descriptors(a: &DescriptorsArgs) -> Result<String> {
    let any = files::load(&a.labels)?;
    let d = any.dims();
    let (axis, index) = match &a.slice {
        Some(s) => parse_slice(s)?,
        None if d.nz == 1 => (Axis::Z, 0),
        None => bail!("{} is a volume; pick a plane with --slice axis,index", a.labels.display()),
    };
    let mut plane: Grid2<u32> = match any {
        AnyVolume::U32(v) => volgrid::extract_slice(&v, axis, index)?,
        AnyVolume::U8(v) => descriptors::label_components(&volgrid::extract_slice(&v, axis, index)?),
        AnyVolume::Bit(v) => descriptors::label_components(&volgrid::extract_slice(&v, axis, index)?),
        AnyVolume::U16(_) => bail!("{}: descriptors need labels, found u16", a.labels.display()),
    };
    if let Some(s) = a.spacing {
        plane = Grid2::from_vec(plane.nx(), plane.ny(), s, plane.data().to_vec())?;
    }
    let table = descriptors::describe_plane(&plane);
    descriptors::write_rows(&a.out, &table.rows)?;
    if let Some(dir) = &a.hist {
        if !table.rows.is_empty() {
            descriptors::export_distributions(&table.rows, a.bins, dir)?;
        }
    }
    Ok(format!("particles {} clamped {}", table.rows.len(), table.clamped))
}

fn run_register(a: &RegisterArgs) -> Result<String> {
    let vol = files::load_binary(&a.vol)?;
    let mask = plane_mask(&a.plane, vol.spacing())?;
    let opts = RegisterOptions {
        pyramid: a.pyramid.clone(),
        max_iter: a.max_iter,
        ..RegisterOptions::default()
    };
    let res = register::register_section(&vol, &mask, &opts)?;
    files::write_text(&a.out, &res.to_text())?;
    let mut note = format!("normalized overlap {:.4}", res.normalized_overlap);
    if res.is_degenerate() {
        note.push_str(" (degenerate: less than half of the section matched)");
    }
    Ok(note)
}

fn fit(a: &FitArgs) -> Result<String> {
    let table = table(&a.table)?;
    let samples = if a.published {
        attenuation::table_samples(&table)
    } else {
        let (Some(g), Some(p), Some(t)) = (&a.gray, &a.plane, &a.transform) else {
            bail!("--gray, --plane and --transform are required without --published");
        };
        let vol = files::load_scalar(g)?;
        let plane = files::load_label_plane(p)?;
        let (samples, absent) = attenuation::section_samples(&vol, &read_transform(t)?, &plane, &table)?;
        if !absent.is_empty() {
            eprintln!("minerals absent from the section: {}", absent.join(", "));
        }
        samples
    };
    let model = attenuation::fit_attenuation(&samples, a.weighted)?;
    model.save(&a.out)?;
    let mu = attenuation::mu_only_fit(&samples).map(|f| format!("{:.4}", f.r_squared)).unwrap_or_else(|_| "n/a".into());
    Ok(format!(
        "slope {:e} intercept {:.4} r2 {:.4} (mu-only r2 {mu})",
        model.slope, model.intercept, model.r_squared
    ))
}

fn predict(a: &PredictArgs) -> Result<String> {
    if !(a.scale > 0.0) {
        bail!("--scale must be positive");
    }
    let vol = files::load_scalar(&a.gray)?;
    let model = AttenuationModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let mask = a.mask.as_ref().map(|m| files::load_binary(m)).transpose()?;
    let (pred, flags) = attenuation::predict_map(&vol, &model, mask.as_ref())?;
    let scaled = pred.map(|&v| prefilter::to_u16(v * a.scale));
    files::save(&a.out, AnyVolume::U16(scaled))?;
    let outside = flags.count();
    if let Some(f) = &a.flags {
        files::save(f, AnyVolume::Bit(flags))?;
    }
    Ok(format!("voxels outside the calibrated range {outside}"))
}

fn validate(a: &ValidateArgs) -> Result<String> {
    let table = table(&a.table)?;
    let vol = files::load_scalar(&a.gray)?;
    let model = AttenuationModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let plane = files::load_label_plane(&a.plane)?;
    let report = attenuation::validate_section(&vol, &model, &read_transform(&a.transform)?, &plane, &table)?;
    files::write_text(&a.out, &report.to_csv())?;
    let mut note = format!("max relative error {:.4}", report.max_relative_error());
    if !report.skipped.is_empty() {
        note.push_str(&format!("; skipped {}", report.skipped.join(", ")));
    }
    Ok(note)
}

fn run_phantom(a: &PhantomArgs) -> Result<String> {
    let table = table(&a.table)?;
    let mut spec = match &a.spec {
        Some(p) => PhantomSpec::parse(&files::read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = phantom::generate(&spec, &table)?;
    out.write(&a.out_dir)?;
    Ok(format!("particles {} sections {}", out.particles.len(), out.sections.len()))
}
