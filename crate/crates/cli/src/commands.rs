use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lsirt_core::classic::{fbp_2d, fdk_3d, sirt, FilterKind, FilterSpec, SirtConfig};
use lsirt_core::io::{read_sinogram, read_volume, write_sinogram, write_volume, ValueScale};
use lsirt_core::lsirt::{reconstruct_with_snapshots, train_with, DataSource, Dataset, Problem};
use lsirt_core::metrics::{self, Plane, RoiSpec};
use lsirt_core::nn::Model;
use lsirt_core::phantoms::{add_noise, gen_ellipsoids, gen_gaussian_square, gen_triangles, shepp_logan};
use lsirt_core::{Geometry, GridSpec, Projector, RngSeed, Volume};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{parse_variant, preset, GeometryConfig, NoiseConfig, RunConfig, SourceKind};
use crate::{CliError, EvalArgs, ExportArgs, PhantomArgs, ReconstructArgs, SimulateArgs, TrainArgs};

fn expand_dims(dims: &[usize], ndim: usize) -> Result<Vec<usize>, CliError> {
    match dims.len() {
        1 => Ok(vec![dims[0]; ndim]),
        n if n == ndim => Ok(dims.to_vec()),
        n => Err(CliError::Config(format!("expected 1 or {ndim} dimensions, got {n}"))),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn phantom(a: PhantomArgs) -> Result<(), CliError> {
    let seed = RngSeed(a.seed);
    let vol = match a.family.as_str() {
        "triangles" => {
            let d = expand_dims(&a.dims, 2)?;
            gen_triangles(seed, [d[0], d[1]], a.pitch)?
        }
        "ellipsoids" => {
            let d = expand_dims(&a.dims, 3)?;
            gen_ellipsoids(seed, [d[0], d[1], d[2]], a.pitch)?
        }
        "shepp2d" => shepp_logan(&expand_dims(&a.dims, 2)?, a.pitch)?,
        "shepp3d" => shepp_logan(&expand_dims(&a.dims, 3)?, a.pitch)?,
        "gauss-square" => {
            let d = expand_dims(&a.dims, 2)?;
            gen_gaussian_square(a.amplitude, [d[0], d[1]], a.pitch)?
        }
        f => {
            return Err(CliError::Config(format!(
                "unknown phantom family {f:?}; use triangles, ellipsoids, shepp2d, shepp3d or gauss-square"
            )))
        }
    };
    write_volume(&a.out, &vol, ValueScale::Raw)?;
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let geo: Geometry = match (&a.geometry, &a.preset) {
        (Some(path), _) => GeometryConfig::load(path)?.build()?,
        (None, Some(name)) => preset(name)?.geometry.build()?,
        (None, None) => return Err(CliError::Config("simulate needs --geometry or --preset".into())),
    };
    let level = NoiseConfig::parse(&a.noise)?.level()?;
    let (vol, _) = read_volume(&a.volume)?;
    let op = Projector::new(vol.grid.clone(), geo)?;
    let clean = op.project(&vol)?;
    let y = add_noise(&clean, level, RngSeed(a.seed))?;
    write_sinogram(&a.out, &y)?;
    Ok(())
}

fn parse_filter(kind: &str, cutoff: f64) -> Result<FilterSpec, CliError> {
    let kind = match kind {
        "none" => FilterKind::None,
        "ramp" | "ram-lak" => FilterKind::Ramp,
        "hann" => FilterKind::Hann,
        k => return Err(CliError::Config(format!("unknown filter {k:?}"))),
    };
    Ok(FilterSpec::new(kind, cutoff)?)
}

pub fn reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    let y = read_sinogram(&a.sinogram)?;
    let grid = GridSpec::new(&a.dims, a.pitch)?;
    let start = Instant::now();
    let mut info = Map::new();
    let vol = match (a.algo.as_str(), &y.geometry) {
        ("fbp", Geometry::Parallel(g)) => fbp_2d(&y, g, &grid, parse_filter(&a.filter, a.cutoff)?)?,
        ("fdk", Geometry::Cone(g)) => fdk_3d(&y, g, &grid, parse_filter(&a.filter, a.cutoff)?)?,
        ("fbp", _) | ("fdk", _) => {
            return Err(CliError::Config(format!("{} does not match the sinogram geometry", a.algo)))
        }
        ("sirt", geo) => {
            let cfg = if a.fixed_step { SirtConfig::fixed_step(a.iters, a.lambda) } else { SirtConfig::scaled(a.iters) };
            info.insert("iterations".into(), json!(a.iters));
            sirt(&y, geo, &grid, cfg)?
        }
        ("lsirt", geo) => {
            let path = a.model.as_ref().ok_or_else(|| CliError::Config("lsirt needs --model".into()))?;
            let (model, _) = Model::<f32>::load(path)?;
            let problem = Problem::new(grid.clone(), geo.clone())?;
            let rec = reconstruct_with_snapshots(&y, &problem, &model, a.alpha, a.iters, &a.snapshots)?;
            for (k, v) in &rec.snapshots {
                write_volume(with_suffix(&a.out, &format!("_{k}.tvol")), v, ValueScale::Raw)?;
            }
            info.insert("iterations".into(), json!(a.iters));
            info.insert("alpha".into(), json!(a.alpha));
            info.insert("snapshots".into(), json!(a.snapshots));
            rec.volume
        }
        (other, _) => return Err(CliError::Config(format!("unknown algorithm {other:?}"))),
    };
    let seconds = start.elapsed().as_secs_f64();
    write_volume(&a.out, &vol, ValueScale::Raw)?;
    info.insert("algo".into(), json!(a.algo));
    info.insert("dims".into(), json!(a.dims));
    info.insert("pitch".into(), json!(a.pitch));
    info.insert("seconds".into(), json!(seconds));
    write_json(&with_suffix(&a.out, ".json"), &Value::Object(info))
}

fn load_volumes(dir: &Path, hu_scale: bool) -> Result<Vec<Volume>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tvol"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let (mut v, scale) = read_volume(&p)?;
        if hu_scale && scale == ValueScale::Raw {
            v.data.iter_mut().for_each(|x| *x *= 1e-3);
        }
        out.push(v);
    }
    Ok(out)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: RunConfig = match (&a.preset, &a.config) {
        (_, Some(path)) => RunConfig::load(path)?,
        (Some(name), None) => preset(name)?,
        (None, None) => return Err(CliError::Config("train needs --preset or --config".into())),
    };
    if let Some(v) = &a.variant {
        cfg.lsirt.variant = parse_variant(v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.lsirt.n_iter = n;
    }
    if let Some(d) = &a.data_dir {
        cfg.data.source = SourceKind::Volumes;
        cfg.data.dir = Some(d.clone());
    }
    if let Some(n) = a.checkpoint_every {
        cfg.output.checkpoint_every = n;
    }
    if let Some(d) = &a.out_dir {
        cfg.output.dir = d.clone();
    }
    cfg.validate()?;

    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| CliError::io(&cfg_path, e))?;

    let source = match cfg.data.source {
        SourceKind::Triangles => DataSource::Triangles,
        SourceKind::Ellipsoids => DataSource::Ellipsoids,
        SourceKind::Volumes => {
            DataSource::Volumes(load_volumes(cfg.data.dir.as_deref().expect("validated"), cfg.data.hu_scale)?)
        }
    };
    let dataset = Dataset::new(source, cfg.data.noise.level()?);
    let problem = Problem::new(cfg.grid.build()?, cfg.geometry.build()?)?;

    let csv_path = out.join("metrics.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    csv.write_record(["step", "loss", "lr", "wall_time"]).map_err(|e| CliError::io(&csv_path, e))?;
    let every = cfg.output.checkpoint_every;
    let total = cfg.lsirt.n_iter;
    let trained = train_with(&dataset, &problem, &cfg.lsirt, RngSeed(cfg.seed), |r, model, adam| {
        csv.serialize((r.step, r.loss, r.lr, r.seconds)).map_err(std::io::Error::from)?;
        let done = r.step + 1;
        if every > 0 && done % every == 0 && done < total {
            csv.flush()?;
            model.save(out.join(format!("checkpoint_{done:06}.lsnn")), Some(adam))?;
        }
        if done % 100 == 0 || done == total {
            eprintln!("step {done}/{total} loss {:.4} lr {:.2e} {:.1}s", r.loss, r.lr, r.seconds);
        }
        Ok(true)
    })?;
    csv.flush().map_err(|e| CliError::io(&csv_path, e))?;
    trained.model.save(out.join("model.lsnn"), Some(&trained.adam))?;
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct EdgeRoi {
    roi: RoiSpec,
    center: [f64; 3],
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RoiFile {
    insert: Option<RoiSpec>,
    #[serde(default)]
    surround: Vec<RoiSpec>,
    edge: Option<EdgeRoi>,
}

fn finite_or_text(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!(v.to_string())
    }
}

fn default_index(vol: &Volume, plane: Plane) -> usize {
    let [nx, ny, nz] = vol.grid.shape();
    match plane {
        Plane::Axial => nz / 2,
        Plane::Coronal => ny / 2,
        Plane::Sagittal => nx / 2,
    }
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (recon, _) = read_volume(&a.recon)?;
    let truth = a.truth.as_ref().map(read_volume).transpose()?.map(|(v, _)| v);
    let rois: Option<RoiFile> = match &a.rois {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut report = Map::new();
    report.insert("recon".into(), json!(a.recon.display().to_string()));
    for m in &a.metrics {
        match m.as_str() {
            "psnr" | "ssim" => {
                let t = truth.as_ref().ok_or_else(|| CliError::Config(format!("{m} needs --truth")))?;
                let range = a.data_range.unwrap_or_else(|| metrics::reference_range(t));
                report.insert("data_range".into(), json!(range));
                let v = if m == "psnr" { metrics::psnr(&recon, t, range)? } else { metrics::ssim(&recon, t, range)? };
                report.insert(m.clone(), finite_or_text(v));
            }
            "cnr" => {
                let r = rois.as_ref().and_then(|r| r.insert.as_ref().map(|i| (i, &r.surround)));
                let (insert, surround) = r.ok_or_else(|| CliError::Config("cnr needs --rois with an insert".into()))?;
                report.insert("cnr".into(), finite_or_text(metrics::cnr(&recon, insert, surround)?));
            }
            "fwhm" => {
                let edge = rois
                    .as_ref()
                    .and_then(|r| r.edge.as_ref())
                    .ok_or_else(|| CliError::Config("fwhm needs --rois with an [edge] section".into()))?;
                let (fit, fwhm) = metrics::edge_fwhm(&recon, &edge.roi, edge.center)?;
                report.insert("fwhm".into(), json!(fwhm));
                report.insert("edge_fit".into(), serde_json::to_value(fit).expect("plain numbers"));
            }
            "dft-slice" => {
                let plane: Plane = a.plane.parse()?;
                let index = a.index.unwrap_or_else(|| default_index(&recon, plane));
                let img = metrics::dft_magnitude_slice(&recon, plane, index)?;
                let path = with_suffix(&a.out, "_dft.tvol");
                write_volume(&path, &img, ValueScale::Raw)?;
                report.insert("dft_slice".into(), json!(path.display().to_string()));
                report.insert("dft_plane".into(), json!(a.plane));
                report.insert("dft_index".into(), json!(index));
            }
            other => return Err(CliError::Config(format!("unknown metric {other:?}"))),
        }
    }
    if let Some(r) = report.get("data_range") {
        eprintln!("data range {r}");
    }
    let report = Value::Object(report);
    write_json(&a.out, &report)?;

    let csv_path = a.out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let obj = report.as_object().expect("object");
    let keys: Vec<&String> = obj.keys().filter(|k| !obj[*k].is_object()).collect();
    let cell = |v: &Value| v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string());
    w.write_record(keys.iter().map(|k| k.as_str())).map_err(|e| CliError::io(&csv_path, e))?;
    w.write_record(keys.iter().map(|k| cell(&obj[*k]))).map_err(|e| CliError::io(&csv_path, e))?;
    w.flush().map_err(|e| CliError::io(&csv_path, e))
}

/// Linear window onto 0..=255 with floor rounding; `lo` maps to 0 and `hi`
/// to 255.
pub fn window_pixel(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).floor() as u8
}

pub fn export(a: ExportArgs) -> Result<(), CliError> {
    let &[lo, hi] = a.window.as_slice() else {
        return Err(CliError::Config(format!("window needs two values lo,hi, got {:?}", a.window)));
    };
    if !(lo < hi) {
        return Err(CliError::Config(format!("window must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    let (vol, _) = read_volume(&a.volume)?;
    let plane: Plane = a.plane.parse()?;
    let index = a.index.unwrap_or_else(|| default_index(&vol, plane));
    let img = metrics::slice(&vol, plane, index)?;
    let [w, h, _] = img.grid.shape();
    let to_display = if a.hu { 1e3 } else { 1.0 };
    let pixels: Vec<u8> = img.data.iter().map(|&v| window_pixel(v * to_display, lo, hi)).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches slice");
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("png") => buf.save_with_format(&a.out, image::ImageFormat::Png).map_err(|e| CliError::io(&a.out, e)),
        Some("pgm") => {
            use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
            let file = fs::File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
            PnmEncoder::new(std::io::BufWriter::new(file))
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .encode(buf.as_raw().as_slice(), w as u32, h as u32, image::ExtendedColorType::L8)
                .map_err(|e| CliError::io(&a.out, e))
        }
        _ => Err(CliError::Config("output image must end in .png or .pgm".into())),
    }
}
