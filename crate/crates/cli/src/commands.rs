use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use stst::features::analyze as analyze_video;
use stst::fixtures::drifting_texture;
use stst::interop::report::{format_number, write_feature_csv_to};
use stst::interop::{load_video, read_archive, save_video, FrameFormat, LossLogWriter, RunConfig};
use stst::metrics::{cssim_series, linear_cka, ssim, ActivationMatrix};
use stst::objective::Models;
use stst::stps::{stps_generate, StpsParams};
use stst::synth::{synthesize_video, TermVideos};
use stst::{Error, Result, VideoTensor};

use crate::manifest::{checksum, Manifest};
use crate::{Common, Metric};

pub const FRAMES_DIR: &str = "frames";
pub const LOSS_LOG: &str = "loss_log.csv";

struct Resolved {
    config: RunConfig,
    overrides: Vec<String>,
}

fn resolve(common: &Common, target: Option<String>) -> Result<Resolved> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for (key, v) in [
        ("target", target),
        ("output", common.output.clone()),
        ("seed", common.seed.clone()),
    ] {
        if let Some(v) = v {
            overrides.push(format!("{key}={v}"));
        }
    }
    overrides.extend(common.overrides.iter().cloned());
    for o in &overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    Ok(Resolved { config, overrides })
}

fn init_threads(threads: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        log::debug!("thread pool already initialized: {e}");
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.output()
        .ok_or_else(|| Error::Config("no output directory (set output)".into()))
}

pub fn synth(target: Option<String>, common: &Common) -> Result<()> {
    init_threads(common.threads);
    let Resolved { config, overrides } = resolve(common, target)?;
    let synthesis = config.synthesis()?;
    let network = config.network()?;
    let paths = config.targets();
    let distinct = paths.distinct();
    if distinct.is_empty() {
        return Err(Error::Config("no target video (set target)".into()));
    }
    let out = output_dir(&config)?;

    let mut videos: BTreeMap<&Path, VideoTensor> = BTreeMap::new();
    for p in &distinct {
        videos.insert(p, load_video(p)?);
    }
    let first = &videos[distinct[0]];
    synthesis.validate(first.height(), first.width())?;

    let mut inputs = Vec::new();
    for p in &distinct {
        inputs.push((*p, checksum(p)?));
    }
    if let Some(w) = &network.weights {
        inputs.push((w.as_path(), checksum(w)?));
    }
    Manifest {
        command: "synth",
        overrides: &overrides,
        threads: common.threads,
        config: &config,
        inputs,
    }
    .write(&out)?;

    let (spatial, temporal) = network.build::<f32>()?;
    let get = |p: &Option<PathBuf>| p.as_deref().map(|p| &videos[p]);
    let targets = TermVideos {
        spatial_content: get(&paths.spatial_content),
        spatial_texture: get(&paths.spatial_texture),
        temporal_content: get(&paths.temporal_content),
        temporal_texture: get(&paths.temporal_texture),
    };
    let mut log = LossLogWriter::create(&out.join(LOSS_LOG))?;
    let mut log_error = None;
    let result = synthesize_video(
        &targets,
        &synthesis,
        Models {
            spatial: &spatial,
            temporal: &temporal,
        },
        &mut |r| {
            if log_error.is_none() {
                if let Err(e) = log.write(r) {
                    log_error = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = log_error {
        return Err(e);
    }
    log.finish()?;
    save_video(&result, &out.join(FRAMES_DIR), config.format())?;
    println!(
        "{} frames written to {}",
        result.len(),
        out.join(FRAMES_DIR).display()
    );
    Ok(())
}

pub fn stps(target: Option<String>, common: &Common) -> Result<()> {
    init_threads(common.threads);
    let Resolved { config, overrides } = resolve(common, target)?;
    let Some(path) = config
        .targets()
        .spatial_texture
        .or(config.targets().spatial_content)
    else {
        return Err(Error::Config("no input video (set target)".into()));
    };
    let out = output_dir(&config)?;
    let video = load_video(&path)?;
    Manifest {
        command: "stps",
        overrides: &overrides,
        threads: common.threads,
        config: &config,
        inputs: vec![(path.as_path(), checksum(&path)?)],
    }
    .write(&out)?;
    let params = StpsParams {
        seed: config.seed(),
        color: config.color(),
    };
    let result = stps_generate(&video, &params)?;
    save_video(&result, &out.join(FRAMES_DIR), config.format())?;
    println!(
        "{} frames written to {}",
        result.len(),
        out.join(FRAMES_DIR).display()
    );
    Ok(())
}

fn sink(output: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match output {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn analyze(video: &Path, common: &Common) -> Result<()> {
    init_threads(common.threads);
    let Resolved { config, .. } = resolve(common, None)?;
    let v = load_video(video)?;
    let series = analyze_video(&v, &config.flow()?)?;
    write_feature_csv_to(&series, sink(common.output.as_deref().map(Path::new))?)
}

fn write_rows(output: Option<&Path>, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut w = sink(output)?;
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn names(list: &str) -> Vec<&str> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn metrics(metric: Metric) -> Result<()> {
    match metric {
        Metric::Cka {
            archive,
            archive_y,
            x,
            y,
            output,
        } => {
            let ax = read_archive(&archive)?;
            let ay = match &archive_y {
                Some(p) => read_archive(p)?,
                None => ax.clone(),
            };
            let load = |a: &stst::interop::TensorArchive, n: &str| {
                ActivationMatrix::from_entry(n, a.require(n)?)
            };
            let mut rows = Vec::new();
            for xn in names(&x) {
                let mx = load(&ax, xn)?;
                for yn in names(&y) {
                    let my = load(&ay, yn)?;
                    rows.push(vec![
                        xn.to_string(),
                        yn.to_string(),
                        format_number(linear_cka(&mx, &my)?),
                    ]);
                }
            }
            write_rows(output.as_deref(), "x,y,cka", &rows)
        }
        Metric::Ssim { a, b, output } => {
            let (va, vb) = (load_video(&a)?, load_video(&b)?);
            if va.len() != vb.len() {
                return Err(Error::InvalidArgument(format!(
                    "videos have {} and {} frames",
                    va.len(),
                    vb.len()
                )));
            }
            let rows = (0..va.len())
                .map(|t| {
                    Ok(vec![
                        t.to_string(),
                        format_number(ssim(va.frame(t), vb.frame(t))?),
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            write_rows(output.as_deref(), "frame,ssim", &rows)
        }
        Metric::Cssim {
            video,
            predictions,
            output,
        } => {
            let v = load_video(&video)?;
            let p = load_video(&predictions)?;
            let values = cssim_series(v.frames(), p.frames())?;
            let rows: Vec<Vec<String>> = values
                .iter()
                .enumerate()
                .map(|(k, c)| vec![(k + 1).to_string(), format_number(*c)])
                .collect();
            write_rows(output.as_deref(), "frame,cssim", &rows)
        }
    }
}

pub fn fixture(
    output: &Path,
    frames: usize,
    size: usize,
    velocity: f64,
    seed: u64,
    format: &str,
) -> Result<()> {
    let format: FrameFormat = format.parse()?;
    let v = drifting_texture(frames, size, size, (0.0, velocity), seed)?;
    save_video(&v, output, format)?;
    println!("{} frames written to {}", v.len(), output.display());
    Ok(())
}
