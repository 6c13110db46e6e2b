use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use volprim::atlas::unwrap_views;
use volprim::fit::{fit, FitConfig, FitContext, RenderSettings};
use volprim::formats::{read_params, write_uv_image, ParamsFile};
use volprim::gradcheck::{self, SceneScale};
use volprim::imaging::{write_pfm, write_png};
use volprim::lbs::pose_mesh;
use volprim::loss::psnr;
use volprim::render::{render, RenderOutput};
use volprim::synth::{gen_scene, Dataset};
use volprim::Error;

#[derive(Parser)]
#[command(name = "volprim", version, about = "Articulated volumetric primitives: data, rendering and fitting")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset with oracle targets.
    GenScene {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders one frame and camera to PNG and PFM.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Decoder parameters or a posed primitive file.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a decoder to a dataset.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        /// TOML or JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares adjoint gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Micro)]
        scale: Scale,
        /// Bound on render-parameter relative error.
        #[arg(long, default_value_t = gradcheck::RENDER_TOLERANCE)]
        tol: f64,
        /// Bound on loss-through-decoder relative error.
        #[arg(long, default_value_t = gradcheck::DECODER_TOLERANCE)]
        decoder_tol: f64,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Unwraps the targets of one frame into UV space.
    Unwrap {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR of renders against the dataset targets.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Comma separated; the scene's holdout list when omitted.
        #[arg(long, value_delimiter = ',')]
        holdout_cameras: Option<Vec<usize>>,
        /// Frame of a primitive file (decoders cover every frame).
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Micro,
    Small,
}

enum Failure {
    Lib(Error),
    Gradient(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Lib(e) => match e {
                Error::Io { .. } => 3,
                Error::Format { .. } | Error::Json(_) | Error::Image(_) => 4,
                Error::Shape(_) => 5,
                Error::Invalid(_) | Error::UnknownPreset(..) => 6,
                Error::DegenerateGeometry(_) | Error::DegenerateUv(_) | Error::EmptyAtlas | Error::InvalidTexel(_) => 7,
                Error::NonFiniteField | Error::NonFiniteLoss { .. } => 8,
            },
            Failure::Gradient(_) => 9,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .expect("thread pool configured once");
    }
    let result = match cli.command {
        Command::GenScene { preset, seed, out } => cmd_gen_scene(&preset, seed, &out),
        Command::Render {
            scene,
            frame,
            camera,
            params,
            out,
        } => cmd_render(&scene, frame, camera, &params, &out),
        Command::Fit { scene, config, out } => cmd_fit(&scene, config.as_deref(), &out),
        Command::Gradcheck {
            scale,
            tol,
            decoder_tol,
            scenes,
            seed,
        } => cmd_gradcheck(scale, tol, decoder_tol, scenes, seed),
        Command::Unwrap { scene, frame, out } => cmd_unwrap(&scene, frame, &out),
        Command::Eval {
            scene,
            params,
            holdout_cameras,
            frame,
            csv,
        } => cmd_eval(&scene, &params, holdout_cameras, frame, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Gradient(msg) => eprintln!("gradient check failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn require(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

fn check_index(what: &str, index: usize, count: usize) -> Result<(), Error> {
    if index < count {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} {index} out of range (scene has {count})")))
    }
}

fn cmd_gen_scene(preset: &str, seed: u64, out: &Path) -> Outcome {
    let scene = gen_scene(preset, seed, out)?;
    let m = &scene.manifest;
    println!(
        "wrote {} ({} frames x {} cameras, {}x{}, {} primitives)",
        out.display(),
        m.frames,
        m.cameras,
        m.width,
        m.height,
        scene.grid.valid_count()
    );
    Ok(())
}

/// Render of `params` for one frame and camera, conditioned on every training view.
fn predict(dataset: &Dataset, params: &ParamsFile<f64>, frame: usize, camera: usize) -> Result<RenderOutput<f64>, Error> {
    match params {
        ParamsFile::Primitives(set) => render(set, &dataset.cameras[camera], &dataset.manifest.render_config()),
        ParamsFile::Decoder(p) => {
            let ctx = FitContext::new(dataset, &p.pose_projection, &RenderSettings::default())?;
            ctx.predict(p, frame, &dataset.manifest.training_cameras(), camera)
        }
    }
}

fn cmd_render(scene: &Path, frame: usize, camera: usize, params: &Path, out: &Path) -> Outcome {
    require(scene)?;
    require(params)?;
    let dataset = Dataset::load(scene)?;
    check_index("frame", frame, dataset.manifest.frames)?;
    check_index("camera", camera, dataset.manifest.cameras)?;
    let params = read_params::<f64>(params)?;
    let img = predict(&dataset, &params, frame, camera)?.rgb_image();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let png = out.with_extension("png");
    let pfm = out.with_extension("pfm");
    write_png(&png, &img)?;
    write_pfm(&pfm, &img)?;
    println!("wrote {} and {}", png.display(), pfm.display());
    Ok(())
}

fn cmd_fit(scene: &Path, config: Option<&Path>, out: &Path) -> Outcome {
    require(scene)?;
    let config = match config {
        Some(path) => {
            require(path)?;
            FitConfig::load(path)?
        }
        None => FitConfig::default(),
    };
    let dataset = Dataset::load(scene)?;
    let result = fit(&dataset, &config, Some(out))?;
    let last = result.metrics.last();
    if let Some(row) = last {
        print!(
            "{} iterations in {:.1} s, final loss {:.6e}",
            result.metrics.len(),
            row.wall_ms / 1e3,
            row.total
        );
        if let Some(p) = result.metrics.iter().rev().find_map(|r| r.psnr_holdout) {
            print!(", holdout PSNR {p:.2} dB");
        }
        println!();
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(scale: Scale, tol: f64, decoder_tol: f64, scenes: usize, seed: u64) -> Outcome {
    let scale = match scale {
        Scale::Micro => SceneScale::Micro,
        Scale::Small => SceneScale::Small,
    };
    let report = gradcheck::run(scenes, seed, scale)?;
    println!("{:<10} {:<18} {:>12} {:>12}", "suite", "class", "rel_error", "tolerance");
    for (suite, classes, bound) in [("render", &report.render, tol), ("decoder", &report.decoder, decoder_tol)] {
        for c in classes {
            println!("{:<10} {:<18} {:>12.3e} {:>12.1e}", suite, c.class, c.relative, bound);
        }
    }
    println!(
        "{} scenes per suite, {} redrawn near kinks, {:.2} s",
        report.scenes,
        report.rejected,
        report.elapsed.as_secs_f64()
    );
    let mut failed = Vec::new();
    if report.worst_render() > tol {
        failed.push(format!("render {:.3e} > {tol:e}", report.worst_render()));
    }
    if report.worst_decoder() > decoder_tol {
        failed.push(format!("decoder {:.3e} > {decoder_tol:e}", report.worst_decoder()));
    }
    if failed.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Gradient(failed.join(", ")))
    }
}

fn cmd_unwrap(scene: &Path, frame: usize, out: &Path) -> Outcome {
    require(scene)?;
    let dataset = Dataset::load(scene)?;
    check_index("frame", frame, dataset.manifest.frames)?;
    let posed = pose_mesh(&dataset.skeleton, &dataset.poses[frame], &dataset.template)?;
    let train = dataset.manifest.training_cameras();
    let cams: Vec<_> = train.iter().map(|&c| dataset.cameras[c].clone()).collect();
    let imgs: Vec<_> = train.iter().map(|&c| dataset.targets[frame][c].clone()).collect();
    let uv = unwrap_views(&posed, &dataset.template, &cams, &imgs, dataset.manifest.unwrap_resolution)?;
    write_uv_image(out, &uv)?;
    let covered = uv.weight.iter().filter(|&&w| w > 0.0).count();
    println!(
        "wrote {} ({}x{}, {} of {} texels seen)",
        out.display(),
        uv.resolution,
        uv.resolution,
        covered,
        uv.weight.len()
    );
    Ok(())
}

fn cmd_eval(scene: &Path, params: &Path, holdout: Option<Vec<usize>>, frame: usize, csv: Option<&Path>) -> Outcome {
    require(scene)?;
    require(params)?;
    let dataset = Dataset::load(scene)?;
    let m = &dataset.manifest;
    let cameras = holdout.unwrap_or_else(|| m.holdout_cameras.clone());
    if cameras.is_empty() {
        return Err(Error::Invalid("no holdout cameras given".into()).into());
    }
    for &c in &cameras {
        check_index("camera", c, m.cameras)?;
    }
    let params = read_params::<f64>(params)?;
    let rows: Vec<(usize, usize, f64)> = match &params {
        ParamsFile::Primitives(_) => {
            check_index("frame", frame, m.frames)?;
            cameras
                .iter()
                .map(|&c| -> Result<_, Error> {
                    let out = predict(&dataset, &params, frame, c)?;
                    Ok((frame, c, psnr(&out.rgb_image(), &dataset.targets[frame][c])?))
                })
                .collect::<Result<_, _>>()?
        }
        ParamsFile::Decoder(p) => {
            let ctx = FitContext::new(&dataset, &p.pose_projection, &RenderSettings::default())?;
            ctx.holdout_psnr(p, &cameras)?
        }
    };
    println!("{:>6} {:>7} {:>10}", "frame", "camera", "psnr_db");
    let mut text = String::from("frame,camera,psnr_db\n");
    for (f, c, p) in &rows {
        println!("{f:>6} {c:>7} {p:>10.3}");
        writeln!(text, "{f},{c},{p:.6}").expect("string write");
    }
    let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    let min = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    println!("mean {mean:.3} dB, min {min:.3} dB");
    if let Some(path) = csv {
        fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}
