use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use pwrecon_core::config::{canonical_hash, RegionsSection};
use pwrecon_core::io::{verify_manifest, Container, Kind, RunManifest, VerifyStatus};
use pwrecon_core::metrics::log_compress;
use pwrecon_core::multisample::{fuse_display, Colormap};
use pwrecon_core::pipeline::{self, ImageSignal, ReconMode};
use pwrecon_core::{render, Config, Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "pwrecon", version, about = "Plane-wave ultrasound reconstruction pipeline")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Directory for cached matrices and factorizations.
    #[arg(long, global = true, default_value = ".pwrecon-cache")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Gray,
    Jet,
    Fuse,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Das,
    Drus,
    Deno,
}

impl From<ModeArg> for ReconMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Das => ReconMode::Das,
            ModeArg::Drus => ReconMode::Drus,
            ModeArg::Deno => ReconMode::Deno,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build and cache H, B and the spectral factorization of BH.
    BuildModel {
        /// Skip the factorization (only H and B are cached).
        #[arg(long)]
        no_factorization: bool,
    },
    /// Simulate channel data for the configured phantom.
    Simulate {
        #[arg(long, short)]
        out: PathBuf,
        /// Also write the ground-truth echogenicity map.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Reconstruct images from a channel container.
    Reconstruct {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "drus")]
        mode: ModeArg,
        /// Output directory for das/mean/var/bundle containers.
        #[arg(long, short)]
        out_dir: PathBuf,
        /// Overrides the number of chains.
        #[arg(long)]
        samples: Option<usize>,
        /// Overrides the number of sampler steps.
        #[arg(long)]
        it: Option<usize>,
    },
    /// Compute resolution, contrast and speckle metrics of an image.
    Metrics {
        #[arg(long, short)]
        image: PathBuf,
        /// CSV output; the summary is printed either way.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Render an image container to PNG.
    Render {
        #[arg(long, short)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "gray")]
        style: Style,
        /// Variance image, required for `fuse`.
        #[arg(long)]
        var: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        dynamic_range: Option<f64>,
    },
    /// Re-hash every file recorded in a manifest.
    Verify { manifest: PathBuf },
    /// Convert an HDF5 dataset to a channel container.
    PicmusImport {
        #[arg(long, short)]
        input: PathBuf,
        /// Mapping of dataset paths (TOML); the standard layout when omitted.
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct Run {
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(command: &str, cfg: &Config) -> Self {
        Self {
            manifest: RunManifest::new(command, cfg, canonical_hash(cfg)),
            started: Instant::now(),
        }
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        self.manifest.write(path)?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.sampler.seed = s;
    }
    let cache = Some(cli.cache_dir.as_path());
    match &cli.command {
        Command::BuildModel { no_factorization } => {
            std::fs::create_dir_all(&cli.cache_dir)?;
            let mut run = Run::new("build-model", &cfg);
            let (model, mut status) = pipeline::build_model(&cfg, cfg.setup()?, cache)?;
            eprintln!(
                "H: {}x{} ({} nonzeros), B: {} nonzeros",
                model.h.rows(),
                model.h.cols(),
                model.h.nnz(),
                model.b.nnz()
            );
            if !no_factorization {
                let (f, hit) = pipeline::factorization(&cfg, &model, pwrecon_core::Mode::Drus, cache)?;
                status.factorization_hit = hit;
                eprintln!(
                    "BH: rank {} of {}, {} observed, residual {:.2e}",
                    f.rank(),
                    f.dim(),
                    f.observed_count(),
                    f.residual_norm
                );
            }
            run.manifest.notes.push(serde_json::to_string(&status).expect("json"));
            for entry in std::fs::read_dir(&cli.cache_dir)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "usds" || e == "usdr") {
                    run.manifest.add_output(&p)?;
                }
            }
            run.finish(&cli.cache_dir.join("build-model.manifest.json"))
        }
        Command::Simulate { out, truth } => {
            let mut run = Run::new("simulate", &cfg);
            let setup = cfg.setup()?;
            let seed = cfg.sampler.seed;
            let sim = pipeline::simulate(&cfg, &setup, cfg.phantom()?, seed)?;
            run.manifest.seeds.push(seed);
            let c = pipeline::channel_container(&setup, &sim.channel)?
                .with_attr("phantom", &sim.phantom)
                .with_attr("seed", seed)
                .with_attr("scatterers", sim.field.len())
                .with_attr("config_hash", &run.manifest.config_hash);
            c.write(out)?;
            run.manifest.add_output(out)?;
            if let Some(t) = truth {
                pipeline::image_container(&setup.grid, sim.echogenicity)?
                    .with_attr("signal", "echogenicity")
                    .write(t)?;
                run.manifest.add_output(t)?;
            }
            eprintln!(
                "{} scatterers, noise std {:.3e}, wrote {}",
                sim.field.len(),
                sim.channel.noise_std,
                out.display()
            );
            run.finish(&manifest_path(out))
        }
        Command::Reconstruct {
            input,
            mode,
            out_dir,
            samples,
            it,
        } => {
            if let Some(m) = samples {
                cfg.sampler.samples = *m;
            }
            if let Some(n) = it {
                cfg.sampler.it = *n;
            }
            let mode = ReconMode::from(*mode);
            if mode == ReconMode::Das {
                eprintln!("note: das mode ignores the sampler and denoiser settings");
            }
            let mut run = Run::new("reconstruct", &cfg);
            run.manifest.add_input(input)?;
            let data = Container::read(input)?.expect_kind(Kind::Channel)?;
            let mut setup = cfg.setup()?;
            setup.acquisition = pipeline::acquisition_of(&data, &setup)?;
            let (model, _) = pipeline::build_model(&cfg, setup, cache)?;
            let grid = model.setup.grid.clone();
            let (fact, den) = match mode.sampler_mode() {
                Some(m) => {
                    let (f, _) = pipeline::factorization(&cfg, &model, m, cache)?;
                    let den = cfg.denoiser.build(grid.n_z, grid.n_x, grid.dz(), grid.dx())?;
                    (Some(f), Some(den))
                }
                None => (None, None),
            };
            let r = pipeline::reconstruct(&cfg, &model, fact.as_ref(), &data.payload, mode, den.as_deref())?;
            std::fs::create_dir_all(out_dir)?;
            let hash = run.manifest.config_hash.clone();
            let write = |run: &mut Run, name: &str, c: Container| -> Result<()> {
                let p = out_dir.join(name);
                c.with_attr("config_hash", &hash).write(&p)?;
                run.manifest.add_output(&p)
            };
            write(&mut run, "das.usdr", pipeline::image_container(&grid, r.das.clone())?.with_attr("signal", "rf"))?;
            if !r.samples.is_empty() {
                let m = r.samples.len();
                run.manifest.seeds.push(cfg.sampler.seed);
                let bundle = Container::new(
                    Kind::Bundle,
                    vec![m, grid.n_x, grid.n_z],
                    r.samples.concat(),
                )?
                .with_attr("grid", &grid)
                .with_attr("mode", mode)
                .with_attr("sampler", &cfg.sampler)
                .with_attr("denoiser", &cfg.denoiser)
                .with_attr("seed", cfg.sampler.seed)
                .with_attr("chains", (0..m as u64).collect::<Vec<_>>())
                .with_attr("sigma_d", r.sigma_d);
                write(&mut run, "bundle.usdr", bundle)?;
                let mean = match &r.aggregate {
                    Some(a) => a.mean.clone(),
                    None => r.samples[0].clone(),
                };
                write(&mut run, "mean.usdr", pipeline::image_container(&grid, mean)?.with_attr("signal", "rf"))?;
                if let Some(a) = &r.aggregate {
                    write(
                        &mut run,
                        "var.usdr",
                        pipeline::image_container(&grid, a.variance.clone())?.with_attr("signal", "variance"),
                    )?;
                }
            }
            eprintln!("wrote {}", out_dir.display());
            run.finish(&out_dir.join("reconstruct.manifest.json"))
        }
        Command::Metrics { image, out } => {
            let mut run = Run::new("metrics", &cfg);
            run.manifest.add_input(image)?;
            let c = Container::read(image)?.expect_kind(Kind::Image)?;
            let grid = pipeline::grid_of(&c)?;
            let (values, signal) = image_signal(&c)?;
            let regions = if cfg.regions.is_empty() {
                let mut r = RegionsSection::from_phantom(&cfg.phantom()?, &grid);
                r.dynamic_range_db = cfg.regions.dynamic_range_db;
                r
            } else {
                cfg.regions.clone()
            };
            let id = image.display().to_string();
            let report = pipeline::evaluate(&values, &grid, &regions, signal, &id)?;
            print!("{}", report.to_lines());
            let target = match out {
                Some(p) => {
                    std::fs::write(p, report.to_csv())?;
                    run.manifest.add_output(p)?;
                    manifest_path(p)
                }
                None => {
                    let mut s = image.as_os_str().to_owned();
                    s.push(".metrics.manifest.json");
                    PathBuf::from(s)
                }
            };
            run.finish(&target)
        }
        Command::Render {
            image,
            style,
            var,
            out,
            dynamic_range,
        } => {
            let mut run = Run::new("render", &cfg);
            run.manifest.add_input(image)?;
            let dr = dynamic_range.unwrap_or(cfg.regions.dynamic_range_db);
            let c = Container::read(image)?.expect_kind(Kind::Image)?;
            let grid = pipeline::grid_of(&c)?;
            let db = |c: &Container| -> Result<Vec<f64>> {
                let (v, signal) = image_signal(c)?;
                log_compress(&pipeline::amplitude(&v, &grid, signal)?, dr)
            };
            let mean_db = db(&c)?;
            match style {
                Style::Gray => render::write_gray_png(out, &render::gray_image(&mean_db, grid.n_z, grid.n_x, dr)?)?,
                Style::Jet => render::write_rgb_png(
                    out,
                    &render::colormap_image(&mean_db, grid.n_z, grid.n_x, dr, Colormap::Jet)?,
                )?,
                Style::Fuse => {
                    let vp = var
                        .as_ref()
                        .ok_or_else(|| Error::Config("fuse style needs --var".into()))?;
                    run.manifest.add_input(vp)?;
                    let vc = Container::read(vp)?.expect_kind(Kind::Image)?;
                    if pipeline::grid_of(&vc)? != grid {
                        return Err(Error::ShapeMismatch {
                            expected: c.shape.clone(),
                            got: vc.shape.clone(),
                        });
                    }
                    let rgb = fuse_display(&mean_db, &db(&vc)?, dr, Colormap::Jet)?;
                    render::write_rgb_png(out, &render::rgb_image(&rgb, grid.n_z, grid.n_x)?)?
                }
            }
            run.manifest.add_output(out)?;
            run.finish(&manifest_path(out))
        }
        Command::Verify { manifest } => {
            let m = RunManifest::read(manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let mut bad = 0;
            for (path, status) in verify_manifest(&m, base) {
                match status {
                    VerifyStatus::Ok => println!("ok       {}", path.display()),
                    other => {
                        bad += 1;
                        println!("FAILED   {} ({other:?})", path.display());
                    }
                }
            }
            if bad > 0 {
                return Err(Error::Format(format!("{bad} file(s) failed verification")));
            }
            Ok(())
        }
        Command::PicmusImport { input, mapping, out } => picmus_import(&cfg, input, mapping.as_deref(), out),
    }
}

/// Values of an image container in the form the metric code expects:
/// variance images become standard deviations.
fn image_signal(c: &Container) -> Result<(Vec<f64>, ImageSignal)> {
    let signal: String = c.attr("signal").unwrap_or_else(|_| "rf".into());
    Ok(match signal.as_str() {
        "rf" => (c.payload.clone(), ImageSignal::Rf),
        "variance" => (c.payload.iter().map(|v| v.max(0.0).sqrt()).collect(), ImageSignal::Amplitude),
        _ => (c.payload.clone(), ImageSignal::Amplitude),
    })
}

#[cfg(feature = "hdf5")]
fn picmus_import(cfg: &Config, input: &Path, mapping: Option<&Path>, out: &Path) -> Result<()> {
    use pwrecon_core::picmus::{import, Hdf5Source, Mapping};
    let mut run = Run::new("picmus-import", cfg);
    let mapping = match mapping {
        Some(p) => {
            run.manifest.add_input(p)?;
            Mapping::from_toml(&std::fs::read_to_string(p)?)?
        }
        None => Mapping::picmus_default(),
    };
    run.manifest.add_input(input)?;
    let src = Hdf5Source::open(input)?;
    let c = import(&src, &mapping)?;
    c.write(out)?;
    run.manifest.add_output(out)?;
    run.finish(&manifest_path(out))
}

#[cfg(not(feature = "hdf5"))]
fn picmus_import(_: &Config, _: &Path, _: Option<&Path>, _: &Path) -> Result<()> {
    Err(Error::Unsupported(
        "this build has no HDF5 support; rebuild with `--features hdf5`".into(),
    ))
}
