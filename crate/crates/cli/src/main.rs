use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lsnif::geometry::load_obj;
use lsnif::image::Image;
use lsnif::metrics::{self, AblationParam, EvalConfig};
use lsnif::model::ModelConfig;
use lsnif::model_io::{self, Footprint};
use lsnif::renderer::{render, scene_file, PrimaryMode, RenderConfig};
use lsnif::training::{TrainConfig, Trainer};
use lsnif::voxelizer::voxelize_surface;
use lsnif::{LocalFrame, Material, Mesh, Parallelism, Vec3};

#[derive(Parser)]
#[command(name = "lsnif", version, about = "Train, evaluate and render neural intersection functions")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a mesh and report occupancy; optionally write the voxels as OBJ.
    Voxelize {
        /// OBJ path or builtin:{sphere,box,torus,teapot}.
        mesh: String,
        #[arg(long, default_value_t = 32)]
        voxel_res: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model for one mesh.
    Train {
        mesh: String,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Diffuse albedo for every material slot, as r,g,b.
        #[arg(long, value_delimiter = ',')]
        albedo: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model against its mesh.
    Eval {
        model: PathBuf,
        mesh: String,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Path trace a TOML scene to PFM (or PPM by extension).
    Render {
        scene: PathBuf,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value_t = 16)]
        spp: usize,
        #[arg(long, default_value_t = 4)]
        bounces: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Primary::Bvh)]
        primary: Primary,
        /// Infer pairs one at a time in emission order.
        #[arg(long)]
        unsorted: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAE and RMSE between two PFM images.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Memory footprint of a model file, or of a configuration.
    Stats {
        model: Option<PathBuf>,
        #[command(flatten)]
        config: ModelArgs,
        #[arg(long, default_value_t = 1)]
        materials: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Train one model per parameter value and tabulate the errors.
    Ablate {
        mesh: String,
        /// voxel_res, hit_cap, hash_size_log2, steps or width.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    voxel_res: u32,
    #[arg(long, default_value_t = 18)]
    hit_cap: usize,
    #[arg(long, default_value_t = 17)]
    hash_size_log2: u32,
    /// Hidden layer width.
    #[arg(long, default_value_t = 128)]
    width: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            voxel_res: self.voxel_res,
            hit_cap: self.hit_cap,
            table_size_log2: self.hash_size_log2,
            hidden: self.width,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1 << 14)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long, default_value_t = 100_000)]
    rays: usize,
    #[arg(long, default_value_t = 0xE7A1)]
    eval_seed: u64,
    /// Share of rays starting outside the object; the rest start on it.
    #[arg(long, default_value_t = 0.5)]
    external_fraction: f64,
}

impl EvalArgs {
    fn config(&self, policy: Parallelism) -> Result<EvalConfig> {
        if !(0.0..=1.0).contains(&self.external_fraction) {
            bail!("--external-fraction must be in [0, 1]");
        }
        Ok(EvalConfig {
            rays: self.rays,
            seed: self.eval_seed,
            external_fraction: self.external_fraction,
            policy,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Primary {
    Bvh,
    Lsnif,
}

fn load_mesh(spec: &str) -> Result<Mesh> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return scene_file::builtin_mesh(name).with_context(|| format!("unknown builtin mesh {name}"));
    }
    load_obj(spec).with_context(|| format!("loading {spec}"))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn footprint_report(f: &Footprint, format: Format) -> String {
    let rows = [
        ("voxels", f.voxels),
        ("encoder", f.encoder),
        ("mlp", f.mlp),
        ("header", f.header),
        ("total", f.total),
    ];
    match format {
        Format::Csv => {
            let mut s = String::from("component,bytes,kib\n");
            for (k, v) in rows {
                writeln!(s, "{k},{v},{:.2}", v as f64 / 1024.0).unwrap();
            }
            s
        }
        Format::Text => {
            let mut s = format!("{:<9}{:>12}{:>12}\n", "component", "bytes", "KiB");
            for (k, v) in rows {
                writeln!(s, "{k:<9}{v:>12}{:>12.2}", v as f64 / 1024.0).unwrap();
            }
            s
        }
    }
}

fn voxel_obj(grid: &lsnif::voxelizer::OccupancyGrid, frame: &LocalFrame) -> String {
    let res = grid.resolution() as f64;
    let mut s = String::new();
    let mut base = 1;
    for [x, y, z] in grid.occupied_cells() {
        for k in 0..8u32 {
            let c = Vec3::new(
                (x + (k & 1)) as f64 / res,
                (y + ((k >> 1) & 1)) as f64 / res,
                (z + ((k >> 2) & 1)) as f64 / res,
            );
            let p = frame.from_local(c);
            writeln!(s, "v {} {} {}", p.x, p.y, p.z).unwrap();
        }
        for q in [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]] {
            writeln!(s, "f {} {} {} {}", base + q[0], base + q[1], base + q[2], base + q[3]).unwrap();
        }
        base += 8;
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    let policy = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    match cli.command {
        Command::Voxelize { mesh, voxel_res, out } => {
            let mesh = load_mesh(&mesh)?;
            let frame = LocalFrame::for_mesh(&mesh);
            let grid = voxelize_surface(&mesh, &frame, voxel_res, policy)?;
            let total = (voxel_res as usize).pow(3);
            println!(
                "resolution {voxel_res}  occupied {} / {total} ({:.2}%)  bytes {}",
                grid.count_occupied(),
                100.0 * grid.count_occupied() as f64 / total as f64,
                grid.as_bytes().len()
            );
            if let Some(out) = out {
                emit(&voxel_obj(&grid, &frame), Some(&out))?;
            }
        }
        Command::Train { mesh, model, train, albedo, out } => {
            let mesh = Arc::new(load_mesh(&mesh)?);
            let materials = match albedo {
                Some(a) if a.len() != 3 => bail!("--albedo takes three values r,g,b"),
                Some(a) => vec![Material::diffuse(Vec3::new(a[0], a[1], a[2])); mesh.num_materials().max(1)],
                None => vec![],
            };
            let config = TrainConfig {
                steps: train.steps,
                batch: train.batch,
                seed: train.seed,
                policy,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(mesh, materials, model.config(), config)?;
            let start = Instant::now();
            for _ in 0..train.steps {
                let s = trainer.step()?;
                if s.step % 100 == 0 || s.step == train.steps {
                    eprintln!("{}  {:.1}s", s.log_line(), start.elapsed().as_secs_f64());
                }
            }
            model_io::save(trainer.model(), &out)?;
            println!("wrote {} ({} bytes)", out.display(), model_io::footprint(trainer.model()).total);
        }
        Command::Eval { model, mesh, eval, format, out } => {
            let model = model_io::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let mesh = Arc::new(load_mesh(&mesh)?);
            let oracle = lsnif::bvh::MeshBvh::new(mesh, model.materials.clone())?;
            let report = metrics::eval_model(&model, &oracle, &eval.config(policy)?);
            let text = match format {
                Format::Text => metrics::report_table(&report),
                Format::Csv => metrics::report_csv(&report),
            };
            emit(&text, out.as_deref())?;
        }
        Command::Render { scene, width, height, spp, bounces, seed, primary, unsorted, out } => {
            if width == 0 || height == Some(0) {
                bail!("image size must be positive");
            }
            if spp == 0 || bounces == 0 {
                bail!("--spp and --bounces must be at least 1");
            }
            let scene = scene_file::load_scene(&scene)?;
            let config = RenderConfig {
                width,
                height: height.unwrap_or(width),
                spp,
                max_bounces: bounces,
                seed,
                primary: match primary {
                    Primary::Bvh => PrimaryMode::Bvh,
                    Primary::Lsnif => PrimaryMode::Lsnif,
                },
                sort_pairs: !unsorted,
                policy,
            };
            let start = Instant::now();
            let image = render(&scene, &config);
            match out.extension().and_then(|e| e.to_str()) {
                Some("ppm") => image.save_ppm(&out)?,
                _ => image.save_pfm(&out)?,
            }
            let m = image.mean();
            println!(
                "wrote {}  {}x{}  {} spp  mean ({:.4}, {:.4}, {:.4})  {:.1}s",
                out.display(),
                config.width,
                config.height,
                spp,
                m[0],
                m[1],
                m[2],
                start.elapsed().as_secs_f64()
            );
        }
        Command::Compare { a, b, format } => {
            let ia = Image::load_pfm(&a).with_context(|| format!("reading {}", a.display()))?;
            let ib = Image::load_pfm(&b).with_context(|| format!("reading {}", b.display()))?;
            let d = metrics::compare_images(&ia, &ib).map_err(anyhow::Error::msg)?;
            match format {
                Format::Text => println!("mae   {:.6}\nrmse  {:.6}", d.mae, d.rmse),
                Format::Csv => println!("mae,rmse\n{:.6},{:.6}", d.mae, d.rmse),
            }
        }
        Command::Stats { model, config, materials, format } => {
            let f = match model {
                Some(p) => model_io::footprint(&model_io::load(&p).with_context(|| format!("loading {}", p.display()))?),
                None => {
                    let c = config.config();
                    c.validate()?;
                    Footprint::compute(&c, materials.max(1))
                }
            };
            print!("{}", footprint_report(&f, format));
        }
        Command::Ablate { mesh, param, values, model, train, eval, format, out } => {
            let param = AblationParam::parse(&param).with_context(|| format!("unknown parameter {param}"))?;
            if values.windows(2).any(|w| w[0] >= w[1]) {
                bail!("--values must be strictly ascending");
            }
            let mesh = Arc::new(load_mesh(&mesh)?);
            let train = TrainConfig {
                steps: train.steps,
                batch: train.batch,
                seed: train.seed,
                policy,
                ..TrainConfig::default()
            };
            let points = metrics::ablate(mesh, vec![], &model.config(), &train, param, &values, &eval.config(policy)?)?;
            let text = match format {
                Format::Text => metrics::ablation_table(&points),
                Format::Csv => metrics::ablation_csv(&points),
            };
            emit(&text, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
