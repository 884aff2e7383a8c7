use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use scalesplat::depthreg::SegmentSet;
use scalesplat::diffopt::OptimConfig;
use scalesplat::geometry::{Camera, CameraSpec, DepthMap};
use scalesplat::imaging::Image;
use scalesplat::raster::{render_color, render_with_stats, RenderConfig};
use scalesplat::scene::{MultiScaleScene, SharedScene};
use scalesplat::sceneio::{load_scene, save_scene, SceneIoError};
use scalesplat::service::{self, Service, ServiceConfig};
use scalesplat::synth::fixture::{build_fixture, root_view, FixtureSpec};
use scalesplat::synth::{
    create_root, layer_sweep, synthesize_scale, CommandProvider, DetailProvider, DetailRequest, ProceduralProvider,
    RootOptions, SynthError, SynthOptions, DEFAULT_AUX_VIEWS,
};

/// Environment variable holding the default `--provider` value.
pub const PROVIDER_ENV: &str = "SCALESPLAT_PROVIDER";

#[derive(Debug, Parser)]
#[command(name = "scalesplat", version, about = "Multi-scale Gaussian surfel scenes: build, zoom, render, serve")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a one-layer scene from an image and a depth map.
    Init(InitArgs),
    /// Add a detail layer under part of an existing layer.
    Zoom(ZoomArgs),
    /// Render one frame.
    Render(RenderArgs),
    /// Render a focal sweep between two layers' creation cameras.
    Sweep(SweepArgs),
    /// Serve interactive rendering and zoom requests over websockets.
    Serve(ServeArgs),
    /// Time rendering with and without scale modulation.
    Bench(BenchArgs),
    /// Build the synthetic desk scene.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
struct OptimArgs {
    /// Adam steps for the new layer.
    #[arg(long, default_value_t = 500)]
    steps: usize,
}

impl OptimArgs {
    fn config(&self) -> OptimConfig {
        OptimConfig {
            steps: self.steps,
            ..OptimConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    image: PathBuf,
    /// Depth map: binary (`.bin`) or 16-bit PNG (`.png`, see --depth-scale).
    #[arg(long)]
    depth: PathBuf,
    /// World units per 16-bit PNG depth step.
    #[arg(long, default_value_t = 1e-3)]
    depth_scale: f64,
    /// Camera JSON; defaults to the identity pose with --fx.
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long, default_value_t = 1024.0)]
    fx: f64,
    #[arg(long, default_value_t = 0)]
    aux: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "")]
    prompt: String,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ZoomArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Zoom center `U,V` in the layer's creation view.
    #[arg(long, value_parser = parse_pair)]
    center: [f64; 2],
    #[arg(long, default_value_t = 8.0)]
    factor: f64,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `procedural` or `cmd:<shell command>`.
    #[arg(long, env = PROVIDER_ENV, default_value = "procedural")]
    provider: String,
    #[arg(long, default_value_t = DEFAULT_AUX_VIEWS)]
    aux: usize,
    /// Segment labels (16-bit PNG or run-length JSON) for per-segment depth fits.
    #[arg(long)]
    segments: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Camera JSON file.
    #[arg(long, conflicts_with = "layer", required_unless_present = "layer")]
    pose: Option<PathBuf>,
    /// Render from this layer's creation camera.
    #[arg(long)]
    layer: Option<usize>,
    /// Override the focal length (fx = fy), keeping the principal point.
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    no_modulation: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    from_layer: usize,
    #[arg(long)]
    to_layer: usize,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long)]
    no_modulation: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = PROVIDER_ENV, default_value = "procedural")]
    provider: String,
    #[arg(long, default_value_t = DEFAULT_AUX_VIEWS)]
    aux: usize,
    /// Stream JPEG frames at this quality instead of PNG.
    #[arg(long)]
    jpeg: Option<u8>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    scene: PathBuf,
    /// JSON camera or array of cameras; defaults to every layer's creation camera.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
}

#[derive(Debug, Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 272)]
    width: u32,
    #[arg(long, default_value_t = 180)]
    height: u32,
    #[arg(long, default_value_t = 256.0)]
    focal: f64,
    /// Total layers including the root.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    aux: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the root view as `image.png` and `depth.bin` here.
    #[arg(long)]
    view_dir: Option<PathBuf>,
    /// Write only the root view (requires --view-dir); skip building a scene.
    #[arg(long, requires = "view_dir")]
    view_only: bool,
    #[arg(long, required_unless_present = "view_only")]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected U,V")?;
    let p = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok([p(a)?, p(b)?])
}

/// Failure classes mapped to exit codes 1 (user) and 2 (internal).
#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            CliError::User(e) | CliError::Internal(e) => e,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        let user = e.chain().any(|c| {
            if let Some(s) = c.downcast_ref::<SynthError>() {
                return matches!(
                    s,
                    SynthError::ZoomFactor(_)
                        | SynthError::CenterOutside { .. }
                        | SynthError::RegionOutside { .. }
                        | SynthError::SweepMismatch
                        | SynthError::Scene(scalesplat::scene::SceneError::UnknownLayer(_))
                );
            }
            c.is::<SceneIoError>() || c.is::<std::io::Error>() || c.is::<serde_json::Error>() || c.is::<UserError>()
        });
        if user {
            CliError::User(e)
        } else {
            CliError::Internal(e)
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UserError(String);

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match cli.command {
        Command::Init(a) => init(a),
        Command::Zoom(a) => zoom(a),
        Command::Render(a) => render(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
        Command::Fixture(a) => fixture(a),
    }
    .map_err(CliError::from)
}

fn load(path: &Path) -> anyhow::Result<MultiScaleScene> {
    load_scene(path).with_context(|| format!("loading scene {}", path.display()))
}

fn save(scene: &MultiScaleScene, path: &Path) -> anyhow::Result<()> {
    let bytes = save_scene(scene, path).with_context(|| format!("saving scene {}", path.display()))?;
    log::info!("wrote {} ({bytes} bytes)", path.display());
    Ok(())
}

fn read_camera(path: &Path) -> anyhow::Result<Camera> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: CameraSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.to_camera().map_err(|e| user(format!("{}: {e}", path.display())))
}

fn read_cameras(path: &Path) -> anyhow::Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let specs: Vec<CameraSpec> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    specs
        .iter()
        .map(|s| s.to_camera().map_err(|e| user(format!("{}: {e}", path.display()))))
        .collect()
}

fn provider(spec: &str) -> anyhow::Result<Arc<dyn DetailProvider>> {
    if spec == "procedural" {
        return Ok(Arc::new(ProceduralProvider::default()));
    }
    match spec.strip_prefix("cmd:") {
        Some(cmd) if !cmd.trim().is_empty() => Ok(Arc::new(CommandProvider::new(cmd))),
        _ => Err(user(format!("unknown provider {spec:?}; use `procedural` or `cmd:<command>`"))),
    }
}

fn render_config(no_modulation: bool) -> RenderConfig {
    RenderConfig {
        modulation: !no_modulation,
        ..RenderConfig::default()
    }
}

fn init(a: InitArgs) -> anyhow::Result<()> {
    let image = Image::load(&a.image).map_err(|e| user(format!("{}: {e}", a.image.display())))?;
    let depth = DepthMap::load_any(&a.depth, a.depth_scale).map_err(|e| user(format!("{}: {e}", a.depth.display())))?;
    let camera = match &a.pose {
        Some(p) => read_camera(p)?,
        None => Camera::looking_down_z(a.fx, a.fx, image.width(), image.height()).map_err(|e| user(e.to_string()))?,
    };
    if (image.width(), image.height()) != (camera.width(), camera.height()) {
        bail!(user(format!(
            "image is {}x{} but the camera is {}x{}",
            image.width(),
            image.height(),
            camera.width(),
            camera.height()
        )));
    }
    depth.check_dims(&camera).map_err(|e| user(e.to_string()))?;
    let options = RootOptions {
        aux_views: a.aux,
        optim: a.optim.config(),
        seed: a.seed,
        prompt: a.prompt,
    };
    let (scene, trace) = create_root(&image, &depth, &camera, &options)?;
    if let (Some(first), Some(last)) = (trace.initial(), trace.last()) {
        log::info!("fit: loss {:.5} -> {:.5}, PSNR {:.2} dB", first.loss, last.loss, last.psnr);
    }
    save(&scene, &a.out)?;
    println!("{}", scene.surfel_count());
    Ok(())
}

fn zoom(a: ZoomArgs) -> anyhow::Result<()> {
    let provider = provider(&a.provider)?;
    let mut scene = load(&a.scene)?;
    let segments = match &a.segments {
        Some(p) => Some(SegmentSet::load(p).map_err(|e| user(e.to_string()))?),
        None => None,
    };
    let request = DetailRequest {
        parent_layer: a.layer,
        zoom_center: a.center,
        zoom_factor: a.factor,
        prompt: a.prompt,
        seed: a.seed,
    };
    let options = SynthOptions {
        aux_views: a.aux,
        optim: a.optim.config(),
        segments,
        novel_masks: Vec::new(),
    };
    let report = synthesize_scale(&mut scene, &request, provider.as_ref(), &options)?;
    save(&scene, &a.out)?;
    println!("{}", report.layer);
    Ok(())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    let scene = load(&a.scene)?;
    let mut camera = match (&a.pose, a.layer) {
        (Some(p), _) => read_camera(p)?,
        (None, Some(l)) => scene
            .layer(l)
            .ok_or_else(|| user(format!("scene has no layer {l}")))?
            .creation_camera
            .clone(),
        (None, None) => unreachable!("clap requires --pose or --layer"),
    };
    if let Some(f) = a.fx {
        camera = camera.with_intrinsics(f, f, camera.cx(), camera.cy()).map_err(|e| user(e.to_string()))?;
    }
    let frame = render_color(&scene, &camera, &render_config(a.no_modulation));
    frame.color.save_png(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.depth_out {
        frame.depth.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let scene = load(&a.scene)?;
    if a.frames == 0 {
        bail!(user("--frames must be at least 1"));
    }
    let cams = layer_sweep(&scene, a.from_layer, a.to_layer, a.frames)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cfg = render_config(a.no_modulation);
    let mut prev: Option<Image> = None;
    let mut diffs = Vec::new();
    for (n, cam) in cams.iter().enumerate() {
        let img = render_color(&scene, cam, &cfg).color;
        let path = a.out.join(format!("frame_{n:04}.png"));
        img.save_png(&path).with_context(|| format!("writing {}", path.display()))?;
        if let Some(p) = &prev {
            diffs.push(p.mean_abs_diff(&img));
        }
        prev = Some(img);
    }
    let mut csv = String::from("frame,mean_abs_diff\n");
    for (n, d) in diffs.iter().enumerate() {
        csv.push_str(&format!("{},{d}\n", n + 1));
    }
    std::fs::write(a.out.join("diffs.csv"), csv)?;
    if !diffs.is_empty() {
        let mut sorted = diffs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let max = sorted[sorted.len() - 1];
        println!("frames {} median_diff {median:.6} max_diff {max:.6} spike_ratio {:.3}", cams.len(), max / median);
    } else {
        println!("frames {}", cams.len());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let provider = provider(&a.provider)?;
    let scene = load(&a.scene)?;
    let config = ServiceConfig {
        render: RenderConfig::default(),
        synth: SynthOptions {
            aux_views: a.aux,
            optim: a.optim.config(),
            ..SynthOptions::default()
        },
        jpeg_quality: a.jpeg,
    };
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = service::bind(&addr).await.map_err(|e| user(e.to_string()))?;
        eprintln!("listening on ws://{}", listener.local_addr()?);
        let svc = Service::new(Arc::new(SharedScene::new(scene)), provider, config);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        service::serve(listener, svc, shutdown).await?;
        Ok(())
    })
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let scene = load(&a.scene)?;
    let cams = match &a.poses {
        Some(p) => read_cameras(p)?,
        None => scene.layers().map(|l| l.creation_camera.clone()).collect(),
    };
    if cams.is_empty() {
        bail!(user("no cameras to benchmark"));
    }
    let repeat = a.repeat.max(1);
    println!("pose,modulation,visible_surfels,fragments,fps");
    let mut totals = [(0usize, 0.0f64); 2];
    for (k, cam) in cams.iter().enumerate() {
        for (slot, modulation) in [(0, true), (1, false)] {
            let cfg = render_config(!modulation);
            let (_, stats) = render_with_stats(&scene, cam, &cfg);
            let start = Instant::now();
            for _ in 0..repeat {
                std::hint::black_box(render_with_stats(&scene, cam, &cfg));
            }
            let secs = start.elapsed().as_secs_f64() / repeat as f64;
            totals[slot].0 += stats.visible_surfels;
            totals[slot].1 += secs;
            let state = if modulation { "on" } else { "off" };
            println!("{k},{state},{},{},{:.2}", stats.visible_surfels, stats.fragments, 1.0 / secs);
        }
    }
    let [(on, t_on), (off, t_off)] = totals;
    let reduction = if off > 0 { 1.0 - on as f64 / off as f64 } else { 0.0 };
    println!(
        "total visible on {on} off {off} reduction {:.1}% time on {:.4}s off {:.4}s",
        100.0 * reduction,
        t_on,
        t_off
    );
    Ok(())
}

fn fixture(a: FixtureArgs) -> anyhow::Result<()> {
    if a.layers == 0 {
        bail!(user("--layers must be at least 1"));
    }
    let spec = FixtureSpec {
        width: a.width,
        height: a.height,
        focal: a.focal,
        layers: a.layers,
        root_steps: a.steps,
        layer_steps: a.steps,
        aux_views: a.aux,
        seed: a.seed,
        ..FixtureSpec::default()
    };
    if let Some(dir) = &a.view_dir {
        let (image, depth, camera) = root_view(&spec)?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        image.save_png(&dir.join("image.png"))?;
        depth.save(&dir.join("depth.bin"))?;
        let pose = serde_json::to_string_pretty(&CameraSpec::from(&camera))?;
        std::fs::write(dir.join("camera.json"), pose)?;
    }
    if a.view_only {
        return Ok(());
    }
    let out = a.out.ok_or_else(|| anyhow!("--out is required"))?;
    let scene = build_fixture(&spec)?;
    save(&scene, &out)?;
    println!("{}", scene.layer_count());
    Ok(())
}
