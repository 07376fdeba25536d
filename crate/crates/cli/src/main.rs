//! `mr-eit`: mesh generation, phantoms, forward simulation, reconstruction,
//! metrics and rendering.
//!
//! Exit codes: 0 on success, 2 for bad arguments or inputs, 3 when a solve
//! or the optimizer fails numerically.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use mreit_core::eval::{generate_phantom, rasterize, rie, ssim, Inclusion, PhantomSpec};
use mreit_core::forward::{
    add_noise, forward, load_voltages, save_voltages, ConductivityField, ProtocolSpec, StimulationProtocol,
    VoltageVector, DEFAULT_AMPLITUDE, DEFAULT_ELECTRODES,
};
use mreit_core::mesh::{generate_disk_mesh, load_mesh, save_mesh, TriangleMesh};
use mreit_core::net::{save_config, save_params};
use mreit_core::recon::{
    estimate_background, load_conductivity, loss, reconstruct_gauss_newton, reconstruct_l2, reconstruct_unsupervised,
    relative_lambda, save_conductivity, ReconConfig, ReconReport, StageConfig, StageReport, TimingReport,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mr-eit", version, about = "Multi-resolution EIT reconstruction")]
struct Cli {
    /// Worker threads; results are reproducible bit for bit at 1.
    #[arg(long, env = "MR_EIT_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a disk mesh with boundary point electrodes.
    MeshGen(MeshGenArgs),
    /// Write the element conductivities of a phantom on a mesh.
    Phantom(PhantomArgs),
    /// Simulate boundary voltages for a conductivity field.
    Forward(ForwardArgs),
    /// Reconstruct a conductivity field from voltages.
    Recon {
        #[command(subcommand)]
        method: ReconMethod,
    },
    /// Compare a reconstruction against a reference (prints SSIM and RIE).
    Metrics(MetricsArgs),
    /// Render a conductivity field to a PGM image.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct MeshGenArgs {
    /// Domain shape; only `disk` is supported.
    #[arg(long, default_value = "disk")]
    shape: String,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Target element count; the closest ring layout is used.
    #[arg(long, default_value_t = 636)]
    elements: usize,
    #[arg(long, default_value_t = DEFAULT_ELECTRODES)]
    electrodes: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Phantom description (JSON with `background` and `inclusions`).
    #[arg(long, conflicts_with_all = ["background", "inclusion"])]
    spec: Option<PathBuf>,
    /// Background conductivity in S/m when no spec file is given.
    #[arg(long)]
    background: Option<f64>,
    /// Inclusion as `x,y,radius,sigma`; repeatable, later ones win.
    #[arg(long, value_parser = parse_inclusion, allow_hyphen_values = true)]
    inclusion: Vec<Inclusion>,
    /// Also write the phantom description used.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    sigma: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ELECTRODES)]
    electrodes: usize,
    /// Drive current in amperes.
    #[arg(long, default_value_t = DEFAULT_AMPLITUDE)]
    amplitude: f64,
    /// Add Gaussian noise at this signal-to-noise ratio (dB).
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voltage CSV; the protocol sidecar goes next to it.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct VoltageInput {
    #[arg(long)]
    voltage: PathBuf,
    /// Protocol sidecar; defaults to the one written next to the voltages.
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconOutput {
    /// Conductivity CSV of the result.
    #[arg(short, long)]
    output: PathBuf,
    /// JSON run report (configuration and loss histories).
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON wall-clock timings, kept apart so reports stay reproducible.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ReconMethod {
    /// Two-stage coordinate-network reconstruction, coarse then fine mesh.
    Unsup(UnsupArgs),
    /// Regularized Gauss-Newton.
    Gn(BaselineArgs),
    /// One-step linearized Tikhonov.
    L2(BaselineArgs),
}

#[derive(Args, Debug)]
struct UnsupArgs {
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    #[command(flatten)]
    input: VoltageInput,
    #[arg(long, default_value_t = 200)]
    iters1: usize,
    #[arg(long, default_value_t = 50)]
    iters2: usize,
    #[arg(long, default_value_t = 16)]
    k1: usize,
    /// Fine-stage neighbors; defaults to 48, or k1 scaled by the square root
    /// of the element-count ratio when k1 is not 16.
    #[arg(long)]
    k2: Option<usize>,
    /// Adam step size.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop a stage once the loss falls below this value.
    #[arg(long)]
    stop_loss: Option<f64>,
    /// Write the final network parameters (binary) and config (JSON).
    #[arg(long)]
    params_out: Option<PathBuf>,
    #[command(flatten)]
    out: ReconOutput,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[command(flatten)]
    input: VoltageInput,
    /// Absolute regularization weight.
    #[arg(long, required_unless_present = "lambda_rel", conflicts_with = "lambda_rel")]
    lambda: Option<f64>,
    /// Regularization relative to the largest diagonal of J^T J at the
    /// background.
    #[arg(long)]
    lambda_rel: Option<f64>,
    /// Gauss-Newton iterations (ignored by l2).
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Uniform starting conductivity; defaults to the best homogeneous fit.
    #[arg(long)]
    background: Option<f64>,
    #[command(flatten)]
    out: ReconOutput,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Reference mesh and conductivity.
    #[arg(long)]
    truth_mesh: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Reconstruction mesh and conductivity.
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    sigma: PathBuf,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    sigma: PathBuf,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// Exact pixel values as `row,col,value` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_inclusion(s: &str) -> Result<Inclusion, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, radius, conductivity] => Ok(Inclusion {
            x,
            y,
            radius,
            conductivity,
        }),
        _ => Err(format!("expected x,y,radius,sigma, got {} values", v.len())),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_mesh(path: &Path) -> anyhow::Result<TriangleMesh> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_mesh(&bytes).with_context(|| format!("loading mesh {}", path.display()))
}

fn read_sigma(path: &Path, mesh: &TriangleMesh) -> anyhow::Result<ConductivityField> {
    let sigma = load_conductivity(&read_text(path)?).with_context(|| format!("loading {}", path.display()))?;
    if sigma.len() != mesh.element_count() {
        bail!(
            "{} has {} values but the mesh has {} elements",
            path.display(),
            sigma.len(),
            mesh.element_count()
        );
    }
    Ok(sigma)
}

/// `v.csv` -> `v.protocol.json`.
fn sidecar_path(voltage: &Path) -> PathBuf {
    voltage.with_extension("protocol.json")
}

fn read_voltages(input: &VoltageInput) -> anyhow::Result<(StimulationProtocol, VoltageVector)> {
    let side = input.protocol.clone().unwrap_or_else(|| sidecar_path(&input.voltage));
    let spec = ProtocolSpec::from_json(&read_text(&side)?).with_context(|| format!("loading {}", side.display()))?;
    let protocol = spec.protocol()?;
    let v = load_voltages(&read_text(&input.voltage)?, &protocol)
        .with_context(|| format!("loading {}", input.voltage.display()))?;
    Ok((protocol, v))
}

fn cmd_mesh_gen(a: MeshGenArgs) -> anyhow::Result<()> {
    if a.shape != "disk" {
        bail!("unsupported shape `{}` (only `disk`)", a.shape);
    }
    let mesh = generate_disk_mesh(a.radius, a.elements, a.electrodes)?;
    write(&a.output, save_mesh(&mesh))?;
    println!("elements={} nodes={}", mesh.element_count(), mesh.node_count());
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> anyhow::Result<()> {
    let mesh = read_mesh(&a.mesh)?;
    let spec = match (&a.spec, a.background) {
        (Some(path), _) => PhantomSpec::from_json(&read_text(path)?).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(background)) => {
            let spec = PhantomSpec {
                background,
                inclusions: a.inclusion.clone(),
            };
            spec.validate()?;
            spec
        }
        (None, None) => bail!("give either --spec or --background"),
    };
    let sigma = generate_phantom(&spec, &mesh)?;
    write(&a.output, save_conductivity(&sigma))?;
    if let Some(path) = &a.spec_out {
        write(path, spec.to_json()?)?;
    }
    println!("elements={}", sigma.len());
    Ok(())
}

fn cmd_forward(a: ForwardArgs) -> anyhow::Result<()> {
    let mesh = read_mesh(&a.mesh)?;
    let sigma = read_sigma(&a.sigma, &mesh)?;
    if a.electrodes != mesh.electrodes().len() {
        bail!(
            "--electrodes {} but the mesh has {} electrodes",
            a.electrodes,
            mesh.electrodes().len()
        );
    }
    let spec = ProtocolSpec {
        electrode_count: a.electrodes,
        amplitude: a.amplitude,
    };
    let protocol = spec.protocol()?;
    let mut v = forward(&mesh, &sigma, &protocol)?;
    if let Some(snr) = a.snr {
        v = add_noise(&v, snr, a.seed)?;
    }
    write(&a.output, save_voltages(&protocol, &v)?)?;
    write(&sidecar_path(&a.output), spec.to_json()?)?;
    println!("measurements={}", v.len());
    Ok(())
}

fn write_outputs(out: &ReconOutput, sigma: &ConductivityField, report: &ReconReport, timing: &TimingReport) -> anyhow::Result<()> {
    write(&out.output, save_conductivity(sigma))?;
    if let Some(path) = &out.report {
        write(path, report.to_json()?)?;
    }
    if let Some(path) = &out.timing {
        write(path, timing.to_json()?)?;
    }
    Ok(())
}

fn misfit(mesh: &TriangleMesh, sigma: &ConductivityField, protocol: &StimulationProtocol, v: &VoltageVector) -> anyhow::Result<f64> {
    Ok(loss(&forward(mesh, sigma, protocol)?, v)?)
}

fn cmd_unsup(a: UnsupArgs) -> anyhow::Result<()> {
    let coarse = read_mesh(&a.coarse)?;
    let fine = read_mesh(&a.fine)?;
    let (protocol, v) = read_voltages(&a.input)?;
    let k2 = a.k2.unwrap_or_else(|| {
        if a.k1 == 16 {
            48
        } else {
            mreit_core::recon::scaled_k(a.k1, coarse.element_count(), fine.element_count())
        }
    });
    let defaults = ReconConfig::default();
    let config = ReconConfig {
        stage1: StageConfig {
            iterations: a.iters1,
            k: a.k1,
        },
        stage2: StageConfig {
            iterations: a.iters2,
            k: k2,
        },
        step: a.step,
        seed: a.seed,
        stop_loss: a.stop_loss,
        ..defaults
    };
    let result = reconstruct_unsupervised(&coarse, &fine, &protocol, &v, &config)?;
    let meshes = [&coarse, &fine];
    let finals = result
        .stages
        .iter()
        .zip(meshes)
        .map(|(s, m)| misfit(m, &s.sigma, &protocol, &v))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    let report = ReconReport::unsupervised(&config, &result, &finals)?;
    let timing = TimingReport::of(&result);
    write_outputs(&a.out, result.final_sigma(), &report, &timing)?;
    if let Some(path) = &a.params_out {
        write(path, save_params(&result.params))?;
        let mut net = config.network();
        net.k = config.stage2.k;
        write(&path.with_extension("json"), save_config(&net)? + "\n")?;
    }
    for (i, (s, t)) in result.stages.iter().zip(&timing.stage_seconds).enumerate() {
        eprintln!(
            "stage {}: {} elements, k={}, {} iterations, loss {:.6e} -> {:.6e}, {t:.2} s",
            i + 1,
            s.elements,
            s.k,
            s.loss_history.len(),
            s.loss_history.first().copied().unwrap_or(f64::NAN),
            finals[i]
        );
    }
    println!("elements={}", result.final_sigma().len());
    Ok(())
}

fn cmd_baseline(a: BaselineArgs, single_step: bool) -> anyhow::Result<()> {
    let mesh = read_mesh(&a.mesh)?;
    let (protocol, v) = read_voltages(&a.input)?;
    let background = match a.background {
        Some(b) => b,
        None => estimate_background(&mesh, &protocol, &v)?,
    };
    let lambda = match (a.lambda, a.lambda_rel) {
        (Some(l), _) => l,
        (None, Some(alpha)) => relative_lambda(&mesh, &protocol, background, alpha)?,
        (None, None) => bail!("--lambda or --lambda-rel is required"),
    };
    let start = std::time::Instant::now();
    let (sigma, iterations, method) = if single_step {
        (reconstruct_l2(&mesh, &protocol, &v, lambda, background)?, 1, "l2")
    } else {
        (
            reconstruct_gauss_newton(&mesh, &protocol, &v, lambda, a.iterations, background)?,
            a.iterations,
            "gn",
        )
    };
    let seconds = start.elapsed().as_secs_f64();
    let final_loss = misfit(&mesh, &sigma, &protocol, &v)?;
    let report = ReconReport {
        method: method.into(),
        seed: None,
        config: serde_json::json!({
            "lambda": lambda,
            "lambda_rel": a.lambda_rel,
            "iterations": iterations,
            "background": background,
        }),
        stages: vec![StageReport {
            elements: mesh.element_count(),
            k: None,
            iterations,
            loss_history: Vec::new(),
            final_loss,
        }],
    };
    let timing = TimingReport {
        stage_seconds: vec![seconds],
    };
    write_outputs(&a.out, &sigma, &report, &timing)?;
    eprintln!("{method}: lambda {lambda:.6e}, {iterations} iteration(s), loss {final_loss:.6e}, {seconds:.2} s");
    println!("elements={}", sigma.len());
    Ok(())
}

/// `v` with nine significant digits.
fn significant(v: f64) -> String {
    let decimals = if v == 0.0 || !v.is_finite() {
        8
    } else {
        (8 - v.abs().log10().floor() as i64).max(0) as usize
    };
    format!("{v:.decimals$}")
}

fn cmd_metrics(a: MetricsArgs) -> anyhow::Result<()> {
    let truth_mesh = read_mesh(&a.truth_mesh)?;
    let truth = read_sigma(&a.truth, &truth_mesh)?;
    let mesh = read_mesh(&a.mesh)?;
    let sigma = read_sigma(&a.sigma, &mesh)?;
    let i = rasterize(&truth_mesh, &truth, a.resolution)?;
    let i_hat = rasterize(&mesh, &sigma, a.resolution)?;
    let s = ssim(&i, &i_hat)?;
    let r = rie(&i_hat, &i)?;
    println!("SSIM={}", significant(s));
    println!("RIE={}", if r == 0.0 { format!("{r:.9}") } else { significant(r) });
    Ok(())
}

fn cmd_render(a: RenderArgs) -> anyhow::Result<()> {
    let mesh = read_mesh(&a.mesh)?;
    let sigma = read_sigma(&a.sigma, &mesh)?;
    let image = rasterize(&mesh, &sigma, a.resolution)?;
    write(&a.output, image.to_pgm())?;
    if let Some(path) = &a.csv {
        write(path, image.to_csv())?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("configuring {n} threads: {e}"))?;
    }
    match cli.command {
        Command::MeshGen(a) => cmd_mesh_gen(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Recon { method } => match method {
            ReconMethod::Unsup(a) => cmd_unsup(a),
            ReconMethod::Gn(a) => cmd_baseline(a, false),
            ReconMethod::L2(a) => cmd_baseline(a, true),
        },
        Command::Metrics(a) => cmd_metrics(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<mreit_core::Error>().is_some_and(mreit_core::Error::is_numerical));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
