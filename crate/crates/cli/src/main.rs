use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array1;

use gatekit::ascent::pixel_direction;
use gatekit::interface::container::{load_model, save_model, Dtype};
use gatekit::interface::grid::ImageGrid;
use gatekit::interface::image::load_image;
use gatekit::pathspace::{enumerate_paths, feature_kernel, path_kernel, TensorField};
use gatekit::stability::{run_stability, DatasetSpec, TrainConfig};
use gatekit::verify::{run_oracle_suite, VerifyConfig};
use gatekit::{pga_run, AscentConfig, GateKind, GatingSpec, Network, PoolGate, Shape};

/// Gating-induced pullbacks, pullback ascent and path-space checks for ReLU networks.
#[derive(Debug, Parser)]
#[command(name = "gatekit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render input-space pullbacks for every input and class.
    Pullback(PullbackArgs),
    /// Projected gradient ascent along pullbacks; renders x_T - x_0.
    Ascent(AscentArgs),
    /// Product path kernel between two inputs.
    Kernel(KernelArgs),
    /// Cross-check fast pullbacks against the path-space oracle on random nets.
    Verify(VerifyArgs),
    /// Train a small dense net and report gate stability over training.
    TrainStability(TrainArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GateArg {
    Hard,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolArg {
    Hard,
    Softmax,
}

#[derive(Debug, Args)]
struct GatingArgs {
    /// Backward gates for ReLUs.
    #[arg(long, value_enum, default_value = "sigmoid")]
    gate: GateArg,
    /// Temperature of the sigmoid gates.
    #[arg(long, default_value_t = 0.3)]
    temp: f64,
    /// Backward routing through max-pools.
    #[arg(long, value_enum, default_value = "softmax")]
    pool_gate: PoolArg,
    /// Temperature of the softmax pool weights.
    #[arg(long, default_value_t = 0.3)]
    pool_temp: f64,
}

impl GatingArgs {
    fn spec(&self) -> GatingSpec {
        GatingSpec {
            kind: match self.gate {
                GateArg::Hard => GateKind::Hard,
                GateArg::Sigmoid => GateKind::GlobalSigmoid {
                    temperature: self.temp,
                },
            },
            pool: match self.pool_gate {
                PoolArg::Hard => PoolGate::Hard,
                PoolArg::Softmax => PoolGate::Softmax {
                    temperature: self.pool_temp,
                },
            },
        }
    }
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Weight container.
    #[arg(long)]
    model: PathBuf,
    /// 8-bit image, mapped to [-1, 1] and resized to the model input (repeatable).
    #[arg(long)]
    image: Vec<PathBuf>,
    /// JSON array of raw input values in model input order (repeatable).
    #[arg(long)]
    input: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct PullbackArgs {
    #[command(flatten)]
    inputs: InputArgs,
    /// Target class (repeatable); one grid column per class.
    #[arg(long, required = true)]
    class: Vec<usize>,
    #[command(flatten)]
    gating: GatingArgs,
    /// Disable per-cell min-max rescaling.
    #[arg(long)]
    no_scale_each: bool,
    /// Output directory, or a `.png` path naming the grid.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AscentArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long, required = true)]
    class: Vec<usize>,
    #[command(flatten)]
    gating: GatingArgs,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 20.0)]
    step_norm: f64,
    #[arg(long, default_value_t = 100.0)]
    radius: f64,
    /// Output directory, or a `.png` path naming the grid.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct KernelArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[command(flatten)]
    gating: GatingArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    nets: usize,
    /// Random inputs per net.
    #[arg(long, default_value_t = 10)]
    inputs: usize,
    /// Sigmoid temperature for the excitation identities.
    #[arg(long, default_value_t = 0.3)]
    temp: f64,
    #[arg(long, default_value_t = 314)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Input width, hidden widths and class count.
    #[arg(long, value_delimiter = ',', default_value = "2,8,8,2")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Epochs to snapshot; 0 is the initialization.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10,20,50")]
    snapshots: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Backward gates compared against the hard forward.
    #[arg(long, value_enum, default_value = "sigmoid")]
    gate: GateArg,
    #[arg(long, default_value_t = 0.3)]
    temp: f64,
    #[arg(long, default_value_t = 314)]
    seed: u64,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the final network as a weight container.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

fn read_json_input(path: &Path) -> Result<Array1<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values: Vec<f64> = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a JSON array of numbers", path.display()))?;
    Ok(Array1::from_vec(values))
}

fn load_inputs(net: &Network, args: &InputArgs) -> Result<Vec<Array1<f64>>> {
    let mut xs = Vec::new();
    for p in &args.image {
        xs.push(
            load_image(p, net.input_shape)
                .with_context(|| format!("loading image {}", p.display()))?,
        );
    }
    for p in &args.input {
        let x = read_json_input(p)?;
        if x.len() != net.input_shape.numel() {
            bail!(
                "{} has {} values, model input is {}",
                p.display(),
                x.len(),
                net.input_shape
            );
        }
        xs.push(x);
    }
    if xs.is_empty() {
        bail!("no inputs: pass --image or --input");
    }
    Ok(xs)
}

fn load(path: &Path) -> Result<Network> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

/// Renderable cell shape: images keep their shape, anything else becomes one
/// gray row.
fn cell_shape(s: Shape) -> Shape {
    if matches!(s.channels, 1 | 3) {
        s
    } else {
        Shape::new(1, s.channels * s.height, s.width)
    }
}

/// `--out` is either a directory or a `.png` path whose stem names the artifacts.
fn output_location(out: &Path, default_stem: &str) -> (PathBuf, String) {
    let is_png = out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    match (is_png, out.file_stem()) {
        (true, Some(stem)) => (
            out.parent().map(Path::to_path_buf).unwrap_or_default(),
            stem.to_string_lossy().into_owned(),
        ),
        _ => (out.to_path_buf(), default_stem.to_string()),
    }
}

/// Writes `<stem>.png` and `<stem>.raw`, returning the directory and stem used.
fn write_grid(out: &Path, default_stem: &str, grid: &ImageGrid) -> Result<(PathBuf, String)> {
    let (dir, stem) = output_location(out, default_stem);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let r = grid.render()?;
    fs::write(dir.join(format!("{stem}.png")), &r.png)?;
    fs::write(dir.join(format!("{stem}.raw")), &r.raw)?;
    Ok((dir, stem))
}

fn cmd_pullback(a: &PullbackArgs) -> Result<()> {
    let net = load(&a.inputs.model)?;
    let xs = load_inputs(&net, &a.inputs)?;
    let spec = a.gating.spec();
    let mut cells = Vec::new();
    for x in &xs {
        for &c in &a.class {
            let cfg = AscentConfig {
                target_class: c,
                gating: spec.clone(),
                ..Default::default()
            };
            cells.push(pixel_direction(&net, x.view(), &cfg)?.0);
        }
    }
    let grid = ImageGrid::new(
        xs.len(),
        a.class.len(),
        cell_shape(net.input_shape),
        cells,
        !a.no_scale_each,
    )?;
    let (dir, stem) = write_grid(&a.out, "pullbacks", &grid)?;
    println!(
        "wrote {}x{} pullback grid to {}",
        xs.len(),
        a.class.len(),
        dir.join(format!("{stem}.png")).display()
    );
    Ok(())
}

fn cmd_ascent(a: &AscentArgs) -> Result<()> {
    let net = load(&a.inputs.model)?;
    let xs = load_inputs(&net, &a.inputs)?;
    let mut cells = Vec::new();
    let mut logs = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        for &c in &a.class {
            let cfg = AscentConfig {
                steps: a.steps,
                step_norm: a.step_norm,
                radius: a.radius,
                target_class: c,
                gating: a.gating.spec(),
                ..Default::default()
            };
            let t = pga_run(&net, x.view(), &cfg)?;
            logs.push(serde_json::json!({
                "input": i,
                "class": c,
                "target_logits": t.target_logits,
                "difference_norm": t.difference.dot(&t.difference).sqrt(),
            }));
            cells.push(t.difference);
        }
    }
    let grid = ImageGrid::new(
        xs.len(),
        a.class.len(),
        cell_shape(net.input_shape),
        cells,
        true,
    )?;
    let (dir, stem) = write_grid(&a.out, "ascent", &grid)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&logs)?,
    )?;
    for l in &logs {
        println!("{l}");
    }
    Ok(())
}

fn cmd_kernel(a: &KernelArgs) -> Result<()> {
    let net = load(&a.inputs.model)?;
    let xs = load_inputs(&net, &a.inputs)?;
    if xs.len() != 2 {
        bail!("kernel needs exactly two inputs, got {}", xs.len());
    }
    let spec = a.gating.spec();
    let (x, y) = (xs[0].view(), xs[1].view());
    let k = path_kernel(&net, x, y, &spec)?;
    let explicit = match enumerate_paths(&net) {
        Ok(layout) => Some(feature_kernel(
            &layout,
            x,
            &TensorField::for_input(&net, x, &spec)?,
            y,
            &TensorField::for_input(&net, y, &spec)?,
        )?),
        Err(_) => None,
    };
    println!(
        "{}",
        serde_json::json!({ "kernel": k, "explicit_feature_product": explicit, "gating": spec })
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let cfg = VerifyConfig {
        nets: a.nets,
        inputs_per_net: a.inputs,
        seed: a.seed,
        temperature: a.temp,
        ..Default::default()
    };
    let report = run_oracle_suite(&cfg)?;
    println!("{} nets, {} inputs", report.nets, report.inputs);
    for id in &report.identities {
        println!(
            "{} {:<45} max deviation {:.3e} (tolerance {:.0e}, {} checks, {} skipped)",
            if id.passed() { "ok  " } else { "FAIL" },
            id.name,
            id.max_deviation,
            id.tolerance,
            id.checks,
            id.skipped
        );
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report.passed())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.widths.len() < 3 {
        bail!("--widths needs input, at least one hidden width and the class count");
    }
    let dataset = match DatasetSpec::default() {
        DatasetSpec::TwoGaussians {
            train,
            eval,
            separation,
            std,
            ..
        } => DatasetSpec::TwoGaussians {
            dim: a.widths[0],
            train,
            eval,
            separation,
            std,
        },
    };
    let cfg = TrainConfig {
        dataset,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        snapshot_epochs: a.snapshots.clone(),
        seed: a.seed,
    };
    let spec = match a.gate {
        GateArg::Hard => GatingSpec::hard(),
        GateArg::Sigmoid => GatingSpec::sigmoid(a.temp),
    };
    let (run, report) = run_stability(&a.widths, &cfg, &spec)?;
    fs::write(&a.out, report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.save_model {
        save_model(
            run.final_network().context("no snapshots recorded")?,
            p,
            Dtype::F64,
        )?;
    }
    for s in &report.snapshots {
        println!(
            "epoch {:>4}  min rho {:.4}  eval acc {:.3}  active {:.3}",
            s.epoch,
            s.min_rho,
            s.eval_accuracy.unwrap_or(f64::NAN),
            s.active_fraction
        );
    }
    for f in &report.flip_rates {
        println!(
            "flips {:>4} -> {:<4} {:.4}",
            f.from_epoch, f.to_epoch, f.rate
        );
    }
    if let Some(acc) = run.curves.accuracy.last() {
        println!("final train accuracy {acc:.4}");
    }
    match report.stable_from_epoch {
        Some(e) => println!("rho > {} from epoch {e}", report.rho_threshold),
        None => println!("rho never stays above {}", report.rho_threshold),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Pullback(a) => cmd_pullback(a).map(|_| true),
        Command::Ascent(a) => cmd_ascent(a).map(|_| true),
        Command::Kernel(a) => cmd_kernel(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
        Command::TrainStability(a) => cmd_train(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
