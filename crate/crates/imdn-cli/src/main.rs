//! Command-line interface for the imdn super-resolution engine.
//!
//! Subcommands: `train`, `sr`, `sr-any`, `eval`, `analyze`, `check-grad`.
//! Every command that writes files also writes a JSON run manifest next to
//! its outputs; all randomness flows from the `--seed` flag, so reruns with
//! the same arguments reproduce identical output bytes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use imdn::analysis;
use imdn::gradcheck;
use imdn::image::{bicubic_resize, load_png, save_png, ImageBuffer};
use imdn::metrics::{evaluate_pairs, TrainImage};
use imdn::model::{
    build_ablation, build_imdn, build_imdn_as, init_weights, load_weights, save_weights,
    AblationVariant, ArchKind, ImdnConfig, ModelGraph,
};
use imdn::optim::TrainConfig;
use imdn::tensor::Tensor;
use imdn::tiler::super_resolve_tiled;
use imdn::train::train_loop;

#[derive(Parser)]
#[command(name = "imdn", version, about = "IMDN super-resolution engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a directory of HR PNG images.
    Train(TrainArgs),
    /// Super-resolve a PNG with an upsampling model.
    Sr(SrArgs),
    /// Same-size super-resolution of arbitrary-size PNGs via adaptive
    /// cropping.
    SrAny(SrAnyArgs),
    /// Evaluate PSNR/SSIM on a directory of HR images.
    Eval(EvalArgs),
    /// Print the parameter/MAC cost breakdown of a network variant.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient verification suite.
    CheckGrad(CheckGradArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    /// Full 6-block network.
    Imdn,
    /// Same-size variant with two downsampling convolutions.
    ImdnAs,
    /// 4-block network with CCA and IIC.
    B4,
    /// 4-block network without CCA or IIC.
    BasicB4,
    /// 4-block network with CCA, without IIC.
    BasicB4Cca,
    /// 4-block network with plain 3-conv blocks.
    Plain3convB4,
}

impl VariantArg {
    fn label(self) -> &'static str {
        match self {
            VariantArg::Imdn => "imdn",
            VariantArg::ImdnAs => "imdn-as",
            VariantArg::B4 => "B4",
            VariantArg::BasicB4 => "basic-B4",
            VariantArg::BasicB4Cca => "basic-B4+CCA",
            VariantArg::Plain3convB4 => "plain-3conv-B4",
        }
    }

    fn ablation(self) -> Option<AblationVariant> {
        match self {
            VariantArg::B4 => Some(AblationVariant::B4CcaIic),
            VariantArg::BasicB4 => Some(AblationVariant::BasicB4),
            VariantArg::BasicB4Cca => Some(AblationVariant::BasicB4Cca),
            VariantArg::Plain3convB4 => Some(AblationVariant::Plain3ConvB4),
            _ => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of HR training PNGs.
    #[arg(long)]
    hr_dir: PathBuf,
    /// Output directory for weights, loss CSV and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    /// Number of refinement blocks (overrides the variant default).
    #[arg(long)]
    blocks: Option<usize>,
    /// Feature width (defaults to 64).
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Imdn)]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial learning rate.
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// HR patch side; must be divisible by the scale.
    #[arg(long, default_value_t = 192)]
    patch: usize,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Expected upscale factor; rejected if the weight file disagrees.
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args)]
struct SrAnyArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Overlap padding; must be a positive multiple of 4.
    #[arg(long, default_value_t = 4)]
    padding: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Directory of HR PNGs; LR inputs are synthesized by bicubic
    /// downscaling.
    #[arg(long)]
    hr_dir: PathBuf,
    /// Border pixels to shave before computing metrics (defaults to the
    /// scale factor).
    #[arg(long)]
    shave: Option<usize>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score HR images against themselves (pipeline check, no model).
    #[arg(long, default_value_t = false)]
    identity: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Imdn)]
    variant: VariantArg,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Exit nonzero unless the K-rounded numbers match the published table
    /// values.
    #[arg(long, default_value_t = false)]
    assert_paper: bool,
    /// Also write the per-layer breakdown as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one check's analytic gradient (negative control).
    #[arg(long)]
    break_op: Option<String>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: serde_json::Value,
    seed: Option<u64>,
    timestamp_unix: u64,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, args: serde_json::Value, seed: Option<u64>, outputs: &[&Path]) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            seed,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sr(args) => cmd_sr(args),
        Command::SrAny(args) => cmd_sr_any(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::CheckGrad(args) => cmd_check_grad(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .png files in {}", dir.display());
    }
    Ok(paths)
}

/// Crop a tensor's spatial dims down to multiples of `m`.
fn crop_to_multiple(t: &Tensor, m: usize) -> Tensor {
    let [_, _, h, w] = t.shape();
    let (ch, cw) = (h - h % m, w - w % m);
    if (ch, cw) == (h, w) {
        t.clone()
    } else {
        t.crop_spatial(0, 0, ch, cw)
    }
}

fn build_variant(
    variant: VariantArg,
    scale: usize,
    blocks: Option<usize>,
    channels: Option<usize>,
) -> Result<ModelGraph> {
    let model = match variant {
        VariantArg::Imdn => {
            let mut cfg = match channels {
                Some(c) => ImdnConfig::tiny(blocks.unwrap_or(6), c, scale),
                None => ImdnConfig::with_scale(scale),
            };
            if let Some(b) = blocks {
                cfg.num_blocks = b;
            }
            build_imdn(cfg)?
        }
        VariantArg::ImdnAs => {
            let mut cfg = match channels {
                Some(c) => ImdnConfig::tiny(blocks.unwrap_or(6), c, 1),
                None => ImdnConfig {
                    scale: 1,
                    ..Default::default()
                },
            };
            if let Some(b) = blocks {
                cfg.num_blocks = b;
            }
            build_imdn_as(cfg)?
        }
        other => {
            let ablation = other.ablation().expect("ablation variant");
            if blocks.is_some() || channels.is_some() {
                bail!("--blocks/--channels apply only to the imdn/imdn-as variants");
            }
            build_ablation(ablation, scale)?
        }
    };
    Ok(model)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.patch % args.scale != 0 {
        bail!(
            "--patch {} is not divisible by --scale {}",
            args.patch,
            args.scale
        );
    }
    std::fs::create_dir_all(&args.out_dir)?;

    let mut model = build_variant(args.variant, args.scale, args.blocks, args.channels)?;
    init_weights(&mut model, args.seed);

    // IMDN_AS trains on same-size pairs: the LR side is the HR image pushed
    // through a bicubic down/up cycle at the requested scale.
    let same_size = model.kind == ArchKind::ImdnAs;
    let mut dataset = Vec::new();
    for path in list_pngs(&args.hr_dir)? {
        let img = load_png(&path)?.to_tensor();
        if same_size {
            let hr = crop_to_multiple(&img, 4 * args.scale);
            let [_, _, h, w] = hr.shape();
            let down = bicubic_resize(&hr, h / args.scale, w / args.scale, true);
            let lr = bicubic_resize(&down, h, w, false);
            dataset.push(TrainImage { hr, lr, scale: 1 });
        } else {
            let hr = crop_to_multiple(&img, args.scale);
            dataset.push(TrainImage::from_hr(hr, args.scale));
        }
    }

    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        hr_patch: args.patch,
        ..Default::default()
    };
    let history = train_loop(&mut model, &dataset, &config, args.steps, args.seed)?;

    let weights_path = args.out_dir.join("weights.imdnw");
    let loss_path = args.out_dir.join("loss.csv");
    save_weights(&model, &weights_path)?;
    std::fs::write(&loss_path, history.to_csv())?;
    RunManifest::new(
        "train",
        serde_json::json!({
            "hr_dir": args.hr_dir.display().to_string(),
            "scale": args.scale,
            "steps": args.steps,
            "blocks": args.blocks,
            "channels": args.channels,
            "variant": args.variant.label(),
            "lr": args.lr,
            "batch": args.batch,
            "patch": args.patch,
        }),
        Some(args.seed),
        &[&weights_path, &loss_path],
    )
    .write(&args.out_dir.join("manifest.json"))?;

    if let (Some(first), Some(last)) = (history.first_loss(), history.last_loss()) {
        println!("trained {} steps: loss {first:.6} -> {last:.6}", args.steps);
    } else {
        println!("trained 0 steps");
    }
    println!("weights: {}", weights_path.display());
    Ok(())
}

fn cmd_sr(args: SrArgs) -> Result<()> {
    let model = load_weights(&args.weights)?;
    if model.kind != ArchKind::Imdn {
        bail!("weights are a same-size (IMDN_AS) model; use `imdn sr-any`");
    }
    if let Some(scale) = args.scale {
        if scale != model.config.scale {
            bail!(
                "--scale {} does not match the weight file's scale {}",
                scale,
                model.config.scale
            );
        }
    }
    let input = load_png(&args.input)?;
    let sr = model.forward(&input.to_tensor())?;
    save_png(&ImageBuffer::from_tensor(&sr), &args.output)?;
    RunManifest::new(
        "sr",
        serde_json::json!({
            "weights": args.weights.display().to_string(),
            "input": args.input.display().to_string(),
            "scale": model.config.scale,
        }),
        None,
        &[&args.output],
    )
    .write(&manifest_sibling(&args.output))?;
    println!(
        "{} -> {} ({}x)",
        args.input.display(),
        args.output.display(),
        model.config.scale
    );
    Ok(())
}

fn manifest_sibling(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn cmd_sr_any(args: SrAnyArgs) -> Result<()> {
    if args.padding == 0 || args.padding % 4 != 0 {
        bail!(
            "--padding {} rejected: the overlap padding must be 4k for an integer k >= 1",
            args.padding
        );
    }
    let model = load_weights(&args.weights)?;
    if model.kind != ArchKind::ImdnAs {
        bail!("weights are an upsampling model; use `imdn sr`");
    }
    let input = load_png(&args.input)?;
    let tiled = super_resolve_tiled(&input.to_tensor(), &model, args.padding)?;
    save_png(&ImageBuffer::from_tensor(&tiled.output), &args.output)?;
    RunManifest::new(
        "sr-any",
        serde_json::json!({
            "weights": args.weights.display().to_string(),
            "input": args.input.display().to_string(),
            "padding": args.padding,
        }),
        None,
        &[&args.output],
    )
    .write(&manifest_sibling(&args.output))?;
    println!("tiles: 4");
    println!("seam_max_abs: {:.3e}", tiled.seam_max_abs);
    println!("{} -> {}", args.input.display(), args.output.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = match (&args.weights, args.identity) {
        (_, true) => None,
        (Some(path), false) => Some(load_weights(path)?),
        (None, false) => bail!("either --weights or --identity is required"),
    };
    let scale = model
        .as_ref()
        .map(|m| match m.kind {
            ArchKind::Imdn => m.config.scale,
            ArchKind::ImdnAs => 1,
        })
        .unwrap_or(1);
    let shave = args.shave.unwrap_or(scale);

    let mut pairs = Vec::new();
    for path in list_pngs(&args.hr_dir)? {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let hr_full = load_png(&path)?.to_tensor();
        match &model {
            None => pairs.push((name, hr_full.clone(), hr_full)),
            Some(m) if m.kind == ArchKind::Imdn => {
                let hr = crop_to_multiple(&hr_full, scale);
                let [_, _, h, w] = hr.shape();
                let lr = bicubic_resize(&hr, h / scale, w / scale, true);
                let sr = m.forward(&lr)?;
                pairs.push((name, sr, hr));
            }
            Some(m) => {
                // same-size model: degrade in place, then restore tiled
                let hr = crop_to_multiple(&hr_full, 4);
                let [_, _, h, w] = hr.shape();
                let down = bicubic_resize(&hr, (h / 4).max(1), (w / 4).max(1), true);
                let lr = bicubic_resize(&down, h, w, false);
                let sr = super_resolve_tiled(&lr, m, 4)?;
                pairs.push((name, sr.output, hr));
            }
        }
    }

    let report = evaluate_pairs(&pairs, shave)?;
    let mut csv = String::from("image,psnr_db,ssim\n");
    for row in &report.rows {
        csv.push_str(&format!("{},{},{}\n", row.name, row.psnr_db, row.ssim));
    }
    csv.push_str(&format!("mean,{},{}\n", report.mean_psnr_db, report.mean_ssim));

    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            RunManifest::new(
                "eval",
                serde_json::json!({
                    "hr_dir": args.hr_dir.display().to_string(),
                    "weights": args.weights.as_ref().map(|p| p.display().to_string()),
                    "identity": args.identity,
                    "shave": shave,
                }),
                None,
                &[path],
            )
            .write(&manifest_sibling(path))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Published cost figures, rounded to the nearest K as in the tables.
struct Golden {
    params_exact: usize,
    params_k: u64,
    macs_k: Option<u64>,
    depth: Option<usize>,
}

fn golden_for(variant: VariantArg, scale: usize) -> Option<Golden> {
    match (variant, scale) {
        (VariantArg::Imdn, 2) => Some(Golden {
            params_exact: 694_404,
            params_k: 694,
            macs_k: Some(173),
            depth: Some(34),
        }),
        (VariantArg::Imdn, 3) => Some(Golden {
            params_exact: 703_059,
            params_k: 703,
            macs_k: Some(78),
            depth: Some(34),
        }),
        (VariantArg::Imdn, 4) => Some(Golden {
            params_exact: 715_176,
            params_k: 715,
            macs_k: Some(45),
            depth: Some(34),
        }),
        (VariantArg::Plain3convB4, 4) => Some(Golden {
            params_exact: 509_552,
            params_k: 510,
            macs_k: None,
            depth: None,
        }),
        (VariantArg::BasicB4, 4) => Some(Golden {
            params_exact: 480_176,
            params_k: 480,
            macs_k: None,
            depth: None,
        }),
        (VariantArg::BasicB4Cca, 4) => Some(Golden {
            params_exact: 482_496,
            params_k: 482,
            macs_k: None,
            depth: None,
        }),
        (VariantArg::B4, 4) => Some(Golden {
            params_exact: 498_944,
            params_k: 499,
            macs_k: None,
            depth: None,
        }),
        _ => None,
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let model = build_variant(args.variant, args.scale, None, None)?;
    let report = analysis::analyze(&model);

    println!(
        "{} x{}  ({} layers)",
        args.variant.label(),
        args.scale,
        report.rows.len()
    );
    println!(
        "{:<16} {:>5} {:>5} {:>3} {:>9} {:>12}",
        "layer", "in", "out", "k", "params", "macs_coeff"
    );
    for row in &report.rows {
        println!(
            "{:<16} {:>5} {:>5} {:>3} {:>9} {:>12.1}",
            row.name, row.in_channels, row.out_channels, row.kernel, row.params, row.macs_coeff
        );
    }
    println!(
        "total: {} params ({}K, {:.1}M), {:.1} MACs/HR-pixel ({}K m^2), depth {} (+{} attention)",
        report.total_params,
        report.params_k(),
        report.params_m(),
        report.macs_per_hr_pixel,
        report.macs_k(),
        report.trunk_depth,
        report.attention_depth,
    );

    if let Some(path) = &args.csv {
        let mut csv = String::from("layer,in,out,k,params,macs_coeff\n");
        for row in &report.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.name, row.in_channels, row.out_channels, row.kernel, row.params, row.macs_coeff
            ));
        }
        std::fs::write(path, csv)?;
    }

    if args.assert_paper {
        let golden = golden_for(args.variant, args.scale).ok_or_else(|| {
            anyhow!(
                "no published figures for {} at x{}",
                args.variant.label(),
                args.scale
            )
        })?;
        let mut failures = Vec::new();
        if report.total_params != golden.params_exact {
            failures.push(format!(
                "params {} != expected {}",
                report.total_params, golden.params_exact
            ));
        }
        if report.params_k() != golden.params_k {
            failures.push(format!(
                "params {}K != published {}K",
                report.params_k(),
                golden.params_k
            ));
        }
        if let Some(k) = golden.macs_k {
            if report.macs_k() != k {
                failures.push(format!("macs {}K != published {}K", report.macs_k(), k));
            }
        }
        if let Some(d) = golden.depth {
            if report.trunk_depth != d {
                failures.push(format!("depth {} != published {}", report.trunk_depth, d));
            }
        }
        if !failures.is_empty() {
            bail!("published-figure check failed: {}", failures.join("; "));
        }
        println!("published-figure check: ok");
    }
    Ok(())
}

fn cmd_check_grad(args: CheckGradArgs) -> Result<()> {
    let report =
        gradcheck::run_suite(args.seed, gradcheck::DEFAULT_STEP, args.break_op.as_deref())?;
    for check in &report.checks {
        println!(
            "{:<24} max_rel_err {:>12.3e} {}",
            check.name,
            check.max_rel_err,
            if check.max_rel_err < report.tolerance {
                "ok"
            } else {
                "FAIL"
            }
        );
    }
    println!("max relative error: {:.3e}", report.max_rel_err());
    if !report.passed() {
        bail!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            report.max_rel_err(),
            report.tolerance
        );
    }
    Ok(())
}
