//! `rrf` — command-line front end for the sidecar refinement codec.
//!
//! Raw YUV420 files carry no geometry, so every command that touches a clip
//! takes `--width`/`--height`. Exit codes: 0 on success, 1 on operational
//! errors (bad files, malformed streams), 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rrf::metrics::{bd_rate, from_csv, mean_frame_psnr, to_csv, to_plotdata, RatePoint, UnitRecord};
use rrf::net::{ChannelRole, PackConfig};
use rrf::pipeline::{decode_sequence, encode_sequence, EncodeParams};
use rrf::quant::bw_for_qp;
use rrf::stream::{read_stream, RolePlan, UnitMode};
use rrf::synth::{synth_clip, SynthConfig};
use rrf::train::TrainConfig;
use rrf::yuv::{read_yuv, write_yuv, CodingMode, YuvFrame};

#[derive(Parser)]
#[command(name = "rrf", version, about = "Sidecar refinement codec for compressed video")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train refinement networks against a source clip and write a sidecar
    Encode(EncodeArgs),
    /// Apply a sidecar to a decoded clip
    Decode(DecodeArgs),
    /// Summarize a sidecar stream without touching any video
    Inspect(InspectArgs),
    /// Quality and rate measurements
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Convert an encode report (CSV) into plot-friendly columns
    Plotdata(PlotdataArgs),
    /// Generate a synthetic source/decoded clip pair for experiments
    Gen(GenArgs),
}

#[derive(Args)]
struct Geometry {
    /// Frame width in pixels
    #[arg(long)]
    width: usize,
    /// Frame height in pixels
    #[arg(long)]
    height: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Independent GoPs, parallel-friendly
    Ra,
    /// Chained GoPs with differential updates
    Ld,
}

impl ModeArg {
    fn coding_mode(self) -> CodingMode {
        match self {
            ModeArg::Ra => CodingMode::RandomAccess,
            ModeArg::Ld => CodingMode::LowDelay,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RolesArg {
    Luma,
    Chroma,
    Both,
}

#[derive(Args)]
struct EncodeArgs {
    /// Decoded (compressed) clip, raw YUV420 planar
    #[arg(long)]
    decoded: PathBuf,
    /// Pristine source the refinement should steer towards
    #[arg(long)]
    source: PathBuf,
    #[command(flatten)]
    geometry: Geometry,
    /// Output sidecar; a reproducibility sketch lands next to it as `<out>.cfg.json`
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Coding structure
    #[arg(long, value_enum, default_value = "ra")]
    mode: ModeArg,
    /// GoP length in frames
    #[arg(long, default_value_t = 32)]
    gop: usize,
    /// Pick the weight bit depth that suits this encoder QP
    #[arg(long, conflicts_with = "weight_bits")]
    qp: Option<i32>,
    /// Weight quantization depth in bits
    #[arg(long, default_value_t = 9)]
    weight_bits: u8,
    /// Bias quantization depth in bits
    #[arg(long, default_value_t = 10)]
    bias_bits: u8,
    /// Channel roles to refine
    #[arg(long, value_enum, default_value = "both")]
    roles: RolesArg,
    /// Luma pixel packing (1x1, 1x2, 2x1 or 2x2)
    #[arg(long, value_parser = parse_pack, default_value = "2x2")]
    pack: PackConfig,
    /// Chroma pixel packing; defaults to --pack
    #[arg(long, value_parser = parse_pack)]
    chroma_pack: Option<PackConfig>,
    /// Hidden width of the luma network
    #[arg(long, default_value_t = 12)]
    net_width: usize,
    /// Hidden width of the chroma network; defaults to --net-width
    #[arg(long)]
    chroma_net_width: Option<usize>,
    /// Adam steps per network
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Training patches per Adam step
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Training seed; the RRF_SEED environment variable overrides it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; random-access GoPs train in parallel (0 = all cores)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the per-unit report as CSV
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the refined clip (bit-identical to what a decoder produces)
    #[arg(long)]
    refined: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Decoded (compressed) clip the sidecar was encoded against
    #[arg(long)]
    decoded: PathBuf,
    #[command(flatten)]
    geometry: Geometry,
    /// Sidecar stream to apply
    #[arg(long)]
    stream: PathBuf,
    /// Output refined clip
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Optional pristine source; prints before/after PSNR when given
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Sidecar stream to summarize
    stream: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Mean per-frame PSNR between two clips of equal length
    Psnr(PsnrArgs),
    /// Bjøntegaard delta rate between two rate-distortion curves
    BdRate(BdRateArgs),
}

#[derive(Args)]
struct PsnrArgs {
    /// Reference clip
    a: PathBuf,
    /// Clip under test
    b: PathBuf,
    #[command(flatten)]
    geometry: Geometry,
    /// Channel roles to report
    #[arg(long, value_enum, default_value = "both")]
    roles: RolesArg,
}

#[derive(Args)]
struct BdRateArgs {
    /// Anchor curve point as RATE:PSNR; repeat for each point (at least two)
    #[arg(long, value_parser = parse_rate_point, required = true)]
    anchor: Vec<RatePoint>,
    /// Test curve point as RATE:PSNR; repeat for each point (at least two)
    #[arg(long, value_parser = parse_rate_point, required = true)]
    test: Vec<RatePoint>,
}

#[derive(Args)]
struct PlotdataArgs {
    /// CSV report written by `rrf encode --report`
    report: PathBuf,
    /// Output file; stdout when omitted
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Where to write the pristine clip
    #[arg(long)]
    source: PathBuf,
    /// Where to write its degraded twin
    #[arg(long)]
    decoded: PathBuf,
    #[command(flatten)]
    geometry: Geometry,
    /// Clip length in frames
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Generator seed; the RRF_SEED environment variable overrides it
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Degradation model: blur, blocky or banding
    #[arg(long, default_value = "blur", value_parser = parse_degradation)]
    degradation: rrf::synth::Degradation,
}

fn parse_pack(s: &str) -> Result<PackConfig, String> {
    let (ph, pw) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected PHxPW, e.g. 2x2, got {s:?}"))?;
    let ph = ph.trim().parse().map_err(|e| format!("pack height: {e}"))?;
    let pw = pw.trim().parse().map_err(|e| format!("pack width: {e}"))?;
    PackConfig::new(ph, pw).map_err(|e| e.to_string())
}

fn parse_rate_point(s: &str) -> Result<RatePoint, String> {
    let (rate, psnr) = s
        .split_once(':')
        .ok_or_else(|| format!("expected RATE:PSNR, e.g. 1200:32.4, got {s:?}"))?;
    Ok(RatePoint {
        rate: rate.trim().parse().map_err(|e| format!("rate: {e}"))?,
        psnr: psnr.trim().parse().map_err(|e| format!("psnr: {e}"))?,
    })
}

fn parse_degradation(s: &str) -> Result<rrf::synth::Degradation, String> {
    s.parse()
}

/// The seed from the command line, unless RRF_SEED overrides it.
fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var("RRF_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("RRF_SEED={v:?} is not a valid seed")),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(e).context("RRF_SEED"),
    }
}

fn read_clip(path: &Path, geom: &Geometry) -> Result<Vec<YuvFrame>> {
    read_yuv(path, geom.width, geom.height)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_clip(path: &Path, frames: &[YuvFrame]) -> Result<()> {
    write_yuv(path, frames).with_context(|| format!("writing {}", path.display()))
}

/// What `encode` records next to the stream so a run can be reproduced.
#[derive(serde::Serialize)]
struct EncodeManifest<'a> {
    tool: &'static str,
    version: &'static str,
    decoded: &'a Path,
    source: &'a Path,
    width: usize,
    height: usize,
    frames: usize,
    params: &'a EncodeParams,
}

fn print_unit_table(records: &[UnitRecord]) {
    println!("  gop  role    mode  bytes     before      after  decision");
    for r in records {
        println!(
            "  {:>3}  {:<6}  {:<4}  {:>5}  {:>9.4}  {:>9.4}  {}",
            r.gop,
            r.role.label(),
            r.mode.as_str(),
            r.payload_bytes,
            r.psnr_before,
            r.psnr_after,
            r.decision
        );
    }
}

fn print_psnr_delta(label: &str, before: f64, after: f64) {
    println!(
        "{label:<7} {before:.4} -> {after:.4} dB ({:+.4})",
        after - before
    );
}

fn run_encode(args: &EncodeArgs) -> Result<()> {
    let decoded = read_clip(&args.decoded, &args.geometry)?;
    let source = read_clip(&args.source, &args.geometry)?;
    let seed = effective_seed(args.seed)?;

    let luma_plan = RolePlan {
        pack: args.pack,
        net_width: args.net_width,
    };
    let chroma_plan = RolePlan {
        pack: args.chroma_pack.unwrap_or(args.pack),
        net_width: args.chroma_net_width.unwrap_or(args.net_width),
    };
    let params = EncodeParams {
        mode: args.mode.coding_mode(),
        gop_len: args.gop,
        bw: args.qp.map_or(args.weight_bits, bw_for_qp),
        bb: args.bias_bits,
        luma: (args.roles != RolesArg::Chroma).then_some(luma_plan),
        chroma: (args.roles != RolesArg::Luma).then_some(chroma_plan),
        train: TrainConfig {
            iterations: args.iterations,
            batch_size: args.batch_size,
            seed,
            ..TrainConfig::default()
        },
        jobs: args.jobs,
    };

    let outcome = encode_sequence(&decoded, &source, &params)
        .with_context(|| format!("encoding {}", args.decoded.display()))?;

    fs::write(&args.out, &outcome.stream)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let manifest = EncodeManifest {
        tool: "rrf",
        version: env!("CARGO_PKG_VERSION"),
        decoded: &args.decoded,
        source: &args.source,
        width: args.geometry.width,
        height: args.geometry.height,
        frames: decoded.len(),
        params: &params,
    };
    let cfg_path = args.out.with_extension(match args.out.extension() {
        Some(e) => format!("{}.cfg.json", e.to_string_lossy()),
        None => "cfg.json".to_string(),
    });
    fs::write(&cfg_path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", cfg_path.display()))?;

    if let Some(report) = &args.report {
        fs::write(report, to_csv(&outcome.records))
            .with_context(|| format!("writing {}", report.display()))?;
    }
    if let Some(refined) = &args.refined {
        write_clip(refined, &outcome.refined)?;
    }

    println!(
        "encoded {} frames at {}x{} ({} mode, gop {})",
        decoded.len(),
        args.geometry.width,
        args.geometry.height,
        params.mode.as_str(),
        params.gop_len
    );
    print_unit_table(&outcome.records);
    println!(
        "sidecar: {} bytes total, {} payload ({:.1} bytes/frame)",
        outcome.stream.len(),
        outcome.sidecar.payload_bytes(),
        outcome.stream.len() as f64 / decoded.len() as f64
    );
    if params.luma.is_some() {
        print_psnr_delta(
            "luma:",
            mean_frame_psnr(&decoded, &source, ChannelRole::Luma),
            mean_frame_psnr(&outcome.refined, &source, ChannelRole::Luma),
        );
    }
    if params.chroma.is_some() {
        print_psnr_delta(
            "chroma:",
            mean_frame_psnr(&decoded, &source, ChannelRole::Chroma),
            mean_frame_psnr(&outcome.refined, &source, ChannelRole::Chroma),
        );
    }
    Ok(())
}

fn run_decode(args: &DecodeArgs) -> Result<()> {
    let decoded = read_clip(&args.decoded, &args.geometry)?;
    let stream = fs::read(&args.stream)
        .with_context(|| format!("reading {}", args.stream.display()))?;
    let outcome = decode_sequence(&decoded, &stream)
        .with_context(|| format!("applying {}", args.stream.display()))?;
    write_clip(&args.out, &outcome.refined)?;

    let units: usize = outcome
        .sidecar
        .gops
        .iter()
        .flat_map(|g| [ChannelRole::Luma, ChannelRole::Chroma].map(|r| g.get(r)))
        .filter(|u| u.is_some_and(|u| u.mode != UnitMode::Skip))
        .count();
    println!(
        "refined {} frames with {} parameter units -> {}",
        decoded.len(),
        units,
        args.out.display()
    );
    if let Some(source) = &args.source {
        let source = read_clip(source, &args.geometry)?;
        for role in [ChannelRole::Luma, ChannelRole::Chroma] {
            print_psnr_delta(
                &format!("{}:", role.label()),
                mean_frame_psnr(&decoded, &source, role),
                mean_frame_psnr(&outcome.refined, &source, role),
            );
        }
    }
    Ok(())
}

fn run_inspect(args: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&args.stream)
        .with_context(|| format!("reading {}", args.stream.display()))?;
    let sidecar =
        read_stream(&bytes).with_context(|| format!("parsing {}", args.stream.display()))?;
    let c = &sidecar.config;

    println!("refinement sidecar {}", args.stream.display());
    println!(
        "  {} mode, {}x{}, {} GoPs of up to {} frames",
        c.mode.as_str(),
        c.width,
        c.height,
        sidecar.gops.len(),
        c.gop_len
    );
    println!("  weights {} bit, biases {} bit", c.bw, c.bb);
    for role in [ChannelRole::Luma, ChannelRole::Chroma] {
        match c.role_plan(role) {
            Some(plan) => println!(
                "  {:<7} pack {}, net width {}",
                format!("{}:", role.label()),
                plan.pack.as_str(),
                plan.net_width
            ),
            None => println!("  {:<7} not refined", format!("{}:", role.label())),
        }
    }

    println!();
    println!("  gop  role    mode  bytes");
    let mut signalled = 0usize;
    for (gi, units) in sidecar.gops.iter().enumerate() {
        for role in [ChannelRole::Luma, ChannelRole::Chroma] {
            let Some(unit) = units.get(role) else { continue };
            if unit.mode != UnitMode::Skip {
                signalled += 1;
            }
            println!(
                "  {:>3}  {:<6}  {:<4}  {:>5}",
                gi,
                role.label(),
                unit.mode.as_str(),
                unit.payload.len()
            );
        }
    }
    println!();
    println!(
        "{} parameter units, {} payload bytes, {} bytes total",
        signalled,
        sidecar.payload_bytes(),
        bytes.len()
    );
    Ok(())
}

fn run_psnr(args: &PsnrArgs) -> Result<()> {
    let a = read_clip(&args.a, &args.geometry)?;
    let b = read_clip(&args.b, &args.geometry)?;
    if a.len() != b.len() {
        bail!("clips differ in length: {} vs {} frames", a.len(), b.len());
    }
    if args.roles != RolesArg::Chroma {
        println!("luma:   {:.4} dB", mean_frame_psnr(&a, &b, ChannelRole::Luma));
    }
    if args.roles != RolesArg::Luma {
        println!("chroma: {:.4} dB", mean_frame_psnr(&a, &b, ChannelRole::Chroma));
    }
    Ok(())
}

fn run_bd_rate(args: &BdRateArgs) -> Result<()> {
    let delta = bd_rate(&args.anchor, &args.test).context("BD-rate")?;
    println!("BD-rate: {delta:+.2}% (negative means the test curve needs less rate)");
    Ok(())
}

fn run_plotdata(args: &PlotdataArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let records = from_csv(&text)
        .map_err(anyhow::Error::msg)
        .with_context(|| format!("parsing {}", args.report.display()))?;
    let data = to_plotdata(&records);
    match &args.out {
        Some(path) => {
            fs::write(path, data).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{data}"),
    }
    Ok(())
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let clip = synth_clip(&SynthConfig {
        width: args.geometry.width,
        height: args.geometry.height,
        frames: args.frames,
        seed: effective_seed(args.seed)?,
        degradation: args.degradation,
    })
    .context("generating clip")?;
    write_clip(&args.source, &clip.source)?;
    write_clip(&args.decoded, &clip.decoded)?;
    println!(
        "wrote {} frames at {}x{}: {} (source) and {} (decoded, luma {:.2} dB)",
        args.frames,
        args.geometry.width,
        args.geometry.height,
        args.source.display(),
        args.decoded.display(),
        mean_frame_psnr(&clip.decoded, &clip.source, ChannelRole::Luma)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Encode(args) => run_encode(args),
        Cmd::Decode(args) => run_decode(args),
        Cmd::Inspect(args) => run_inspect(args),
        Cmd::Metrics(MetricsCmd::Psnr(args)) => run_psnr(args),
        Cmd::Metrics(MetricsCmd::BdRate(args)) => run_bd_rate(args),
        Cmd::Plotdata(args) => run_plotdata(args),
        Cmd::Gen(args) => run_gen(args),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
