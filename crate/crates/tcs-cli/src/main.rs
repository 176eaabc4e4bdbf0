//! `tcs` — experiment runner and codec tool for the time-correlated
//! sparsification toolkit.
//!
//! Subcommands: `run` (execute a configured federated experiment and write
//! its artifacts), `budget` (analytic and measured uplink bit budgets),
//! `encode`/`decode` (sparse payload wire format, for debugging and golden
//! data). Exit codes: 0 success, 2 configuration error, 3 diverged run,
//! 4 malformed payload, 1 filesystem failure.

mod artifacts;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use tcs_core::codec::{
    decode_payload, encode_payload, randk_budget, tcs_budget, tcs_budget_log2d, topk_budget,
    topk_budget_log2d, EncodedPayload, QuantizerSpec,
};
use tcs_core::compress::{round_half_up, SparseUpdate};
use tcs_core::fedsim::{run_experiment, write_metrics_csv, MetricsLog};
use tcs_core::tensor::{substream, LayerLayout, Mask};

use artifacts::{
    atomic_write, format_values, guard_outputs, model_bytes, read_mask_file, read_values_file,
    tmp_path,
};
use config::{load_config, parse_quantizer};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "tcs",
    version,
    about = "Federated gradient-compression experiments and payload codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a configured experiment; writes metrics.csv, model.bin,
    /// config.resolved.json, and manifest.json into --out.
    Run(RunArgs),
    /// Print uplink bit budgets (bits per parameter per local iteration).
    Budget(BudgetArgs),
    /// Encode a dense value file into a sparse payload file.
    Encode(EncodeArgs),
    /// Decode a payload file back into a dense value file.
    Decode(DecodeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (flat JSON object; see the config schema).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. --set scheme=tcs --set phi_global=0.1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BudgetArgs {
    /// Compression scheme: tcs, topk, or randk.
    #[arg(long)]
    scheme: String,
    /// Bits per transmitted value: 32 raw, 1 scaled-sign, q in 2..=16 a
    /// fractional quantizer with 2^(q-1) intervals.
    #[arg(long, default_value_t = 32)]
    q: u32,
    /// Global (shared-mask) sparsity ratio; tcs only.
    #[arg(long)]
    phi_global: Option<f64>,
    /// Local (explicit-position) sparsity ratio; tcs only.
    #[arg(long)]
    phi_local: Option<f64>,
    /// Sparsity ratio for topk / randk.
    #[arg(long)]
    phi: Option<f64>,
    /// Local steps per round (one payload amortized over H iterations).
    #[arg(long, default_value_t = 1)]
    local_steps: u32,
    /// Model size; enables the integer-width variant and --measured.
    #[arg(long)]
    d: Option<usize>,
    /// Also encode one synthetic payload at size --d and report its
    /// measured bits per parameter per iteration.
    #[arg(long)]
    measured: bool,
}

#[derive(Args)]
struct EncodeArgs {
    /// Dense input: one value per line; the line count fixes d.
    #[arg(long)]
    values: PathBuf,
    /// Sparsity ratio that sets the position block size; the decoder must
    /// use the same value.
    #[arg(long)]
    phi: f64,
    /// none, sign, or frac:P.
    #[arg(long, default_value = "none")]
    quantizer: String,
    /// Optional global-mask file (one index per line): those positions go
    /// to the implicit-position section, everything else nonzero to the
    /// explicit-position section.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Round tag stored in the payload header.
    #[arg(long, default_value_t = 0)]
    round: u32,
    /// Output payload file.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DecodeArgs {
    /// Payload file produced by encode (or a peer implementation).
    #[arg(long)]
    payload: PathBuf,
    /// Sparsity ratio used when the payload was encoded.
    #[arg(long)]
    phi: f64,
    /// Global-mask file; must match the encoder's mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output value file (dense, one value per line).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Budget(args) => cmd_budget(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
    }
}

/// Honor TCS_THREADS before any parallel work; unset means the machine's
/// default parallelism.
fn init_thread_pool() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("TCS_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::config(format!("TCS_THREADS=`{raw}`: need a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(format!("TCS_THREADS: {e}")))
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    init_thread_pool()?;
    let (raw, cfg) = load_config(&args.config, &args.set, args.seed)?;

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let metrics_path = args.out.join("metrics.csv");
    let model_path = args.out.join("model.bin");
    let resolved_path = args.out.join("config.resolved.json");
    let manifest_path = args.out.join("manifest.json");
    let mask_stats_path = args.out.join("mask_stats.csv");
    guard_outputs(
        [
            metrics_path.as_path(),
            model_path.as_path(),
            resolved_path.as_path(),
            manifest_path.as_path(),
            mask_stats_path.as_path(),
        ],
        args.force,
    )?;

    let log = run_experiment(&cfg)?;

    write_csv_atomically(&metrics_path, &log)?;
    if log.mask_stats.is_empty() {
        // A forced re-run of a dense config must not leave a stale stats
        // file from an earlier compressed run behind.
        let _ = std::fs::remove_file(&mask_stats_path);
    } else {
        atomic_write(&mask_stats_path, mask_stats_csv(&log).as_bytes())?;
    }
    atomic_write(&model_path, &model_bytes(log.final_params.values()))?;
    let resolved = serde_json::to_string_pretty(&raw).expect("config serializes") + "\n";
    atomic_write(&resolved_path, resolved.as_bytes())?;

    let manifest = serde_json::json!({
        "artifact": "tcs-run",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_path": args.config.display().to_string(),
        "out_dir": args.out.display().to_string(),
        "seed": raw.seed,
        "config": serde_json::to_value(&raw).expect("config serializes"),
        "rounds": log.records.len(),
        "final_train_loss": log.records.last().map(|r| r.train_loss),
        "final_test_accuracy": log.records.last().map(|r| r.test_accuracy),
        "files": {
            "metrics": "metrics.csv",
            "model": "model.bin",
            "resolved_config": "config.resolved.json",
            "mask_stats": if log.mask_stats.is_empty() { None } else { Some("mask_stats.csv") },
        },
    });
    let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    atomic_write(&manifest_path, manifest.as_bytes())?;

    let last = log.records.last().expect("runs produce at least one record");
    println!("rounds {}", log.records.len());
    println!("final_train_loss {}", last.train_loss);
    println!("final_test_accuracy {}", last.test_accuracy);
    println!("uplink_bits_total {}", last.uplink_bits_total);
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Route the CSV writer through a temporary file so metrics.csv appears
/// atomically like every other artifact.
fn write_csv_atomically(path: &Path, log: &MetricsLog) -> Result<(), CliError> {
    let tmp = tmp_path(path);
    write_metrics_csv(&log.records, &tmp)
        .map_err(|e| CliError::io(&tmp, std::io::Error::other(e)))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn mask_stats_csv(log: &MetricsLog) -> String {
    let mut out = String::from("round,k_local,min_hamming,max_hamming\n");
    for s in &log.mask_stats {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.round, s.k_local, s.min_hamming, s.max_hamming
        ));
    }
    out
}

fn cmd_budget(args: BudgetArgs) -> Result<(), CliError> {
    if args.q < 1 {
        return Err(CliError::config("--q: need at least one bit per value"));
    }
    if args.local_steps < 1 {
        return Err(CliError::config("--local-steps: need at least one"));
    }
    if args.measured && args.d.is_none() {
        return Err(CliError::config("--measured needs --d"));
    }
    let check_ratio = |flag: &str, phi: f64| {
        if phi.is_finite() && 0.0 < phi && phi <= 1.0 {
            Ok(phi)
        } else {
            Err(CliError::config(format!("{flag}: ratio must lie in (0, 1]")))
        }
    };
    let h = args.local_steps;

    // (analytic, exact-width analytic at --d, payload parameters)
    let (analytic, log2d, measured_parts): (f64, Option<f64>, (f64, f64)) = match args
        .scheme
        .as_str()
    {
        "tcs" => {
            if args.phi.is_some() {
                return Err(CliError::config("--phi applies to topk/randk; tcs takes --phi-global and --phi-local"));
            }
            let pg = check_ratio(
                "--phi-global",
                args.phi_global.ok_or_else(|| CliError::config("tcs budgets need --phi-global"))?,
            )?;
            let pl = check_ratio(
                "--phi-local",
                args.phi_local.ok_or_else(|| CliError::config("tcs budgets need --phi-local"))?,
            )?;
            if pl >= pg {
                return Err(CliError::config("--phi-local: must be smaller than --phi-global"));
            }
            (
                tcs_budget(args.q, pg, pl, h),
                args.d.map(|d| tcs_budget_log2d(args.q, pg, pl, d, h)),
                (pg, pl),
            )
        }
        "topk" | "randk" => {
            if args.phi_global.is_some() || args.phi_local.is_some() {
                return Err(CliError::config(format!(
                    "--phi-global/--phi-local apply to tcs; {} takes --phi",
                    args.scheme
                )));
            }
            let phi = check_ratio(
                "--phi",
                args.phi.ok_or_else(|| {
                    CliError::config(format!("{} budgets need --phi", args.scheme))
                })?,
            )?;
            if args.scheme == "topk" {
                (
                    topk_budget(args.q, phi, h),
                    args.d.map(|d| topk_budget_log2d(args.q, phi, d, h)),
                    (phi, 0.0),
                )
            } else {
                (randk_budget(args.q, phi, h), args.d.map(|_| randk_budget(args.q, phi, h)), (phi, 0.0))
            }
        }
        other => {
            return Err(CliError::config(format!(
                "--scheme: unknown scheme `{other}` (expected tcs, topk, or randk)"
            )));
        }
    };

    println!("scheme {}", args.scheme);
    println!("q {}", args.q);
    match args.scheme.as_str() {
        "tcs" => {
            println!("phi_global {}", measured_parts.0);
            println!("phi_local {}", measured_parts.1);
        }
        _ => println!("phi {}", measured_parts.0),
    }
    println!("local_steps {h}");
    println!("analytic_block {analytic}");
    if let Some(v) = log2d {
        println!("analytic_log2d {v}");
    }

    if args.measured {
        let d = args.d.expect("checked up front");
        let payload = synthetic_payload(&args.scheme, args.q, measured_parts.0, measured_parts.1, d)?;
        let measured = payload.bit_len() as f64 / (d as f64 * h as f64);
        println!("measured {measured}");
    }
    Ok(())
}

/// Build one representative payload for the scheme at size `d` and encode
/// it for real, so `measured` reflects the wire format exactly.
fn synthetic_payload(
    scheme: &str,
    q: u32,
    phi_a: f64,
    phi_b: f64,
    d: usize,
) -> Result<EncodedPayload, CliError> {
    if d < 1 {
        return Err(CliError::config("--d: need at least one parameter"));
    }
    let spec = quantizer_for_q(q)?;
    let layout = Arc::new(LayerLayout::single(d));
    let mut rng = substream(0, "budget-measured", 0, 0);
    // Zero-free magnitudes keep every quantizer in its accurate regime.
    fn draw(rng: &mut tcs_core::tensor::RngStream, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.5..2.0);
                if rng.gen_bool(0.5) {
                    -mag
                } else {
                    mag
                }
            })
            .collect()
    }
    fn sample_sorted(rng: &mut tcs_core::tensor::RngStream, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    let (global_idx, local_idx, phi_encode) = match scheme {
        "tcs" => {
            let k_g = round_half_up(phi_a * d as f64).min(d);
            let k_l = round_half_up(phi_b * d as f64).min(d - k_g);
            let global = sample_sorted(&mut rng, d, k_g);
            let complement: Vec<usize> = {
                let in_global: std::collections::HashSet<usize> = global.iter().copied().collect();
                (0..d).filter(|i| !in_global.contains(i)).collect()
            };
            let local: Vec<usize> = {
                let mut picks = sample_sorted(&mut rng, complement.len(), k_l);
                picks.iter_mut().for_each(|p| *p = complement[*p]);
                picks
            };
            (global, local, phi_b)
        }
        "topk" => {
            let k = round_half_up(phi_a * d as f64).min(d);
            (Vec::new(), sample_sorted(&mut rng, d, k), phi_a)
        }
        "randk" => {
            let k = round_half_up(phi_a * d as f64).min(d);
            (sample_sorted(&mut rng, d, k), Vec::new(), 0.0)
        }
        _ => unreachable!("scheme validated by cmd_budget"),
    };
    let global_values = draw(&mut rng, global_idx.len());
    let local_values = draw(&mut rng, local_idx.len());
    let su = SparseUpdate::new(
        0,
        Mask::from_indices(layout.clone(), global_idx),
        global_values,
        Mask::from_indices(layout, local_idx),
        local_values,
    );
    Ok(encode_payload(&su, &spec, phi_encode))
}

/// The quantizer whose wire cost is `q` bits per value.
fn quantizer_for_q(q: u32) -> Result<QuantizerSpec, CliError> {
    let spec = match q {
        32 => QuantizerSpec::none(),
        1 => QuantizerSpec::scaled_sign(),
        2..=16 => QuantizerSpec::fractional(1u16 << (q - 1)),
        _ => {
            return Err(CliError::config(
                "--measured supports q=32 (raw), q=1 (sign), or q in 2..=16 (fractional)",
            ));
        }
    };
    debug_assert_eq!(spec.bits_per_value(), q);
    Ok(spec)
}

fn cmd_encode(args: EncodeArgs) -> Result<(), CliError> {
    let values = read_values_file(&args.values)?;
    let d = values.len();
    if !args.phi.is_finite() || !(0.0..=1.0).contains(&args.phi) {
        return Err(CliError::config("--phi: ratio must lie in [0, 1]"));
    }
    let spec = parse_quantizer(&args.quantizer)?;
    let layout = Arc::new(LayerLayout::single(d));

    let global_idx = match &args.mask {
        Some(path) => read_mask_file(path, d)?,
        None => Vec::new(),
    };
    let global_values: Vec<f64> = global_idx.iter().map(|&i| values[i]).collect();
    let in_global: std::collections::HashSet<usize> = global_idx.iter().copied().collect();
    let (local_idx, local_values): (Vec<usize>, Vec<f64>) = values
        .iter()
        .enumerate()
        .filter(|(i, v)| **v != 0.0 && !in_global.contains(i))
        .map(|(i, v)| (i, *v))
        .unzip();

    let su = SparseUpdate::new(
        args.round,
        Mask::from_indices(layout.clone(), global_idx),
        global_values,
        Mask::from_indices(layout, local_idx),
        local_values,
    );
    let payload = encode_payload(&su, &spec, args.phi);

    guard_outputs([args.out.as_path()], args.force)?;
    atomic_write(&args.out, payload.bytes())?;
    println!(
        "wrote {} ({} bytes, {} bits): d {}, {} global + {} local values",
        args.out.display(),
        payload.bytes().len(),
        payload.bit_len(),
        d,
        su.global_mask().popcount(),
        su.local_mask().popcount(),
    );
    Ok(())
}

/// Largest d the decoder will materialize as a dense value file (~800 MB).
const DECODE_D_LIMIT: usize = 100_000_000;

fn cmd_decode(args: DecodeArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.payload).map_err(|e| CliError::io(&args.payload, e))?;
    if !args.phi.is_finite() || !(0.0..=1.0).contains(&args.phi) {
        return Err(CliError::config("--phi: ratio must lie in [0, 1]"));
    }
    if bytes.len() < 4 {
        return Err(CliError::Malformed(format!(
            "malformed payload at bit offset {}: truncated header",
            bytes.len() * 8
        )));
    }
    let d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if d == 0 || d > DECODE_D_LIMIT {
        return Err(CliError::Malformed(format!(
            "malformed payload at bit offset 0: header d={d} outside the decoder's range"
        )));
    }
    let layout = Arc::new(LayerLayout::single(d));
    let mask = match &args.mask {
        Some(path) => Mask::from_indices(layout, read_mask_file(path, d)?),
        None => Mask::empty(layout),
    };
    let su = decode_payload(&EncodedPayload::from_bytes(bytes), &mask, args.phi)?;

    guard_outputs([args.out.as_path()], args.force)?;
    atomic_write(&args.out, format_values(su.to_dense().values()).as_bytes())?;
    println!(
        "wrote {}: d {}, round {}, {} global + {} local values",
        args.out.display(),
        d,
        su.round(),
        su.global_mask().popcount(),
        su.local_mask().popcount(),
    );
    Ok(())
}
