//! Command-line interface over the inversion engine.
//!
//! Every subcommand exits 0 on success; on failure it prints exactly one
//! `error: ...` line to stderr and exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use seisflow::nets::{
    ChannelGateMode, EncoderConfig, EncoderToggles, Fusion, Injection, UNetConfig,
};
use seisflow::pipeline::{
    self, ablate, bench_nfe, expand_variants, export_attn, gen_data, invert_record,
    load_checkpoint, load_dataset, save_checkpoint, selftest, steps_for_nfe, AblateProfile,
    Dataset, Objective, TrainConfig,
};
use seisflow::samplers::{SamplerKind, SamplerSpec};
use seisflow::wavesim::ModelStyle;

#[derive(Parser)]
#[command(
    name = "seisflow",
    about = "Conditional rectified-flow seismic inversion",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (velocity, shot-gather) dataset.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Comma-separated mix of model styles: layered,fault.
        #[arg(long, default_value = "layered,fault")]
        styles: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for manifest.json and the data blobs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an inversion model and write a checkpoint directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training objective: crf-l1 (flow) or eps-l2 (diffusion).
        #[arg(long, default_value = "crf-l1")]
        objective: String,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train on the first N records only (default: all).
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Invert one record from a dataset with a trained checkpoint.
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// rf-euler | ddpm | ddim | dpm-solver2.
        #[arg(long, default_value = "rf-euler")]
        sampler: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channel-gate configuration: learned | top10 | uniform.
        #[arg(long, default_value = "learned")]
        gate: String,
        /// Output CSV path for the inverted velocity grid.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare all samplers at fixed model-evaluation budgets.
    BenchNfe {
        #[arg(long)]
        ckpt_rf: PathBuf,
        #[arg(long)]
        ckpt_eps: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated evaluation budgets.
        #[arg(long, default_value = "4,20,50,100")]
        nfe: String,
        /// Number of test records to average over.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate architecture variants under a reduced budget.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma list of variant keys, or conditioning-set | encoder-set | all.
        #[arg(long, default_value = "all")]
        variants: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = AblateProfile::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = AblateProfile::default().train_count)]
        train_count: usize,
        #[arg(long, default_value_t = AblateProfile::default().eval_count)]
        eval_count: usize,
        #[arg(long, default_value_t = AblateProfile::default().enc_channels)]
        enc_channels: usize,
        #[arg(long, default_value_t = AblateProfile::default().base_channels)]
        base_channels: usize,
        #[arg(long, default_value_t = AblateProfile::default().out_hw)]
        out_hw: usize,
        #[arg(long, default_value_t = AblateProfile::default().sampler_steps)]
        sampler_steps: usize,
    },
    /// Export attention diagnostics for one record.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle battery.
    Selftest,
}

/// Architecture knobs shared by training runs. Defaults reproduce the
/// desk-scale reference model.
#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value_t = 32)]
    enc_channels: usize,
    /// Encoder output grid (defaults to the dataset's velocity grid height).
    #[arg(long)]
    out_hw: Option<usize>,
    #[arg(long, default_value_t = 11)]
    temporal_kernel: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 64)]
    time_embed: usize,
    /// Conditioning injection point: early | layerwise.
    #[arg(long, default_value = "layerwise")]
    injection: String,
    /// Conditioning fusion op: mlp | adain | adagn.
    #[arg(long, default_value = "mlp")]
    fusion: String,
    /// Encoder stage toggles as three bits (temporal, spatial, aggregate).
    #[arg(long, default_value = "111")]
    toggles: String,
}

fn bad_arg(msg: impl Into<String>) -> pipeline::PipelineError {
    pipeline::PipelineError::BadArg(msg.into())
}

fn parse_styles(s: &str) -> Result<Vec<ModelStyle>, pipeline::PipelineError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<ModelStyle>()
                .map_err(|_| bad_arg(format!("unknown style '{}'", p.trim())))
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, pipeline::PipelineError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| bad_arg(format!("bad {} value '{}'", what, p.trim())))
        })
        .collect()
}

fn parse_objective(s: &str) -> Result<Objective, pipeline::PipelineError> {
    Objective::parse(s).ok_or_else(|| bad_arg(format!("unknown objective '{}'", s)))
}

fn parse_sampler(s: &str) -> Result<SamplerKind, pipeline::PipelineError> {
    SamplerKind::parse(s).ok_or_else(|| bad_arg(format!("unknown sampler '{}'", s)))
}

fn parse_gate(s: &str) -> Result<ChannelGateMode, pipeline::PipelineError> {
    match s {
        "learned" => Ok(ChannelGateMode::Learned),
        "top10" => Ok(ChannelGateMode::TopFrac(0.1)),
        "uniform" => Ok(ChannelGateMode::Uniform),
        _ => Err(bad_arg(format!("unknown gate mode '{}'", s))),
    }
}

fn arch_configs(
    arch: &ArchArgs,
    ds: &Dataset,
) -> Result<(EncoderConfig, EncoderToggles, UNetConfig), pipeline::PipelineError> {
    let [_, s, t, r] = ds.manifest.seismic_shape;
    let (h, _) = ds.grid_hw();
    let ecfg = EncoderConfig {
        n_shots: s,
        in_time: t,
        in_receivers: r,
        temporal_kernel: arch.temporal_kernel,
        channels: arch.enc_channels,
        out_hw: arch.out_hw.unwrap_or(h),
    };
    let toggles = EncoderToggles::from_bits(&arch.toggles)
        .ok_or_else(|| bad_arg(format!("bad toggles '{}' (want e.g. 111)", arch.toggles)))?;
    let ucfg = UNetConfig {
        levels: arch.levels,
        base_channels: arch.base_channels,
        time_embed_dim: arch.time_embed,
        injection: Injection::parse(&arch.injection)
            .ok_or_else(|| bad_arg(format!("unknown injection '{}'", arch.injection)))?,
        fusion: Fusion::parse(&arch.fusion)
            .ok_or_else(|| bad_arg(format!("unknown fusion '{}'", arch.fusion)))?,
    };
    Ok((ecfg, toggles, ucfg))
}

fn grid_csv(grid: &[f64], h: usize, w: usize) -> String {
    let mut out = String::from("# inverted velocity grid, m/s; rows are depth levels\n");
    for j in 0..w {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("x{}", j));
    }
    out.push('\n');
    for i in 0..h {
        for j in 0..w {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.3}", grid[i * w + j]));
        }
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Result<(), pipeline::PipelineError> {
    match cli.command {
        Command::GenData { n, styles, seed, out } => {
            let styles = parse_styles(&styles)?;
            let started = Instant::now();
            let manifest = gen_data(n, &styles, seed, &out)?;
            println!(
                "wrote {} samples ({}x{} grids, {} shots x {} steps x {} receivers) to {} in {:.1}s",
                manifest.n_samples,
                manifest.velocity_shape[1],
                manifest.velocity_shape[2],
                manifest.seismic_shape[1],
                manifest.seismic_shape[2],
                manifest.seismic_shape[3],
                out.display(),
                started.elapsed().as_secs_f64()
            );
            println!(
                "velocity range [{:.1}, {:.1}] m/s",
                manifest.v_min, manifest.v_max
            );
        }
        Command::Train { data, objective, epochs, batch, lr, seed, subset, out, arch } => {
            let ds = load_dataset(&data)?;
            let objective = parse_objective(&objective)?;
            let n_train = subset.unwrap_or(ds.len()).min(ds.len());
            let indices: Vec<usize> = (0..n_train).collect();
            let (ecfg, toggles, ucfg) = arch_configs(&arch, &ds)?;
            let tcfg = TrainConfig { objective, batch_size: batch, epochs, lr, seed };
            println!(
                "training {} on {} records, {} epochs, batch {}, lr {}",
                objective.token(),
                indices.len(),
                epochs,
                batch,
                lr
            );
            let started = Instant::now();
            let mut last_print = Instant::now();
            let mut progress = |epoch: usize, loss: f64| {
                if epoch == 0 || epoch + 1 == epochs || last_print.elapsed().as_secs() >= 30 {
                    println!(
                        "epoch {:>4}/{} loss {:.6} elapsed {:.0}s",
                        epoch + 1,
                        epochs,
                        loss,
                        started.elapsed().as_secs_f64()
                    );
                    last_print = Instant::now();
                }
            };
            let trained =
                pipeline::train(&ds, &indices, &tcfg, ecfg, toggles, ucfg, Some(&mut progress))?;
            let mut meta = trained.meta;
            save_checkpoint(&out, &trained.model, &mut meta)?;
            println!(
                "saved checkpoint to {} ({} params, final loss {:.6}, {:.0}s)",
                out.display(),
                trained.model.param_count(),
                meta.loss_log.last().copied().unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
        }
        Command::Invert { ckpt, data, index, sampler, steps, seed, gate, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let kind = parse_sampler(&sampler)?;
            let gate = parse_gate(&gate)?;
            let spec = SamplerSpec::new(kind, steps, seed)?;
            let result = invert_record(&ckpt, &ds, index, &spec, gate)?;
            let (h, w) = ds.grid_hw();
            std::fs::write(&out, grid_csv(&result.grid_ms, h, w))?;
            let rep = result.report.expect("dataset provides ground truth");
            println!(
                "record {} sampler {} nfe {}: ssim {:.4} mae {:.1} rmse {:.1} -> {}",
                index,
                kind.token(),
                result.nfe,
                rep.ssim,
                rep.mae,
                rep.rmse,
                out.display()
            );
        }
        Command::BenchNfe { ckpt_rf, ckpt_eps, data, nfe, count, seed, out } => {
            let rf = load_checkpoint(&ckpt_rf)?;
            let eps = load_checkpoint(&ckpt_eps)?;
            let ds = load_dataset(&data)?;
            let nfe_list: Vec<usize> = parse_list(&nfe, "nfe")?;
            for v in &nfe_list {
                steps_for_nfe(SamplerKind::DpmSolver2, *v)?;
            }
            let count = count.min(ds.len());
            let indices: Vec<usize> = (0..count).collect();
            let (rows, csv) = bench_nfe(&rf, &eps, &ds, &indices, &nfe_list, seed)?;
            std::fs::write(&out, csv)?;
            for row in &rows {
                let cells: Vec<String> = row
                    .cells
                    .iter()
                    .map(|(k, c)| format!("{} {:.4}", k.token(), c.ssim))
                    .collect();
                println!("nfe {:>4}: {} | best {}", row.nfe, cells.join("  "), row.best.token());
            }
            println!("wrote {}", out.display());
        }
        Command::Ablate {
            data,
            variants,
            seeds,
            out,
            epochs,
            train_count,
            eval_count,
            enc_channels,
            base_channels,
            out_hw,
            sampler_steps,
        } => {
            let ds = load_dataset(&data)?;
            let variants = expand_variants(&variants)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let profile = AblateProfile {
                epochs,
                train_count,
                eval_count,
                enc_channels,
                base_channels,
                out_hw,
                sampler_steps,
                ..AblateProfile::default()
            };
            let total = variants.len() * seeds.len();
            println!(
                "ablating {} variants x {} seeds ({} runs), {} train / {} eval records",
                variants.len(),
                seeds.len(),
                total,
                profile.train_count,
                profile.eval_count
            );
            let started = Instant::now();
            let mut done = 0usize;
            let mut progress = |token: &str, seed: u64, ssim: f64| {
                done += 1;
                println!(
                    "[{}/{}] {} seed {} -> ssim {:.4} ({:.0}s)",
                    done,
                    total,
                    token,
                    seed,
                    ssim,
                    started.elapsed().as_secs_f64()
                );
            };
            let (rows, csv) = ablate(&ds, &variants, &seeds, &profile, Some(&mut progress))?;
            std::fs::write(&out, csv)?;
            for row in &rows {
                println!(
                    "{:<16} ssim {:.4} +/- {:.4}  mae {:.1}",
                    row.token, row.ssim_mean, row.ssim_std, row.mae_mean
                );
            }
            println!("wrote {}", out.display());
        }
        Command::ExportAttn { ckpt, data, index, seed, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let export = export_attn(&ckpt, &ds, index, &out, seed)?;
            for (label, ssim) in &export.gate_ssim {
                println!("gate {:<10} ssim {:.4}", label, ssim);
            }
            println!("wrote {} files to {}", export.files.len(), out.display());
        }
        Command::Selftest => {
            for line in selftest()? {
                println!("{}", line);
            }
            println!("selftest passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Let clap print full help/version text; compress real usage
            // errors into the one-line contract.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{}", e);
                return ExitCode::SUCCESS;
            }
            let first = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("bad arguments")
                .trim()
                .to_string();
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
