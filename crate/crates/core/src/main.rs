use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use hmrvit::baselines::{run_ablation, Variant};
use hmrvit::config::{Config, Preset};
use hmrvit::feature_image::{max_row_sum_deviation, mean_column_max, nearest_permutation, write_crm_exports};
use hmrvit::metrics::EvalReport;
use hmrvit::numerics::gradcheck::GradCheckOptions;
use hmrvit::numerics::Matrix;
use hmrvit::synthetic_data::{generate_dataset, Dataset};
use hmrvit::training::crm_task::{run_crm_task, CrmTaskConfig};
use hmrvit::training::{
    check_model_gradients, count_params, evaluate, train, Batch, Checkpoint, Model, TrainOptions,
};
use hmrvit::{Error, Result};

/// Video human mesh recovery with a vision transformer over
/// temporal-kinematic feature images, on synthetic data.
#[derive(Parser)]
#[command(name = "hmrvit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    Full,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Full => Preset::Full,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; its keys override the preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Preset supplying defaults for keys not set elsewhere.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant.
    #[arg(long, value_parser = ["baseline_naive", "hmrvit_nocrm", "hmrvit_full"])]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Patch height in frames.
    #[arg(long)]
    pt: Option<usize>,
    /// Patch width in channels.
    #[arg(long)]
    pc: Option<usize>,
    /// Any config key, e.g. `--set lr=1e-4`. Values are parsed as JSON when
    /// possible and taken as strings otherwise.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let file = self.config.as_deref().map(Config::load_file).transpose()?;
        let mut o = Map::new();
        if let Some(p) = self.preset {
            o.insert("preset".into(), serde_json::to_value(Preset::from(p))?);
        }
        if let Some(s) = self.seed {
            o.insert("seed".into(), s.into());
        }
        if let Some(v) = &self.variant {
            o.insert("variant".into(), v.clone().into());
        }
        if let Some(e) = self.epochs {
            o.insert("epochs".into(), e.into());
        }
        if let Some(pt) = self.pt {
            o.insert("patch_t".into(), pt.into());
        }
        if let Some(pc) = self.pc {
            o.insert("patch_c".into(), pc.into());
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                key: kv.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.into()));
            o.insert(k.trim().into(), v);
        }
        let preset = self.preset.map(Preset::from).unwrap_or(Preset::Toy);
        Config::resolve(preset, file.as_ref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one variant; writes metrics.csv and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Dataset directory; regenerated from the checkpoint config when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also write eval.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train every variant and patch cell over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every trainable tensor.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates probed per tensor.
        #[arg(long, default_value_t = 20)]
        coords: usize,
        /// Sequences in the probe batch.
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Export a checkpoint's CRM, or run the channel unscrambling task
    /// when no checkpoint is given.
    InspectCrm {
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Seed of the unscrambling task.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channels of the unscrambling task.
        #[arg(long, default_value_t = 25)]
        channels: usize,
        /// Optimizer steps of the unscrambling task.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Closed-form and enumerated trainable parameter counts per variant.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

const GRADCHECK_TOL: f64 = 1e-5;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Prints the resolved config and, with an output directory, saves it.
fn echo(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let json = cfg.to_json();
    print!("{json}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("config.json"), &json)?;
    }
    Ok(())
}

fn dataset(cfg: &Config, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => Dataset::load(d),
        None => generate_dataset(&cfg.data_config()),
    }
}

fn report_csv(r: &EvalReport) -> String {
    format!("{}\n{}\n", EvalReport::CSV_HEADER, r.csv_row())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { cfg, out } => {
            let cfg = cfg.resolve()?;
            echo(&cfg, Some(&out))?;
            let data = generate_dataset(&cfg.data_config())?;
            data.save(&out.join("dataset"))?;
            eprintln!(
                "wrote {} train and {} val sequences to {}",
                data.train.len(),
                data.val.len(),
                out.join("dataset").display()
            );
        }
        Command::Train { cfg, out, data } => {
            let cfg = cfg.resolve()?;
            echo(&cfg, Some(&out))?;
            let data = dataset(&cfg, data.as_deref())?;
            let s = train(
                &cfg,
                &data,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    quiet: false,
                },
            )?;
            let csv = report_csv(&s.final_eval);
            write(&out.join("eval.csv"), &csv)?;
            eprint!("{csv}");
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = dataset(&ck.config, data.as_deref())?;
            let r = evaluate(
                &ck.model,
                &data.val,
                ck.config.batch_size,
                ck.config.variant.name(),
                ck.config.seed,
            )?;
            let csv = report_csv(&r);
            print!("{csv}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("eval.csv"), &csv)?;
            }
        }
        Command::Ablate { cfg, out, data, seeds } => {
            let cfg = cfg.resolve()?;
            echo(&cfg, Some(&out))?;
            let data = dataset(&cfg, data.as_deref())?;
            let table = run_ablation(&cfg, &data, &seeds, Some(&out))?;
            let csv = table.to_csv();
            write(&out.join("ablation.csv"), &csv)?;
            eprint!("{csv}");
            let failed = table.rows.iter().filter(|r| r.report.is_none()).count();
            if failed > 0 {
                return Err(Error::InvalidArgument(format!(
                    "{failed} ablation runs failed; see ablation.csv"
                )));
            }
        }
        Command::Gradcheck {
            cfg,
            coords,
            batch,
            out,
        } => {
            let cfg = cfg.resolve()?;
            echo(&cfg, out.as_deref())?;
            let data_cfg = hmrvit::synthetic_data::DataConfig {
                train_sequences: batch.max(1),
                val_sequences: 1,
                ..cfg.data_config()
            };
            let data = generate_dataset(&data_cfg)?;
            let model = Model::new(cfg.model_config(), data.template.clone(), cfg.seed)?;
            let ids: Vec<usize> = (0..batch.max(1)).collect();
            let b = Batch::from_split(&data.train, &ids)?;
            let opts = GradCheckOptions {
                coords_per_tensor: coords,
                seed: cfg.seed,
                ..Default::default()
            };
            let (rep, names) = check_model_gradients(&model, &b, &cfg, &opts)?;
            let mut lines = String::from("tensor,probes,max_rel_err\n");
            for t in &rep.tensors {
                lines.push_str(&format!("{},{},{:.3e}\n", names[t.tensor], t.probes, t.max_rel_err));
            }
            eprint!("{lines}");
            if let Some(dir) = &out {
                write(&dir.join("gradcheck.csv"), &lines)?;
            }
            println!(
                "max rel err {:.3e} over {} probes in {} tensors",
                rep.max_rel_err,
                rep.probes,
                rep.tensors.len()
            );
            if !(rep.max_rel_err < GRADCHECK_TOL) {
                return Err(Error::InvalidArgument(format!(
                    "gradient check failed: max rel err {:.3e} >= {GRADCHECK_TOL:e}",
                    rep.max_rel_err
                )));
            }
        }
        Command::InspectCrm {
            checkpoint,
            out,
            seed,
            channels,
            steps,
        } => {
            create_dir(&out)?;
            let summarize = |crm: &Matrix| -> Result<String> {
                let near = nearest_permutation(crm)?;
                Ok(format!(
                    "perm_distance {:.6}\nmax_row_sum_dev {:.6}\nmean_column_max {:.6}\nnearest_permutation {:?}\n",
                    near.distance,
                    max_row_sum_deviation(crm),
                    mean_column_max(crm),
                    near.sigma
                ))
            };
            match checkpoint {
                Some(dir) => {
                    let ck = Checkpoint::load(&dir)?;
                    let crm = ck.model.crm_matrix().ok_or_else(|| {
                        Error::InvalidArgument(format!("variant {} has no CRM", ck.config.variant))
                    })??;
                    write_crm_exports(&crm, &out, "crm")?;
                    print!("{}", summarize(&crm)?);
                }
                None => {
                    let rep = run_crm_task(&CrmTaskConfig {
                        channels,
                        steps,
                        seed,
                        ..Default::default()
                    })?;
                    write_crm_exports(&rep.initial_crm, &out, "crm_initial")?;
                    write_crm_exports(&rep.crm, &out, "crm_final")?;
                    println!("initial perm_distance {:.6}", rep.initial_distance);
                    print!("{}", summarize(&rep.crm)?);
                    println!("hidden_permutation {:?}", rep.hidden);
                    println!("inverse_recovered {}", rep.recovered_inverse());
                }
            }
        }
        Command::CountParams { cfg } => {
            let cfg = cfg.resolve()?;
            echo(&cfg, None)?;
            let template = std::sync::Arc::new(hmrvit::body_model::BodyTemplate::procedural(
                cfg.verts_per_joint,
                cfg.seed,
            )?);
            println!("variant,closed_form,enumerated");
            for v in Variant::ALL {
                let mc = hmrvit::training::ModelConfig {
                    variant: v,
                    ..cfg.model_config()
                };
                let closed = count_params(&mc)?;
                let enumerated = Model::new(mc, template.clone(), cfg.seed)?.num_params();
                println!("{v},{closed},{enumerated}");
                if closed != enumerated {
                    return Err(Error::InvalidArgument(format!(
                        "{v}: closed-form count {closed} != enumerated {enumerated}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
