use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tpuc::backend::{load_program, save_program};
use tpuc::frontend::{import_graph, validate_graph, InterchangeGraph};
use tpuc::ir::{load_module, save_module, ChipConfig, Mode, ModuleIR};
use tpuc::pipeline::{deploy, DeployOptions};
use tpuc::sim;
use tpuc::tensor_store::{npz_read, npz_write, TensorMap};
use tpuc::top::top_inference;
use tpuc::tpu::tpu_inference;
use tpuc::transforms::{calibrate, read_calib_table, write_calib_table, CalibMethod};
use tpuc::verify::{compare_stages, Thresholds};

#[derive(Parser)]
#[command(
    name = "tpuc",
    version,
    about = "Compile small CNNs for the virtual TPU and check every stage"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Import a JSON graph and its NPZ weights into a TOP module.
    Convert {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        dump: Dump,
    },
    /// Build a calibration table from a directory of sample NPZ files.
    Calibrate {
        #[arg(long)]
        module: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "kl")]
        method: CalibMethod,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Lower, group, allocate and emit a `.tpm` program.
    Deploy {
        #[arg(long)]
        module: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value = "F32")]
        mode: Mode,
        #[arg(long, default_value = "virt32")]
        chip: String,
        #[arg(long)]
        asymmetric: bool,
        /// Override the chip's per-lane local memory size.
        #[arg(long)]
        lmem_bytes: Option<u64>,
        #[arg(long)]
        no_group: bool,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the lowered TPU module.
        #[arg(long)]
        save_tpu: Option<PathBuf>,
        #[command(flatten)]
        dump: Dump,
        /// Dump the TPU dialect inference (dequantized) to this NPZ.
        #[arg(long, requires = "input")]
        dump_tpu: Option<PathBuf>,
    },
    /// Execute a program on the simulator.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a module (TOP or TPU) on the host.
    Inference {
        #[arg(long)]
        module: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare two NPZ dumps by cosine and euclidean similarity.
    Compare {
        reference: PathBuf,
        target: PathBuf,
        /// Selects the default thresholds.
        #[arg(long, default_value = "F32")]
        mode: Mode,
        #[arg(long)]
        cos: Option<f64>,
        #[arg(long)]
        euc: Option<f64>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Dump {
    /// Input NPZ used for the dumps.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dump the TOP inference of every tensor to this NPZ.
    #[arg(long, requires = "input")]
    dump_top: Option<PathBuf>,
}

impl Dump {
    fn inputs(&self) -> anyhow::Result<Option<TensorMap>> {
        self.input
            .as_ref()
            .map(|p| npz_read(p).with_context(|| format!("reading {}", p.display())))
            .transpose()
    }

    fn top(&self, m: &ModuleIR) -> anyhow::Result<()> {
        if let (Some(path), Some(x)) = (&self.dump_top, self.inputs()?) {
            npz_write(path, &top_inference(m, &x)?)?;
        }
        Ok(())
    }
}

fn dataset(dir: &Path) -> anyhow::Result<Vec<TensorMap>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "npz"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .npz samples in {}", dir.display());
    }
    files
        .iter()
        .map(|p| npz_read(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Convert {
            graph,
            weights,
            output,
            dump,
        } => {
            let g = InterchangeGraph::load(&graph)?;
            let diags = validate_graph(&g);
            for d in &diags {
                eprintln!("{d}");
            }
            if !diags.is_empty() {
                bail!("{} diagnostics in {}", diags.len(), graph.display());
            }
            let mut m = import_graph(&g, npz_read(&weights)?)?;
            let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("module");
            m.weight_file = format!("{stem}_weight.npz");
            save_module(&m, &output)?;
            dump.top(&m)?;
        }
        Cmd::Calibrate {
            module,
            dataset: dir,
            method,
            output,
        } => {
            let m = load_module(&module)?;
            let table = calibrate(&m, &dataset(&dir)?, method)?;
            write_calib_table(&output, &table)?;
        }
        Cmd::Deploy {
            module,
            calib,
            mode,
            chip,
            asymmetric,
            lmem_bytes,
            no_group,
            output,
            save_tpu,
            dump,
            dump_tpu,
        } => {
            let m = load_module(&module)?;
            let mut chip = ChipConfig::by_name(&chip)?;
            if let Some(b) = lmem_bytes {
                chip = chip.with_lmem_bytes(b);
                chip.validate()?;
            }
            let mut opts = DeployOptions::new(mode);
            opts.chip = chip;
            opts.asymmetric = asymmetric;
            opts.no_group = no_group;
            opts.calib = calib.as_ref().map(read_calib_table).transpose()?;
            let d = deploy(&m, &opts)?;
            save_program(&d.program, &output)?;
            if let Some(p) = save_tpu {
                save_module(&d.addressed, p)?;
            }
            dump.top(&d.top)?;
            if let (Some(path), Some(x)) = (dump_tpu, dump.inputs()?) {
                npz_write(path, &tpu_inference(&d.lowered, &x)?)?;
            }
        }
        Cmd::Run {
            model,
            input,
            output,
            trace,
        } => {
            let p = load_program(&model)?;
            let x = npz_read(&input)?;
            let out = match trace {
                Some(path) => {
                    let (out, log) = sim::trace(&p, &x)?;
                    let text: String = log.iter().map(|r| format!("{r}\n")).collect();
                    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                    out
                }
                None => sim::run_program(&p, &x)?,
            };
            npz_write(&output, &out)?;
        }
        Cmd::Inference { module, input, output } => {
            let m = load_module(&module)?;
            let x = npz_read(&input)?;
            let out = if m.state.is_top() {
                top_inference(&m, &x)?
            } else {
                tpu_inference(&m, &x)?
            };
            npz_write(&output, &out)?;
        }
        Cmd::Compare {
            reference,
            target,
            mode,
            cos,
            euc,
            json,
        } => {
            let mut th = Thresholds::for_mode(mode);
            if cos.is_some() || euc.is_some() {
                th.exact = false;
                th.cos_min = cos.unwrap_or(th.cos_min);
                th.euc_min = euc.unwrap_or(th.euc_min);
            }
            let r = compare_stages(&npz_read(&reference)?, &npz_read(&target)?, th)?;
            if json {
                println!("{}", r.to_json());
            } else {
                print!("{}", r.to_text());
            }
            if !r.pass {
                eprintln!("comparison failed; worst tensor `{}`", r.worst);
            }
            return Ok(r.pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
