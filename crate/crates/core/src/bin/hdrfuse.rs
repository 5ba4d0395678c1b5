use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hdrfuse::image_io::{self, load_hdr, load_ldr, read_sidecar_ev, save_gray_png, save_hdr, save_ldr, save_rgb_png};
use hdrfuse::loss::{psnr_l, psnr_mu};
use hdrfuse::pipeline::{run_job, FusionJob};
use hdrfuse::radiometry::{tonemap_mu, TonemapConfig, DEFAULT_MU};
use hdrfuse::structure_tensor::{luminance_of, st_map_of_plane, DEFAULT_RHO};
use hdrfuse::verification::{grad_check_indices, sample_params, synth_scene, train_toy, TrainConfig, DEFAULT_PROBES, DEFAULT_SCENE};
use hdrfuse::{Error, NetworkConfig, NetworkParams, Result};

#[derive(Parser)]
#[command(name = "hdrfuse", version, about = "Fuse bracketed LDR exposures into an HDR image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigName {
    Full,
    Tiny,
}

impl ConfigName {
    fn config(self) -> NetworkConfig {
        match self {
            ConfigName::Full => NetworkConfig::full(),
            ConfigName::Tiny => NetworkConfig::tiny(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fuse exposures given as `path:ev` (or `path`, reading the EV from its sidecar).
    Fuse {
        #[arg(long = "in", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a μ-law tonemapped 8-bit PNG.
        #[arg(long)]
        tonemapped: Option<PathBuf>,
    },
    /// Write the normalized structure map of an image's luminance.
    StMap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RHO)]
        rho: f64,
    },
    /// μ-law tonemap a PFM into a PNG.
    Tonemap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MU)]
        mu: f64,
        #[arg(long, default_value_t = 8)]
        bits: u32,
    },
    /// PSNR of `--a` against the reference `--b`.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MU)]
        mu: f64,
    },
    /// Compare backpropagated gradients with central differences on the tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_PROBES)]
        probes: usize,
    },
    /// Overfit the tiny network to a synthetic scene and print the loss curve as CSV.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SCENE.0)]
        scene_seed: u64,
        /// Write the curve here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Save the trained parameters.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// Render a synthetic bracketed scene: three PNG exposures with sidecars and a PFM ground truth.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SCENE.0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = DEFAULT_SCENE.2, allow_negative_numbers = true)]
        displacement: i64,
    },
    /// Write freshly initialized network parameters.
    InitParams {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        config: ConfigName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `path:ev`, or a bare path whose EV comes from the sidecar.
fn parse_input(arg: &str) -> Result<(PathBuf, f64)> {
    if let Some((path, ev)) = arg.rsplit_once(':') {
        if let Ok(ev) = ev.parse::<f64>() {
            return Ok((PathBuf::from(path), ev));
        }
    }
    let path = PathBuf::from(arg);
    match read_sidecar_ev(&path)? {
        Some(ev) => Ok((path, ev)),
        None => Err(Error::InvalidJob(format!(
            "no EV given for {arg} and no sidecar at {}",
            image_io::sidecar_path(&path).display()
        ))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> Result<String> {
    let mut out = String::new();
    match cmd {
        Command::Fuse {
            inputs,
            params,
            out: output,
            tonemapped,
        } => {
            let inputs = inputs.iter().map(|s| parse_input(s)).collect::<Result<Vec<_>>>()?;
            let job = FusionJob::new(inputs, params, output, tonemapped)?;
            let h = run_job(&job)?;
            writeln!(out, "width={}\nheight={}\ninputs={}", h.width(), h.height(), job.inputs().len()).unwrap();
        }
        Command::StMap { input, out: output, rho } => {
            let img = load_ldr(&input, 0.0)?;
            let lum = luminance_of(img.data(), img.width(), img.height());
            let map = st_map_of_plane(&lum, rho)?;
            save_gray_png(&output, map.plane(), 16)?;
        }
        Command::Tonemap {
            input,
            out: output,
            mu,
            bits,
        } => {
            let h = load_hdr(&input)?;
            let t = tonemap_mu(&h, &TonemapConfig::with_mu(mu)?);
            save_rgb_png(&output, t.width(), t.height(), t.data(), bits)?;
        }
        Command::Metrics { a, b, mu } => {
            let (a, b) = (load_hdr(&a)?, load_hdr(&b)?);
            writeln!(out, "psnr_l={}", psnr_l(&a, &b)?).unwrap();
            writeln!(out, "psnr_mu={}", psnr_mu(&a, &b, &TonemapConfig::with_mu(mu)?)?).unwrap();
        }
        Command::Gradcheck { seed, epsilon, probes } => {
            let p = NetworkParams::init(NetworkConfig::tiny(), seed)?;
            let (_, side, displacement) = DEFAULT_SCENE;
            let scene = synth_scene(seed, side, side, displacement)?;
            let r = grad_check_indices(&p, &scene, epsilon, &sample_params(&p, probes, seed))?;
            writeln!(out, "max_rel_error={}", r.max_rel_error).unwrap();
            writeln!(out, "worst_param_path={}", r.worst_param_path).unwrap();
            writeln!(out, "epsilon={}", r.epsilon).unwrap();
            writeln!(out, "probes={}", r.probes.len()).unwrap();
            writeln!(out, "seed={seed}").unwrap();
        }
        Command::TrainToy {
            steps,
            seed,
            scene_seed,
            csv,
            params_out,
        } => {
            let (_, side, displacement) = DEFAULT_SCENE;
            let scene = synth_scene(scene_seed, side, side, displacement)?;
            let r = train_toy(
                &scene,
                &TrainConfig {
                    steps,
                    seed,
                    ..TrainConfig::default()
                },
            )?;
            let mut table = String::from("step,loss,mse,st\n");
            for rec in &r.curve {
                writeln!(table, "{},{},{},{}", rec.step, rec.loss.total, rec.loss.mse_term, rec.loss.st_term).unwrap();
            }
            let f = r.final_loss;
            writeln!(table, "{},{},{},{}", steps, f.total, f.mse_term, f.st_term).unwrap();
            match csv {
                Some(path) => write_text(&path, &table)?,
                None => out = table,
            }
            if let Some(path) = params_out {
                r.params.save(path)?;
            }
        }
        Command::Synth {
            out_dir,
            seed,
            width,
            height,
            displacement,
        } => {
            let scene = synth_scene(seed, width, height, displacement)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            for ldr in &scene.ldr_stack {
                let path = out_dir.join(format!("ev{:+}.png", ldr.ev()));
                save_ldr(ldr, &path)?;
                writeln!(out, "{}:{}", path.display(), ldr.ev()).unwrap();
            }
            let gt = out_dir.join("gt.pfm");
            save_hdr(&scene.gt, &gt)?;
            writeln!(out, "{}", gt.display()).unwrap();
        }
        Command::InitParams {
            out: output,
            config,
            seed,
        } => {
            let p = NetworkParams::init(config.config(), seed)?;
            p.save(&output)?;
            writeln!(out, "params={}", p.count()).unwrap();
        }
    }
    Ok(out)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error code=usage message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error code={} message={}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
