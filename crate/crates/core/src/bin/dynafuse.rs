use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynafuse::config::{load_config, RunConfig};
use dynafuse::error::DynafuseError;
use dynafuse::eval::EvalResult;
use dynafuse::plot::{channel_mean, write_pgm, write_svg_curve};
use dynafuse::synth::{corrupt_modality, generate_scene, Scene};
use dynafuse::train::{
    ablation_run, evaluate, forward_pipeline, train_loop, AblationTable, Checkpoint,
};
use dynafuse::Result;

#[derive(Parser)]
#[command(name = "dynafuse", about = "Desk-scale BEV fusion experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, loss curve, and metrics
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on freshly generated scenes
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one ablation table; one training run per row
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        table: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// skip the composed end-to-end pipeline check
        #[arg(long)]
        quick: bool,
    },
    /// Emit PGM heatmap dumps and an SVG loss curve
    Plot {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_or_default(config: &Option<PathBuf>) -> Result<RunConfig> {
    match config {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DynafuseError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| DynafuseError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| DynafuseError::io(path, e))
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn cmd_synth(config: Option<PathBuf>, seed: u64, count: usize, out: PathBuf) -> Result<()> {
    let cfg = load_or_default(&config)?;
    let train = cfg.to_train_config();
    ensure_dir(&out)?;
    let mut manifest = String::from("file,seed,checksum\n");
    for i in 0..count {
        let scene_seed = seed.wrapping_add(i as u64);
        let scene = generate_scene(scene_seed, &train.scene, &train.spec)?;
        let text = serde_json::to_string(&scene)?;
        let name = format!("scene_{scene_seed}.json");
        write_text(&out.join(&name), &text)?;
        manifest.push_str(&format!("{name},{scene_seed},{}\n", fnv1a_hex(text.as_bytes())));
    }
    write_text(&out.join("manifest.csv"), &manifest)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,total_loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{l:.6}\n"));
    }
    s
}

fn cmd_train(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let cfg = load_or_default(&config)?;
    let mut train = cfg.to_train_config();
    if let Some(s) = seed {
        train.seed = s;
    }
    ensure_dir(&out)?;
    let (ckpt, curve, metrics) = train_loop(&train)?;
    write_text(&out.join("checkpoint.json"), &serde_json::to_string(&ckpt)?)?;
    write_text(&out.join("loss.csv"), &loss_csv(&curve))?;
    write_text(&out.join("metrics.csv"), &metrics.to_csv())?;
    println!("trained {} steps, val mAP {:.6}", ckpt.step, metrics.map);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read_text(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn eval_scenes(cfg: &RunConfig, ckpt: &Checkpoint, seed: Option<u64>) -> Result<Vec<Scene>> {
    let base = seed.unwrap_or(cfg.eval.seed);
    let mut scenes = Vec::with_capacity(cfg.eval.scenes);
    for i in 0..cfg.eval.scenes {
        let s = generate_scene(
            base.wrapping_add(i as u64),
            &ckpt.config.scene,
            &ckpt.config.spec,
        )?;
        let s = match cfg.eval.dropout_modality {
            Some(m) if cfg.eval.dropout > 0.0 => corrupt_modality(&s, m, cfg.eval.dropout)?,
            _ => s,
        };
        scenes.push(s);
    }
    Ok(scenes)
}

fn cmd_eval(config: Option<PathBuf>, checkpoint: PathBuf, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let cfg = load_or_default(&config)?;
    let ckpt = load_checkpoint(&checkpoint)?;
    ensure_dir(&out)?;
    let scenes = eval_scenes(&cfg, &ckpt, seed)?;
    let metrics: EvalResult = evaluate(&ckpt.params, &ckpt.config, &scenes)?;
    write_text(&out.join("metrics.csv"), &metrics.to_csv())?;
    println!("evaluated {} scenes, mAP {:.6}", scenes.len(), metrics.map);
    Ok(())
}

fn cmd_ablate(
    config: Option<PathBuf>,
    table: Option<String>,
    seed: Option<u64>,
    jobs: usize,
    out: PathBuf,
) -> Result<()> {
    let cfg = load_or_default(&config)?;
    let mut base = cfg.to_train_config();
    if let Some(s) = seed {
        base.seed = s;
    }
    let table_name = table.unwrap_or_else(|| cfg.ablation.table.clone());
    let table: AblationTable = table_name.parse()?;
    ensure_dir(&out)?;
    let csv = if jobs <= 1 {
        ablation_run(&base, table)?
    } else {
        let rows = dynafuse::train::ablation_rows(&base, table);
        let mut results: Vec<Option<Result<f64>>> = (0..rows.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = rows
                .iter()
                .map(|(_, cfg)| scope.spawn(move || train_loop(cfg).map(|(_, _, m)| m.map)))
                .collect();
            for (slot, h) in results.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("ablation worker panicked"));
            }
        });
        let mut csv = String::from("setting,map\n");
        for ((label, _), r) in rows.iter().zip(results) {
            csv.push_str(&format!("{label},{:.6}\n", r.unwrap()?));
        }
        csv
    };
    write_text(&out.join(format!("table_{table_name}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, quick: bool) -> Result<()> {
    let reports = dynafuse::gradsuite::run_suite(seed, !quick);
    let mut failed = 0usize;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<22} max_rel_err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tol);
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(DynafuseError::invalid(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn cmd_plot(scene: PathBuf, checkpoint: Option<PathBuf>, curve: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let scene: Scene = serde_json::from_str(&read_text(&scene)?)?;
    ensure_dir(&out)?;
    match checkpoint {
        None => {
            let classes = scene
                .gt_boxes
                .iter()
                .map(|b| b.class_id + 1)
                .max()
                .unwrap_or(1);
            let (hm, _) = dynafuse::heatmap::render_gt_heatmap(&scene.gt_boxes, &scene.spec, classes)?;
            let t = hm.to_tensor();
            let (m, h, w) = channel_mean(&t)?;
            write_pgm(&out.join("gt_heatmap.pgm"), &m, h, w)?;
            println!("no checkpoint given; wrote the ground-truth heatmap only");
        }
        Some(ck) => {
            let ckpt = load_checkpoint(&ck)?;
            let output = forward_pipeline(&scene, &ckpt.params, &ckpt.config)?;
            let dumps: [(&str, Option<&dynafuse::Tensor>); 6] = [
                ("gt_heatmap", output.maps.gt_heatmap.as_ref()),
                ("feat_cam", output.maps.fx.as_ref()),
                ("feat_lidar", output.maps.fy.as_ref()),
                ("error_cam", output.maps.ex.as_ref()),
                ("error_lidar", output.maps.ey.as_ref()),
                ("fused", output.maps.fused.as_ref()),
            ];
            for (name, t) in dumps {
                if let Some(t) = t {
                    let (m, h, w) = channel_mean(t)?;
                    write_pgm(&out.join(format!("{name}.pgm")), &m, h, w)?;
                }
            }
            println!("wrote feature and error maps for {} instances", output.instances.len());
        }
    }
    if let Some(curve_path) = curve {
        let text = read_text(&curve_path)?;
        let values: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1))
            .filter_map(|v| v.parse().ok())
            .collect();
        write_svg_curve(&out.join("loss.svg"), &values, "training loss")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed, count, out } => cmd_synth(config, seed, count, out),
        Command::Train { config, seed, out } => cmd_train(config, seed, out),
        Command::Eval { config, checkpoint, seed, out } => cmd_eval(config, checkpoint, seed, out),
        Command::Ablate { config, table, seed, jobs, out } => cmd_ablate(config, table, seed, jobs, out),
        Command::Gradcheck { seed, quick } => cmd_gradcheck(seed, quick),
        Command::Plot { scene, checkpoint, curve, out } => cmd_plot(scene, checkpoint, curve, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
