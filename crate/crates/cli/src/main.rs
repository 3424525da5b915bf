use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fbpose_core::experiment::{dump_images, run_experiment, ExperimentConfig, SceneKind, SEED_ENV};
use fbpose_core::feedback::{run_hand_loop_batch, run_joint_loop_batch, LoopState};
use fbpose_core::joint::{train_joint_model, JointModel};
use fbpose_core::nets::updater_arch;
use fbpose_core::pipeline::{
    hand_crops, load_container, load_net, normalize_pose, push_prior, read_prior, save_net, train_hand_localizer, train_hand_predictor,
    train_hand_synthesizer, train_hand_updater, HandModel, PipelineConfig,
};
use fbpose_core::pose::fit_prior;
use fbpose_core::scene::{make_dataset, Dataset, SceneConfig};
use fbpose_core::train::write_log;
use fbpose_core::{CoreError, Result};
use fbpose_tensor::{Network, WeightsContainer};

#[derive(Parser)]
#[command(name = "fbpose", version, about = "Hand and object pose estimation with a learned feedback loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for the stage; also read from FBPOSE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scene {
    HandOnly,
    HandObject,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Localizer,
    Predictor,
    Synthesizer,
    Updater,
    /// All hand-only networks.
    Hand,
    /// All hand-object networks.
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, value_enum, default_value = "hand-only")]
        scene: Scene,
    },
    /// Fit the linear pose prior to dataset poses.
    FitPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, default_value_t = 125.0)]
        cube: f64,
    },
    /// Train one network role; `--out` is the model directory.
    Train {
        #[arg(value_enum)]
        role: Role,
        #[arg(long)]
        data: PathBuf,
        /// Pipeline configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Hand synthesizer weights for the joint role.
        #[arg(long)]
        synthesizer: Option<PathBuf>,
    },
    /// Run the refinement loop on a dataset.
    RunLoop {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value_t = 2)]
        iters: usize,
    },
    /// Fit poses by direct image-discrepancy minimization.
    Baseline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pso: bool,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Evaluate a trained model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value_t = 2)]
        iters: usize,
    },
    /// Write per-iteration images of one loop run.
    DumpImages {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value_t = 2)]
        iters: usize,
    },
    /// Run a declared pipeline from a JSON config.
    Experiment { config: PathBuf },
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

fn seed(cli: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s.parse().map_err(|_| CoreError::Invalid(format!("{SEED_ENV} is not an integer: {s}"))),
        Err(_) => Ok(default),
    }
}

fn read_data(p: &Path) -> Result<Dataset> {
    Dataset::read(p)
}

fn pipeline_config(p: &Option<PathBuf>) -> Result<PipelineConfig> {
    match p {
        Some(p) => Ok(serde_json::from_slice(&fs::read(p)?)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone();
    match cli.command {
        Command::GenData { n, scene } => {
            let cfg = match scene {
                Scene::HandOnly => SceneConfig::hand_only(),
                Scene::HandObject => SceneConfig::hand_object(),
            };
            make_dataset(n, &cfg, seed(cli.seed, 1)?)?.write(&out)
        }
        Command::FitPrior { data, k, cube } => {
            let d = read_data(&data)?;
            let poses: Vec<Vec<f64>> = d.samples.iter().map(|s| normalize_pose(&s.hand, &s.hand.joints[fbpose_core::hand::MCP], cube)).collect();
            let prior = fit_prior(&poses, k)?;
            let mut c = WeightsContainer::empty("f64", 0, serde_json::json!({ "role": "prior", "cube": cube }));
            push_prior(&mut c, &prior)?;
            c.save(&out)?;
            Ok(())
        }
        Command::Train { role, data, config, synthesizer } => train(role, &read_data(&data)?, pipeline_config(&config)?, cli.seed, synthesizer, &out),
        Command::RunLoop { model, data, joint, iters } => {
            let d = read_data(&data)?;
            let states = loop_states(&model, &d, joint, iters)?;
            fs::create_dir_all(&out)?;
            let mut csv = String::from("sample,iteration,hand_error\n");
            for (i, st) in states.iter().enumerate() {
                match st {
                    Ok(st) => {
                        for k in 0..=iters {
                            let e = fbpose_core::metrics::mean_joint_error(&st.hand_pose(k), &d.samples[i].hand)?;
                            csv.push_str(&format!("{i},{k},{e}\n"));
                        }
                    }
                    Err(e) => eprintln!("sample {i}: {e}"),
                }
            }
            fs::write(out.join("errors.csv"), csv)?;
            let ok: Vec<&LoopState> = states.iter().filter_map(|s| s.as_ref().ok()).collect();
            fs::write(out.join("states.json"), serde_json::to_vec(&ok)?)?;
            Ok(())
        }
        Command::Baseline { model, data, pso, samples } => {
            let mut cfg = eval_config(model, data, false, 0);
            cfg.audit.enabled = false;
            cfg.baseline.samples = samples;
            if pso {
                cfg.baseline.pso = Some(fbpose_core::baseline::SwarmConfig {
                    seed: seed(cli.seed, 0)?,
                    ..Default::default()
                });
            }
            run_experiment(&cfg, &out).map(|_| ())
        }
        Command::Eval { model, data, joint, iters } => run_experiment(&eval_config(model, data, joint, iters), &out).map(|_| ()),
        Command::DumpImages { model, data, index, joint, iters } => {
            let d = read_data(&data)?;
            let st = loop_states(&model, &d, joint, iters)?
                .into_iter()
                .nth(index)
                .ok_or_else(|| CoreError::Invalid(format!("no sample {index}")))??;
            dump_images(&st, &out)
        }
        Command::Experiment { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let o = run_experiment(&cfg, &out)?;
            for (name, r) in &o.reports {
                println!("{name}: mean {:.3} median {:.3} (n = {})", r.mean, r.median, r.per_sample.len());
            }
            Ok(())
        }
    }
}

fn eval_config(model: PathBuf, data: PathBuf, joint: bool, iters: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "eval".into(),
        scene: if joint { SceneKind::HandObject } else { SceneKind::HandOnly },
        model_dir: Some(model),
        test_data: Some(data),
        iterations: iters,
        ..ExperimentConfig::default()
    }
}

fn loop_states(model: &Path, d: &Dataset, joint: bool, iters: usize) -> Result<Vec<Result<LoopState>>> {
    let images: Vec<_> = d.samples.iter().map(|s| (&s.depth, s.camera)).collect();
    if joint {
        run_joint_loop_batch(&images, &JointModel::load(model)?, iters, true)
    } else {
        run_hand_loop_batch(&images, &HandModel::load(model)?, iters)
    }
}

fn train(role: Role, data: &Dataset, mut cfg: PipelineConfig, seed: Option<u64>, synthesizer: Option<PathBuf>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let t = match role {
        Role::Localizer => &mut cfg.localizer_train,
        Role::Predictor => &mut cfg.predictor_train,
        Role::Synthesizer => &mut cfg.synth_train,
        Role::Updater | Role::Hand | Role::Joint => &mut cfg.updater_train,
    };
    if let Some(s) = seed {
        t.seed = s;
    }
    let role_seed = t.seed;
    cfg.validate()?;
    let log_to = |name: &str, log: &[fbpose_core::train::EpochLog]| write_log(&out.join(format!("{name}.csv")), log);
    match role {
        Role::Localizer => {
            let (net, log) = train_hand_localizer(data, &cfg)?;
            save_net(&net, &out.join("localizer.fbw"), role_seed, serde_json::json!({ "role": "localizer" }))?;
            fs::write(out.join("pipeline.json"), serde_json::to_vec_pretty(&cfg)?)?;
            log_to("localizer", &log)
        }
        Role::Predictor | Role::Synthesizer => {
            let localizer = load_net(&out.join("localizer.fbw"), "localizer")?;
            let hc = hand_crops(data, &localizer, &cfg)?;
            if let Role::Predictor = role {
                let prior = fit_prior(&hc.poses, cfg.prior_k)?.to_f32_precision();
                let (net, log) = train_hand_predictor(&hc.crops, &hc.poses, &prior, &cfg, "hand-predictor")?;
                let mut c = WeightsContainer::from_network(&net, role_seed, serde_json::json!({ "role": "hand-predictor" }));
                push_prior(&mut c, &prior)?;
                c.save(out.join("predictor.fbw"))?;
                log_to("hand-predictor", &log)
            } else {
                let (net, log) = train_hand_synthesizer(&hc.crops, &hc.poses, &cfg)?;
                save_net(&net, &out.join("synthesizer.fbw"), role_seed, serde_json::json!({ "role": "synthesizer" }))?;
                log_to("synthesizer", &log)
            }
        }
        Role::Updater => {
            let pc = load_container(&out.join("predictor.fbw"), "hand-predictor")?;
            let mut model = HandModel {
                localizer: load_net(&out.join("localizer.fbw"), "localizer")?,
                predictor: pc.network()?,
                prior: read_prior(&pc)?,
                synth: load_net(&out.join("synthesizer.fbw"), "synthesizer")?,
                updater: Network::new(updater_arch(&cfg.scale, 1), 0)?,
                cfg: cfg.clone(),
            };
            let hc = hand_crops(data, &model.localizer, &cfg)?;
            let (net, log, _) = train_hand_updater(&model, &hc)?;
            model.updater = net;
            model.save(out)?;
            log_to("updater", &log)
        }
        Role::Hand => {
            let (model, logs) = fbpose_core::pipeline::train_hand_model(data, &cfg)?;
            model.save(out)?;
            logs.iter().try_for_each(|(k, v)| log_to(k, v))
        }
        Role::Joint => {
            let path = synthesizer.ok_or_else(|| CoreError::Invalid("the joint role needs --synthesizer".into()))?;
            let synth = load_net(&path, "synthesizer")?;
            let object = SceneConfig::hand_object().object.expect("hand-object scene has an object");
            let (model, logs) = train_joint_model(data, &synth, &cfg, &object)?;
            model.save(out)?;
            logs.iter().try_for_each(|(k, v)| log_to(k, v))
        }
    }
}
