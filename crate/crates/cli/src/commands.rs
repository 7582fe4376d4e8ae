use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde_json::json;
use volt_core::classical::{linear_filter, richardson_lucy, rl_sweep, ClsConfig, RlConfig};
use volt_core::evalsuite::{
    credibility_from_stats, memory_csv, mip_depth, psnr, score_bytes, volume_metrics, AttentionArch, LevelDims,
    MemModelConfig, MemRegime, MetricsReport,
};
use volt_core::interpolant::ScheduleMode;
use volt_core::laxnet::{load_checkpoint, train_to_checkpoint, ArchConfig, LossMode, TrainConfig};
use volt_core::optics::{compute_psf, forward_image, NoiseConfig, OpticalConfig, Otf};
use volt_core::phantom::{generate_dataset, DatasetSplits, PhantomConfig};
use volt_core::sampler::{sample, sample_ensemble, sample_stream, SamplerConfig, SamplerMode};
use volt_core::voxgrid::{derive_stream, load_volume, save_volume, DatasetManifest};
use volt_core::{Grid, Volume};

use crate::runlog::{io_error, run_log_path, RunLog};
use crate::*;

pub fn execute(cmd: Command, argv: &[OsString]) -> CliResult<()> {
    match cmd {
        Command::Psf(a) => psf(a, argv),
        Command::Phantom(a) => phantom(a, argv),
        Command::Simulate(a) => simulate(a, argv),
        Command::Deconv(a) => deconv(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Sample(a) => sample_cmd(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Credibility(a) => credibility(a, argv),
        Command::Mip(a) => mip(a, argv),
        Command::Memmodel(a) => memmodel(a, argv),
        Command::Rerun(a) => rerun(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(io_error(path, e)))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn parse_dims(s: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--dims expects NXxNYxNZ, got {s:?}")))?;
    match parts[..] {
        [x, y, z] => Ok((x, y, z)),
        _ => Err(usage(format!("--dims expects NXxNYxNZ, got {s:?}"))),
    }
}

fn parse_spacing(s: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--spacing expects DX,DY,DZ, got {s:?}")))?;
    match parts[..] {
        [x, y, z] => Ok((x, y, z)),
        _ => Err(usage(format!("--spacing expects DX,DY,DZ, got {s:?}"))),
    }
}

fn parse_zernike(s: &str) -> CliResult<(u32, f64)> {
    let bad = || usage(format!("--zernike expects NOLL=WAVES, got {s:?}"));
    let (j, c) = s.split_once('=').ok_or_else(bad)?;
    Ok((j.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn psf(a: PsfArgs, argv: &[OsString]) -> CliResult<()> {
    let mut cfg = match a.preset {
        Preset::Paper => OpticalConfig::paper(),
        Preset::Desk => OpticalConfig::desk(),
    };
    if let Some(v) = a.na {
        cfg.na = v;
    }
    if let Some(v) = a.lambda_em {
        cfg.lambda_em = v;
    }
    if let Some(v) = a.lambda_ex {
        cfg.lambda_ex = v;
    }
    if let Some(v) = a.n0 {
        cfg.n0 = v;
    }
    if let Some(d) = &a.dims {
        let (nx, ny, nz) = parse_dims(d)?;
        cfg.grid = Grid::new(nx, ny, nz, cfg.grid.dx, cfg.grid.dy, cfg.grid.dz)?;
    }
    if let Some(s) = &a.spacing {
        let (dx, dy, dz) = parse_spacing(s)?;
        cfg.grid = Grid::new(cfg.grid.nx, cfg.grid.ny, cfg.grid.nz, dx, dy, dz)?;
    }
    for z in &a.zernike {
        cfg.zernike.push(parse_zernike(z)?);
    }
    let psf = compute_psf(&cfg)?;
    save_volume(&psf.volume, &a.out)?;
    let sidecar = a.out.with_extension("json");
    write_file(&sidecar, psf.sidecar_json())?;
    RunLog::new(
        "psf",
        argv,
        json!({ "preset": a.preset, "optics": cfg }),
        vec![display(&a.out), display(&sidecar)],
    )
    .save(&run_log_path(&a.out, false))
}

fn phantom(a: PhantomArgs, argv: &[OsString]) -> CliResult<()> {
    let (mut cfg, optics, mut splits) = match a.preset {
        Preset::Desk => (PhantomConfig::desk(), OpticalConfig::desk(), DatasetSplits::desk()),
        Preset::Paper => (PhantomConfig::paper(), OpticalConfig::paper(), DatasetSplits::paper()),
    };
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    splits.train = a.train.unwrap_or(splits.train);
    splits.val = a.val.unwrap_or(splits.val);
    splits.test = a.test.unwrap_or(splits.test);
    let mut noise = NoiseConfig::default();
    noise.peak_photons = a.photons.unwrap_or(noise.peak_photons);
    noise.read_sigma = a.read_sigma.unwrap_or(noise.read_sigma);
    let m = generate_dataset(&cfg, &optics, &noise, &splits, &a.out, a.threads.max(1))?;
    eprintln!("wrote {} volumes to {}, clean max {}", m.records.len(), a.out.display(), m.clean_max);
    RunLog::new(
        "phantom",
        argv,
        json!({ "preset": a.preset, "phantom": cfg, "optics": optics, "noise": noise, "splits": splits, "threads": a.threads }),
        vec![display(&a.out.join("manifest.json"))],
    )
    .save(&run_log_path(&a.out, true))
}

fn simulate(a: SimulateArgs, argv: &[OsString]) -> CliResult<()> {
    let x = load_volume(&a.input)?;
    let kernel = load_volume(&a.psf)?;
    x.check_same_dims(&kernel, "simulate: input vs psf")?;
    let noise = NoiseConfig {
        peak_photons: a.photons,
        read_sigma: a.read_sigma,
    };
    let y = forward_image(&x, &Otf::from_centered(&kernel), &noise, &derive_stream(a.seed, "noise", a.index))?;
    save_volume(&y, &a.out)?;
    RunLog::new(
        "simulate",
        argv,
        json!({ "input": a.input, "psf": a.psf, "noise": noise, "seed": a.seed, "index": a.index }),
        vec![display(&a.out)],
    )
    .save(&run_log_path(&a.out, false))
}

fn deconv(a: DeconvArgs, argv: &[OsString]) -> CliResult<()> {
    let y = load_volume(&a.input)?;
    let kernel = load_volume(&a.psf)?;
    y.check_same_dims(&kernel, "deconv: input vs psf")?;
    let otf = Otf::from_centered(&kernel);
    let gt = a.sweep_gt.as_ref().map(load_volume).transpose()?;
    let (out, params) = match a.method {
        DeconvMethod::Rl => {
            // read noise can push measurements below zero; RL needs y >= 0
            let clamped = y.data().iter().filter(|&&v| v < 0.0).count();
            let yc = y.map(|v| v.max(0.0));
            let iterations = match &gt {
                Some(gt) => rl_sweep(&yc, gt, &otf, a.iterations, gt.max())?.0,
                None => a.iterations,
            };
            let cfg = RlConfig {
                iterations,
                ..RlConfig::default()
            };
            let x = richardson_lucy(&yc, &otf, &cfg)?;
            (x, json!({ "rl": cfg, "clamped_voxels": clamped, "swept": gt.is_some(), "max_iterations": a.iterations }))
        }
        DeconvMethod::Wiener | DeconvMethod::Cls => {
            let lambdas = if a.lambda.is_empty() {
                vec![if a.method == DeconvMethod::Wiener { 1e-3 } else { 1e-2 }]
            } else {
                a.lambda.clone()
            };
            if lambdas.len() > 1 && gt.is_none() {
                return Err(usage("several --lambda values need --sweep-gt"));
            }
            let mut best: Option<(f64, ClsConfig, Volume)> = None;
            for &l in &lambdas {
                let mut cfg = if a.method == DeconvMethod::Wiener {
                    ClsConfig::wiener(l)
                } else {
                    ClsConfig::cls(l)
                };
                cfg.isotropic = a.isotropic;
                let x = linear_filter(&y, &otf, &cfg)?;
                let score = match &gt {
                    Some(gt) => psnr(&x, gt, gt.max())?,
                    None => 0.0,
                };
                if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                    best = Some((score, cfg, x));
                }
            }
            let (_, cfg, x) = best.expect("at least one lambda");
            (x, json!({ "filter": cfg, "lambdas": lambdas, "swept": gt.is_some() }))
        }
    };
    save_volume(&out, &a.out)?;
    let mut params = params;
    params["method"] = json!(a.method);
    params["input"] = json!(a.input);
    params["psf"] = json!(a.psf);
    RunLog::new("deconv", argv, params, vec![display(&a.out)]).save(&run_log_path(&a.out, false))
}

fn train(a: TrainArgs, argv: &[OsString]) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(io_error(path, e)))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => match a.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        },
    };
    let mut arch = match a.preset {
        Preset::Desk => ArchConfig::desk(),
        Preset::Paper => ArchConfig::paper(),
    };
    arch.condition_on_x0 = !a.no_x0_conditioning;
    if let Some(m) = a.loss_mode {
        cfg.loss_mode = match m {
            LossArg::X1 => LossMode::X1,
            LossArg::Velocity => LossMode::Velocity,
        };
    }
    if let Some(s) = a.schedule {
        cfg.schedule = match s {
            ScheduleArg::Volt => ScheduleMode::Volt,
            ScheduleArg::FlowMatching => ScheduleMode::FlowMatching,
        };
    }
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.accumulation = a.accumulation.unwrap_or(cfg.accumulation);
    cfg.eval_every = a.eval_every.unwrap_or(cfg.eval_every);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.init_seed = a.init_seed.unwrap_or(cfg.init_seed);
    if let Some(c) = a.grad_clip {
        cfg.grad_clip = (c > 0.0).then_some(c);
    }
    cfg.threads = a.threads.max(1);
    let manifest = DatasetManifest::load(a.data.join("manifest.json"))?;
    let (_, report) = train_to_checkpoint(&manifest, &arch, &cfg, &a.out, |r| {
        eprintln!(
            "step {:>6}  train {:.5}  val {:.5} (b {:.5}, eta {:.5})  lr {:.2e}",
            r.step, r.train_loss, r.val_loss, r.val_b, r.val_eta, r.lr
        );
    })?;
    let history = with_suffix(&a.out, ".history.csv");
    let mut csv = String::from("step,train_loss,val_loss,val_b,val_eta,lr\n");
    for r in &report.history {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.train_loss, r.val_loss, r.val_b, r.val_eta, r.lr));
    }
    write_file(&history, csv)?;
    eprintln!("best validation loss {:.5} at step {}", report.best_val_loss, report.best_step);
    let mut echo = cfg.clone();
    echo.threads = 1;
    RunLog::new(
        "train",
        argv,
        json!({ "data": a.data, "arch": arch, "train": echo, "threads": a.threads, "best_step": report.best_step, "best_val_loss": report.best_val_loss, "param_count": report.param_count }),
        vec![display(&a.out), display(&history)],
    )
    .save(&run_log_path(&a.out, false))
}

fn sample_cmd(a: SampleArgs, argv: &[OsString]) -> CliResult<()> {
    let (model, header) = load_checkpoint(&a.ckpt)?;
    let y = load_volume(&a.input)?;
    let mut cfg = match a.mode {
        ModeArg::Sde => SamplerConfig::sde(),
        ModeArg::Ode => SamplerConfig::ode(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.seed = a.seed;
    cfg.t_clamp = a.t_clamp;
    cfg.final_predict = a.final_predict;
    cfg.ensemble_size = a.samples;
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    cfg.validate()?;
    model.arch.check_input(y.grid().nx, y.grid().ny)?;
    let scale = header.clean_max;
    let y0 = y.scale(1.0 / scale);
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(io_error(&a.out, e)))?;
    let mut outputs = Vec::new();
    let mut save = |v: &Volume, name: &str| -> CliResult<()> {
        let p = a.out.join(name);
        save_volume(&v.scale(scale), &p)?;
        outputs.push(display(&p));
        Ok(())
    };
    if a.samples == 1 {
        let x = sample(&y0, &model, &model.schedule, &cfg, &sample_stream(cfg.seed, 0))?;
        save(&x, "sample_000.vol")?;
        save(&x, "mean.vol")?;
    } else {
        let e = sample_ensemble(&y0, &model, &model.schedule, &cfg, a.threads.max(1))?;
        for (k, s) in e.samples.iter().enumerate() {
            save(s, &format!("sample_{k:03}.vol"))?;
        }
        save(&e.mean, "mean.vol")?;
        save(&e.sd, "sd.vol")?;
    }
    let mode = match cfg.mode {
        SamplerMode::Sde => "sde",
        SamplerMode::Ode => "ode",
    };
    RunLog::new(
        "sample",
        argv,
        json!({ "ckpt": a.ckpt, "input": a.input, "mode": mode, "steps": cfg.steps, "samples": cfg.ensemble_size, "seed": cfg.seed, "t_clamp": cfg.t_clamp, "final_predict": cfg.final_predict, "clean_max": scale, "threads": a.threads }),
        outputs,
    )
    .save(&run_log_path(&a.out, true))
}

fn eval(a: EvalArgs, argv: &[OsString]) -> CliResult<()> {
    let pred = load_volume(&a.pred)?;
    let gt = load_volume(&a.gt)?;
    let range = a.data_range.unwrap_or_else(|| gt.max());
    if !(range > 0.0) {
        return Err(usage(format!("data range must be positive, got {range}")));
    }
    let name = a.pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let report = MetricsReport::new(range, vec![volume_metrics(&name, &pred, &gt, range)?]);
    let text = serde_json::to_string_pretty(&report).map_err(volt_core::Error::from)?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
        let csv = out.with_extension("csv");
        write_file(&csv, report.to_csv())?;
        RunLog::new(
            "eval",
            argv,
            json!({ "pred": a.pred, "gt": a.gt, "data_range": range }),
            vec![display(out), display(&csv)],
        )
        .save(&run_log_path(out, false))?;
    }
    Ok(())
}

fn credibility(a: CredibilityArgs, argv: &[OsString]) -> CliResult<()> {
    let mean = load_volume(&a.ensemble.join("mean.vol"))?;
    let sd_path = a.ensemble.join("sd.vol");
    if !sd_path.exists() {
        return Err(usage(format!("{} has no sd.vol; sample at least two members", a.ensemble.display())));
    }
    let sd = load_volume(&sd_path)?;
    let gt = load_volume(&a.gt)?;
    let range = a.data_range.unwrap_or_else(|| gt.max());
    if !(range > 0.0) {
        return Err(usage(format!("data range must be positive, got {range}")));
    }
    let inv = 1.0 / range;
    let r = credibility_from_stats(&mean.scale(inv), &sd.scale(inv), &gt.scale(inv), a.tau, a.sd_floor)?;
    println!("coverage {:.6} (tau {}), nll {:.6}, voxels {}", r.coverage, r.tau, r.nll, r.voxels);
    let text = serde_json::to_string_pretty(&r).map_err(volt_core::Error::from)?;
    write_file(&a.out, text)?;
    let csv = a.out.with_extension("csv");
    write_file(&csv, r.histogram_csv())?;
    RunLog::new(
        "credibility",
        argv,
        json!({ "ensemble": a.ensemble, "gt": a.gt, "tau": a.tau, "sd_floor": a.sd_floor, "data_range": range }),
        vec![display(&a.out), display(&csv)],
    )
    .save(&run_log_path(&a.out, false))
}

fn mip(a: MipArgs, argv: &[OsString]) -> CliResult<()> {
    let v = load_volume(&a.input)?;
    let m = mip_depth(&v);
    let outs = [
        (with_suffix(&a.out, ".max.pgm"), m.max_pgm()),
        (with_suffix(&a.out, ".depth.pgm"), m.depth_pgm(v.grid().nz)),
        (with_suffix(&a.out, ".csv"), m.to_csv().into_bytes()),
    ];
    for (p, bytes) in &outs {
        write_file(p, bytes)?;
    }
    RunLog::new(
        "mip",
        argv,
        json!({ "input": a.input }),
        outs.iter().map(|(p, _)| display(p)).collect(),
    )
    .save(&run_log_path(&a.out, false))
}

/// Desk network levels at 32x32x8, deepest first.
fn desk_mem_config(regime: MemRegime) -> MemModelConfig {
    let arch = ArchConfig::desk();
    let levels = (0..arch.levels())
        .rev()
        .map(|l| LevelDims {
            x: 32 >> l,
            y: 32 >> l,
            channels: arch.channels(l) as u64,
        })
        .collect();
    MemModelConfig {
        levels,
        axial: 8,
        heads: arch.heads as u64,
        bytes_per_element: 4,
        regime,
    }
}

fn memmodel(a: MemmodelArgs, argv: &[OsString]) -> CliResult<()> {
    let regimes = match a.regime {
        RegimeArg::Quadratic => vec![MemRegime::Quadratic],
        RegimeArg::Linear => vec![MemRegime::Linear],
        RegimeArg::Both => vec![MemRegime::Quadratic, MemRegime::Linear],
    };
    let mut csv = String::new();
    let mut configs = Vec::new();
    for regime in regimes {
        let mut cfg = match a.preset {
            Preset::Paper => MemModelConfig::paper(regime),
            Preset::Desk => desk_mem_config(regime),
        };
        cfg.heads = a.heads.unwrap_or(cfg.heads);
        cfg.bytes_per_element = a.bytes_per_element.unwrap_or(cfg.bytes_per_element);
        let part = memory_csv(&cfg)?;
        if csv.is_empty() {
            csv = part;
        } else {
            csv.extend(part.lines().skip(1).map(|l| format!("{l}\n")));
        }
        configs.push(cfg);
    }
    let cfg = &configs[0];
    let deepest = &cfg.levels[0];
    let vol = score_bytes(deepest, cfg.axial, cfg.heads, cfg.bytes_per_element, AttentionArch::Volumetric);
    let fac = score_bytes(deepest, cfg.axial, cfg.heads, cfg.bytes_per_element, AttentionArch::Factorized);
    println!(
        "bottleneck {}x{}x{}: volumetric/factorized score memory = {}/{} = {:.6}",
        deepest.x,
        deepest.y,
        cfg.axial,
        vol,
        fac,
        vol as f64 / fac as f64
    );
    write_file(&a.out, csv)?;
    RunLog::new("memmodel", argv, json!({ "preset": a.preset, "configs": configs }), vec![display(&a.out)])
        .save(&run_log_path(&a.out, false))
}

fn rerun(a: RerunArgs) -> CliResult<()> {
    let log = RunLog::load(&a.manifest)?;
    let out = match &a.out {
        Some(o) if o.is_relative() => Some(std::env::current_dir().map_err(|e| CliError::Data(io_error(o, e)))?.join(o)),
        other => other.clone(),
    };
    let args = log.argv_with_out(out.as_deref());
    if args.first().map(String::as_str) == Some("rerun") {
        return Err(usage("a rerun manifest cannot point at another rerun"));
    }
    std::env::set_current_dir(&log.cwd).map_err(|e| CliError::Data(io_error(&log.cwd, e)))?;
    let mut full: Vec<OsString> = vec!["volt".into()];
    full.extend(args.into_iter().map(OsString::from));
    let cli = Cli::try_parse_from(&full).map_err(|e| usage(format!("recorded arguments no longer parse: {e}")))?;
    execute(cli.command, &full)
}
