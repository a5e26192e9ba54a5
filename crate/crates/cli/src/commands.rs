use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use elc::checkpoint;
use elc::config::RunConfig;
use elc::files::atomic_write;
use elc::gradcheck::{self, GradcheckOptions};
use elc::impact::run_impact_experiment;
use elc::netpbm::{load_manifest, write_pairs};
use elc::seg::{evaluate, train_with, EpochMetrics, EvalReport, SegModel};
use elc::tensor::Rng;
use elc::Error;

use crate::{Cli, Command, EvalArgs, GradcheckArgs, ImpactArgs, SynthArgs, TrainArgs};

type Result<T> = elc::Result<T>;

const VERIFICATION_FAILED: u8 = 3;

/// 1 usage/config, 2 data (including corrupt checkpoints).
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. } | Error::Label { .. } | Error::Integrity(_) | Error::Io(_) => 2,
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.impact.seed = seed;
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Impact(a) => impact(cfg, a),
        Command::Gradcheck(a) => gradcheck(cli.seed.unwrap_or(0), a),
        Command::Synth(a) => synth(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
    }
}

/// Parses `s=20,k=1` (either key may be omitted).
fn parse_elc(spec: &str) -> Result<(Option<usize>, Option<usize>)> {
    let (mut s, mut k) = (None, None);
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("--elc: expected s=<stride>,k=<scale>, got `{part}`"));
        let (key, value) = part.split_once('=').ok_or_else(bad)?;
        let value: usize = value.trim().parse().map_err(|_| bad())?;
        match key.trim() {
            "s" => s = Some(value),
            "k" => k = Some(value),
            _ => return Err(bad()),
        }
    }
    Ok((s, k))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

fn impact(mut cfg: RunConfig, a: ImpactArgs) -> Result<u8> {
    let c = &mut cfg.impact;
    if let Some(f) = a.family {
        c.family = f;
    }
    if let Some(spec) = &a.elc {
        let (s, k) = parse_elc(spec)?;
        c.family = c.family.with_elc();
        c.stride = s.unwrap_or(c.stride);
        c.scale = k.unwrap_or(c.scale);
    }
    if let Some(t) = a.steps {
        c.steps = t;
    }
    if let Some(n) = a.trials {
        c.trials = n;
    }
    c.keep_trials |= a.keep_trials;
    let curve = run_impact_experiment(c)?;
    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    atomic_write(&a.out, &csv)?;
    atomic_write(&sidecar(&a.out), curve.metadata().as_bytes())?;
    println!(
        "{}: {} steps x {} trials -> {}",
        c.family,
        c.steps,
        c.trials,
        a.out.display()
    );
    Ok(0)
}

fn gradcheck(seed: u64, a: GradcheckArgs) -> Result<u8> {
    let opts = GradcheckOptions {
        seed,
        max_entries: a.max_entries,
        fault: a.inject_fault,
        ..Default::default()
    };
    let report = gradcheck::run(a.scope, &opts)?;
    print!("{report}");
    if let Some(p) = &a.csv {
        atomic_write(p, report.to_csv().as_bytes())?;
    }
    let failed = report.failures().count();
    println!(
        "{} tensors checked, {failed} failed, max relative error {:.2e}",
        report.rows.len(),
        report.max_rel_error()
    );
    Ok(if failed == 0 { 0 } else { VERIFICATION_FAILED })
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<u8> {
    let s = &mut cfg.synth;
    if let Some(k) = a.kind {
        s.kind = k;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { s.$f = v; })* };
    }
    set!(samples, height, width, distance, num_classes, noise);
    let data = s.generate()?;
    write_pairs(&a.out, &data)?;
    println!("{} samples -> {}", data.len(), a.out.join("manifest.tsv").display());
    Ok(0)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Global {}%  Class {}%  ({} pixels)", pct(r.global), pct(r.class_average), r.pixels());
    for (c, acc) in r.per_class.iter().enumerate() {
        match acc {
            Some(a) => {
                let _ = writeln!(s, "  class {c}: {}%", pct(*a));
            }
            None => {
                let _ = writeln!(s, "  class {c}: no pixels");
            }
        }
    }
    s
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<u8> {
    if let Some(p) = a.data.train_manifest {
        cfg.data.train_manifest = Some(p);
    }
    if let Some(p) = a.data.test_manifest {
        cfg.data.test_manifest = Some(p);
    }
    let t = &mut cfg.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(lr) = a.lr {
        t.base_lr = lr;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    t.median_balancing |= a.median_balancing;
    cfg.validate_seg()?;
    let (train_set, test_set) = cfg.datasets()?;

    std::fs::create_dir_all(&a.out)?;
    atomic_write(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let mut model = SegModel::new(cfg.model.clone(), &mut Rng::new(cfg.train.seed))?;
    println!(
        "model: {} parameters; {} training / {} held-out samples",
        model.param_count(),
        train_set.len(),
        test_set.len()
    );

    let mut csv = format!("{}\n", EpochMetrics::CSV_HEADER);
    train_with(&mut model, &train_set, &test_set, &cfg.train, |m, snapshot| {
        let _ = writeln!(csv, "{}", m.csv_row());
        atomic_write(&a.out.join("metrics.csv"), csv.as_bytes())?;
        if a.epoch_checkpoints {
            let path = a.out.join(format!("epoch-{:03}.ckpt", m.epoch));
            checkpoint::save(&path, snapshot, &cfg.train)?;
        }
        let scores = match &m.report {
            Some(r) => format!("  Global {}%  Class {}%", pct(r.global), pct(r.class_average)),
            None => String::new(),
        };
        println!("epoch {:>3}  loss {:.4}  lr {:.3e}{scores}", m.epoch, m.loss, m.lr);
        Ok(())
    })?;
    let path = a.out.join("final.ckpt");
    checkpoint::save(&path, &model, &cfg.train)?;
    println!("saved {}", path.display());
    Ok(0)
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<u8> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let n = ckpt.model.config().num_classes;
    let data = match &a.manifest {
        Some(m) => load_manifest(m, n)?,
        None => {
            let mut c = cfg;
            c.model = ckpt.model.config().clone();
            c.validate_seg()?;
            c.datasets()?.1
        }
    };
    let report = evaluate(&ckpt.model, &data)?;
    print!("{}", report_text(&report));
    Ok(0)
}
