use std::path::{Path, PathBuf};
use std::process::ExitCode;

use num_complex::Complex64;
use serde::Serialize;
use simdoa::analysis::{mse_bound, BoundInputs};
use simdoa::config::{parse_config, RunConfig};
use simdoa::estimator::{angular_spectrum, collect_snapshots, draw_noise, estimate as estimate_doa, source_steering};
use simdoa::estimator::{EnergyMap, ProtocolConfig, Symbols};
use simdoa::experiments::{
    ablation_sweep, item_rng, physical_snr, receiver_study, run_digital_monte_carlo, run_monte_carlo, McPoint,
};
use simdoa::geometry::{build_propagation_matrices, dft_matrix, SimGeometry};
use simdoa::io::{read_stack_csv, write_history_csv, write_matrix_csv, write_stack_csv, write_table};
use simdoa::manifest::RunManifest;
use simdoa::trainer::{gradient_check_suite, train};
use simdoa::wave::{forward_response, SimResponse};
use simdoa::{ConfigErrorKind, Error, Result};

/// 2 for configuration and usage problems, 1 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

const SNR_NOTE: &str = "effective SNR gamma maps to rho = gamma * |beta|^2, so sqrt(rho) G ~ sqrt(gamma) F";

struct Run {
    cfg: RunConfig,
    geom: SimGeometry,
    proto: ProtocolConfig,
    manifest: RunManifest,
    out: PathBuf,
    command: &'static str,
}

impl Run {
    fn start(command: &'static str, config: &Path, out: &Path) -> Result<Self> {
        let cfg = parse_config(config)?;
        Self::from_config(command, cfg, out)
    }

    fn from_config(command: &'static str, cfg: RunConfig, out: &Path) -> Result<Self> {
        let geom = cfg.geometry.to_geometry()?;
        let proto = cfg.protocol.to_protocol()?;
        let manifest = RunManifest::new(command, &cfg, &geom)?;
        std::fs::create_dir_all(out)?;
        Ok(Self {
            cfg,
            geom,
            proto,
            manifest,
            out: out.to_path_buf(),
            command,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_output(path)
    }

    fn finish(mut self) -> Result<()> {
        let p = self.path(&format!("{}.manifest.json", self.command));
        self.manifest.finish(&p)?;
        eprintln!("wrote {}", p.display());
        Ok(())
    }

    /// Exact DFT, a stored stack, or a fresh training run, in that order of
    /// precedence.
    fn response(&mut self) -> Result<SimResponse> {
        let (nx, ny) = (self.geom.nx, self.geom.ny);
        let f = dft_matrix(nx, ny).matrix;
        if self.cfg.response.ideal {
            self.manifest.notes.push("response: exact DFT".into());
            return Ok(SimResponse {
                g: f,
                beta: Complex64::new(1.0, 0.0),
            });
        }
        let props = build_propagation_matrices(&self.geom)?;
        if let Some(p) = self.cfg.response.stack.clone() {
            let path = self.cfg.resolve(&p);
            let stack = read_stack_csv(&path)?;
            if stack.num_layers() != props.layers() || stack.atoms() != props.m() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!(
                        "stack has {} layers of {} atoms, geometry needs {} of {}",
                        stack.num_layers(),
                        stack.atoms(),
                        props.layers(),
                        props.m()
                    ),
                });
            }
            self.manifest.notes.push(format!("response: stack {}", path.display()));
            return SimResponse::fit(&props, &stack, f.view());
        }
        let report = train(&props, f.view(), &self.cfg.train)?;
        eprintln!("trained in-process: {:.2} dB", report.loss.db);
        self.manifest.seeds.push(report.seed);
        self.manifest
            .notes
            .push(format!("response: trained in-process, {:.2} dB", report.loss.db));
        Ok(SimResponse {
            g: forward_response(&props, &report.stack)?,
            beta: report.beta,
        })
    }

    /// Energy map of the configured single source.
    fn source_map(&mut self, resp: &SimResponse) -> Result<((f64, f64), EnergyMap)> {
        let psi = self.cfg.source.electrical(&self.geom)?;
        let [re, im] = self.cfg.source.symbol.unwrap_or([1.0, 0.0]);
        let sv = source_steering(psi.0, psi.1, self.geom.nx, self.geom.ny);
        let (rho, noise) = match self.cfg.source.snr_db {
            Some(snr) => {
                let mut rng = item_rng(self.cfg.source.seed, 0);
                self.manifest.seeds.push(self.cfg.source.seed);
                self.manifest.notes.push(SNR_NOTE.into());
                (
                    physical_snr(snr, resp.beta),
                    Some(draw_noise(resp.g.nrows(), self.proto.snapshots(), &mut rng)),
                )
            }
            None => (physical_snr(0.0, resp.beta), None),
        };
        let map = collect_snapshots(
            resp.g.view(),
            &sv,
            &Symbols::Constant(Complex64::new(re, im)),
            rho,
            self.geom.nx,
            self.geom.ny,
            &self.proto,
            noise.as_ref().map(|n| n.view()),
        )?;
        Ok((psi, map))
    }
}

pub fn fit(config: &Path, out: &Path) -> Result<ExitCode> {
    let mut run = Run::start("fit", config, out)?;
    let props = build_propagation_matrices(&run.geom)?;
    let f = dft_matrix(run.geom.nx, run.geom.ny).matrix;
    let report = train(&props, f.view(), &run.cfg.train)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    run.manifest.seeds.push(report.seed);
    run.manifest.notes.push(format!(
        "best iterate {} of {}, beta = {} {:+}i",
        report.best_iteration, report.iterations, report.beta.re, report.beta.im
    ));
    let stack = run.path("stack.csv");
    write_stack_csv(&stack, &report.stack)?;
    run.record(&stack)?;
    let history = run.path("history.csv");
    write_history_csv(&history, &report.history)?;
    run.record(&history)?;
    let response = run.path("response.csv");
    write_matrix_csv(&response, forward_response(&props, &report.stack)?.view())?;
    run.record(&response)?;
    println!(
        "normalized loss {:.2} dB (best iteration {}, seed {})",
        report.loss.db, report.best_iteration, report.seed
    );
    run.finish()?;
    Ok(ExitCode::SUCCESS)
}

pub fn spectrum(config: &Path, out: &Path) -> Result<ExitCode> {
    let mut run = Run::start("spectrum", config, out)?;
    let resp = run.response()?;
    let (_, map) = run.source_map(&resp)?;
    let points = angular_spectrum(&map, &run.proto, run.geom.nx, run.geom.ny)?;
    let path = run.path("spectrum.csv");
    write_table(&path, &points)?;
    run.record(&path)?;
    let peak = estimate_doa(&map, &run.geom, &run.proto)?;
    println!("peak at psi_x = {}, psi_y = {}", peak.psi_x, peak.psi_y);
    run.finish()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EstimateOutput {
    true_psi_x: f64,
    true_psi_y: f64,
    estimate: simdoa::estimator::DoaEstimate,
}

pub fn estimate(config: &Path, out: &Path) -> Result<ExitCode> {
    let mut run = Run::start("estimate", config, out)?;
    let resp = run.response()?;
    let (psi, map) = run.source_map(&resp)?;
    let est = estimate_doa(&map, &run.geom, &run.proto)?;
    let doc = EstimateOutput {
        true_psi_x: psi.0,
        true_psi_y: psi.1,
        estimate: est,
    };
    let text = serde_json::to_string_pretty(&doc)?;
    let path = run.path("estimate.json");
    std::fs::write(&path, &text)?;
    run.record(&path)?;
    println!("{text}");
    run.finish()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BoundRow {
    snr_db: f64,
    rho: f64,
    bound_x: f64,
    bound_y: f64,
}

pub fn bound(config: &Path, out: &Path) -> Result<ExitCode> {
    let mut run = Run::start("bound", config, out)?;
    let resp = run.response()?;
    let psi = run.cfg.source.electrical(&run.geom)?;
    let [re, im] = run.cfg.source.symbol.unwrap_or([1.0, 0.0]);
    let snrs = match run.cfg.source.snr_db {
        Some(s) => vec![s],
        None => run.cfg.montecarlo.snr_db.clone(),
    };
    let mut rows = Vec::new();
    for snr in snrs {
        let rho = physical_snr(snr, resp.beta);
        let (bx, by) = mse_bound(
            &BoundInputs {
                g: resp.g.view(),
                proto: run.proto,
                nx: run.geom.nx,
                ny: run.geom.ny,
                psi,
                rho,
                s: Complex64::new(re, im),
            },
            run.cfg.montecarlo.bound_form,
        )?;
        println!("{snr:>6.1} dB  bound_x {bx:.4e}  bound_y {by:.4e}");
        rows.push(BoundRow {
            snr_db: snr,
            rho,
            bound_x: bx,
            bound_y: by,
        });
    }
    run.manifest.notes.push(SNR_NOTE.into());
    let path = run.path("bound.csv");
    write_table(&path, &rows)?;
    run.record(&path)?;
    run.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn print_points(label: &str, pts: &[McPoint]) {
    println!("{label}");
    for p in pts {
        let bound = p.bound().map_or("-".to_string(), |b| format!("{b:.4e}"));
        let flag = if p.low_trials { " (few trials)" } else { "" };
        println!(
            "  {:>6.1} dB  mse {:.4e} +/- {:.1e}  bound {bound}{flag}",
            p.snr_db,
            p.mse(),
            p.se()
        );
    }
}

pub fn montecarlo(config: &Path, out: &Path) -> Result<ExitCode> {
    let mut run = Run::start("montecarlo", config, out)?;
    let mc = run.cfg.montecarlo.to_config(run.proto)?;
    let resp = run.response()?;
    run.manifest.seeds.push(mc.seed);
    run.manifest.notes.push(SNR_NOTE.into());
    run.manifest
        .notes
        .push(format!("source model {:?}, symbol model {:?} held over all snapshots", mc.source, mc.symbol));
    let pts = run_monte_carlo(&resp, &run.geom, &mc)?;
    print_points("SIM", &pts);
    let path = run.path("montecarlo.csv");
    write_table(&path, &pts)?;
    run.record(&path)?;
    if run.cfg.montecarlo.digital {
        let dig = run_digital_monte_carlo(&run.geom, &mc)?;
        print_points("digital DFT", &dig);
        let path = run.path("digital.csv");
        write_table(&path, &dig)?;
        run.record(&path)?;
    }
    run.finish()?;
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(config: &Path, out: &Path) -> Result<ExitCode> {
    let mut run = Run::start("sweep", config, out)?;
    if run.cfg.sweep.is_none() && run.cfg.receiver_study.is_none() {
        return Err(Error::Config {
            path: config.display().to_string(),
            kind: ConfigErrorKind::Invariant,
            message: "sweep needs a [sweep] or [receiver_study] section".into(),
        });
    }
    if let Some(spec) = run.cfg.sweep.clone() {
        run.manifest.seeds.push(spec.train.seed);
        let cells = ablation_sweep(&spec)?;
        for c in &cells {
            println!(
                "T={}λ L={} M={} s={}λ  {:?}  mean {:.2} dB  [{:.2}, {:.2}] {}",
                c.thickness_lambda, c.layers, c.atoms, c.spacing_lambda, c.status, c.mean_db, c.min_db, c.max_db, c.note
            );
        }
        let path = run.path("sweep.csv");
        write_table(&path, &cells)?;
        run.record(&path)?;
    }
    if let Some(spec) = run.cfg.receiver_study.clone() {
        run.manifest.seeds.push(spec.train.seed);
        let pts = receiver_study(&spec)?;
        for p in &pts {
            println!(
                "L={} u={}λ rotation={} rad  mean {:.2} dB  [{:.2}, {:.2}]",
                p.layers, p.receiver_spacing_lambda, p.rotation, p.mean_db, p.min_db, p.max_db
            );
        }
        let path = run.path("receivers.csv");
        write_table(&path, &pts)?;
        run.record(&path)?;
    }
    run.finish()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradRow {
    nx: usize,
    ny: usize,
    atoms: usize,
    layers: usize,
    max_rel_error: f64,
    cosine_similarity: f64,
}

pub fn gradcheck(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    let gc = cfg.gradcheck.clone();
    let mut run = Run::from_config("gradcheck", cfg, out)?;
    run.manifest.seeds.push(gc.seed);
    let cases = gradient_check_suite(gc.instances, gc.seed, gc.step)?;
    let rows: Vec<GradRow> = cases
        .iter()
        .map(|c| GradRow {
            nx: c.nx,
            ny: c.ny,
            atoms: c.atoms,
            layers: c.layers,
            max_rel_error: c.check.max_rel_error,
            cosine_similarity: c.check.cosine_similarity,
        })
        .collect();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0f64, f64::max);
    let path = run.path("gradcheck.csv");
    write_table(&path, &rows)?;
    run.record(&path)?;
    run.finish()?;
    println!("max relative error {worst:.3e} over {} instances", rows.len());
    if worst <= gc.tolerance {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: tolerance {:.1e}", gc.tolerance);
        Ok(ExitCode::from(1))
    }
}
