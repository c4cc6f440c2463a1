use std::path::PathBuf;

use admissions_core::demand::verify_equilibrium;
use admissions_core::discrete::{
    blocking_pairs, da_seed_sweep, decentralized_choice, respects_capacities, sample_students,
    scaled_capacities, school_proposing_da, student_proposing_da,
};
use admissions_core::ingest::{
    build_observation, read_observation_csv, read_records, write_observation_csv, ObservationFile,
    PercentileTable,
};
use admissions_core::inverse::{
    demand_curve, invert_auto, invert_recursion, invert_rootfind, linear_target_cutoff,
    target_cutoff, uniform_grid, write_estimates_csv, PreferabilityEstimate,
};
use admissions_core::statics::{jacobian_set, unconstrained_jacobians, write_matrix_csv};
use admissions_core::tatonnement::{da_tatonnement, simultaneous_tatonnement, TatonnementConfig};
use admissions_core::{equilibrium, Error, Execution, Result};
use serde::Serialize;

use crate::files::{open, read_market, Outputs};
use crate::{
    CurveArgs, IngestArgs, InvertArgs, IterateArgs, IterateMode, Method, SimulateArgs, SolveArgs,
    StaticsArgs,
};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn solve(args: &SolveArgs) -> Result<Vec<PathBuf>> {
    let market = read_market(&args.market.market, args.market.delta)?;
    let m = &market.params;
    let sol = equilibrium::solve(m);
    let cert = verify_equilibrium(m, sol.cutoffs(), args.tol)?;
    let ratio = m.competitiveness();

    let mut out = Outputs::default();
    out.csv("equilibrium.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["school", "gamma", "q", "ratio", "p_star", "D_star"])?;
        for c in 0..m.n_schools() {
            w.write_record([
                market.names[c].clone(),
                m.gamma()[c].to_string(),
                m.capacity()[c].to_string(),
                ratio[c].to_string(),
                sol.cutoffs()[c].to_string(),
                sol.demand.demand[c].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json("certificate.json", &cert)?;
    if !cert.is_equilibrium() {
        return Err(Error::Numeric(format!(
            "equilibrium certificate fails: max violation {:e}",
            cert.max_violation()
        )));
    }
    out.commit(&args.out.out)
}

#[derive(Serialize)]
struct IterateSummary {
    mode: &'static str,
    evaluations: usize,
    converged: bool,
    final_cutoffs: Vec<f64>,
    equilibrium: Vec<f64>,
    max_distance: f64,
}

fn broadcast(values: &[f64], n: usize) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        k if k == n => Ok(values.to_vec()),
        k => Err(Error::Dimension { expected: n, got: k }),
    }
}

pub fn iterate(args: &IterateArgs) -> Result<Vec<PathBuf>> {
    let market = read_market(&args.market.market, args.market.delta)?;
    let m = &market.params;
    let p0 = broadcast(&args.p0, m.n_schools())?;
    let (traj, mode) = match args.mode {
        IterateMode::Simultaneous => {
            let cfg = TatonnementConfig::new(args.alpha, args.beta, args.epsilon, args.max_iters, p0);
            (simultaneous_tatonnement(m, &cfg)?, "simultaneous")
        }
        IterateMode::Da => (da_tatonnement(m, &p0, args.max_iters)?, "da"),
    };
    let p_star = equilibrium::solve(m).cutoffs().to_vec();
    let summary = IterateSummary {
        mode,
        evaluations: traj.len(),
        converged: traj.converged,
        max_distance: max_abs_diff(&traj.final_cutoffs, &p_star),
        final_cutoffs: traj.final_cutoffs.clone(),
        equilibrium: p_star,
    };

    let mut out = Outputs::default();
    out.csv("trajectory.csv", |buf| traj.write_csv(buf))?;
    out.json("iterate_summary.json", &summary)?;
    out.commit(&args.out.out)
}

#[derive(Serialize)]
struct AuditRecord {
    n_students: usize,
    seed: u64,
    student_proposing_blocking_pairs: usize,
    school_proposing_blocking_pairs: usize,
    capacities_respected: bool,
}

pub fn simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let market = read_market(&args.market.market, args.market.delta)?;
    let m = &market.params;
    let p_star = equilibrium::solve(m).cutoffs().to_vec();
    let mut out = Outputs::default();
    let mut audit = Vec::new();
    let mut summary = Vec::new();

    for &n in &args.n_students {
        let sample = sample_students(m, n, args.seed)?;
        let caps = scaled_capacities(m.capacity(), n);
        let sp = student_proposing_da(&sample, &caps)?;
        let hp = school_proposing_da(&sample, &caps)?;
        let choice = decentralized_choice(&sample, &p_star)?;
        let record = AuditRecord {
            n_students: n,
            seed: args.seed,
            student_proposing_blocking_pairs: blocking_pairs(&sample, &caps, &sp).len(),
            school_proposing_blocking_pairs: blocking_pairs(&sample, &caps, &hp).len(),
            capacities_respected: respects_capacities(&sp, &caps) && respects_capacities(&hp, &caps),
        };
        if record.student_proposing_blocking_pairs + record.school_proposing_blocking_pairs > 0
            || !record.capacities_respected
        {
            return Err(Error::Numeric(format!(
                "stability audit failed at n = {n}, seed = {}",
                args.seed
            )));
        }
        audit.push(record);
        for c in 0..m.n_schools() {
            summary.push([
                n.to_string(),
                market.names[c].clone(),
                p_star[c].to_string(),
                sp.implied_cutoffs[c].to_string(),
                hp.implied_cutoffs[c].to_string(),
                caps[c].to_string(),
                sp.fill_counts[c].to_string(),
                choice.fill_counts[c].to_string(),
            ]);
        }
        out.csv(&format!("da_n{n}.csv"), |buf| sample.write_csv(Some(&sp), buf))?;
        out.csv(&format!("choice_n{n}.csv"), |buf| sample.write_csv(Some(&choice), buf))?;
    }

    out.csv("simulate_summary.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "n_students",
            "school",
            "p_star",
            "student_proposing_cutoff",
            "school_proposing_cutoff",
            "seats",
            "da_fill",
            "choice_fill",
        ])?;
        for row in &summary {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json("audit.json", &audit)?;

    if args.sweep > 0 {
        let exec = if args.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        let seeds: Vec<u64> = (0..args.sweep as u64).map(|k| args.seed + k).collect();
        let mut rows = Vec::new();
        for &n in &args.n_students {
            for run in da_seed_sweep(m, n, &seeds, false, exec)? {
                for c in 0..m.n_schools() {
                    rows.push([
                        n.to_string(),
                        run.seed.to_string(),
                        market.names[c].clone(),
                        run.student_proposing.implied_cutoffs[c].to_string(),
                        run.school_proposing.implied_cutoffs[c].to_string(),
                    ]);
                }
            }
        }
        out.csv("sweep.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record([
                "n_students",
                "seed",
                "school",
                "student_proposing_cutoff",
                "school_proposing_cutoff",
            ])?;
            for row in &rows {
                w.write_record(row)?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    out.commit(&args.out.out)
}

pub fn statics(args: &StaticsArgs) -> Result<Vec<PathBuf>> {
    let market = read_market(&args.market.market, args.market.delta)?;
    let m = &market.params;
    let set = match &args.at {
        None => jacobian_set(m, equilibrium::solve(m).cutoffs())?,
        Some(p) => {
            let mut set = jacobian_set(m, equilibrium::solve(m).cutoffs())?;
            set.unconstrained = unconstrained_jacobians(m, &broadcast(p, m.n_schools())?)?;
            set
        }
    };
    if let Some((a, b)) = set.unconstrained.tie {
        log::warn!(
            "schools {} and {} are tied; demand is not differentiable there",
            market.names[a],
            market.names[b]
        );
    }
    let u = &set.unconstrained;
    let e = &set.equilibrium;
    let mut out = Outputs::default();
    for (name, matrix) in [
        ("cutoff_demand", &u.cutoff_demand),
        ("cutoff_appeal", &u.cutoff_appeal),
        ("weight_demand", &u.weight_demand),
        ("weight_appeal", &u.weight_appeal),
        ("eq_weight_cutoff", &e.weight_cutoff),
        ("eq_weight_demand", &e.weight_demand),
        ("eq_capacity_cutoff", &e.capacity_cutoff),
        ("eq_capacity_demand", &e.capacity_demand),
    ] {
        out.csv(&format!("jac_{name}.csv"), |buf| {
            write_matrix_csv(matrix, &market.names, buf)
        })?;
    }
    out.commit(&args.out.out)
}

fn run_inversion(file: &ObservationFile, method: Method) -> Result<PreferabilityEstimate> {
    match method {
        Method::Recursion => invert_recursion(&file.observation),
        Method::Rootfind => invert_rootfind(&file.observation),
        Method::Auto => invert_auto(&file.observation),
    }
}

#[derive(Serialize)]
struct InversionSummary<'a> {
    method: String,
    residual: f64,
    converged: bool,
    iterations: usize,
    population: f64,
    schools: Vec<(&'a str, f64)>,
}

pub fn invert(args: &InvertArgs) -> Result<Vec<PathBuf>> {
    let file = read_observation_csv(open(&args.obs)?)?;
    let est = run_inversion(&file, args.method)?;
    if !est.converged && !args.allow_unconverged {
        return Err(Error::Numeric(format!(
            "root-finder did not converge; best residual {:e}",
            est.residual
        )));
    }
    let population = args.population.or(file.population()).unwrap_or(1.0);
    let obs = &file.observation;
    let summary = InversionSummary {
        method: est.method.to_string(),
        residual: est.residual,
        converged: est.converged,
        iterations: est.iterations,
        population,
        schools: obs
            .labels()
            .iter()
            .map(String::as_str)
            .zip(est.gamma.iter().copied())
            .collect(),
    };
    let mut out = Outputs::default();
    out.csv("estimates.csv", |buf| {
        write_estimates_csv(obs, &est, population, Some(&file.reported_yield), buf)
    })?;
    out.json("inversion.json", &summary)?;
    out.commit(&args.out.out)
}

pub fn ingest(args: &IngestArgs) -> Result<Vec<PathBuf>> {
    let records = read_records(open(&args.colleges)?)?;
    let table = PercentileTable::from_reader(open(&args.tables)?)?;
    let outcome = build_observation(&records, &table)?;
    let mut out = Outputs::default();
    out.csv("observation.csv", |buf| write_observation_csv(&outcome, buf))?;
    out.json("ingest_meta.json", &outcome.report)?;
    out.commit(&args.out.out)
}

#[derive(Serialize)]
struct CurveSummary {
    school: String,
    gamma: f64,
    cutoff: f64,
    demand_count: f64,
    population: f64,
    target_count: Option<f64>,
    model_cutoff: Option<f64>,
    linear_cutoff: Option<f64>,
}

pub fn curve(args: &CurveArgs) -> Result<Vec<PathBuf>> {
    let file = read_observation_csv(open(&args.obs)?)?;
    let obs = &file.observation;
    let c = obs
        .labels()
        .iter()
        .position(|l| *l == args.school)
        .ok_or_else(|| Error::Config(format!("no school named {:?}", args.school)))?;
    let est = run_inversion(&file, args.method)?;
    let population = args.population.or(file.population()).unwrap_or(1.0);
    let (p_obs, d_obs) = (obs.cutoffs()[c], obs.demand()[c]);

    let grid = uniform_grid(args.lo, args.hi, args.points);
    let points = demand_curve(&est.gamma, obs.cutoffs(), c, &grid)?;
    let (model_cutoff, linear_cutoff) = match args.target {
        Some(t) => (
            Some(target_cutoff(&est.gamma, obs.cutoffs(), c, t / population)?),
            Some(linear_target_cutoff(p_obs, d_obs, t / population)),
        ),
        None => (None, None),
    };
    let summary = CurveSummary {
        school: args.school.clone(),
        gamma: est.gamma[c],
        cutoff: p_obs,
        demand_count: d_obs * population,
        population,
        target_count: args.target,
        model_cutoff,
        linear_cutoff,
    };

    let mut out = Outputs::default();
    out.csv("curve.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["cutoff", "demand_fraction", "demand_count", "linear_count"])?;
        for (x, d) in &points {
            // line through the observed point and (1, 0)
            let linear = (d_obs * (1.0 - x) / (1.0 - p_obs)).max(0.0);
            w.write_record([
                x.to_string(),
                d.to_string(),
                (d * population).to_string(),
                (linear * population).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json("curve_summary.json", &summary)?;
    out.commit(&args.out.out)
}
