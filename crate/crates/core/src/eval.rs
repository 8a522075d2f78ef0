//! Seeded evaluation grid, success-rate aggregation and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use latentdrive_autodiff::{derive_seed, seeded, SeededRng};
use latentdrive_sim::{Action, Cause, Observation, RouteId, RouteSpec, Scenario, SimConfig, Simulator, TownId};
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::{Error, Result};

/// Anything that maps observations to action indices, one episode at a time.
pub trait Controller: Sync {
    type Memory;
    fn begin(&self) -> Self::Memory;
    fn act(&self, memory: &mut Self::Memory, obs: &Observation, rng: &mut SeededRng) -> Result<usize>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub train_seed: u64,
    pub town: TownId,
    pub route: RouteId,
    pub method: String,
    pub density: u32,
    pub tm_seed: u64,
    pub spawn_seed: u64,
    pub episode: usize,
    pub success: bool,
    pub cause: Cause,
    pub steps: usize,
    /// Fraction of route waypoints reached.
    pub progress: f64,
    /// Set when the simulator faulted; such records are excluded.
    pub invalid: Option<String>,
}

impl EvalRecord {
    pub fn is_valid(&self) -> bool {
        self.invalid.is_none()
    }
}

/// Who is evaluated, under what grid.
#[derive(Clone, Debug)]
pub struct GridSpec<'a> {
    pub eval: &'a EvalConfig,
    pub sim: &'a SimConfig,
    pub method: &'a str,
    pub train_seed: u64,
}

struct Job {
    town: TownId,
    route: RouteId,
    density: u32,
    episode: usize,
}

fn town_index(t: TownId) -> u64 {
    TownId::ALL.iter().position(|&x| x == t).unwrap_or(0) as u64
}

fn route_index(r: RouteId) -> u64 {
    RouteId::ALL.iter().position(|&x| x == r).unwrap_or(0) as u64
}

impl GridSpec<'_> {
    fn jobs(&self) -> Vec<Job> {
        let e = self.eval;
        let mut towns = e.towns.clone();
        towns.sort();
        towns.dedup();
        let mut routes = e.routes.clone();
        routes.sort();
        routes.dedup();
        let mut densities = e.densities.clone();
        densities.sort();
        densities.dedup();
        let mut out = Vec::new();
        for &town in &towns {
            for &route in &routes {
                for &density in &densities {
                    for episode in 0..e.episodes {
                        out.push(Job { town, route, density, episode });
                    }
                }
            }
        }
        out
    }

    pub fn record_count(&self) -> usize {
        self.jobs().len()
    }
}

fn run_episode<C: Controller>(ctrl: &C, grid: &GridSpec, sim: &mut Simulator, job: &Job) -> Result<EvalRecord> {
    let e = grid.eval;
    let tm_seed = e.tm_seeds[job.episode % e.tm_seeds.len()];
    let spawn_seed = e.spawn_seeds[job.episode % e.spawn_seeds.len()];
    let route = RouteSpec::builtin(job.town, job.route);
    let mut record = EvalRecord {
        train_seed: grid.train_seed,
        town: job.town,
        route: job.route,
        method: grid.method.to_string(),
        density: job.density,
        tm_seed,
        spawn_seed,
        episode: job.episode,
        success: false,
        cause: Cause::None,
        steps: 0,
        progress: 0.0,
        invalid: None,
    };
    let scenario = Scenario { town: job.town, route: Some(route.clone()), density: job.density, tm_seed, spawn_seed };
    let mut rng =
        seeded(derive_seed(e.seed, &[town_index(job.town), route_index(job.route), u64::from(job.density), job.episode as u64]));
    let mut obs = match sim.reset(&scenario) {
        Ok(o) => o,
        Err(err) => {
            record.invalid = Some(err.to_string());
            return Ok(record);
        }
    };
    let mut memory = ctrl.begin();
    let limit = grid.sim.max_steps + 1;
    let last = route.waypoints.len().saturating_sub(1).max(1);
    loop {
        let a = ctrl.act(&mut memory, &obs, &mut rng)?;
        let step = match Action::new(a).map_err(Error::from).and_then(|a| Ok(sim.step(a)?)) {
            Ok(s) => s,
            Err(err) => {
                record.invalid = Some(err.to_string());
                return Ok(record);
            }
        };
        record.steps += 1;
        record.progress = step.waypoint_index as f64 / last as f64;
        if step.terminal {
            record.cause = step.cause;
            record.success = step.cause == Cause::Destination;
            return Ok(record);
        }
        if record.steps > limit {
            record.invalid = Some(format!("no terminal step after {limit} steps"));
            return Ok(record);
        }
        obs = step.observation;
    }
}

/// Runs every cell of the grid. Episodes are independent, so workers only
/// change wall-clock time; results come back in grid order.
pub fn run_grid<C: Controller>(ctrl: &C, grid: &GridSpec, workers: usize) -> Result<Vec<EvalRecord>> {
    grid.eval.validate_seeds()?;
    let jobs = grid.jobs();
    let workers = workers.clamp(1, jobs.len().max(1));
    let results: Vec<Vec<(usize, Result<EvalRecord>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    let mut sim = match Simulator::new(grid.sim.clone()) {
                        Ok(s) => s,
                        Err(e) => return vec![(w, Err(Error::from(e)))],
                    };
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, job)| (i, run_episode(ctrl, grid, &mut sim, job)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut merged: Vec<(usize, Result<EvalRecord>)> = results.into_iter().flatten().collect();
    merged.sort_by_key(|(i, _)| *i);
    merged.into_iter().map(|(_, r)| r).collect()
}

impl EvalConfig {
    fn validate_seeds(&self) -> Result<()> {
        if self.tm_seeds.is_empty() || self.spawn_seeds.is_empty() {
            return Err(Error::Config("evaluation seed sets must not be empty".into()));
        }
        Ok(())
    }
}

/// Success rate per `(town, route, method)`: uniform over densities within
/// each training seed, then averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub town: TownId,
    pub route: RouteId,
    pub method: String,
    pub sr: f64,
    pub fr: f64,
    /// Valid episodes behind the row.
    pub n: usize,
    /// Per-density SR, averaged over seeds.
    pub density_sr: BTreeMap<u32, f64>,
    /// Density-averaged SR of each complete training seed.
    pub seed_sr: BTreeMap<u64, f64>,
    pub seed_std: f64,
}

/// Cross-town comparison of route-averaged SR for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub method: String,
    pub town_a: Option<f64>,
    pub town_b: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
    /// Cells with no valid episode, never imputed.
    pub missing: Vec<String>,
    /// Invalid records with their reasons.
    pub excluded: Vec<String>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

type CellKey = (TownId, RouteId, String);

pub fn aggregate(records: &[EvalRecord]) -> Aggregate {
    // cell -> seed -> density -> (successes, valid episodes)
    let mut cells: BTreeMap<CellKey, BTreeMap<u64, BTreeMap<u32, (usize, usize)>>> = BTreeMap::new();
    let mut densities: BTreeMap<CellKey, BTreeSet<u32>> = BTreeMap::new();
    let mut out = Aggregate::default();
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.town, a.route, &a.method, a.train_seed, a.density, a.episode, &a.invalid).cmp(&(
            b.town,
            b.route,
            &b.method,
            b.train_seed,
            b.density,
            b.episode,
            &b.invalid,
        ))
    });
    for r in sorted {
        let key = (r.town, r.route, r.method.clone());
        densities.entry(key.clone()).or_default().insert(r.density);
        let slot = cells.entry(key).or_default().entry(r.train_seed).or_default().entry(r.density).or_default();
        match &r.invalid {
            Some(reason) => out.excluded.push(format!(
                "{} {} {} seed={} density={} episode={}: {reason}",
                r.town,
                r.route.name(),
                r.method,
                r.train_seed,
                r.density,
                r.episode
            )),
            None => {
                slot.1 += 1;
                slot.0 += usize::from(r.success);
            }
        }
    }
    for (key, seeds) in cells {
        let all_densities = &densities[&key];
        let mut seed_sr = BTreeMap::new();
        let mut per_density: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut n = 0;
        for (seed, by_density) in &seeds {
            let mut complete = true;
            for d in all_densities {
                match by_density.get(d) {
                    Some(&(_, valid)) if valid > 0 => {}
                    _ => {
                        complete = false;
                        out.missing.push(format!("{} {} {} seed={seed} density={d}", key.0, key.1.name(), key.2));
                    }
                }
            }
            if !complete {
                continue;
            }
            let srs: Vec<(u32, f64)> = by_density.iter().map(|(&d, &(s, v))| (d, 100.0 * s as f64 / v as f64)).collect();
            for &(d, sr) in &srs {
                per_density.entry(d).or_default().push(sr);
            }
            n += by_density.values().map(|&(_, v)| v).sum::<usize>();
            seed_sr.insert(*seed, mean(srs.iter().map(|&(_, s)| s)));
        }
        if seed_sr.is_empty() {
            continue;
        }
        let sr = mean(seed_sr.values().copied());
        let seed_std = if seed_sr.len() > 1 {
            let var = seed_sr.values().map(|s| (s - sr).powi(2)).sum::<f64>() / (seed_sr.len() - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        out.rows.push(AggregateRow {
            town: key.0,
            route: key.1,
            method: key.2,
            sr,
            fr: 100.0 - sr,
            n,
            density_sr: per_density.into_iter().map(|(d, v)| (d, mean(v))).collect(),
            seed_sr,
            seed_std,
        });
    }
    out
}

/// Route-averaged SR per town and the Town-A minus Town-B gap, per method.
pub fn gap_table(rows: &[AggregateRow]) -> Vec<GapRow> {
    let mut by_method: BTreeMap<&str, BTreeMap<TownId, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().entry(r.town).or_default().push(r.sr);
    }
    by_method
        .into_iter()
        .map(|(method, towns)| {
            let avg = |t: TownId| towns.get(&t).map(|v| mean(v.iter().copied()));
            let (a, b) = (avg(TownId::A), avg(TownId::B));
            GapRow { method: method.to_string(), town_a: a, town_b: b, gap: a.zip(b).map(|(a, b)| a - b) }
        })
        .collect()
}

/// What produced an artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!("config_hash={},seed={},stage={}", self.config_hash, self.seed, self.stage)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let body = line.trim().trim_start_matches('#').trim();
        let mut fields = BTreeMap::new();
        for part in body.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Format(format!("bad provenance field `{part}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Format(format!("provenance lacks `{k}`")));
        Ok(Self {
            config_hash: get("config_hash")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| Error::Format("provenance seed is not an integer".into()))?,
            stage: get("stage")?.to_string(),
        })
    }
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub town: TownId,
    pub route: RouteId,
    pub method: String,
    pub density_avg_sr: f64,
    pub fr: f64,
    pub n: usize,
}

impl From<&AggregateRow> for ResultRow {
    fn from(r: &AggregateRow) -> Self {
        Self { town: r.town, route: r.route, method: r.method.clone(), density_avg_sr: r.sr, fr: r.fr, n: r.n }
    }
}

fn csv_with_provenance<T: Serialize>(prov: &Provenance, items: &[T]) -> Result<Vec<u8>> {
    let mut buf = format!("# {}\n", prov.line()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for it in items {
            w.serialize(it)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

fn read_csv_with_provenance<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Provenance, Vec<T>)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if !first.starts_with('#') {
        return Err(Error::Format(format!("{} lacks a provenance line", path.display())));
    }
    let prov = Provenance::parse(&first)?;
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        rows.push(row?);
    }
    Ok((prov, rows))
}

fn check_method_names<'a>(methods: impl IntoIterator<Item = &'a str>) -> Result<()> {
    for m in methods {
        if m.is_empty() || m.contains([',', '"', '\n', '|']) {
            return Err(Error::Format(format!("method name `{m}` cannot be written to a table")));
        }
    }
    Ok(())
}

pub fn write_results_csv(path: &Path, rows: &[AggregateRow], prov: &Provenance) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no aggregate rows to write".into()));
    }
    check_method_names(rows.iter().map(|r| r.method.as_str()))?;
    let items: Vec<ResultRow> = rows.iter().map(ResultRow::from).collect();
    fs::write(path, csv_with_provenance(prov, &items)?)?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<(Provenance, Vec<ResultRow>)> {
    read_csv_with_provenance(path)
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord], prov: &Provenance) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no evaluation records to write".into()));
    }
    check_method_names(records.iter().map(|r| r.method.as_str()))?;
    fs::write(path, csv_with_provenance(prov, records)?)?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<(Provenance, Vec<EvalRecord>)> {
    read_csv_with_provenance(path)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_string(), |x| format!("{x:.1}"))
}

pub fn markdown(agg: &Aggregate, prov: &Provenance) -> Result<String> {
    if agg.rows.is_empty() {
        return Err(Error::InsufficientData("no aggregate rows to tabulate".into()));
    }
    let mut s = String::new();
    writeln!(s, "<!-- {} -->", prov.line()).unwrap();
    let methods: BTreeSet<&str> = agg.rows.iter().map(|r| r.method.as_str()).collect();
    let towns: BTreeSet<TownId> = agg.rows.iter().map(|r| r.town).collect();
    for town in towns {
        writeln!(s, "\n### {town}: success rate (%) per route\n").unwrap();
        write!(s, "| Route |").unwrap();
        for m in &methods {
            write!(s, " {m} SR | {m} FR |").unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "|---|{}", "---:|---:|".repeat(methods.len())).unwrap();
        let routes: BTreeSet<RouteId> = agg.rows.iter().filter(|r| r.town == town).map(|r| r.route).collect();
        for route in routes {
            write!(s, "| {} |", route.name()).unwrap();
            for m in &methods {
                let row = agg.rows.iter().find(|r| r.town == town && r.route == route && r.method == *m);
                write!(s, " {} | {} |", pct(row.map(|r| r.sr)), pct(row.map(|r| r.fr))).unwrap();
            }
            writeln!(s).unwrap();
        }
    }
    writeln!(s, "\n### Cross-town gap (route-averaged SR)\n").unwrap();
    writeln!(s, "| Method | Town-A | Town-B | Gap |").unwrap();
    writeln!(s, "|---|---:|---:|---:|").unwrap();
    for g in gap_table(&agg.rows) {
        writeln!(s, "| {} | {} | {} | {} |", g.method, pct(g.town_a), pct(g.town_b), pct(g.gap)).unwrap();
    }
    if !agg.missing.is_empty() {
        writeln!(s, "\nMissing cells:\n").unwrap();
        for m in &agg.missing {
            writeln!(s, "- {m}").unwrap();
        }
    }
    Ok(s)
}

/// Grouped bars: one group per route, one bar per method.
pub fn svg_bars(rows: &[AggregateRow], town: TownId, prov: &Provenance) -> Result<String> {
    let rows: Vec<&AggregateRow> = rows.iter().filter(|r| r.town == town).collect();
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("no rows for {town}")));
    }
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let routes: Vec<RouteId> = rows.iter().map(|r| r.route).collect::<BTreeSet<_>>().into_iter().collect();
    let (bar, gap, height, top, left) = (18.0, 24.0, 200.0, 30.0, 40.0);
    let group = bar * methods.len() as f64 + gap;
    let width = left + group * routes.len() as f64 + 20.0;
    let colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="10">"#,
        top + height + 60.0
    )
    .unwrap();
    writeln!(s, "<!-- {} -->", prov.line()).unwrap();
    writeln!(s, r#"<text x="{left}" y="16">{town} success rate (%)</text>"#).unwrap();
    writeln!(s, r##"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##, top + height, width - 10.0, top + height)
        .unwrap();
    for (gi, route) in routes.iter().enumerate() {
        let x0 = left + gi as f64 * group;
        for (mi, m) in methods.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.route == *route && r.method == *m) else { continue };
            let h = height * r.sr.clamp(0.0, 100.0) / 100.0;
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{}"><title>{m}: {:.1}</title></rect>"#,
                x0 + mi as f64 * bar,
                top + height - h,
                colors[mi % colors.len()],
                r.sr
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{x0:.1}" y="{}">{}</text>"#, top + height + 14.0, route.name()).unwrap();
    }
    for (mi, m) in methods.iter().enumerate() {
        let y = top + height + 30.0 + 12.0 * (mi / 3) as f64;
        let x = left + 120.0 * (mi % 3) as f64;
        writeln!(s, r#"<rect x="{x}" y="{}" width="8" height="8" fill="{}"/>"#, y - 8.0, colors[mi % colors.len()]).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}">{m}</text>"#, x + 12.0).unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

/// Writes `results.csv`, `report.md` and one bar chart per town into `dir`.
pub fn emit_report(dir: &Path, agg: &Aggregate, prov: &Provenance) -> Result<Vec<PathBuf>> {
    if agg.rows.is_empty() {
        return Err(Error::InsufficientData("no aggregate rows to report".into()));
    }
    let md = markdown(agg, prov)?;
    let towns: BTreeSet<TownId> = agg.rows.iter().map(|r| r.town).collect();
    let svgs = towns.into_iter().map(|t| Ok((t, svg_bars(&agg.rows, t, prov)?))).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("results.csv");
    write_results_csv(&csv_path, &agg.rows, prov)?;
    written.push(csv_path);
    let md_path = dir.join("report.md");
    fs::File::create(&md_path)?.write_all(md.as_bytes())?;
    written.push(md_path);
    for (t, svg) in svgs {
        let p = dir.join(format!("sr_{}.svg", t.name().to_ascii_lowercase()));
        fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Cruise;

    impl Controller for Cruise {
        type Memory = ();
        fn begin(&self) {}
        fn act(&self, _: &mut (), _: &Observation, _: &mut SeededRng) -> Result<usize> {
            Ok(Action::CRUISE.index())
        }
    }

    fn record(town: TownId, route: RouteId, method: &str, seed: u64, density: u32, episode: usize, success: bool) -> EvalRecord {
        EvalRecord {
            train_seed: seed,
            town,
            route,
            method: method.into(),
            density,
            tm_seed: 1,
            spawn_seed: 2,
            episode,
            success,
            cause: if success { Cause::Destination } else { Cause::Collision },
            steps: 10,
            progress: if success { 1.0 } else { 0.5 },
            invalid: None,
        }
    }

    fn prov() -> Provenance {
        Provenance { config_hash: "abc123".into(), seed: 4, stage: "zeroshot".into() }
    }

    #[test]
    fn full_grid_has_one_record_per_episode() {
        let eval = EvalConfig::default();
        let sim = SimConfig::default();
        let g = GridSpec { eval: &eval, sim: &sim, method: "m", train_seed: 0 };
        assert_eq!(g.record_count(), 2 * 4 * 3 * 10);
    }

    #[test]
    fn scripted_grid_is_deterministic_and_worker_independent() {
        let eval = EvalConfig { episodes: 3, towns: vec![TownId::A], routes: vec![RouteId::Straight], ..EvalConfig::default() };
        let sim = SimConfig::default();
        let g = GridSpec { eval: &eval, sim: &sim, method: "cruise", train_seed: 0 };
        let a = run_grid(&Cruise, &g, 1).unwrap();
        let b = run_grid(&Cruise, &g, 3).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.success && r.cause == Cause::Destination && r.progress == 1.0));
        let agg = aggregate(&a);
        assert_eq!(agg.rows.len(), 1);
        assert_eq!((agg.rows[0].sr, agg.rows[0].fr), (100.0, 0.0));
    }

    #[test]
    fn forty_of_fifty() {
        let recs: Vec<_> = (0..50).map(|i| record(TownId::A, RouteId::Straight, "m", 0, 10, i, i < 40)).collect();
        let agg = aggregate(&recs);
        assert_eq!(agg.rows[0].sr, 80.0);
        assert_eq!(agg.rows[0].fr, 20.0);
        assert_eq!(agg.rows[0].density_sr[&10], 80.0);
    }

    #[test]
    fn densities_then_seeds() {
        let mut recs = Vec::new();
        // seed 0: 100% at density 5, 0% at 20 -> 50; seed 1: 50% at both -> 50
        for i in 0..4 {
            recs.push(record(TownId::A, RouteId::Straight, "m", 0, 5, i, true));
            recs.push(record(TownId::A, RouteId::Straight, "m", 0, 20, i, false));
            recs.push(record(TownId::A, RouteId::Straight, "m", 1, 5, i, i % 2 == 0));
            recs.push(record(TownId::A, RouteId::Straight, "m", 1, 20, i, i % 2 == 1));
        }
        // seed 2: only one episode at density 5 but several at 20
        recs.push(record(TownId::A, RouteId::Straight, "m", 2, 5, 0, true));
        for i in 0..3 {
            recs.push(record(TownId::A, RouteId::Straight, "m", 2, 20, i, false));
        }
        let row = &aggregate(&recs).rows[0];
        assert_eq!(row.seed_sr[&0], 50.0);
        assert_eq!(row.seed_sr[&1], 50.0);
        assert_eq!(row.seed_sr[&2], 50.0);
        assert_eq!(row.sr, 50.0);
        assert_eq!(row.seed_std, 0.0);
        assert_eq!(row.n, 20);
    }

    #[test]
    fn invalid_records_are_excluded_and_empty_cells_reported() {
        let mut recs = vec![
            record(TownId::A, RouteId::Straight, "m", 0, 5, 0, true),
            record(TownId::A, RouteId::Straight, "m", 0, 10, 0, true),
        ];
        recs[1].invalid = Some("fault".into());
        let agg = aggregate(&recs);
        assert!(agg.rows.is_empty());
        assert_eq!(agg.missing.len(), 1);
        assert_eq!(agg.excluded.len(), 1);
    }

    #[test]
    fn gap_is_a_minus_b() {
        let rows = vec![
            AggregateRow {
                town: TownId::A,
                route: RouteId::Straight,
                method: "m".into(),
                sr: 75.7,
                fr: 24.3,
                n: 1,
                density_sr: BTreeMap::new(),
                seed_sr: BTreeMap::new(),
                seed_std: 0.0,
            },
            AggregateRow {
                town: TownId::B,
                route: RouteId::Straight,
                method: "m".into(),
                sr: 73.2,
                fr: 26.8,
                n: 1,
                density_sr: BTreeMap::new(),
                seed_sr: BTreeMap::new(),
                seed_std: 0.0,
            },
        ];
        let g = gap_table(&rows);
        assert!((g[0].gap.unwrap() - 2.5).abs() < 1e-9);
        let only_a = gap_table(&rows[..1]);
        assert_eq!(only_a[0].gap, None);
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..7)
            .flat_map(|i| {
                [
                    record(TownId::A, RouteId::Straight, "disagreement", 0, 5, i, i % 3 == 0),
                    record(TownId::B, RouteId::TwoTurn, "icm", 1, 10, i, i % 2 == 0),
                ]
            })
            .collect();
        let agg = aggregate(&recs);
        let paths = emit_report(dir.path(), &agg, &prov()).unwrap();
        assert_eq!(paths.len(), 4);
        let (p, rows) = read_results_csv(&paths[0]).unwrap();
        assert_eq!(p, prov());
        let expected: Vec<ResultRow> = agg.rows.iter().map(ResultRow::from).collect();
        assert_eq!(rows, expected);
        assert!(rows.iter().all(|r| r.fr == 100.0 - r.density_avg_sr));
        let rec_path = dir.path().join("records.csv");
        write_records_csv(&rec_path, &recs, &prov()).unwrap();
        assert_eq!(read_records_csv(&rec_path).unwrap().1, recs);
        let md = fs::read_to_string(&paths[1]).unwrap();
        assert!(md.contains("config_hash=abc123") && md.contains("| Method | Town-A | Town-B | Gap |"));
    }

    #[test]
    fn empty_rows_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report");
        assert!(emit_report(&out, &Aggregate::default(), &prov()).is_err());
        assert!(!out.exists());
        let csv = dir.path().join("r.csv");
        assert!(write_results_csv(&csv, &[], &prov()).is_err());
        assert!(!csv.exists());
    }
}
