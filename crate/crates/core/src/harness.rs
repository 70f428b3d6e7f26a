//! Run records, summary metrics, CSV emission and multi-seed sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::agent::{self, AgentKind, DecayUnit, TrainConfig};
use crate::diffnet::{count_params, NetArch};
use crate::dist::Stage;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["episode", "reward", "seconds", "stage", "skipped"];
pub const VISIT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    pub reward: f64,
    /// Seconds since the run started, measured at the end of the episode.
    pub seconds: f64,
    pub stage: Stage,
    /// Gradient steps dropped for non-finite values.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub episodes: Vec<EpisodeRecord>,
    /// Chain positions per episode, start state included. Empty off-chain.
    pub trajectories: Vec<Vec<usize>>,
}

impl RunRecord {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            seed: config.seed,
            config: config_to_kv(config),
            episodes: Vec::new(),
            trajectories: Vec::new(),
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.reward).collect()
    }

    pub fn total_skipped(&self) -> usize {
        self.episodes.iter().map(|e| e.skipped).sum()
    }

    /// Episode indices run 1, 2, ... and the stage flips at most once.
    pub fn is_consistent(&self) -> bool {
        let contiguous = self
            .episodes
            .iter()
            .enumerate()
            .all(|(i, e)| e.episode == i + 1);
        let flips = self
            .episodes
            .windows(2)
            .filter(|w| w[0].stage != w[1].stage)
            .count();
        let ordered = self
            .episodes
            .first()
            .is_none_or(|e| e.stage == Stage::PreTrain || flips == 0);
        contiguous && flips <= 1 && ordered
    }
}

/// Mean of the last `k` episode rewards.
pub fn final_reward(record: &RunRecord, k: usize) -> Result<f64> {
    let n = record.episodes.len();
    if k == 0 || n < k {
        return Err(Error::InsufficientData {
            need: k.max(1),
            have: n,
        });
    }
    Ok(record.episodes[n - k..]
        .iter()
        .map(|e| e.reward)
        .sum::<f64>()
        / k as f64)
}

// ---------------------------------------------------------------------------
// Visit counts

/// Which of `s_1`, `s_{N/2}`, `s_N` (1-based) a trajectory touched.
pub fn visit_indicators(trajectory: &[usize], n: usize) -> [bool; 3] {
    let tracked = tracked_states(n);
    let mut c = [false; 3];
    for &p in trajectory {
        for (flag, &s) in c.iter_mut().zip(&tracked) {
            *flag |= p == s;
        }
    }
    c
}

pub fn tracked_states(n: usize) -> [usize; 3] {
    [1, n / 2, n]
}

/// Windowed visit frequencies `(p_1, p_{N/2}, p_N)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitRecord {
    /// First episode (1-based) in the window.
    pub first_episode: usize,
    pub episodes: usize,
    pub p: [f64; 3],
}

/// Splits trajectories into consecutive windows of [`VISIT_WINDOW`] episodes
/// (the last one may be shorter) and averages the visit indicators.
pub fn visit_probability(trajectories: &[Vec<usize>], n_states: usize) -> Result<Vec<VisitRecord>> {
    if trajectories
        .iter()
        .flatten()
        .any(|&p| p == 0 || p > n_states)
    {
        return Err(Error::InvalidConfig(format!(
            "trajectory leaves the chain of length {n_states}"
        )));
    }
    Ok(trajectories
        .chunks(VISIT_WINDOW)
        .enumerate()
        .map(|(w, chunk)| {
            let mut p = [0.0; 3];
            for t in chunk {
                for (acc, hit) in p.iter_mut().zip(visit_indicators(t, n_states)) {
                    *acc += f64::from(u8::from(hit));
                }
            }
            p.iter_mut().for_each(|x| *x /= chunk.len() as f64);
            VisitRecord {
                first_episode: w * VISIT_WINDOW + 1,
                episodes: chunk.len(),
                p,
            }
        })
        .collect())
}

/// Visit windows of a finished run; errors for runs off the chain.
pub fn record_visits(record: &RunRecord) -> Result<Vec<VisitRecord>> {
    let env = record
        .config
        .iter()
        .find(|(k, _)| k == "env")
        .map(|(_, v)| v.as_str())
        .unwrap_or("");
    let n = env
        .strip_prefix("chain:")
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| Error::Unsupported(format!("visit counts need a chain run, got `{env}`")))?;
    visit_probability(&record.trajectories, n)
}

// ---------------------------------------------------------------------------
// Parameter counts

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamsRow {
    pub task: &'static str,
    pub dqn: usize,
    pub avdqn: usize,
}

/// Benchmark tasks with their observation and action sizes.
pub const TASKS: [(&str, usize, usize); 8] = [
    ("CartPole-v0", 4, 2),
    ("CartPole-v1", 4, 2),
    ("Acrobot-v1", 6, 3),
    ("MountainCar-v0", 2, 3),
    ("MDP N=5", 5, 2),
    ("MDP N=10", 10, 2),
    ("MDP N=50", 50, 2),
    ("MDP N=100", 100, 2),
];

pub fn params_report() -> Vec<ParamsRow> {
    TASKS
        .iter()
        .map(|&(task, obs, actions)| {
            let count = |out| count_params(&NetArch::two_hidden(obs, out).expect("valid arch"));
            ParamsRow {
                task,
                dqn: count(actions),
                avdqn: count(2 * actions),
            }
        })
        .collect()
}

pub fn format_params_report(rows: &[ParamsRow]) -> String {
    let mut s = format!("{:<16}{:>8}{:>8}\n", "task", "DQN", "AVDQN");
    for r in rows {
        s.push_str(&format!("{:<16}{:>8}{:>8}\n", r.task, r.dqn, r.avdqn));
    }
    s
}

// ---------------------------------------------------------------------------
// CSV

pub fn write_csv<W: Write>(record: &RunRecord, out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for e in &record.episodes {
        w.write_record([
            e.episode.to_string(),
            format!("{:.6}", e.reward),
            format!("{:.3}", e.seconds),
            e.stage.as_str().to_string(),
            e.skipped.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-episode CSV and a `<path>.config` sidecar holding the
/// config snapshot.
pub fn emit_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(record, file).map_err(|e| csv_error(path, e))?;
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, format_kv(&record.config)).map_err(|e| Error::io(&sidecar, e))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

pub fn read_csv<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(parse_error(
            path,
            format!("unexpected header {:?}", headers),
        ));
    }
    let mut rows = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let bad = |what: &str| parse_error(path, format!("row {}: bad {what}", line + 1));
        rows.push(EpisodeRecord {
            episode: field(0).parse().map_err(|_| bad("episode"))?,
            reward: field(1).parse().map_err(|_| bad("reward"))?,
            seconds: field(2).parse().map_err(|_| bad("seconds"))?,
            stage: field(3).parse().map_err(|_| bad("stage"))?,
            skipped: field(4).parse().map_err(|_| bad("skipped"))?,
        });
    }
    Ok(rows)
}

/// Reads a CSV written by [`emit_csv`], with its sidecar config when present.
pub fn parse_csv(path: &Path) -> Result<RunRecord> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let episodes = read_csv(file, path)?;
    let sidecar = sidecar_path(path);
    let config = match fs::read_to_string(&sidecar) {
        Ok(text) => parse_kv(&text, &sidecar)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&sidecar, e)),
    };
    let seed = config
        .iter()
        .find(|(k, _)| k == "seed")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    Ok(RunRecord {
        seed,
        config,
        episodes,
        trajectories: Vec::new(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => parse_error(path, format!("{other:?}")),
    }
}

fn parse_error(path: &Path, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message,
    }
}

// ---------------------------------------------------------------------------
// Flat key-value configuration

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_error(path, format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn opt_off<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

/// Every field of `config`, in a form [`apply_kv`] accepts back.
pub fn config_to_kv(c: &TrainConfig) -> Vec<(String, String)> {
    let hidden = c
        .hidden
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    [
        ("env", c.env.clone()),
        ("agent", c.agent.as_str().to_string()),
        ("episodes", c.episodes.to_string()),
        ("seed", c.seed.to_string()),
        ("omega", opt(&c.omega)),
        ("gamma", opt(&c.gamma)),
        ("lr", opt(&c.lr)),
        ("lr_decay", c.lr_decay.to_string()),
        ("tau", c.tau.to_string()),
        ("batch", c.batch.to_string()),
        ("hidden", hidden),
        ("replay", opt(&c.replay.map(|r| r.as_str()))),
        ("capacity", c.capacity.to_string()),
        ("per_alpha", c.per_alpha.to_string()),
        ("per_beta", opt_off(&c.per_beta)),
        ("sort_every", c.sort_every.to_string()),
        ("entropy_coef", c.entropy_coef.to_string()),
        ("priority", c.priority_source.as_str().to_string()),
        ("epsilon_start", c.epsilon_start.to_string()),
        ("epsilon_end", c.epsilon_end.to_string()),
        ("epsilon_decay", opt(&c.epsilon_decay)),
        ("epsilon_unit", c.epsilon_unit.as_str().to_string()),
        ("grad_clip", opt_off(&c.grad_clip)),
        ("record_time", c.record_time.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key} = {value}: {e}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

/// Sets one config field from its textual form.
pub fn apply_kv(c: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key.trim() {
        "env" => c.env = value.to_string(),
        "agent" => c.agent = parse_value(key, value)?,
        "episodes" => c.episodes = parse_value(key, value)?,
        "seed" => c.seed = parse_value(key, value)?,
        "omega" => c.omega = parse_opt(key, value)?,
        "gamma" => c.gamma = parse_opt(key, value)?,
        "lr" => c.lr = parse_opt(key, value)?,
        "lr_decay" => c.lr_decay = parse_value(key, value)?,
        "tau" => c.tau = parse_value(key, value)?,
        "batch" => c.batch = parse_value(key, value)?,
        "hidden" => {
            c.hidden = value
                .split(',')
                .map(|h| parse_value(key, h.trim()))
                .collect::<Result<_>>()?
        }
        "replay" => c.replay = parse_opt(key, value)?,
        "capacity" => c.capacity = parse_value(key, value)?,
        "per_alpha" => c.per_alpha = parse_value(key, value)?,
        "per_beta" => c.per_beta = parse_opt(key, value)?,
        "sort_every" => c.sort_every = parse_value(key, value)?,
        "entropy_coef" => c.entropy_coef = parse_value(key, value)?,
        "priority" => c.priority_source = parse_value(key, value)?,
        "epsilon_start" => c.epsilon_start = parse_value(key, value)?,
        "epsilon_end" => c.epsilon_end = parse_value(key, value)?,
        "epsilon_decay" => c.epsilon_decay = parse_opt(key, value)?,
        "epsilon_unit" => c.epsilon_unit = parse_value::<DecayUnit>(key, value)?,
        "grad_clip" => c.grad_clip = parse_opt(key, value)?,
        "record_time" => c.record_time = parse_value(key, value)?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown config key `{other}`"
            )))
        }
    }
    Ok(())
}

/// Builds a config from key-value pairs on top of the defaults.
pub fn config_from_kv(pairs: &[(String, String)]) -> Result<TrainConfig> {
    let mut c = TrainConfig::new("chain:5", AgentKind::Avdqn);
    for (k, v) in pairs {
        apply_kv(&mut c, k, v)?;
    }
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    config_from_kv(&parse_kv(&text, path)?)
}

// ---------------------------------------------------------------------------
// Sweeps

/// Trains one run per seed, in parallel. Results come back in seed order.
pub fn sweep(base: &TrainConfig, seeds: &[u64]) -> Result<Vec<RunRecord>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = base.clone();
            c.seed = seed;
            agent::train(&c)
        })
        .collect()
}

/// Mean reward and mean seconds per episode index over runs, truncated to
/// the shortest run.
pub fn mean_curve(runs: &[RunRecord]) -> Vec<(usize, f64, f64)> {
    let len = runs.iter().map(|r| r.episodes.len()).min().unwrap_or(0);
    let n = runs.len() as f64;
    (0..len)
        .map(|i| {
            let reward = runs.iter().map(|r| r.episodes[i].reward).sum::<f64>() / n;
            let seconds = runs.iter().map(|r| r.episodes[i].seconds).sum::<f64>() / n;
            (i + 1, reward, seconds)
        })
        .collect()
}

pub fn emit_mean_curve(curve: &[(usize, f64, f64)], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let write = |w: &mut csv::Writer<fs::File>| -> std::result::Result<(), csv::Error> {
        w.write_record(["episode", "mean_reward", "mean_seconds"])?;
        for &(e, r, s) in curve {
            w.write_record([e.to_string(), format!("{r:.6}"), format!("{s:.3}")])?;
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).map_err(|e| csv_error(path, e))
}

pub fn emit_visits(visits: &[VisitRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let write = |w: &mut csv::Writer<fs::File>| -> std::result::Result<(), csv::Error> {
        w.write_record(["first_episode", "episodes", "p_first", "p_mid", "p_last"])?;
        for v in visits {
            w.write_record([
                v.first_episode.to_string(),
                v.episodes.to_string(),
                format!("{:.3}", v.p[0]),
                format!("{:.3}", v.p[1]),
                format!("{:.3}", v.p[2]),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).map_err(|e| csv_error(path, e))
}

/// Minimal SVG polyline of `ys` against their index.
pub fn svg_line_chart(ys: &[f64], width: f64, height: f64) -> String {
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let dx = if ys.len() > 1 {
        width / (ys.len() - 1) as f64
    } else {
        0.0
    };
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            format!(
                "{:.2},{:.2}",
                i as f64 * dx,
                height - (y - lo) / span * height
            )
        })
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\
         <polyline fill=\"none\" stroke=\"black\" points=\"{}\"/></svg>\n",
        points.join(" ")
    )
}
