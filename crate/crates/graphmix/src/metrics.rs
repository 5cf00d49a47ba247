//! Run directory files.
//!
//! ```text
//! train.csv       episode,env_steps,loss_global,loss_local_mean,epsilon
//! eval.csv        env_steps,success_rate,mean_return,mean_len
//! manifest.jsonl  {"command":..,"seed":..,"config":{..}} then one record per resume
//! ```
//!
//! Loss cells are empty until the buffer holds a full batch. Numbers use the
//! shortest representation that parses back to the same value, so files are
//! byte-identical across runs with the same seed and config.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use graphmix_core::trainer::{EvalRow, EvalStats, TrainRow};

use crate::Error;

pub const TRAIN_CSV: &str = "train.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const MANIFEST: &str = "manifest.jsonl";
pub const TRAIN_HEADER: [&str; 5] = ["episode", "env_steps", "loss_global", "loss_local_mean", "epsilon"];
pub const EVAL_HEADER: [&str; 4] = ["env_steps", "success_rate", "mean_return", "mean_len"];

fn metrics_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Metrics { path: path.to_path_buf(), message: e.to_string() }
}

/// Appending writer for `train.csv` and `eval.csv`.
pub struct MetricsWriter {
    train: csv::Writer<File>,
    eval: csv::Writer<File>,
    train_path: PathBuf,
    eval_path: PathBuf,
}

impl MetricsWriter {
    /// Starts fresh files in `dir`, replacing any previous ones.
    pub fn create(dir: &Path) -> Result<MetricsWriter, Error> {
        fs::create_dir_all(dir).map_err(Error::write(dir))?;
        let (train_path, eval_path) = (dir.join(TRAIN_CSV), dir.join(EVAL_CSV));
        let mut train = csv::Writer::from_path(&train_path).map_err(metrics_err(&train_path))?;
        train.write_record(TRAIN_HEADER).map_err(metrics_err(&train_path))?;
        let mut eval = csv::Writer::from_path(&eval_path).map_err(metrics_err(&eval_path))?;
        eval.write_record(EVAL_HEADER).map_err(metrics_err(&eval_path))?;
        let mut w = MetricsWriter { train, eval, train_path, eval_path };
        w.flush()?;
        Ok(w)
    }

    /// Reopens the files of an interrupted run, dropping rows written after
    /// the checkpoint taken at `episodes` episodes and `env_steps` steps.
    pub fn resume(dir: &Path, episodes: u64, env_steps: u64) -> Result<MetricsWriter, Error> {
        let (train_path, eval_path) = (dir.join(TRAIN_CSV), dir.join(EVAL_CSV));
        truncate(&train_path, &TRAIN_HEADER, episodes)?;
        truncate(&eval_path, &EVAL_HEADER, env_steps)?;
        let open = |p: &Path| {
            let f = OpenOptions::new().append(true).open(p).map_err(Error::write(p))?;
            Ok::<_, Error>(csv::WriterBuilder::new().has_headers(false).from_writer(f))
        };
        Ok(MetricsWriter { train: open(&train_path)?, eval: open(&eval_path)?, train_path, eval_path })
    }

    pub fn train_row(&mut self, row: &TrainRow) -> Result<(), Error> {
        let (g, l) = match row.losses {
            Some(s) => (s.loss_global.to_string(), s.loss_local_mean.to_string()),
            None => (String::new(), String::new()),
        };
        let cells = [row.episode.to_string(), row.env_steps.to_string(), g, l, row.epsilon.to_string()];
        self.train.write_record(&cells).map_err(metrics_err(&self.train_path))
    }

    pub fn eval_row(&mut self, row: &EvalRow) -> Result<(), Error> {
        let s = &row.stats;
        let cells = [row.env_steps.to_string(), s.success_rate.to_string(), s.mean_return.to_string(), s.mean_len.to_string()];
        self.eval.write_record(&cells).map_err(metrics_err(&self.eval_path))?;
        // Evaluations are rare; flushing keeps the file aligned with checkpoints.
        self.flush()
    }

    pub fn flush(&mut self) -> Result<(), Error> {
        self.train.flush().map_err(Error::write(&self.train_path))?;
        self.eval.flush().map_err(Error::write(&self.eval_path))
    }
}

/// Keeps the header and the rows whose first column is at most `limit`.
fn truncate(path: &Path, header: &[&str], limit: u64) -> Result<(), Error> {
    let mut reader = csv::Reader::from_path(path).map_err(metrics_err(path))?;
    if reader.headers().map_err(metrics_err(path))? != header {
        return Err(Error::Metrics { path: path.to_path_buf(), message: "unexpected header".into() });
    }
    let mut kept = Vec::new();
    for record in reader.records() {
        let record = record.map_err(metrics_err(path))?;
        let key: u64 =
            record[0].parse().map_err(|_| Error::Metrics { path: path.to_path_buf(), message: format!("bad row key `{}`", &record[0]) })?;
        if key <= limit {
            kept.push(record);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(metrics_err(path))?;
    w.write_record(header).map_err(metrics_err(path))?;
    for r in &kept {
        w.write_record(r).map_err(metrics_err(path))?;
    }
    w.flush().map_err(Error::write(path))
}

/// Parses an `eval.csv`.
pub fn read_eval(path: &Path) -> Result<Vec<EvalRow>, Error> {
    let mut reader = csv::Reader::from_path(path).map_err(metrics_err(path))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(metrics_err(path))?;
        let bad = || Error::Metrics { path: path.to_path_buf(), message: format!("bad row {:?}", r) };
        let num = |i: usize| r.get(i).and_then(|c| c.parse::<f64>().ok()).ok_or_else(bad);
        rows.push(EvalRow {
            env_steps: r.get(0).and_then(|c| c.parse().ok()).ok_or_else(bad)?,
            stats: EvalStats { episodes: 0, success_rate: num(1)?, mean_return: num(2)?, mean_reward: f64::NAN, mean_len: num(3)? },
        });
    }
    Ok(rows)
}

/// Writes a single-row CSV.
pub fn write_table(path: &Path, header: &[&str], cells: &[String]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(metrics_err(path))?;
    w.write_record(header).map_err(metrics_err(path))?;
    w.write_record(cells).map_err(metrics_err(path))?;
    w.flush().map_err(Error::write(path))
}

/// Starts `manifest.jsonl` with the run record.
pub fn write_manifest(dir: &Path, record: &serde_json::Value) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(Error::write(dir))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, format!("{record}\n")).map_err(Error::write(&path))
}

pub fn append_manifest(dir: &Path, record: &serde_json::Value) -> Result<(), Error> {
    let path = dir.join(MANIFEST);
    let mut f = OpenOptions::new().append(true).open(&path).map_err(Error::write(&path))?;
    writeln!(f, "{record}").map_err(Error::write(&path))
}

/// The first record of a manifest.
pub fn read_manifest(dir: &Path) -> Result<serde_json::Value, Error> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::read(&path))?;
    let first = text.lines().next().unwrap_or_default();
    serde_json::from_str(first).map_err(|e| Error::Metrics { path, message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use graphmix_core::trainer::StepStats;

    fn train_row(episode: u64, losses: bool) -> TrainRow {
        let s = StepStats { loss: 3.0, loss_global: 1.5, loss_local_mean: 0.25, grad_norm: 1.0 };
        TrainRow { episode, env_steps: episode * 10, losses: losses.then_some(s), epsilon: 0.5 }
    }

    fn eval_row(env_steps: u64) -> EvalRow {
        let stats = EvalStats { episodes: 32, success_rate: 0.75, mean_return: 1.0 / 3.0, mean_reward: 0.1, mean_len: 12.5 };
        EvalRow { env_steps, stats }
    }

    #[test]
    fn files_have_exact_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.train_row(&train_row(1, false)).unwrap();
        w.train_row(&train_row(2, true)).unwrap();
        w.eval_row(&eval_row(0)).unwrap();
        w.flush().unwrap();
        let train = fs::read_to_string(dir.path().join(TRAIN_CSV)).unwrap();
        assert_eq!(train, "episode,env_steps,loss_global,loss_local_mean,epsilon\n1,10,,,0.5\n2,20,1.5,0.25,0.5\n");
        let eval = fs::read_to_string(dir.path().join(EVAL_CSV)).unwrap();
        assert_eq!(eval, "env_steps,success_rate,mean_return,mean_len\n0,0.75,0.3333333333333333,12.5\n");
        let back = read_eval(&dir.path().join(EVAL_CSV)).unwrap();
        assert_eq!(back[0].stats.mean_return, 1.0 / 3.0);
    }

    #[test]
    fn resume_drops_rows_after_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        for e in 1..=5 {
            w.train_row(&train_row(e, true)).unwrap();
        }
        w.eval_row(&eval_row(0)).unwrap();
        w.eval_row(&eval_row(30)).unwrap();
        w.eval_row(&eval_row(50)).unwrap();
        drop(w);
        let mut w = MetricsWriter::resume(dir.path(), 3, 30).unwrap();
        w.train_row(&train_row(4, false)).unwrap();
        w.flush().unwrap();
        let train = fs::read_to_string(dir.path().join(TRAIN_CSV)).unwrap();
        let episodes: Vec<&str> = train.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(episodes, ["1", "2", "3", "4"]);
        assert!(train.ends_with("4,40,,,0.5\n"));
        let evals: Vec<u64> = read_eval(&dir.path().join(EVAL_CSV)).unwrap().iter().map(|r| r.env_steps).collect();
        assert_eq!(evals, [0, 30]);
    }

    #[test]
    fn manifest_first_record_is_the_run() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &serde_json::json!({"seed": 3})).unwrap();
        append_manifest(dir.path(), &serde_json::json!({"resume": 1})).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap()["seed"], 3);
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
