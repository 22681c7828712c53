//! Trajectory batches and the delimited dataset format
//! (`traj_id,t,y_1..y_D[,label]`).

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffmath::Mat;
use crate::error::{Error, Result};

/// N observation sequences of equal dimension, each stored T×D.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Mat>,
    pub dt: f64,
    /// Generating mode per trajectory, for evaluation only.
    pub labels: Option<Vec<usize>>,
    /// True latent states per trajectory, when simulated.
    pub states: Option<Vec<Mat>>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Mat>, dt: f64) -> Result<Self> {
        let b = Self {
            trajectories,
            dt,
            labels: None,
            states: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Validation("empty trajectory batch".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Validation("dt must be positive".into()));
        }
        let d = self.trajectories[0].ncols();
        if d == 0 || self.trajectories.iter().any(|y| y.ncols() != d) {
            return Err(Error::DimensionMismatch(
                "trajectories disagree on observation dimension".into(),
            ));
        }
        if self.trajectories.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("non-finite observation".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::LengthMismatch(format!(
                    "{} labels for {} trajectories",
                    l.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.trajectories[0].ncols()
    }

    pub fn min_len(&self) -> usize {
        self.trajectories.iter().map(|y| y.nrows()).min().unwrap_or(0)
    }

    /// Leading `t` rows of every trajectory.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t < 2 || t > self.min_len() {
            return Err(Error::Validation(format!(
                "window {t} outside [2, {}]",
                self.min_len()
            )));
        }
        Ok(Self {
            trajectories: self
                .trajectories
                .iter()
                .map(|y| y.rows(0, t).into_owned())
                .collect(),
            dt: self.dt,
            labels: self.labels.clone(),
            states: self
                .states
                .as_ref()
                .map(|s| s.iter().map(|x| x.rows(0, t).into_owned()).collect()),
        })
    }

    /// Time-major view: entry `t` is the B×D matrix of `y_t` across
    /// trajectories.
    pub fn time_major(&self, t_len: usize) -> Vec<Mat> {
        time_major(&self.trajectories, t_len)
    }

    pub fn write_csv(&self, path: &Path, with_labels: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let d = self.obs_dim();
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((1..=d).map(|i| format!("y_{i}")));
        let labels = if with_labels { self.labels.as_ref() } else { None };
        if labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(csv_err(path))?;
        for (n, y) in self.trajectories.iter().enumerate() {
            for t in 0..y.nrows() {
                let mut rec = vec![n.to_string(), (t as f64 * self.dt).to_string()];
                rec.extend(y.row(t).iter().map(|v| v.to_string()));
                if let Some(l) = labels {
                    rec.push(l[n].to_string());
                }
                w.write_record(&rec).map_err(csv_err(path))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let header = r.headers().map_err(csv_err(path))?.clone();
        let parse_err = |line: u64, message: String| Error::Parse {
            path: path.display().to_string(),
            line: line as usize,
            message,
        };
        if header.len() < 3 || &header[0] != "traj_id" || &header[1] != "t" {
            return Err(parse_err(1, "header must start with traj_id,t,y_1".into()));
        }
        let has_label = &header[header.len() - 1] == "label";
        let d = header.len() - 2 - usize::from(has_label);
        for (i, name) in header.iter().skip(2).take(d).enumerate() {
            if name != format!("y_{}", i + 1) {
                return Err(parse_err(1, format!("unexpected column {name}")));
            }
        }
        let mut rows: BTreeMap<usize, (Vec<f64>, Vec<f64>, Option<usize>)> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err(path))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("column {}: {e}", header[i].to_string())))
            };
            let id: usize = rec[0]
                .trim()
                .parse()
                .map_err(|e| parse_err(line, format!("traj_id: {e}")))?;
            let entry = rows.entry(id).or_default();
            entry.0.push(num(1)?);
            for i in 0..d {
                entry.1.push(num(2 + i)?);
            }
            if has_label {
                let l: usize = rec[2 + d]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(line, format!("label: {e}")))?;
                if entry.2.is_some_and(|prev| prev != l) {
                    return Err(parse_err(line, format!("label changes within trajectory {id}")));
                }
                entry.2 = Some(l);
            }
        }
        if rows.is_empty() {
            return Err(parse_err(2, "no data rows".into()));
        }
        let mut dt = None;
        let mut trajectories = Vec::new();
        let mut labels = Vec::new();
        for (id, (ts, ys, l)) in rows {
            if ts.len() < 2 {
                return Err(Error::Validation(format!("trajectory {id} has fewer than 2 rows")));
            }
            let step = ts[1] - ts[0];
            if !(step > 0.0) {
                return Err(Error::Validation(format!("trajectory {id} has non-increasing t")));
            }
            let d0 = *dt.get_or_insert(step);
            if ts.windows(2).any(|w| ((w[1] - w[0]) - d0).abs() > 1e-9 * d0.max(1.0)) {
                return Err(Error::Validation(format!("trajectory {id} has uneven time steps")));
            }
            trajectories.push(Mat::from_row_slice(ts.len(), d, &ys));
            labels.extend(l);
        }
        let mut batch = Self::new(trajectories, dt.unwrap())?;
        if has_label {
            batch.labels = Some(labels);
        }
        Ok(batch)
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                path: path.display().to_string(),
                line,
                message: format!("{other:?}"),
            },
        }
    }
}

/// Entry `t` stacks row `t` of every trajectory.
pub fn time_major(trajs: &[Mat], t_len: usize) -> Vec<Mat> {
    let d = trajs[0].ncols();
    (0..t_len)
        .map(|t| Mat::from_fn(trajs.len(), d, |n, j| trajs[n][(t, j)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrajectoryBatch {
        let a = Mat::from_row_slice(3, 2, &[0.0, 0.1, 0.2, 0.3, 0.4, 1.0 / 3.0]);
        let b = Mat::from_row_slice(3, 2, &[-1.0, 2.5e-17, 3.0, 4.0, 5.0, 6.0]);
        let mut batch = TrajectoryBatch::new(vec![a, b], 0.1).unwrap();
        batch.labels = Some(vec![2, 0]);
        batch
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let batch = sample();
        batch.write_csv(&p, true).unwrap();
        let back = TrajectoryBatch::read_csv(&p).unwrap();
        assert_eq!(back.trajectories, batch.trajectories);
        assert_eq!(back.labels, batch.labels);
        assert!((back.dt - 0.1).abs() < 1e-15);
    }

    #[test]
    fn labels_only_when_requested() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        sample().write_csv(&p, false).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("traj_id,t,y_1,y_2\n"));
        assert!(!text.contains("label"));
        assert_eq!(TrajectoryBatch::read_csv(&p).unwrap().labels, None);
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "traj_id,t,y_1\n0,0,1.0\n0,0.1,abc\n").unwrap();
        match TrajectoryBatch::read_csv(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn time_major_layout() {
        let tm = sample().time_major(3);
        assert_eq!(tm.len(), 3);
        assert_eq!(tm[1][(1, 0)], 3.0);
        assert_eq!(tm[2][(0, 1)], 1.0 / 3.0);
    }
}
