//! CSV and JSON persistence for datasets and trajectory sets.
//!
//! Dataset CSV layout: an optional leading metadata comment
//! `# {"provenance":"...","seed":N}` followed by a header
//! `split,in_0..in_{m-1},target_0..target_{p-1}` and one row per sample.
//! Trajectory CSV layout: header `trajectory,time,<quantity names...>`,
//! one row per grid time, rows of one trajectory contiguous.
//!
//! Floats are written with 17 significant digits, so a save/load round
//! trip is lossless.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::data::{Dataset, SplitIndices};
use crate::data::ode::{Trajectory, TrajectorySet};
use crate::tensor::Vector;
use crate::{Error, Result};

fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: '{field}'"),
    })
}

#[derive(Debug, serde::Serialize, Deserialize)]
struct DatasetMeta {
    provenance: String,
    seed: u64,
}

/// Writes a dataset as CSV (see module docs for the layout).
pub fn save_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let in_dim = ds.inputs.first().map_or(0, Vector::len);
    let target_dim = ds.targets.first().map_or(0, Vector::len);

    let mut text = String::new();
    let meta = DatasetMeta {
        provenance: ds.provenance.clone(),
        seed: ds.seed,
    };
    writeln!(text, "# {}", serde_json::to_string(&meta)?).unwrap();

    let mut header = vec!["split".to_string()];
    header.extend((0..in_dim).map(|i| format!("in_{i}")));
    header.extend((0..target_dim).map(|i| format!("target_{i}")));
    writeln!(text, "{}", header.join(",")).unwrap();

    let mut membership = vec![""; ds.len()];
    for &i in &ds.split.train {
        membership[i] = "train";
    }
    for &i in &ds.split.validation {
        membership[i] = "validation";
    }
    for &i in &ds.split.test {
        membership[i] = "test";
    }

    for i in 0..ds.len() {
        let mut fields = vec![membership[i].to_string()];
        fields.extend(ds.inputs[i].iter().map(|&x| fmt_f64(x)));
        fields.extend(ds.targets[i].iter().map(|&x| fmt_f64(x)));
        writeln!(text, "{}", fields.join(",")).unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset_csv`] (or hand-authored in the
/// same layout; the metadata comment is optional).
pub fn load_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().peekable();

    let mut provenance = String::new();
    let mut seed = 0u64;
    if let Some((_, first)) = lines.peek() {
        if let Some(raw) = first.strip_prefix('#') {
            let meta: DatasetMeta = serde_json::from_str(raw.trim()).map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad metadata comment: {e}"),
            })?;
            provenance = meta.provenance;
            seed = meta.seed;
            lines.next();
        }
    }

    let (header_idx, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header row".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"split") {
        return Err(Error::Parse {
            line: header_idx + 1,
            msg: "missing column 'split'".into(),
        });
    }
    let in_dim = columns.iter().filter(|c| c.starts_with("in_")).count();
    let target_dim = columns.iter().filter(|c| c.starts_with("target_")).count();
    for (i, expect) in (0..in_dim)
        .map(|i| format!("in_{i}"))
        .chain((0..target_dim).map(|i| format!("target_{i}")))
        .enumerate()
    {
        if columns.get(i + 1) != Some(&expect.as_str()) {
            return Err(Error::Parse {
                line: header_idx + 1,
                msg: format!("missing column '{expect}'"),
            });
        }
    }
    if target_dim == 0 {
        return Err(Error::Parse {
            line: header_idx + 1,
            msg: "missing column 'target_0'".into(),
        });
    }

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut split = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + in_dim + target_dim {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", 1 + in_dim + target_dim, fields.len()),
            });
        }
        let row = inputs.len();
        match fields[0].trim() {
            "train" => split.train.push(row),
            "validation" => split.validation.push(row),
            "test" => split.test.push(row),
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown split '{other}'"),
                })
            }
        }
        let mut input = Vec::with_capacity(in_dim);
        for f in &fields[1..1 + in_dim] {
            input.push(parse_f64(f, line_no)?);
        }
        let mut target = Vec::with_capacity(target_dim);
        for f in &fields[1 + in_dim..] {
            target.push(parse_f64(f, line_no)?);
        }
        inputs.push(Vector::new(input));
        targets.push(Vector::new(target));
    }

    let ds = Dataset {
        inputs,
        targets,
        split,
        provenance,
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a trajectory set as CSV: `trajectory,time,<quantities...>`.
pub fn save_trajectories_csv(ts: &TrajectorySet, path: &Path) -> Result<()> {
    ts.validate()?;
    let mut text = String::new();
    let mut header = vec!["trajectory".to_string(), "time".to_string()];
    header.extend(ts.quantity_names.iter().cloned());
    writeln!(text, "{}", header.join(",")).unwrap();
    for traj in &ts.trajectories {
        for (t, row) in traj.times.iter().zip(&traj.states) {
            let mut fields = vec![traj.name.clone(), fmt_f64(*t)];
            fields.extend(row.iter().map(|&x| fmt_f64(x)));
            writeln!(text, "{}", fields.join(",")).unwrap();
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a trajectory set written by [`save_trajectories_csv`]. Rows of one
/// trajectory must be contiguous; trajectory order follows first appearance.
pub fn load_trajectories_csv(path: &Path) -> Result<TrajectorySet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header row".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 3 || columns[0] != "trajectory" || columns[1] != "time" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with 'trajectory,time' and name at least one quantity".into(),
        });
    }
    let quantity_names: Vec<String> = columns[2..].iter().map(|s| s.to_string()).collect();
    let q = quantity_names.len();

    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + q {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", 2 + q, fields.len()),
            });
        }
        let name = fields[0].trim();
        let time = parse_f64(fields[1], line_no)?;
        let mut row = Vec::with_capacity(q);
        for f in &fields[2..] {
            row.push(parse_f64(f, line_no)?);
        }
        match trajectories.last_mut() {
            Some(last) if last.name == name => {
                last.times.push(time);
                last.states.push(row);
            }
            _ => trajectories.push(Trajectory {
                name: name.to_string(),
                times: vec![time],
                states: vec![row],
            }),
        }
    }

    let ts = TrajectorySet {
        quantity_names,
        trajectories,
    };
    ts.validate()?;
    Ok(ts)
}

/// JSON persistence for trajectory sets (explicit time grids included).
pub fn save_trajectories_json(ts: &TrajectorySet, path: &Path) -> Result<()> {
    ts.validate()?;
    let mut text = serde_json::to_string_pretty(ts)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_trajectories_json(path: &Path) -> Result<TrajectorySet> {
    let text = std::fs::read_to_string(path)?;
    let ts: TrajectorySet = serde_json::from_str(&text)?;
    ts.validate()?;
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_sin_dataset, SplitCounts};

    #[test]
    fn dataset_csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = make_sin_dataset(
            50,
            (0.0, std::f64::consts::TAU),
            SplitCounts { train: 30, validation: 10, test: 10 },
            123,
        )
        .unwrap();
        save_dataset_csv(&ds, &path).unwrap();
        let loaded = load_dataset_csv(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn dataset_csv_missing_column_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "split,in_0\ntrain,1.0\n").unwrap();
        let err = load_dataset_csv(&path).unwrap_err().to_string();
        assert!(err.contains("target_0"), "{err}");

        std::fs::write(&path, "in_0,target_0\n1.0,2.0\n").unwrap();
        let err = load_dataset_csv(&path).unwrap_err().to_string();
        assert!(err.contains("split"), "{err}");
    }

    #[test]
    fn dataset_csv_parses_scientific_notation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sci.csv");
        std::fs::write(&path, "split,in_0,target_0\ntrain,1e-7,2.5E+3\n").unwrap();
        let ds = load_dataset_csv(&path).unwrap();
        assert_eq!(ds.inputs[0][0], 1e-7);
        assert_eq!(ds.targets[0][0], 2500.0);
    }

    #[test]
    fn dataset_csv_malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "split,in_0,target_0\ntrain,1.0,2.0\ntrain,oops,3.0\n",
        )
        .unwrap();
        match load_dataset_csv(&path).unwrap_err() {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ts = TrajectorySet {
            quantity_names: vec!["y1".into(), "y2".into()],
            trajectories: vec![
                Trajectory {
                    name: "a".into(),
                    times: vec![0.0, 1e-7, 2.5],
                    states: vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.5, 0.5]],
                },
                Trajectory {
                    name: "b".into(),
                    times: vec![0.0, 1.0],
                    states: vec![vec![0.3, 0.7], vec![0.2, 0.8]],
                },
            ],
        };
        let csv_path = dir.path().join("ts.csv");
        save_trajectories_csv(&ts, &csv_path).unwrap();
        assert_eq!(load_trajectories_csv(&csv_path).unwrap(), ts);

        let json_path = dir.path().join("ts.json");
        save_trajectories_json(&ts, &json_path).unwrap();
        assert_eq!(load_trajectories_json(&json_path).unwrap(), ts);
    }
}
