//! Dataset directories: one CSV per trajectory plus a JSON manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Trajectory};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: DatasetMeta,
    trajectories: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    task_id: usize,
    steps: usize,
    boundaries: Vec<usize>,
}

fn trajectory_file(i: usize) -> String {
    format!("traj_{i:04}.csv")
}

/// Writes `ds` under `dir` and returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir)?;
    let (ds_dim, da_dim) = (ds.meta.state_dim, ds.meta.action_dim);
    let mut header = vec!["step".to_string()];
    header.extend((1..=ds_dim).map(|i| format!("s{i}")));
    header.extend((1..=da_dim).map(|i| format!("a{i}")));
    header.push("g_label".into());
    header.push("task_id".into());

    let mut entries = Vec::with_capacity(ds.len());
    for (i, tr) in ds.trajectories.iter().enumerate() {
        let name = trajectory_file(i);
        let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(&name))?));
        wtr.write_record(&header)?;
        for t in 0..tr.len() {
            let mut rec = vec![t.to_string()];
            rec.extend(tr.states[t].iter().map(|v| format!("{v}")));
            rec.extend(tr.actions[t].iter().map(|v| format!("{v}")));
            rec.push(tr.subgoal_labels[t].to_string());
            rec.push(tr.task_id.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        entries.push(ManifestEntry {
            file: name,
            task_id: tr.task_id,
            steps: tr.len(),
            boundaries: tr.boundaries.clone(),
        });
    }
    let manifest = Manifest {
        meta: ds.meta.clone(),
        trajectories: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    let (ds_dim, da_dim) = (manifest.meta.state_dim, manifest.meta.action_dim);
    let width = 1 + ds_dim + da_dim + 2;
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for entry in &manifest.trajectories {
        let path = dir.join(&entry.file);
        let parse_err = |detail: String| Error::Parse {
            path: path.clone(),
            detail,
        };
        let mut rdr = csv::Reader::from_path(&path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() != width || headers.get(width - 2) != Some("g_label") {
            return Err(parse_err(format!("unexpected header {headers:?}")));
        }
        let mut tr = Trajectory {
            states: Vec::with_capacity(entry.steps),
            actions: Vec::with_capacity(entry.steps),
            subgoal_labels: Vec::with_capacity(entry.steps),
            boundaries: entry.boundaries.clone(),
            task_id: entry.task_id,
        };
        for rec in rdr.records() {
            let rec = rec?;
            let reals = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
                range
                    .map(|i| rec[i].parse::<f64>().map_err(|e| parse_err(format!("column {i}: {e}"))))
                    .collect()
            };
            tr.states.push(reals(1..1 + ds_dim)?);
            tr.actions.push(reals(1 + ds_dim..1 + ds_dim + da_dim)?);
            let label = rec[width - 2]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("g_label: {e}")))?;
            tr.subgoal_labels.push(label);
        }
        if tr.len() != entry.steps {
            return Err(parse_err(format!("expected {} steps, found {}", entry.steps, tr.len())));
        }
        trajectories.push(tr);
    }
    let ds = Dataset {
        trajectories,
        meta: manifest.meta,
    };
    ds.validate()?;
    Ok(ds)
}
