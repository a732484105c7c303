//! Fit directories: factor CSVs, the loss trace and the configuration.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FitResult, LossBreakdown, SeqNmfConfig};
use crate::error::{Error, Result};
use crate::tensorops::{Matrix, Tensor3};

pub const O_FILE: &str = "O.csv";
pub const H_FILE: &str = "H.csv";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const FIT_CONFIG_FILE: &str = "fit.json";

#[derive(Debug, Serialize, Deserialize)]
struct FitManifest {
    config: SeqNmfConfig,
    iterations_run: usize,
    converged: bool,
    final_loss: LossBreakdown,
    dead_factors: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    iter: usize,
    reconstruction: f64,
    r_bin: f64,
    r_1: f64,
    r_sim: f64,
    total: f64,
}

pub fn save_fit(fit: &FitResult, cfg: &SeqNmfConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fit.o.write_csv(BufWriter::new(File::create(dir.join(O_FILE))?))?;
    fit.h.write_csv(BufWriter::new(File::create(dir.join(H_FILE))?))?;
    let mut wtr = csv::Writer::from_path(dir.join(LOSS_TRACE_FILE))?;
    for (iter, l) in fit.loss_trace.iter().enumerate() {
        wtr.serialize(TraceRow {
            iter,
            reconstruction: l.reconstruction,
            r_bin: l.r_bin,
            r_1: l.r_1,
            r_sim: l.r_sim,
            total: l.total,
        })?;
    }
    wtr.flush()?;
    let manifest = FitManifest {
        config: *cfg,
        iterations_run: fit.iterations_run,
        converged: fit.converged,
        final_loss: fit.final_loss,
        dead_factors: fit.dead_factors.clone(),
    };
    fs::write(dir.join(FIT_CONFIG_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_fit(dir: &Path) -> Result<(FitResult, SeqNmfConfig)> {
    let manifest_path = dir.join(FIT_CONFIG_FILE);
    let manifest: FitManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            detail: e.to_string(),
        })?;
    let o = Tensor3::read_csv(BufReader::new(File::open(dir.join(O_FILE))?))?;
    let h = Matrix::read_csv(BufReader::new(File::open(dir.join(H_FILE))?))?;
    if o.factors() != h.rows() {
        return Err(Error::Parse {
            path: dir.join(H_FILE),
            detail: format!("{} activation rows for {} factors", h.rows(), o.factors()),
        });
    }
    let mut rdr = csv::Reader::from_path(dir.join(LOSS_TRACE_FILE))?;
    let loss_trace = rdr
        .deserialize::<TraceRow>()
        .map(|r| {
            r.map(|r| LossBreakdown {
                reconstruction: r.reconstruction,
                r_bin: r.r_bin,
                r_1: r.r_1,
                r_sim: r.r_sim,
                total: r.total,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((
        FitResult {
            o,
            h,
            loss_trace,
            final_loss: manifest.final_loss,
            iterations_run: manifest.iterations_run,
            converged: manifest.converged,
            dead_factors: manifest.dead_factors,
        },
        manifest.config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqnmf::fit;

    #[test]
    fn fit_round_trip() {
        let x = Matrix::from_fn(2, 30, |r, c| ((r + c) % 3) as f64 / 2.0);
        let cfg = SeqNmfConfig {
            j: 2,
            l: 3,
            max_iter: 5,
            ..SeqNmfConfig::default()
        };
        let res = fit(&x, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_fit(&res, &cfg, dir.path()).unwrap();
        let (back, cfg_back) = load_fit(dir.path()).unwrap();
        assert_eq!(back, res);
        assert_eq!(cfg_back, cfg);
    }
}
