//! The UCI SPECT heart data (binary features) and a synthetic stand-in.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::expfam::ExpFamilyKind;
use crate::model::ObservationSet;
use crate::rng::stream_rng;

pub const SPECT_FEATURES: usize = 22;
pub const SPECT_ROWS: usize = 267;

fn parse_file(path: &Path, rows: &mut Vec<[f64; SPECT_FEATURES]>) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let before = rows.len();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() != SPECT_FEATURES + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", SPECT_FEATURES + 1, record.len()),
            ));
        }
        let mut row = [0.0; SPECT_FEATURES];
        for (i, field) in record.iter().enumerate() {
            let value = match field {
                "0" => 0.0,
                "1" => 1.0,
                other => return Err(parse_err(line, format!("field {} is `{other}`, not 0 or 1", i + 1))),
            };
            if i > 0 {
                row[i - 1] = value;
            }
        }
        rows.push(row);
    }
    if rows.len() == before {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(())
}

/// Loads the 22 binary features as one fully observed Bernoulli view; the
/// class column is dropped. A directory is read as its `SPECT.train` and
/// `SPECT.test` files combined.
pub fn load_spect(path: &Path) -> Result<ObservationSet> {
    let files: Vec<PathBuf> = if path.is_dir() {
        ["SPECT.train", "SPECT.test"]
            .iter()
            .map(|f| path.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "directory has neither SPECT.train nor SPECT.test".into(),
        });
    }
    let mut rows = Vec::new();
    for f in &files {
        parse_file(f, &mut rows)?;
    }
    if rows.len() != SPECT_ROWS {
        log::warn!(
            "{} has {} rows; the combined UCI partitions have {SPECT_ROWS}",
            path.display(),
            rows.len()
        );
    }
    let x = DMatrix::from_fn(rows.len(), SPECT_FEATURES, |r, c| rows[r][c]);
    ObservationSet::fully_observed(
        x,
        [SPECT_FEATURES, 0],
        [ExpFamilyKind::Bernoulli, ExpFamilyKind::Bernoulli],
    )
}

/// 267 × 22 binary matrix shaped like the real data: every feature has its
/// own prevalence (logit offset around -1) and one latent factor drives
/// them jointly. Roughly 30% of the entries are ones.
pub fn synthetic_spect(seed: u64) -> ObservationSet {
    let mut rng = stream_rng(seed, 0);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let offset: Vec<f64> = (0..SPECT_FEATURES).map(|_| -1.0 + 0.8 * gauss()).collect();
    let v: Vec<f64> = (0..SPECT_FEATURES).map(|_| 1.0 + 0.5 * gauss()).collect();
    let u: Vec<f64> = (0..SPECT_ROWS).map(|_| gauss()).collect();
    let mut rng = stream_rng(seed, 1);
    let x = DMatrix::from_fn(SPECT_ROWS, SPECT_FEATURES, |r, c| {
        let theta = offset[c] + u[r] * v[c];
        let p = 1.0 / (1.0 + (-theta).exp());
        if rng.random::<f64>() < p { 1.0 } else { 0.0 }
    });
    ObservationSet::fully_observed(
        x,
        [SPECT_FEATURES, 0],
        [ExpFamilyKind::Bernoulli, ExpFamilyKind::Bernoulli],
    )
    .expect("binary data is in the Bernoulli support")
}

/// Splits the observed entries into training and held-out masks, holding
/// out `round(fraction · n_observed)` entries chosen uniformly at random
/// among those whose removal leaves their row and column with a training
/// entry.
pub fn make_holdout(obs: &ObservationSet, fraction: f64, seed: u64) -> Result<(DMatrix<bool>, DMatrix<bool>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("holdout.fraction", format!("{fraction} is not in (0, 1)")));
    }
    let (n, d) = (obs.n(), obs.d());
    let mut entries: Vec<(usize, usize)> = (0..d)
        .flat_map(|c| (0..n).map(move |r| (r, c)))
        .filter(|&(r, c)| obs.is_observed(r, c))
        .collect();
    let target = (fraction * entries.len() as f64).round() as usize;
    let mut train = obs.observed().clone();
    let mut hold = DMatrix::from_element(n, d, false);
    let mut row_left: Vec<usize> = (0..n).map(|r| obs.observed().row(r).iter().filter(|&&o| o).count()).collect();
    let mut col_left: Vec<usize> = (0..d).map(|c| obs.observed().column(c).iter().filter(|&&o| o).count()).collect();

    let mut rng = stream_rng(seed, 0);
    entries.shuffle(&mut rng);
    let mut taken = 0;
    for (r, c) in entries {
        if taken == target {
            break;
        }
        if row_left[r] > 1 && col_left[c] > 1 {
            train[(r, c)] = false;
            hold[(r, c)] = true;
            row_left[r] -= 1;
            col_left[c] -= 1;
            taken += 1;
        }
    }
    if taken < target {
        return Err(Error::Mask(format!(
            "only {taken} of {target} entries can be held out without emptying a row or column"
        )));
    }
    Ok((train, hold))
}
