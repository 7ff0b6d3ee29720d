//! Cohort directories: one CSV per modality plus presence and outcomes.
//!
//! ```text
//! modality_{m}.csv   f0,f1,...        one row per patient
//! presence.csv       m0,m1,...        1 present, 0 absent
//! outcomes.csv       patient_id,time,event
//! truth_*.csv        generating factors (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{DrimError, Result};
use crate::synth::{GroundTruth, PatientBatch};

fn modality_file(m: usize) -> String {
    format!("modality_{m}.csv")
}

/// Fail with [`DrimError::Exists`] if `dir` holds anything, unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(|e| DrimError::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(DrimError::Exists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| DrimError::io(dir, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> DrimError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DrimError::io(path, io),
        other => DrimError::Malformed {
            file: path.to_path_buf(),
            row: 0,
            msg: format!("{other:?}"),
        },
    }
}

fn write_matrix(path: &Path, prefix: &str, a: &Array2<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let header: Vec<String> = (0..a.ncols()).map(|j| format!("{prefix}{j}")).collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in a.rows() {
        w.write_record(row.iter().map(f64::to_string)).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DrimError::io(path, e))
}

/// Write `batch` into `dir`; truth files only when asked and available.
pub fn write_cohort(dir: &Path, batch: &PatientBatch, with_truth: bool, force: bool) -> Result<()> {
    batch.check_consistent()?;
    prepare_dir(dir, force)?;
    for (m, f) in batch.features.iter().enumerate() {
        write_matrix(&dir.join(modality_file(m)), "f", f)?;
    }
    let presence = Array2::from_shape_fn((batch.n_patients(), batch.n_modalities()), |(i, m)| {
        f64::from(u8::from(batch.present[m][i]))
    });
    write_matrix(&dir.join("presence.csv"), "m", &presence)?;

    let path = dir.join("outcomes.csv");
    let mut w = writer(&path)?;
    w.write_record(["patient_id", "time", "event"]).map_err(|e| csv_error(&path, e))?;
    for i in 0..batch.n_patients() {
        w.write_record([i.to_string(), batch.time[i].to_string(), u8::from(batch.event[i]).to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| DrimError::io(&path, e))?;

    if with_truth {
        let truth = batch
            .truth
            .as_ref()
            .ok_or_else(|| DrimError::Data("cohort carries no generating factors".into()))?;
        write_matrix(&dir.join("truth_shared.csv"), "z", &truth.shared)?;
        for (m, u) in truth.unique.iter().enumerate() {
            write_matrix(&dir.join(format!("truth_unique_{m}.csv")), "w", u)?;
        }
        let risk = Array2::from_shape_vec((truth.risk.len(), 1), truth.risk.clone()).expect("column");
        write_matrix(&dir.join("truth_risk.csv"), "risk", &risk)?;
    }
    Ok(())
}

fn malformed(file: &Path, row: usize, msg: impl Into<String>) -> DrimError {
    DrimError::Malformed {
        file: file.to_path_buf(),
        row,
        msg: msg.into(),
    }
}

/// Rows of numeric fields. Row numbers in errors count the header as row 1.
fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| malformed(path, row, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(malformed(path, row, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let values = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| malformed(path, row, format!("not a number: {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok((header, rows))
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let (header, rows) = read_rows(path)?;
    let cols = header.len();
    Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("rectangular"))
}

fn count_modalities(dir: &Path) -> usize {
    (0..).take_while(|m| dir.join(modality_file(*m)).exists()).count()
}

/// Load a cohort directory written by [`write_cohort`] or by hand.
pub fn read_cohort(dir: &Path) -> Result<PatientBatch> {
    let m = count_modalities(dir);
    if m == 0 {
        return Err(DrimError::Data(format!("{} holds no modality_0.csv", dir.display())));
    }
    let outcomes_path = dir.join("outcomes.csv");
    let (header, rows) = read_rows(&outcomes_path)?;
    if header != ["patient_id", "time", "event"] {
        return Err(malformed(&outcomes_path, 1, "header must be patient_id,time,event"));
    }
    let n = rows.len();
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for (k, r) in rows.iter().enumerate() {
        if !(r[1].is_finite() && r[1] >= 0.0) {
            return Err(malformed(&outcomes_path, k + 2, format!("invalid time {}", r[1])));
        }
        if r[2] != 0.0 && r[2] != 1.0 {
            return Err(malformed(&outcomes_path, k + 2, format!("event must be 0 or 1, got {}", r[2])));
        }
        time.push(r[1]);
        event.push(r[2] == 1.0);
    }

    let presence_path = dir.join("presence.csv");
    let presence = read_matrix(&presence_path)?;
    if presence.dim() != (n, m) {
        return Err(malformed(
            &presence_path,
            1,
            format!("expected {n} rows of {m} flags, found {:?}", presence.dim()),
        ));
    }
    if let Some(((i, _), v)) = presence.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(malformed(&presence_path, i + 2, format!("presence must be 0 or 1, got {v}")));
    }
    let present: Vec<Vec<bool>> = (0..m).map(|k| (0..n).map(|i| presence[[i, k]] == 1.0).collect()).collect();

    let mut features = Vec::with_capacity(m);
    for (k, flags) in present.iter().enumerate() {
        let path = dir.join(modality_file(k));
        let mut f = read_matrix(&path)?;
        if f.nrows() != n {
            return Err(malformed(&path, 1, format!("expected {n} rows, found {}", f.nrows())));
        }
        for (i, &p) in flags.iter().enumerate() {
            let mut row = f.row_mut(i);
            if p {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(malformed(&path, i + 2, "non-finite feature value"));
                }
            } else {
                row.fill(0.0);
            }
        }
        features.push(f);
    }

    let truth = read_truth(dir, m)?;
    let batch = PatientBatch {
        features,
        present,
        time,
        event,
        truth,
    };
    batch.check_consistent()?;
    Ok(batch)
}

fn read_truth(dir: &Path, m: usize) -> Result<Option<GroundTruth>> {
    let shared_path = dir.join("truth_shared.csv");
    if !shared_path.exists() {
        return Ok(None);
    }
    let shared = read_matrix(&shared_path)?;
    let unique = (0..m)
        .map(|k| read_matrix(&dir.join(format!("truth_unique_{k}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    let risk = read_matrix(&dir.join("truth_risk.csv"))?.column(0).to_vec();
    Ok(Some(GroundTruth { shared, unique, risk }))
}

/// Every file name a cohort directory may contain, for listing.
pub fn cohort_files(dir: &Path, m: usize, with_truth: bool) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = (0..m).map(|k| dir.join(modality_file(k))).collect();
    files.push(dir.join("presence.csv"));
    files.push(dir.join("outcomes.csv"));
    if with_truth {
        files.push(dir.join("truth_shared.csv"));
        files.extend((0..m).map(|k| dir.join(format!("truth_unique_{k}.csv"))));
        files.push(dir.join("truth_risk.csv"));
    }
    files
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GeneratorConfig};

    fn small() -> PatientBatch {
        generate(&GeneratorConfig {
            n_patients: 25,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let batch = small();
        write_cohort(dir.path(), &batch, true, false).unwrap();
        for f in cohort_files(dir.path(), 3, true) {
            assert!(f.exists(), "{}", f.display());
        }
        assert_eq!(read_cohort(dir.path()).unwrap(), batch);

        let bare = tempfile::tempdir().unwrap();
        write_cohort(bare.path(), &batch, false, false).unwrap();
        let back = read_cohort(bare.path()).unwrap();
        assert!(back.truth.is_none());
        assert_eq!(back.features, batch.features);
    }

    #[test]
    fn refuses_to_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let batch = small();
        write_cohort(dir.path(), &batch, false, false).unwrap();
        assert!(matches!(write_cohort(dir.path(), &batch, false, false), Err(DrimError::Exists(_))));
        write_cohort(dir.path(), &batch, false, true).unwrap();
    }

    #[test]
    fn malformed_files_name_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &small(), false, false).unwrap();
        let path = dir.path().join("modality_1.csv");
        let mut text = fs::read_to_string(&path).unwrap();
        let line3_start = text.match_indices('\n').nth(1).unwrap().0 + 1;
        text.insert_str(line3_start, "abc");
        fs::write(&path, text).unwrap();
        match read_cohort(dir.path()) {
            Err(DrimError::Malformed { file, row, .. }) => {
                assert_eq!(file, path);
                assert_eq!(row, 3);
            }
            other => panic!("{other:?}"),
        }

        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &small(), false, false).unwrap();
        let path = dir.path().join("outcomes.csv");
        let text = fs::read_to_string(&path).unwrap().replacen(",1\n", ",7\n", 1);
        fs::write(&path, text).unwrap();
        let err = read_cohort(dir.path()).unwrap_err().to_string();
        assert!(err.contains("outcomes.csv") && err.contains("event"), "{err}");
    }
}
