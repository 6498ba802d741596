//! File formats: dataset CSV, group-map tables, binary mutation panels,
//! e-value table exchange, and result emission.
//!
//! Reals are written with 17 significant digits so that seeded runs are
//! byte-reproducible and parse back to identical doubles.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::efilter::EValueTable;
use crate::error::{Error, Result};
use crate::model::{Dataset, LayerPartition, SelectionResult};
use crate::simlab::{ExperimentResult, SummaryRow};

/// Canonical full-precision rendering (round-trips exactly through f64).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a headered CSV of reals with one response column; every other
/// column is a feature, in file order.
pub fn load_dataset_csv(path: &Path, response_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let response_idx = headers
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::parse(path.display().to_string(), format!("no '{response_column}' column")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != response_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut response = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let loc = |col: &str| format!("{}:row {}:{col}", path.display(), ri + 2);
        let mut row = Vec::with_capacity(feature_names.len());
        for (ci, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::parse(loc(&headers[ci]), format!("cannot parse '{field}' as a real number"))
            })?;
            if ci == response_idx {
                response.push(value);
            } else {
                row.push(value);
            }
        }
        if row.len() != feature_names.len() || response.len() != ri + 1 {
            return Err(Error::parse(
                format!("{}:row {}", path.display(), ri + 2),
                "wrong number of fields".to_string(),
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no data rows".to_string()));
    }
    let n = rows.len();
    let p = feature_names.len();
    let design = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    Dataset::with_names(design, DVector::from_vec(response), Some(feature_names))
}

/// Writes a dataset back out in the same format `load_dataset_csv` reads.
pub fn save_dataset_csv(dataset: &Dataset, path: &Path, response_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let names: Vec<String> = match &dataset.feature_names {
        Some(n) => n.clone(),
        None => (1..=dataset.num_features()).map(|j| format!("x{j}")).collect(),
    };
    let mut header = vec![response_column.to_string()];
    header.extend(names);
    w.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut record = vec![fmt_f64(dataset.response[i])];
        for j in 0..dataset.num_features() {
            record.push(fmt_f64(dataset.design[(i, j)]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Group-map table: columns feature_id, layer, group_id, one row per
/// feature per non-singleton layer. A singleton layer 1 is prepended when
/// the file does not declare layer 1 itself.
pub fn load_group_map(path: &Path, num_features: usize) -> Result<LayerPartition> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("no '{name}' column")))
    };
    let f_idx = col("feature_id")?;
    let l_idx = col("layer")?;
    let g_idx = col("group_id")?;

    // layer number -> group id -> members
    let mut layers: BTreeMap<usize, BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let loc = format!("{}:row {}", path.display(), ri + 2);
        let parse_int = |idx: usize, what: &str| -> Result<u64> {
            record
                .get(idx)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::parse(loc.clone(), format!("bad {what}")))
        };
        let feature = parse_int(f_idx, "feature_id")? as usize;
        let layer = parse_int(l_idx, "layer")? as usize;
        let group = parse_int(g_idx, "group_id")?;
        if feature == 0 || feature > num_features {
            return Err(Error::parse(loc, format!("feature_id {feature} out of [1, {num_features}]")));
        }
        if layer == 0 {
            return Err(Error::parse(loc, "layer must be ≥ 1".to_string()));
        }
        layers.entry(layer).or_default().entry(group).or_default().push(feature);
    }

    let mut built: Vec<Vec<Vec<usize>>> = Vec::new();
    if !layers.contains_key(&1) {
        built.push((1..=num_features).map(|j| vec![j]).collect());
    }
    for (_, groups) in layers {
        built.push(groups.into_values().collect());
    }
    LayerPartition::new(num_features, built)
}

pub fn save_group_map(partition: &LayerPartition, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature_id", "layer", "group_id"])?;
    for (m0, layer) in partition.layers().iter().enumerate() {
        for (g0, members) in layer.groups().iter().enumerate() {
            for &j in members {
                w.write_record([j.to_string(), (m0 + 1).to_string(), (g0 + 1).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Largest feature_id referenced by a group-map file (for loading a
/// partition without a dataset alongside).
pub fn infer_group_map_features(path: &Path) -> Result<usize> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let f_idx = headers
        .iter()
        .position(|h| h == "feature_id")
        .ok_or_else(|| Error::parse(path.display().to_string(), "no 'feature_id' column".to_string()))?;
    let mut max = 0usize;
    for record in reader.records() {
        let record = record?;
        if let Some(v) = record.get(f_idx).and_then(|f| f.trim().parse::<usize>().ok()) {
            max = max.max(v);
        }
    }
    if max == 0 {
        return Err(Error::parse(path.display().to_string(), "no feature ids found".to_string()));
    }
    Ok(max)
}

/// Dataset plus partition; the group map may be omitted for a single
/// singleton layer.
pub fn load_dataset(
    csv_path: &Path,
    group_map_path: Option<&Path>,
    response_column: &str,
) -> Result<(Dataset, LayerPartition)> {
    let dataset = load_dataset_csv(csv_path, response_column)?;
    let partition = match group_map_path {
        Some(p) => load_group_map(p, dataset.num_features())?,
        None => LayerPartition::singletons(dataset.num_features())?,
    };
    Ok((dataset, partition))
}

/// A raw binary mutation panel: a possibly-missing real response, 0/1
/// feature columns, and a position label per feature.
#[derive(Debug, Clone)]
pub struct RawPanel {
    pub response: Vec<Option<f64>>,
    /// features[i][j] ∈ {0, 1}: presence of mutation j in sample i.
    pub features: Vec<Vec<u8>>,
    pub feature_names: Vec<String>,
    pub positions: Vec<String>,
}

impl RawPanel {
    pub fn new(
        response: Vec<Option<f64>>,
        features: Vec<Vec<u8>>,
        feature_names: Vec<String>,
        positions: Vec<String>,
    ) -> Result<Self> {
        let p = feature_names.len();
        if positions.len() != p {
            return Err(Error::invalid_input("one position label per feature required"));
        }
        if positions.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::invalid_input("position labels must be nonempty"));
        }
        if features.len() != response.len() {
            return Err(Error::invalid_input("feature rows and response length differ"));
        }
        for row in &features {
            if row.len() != p {
                return Err(Error::invalid_input("ragged feature rows"));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::invalid_input("panel features must be 0/1"));
            }
        }
        Ok(RawPanel { response, features, feature_names, positions })
    }
}

/// Panel CSV (response column with possibly-empty cells, 0/1 features) plus
/// a group map whose first non-singleton layer assigns each feature column a
/// position.
pub fn load_panel(
    csv_path: &Path,
    group_map_path: &Path,
    response_column: &str,
) -> Result<RawPanel> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let response_idx = headers
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::parse(csv_path.display().to_string(), format!("no '{response_column}' column")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != response_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut response = Vec::new();
    let mut features: Vec<Vec<u8>> = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let loc = format!("{}:row {}", csv_path.display(), ri + 2);
        let mut row = Vec::with_capacity(feature_names.len());
        for (ci, field) in record.iter().enumerate() {
            if ci == response_idx {
                let trimmed = field.trim();
                if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("na") {
                    response.push(None);
                } else {
                    let v: f64 = trimmed.parse().map_err(|_| {
                        Error::parse(loc.clone(), format!("cannot parse response '{field}'"))
                    })?;
                    response.push(Some(v));
                }
            } else {
                match field.trim() {
                    "0" => row.push(0),
                    "1" => row.push(1),
                    other => {
                        return Err(Error::parse(
                            loc,
                            format!("panel feature value '{other}' is not 0/1"),
                        ))
                    }
                }
            }
        }
        features.push(row);
    }

    // Positions from the first non-singleton layer of the group map.
    let partition = load_group_map(group_map_path, feature_names.len())?;
    let layer = if partition.num_layers() >= 2 { partition.layer(2)? } else { partition.layer(1)? };
    let positions: Vec<String> =
        (1..=feature_names.len()).map(|j| layer.group_of(j).to_string()).collect();
    RawPanel::new(response, features, feature_names, positions)
}

/// The panel preprocessing recipe: drop rows without a response, drop
/// features appearing at most `min_count` times among the kept rows, group
/// the remaining mutations by position. Returns the dataset and the
/// two-layer partition (singletons, positions).
pub fn preprocess_panel(raw: &RawPanel, min_count: usize) -> Result<(Dataset, LayerPartition)> {
    let kept_rows: Vec<usize> =
        (0..raw.response.len()).filter(|&i| raw.response[i].is_some()).collect();
    if kept_rows.is_empty() {
        return Err(Error::invalid_input("no rows with a response value remain"));
    }
    let p = raw.feature_names.len();
    let kept_features: Vec<usize> = (0..p)
        .filter(|&j| {
            let count: usize = kept_rows.iter().map(|&i| raw.features[i][j] as usize).sum();
            count > min_count
        })
        .collect();
    if kept_features.is_empty() {
        return Err(Error::invalid_input("no features remain after the frequency filter"));
    }

    let n = kept_rows.len();
    let design = DMatrix::from_fn(n, kept_features.len(), |i, j| {
        raw.features[kept_rows[i]][kept_features[j]] as f64
    });
    let response =
        DVector::from_iterator(n, kept_rows.iter().map(|&i| raw.response[i].unwrap()));
    let names: Vec<String> =
        kept_features.iter().map(|&j| raw.feature_names[j].clone()).collect();

    // Positions in order of first appearance among the kept features.
    let mut position_groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (new_id, &j) in kept_features.iter().enumerate() {
        let label = &raw.positions[j];
        match position_groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, members)) => members.push(new_id + 1),
            None => position_groups.push((label.clone(), vec![new_id + 1])),
        }
    }
    let singles: Vec<Vec<usize>> = (1..=kept_features.len()).map(|j| vec![j]).collect();
    let groups: Vec<Vec<usize>> = position_groups.into_iter().map(|(_, m)| m).collect();
    let partition = LayerPartition::new(kept_features.len(), vec![singles, groups])?;
    let dataset = Dataset::with_names(design, response, Some(names))?;
    Ok((dataset, partition))
}

/// For e-value tables shipped without a group map: checks the file is
/// single-layer and returns its group count.
pub fn infer_single_layer_groups(path: &Path) -> Result<usize> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("no '{name}' column")))
    };
    let l_idx = col("layer")?;
    let g_idx = col("group_id")?;
    let mut max_group = 0usize;
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let loc = format!("{}:row {}", path.display(), ri + 2);
        let layer: usize = record
            .get(l_idx)
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::parse(loc.clone(), "bad layer".to_string()))?;
        if layer != 1 {
            return Err(Error::invalid_input(
                "multi-layer e-value tables need a group map for the partition",
            ));
        }
        if let Some(g) = record.get(g_idx).and_then(|f| f.trim().parse::<usize>().ok()) {
            max_group = max_group.max(g);
        }
    }
    if max_group == 0 {
        return Err(Error::parse(path.display().to_string(), "no usable rows".to_string()));
    }
    Ok(max_group)
}

/// E-value exchange table: columns layer, group_id, evalue.
pub fn load_evalue_table(path: &Path, partition: &LayerPartition) -> Result<EValueTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("no '{name}' column")))
    };
    let l_idx = col("layer")?;
    let g_idx = col("group_id")?;
    let e_idx = col("evalue")?;
    let mut layers: Vec<Vec<Option<f64>>> = partition
        .layers()
        .iter()
        .map(|l| vec![None; l.group_count()])
        .collect();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let loc = format!("{}:row {}", path.display(), ri + 2);
        let layer: usize = record
            .get(l_idx)
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::parse(loc.clone(), "bad layer".to_string()))?;
        let group: usize = record
            .get(g_idx)
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::parse(loc.clone(), "bad group_id".to_string()))?;
        let evalue: f64 = record
            .get(e_idx)
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::parse(loc.clone(), "bad evalue".to_string()))?;
        if layer == 0 || layer > layers.len() {
            return Err(Error::parse(loc, format!("layer {layer} out of range")));
        }
        if group == 0 || group > layers[layer - 1].len() {
            return Err(Error::parse(loc, format!("group {group} out of range for layer {layer}")));
        }
        if layers[layer - 1][group - 1].replace(evalue).is_some() {
            return Err(Error::parse(loc, format!("duplicate entry for layer {layer} group {group}")));
        }
    }
    let mut dense = Vec::with_capacity(layers.len());
    for (m0, layer) in layers.into_iter().enumerate() {
        let filled: Option<Vec<f64>> = layer.into_iter().collect();
        dense.push(filled.ok_or_else(|| {
            Error::parse(
                path.display().to_string(),
                format!("layer {} is missing e-values for some groups", m0 + 1),
            )
        })?);
    }
    EValueTable::new(dense, partition)
}

pub fn save_evalue_table(table: &EValueTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "group_id", "evalue"])?;
    for (m0, layer) in table.layers().iter().enumerate() {
        for (g0, &e) in layer.iter().enumerate() {
            w.write_record([(m0 + 1).to_string(), (g0 + 1).to_string(), fmt_f64(e)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-form experiment records without runtimes (those live in the
/// separate timing file so seeded outputs stay byte-identical).
pub fn write_experiment_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "layer", "param", "value", "trial", "fdp", "power", "selected"])?;
    for r in &result.records {
        w.write_record([
            r.method.clone(),
            r.layer.to_string(),
            r.param_name.clone(),
            fmt_f64(r.param_value),
            r.trial.to_string(),
            fmt_f64(r.fdp),
            fmt_f64(r.power),
            r.selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "param", "value", "trial", "runtime_ms"])?;
    for r in &result.records {
        if r.layer != 1 {
            continue;
        }
        w.write_record([
            r.method.clone(),
            r.param_name.clone(),
            fmt_f64(r.param_value),
            r.trial.to_string(),
            format!("{:.3}", r.runtime_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_failures_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "param", "value", "trial", "message"])?;
    for f in &result.failures {
        w.write_record([
            f.method.clone(),
            f.param_name.clone(),
            fmt_f64(f.param_value),
            f.trial.to_string(),
            f.message.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    rows: &'a [SummaryRow],
    excluded_trials: usize,
}

pub fn write_summary_json(
    rows: &[SummaryRow],
    excluded_trials: usize,
    path: &Path,
) -> Result<()> {
    let doc = SummaryDoc { rows, excluded_trials };
    let mut file = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::invalid_input(format!("summary serialization failed: {e}")))?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Selection report for `analyze`/`filter`, with names when available.
pub fn selection_to_json(
    selection: &SelectionResult,
    partition: &LayerPartition,
    feature_names: Option<&[String]>,
) -> serde_json::Value {
    let named: Vec<serde_json::Value> = selection
        .selected_features
        .iter()
        .map(|&j| match feature_names {
            Some(names) => json!({ "feature": j, "name": names[j - 1] }),
            None => json!({ "feature": j }),
        })
        .collect();
    let layers: Vec<serde_json::Value> = (1..=partition.num_layers())
        .map(|m| {
            json!({
                "layer": m,
                "groups": selection.per_layer_groups[m - 1].iter().copied().collect::<Vec<_>>(),
                "threshold": threshold_json(selection.thresholds.values[m - 1]),
                "fdp_hat": selection.per_layer_fdp_hat[m - 1],
            })
        })
        .collect();
    json!({
        "selected_features": named,
        "layers": layers,
    })
}

fn threshold_json(t: f64) -> serde_json::Value {
    if t.is_infinite() {
        json!("inf")
    } else {
        json!(t)
    }
}

pub fn write_selection_json(
    selection: &SelectionResult,
    partition: &LayerPartition,
    feature_names: Option<&[String]>,
    path: &Path,
) -> Result<()> {
    let value = selection_to_json(selection, partition, feature_names);
    let mut file = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::invalid_input(format!("selection serialization failed: {e}")))?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use tempfile::TempDir;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = TempDir::new().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let design = DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let response = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::with_names(
            design,
            response,
            Some(vec!["a".into(), "b".into(), "c".into()]),
        )
        .unwrap();
        let path = dir.path().join("data.csv");
        save_dataset_csv(&data, &path, "y").unwrap();
        let loaded = load_dataset_csv(&path, "y").unwrap();
        assert_eq!(loaded.design, data.design);
        assert_eq!(loaded.response, data.response);
        assert_eq!(loaded.feature_names, data.feature_names);
    }

    #[test]
    fn loader_reports_row_of_bad_cell() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "y,x1\n1.0,2.0\n,3.0\n").unwrap();
        let err = load_dataset_csv(&path, "y").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "error was: {msg}");
    }

    #[test]
    fn group_map_round_trip_and_implicit_singletons() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("groups.csv");
        std::fs::write(
            &path,
            "feature_id,layer,group_id\n1,2,1\n2,2,1\n3,2,2\n4,2,2\n",
        )
        .unwrap();
        let partition = load_group_map(&path, 4).unwrap();
        assert_eq!(partition.num_layers(), 2);
        assert_eq!(partition.layer(1).unwrap().group_count(), 4);
        assert_eq!(partition.layer(2).unwrap().group_count(), 2);
        assert_eq!(partition.layer(2).unwrap().group_of(3), 2);

        let back = dir.path().join("groups_back.csv");
        save_group_map(&partition, &back).unwrap();
        let reloaded = load_group_map(&back, 4).unwrap();
        assert_eq!(reloaded, partition);
    }

    #[test]
    fn group_map_rejects_partial_layers() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("gap.csv");
        std::fs::write(&path, "feature_id,layer,group_id\n1,2,1\n2,2,1\n").unwrap();
        assert!(load_group_map(&path, 4).is_err());
    }

    fn synthetic_panel(
        n: usize,
        p: usize,
        positions_per: usize,
        missing_rows: usize,
        rare_features: usize,
        seed: u64,
    ) -> RawPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = vec![vec![0u8; p]; n];
        for j in 0..p {
            // Rare features appear exactly 3 times; the rest ~20% of rows.
            if j < rare_features {
                for i in 0..3 {
                    features[(i * 7 + j) % n][j] = 1;
                }
            } else {
                for row in features.iter_mut() {
                    if rng.gen::<f64>() < 0.2 {
                        row[j] = 1;
                    }
                }
            }
        }
        let response: Vec<Option<f64>> = (0..n)
            .map(|i| if i < missing_rows { None } else { Some(rng.sample(StandardNormal)) })
            .collect();
        let names = (1..=p).map(|j| format!("m{j}")).collect();
        let positions = (0..p).map(|j| format!("pos{}", j / positions_per + 1)).collect();
        RawPanel::new(response, features, names, positions).unwrap()
    }

    #[test]
    fn panel_preprocessing_drops_missing_and_rare() {
        let panel = synthetic_panel(50, 12, 3, 5, 2, 7);
        let (data, partition) = preprocess_panel(&panel, 3).unwrap();
        assert_eq!(data.n(), 45);
        // The two rare features appear exactly 3 times: dropped (strictly
        // "more than" the cutoff is required).
        assert_eq!(data.num_features(), 10);
        assert_eq!(partition.num_layers(), 2);
        assert!(partition.layer(2).unwrap().group_count() <= 4);
        assert!(data.feature_names.as_ref().unwrap().iter().all(|n| n != "m1" && n != "m2"));
    }

    #[test]
    fn panel_preprocessing_rejects_all_missing() {
        let panel = synthetic_panel(10, 4, 2, 10, 0, 8);
        assert!(preprocess_panel(&panel, 3).is_err());
    }

    #[test]
    fn evalue_table_round_trip() {
        let dir = TempDir::new().unwrap();
        let partition = LayerPartition::singletons_and_contiguous(4, 2).unwrap();
        let table = EValueTable::new(
            vec![vec![1.5, 0.0, 2.25, 0.125], vec![4.0, 0.5]],
            &partition,
        )
        .unwrap();
        let path = dir.path().join("evalues.csv");
        save_evalue_table(&table, &path).unwrap();
        let loaded = load_evalue_table(&path, &partition).unwrap();
        assert_eq!(loaded, table);
    }

    #[test]
    fn evalue_table_rejects_missing_groups() {
        let dir = TempDir::new().unwrap();
        let partition = LayerPartition::singletons(3).unwrap();
        let path = dir.path().join("short.csv");
        std::fs::write(&path, "layer,group_id,evalue\n1,1,2.0\n1,2,1.0\n").unwrap();
        assert!(load_evalue_table(&path, &partition).is_err());
    }
}
