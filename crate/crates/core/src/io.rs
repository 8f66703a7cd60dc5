//! Delimited-text data files, chain metadata and run configuration.
//!
//! Locations: `id,x,y`. Multinomial observations: `id,f1,…,fM` with 1-based
//! labels and an empty field for a missing cell. Counts: `id,sp1,…,spM`.
//! Probability tables: `id,feature,category,probability` (1-based).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryMatrix;
use crate::chain::ChainOutput;
use crate::error::{Error, Result};
use crate::gibbs::{GammaPrior, SamplerConfig};
use crate::kernels::{KernelSpec, Location};
use crate::multinomial::MultinomialData;
use crate::negbin::CountData;
use crate::predict::FactorPrediction;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Header plus data rows with their 1-based line numbers.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(BufReader::new(file));
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) => return Err(parse_err(path, 1, e.to_string())),
    };
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(path, 1, "missing header"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(Table { header, rows })
}

fn expect_header(path: &Path, header: &[String], prefix: &[&str]) -> Result<()> {
    if header.len() < prefix.len() || header.iter().zip(prefix).any(|(h, p)| !h.eq_ignore_ascii_case(p)) {
        return Err(parse_err(path, 1, format!("header must start with {}", prefix.join(","))));
    }
    Ok(())
}

fn check_unique_ids<'a>(path: &Path, ids: impl Iterator<Item = (usize, &'a str)>) -> Result<()> {
    let mut seen = HashMap::new();
    for (line, id) in ids {
        if id.is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        if let Some(first) = seen.insert(id.to_string(), line) {
            return Err(parse_err(path, line, format!("duplicate id '{id}' (first on line {first})")));
        }
    }
    Ok(())
}

pub fn read_locations(path: &Path) -> Result<Vec<Location>> {
    let table = read_table(path)?;
    expect_header(path, &table.header, &["id", "x", "y"])?;
    check_unique_ids(path, table.rows.iter().map(|(l, r)| (*l, r[0].as_str())))?;
    table
        .rows
        .iter()
        .map(|(line, r)| {
            let coord = |s: &str, name: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| parse_err(path, *line, format!("{name} '{s}' is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, *line, format!("{name} is not finite")));
                }
                Ok(v)
            };
            Ok(Location::new(r[0].clone(), coord(&r[1], "x")?, coord(&r[2], "y")?))
        })
        .collect()
}

pub fn write_locations(path: &Path, locations: &[Location]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "x", "y"]).map_err(csv_io)?;
    for l in locations {
        w.write_record([l.id.clone(), l.coords[0].to_string(), l.coords[1].to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Observations with their subject ids, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled<T> {
    pub ids: Vec<String>,
    pub data: T,
}

pub fn read_multinomial(path: &Path, categories: Option<Vec<usize>>) -> Result<Labeled<MultinomialData>> {
    let table = read_table(path)?;
    expect_header(path, &table.header, &["id"])?;
    if table.header.len() < 2 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    check_unique_ids(path, table.rows.iter().map(|(l, r)| (*l, r[0].as_str())))?;
    let mut rows = Vec::with_capacity(table.rows.len());
    for (line, r) in &table.rows {
        let mut row = Vec::with_capacity(r.len() - 1);
        for (f, cell) in r[1..].iter().enumerate() {
            if cell.is_empty() {
                row.push(None);
                continue;
            }
            let v: usize = cell.parse().map_err(|_| {
                parse_err(path, *line, format!("feature {}: '{cell}' is not a positive integer category", f + 1))
            })?;
            if v == 0 {
                return Err(parse_err(path, *line, format!("feature {}: categories are 1-based", f + 1)));
            }
            if let Some(c) = categories.as_ref().and_then(|c| c.get(f)) {
                if v > *c {
                    return Err(parse_err(path, *line, format!("feature {}: category {v} exceeds {c}", f + 1)));
                }
            }
            row.push(Some(v));
        }
        rows.push(row);
    }
    let data = MultinomialData::from_labels(&rows, categories).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(Labeled { ids: table.rows.iter().map(|(_, r)| r[0].clone()).collect(), data })
}

pub fn write_multinomial(path: &Path, ids: &[String], data: &MultinomialData) -> Result<()> {
    if ids.len() != data.n_subjects() {
        return Err(Error::Shape("one id per subject is required".into()));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let header: Vec<String> =
        std::iter::once("id".to_string()).chain((1..=data.n_features()).map(|f| format!("f{f}"))).collect();
    w.write_record(&header).map_err(csv_io)?;
    for (i, id) in ids.iter().enumerate() {
        let row: Vec<String> = std::iter::once(id.clone())
            .chain((0..data.n_features()).map(|m| data.get(i, m).map_or(String::new(), |v| (v + 1).to_string())))
            .collect();
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_counts(path: &Path) -> Result<Labeled<CountData>> {
    let table = read_table(path)?;
    expect_header(path, &table.header, &["id"])?;
    if table.header.len() < 2 {
        return Err(parse_err(path, 1, "no species columns"));
    }
    check_unique_ids(path, table.rows.iter().map(|(l, r)| (*l, r[0].as_str())))?;
    let mut rows = Vec::with_capacity(table.rows.len());
    for (line, r) in &table.rows {
        let row = r[1..]
            .iter()
            .enumerate()
            .map(|(f, cell)| {
                cell.parse::<u64>().map_err(|_| {
                    let msg = if cell.is_empty() {
                        "missing counts are not supported".to_string()
                    } else {
                        format!("'{cell}' is not a nonnegative integer count")
                    };
                    parse_err(path, *line, format!("column {}: {msg}", f + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let data = CountData::from_rows(&rows).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(Labeled { ids: table.rows.iter().map(|(_, r)| r[0].clone()).collect(), data })
}

pub fn write_counts(path: &Path, ids: &[String], data: &CountData) -> Result<()> {
    if ids.len() != data.n_subjects() {
        return Err(Error::Shape("one id per subject is required".into()));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let header: Vec<String> =
        std::iter::once("id".to_string()).chain((1..=data.n_features()).map(|f| format!("sp{f}"))).collect();
    w.write_record(&header).map_err(csv_io)?;
    for (i, id) in ids.iter().enumerate() {
        let row: Vec<String> = std::iter::once(id.clone()).chain(data.row(i).iter().map(u64::to_string)).collect();
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reorders `locations` to follow `ids`; every id must appear exactly once on both sides.
pub fn align_locations(locations: &[Location], ids: &[String], obs_path: &Path) -> Result<Vec<Location>> {
    let by_id: HashMap<&str, &Location> = locations.iter().map(|l| (l.id.as_str(), l)).collect();
    if by_id.len() != ids.len() {
        return Err(parse_err(
            obs_path,
            0,
            format!("{} observation rows but {} locations", ids.len(), by_id.len()),
        ));
    }
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            by_id
                .get(id.as_str())
                .map(|l| (*l).clone())
                .ok_or_else(|| parse_err(obs_path, i + 2, format!("id '{id}' has no location")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    Multinomial(MultinomialData),
    Counts(CountData),
}

/// Locations aligned row by row with the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub observations: Observations,
}

impl Dataset {
    pub fn missing_mask(&self) -> Vec<bool> {
        match &self.observations {
            Observations::Multinomial(d) => d.missing_mask(),
            Observations::Counts(d) => vec![false; d.n_subjects() * d.n_features()],
        }
    }
}

pub fn load_dataset(locations_path: &Path, observations_path: &Path, model: ModelKind) -> Result<Dataset> {
    let locs = read_locations(locations_path)?;
    let (ids, observations) = match model {
        ModelKind::Multinomial => {
            let l = read_multinomial(observations_path, None)?;
            (l.ids, Observations::Multinomial(l.data))
        }
        ModelKind::Negbin => {
            let l = read_counts(observations_path)?;
            (l.ids, Observations::Counts(l.data))
        }
    };
    let locations = align_locations(&locs, &ids, observations_path)?;
    Ok(Dataset { locations, observations })
}

/// Long-format probability table `id,feature,category,probability`, indexed
/// [site][feature][category] in the order of `ids`.
pub fn write_probabilities(path: &Path, ids: &[String], probs: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "feature", "category", "probability"]).map_err(csv_io)?;
    for (id, site) in ids.iter().zip(probs) {
        for (m, p) in site.iter().enumerate() {
            for (l, v) in p.iter().enumerate() {
                w.write_record([id.clone(), (m + 1).to_string(), (l + 1).to_string(), format!("{v:.17e}")])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a probability table back; sites follow first appearance in the file.
pub fn read_probabilities(path: &Path) -> Result<Labeled<Vec<Vec<Vec<f64>>>>> {
    let table = read_table(path)?;
    expect_header(path, &table.header, &["id", "feature", "category", "probability"])?;
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for (line, r) in &table.rows {
        let pos = |s: &str, name: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(parse_err(path, *line, format!("{name} '{s}' is not a positive integer"))),
            }
        };
        let (m, l) = (pos(&r[1], "feature")?, pos(&r[2], "category")?);
        let p: f64 = r[3].parse().map_err(|_| parse_err(path, *line, format!("'{}' is not a probability", r[3])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(parse_err(path, *line, format!("probability {p} outside [0, 1]")));
        }
        let s = *index.entry(r[0].clone()).or_insert_with(|| {
            ids.push(r[0].clone());
            out.push(Vec::new());
            out.len() - 1
        });
        let site = &mut out[s];
        if site.len() <= m {
            site.resize(m + 1, Vec::new());
        }
        if site[m].len() <= l {
            site[m].resize(l + 1, f64::NAN);
        }
        site[m][l] = p;
    }
    if out.iter().flatten().flatten().any(|v| v.is_nan()) {
        return Err(parse_err(path, 0, "probability table has gaps"));
    }
    Ok(Labeled { ids, data: out })
}

/// Prediction records `id,factor,probability` (factor 1-based).
pub fn write_predictions(path: &Path, predictions: &[FactorPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "factor", "probability"]).map_err(csv_io)?;
    for p in predictions {
        for (k, v) in p.presence.iter().enumerate() {
            w.write_record([p.site.id.clone(), (k + 1).to_string(), v.to_string()]).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Factor table `id,factor,probability` (factor 1-based) from an n × K matrix.
pub fn write_factor_table(path: &Path, ids: &[String], values: &DMatrix<f64>) -> Result<()> {
    if ids.len() != values.nrows() {
        return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), values.nrows())));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "factor", "probability"]).map_err(csv_io)?;
    for (i, id) in ids.iter().enumerate() {
        for k in 0..values.ncols() {
            w.write_record([id.clone(), (k + 1).to_string(), values[(i, k)].to_string()]).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a factor table; rows follow first appearance of each id.
pub fn read_factor_table(path: &Path) -> Result<Labeled<DMatrix<f64>>> {
    let table = read_table(path)?;
    expect_header(path, &table.header, &["id", "factor", "probability"])?;
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells = Vec::new();
    let mut k_max = 0;
    for (line, r) in &table.rows {
        let k = match r[1].parse::<usize>() {
            Ok(v) if v >= 1 => v - 1,
            _ => return Err(parse_err(path, *line, format!("factor '{}' is not a positive integer", r[1]))),
        };
        let p: f64 = r[2].parse().map_err(|_| parse_err(path, *line, format!("'{}' is not a probability", r[2])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(parse_err(path, *line, format!("probability {p} outside [0, 1]")));
        }
        let i = *index.entry(r[0].clone()).or_insert_with(|| {
            ids.push(r[0].clone());
            ids.len() - 1
        });
        k_max = k_max.max(k + 1);
        cells.push((*line, i, k, p));
    }
    let mut out = DMatrix::from_element(ids.len(), k_max, f64::NAN);
    for (line, i, k, p) in cells {
        if !out[(i, k)].is_nan() {
            return Err(parse_err(path, line, format!("duplicate entry for '{}', factor {}", ids[i], k + 1)));
        }
        out[(i, k)] = p;
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(parse_err(path, 0, "factor table has gaps"));
    }
    Ok(Labeled { ids, data: out })
}

/// Posterior presence probabilities of the fitted subjects.
pub fn write_presence(path: &Path, ids: &[String], chain: &ChainOutput) -> Result<()> {
    write_factor_table(path, ids, &chain.presence())
}

/// A binary membership matrix as a 0/1 factor table.
pub fn write_membership(path: &Path, ids: &[String], z: &BinaryMatrix) -> Result<()> {
    let m = DMatrix::from_fn(z.nrows(), z.ncols(), |i, k| if z.get(i, k) { 1.0 } else { 0.0 });
    write_factor_table(path, ids, &m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Multinomial,
    Negbin,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multinomial" => Ok(Self::Multinomial),
            "negbin" | "negative-binomial" => Ok(Self::Negbin),
            other => Err(Error::invalid(format!("unknown model '{other}'"))),
        }
    }
}

/// Observation-model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// γ_0 for the baselines.
    pub baseline_precision: f64,
    /// γ_k for every factor effect.
    pub effect_precision: f64,
    /// Ga(a_ν, b_ν) prior on the dispersions.
    pub nu_prior: GammaPrior,
    /// Gamma hyperprior on γ_1..γ_K (multinomial model); fixed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effect_prior: Option<GammaPrior>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { baseline_precision: 1.0, effect_precision: 1.0, nu_prior: GammaPrior { shape: 2.0, rate: 1.0 }, effect_prior: None }
    }
}

impl ModelConfig {
    pub fn gammas(&self, k: usize) -> Vec<f64> {
        std::iter::once(self.baseline_precision).chain(std::iter::repeat_n(self.effect_precision, k)).collect()
    }
}

/// Everything `fit` needs besides the data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub sampler: SamplerConfig,
    pub priors: ModelConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Parse { path: "<config>".into(), line, message: e.message().to_string() }
        })?;
        cfg.sampler.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => parse_err(path, line, message),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Sidecar describing a persisted chain so it can be read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub model: ModelKind,
    pub n_subjects: usize,
    pub n_factors: usize,
    pub kernel: KernelSpec,
    pub ids: Vec<String>,
    pub config: RunConfig,
    /// Category counts (multinomial) or an empty list.
    #[serde(default)]
    pub categories: Vec<usize>,
    pub n_features: usize,
    pub chains: usize,
    pub psi_acceptance: f64,
    pub locations: PathBuf,
    pub observations: PathBuf,
}

impl ChainMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

pub fn write_chain(path: &Path, chain: &ChainOutput) -> Result<()> {
    chain.write_draws(BufWriter::new(File::create(path)?))
}

pub fn read_chain(path: &Path, meta: &ChainMeta) -> Result<ChainOutput> {
    let reader = BufReader::new(File::open(path)?);
    ChainOutput::read_draws(reader, meta.n_subjects, meta.n_factors, meta.kernel).map_err(|e| match e {
        Error::Parse { line, message, .. } => parse_err(path, line, message),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_seeded, ScenarioKind, ScenarioSpec};
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_observation_file() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "obs.csv", "id,f1,f2\n");
        let err = read_multinomial(&p, None).unwrap_err();
        assert!(err.to_string().contains("no data rows"), "{err}");
        let p = write(dir.path(), "empty.csv", "");
        assert!(read_multinomial(&p, None).is_err());
    }

    #[test]
    fn factor_table_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.csv");
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let z = BinaryMatrix::from_rows(&[vec![true, false, true], vec![false, false, true]]);
        write_membership(&p, &ids, &z).unwrap();
        let t = read_factor_table(&p).unwrap();
        assert_eq!(t.ids, ids);
        assert_eq!(t.data, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let p = write(dir.path(), "gap.csv", "id,factor,probability\na,1,0.5\na,2,0.1\nb,1,0.2\n");
        assert!(read_factor_table(&p).unwrap_err().to_string().contains("gaps"));
        let p = write(dir.path(), "dup.csv", "id,factor,probability\na,1,0.5\na,1,0.1\n");
        assert!(matches!(read_factor_table(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn one_missing_cell() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "obs.csv", "id,f1,f2\na,1,2\nb,,3\nc,2,1\n");
        let l = read_multinomial(&p, None).unwrap();
        assert_eq!(l.data.missing_mask().iter().filter(|&&m| m).count(), 1);
        assert!(l.data.is_missing(1, 0));
        assert_eq!(l.data.categories(), &[2, 3]);
    }

    #[test]
    fn typed_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "obs.csv", "id,f1\na,1\nb,1.5\n");
        match read_multinomial(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "cnt.csv", "id,sp1\na,4\nb,-2\n");
        match read_counts(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("nonnegative"));
            }
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "loc.csv", "id,x,y\na,0,0\na,1,1\n");
        match read_locations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "ragged.csv", "id,x,y\na,0,0\nb,1\n");
        match read_locations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn misaligned_ids_rejected() {
        let dir = tempdir().unwrap();
        let loc = write(dir.path(), "loc.csv", "id,x,y\na,0,0\nb,1,1\n");
        let obs = write(dir.path(), "obs.csv", "id,f1\na,1\nc,2\n");
        assert!(matches!(load_dataset(&loc, &obs, ModelKind::Multinomial), Err(Error::Parse { .. })));
        let obs = write(dir.path(), "obs2.csv", "id,f1\nb,1\na,2\n");
        let ds = load_dataset(&loc, &obs, ModelKind::Multinomial).unwrap();
        assert_eq!(ds.locations[0].id, "b");
        assert_eq!(ds.missing_mask(), vec![false, false]);
    }

    #[test]
    fn scenario_round_trip() {
        let dir = tempdir().unwrap();
        let sc = generate_seeded(&ScenarioSpec::new(ScenarioKind::I, 25, 5, 4)).unwrap();
        let ids: Vec<String> = sc.locations.iter().map(|l| l.id.clone()).collect();
        let (lp, op, pp) = (dir.path().join("l.csv"), dir.path().join("o.csv"), dir.path().join("p.csv"));
        write_locations(&lp, &sc.locations).unwrap();
        write_multinomial(&op, &ids, &sc.data).unwrap();
        write_probabilities(&pp, &ids, &sc.probs).unwrap();
        let ds = load_dataset(&lp, &op, ModelKind::Multinomial).unwrap();
        assert_eq!(ds.locations, sc.locations);
        match ds.observations {
            Observations::Multinomial(d) => {
                for i in 0..25 {
                    assert_eq!(d.labels(i), sc.data.labels(i));
                }
            }
            _ => unreachable!(),
        }
        let back = read_probabilities(&pp).unwrap();
        assert_eq!(back.ids, ids);
        assert_eq!(back.data, sc.probs);
    }

    #[test]
    fn counts_round_trip() {
        let dir = tempdir().unwrap();
        let data = CountData::from_rows(&[vec![0, 3, 17], vec![5, 0, 1]]).unwrap();
        let ids = vec!["p1".to_string(), "p2".to_string()];
        let p = dir.path().join("c.csv");
        write_counts(&p, &ids, &data).unwrap();
        let back = read_counts(&p).unwrap();
        assert_eq!(back.ids, ids);
        assert_eq!(back.data, data);
    }

    #[test]
    fn config_overrides_and_defaults() {
        let cfg = RunConfig::from_toml_str(
            "model = \"negbin\"\n[sampler]\ntruncation = 4\nburn_in = 10\nkeep = 5\n[sampler.tau_prior]\nshape = 2.0\nrate = 3.0\n[priors]\neffect_precision = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::Negbin);
        assert_eq!(cfg.sampler.truncation, 4);
        assert_eq!(cfg.sampler.tau_prior.rate, 3.0);
        assert_eq!(cfg.sampler.repulsion, SamplerConfig::default().repulsion);
        assert_eq!(cfg.priors.gammas(2), vec![1.0, 0.5, 0.5]);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        match RunConfig::from_toml_str("[sampler]\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml_str("[sampler]\nkeep = 0\n").is_err());
    }
}
