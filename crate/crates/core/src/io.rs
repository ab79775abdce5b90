//! File formats: numeric CSV matrices, summary and trace tables, the TOML
//! run configuration and the JSON fit document.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LfmError, Result};
use crate::experiments::{ColumnSizeLaw, ExperimentConfig, SummaryRow};
use crate::features::BinaryFeatureMatrix;
use crate::model::Dataset;
use crate::prior::{PhyloTree, PriorSpec, DEFAULT_QUADRATURE_POINTS};
use crate::sampler::{Mode, RunOutput, SamplerConfig, TemperatureLadder, TraceRow};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> LfmError {
    LfmError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a rectangular numeric CSV. A first row containing any
/// non-numeric cell is treated as a header and skipped.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => LfmError::io(path, source),
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, usize> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().map_err(|_| c))
            .collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && width.is_none() => {
                width = Some(record.len());
                continue;
            }
            Err(c) => {
                return Err(parse_err(
                    path,
                    line,
                    format!("column {} is not a number: `{}`", c + 1, &record[c]),
                ))
            }
        };
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(path, line, format!("column {} is not finite", bad + 1)));
        }
        match width {
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected {w} fields, found {}", values.len()),
                ))
            }
            _ => width = Some(values.len()),
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no numeric rows"));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// n×p observation matrix from CSV (rows are samples).
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::new(read_matrix_csv(path)?)
}

/// p×K 0/1 matrix from CSV (rows are objects).
pub fn load_binary_matrix_csv(path: impl AsRef<Path>) -> Result<BinaryFeatureMatrix> {
    let path = path.as_ref();
    let m = read_matrix_csv(path)?;
    let rows: Vec<Vec<u8>> = (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| match m[(i, j)] {
                    0.0 => Ok(0),
                    1.0 => Ok(1),
                    v => Err(parse_err(path, i + 1, format!("entry {v} is not 0 or 1"))),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    BinaryFeatureMatrix::from_rows(&rows)
}

/// Centres every row of X to mean zero.
pub fn standardize_rows(d: &Dataset) -> Result<Dataset> {
    let mut x = d.x().clone();
    for mut row in x.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Dataset::new(x)
}

fn create_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| LfmError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> LfmError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => LfmError::io(path, source),
        other => LfmError::Serialization(format!("{}: {other:?}", path.display())),
    }
}

/// Writes a real matrix, one row per line, with an optional header.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_err(path, e))?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LfmError::io(path, e))
}

/// Writes Z as p rows of K 0/1 entries.
pub fn write_binary_matrix_csv(path: impl AsRef<Path>, z: &BinaryFeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    if z.k() == 0 {
        // a rectangular file needs at least one column
        return fs::write(path, "").map_err(|e| LfmError::io(path, e));
    }
    let mut w = create_writer(path)?;
    for j in 0..z.p() {
        w.write_record(z.row(j).iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LfmError::io(path, e))
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    if rows.is_empty() {
        w.write_record(["n", "p", "s", "k_star", "reps", "mean_k", "sd_k", "mean_residual", "sd_residual"])
            .map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LfmError::io(path, e))
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(i + 2);
                parse_err(path, line, e.to_string())
            })
        })
        .collect()
}

/// Long-format trace: iteration,chain,k,loglik,residual.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    w.write_record(["iteration", "chain", "k", "loglik", "residual"])
        .map_err(|e| csv_err(path, e))?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.chain.to_string(),
            r.k.to_string(),
            r.loglik.to_string(),
            r.residual.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LfmError::io(path, e))
}

pub fn read_tree_file(path: impl AsRef<Path>) -> Result<PhyloTree> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| LfmError::io(path, e))?;
    PhyloTree::parse_newick(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorChoice {
    #[default]
    Ibp,
    Pibp,
}

impl std::str::FromStr for PriorChoice {
    type Err = LfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibp" => Ok(Self::Ibp),
            "pibp" => Ok(Self::Pibp),
            other => Err(LfmError::Config(format!(
                "unknown prior `{other}` (expected ibp or pibp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub chains: usize,
    pub beta: f64,
    pub iters: usize,
    pub k_max_plus: usize,
    pub mode: Mode,
    pub thin: usize,
    pub residual_every: usize,
    pub trace_all_chains: bool,
    /// Defaults to iters / 2.
    pub burn_in: Option<usize>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            chains: 11,
            beta: 1.2,
            iters: 1000,
            k_max_plus: 10,
            mode: Mode::Theory,
            thin: 1,
            residual_every: 1,
            trace_all_chains: false,
            burn_in: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub kind: PriorChoice,
    pub tree: Option<PathBuf>,
    pub quadrature_points: usize,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            kind: PriorChoice::Ibp,
            tree: None,
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub reps: usize,
    pub s: usize,
    pub k_star: usize,
    pub column_sizes: ColumnSizeLaw,
    pub n_values: Vec<usize>,
    pub p_values: Vec<usize>,
    /// Tolerated max/min residual ratio across p in trend reports.
    pub robustness_factor: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            reps: 10,
            s: 10,
            k_star: 10,
            column_sizes: ColumnSizeLaw::Exact,
            n_values: vec![20, 50, 80, 100],
            p_values: vec![50, 100, 150],
            robustness_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n: usize,
    pub p: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n: 100, p: 50 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Centre each row of X before fitting.
    pub standardize: bool,
}

/// Run configuration as read from TOML (or JSON). Every field has a
/// default except the seed, which must come from the file or the command
/// line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub sampler: SamplerSection,
    pub prior: PriorSection,
    pub experiment: ExperimentSection,
    pub simulate: SimulateSection,
    pub fit: FitSection,
}

impl RunConfigFile {
    /// Parses a `.json` file as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LfmError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LfmError::Config(e.to_string()))
    }

    /// Accepts a bare configuration or a fit document carrying one under `config`.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LfmError::Config(e.to_string()))?;
        if let Some(inner) = value.get_mut("config").map(serde_json::Value::take) {
            value = inner;
        }
        serde_json::from_value(value).map_err(|e| LfmError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LfmError::Serialization(e.to_string()))
    }

    /// Fills derived defaults so that the echo reproduces the run.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        if out.seed.is_none() {
            return Err(LfmError::Config(
                "a seed is required (config `seed` or --seed)".into(),
            ));
        }
        out.sampler.burn_in.get_or_insert(out.sampler.iters / 2);
        Ok(out)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| LfmError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn prior_spec(&self) -> Result<PriorSpec> {
        let spec = match self.prior.kind {
            PriorChoice::Ibp => PriorSpec::ibp(),
            PriorChoice::Pibp => {
                let path = self.prior.tree.as_ref().ok_or_else(|| {
                    LfmError::Config("the pibp prior needs a tree file (--tree)".into())
                })?;
                PriorSpec::pibp(read_tree_file(path)?)
            }
        };
        if self.prior.quadrature_points == 0 {
            return Err(LfmError::Config("quadrature_points must be positive".into()));
        }
        Ok(spec.with_quadrature_points(self.prior.quadrature_points))
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let s = &self.sampler;
        let ladder = TemperatureLadder::geometric(s.chains, s.beta)?;
        let mut cfg = SamplerConfig::new(s.iters, ladder, self.seed()?);
        cfg.k_max_plus = s.k_max_plus;
        cfg.mode = s.mode;
        cfg.prior = self.prior_spec()?;
        cfg.thin = s.thin;
        cfg.residual_every = s.residual_every;
        cfg.trace_all_chains = s.trace_all_chains;
        cfg.burn_in = s.burn_in.unwrap_or(s.iters / 2);
        Ok(cfg)
    }

    /// One experiment per (n, p) of the design grid, in row-major order
    /// over p then n.
    pub fn experiment_grid(&self) -> Result<Vec<ExperimentConfig>> {
        let e = &self.experiment;
        if e.n_values.is_empty() || e.p_values.is_empty() {
            return Err(LfmError::Config("experiment grid is empty".into()));
        }
        let base = self.sampler_config()?;
        let seed = self.seed()?;
        let mut out = Vec::new();
        for &p in &e.p_values {
            for &n in &e.n_values {
                let cfg = ExperimentConfig {
                    n,
                    p,
                    s: e.s,
                    k_star: e.k_star,
                    reps: e.reps,
                    column_sizes: e.column_sizes,
                    sampler: base.clone(),
                    seed,
                };
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub iteration: usize,
    /// Ẑ as p rows of K entries, columns sorted by decreasing popularity.
    pub z: Vec<Vec<u8>>,
    pub k: usize,
    pub column_sums: Vec<usize>,
    pub max_column_sum: usize,
    pub alpha: f64,
    pub sigma2: f64,
    pub sigma_a2: f64,
    /// Â as K rows of n entries, rows in the same order as Ẑ's columns.
    pub loadings: Option<Vec<Vec<f64>>>,
    pub log_kernel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResultDocument {
    pub seed: u64,
    pub config: RunConfigFile,
    pub n: usize,
    pub p: usize,
    pub map: MapDocument,
    pub swap_attempts: Vec<u64>,
    pub swap_accepts: Vec<u64>,
    pub swap_acceptance: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub wall_clock_seconds: f64,
}

impl FitResultDocument {
    pub fn new(config: RunConfigFile, data: &Dataset, out: &RunOutput, wall_clock_seconds: f64) -> Result<Self> {
        let (z, order) = out.map.z.sorted_by_popularity();
        let loadings = out.map.params.loadings.as_ref().map(|a| {
            order
                .iter()
                .map(|&k| a.row(k).iter().copied().collect())
                .collect()
        });
        let column_sums = z.column_sums();
        Ok(Self {
            seed: config.seed()?,
            n: data.n(),
            p: data.p(),
            map: MapDocument {
                iteration: out.map.iteration,
                k: z.k(),
                max_column_sum: column_sums.iter().copied().max().unwrap_or(0),
                column_sums,
                z: z.to_rows(),
                alpha: out.map.alpha,
                sigma2: out.map.params.sigma2,
                sigma_a2: out.map.params.sigma_a2,
                loadings,
                log_kernel: out.map.log_kernel,
            },
            swap_acceptance: out.swaps.rates(),
            swap_attempts: out.swaps.attempts.clone(),
            swap_accepts: out.swaps.accepts.clone(),
            trace: out.trace.clone(),
            config,
            wall_clock_seconds,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LfmError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LfmError::Serialization(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| LfmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LfmError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Ẑ as a feature matrix.
    pub fn map_z(&self) -> Result<BinaryFeatureMatrix> {
        if self.map.k == 0 {
            return Ok(BinaryFeatureMatrix::empty(self.p));
        }
        BinaryFeatureMatrix::from_rows(&self.map.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file_with(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_by_two_gives_identity_statistic() {
        let f = file_with("0,1\n1,0\n");
        let d = load_matrix_csv(f.path()).unwrap();
        assert_eq!((d.n(), d.p()), (2, 2));
        assert_eq!(d.s().as_matrix(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn header_row_is_skipped() {
        let f = file_with("a,b,c\n1,2,3\n4,5,6\n");
        let m = read_matrix_csv(f.path()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn ragged_and_non_numeric_rows_name_their_line() {
        let f = file_with("1,2\n3,4\n5\n");
        match read_matrix_csv(f.path()).unwrap_err() {
            LfmError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let f = file_with("x,y\n1,2\n3,oops\n");
        match read_matrix_csv(f.path()).unwrap_err() {
            LfmError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn standardization_centres_rows() {
        let d = Dataset::new(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -4.0, 0.5, 7.0])).unwrap();
        let c = standardize_rows(&d).unwrap();
        assert_eq!(c.x().row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, 1.0]);
        for row in c.x().row_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
        let again = standardize_rows(&c).unwrap();
        assert!((again.x() - c.x()).amax() < 1e-12);
    }

    #[test]
    fn binary_matrix_round_trip() {
        let z = BinaryFeatureMatrix::from_rows(&[vec![1, 0], vec![1, 1], vec![0, 1]]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_binary_matrix_csv(f.path(), &z).unwrap();
        assert_eq!(load_binary_matrix_csv(f.path()).unwrap(), z);
        let bad = file_with("0,2\n");
        assert!(load_binary_matrix_csv(bad.path()).is_err());
    }

    #[test]
    fn summary_round_trip_with_fixed_header() {
        let rows = vec![crate::experiments::summarize(100, 50, 10, 10, &[10.0, 11.0], &[0.1, 0.7]).unwrap()];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_summary_csv(f.path(), &rows).unwrap();
        let text = fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("n,p,s,k_star,reps,mean_k,sd_k,mean_residual,sd_residual\n"));
        assert_eq!(read_summary_csv(f.path()).unwrap(), rows);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = RunConfigFile::from_toml("seed = 3\n").unwrap();
        assert_eq!(cfg.sampler.chains, 11);
        assert_eq!(cfg.sampler.beta, 1.2);
        assert_eq!(cfg.sampler.iters, 1000);
        assert_eq!(cfg.sampler.k_max_plus, 10);
        let grid = cfg.experiment_grid().unwrap();
        assert_eq!(grid.len(), 12);
        assert!(RunConfigFile::from_toml("seed = 3\nbogus = 1\n").is_err());
        assert!(RunConfigFile::from_toml("[sampler]\nchain = 3\n").is_err());
        assert!(RunConfigFile::from_toml("").unwrap().resolved().is_err());
        let pibp = RunConfigFile::from_toml("seed = 1\n[prior]\nkind = \"pibp\"\n").unwrap();
        assert!(matches!(pibp.prior_spec(), Err(LfmError::Config(_))));
    }

    #[test]
    fn resolved_config_survives_toml_and_json() {
        let cfg = RunConfigFile::from_toml("seed = 9\n[sampler]\niters = 40\nmode = \"extended\"\n")
            .unwrap()
            .resolved()
            .unwrap();
        assert_eq!(cfg.sampler.burn_in, Some(20));
        assert_eq!(RunConfigFile::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfigFile::from_json(&json).unwrap(), cfg);
    }
}
