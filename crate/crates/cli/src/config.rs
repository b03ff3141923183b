//! Run configuration: built-in defaults, then a flat `key = value` file,
//! then command-line overrides.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use lidarscope_core::codec::SupervisionWindow;
use lidarscope_core::model::Padding;
use lidarscope_core::postprocess::{
    ColumnEdge, Coverage, NmsOptions, PostprocessOptions, DEFAULT_CELL_SIZE, DEFAULT_MIN_WINDOW, DEFAULT_THRESHOLD,
};
use lidarscope_core::sensor::{ChannelTable, MatchConfig, VLP32_COLUMNS};

use crate::error::{CliError, CliResult};

pub const CONFIG_ENV: &str = "LIDARSCOPE_CONFIG";

pub const KEYS: [&str; 19] = [
    "dataset",
    "source_table",
    "target_table",
    "sequence_map",
    "output_dir",
    "threshold",
    "cell_size",
    "coverage",
    "min_window",
    "column_edge",
    "window",
    "columns",
    "shifts",
    "variants",
    "match_tolerance_deg",
    "tie_tolerance_deg",
    "padding",
    "ap_points",
    "seed",
];

/// A shipped channel table or a table file.
#[derive(Debug, Clone, PartialEq)]
pub enum TableSource {
    Hdl64e,
    Vlp32,
    File(PathBuf),
}

impl TableSource {
    fn parse(value: &str, base: &Path) -> Self {
        match value {
            "hdl64e" => TableSource::Hdl64e,
            "vlp32" => TableSource::Vlp32,
            p => TableSource::File(base.join(p)),
        }
    }

    /// A table named on the command line; paths are taken as given.
    pub fn from_arg(value: &str) -> Self {
        Self::parse(value, Path::new(""))
    }

    pub fn load(&self) -> CliResult<ChannelTable> {
        match self {
            TableSource::Hdl64e => Ok(ChannelTable::hdl64e()),
            TableSource::Vlp32 => Ok(ChannelTable::vlp32()),
            TableSource::File(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let name = p.file_stem().map_or("table".into(), |s| s.to_string_lossy().into_owned());
                ChannelTable::parse(name, &text).map_err(|e| CliError::from(e.in_file(p)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowChoice {
    Camera,
    Front180,
    All,
}

impl WindowChoice {
    pub fn window(self) -> SupervisionWindow {
        match self {
            WindowChoice::Camera => SupervisionWindow::CameraFov,
            WindowChoice::Front180 => SupervisionWindow::FRONT_180,
            WindowChoice::All => SupervisionWindow::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub source_table: TableSource,
    pub target_table: TableSource,
    pub sequence_map: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub threshold: f64,
    pub cell_size: f64,
    pub coverage: Coverage,
    pub min_window: Option<(usize, usize)>,
    pub column_edge: ColumnEdge,
    pub window: WindowChoice,
    pub columns: usize,
    pub shifts: Vec<i32>,
    pub variants: Vec<usize>,
    pub match_tolerance_deg: f64,
    pub tie_tolerance_deg: f64,
    pub padding: Padding,
    pub ap_points: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self {
            dataset: None,
            source_table: TableSource::Hdl64e,
            target_table: TableSource::Vlp32,
            sequence_map: None,
            output_dir: None,
            threshold: DEFAULT_THRESHOLD,
            cell_size: DEFAULT_CELL_SIZE,
            coverage: Coverage::CellCenter,
            min_window: Some(DEFAULT_MIN_WINDOW),
            column_edge: ColumnEdge::Wrap,
            window: WindowChoice::Camera,
            columns: VLP32_COLUMNS,
            shifts: m.shifts,
            variants: m.variants,
            match_tolerance_deg: m.match_tolerance.to_degrees(),
            tie_tolerance_deg: m.tie_tolerance.to_degrees(),
            padding: Padding::Zero,
            ap_points: 11,
            seed: 0,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Config(format!("{key} = {value:?}: {why}"))
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value.split(',').map(|s| number(key, s.trim())).collect()
}

impl RunConfig {
    /// Sets one key. Relative paths are taken relative to `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> CliResult<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = Some(base.join(value)),
            "source_table" => self.source_table = TableSource::parse(value, base),
            "target_table" => self.target_table = TableSource::parse(value, base),
            "sequence_map" => self.sequence_map = Some(base.join(value)),
            "output_dir" => self.output_dir = Some(base.join(value)),
            "threshold" => self.threshold = number(key, value)?,
            "cell_size" => self.cell_size = number(key, value)?,
            "coverage" => {
                self.coverage = match value {
                    "cell-center" => Coverage::CellCenter,
                    "conservative" => Coverage::Conservative,
                    _ => return Err(bad(key, value, "expected cell-center or conservative")),
                }
            }
            "min_window" => {
                self.min_window = if value == "none" {
                    None
                } else {
                    let (r, c) = value
                        .split_once('x')
                        .ok_or_else(|| bad(key, value, "expected ROWSxCOLS or none"))?;
                    Some((number(key, r)?, number(key, c)?))
                }
            }
            "column_edge" => {
                self.column_edge = match value {
                    "wrap" => ColumnEdge::Wrap,
                    "clip" => ColumnEdge::Clip,
                    _ => return Err(bad(key, value, "expected wrap or clip")),
                }
            }
            "window" => {
                self.window = match value {
                    "camera" => WindowChoice::Camera,
                    "front180" => WindowChoice::Front180,
                    "all" => WindowChoice::All,
                    _ => return Err(bad(key, value, "expected camera, front180 or all")),
                }
            }
            "columns" => self.columns = number(key, value)?,
            "shifts" => self.shifts = list(key, value)?,
            "variants" => self.variants = list(key, value)?,
            "match_tolerance_deg" => self.match_tolerance_deg = number(key, value)?,
            "tie_tolerance_deg" => self.tie_tolerance_deg = number(key, value)?,
            "padding" => {
                self.padding = match value {
                    "zero" => Padding::Zero,
                    "circular" => Padding::Circular,
                    _ => return Err(bad(key, value, "expected zero or circular")),
                }
            }
            "ap_points" => self.ap_points = number(key, value)?,
            "seed" => self.seed = number(key, value)?,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown config key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, base: &Path) -> CliResult<()> {
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: {key} given twice", i + 1)));
            }
            self.set(key, value, base)
                .map_err(|e| CliError::Config(format!("line {}: {}", i + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        cfg.apply_text(&text, base)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        Ok(cfg)
    }

    /// Checks ranges and that every configured input path exists.
    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return fail(format!("threshold {} must be finite and >= 0", self.threshold));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return fail(format!("cell_size {} must be finite and > 0", self.cell_size));
        }
        if let Some((r, c)) = self.min_window {
            if r == 0 || c == 0 || r % 2 == 0 || c % 2 == 0 {
                return fail(format!("min_window {r}x{c} needs odd, positive sizes"));
            }
        }
        if self.columns == 0 {
            return fail("columns must be > 0".into());
        }
        if self.shifts.is_empty() || self.variants.is_empty() {
            return fail("shifts and variants must not be empty".into());
        }
        for (name, v) in [("match_tolerance_deg", self.match_tolerance_deg), ("tie_tolerance_deg", self.tie_tolerance_deg)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if self.ap_points < 2 {
            return fail(format!("ap_points {} must be >= 2", self.ap_points));
        }
        if let Some(d) = &self.dataset {
            require_dir(d, "dataset")?;
        }
        for t in [&self.source_table, &self.target_table] {
            if let TableSource::File(p) = t {
                require_file(p, "channel table")?;
            }
        }
        if let Some(p) = &self.sequence_map {
            require_file(p, "sequence map")?;
        }
        Ok(())
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            shifts: self.shifts.clone(),
            variants: self.variants.clone(),
            tie_tolerance: self.tie_tolerance_deg.to_radians(),
            match_tolerance: self.match_tolerance_deg.to_radians(),
        }
    }

    pub fn postprocess_options(&self, parallel: bool) -> PostprocessOptions {
        PostprocessOptions {
            threshold: self.threshold,
            min_window: self.min_window,
            column_edge: self.column_edge,
            nms: NmsOptions {
                cell_size: self.cell_size,
                coverage: self.coverage,
            },
            parallel,
        }
    }

    pub fn dataset(&self) -> CliResult<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset root given (--dataset or `dataset` key)".into()))
    }

    pub fn output_dir(&self) -> CliResult<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory given (--output-dir or `output_dir` key)".into()))
    }
}

pub fn require_file(p: &Path, what: &str) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} is not a readable file", p.display())))
    }
}

pub fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} is not a directory", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nthreshold = 0.2\nmin_window = 1x3\ncoverage = conservative\n", Path::new("/base"))
            .unwrap();
        assert_eq!(cfg.threshold, 0.2);
        assert_eq!(cfg.min_window, Some((1, 3)));
        assert_eq!(cfg.coverage, Coverage::Conservative);
        cfg.set("threshold", "0.3", Path::new(".")).unwrap();
        assert_eq!(cfg.threshold, 0.3);
        cfg.set("source_table", "tables/x.txt", Path::new("/base")).unwrap();
        assert_eq!(cfg.source_table, TableSource::File("/base/tables/x.txt".into()));
        cfg.set("source_table", "vlp32", Path::new("/base")).unwrap();
        assert_eq!(cfg.source_table, TableSource::Vlp32);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let base = Path::new(".");
        assert!(RunConfig::default().apply_text("thresold = 1\n", base).is_err());
        assert!(RunConfig::default().apply_text("seed = 1\nseed = 2\n", base).is_err());
        assert!(RunConfig::default().apply_text("seed\n", base).is_err());
        assert!(RunConfig::default().apply_text("seed = -1\n", base).is_err());
        assert!(RunConfig::default().apply_text("min_window = 3by5\n", base).is_err());
        assert!(RunConfig::default().apply_text("shifts = -1,0,1\n", base).is_ok());
    }

    #[test]
    fn validation_ranges() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.min_window = Some((2, 5));
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig { cell_size: 0.0, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.cell_size = 0.2;
        cfg.dataset = Some("/definitely/not/here".into());
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("dataset", "d"),
            ("source_table", "hdl64e"),
            ("target_table", "vlp32"),
            ("sequence_map", "m.txt"),
            ("output_dir", "out"),
            ("threshold", "0.1"),
            ("cell_size", "0.5"),
            ("coverage", "cell-center"),
            ("min_window", "none"),
            ("column_edge", "clip"),
            ("window", "front180"),
            ("columns", "900"),
            ("shifts", "0"),
            ("variants", "0,1"),
            ("match_tolerance_deg", "0.4"),
            ("tie_tolerance_deg", "0.1"),
            ("padding", "circular"),
            ("ap_points", "40"),
            ("seed", "7"),
        ];
        assert_eq!(samples.len(), KEYS.len());
        let mut cfg = RunConfig::default();
        for (k, v) in samples {
            assert!(KEYS.contains(&k));
            cfg.set(k, v, Path::new(".")).unwrap();
        }
        assert_eq!(cfg.columns, 900);
        assert_eq!(cfg.window, WindowChoice::Front180);
    }
}
