//! Simulating a low-resolution sensor from a high-resolution one by picking
//! channel subsets whose inter-channel angles mimic the target sensor.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::range_image::{RangeImage, SensorSpec};

const VLP32_TABLE: &str = include_str!("../data/vlp32.txt");
const HDL64E_TABLE: &str = include_str!("../data/hdl64e.txt");

/// Number of top channels of the 32-channel sensor left out of the detector input.
pub const DROPPED_TOP_CHANNELS: usize = 6;
/// Number of bottom channels left out.
pub const DROPPED_BOTTOM_CHANNELS: usize = 1;
/// Rows of the detector input.
pub const TARGET_ROWS: usize = 25;
/// Horizontal resolution of the simulated sensor.
pub const VLP32_COLUMNS: usize = 1808;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTable {
    pub source_name: String,
    /// Radians, top channel first, strictly decreasing.
    pub elevations: Vec<f64>,
}

impl ChannelTable {
    pub fn new(source_name: impl Into<String>, elevations: Vec<f64>) -> Result<Self> {
        let t = Self {
            source_name: source_name.into(),
            elevations,
        };
        if t.elevations.is_empty() {
            return Err(Error::InvalidChannelTable("empty table".into()));
        }
        if t.elevations.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidChannelTable("non-finite elevation".into()));
        }
        if t.elevations.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidChannelTable(
                "elevations must be strictly decreasing".into(),
            ));
        }
        Ok(t)
    }

    /// Parses the text table format: one elevation in degrees per line, top
    /// channel first, `#` starts a comment.
    pub fn parse(source_name: impl Into<String>, text: &str) -> Result<Self> {
        let mut elevations = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let deg: f64 = content
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("not a number: {content:?}")))?;
            elevations.push(deg.to_radians());
        }
        Self::new(source_name, elevations)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} channel elevations (degrees), top channel first.\n", self.source_name);
        for e in &self.elevations {
            s.push_str(&format!("{:.6}\n", e.to_degrees()));
        }
        s
    }

    pub fn vlp32() -> Self {
        Self::parse("VLP-32", VLP32_TABLE).expect("shipped VLP-32 table")
    }

    pub fn hdl64e() -> Self {
        Self::parse("HDL-64E", HDL64E_TABLE).expect("shipped HDL-64E table")
    }

    pub fn len(&self) -> usize {
        self.elevations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elevations.is_empty()
    }

    pub fn to_sensor_spec(&self, columns: usize, azimuth_of_column_zero: f64) -> Result<SensorSpec> {
        SensorSpec::new(
            self.source_name.clone(),
            columns,
            self.elevations.clone(),
            azimuth_of_column_zero,
        )
    }
}

/// The detector rows of a 32-channel table: everything except the six highest
/// and the lowest channel.
pub fn select_target_channels(table32: &ChannelTable) -> Result<Vec<f64>> {
    if table32.len() != 32 {
        return Err(Error::InvalidChannelTable(format!(
            "expected a 32-channel table, got {}",
            table32.len()
        )));
    }
    Ok(table32.elevations[DROPPED_TOP_CHANNELS..32 - DROPPED_BOTTOM_CHANNELS].to_vec())
}

/// Sensor layout of the simulated 25-row detector input.
pub fn target_sensor_spec(table32: &ChannelTable) -> Result<SensorSpec> {
    SensorSpec::new(
        format!("{}-target", table32.source_name),
        VLP32_COLUMNS,
        select_target_channels(table32)?,
        -std::f64::consts::PI,
    )
}

/// Source channel chosen for each target row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelSubset {
    pub subset_id: usize,
    pub shift: i32,
    pub variant: usize,
    /// Strictly increasing source-channel indices, one per target row.
    pub target_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    /// Whole-selection offsets in source channels (positive = downwards).
    pub shifts: Vec<i32>,
    pub variants: Vec<usize>,
    /// Candidates whose error is within this of the best (radians) are alternatives.
    pub tie_tolerance: f64,
    /// Maximum inter-row gap deviation accepted for a subset (radians).
    pub match_tolerance: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            shifts: vec![-1, 0, 1],
            variants: vec![0, 1, 2, 3],
            tie_tolerance: 0.15_f64.to_radians(),
            match_tolerance: 0.5_f64.to_radians(),
        }
    }
}

fn nearest_index(values: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if (v - x).abs() < (values[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// Candidates for one target: (source index, error), best first.
fn candidates(
    source: &[f64],
    desired: f64,
    lo: usize,
    hi: usize,
    tie_tolerance: f64,
) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = (lo..=hi).map(|j| (j, (source[j] - desired).abs())).collect();
    c.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let best = c[0].1;
    c.retain(|&(_, e)| e <= best + tie_tolerance);
    c
}

/// Greedy top-down channel matching.
///
/// The first target is anchored to the source channel nearest to it, moved by
/// `shift` channels. Every further target takes the source channel whose angle
/// below the anchor best matches the target's angle below the first target.
/// Targets with several near-equal candidates are ambiguous; `variant` is a
/// mixed-radix index over those choices, least significant digit at the
/// lowest ambiguous row.
pub fn match_channels(
    source: &ChannelTable,
    targets: &[f64],
    shift: i32,
    variant: usize,
    tie_tolerance: f64,
) -> Result<ChannelSubset> {
    let n = targets.len();
    let src = &source.elevations;
    if n == 0 {
        return Err(Error::ChannelMatch("no target channels".into()));
    }
    if src.len() < n {
        return Err(Error::ChannelMatch(format!(
            "{} source channels cannot cover {} targets",
            src.len(),
            n
        )));
    }
    let anchor = nearest_index(src, targets[0]) as i64 + shift as i64;
    if anchor < 0 || anchor as usize + n > src.len() {
        return Err(Error::ChannelMatch(format!(
            "shift {shift} leaves too few source channels"
        )));
    }
    let anchor = anchor as usize;
    let desired: Vec<f64> = targets.iter().map(|t| src[anchor] + (t - targets[0])).collect();

    let run = |choices: &[(usize, usize)]| -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
        // choices: (target position, alternative rank)
        let mut rows = vec![anchor];
        let mut ambiguous = Vec::new();
        for i in 1..n {
            let lo = rows[i - 1] + 1;
            let hi = src.len() - (n - i);
            if lo > hi {
                return Err(Error::ChannelMatch(format!(
                    "no source channel left for target {i}"
                )));
            }
            let cand = candidates(src, desired[i], lo, hi, tie_tolerance);
            if cand.len() > 1 {
                ambiguous.push((i, cand.len()));
            }
            let rank = choices
                .iter()
                .find(|(pos, _)| *pos == i)
                .map_or(0, |&(_, r)| r);
            let pick = cand.get(rank).ok_or_else(|| {
                Error::ChannelMatch(format!("alternative {rank} unavailable for target {i}"))
            })?;
            rows.push(pick.0);
        }
        Ok((rows, ambiguous))
    };

    let (best_rows, ambiguous) = run(&[])?;
    let combos: usize = ambiguous.iter().map(|&(_, k)| k).product();
    if variant >= combos {
        return Err(Error::ChannelMatch(format!(
            "variant {variant} out of range ({combos} available)"
        )));
    }
    let rows = if variant == 0 {
        best_rows
    } else {
        let mut rem = variant;
        let mut choices = Vec::new();
        for &(pos, k) in ambiguous.iter().rev() {
            choices.push((pos, rem % k));
            rem /= k;
        }
        run(&choices)?.0
    };
    Ok(ChannelSubset {
        subset_id: 0,
        shift,
        variant,
        target_rows: rows,
    })
}

/// Largest deviation between the subset's adjacent-row gaps and the target gaps.
pub fn gap_deviation(source: &ChannelTable, targets: &[f64], subset: &ChannelSubset) -> f64 {
    let rows = &subset.target_rows;
    (1..rows.len())
        .map(|i| {
            let g_src = source.elevations[rows[i - 1]] - source.elevations[rows[i]];
            let g_tgt = targets[i - 1] - targets[i];
            (g_src - g_tgt).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest absolute elevation difference between selected and target rows.
pub fn elevation_mismatch(source: &ChannelTable, targets: &[f64], subset: &ChannelSubset) -> f64 {
    subset
        .target_rows
        .iter()
        .zip(targets)
        .map(|(&j, t)| (source.elevations[j] - t).abs())
        .fold(0.0, f64::max)
}

/// All distinct subsets of the shift x variant grid that satisfy the gap tolerance.
pub fn enumerate_subsets(
    source: &ChannelTable,
    targets: &[f64],
    config: &MatchConfig,
) -> Result<Vec<ChannelSubset>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &shift in &config.shifts {
        for &variant in &config.variants {
            let subset = match match_channels(source, targets, shift, variant, config.tie_tolerance)
            {
                Ok(s) => s,
                Err(e) => {
                    log::debug!("skipping shift {shift} variant {variant}: {e}");
                    continue;
                }
            };
            let dev = gap_deviation(source, targets, &subset);
            if dev > config.match_tolerance {
                log::debug!(
                    "skipping shift {shift} variant {variant}: gap deviation {:.3} deg",
                    dev.to_degrees()
                );
                continue;
            }
            if seen.insert(subset.target_rows.clone()) {
                out.push(ChannelSubset {
                    subset_id: out.len(),
                    ..subset
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::ChannelMatch(
            "configuration yields no valid subset".into(),
        ));
    }
    Ok(out)
}

/// Extracts the subset's rows; columns, validity and point indices carry over.
pub fn apply_subset(img: &RangeImage, subset: &ChannelSubset) -> Result<RangeImage> {
    let rows = img.rows();
    if let Some(&bad) = subset.target_rows.iter().find(|&&r| r >= rows) {
        return Err(Error::OutOfRange(format!(
            "subset row {bad} in a {rows}-row image"
        )));
    }
    let elevations = subset
        .target_rows
        .iter()
        .map(|&r| img.spec.channel_elevations[r])
        .collect();
    let spec = SensorSpec::new(
        format!("{}/subset{}", img.spec.name, subset.subset_id),
        img.spec.columns_per_revolution,
        elevations,
        img.spec.azimuth_of_column_zero,
    )?;
    let cols = img.cols();
    let mut out = RangeImage::empty(spec);
    for (dst, &src) in subset.target_rows.iter().enumerate() {
        let (s, d) = (src * cols, dst * cols);
        out.range[d..d + cols].copy_from_slice(&img.range[s..s + cols]);
        out.valid[d..d + cols].copy_from_slice(&img.valid[s..s + cols]);
        out.point_index[d..d + cols].copy_from_slice(&img.point_index[s..s + cols]);
    }
    Ok(out)
}

/// Uniform choice of a subset; the caller owns the RNG state.
pub fn pick_subset<'a, R: Rng + ?Sized>(
    rng: &mut R,
    subsets: &'a [ChannelSubset],
) -> Option<&'a ChannelSubset> {
    if subsets.is_empty() {
        return None;
    }
    Some(&subsets[rng.random_range(0..subsets.len())])
}

/// One row of the sensor comparison plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlotRow {
    pub sensor: String,
    pub channel: usize,
    pub elevation_deg: f64,
    pub selected: bool,
}

/// Both tables with the detector rows of the 32-channel sensor and the
/// subset's rows of the source sensor flagged.
pub fn channel_plot_rows(
    source: &ChannelTable,
    table32: &ChannelTable,
    subset: &ChannelSubset,
) -> Vec<ChannelPlotRow> {
    let target_range = DROPPED_TOP_CHANNELS..table32.len().saturating_sub(DROPPED_BOTTOM_CHANNELS);
    let chosen: HashSet<usize> = subset.target_rows.iter().copied().collect();
    let mut rows: Vec<ChannelPlotRow> = table32
        .elevations
        .iter()
        .enumerate()
        .map(|(i, e)| ChannelPlotRow {
            sensor: table32.source_name.clone(),
            channel: i,
            elevation_deg: e.to_degrees(),
            selected: target_range.contains(&i),
        })
        .collect();
    rows.extend(source.elevations.iter().enumerate().map(|(i, e)| ChannelPlotRow {
        sensor: source.source_name.clone(),
        channel: i,
        elevation_deg: e.to_degrees(),
        selected: chosen.contains(&i),
    }));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn even_table(n: usize, top: f64, step: f64) -> ChannelTable {
        ChannelTable::new(
            "even",
            (0..n).map(|i| (top - step * i as f64).to_radians()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_with_comments() {
        let t = ChannelTable::parse("x", "# header\n 2.0 # top\n\n1.0\n-1.5\n").unwrap();
        assert_eq!(t.len(), 3);
        assert!((t.elevations[2] - (-1.5f64).to_radians()).abs() < 1e-15);
        assert!(matches!(
            ChannelTable::parse("x", "1\nfoo\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(ChannelTable::parse("x", "1\n2\n").is_err());
    }

    #[test]
    fn shipped_tables_have_expected_sizes() {
        assert_eq!(ChannelTable::vlp32().len(), 32);
        assert_eq!(ChannelTable::hdl64e().len(), 64);
    }

    #[test]
    fn select_drops_six_top_one_bottom() {
        let t = even_table(32, 10.0, 1.0);
        let sel = select_target_channels(&t).unwrap();
        assert_eq!(sel.len(), 25);
        assert_eq!(sel[..], t.elevations[6..31]);
        assert!(select_target_channels(&even_table(16, 10.0, 1.0)).is_err());
    }

    #[test]
    fn shipped_vlp_selection() {
        let t = ChannelTable::vlp32();
        let sel = select_target_channels(&t).unwrap();
        assert_eq!(sel.len(), 25);
        let sixth_highest = t.elevations[5];
        assert!(sel.iter().all(|&e| e < sixth_highest));
        assert!(sel.iter().all(|&e| e > *t.elevations.last().unwrap()));
    }

    #[test]
    fn identity_match_has_zero_error() {
        let t = even_table(25, 2.0, 0.5);
        let s = match_channels(&t, &t.elevations, 0, 0, 0.15f64.to_radians()).unwrap();
        assert_eq!(s.target_rows, (0..25).collect::<Vec<_>>());
        assert_eq!(elevation_mismatch(&t, &t.elevations, &s), 0.0);
    }

    #[test]
    fn superset_source_skips_extras() {
        let targets: Vec<f64> = (0..25).map(|i| (2.0 - i as f64).to_radians()).collect();
        // interleave a midpoint channel between every pair
        let src = ChannelTable::new(
            "super",
            (0..49).map(|i| (2.0 - 0.5 * i as f64).to_radians()).collect(),
        )
        .unwrap();
        let s = match_channels(&src, &targets, 0, 0, 0.1f64.to_radians()).unwrap();
        assert_eq!(s.target_rows, (0..25).map(|i| 2 * i).collect::<Vec<_>>());
        assert!(elevation_mismatch(&src, &targets, &s) < 1e-15);
    }

    #[test]
    fn insufficient_source_channels() {
        let src = even_table(20, 2.0, 0.5);
        let targets = even_table(25, 2.0, 0.5).elevations;
        assert!(matches!(
            match_channels(&src, &targets, 0, 0, 0.0),
            Err(Error::ChannelMatch(_))
        ));
        let src = even_table(26, 2.0, 0.5);
        assert!(match_channels(&src, &targets, 2, 0, 0.0).is_err());
        assert!(match_channels(&src, &targets, -1, 0, 0.0).is_err());
    }

    #[test]
    fn shipped_tables_match_closely() {
        let targets = select_target_channels(&ChannelTable::vlp32()).unwrap();
        let hdl = ChannelTable::hdl64e();
        let s = match_channels(&hdl, &targets, 0, 0, 0.15f64.to_radians()).unwrap();
        assert!(elevation_mismatch(&hdl, &targets, &s) <= 0.5f64.to_radians());
    }

    #[test]
    fn single_cell_grid_gives_one_subset() {
        let targets = select_target_channels(&ChannelTable::vlp32()).unwrap();
        let cfg = MatchConfig {
            shifts: vec![0],
            variants: vec![0],
            ..MatchConfig::default()
        };
        assert_eq!(enumerate_subsets(&ChannelTable::hdl64e(), &targets, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn identical_shifts_are_deduplicated() {
        let targets = even_table(25, 2.0, 1.0).elevations;
        // the same selection is reachable from shifts 0 and 0 again; and a
        // degenerate config repeating a shift must not double count
        let src = even_table(25, 2.0, 1.0);
        let cfg = MatchConfig {
            shifts: vec![0, 0, 1],
            variants: vec![0, 1],
            ..MatchConfig::default()
        };
        let subsets = enumerate_subsets(&src, &targets, &cfg).unwrap();
        assert_eq!(subsets.len(), 1);
        assert_eq!(subsets[0].subset_id, 0);
    }

    #[test]
    fn empty_configuration_is_error() {
        let targets = even_table(25, 2.0, 1.0).elevations;
        let cfg = MatchConfig {
            shifts: vec![5],
            ..MatchConfig::default()
        };
        assert!(enumerate_subsets(&even_table(25, 2.0, 1.0), &targets, &cfg).is_err());
    }

    fn synthetic_image(rows: usize, cols: usize) -> RangeImage {
        let spec = SensorSpec::new(
            "syn",
            cols,
            (0..rows).map(|i| -(i as f64) * 0.01).collect(),
            0.0,
        )
        .unwrap();
        let ranges = (0..rows * cols)
            .map(|i| if i % 7 == 3 { f64::NAN } else { 1.0 + i as f64 })
            .collect();
        RangeImage::from_ranges(spec, ranges).unwrap()
    }

    #[test]
    fn apply_identity_subset() {
        let img = synthetic_image(25, 10);
        let s = ChannelSubset {
            subset_id: 0,
            shift: 0,
            variant: 0,
            target_rows: (0..25).collect(),
        };
        let out = apply_subset(&img, &s).unwrap();
        assert_eq!(out.range, img.range);
        assert_eq!(out.valid, img.valid);
        assert_eq!(out.spec.channel_elevations, img.spec.channel_elevations);
    }

    #[test]
    fn apply_even_rows() {
        let img = synthetic_image(64, 12);
        let s = ChannelSubset {
            subset_id: 3,
            shift: 0,
            variant: 0,
            target_rows: (0..25).map(|i| 2 * i).collect(),
        };
        let out = apply_subset(&img, &s).unwrap();
        assert_eq!(out.rows(), 25);
        assert_eq!(out.cols(), 12);
        for r in 0..25 {
            for c in 0..12 {
                assert_eq!(out.get(r, c), img.get(2 * r, c));
            }
        }
    }

    #[test]
    fn apply_rejects_out_of_range_row() {
        let img = synthetic_image(64, 4);
        let mut rows: Vec<usize> = (40..64).collect();
        rows.push(64);
        let s = ChannelSubset {
            subset_id: 0,
            shift: 0,
            variant: 0,
            target_rows: rows,
        };
        assert!(matches!(apply_subset(&img, &s), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn pick_is_reproducible() {
        let subsets: Vec<ChannelSubset> = (0..12)
            .map(|i| ChannelSubset {
                subset_id: i,
                shift: 0,
                variant: i,
                target_rows: vec![i],
            })
            .collect();
        let a: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..20).map(|_| pick_subset(&mut rng, &subsets).unwrap().subset_id).collect()
        };
        let b: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..20).map(|_| pick_subset(&mut rng, &subsets).unwrap().subset_id).collect()
        };
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(pick_subset(&mut rng, &subsets[..1]).unwrap().subset_id, 0);
        assert!(pick_subset(&mut rng, &[]).is_none());
    }

    #[test]
    fn pick_is_uniform() {
        let subsets: Vec<ChannelSubset> = (0..12)
            .map(|i| ChannelSubset {
                subset_id: i,
                shift: 0,
                variant: 0,
                target_rows: vec![i],
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; 12];
        for _ in 0..n {
            counts[pick_subset(&mut rng, &subsets).unwrap().subset_id] += 1;
        }
        let p = 1.0 / 12.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }
}
