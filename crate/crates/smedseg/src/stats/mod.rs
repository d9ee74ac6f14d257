//! Radiomics and cohort statistics: percentage of involvement (POI) for the
//! whole lung and per lobe, lung-mask agreement, Welch's t-test, and OLS
//! regression of POI on covariates.
//!
//! All functions are pure over immutable inputs and safe to parallelize
//! across subjects.

pub mod ols;
pub mod special;
pub mod ttest;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{dice, BinaryMask3D, MetricError};

pub use ols::{ols_regression, DesignMatrix, RegressionResult};
pub use ttest::t_test;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("region mask is empty; POI is undefined")]
    EmptyRegion,
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: String },
    #[error("need at least {need} complete records, got {got}")]
    TooFewRecords { got: usize, need: usize },
    #[error("group {group:?} has {got} records; need at least 2")]
    GroupTooSmall { group: String, got: usize },
    #[error("lobe masks overlap: {0} voxels shared between {1} and {2}")]
    LobesOverlap(usize, Lobe, Lobe),
    #[error("lobe set disagrees with lung mask beyond the 1% tolerance: {0}")]
    LobeCoverage(String),
    #[error("invalid record {subject}: {detail}")]
    InvalidRecord { subject: String, detail: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// The five lung lobes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lobe {
    /// Left upper lobe
    Lul,
    /// Left lower lobe
    Lll,
    /// Right upper lobe
    Rul,
    /// Right middle lobe
    Rml,
    /// Right lower lobe
    Rll,
}

impl Lobe {
    pub const ALL: [Lobe; 5] = [Lobe::Lul, Lobe::Lll, Lobe::Rul, Lobe::Rml, Lobe::Rll];

    pub fn name(&self) -> &'static str {
        match self {
            Lobe::Lul => "LUL",
            Lobe::Lll => "LLL",
            Lobe::Rul => "RUL",
            Lobe::Rml => "RML",
            Lobe::Rll => "RLL",
        }
    }

    /// Code used in coded lobe label volumes (1..=5 in `ALL` order).
    pub fn code(&self) -> u8 {
        match self {
            Lobe::Lul => 1,
            Lobe::Lll => 2,
            Lobe::Rul => 3,
            Lobe::Rml => 4,
            Lobe::Rll => 5,
        }
    }
}

impl fmt::Display for Lobe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Five per-lobe binary masks over one subject's volume grid. Lobes must be
/// pairwise disjoint; agreement with the lung mask is checked separately by
/// [`LobeMaskSet::validate_against_lung`] because externally produced lobe
/// masks rarely align voxel-perfectly with a different model's lung mask.
pub struct LobeMaskSet {
    pub masks: BTreeMap<Lobe, Array3<bool>>,
    pub spacing: [f64; 3],
}

impl LobeMaskSet {
    pub fn new(
        masks: BTreeMap<Lobe, Array3<bool>>,
        spacing: [f64; 3],
    ) -> Result<Self, StatsError> {
        for lobe in Lobe::ALL {
            if !masks.contains_key(&lobe) {
                return Err(StatsError::DegenerateSample(format!(
                    "lobe {lobe} missing from mask set"
                )));
            }
        }
        let dim = masks[&Lobe::Lul].dim();
        for (lobe, m) in &masks {
            if m.dim() != dim {
                return Err(StatsError::DegenerateSample(format!(
                    "lobe {lobe} shape differs"
                )));
            }
        }
        for i in 0..Lobe::ALL.len() {
            for j in i + 1..Lobe::ALL.len() {
                let (a, b) = (Lobe::ALL[i], Lobe::ALL[j]);
                let shared = masks[&a]
                    .iter()
                    .zip(masks[&b].iter())
                    .filter(|(&x, &y)| x && y)
                    .count();
                if shared > 0 {
                    return Err(StatsError::LobesOverlap(shared, a, b));
                }
            }
        }
        Ok(LobeMaskSet { masks, spacing })
    }

    /// Builds the set from a coded volume (0 outside, 1..=5 per lobe).
    pub fn from_coded(coded: &Array3<u8>, spacing: [f64; 3]) -> Result<Self, StatsError> {
        let mut masks = BTreeMap::new();
        for lobe in Lobe::ALL {
            masks.insert(lobe, coded.map(|&v| v == lobe.code()));
        }
        LobeMaskSet::new(masks, spacing)
    }

    pub fn mask(&self, lobe: Lobe) -> BinaryMask3D {
        BinaryMask3D::new(self.masks[&lobe].clone(), self.spacing)
    }

    /// Checks the lobe union against the lung mask. Mismatches up to 1% of
    /// the lung volume (in either direction: uncovered lung voxels, or lobe
    /// voxels outside the lung) come back as warnings; larger mismatches
    /// are errors.
    pub fn validate_against_lung(&self, lung: &BinaryMask3D) -> Result<Vec<String>, StatsError> {
        let dim = self.masks[&Lobe::Lul].dim();
        if lung.mask.dim() != dim {
            let (az, ay, ax) = dim;
            let (bz, by, bx) = lung.mask.dim();
            return Err(MetricError::ShapeMismatch {
                a: vec![az, ay, ax],
                b: vec![bz, by, bx],
            }
            .into());
        }
        let union = {
            let mut u = Array3::from_elem(dim, false);
            for m in self.masks.values() {
                for (dst, &src) in u.iter_mut().zip(m.iter()) {
                    *dst |= src;
                }
            }
            u
        };
        let lung_count = lung.count().max(1);
        let uncovered = lung
            .mask
            .iter()
            .zip(union.iter())
            .filter(|(&l, &u)| l && !u)
            .count();
        let overflow = lung
            .mask
            .iter()
            .zip(union.iter())
            .filter(|(&l, &u)| u && !l)
            .count();
        let mut warnings = Vec::new();
        for (count, what) in [(uncovered, "lung voxels not covered by any lobe"),
                              (overflow, "lobe voxels outside the lung mask")] {
            let frac = count as f64 / lung_count as f64;
            if frac > 0.01 {
                return Err(StatsError::LobeCoverage(format!(
                    "{count} {what} ({:.2}% of lung)",
                    100.0 * frac
                )));
            }
            if count > 0 {
                warnings.push(format!("{count} {what} ({:.3}% of lung)", 100.0 * frac));
            }
        }
        Ok(warnings)
    }
}

/// Percentage of involvement: `100 * |findings ∩ region| / |region|`.
pub fn poi(findings: &BinaryMask3D, region: &BinaryMask3D) -> Result<f64, StatsError> {
    if findings.mask.dim() != region.mask.dim() {
        let (az, ay, ax) = findings.mask.dim();
        let (bz, by, bx) = region.mask.dim();
        return Err(MetricError::ShapeMismatch {
            a: vec![az, ay, ax],
            b: vec![bz, by, bx],
        }
        .into());
    }
    let region_count = region.count();
    if region_count == 0 {
        return Err(StatsError::EmptyRegion);
    }
    let inter = findings
        .mask
        .iter()
        .zip(region.mask.iter())
        .filter(|(&f, &r)| f && r)
        .count();
    Ok(100.0 * inter as f64 / region_count as f64)
}

/// Whole-lung and per-lobe POI for one subject. Empty lobes are reported as
/// missing rather than failing the subject.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LobarPoi {
    pub total: f64,
    pub per_lobe: BTreeMap<Lobe, Option<f64>>,
    pub warnings: Vec<String>,
}

pub fn lobar_poi(
    findings: &BinaryMask3D,
    lobes: &LobeMaskSet,
    lung: &BinaryMask3D,
) -> Result<LobarPoi, StatsError> {
    let warnings = lobes.validate_against_lung(lung)?;
    let total = poi(findings, lung)?;
    let mut per_lobe = BTreeMap::new();
    for lobe in Lobe::ALL {
        let mask = lobes.mask(lobe);
        let value = match poi(findings, &mask) {
            Ok(v) => Some(v),
            Err(StatsError::EmptyRegion) => None,
            Err(e) => return Err(e),
        };
        per_lobe.insert(lobe, value);
    }
    Ok(LobarPoi { total, per_lobe, warnings })
}

/// Dice agreement between two lung segmentations, as a percentage.
pub fn mask_agreement(a: &BinaryMask3D, b: &BinaryMask3D) -> Result<f64, StatsError> {
    Ok(100.0 * dice(a, b)?)
}

/// Per-subject POI values joined with cohort covariates. `sex` is encoded
/// 0/1 (encoding documented in the analysis report); `vaccinated` means at
/// least one post-infection dose before the CT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub subject_id: String,
    pub poi_total: f64,
    pub poi_lul: f64,
    pub poi_lll: f64,
    pub poi_rul: f64,
    pub poi_rml: f64,
    pub poi_rll: f64,
    pub age: f64,
    pub sex: u8,
    pub days_dx_to_ct: f64,
    pub vaccinated: bool,
}

impl PoiRecord {
    pub fn validate(&self) -> Result<(), StatsError> {
        let pois = [
            self.poi_total,
            self.poi_lul,
            self.poi_lll,
            self.poi_rul,
            self.poi_rml,
            self.poi_rll,
        ];
        if pois.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(StatsError::InvalidRecord {
                subject: self.subject_id.clone(),
                detail: "POI outside [0, 100]".into(),
            });
        }
        if self.sex > 1 {
            return Err(StatsError::InvalidRecord {
                subject: self.subject_id.clone(),
                detail: format!("sex must be 0/1, got {}", self.sex),
            });
        }
        Ok(())
    }

    pub fn poi_of(&self, region: &str) -> f64 {
        match region {
            "Total" => self.poi_total,
            "LUL" => self.poi_lul,
            "LLL" => self.poi_lll,
            "RUL" => self.poi_rul,
            "RML" => self.poi_rml,
            "RLL" => self.poi_rll,
            _ => f64::NAN,
        }
    }
}

pub const POI_CSV_HEADER: &str =
    "subject_id,poi_total,poi_lul,poi_lll,poi_rul,poi_rml,poi_rll,age,sex,days_dx_to_ct,vaccinated";

/// Writes the POI record table. Missing covariates serialize as empty
/// fields so downstream parsing can exclude those subjects explicitly.
pub fn write_poi_csv(path: &Path, records: &[PoiRecord]) -> Result<(), StatsError> {
    let mut out = String::from(POI_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.subject_id,
            r.poi_total,
            r.poi_lul,
            r.poi_lll,
            r.poi_rul,
            r.poi_rml,
            r.poi_rll,
            r.age,
            r.sex,
            r.days_dx_to_ct,
            u8::from(r.vaccinated),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a POI record table, returning complete records and
/// `(subject_id, reason)` pairs for excluded rows (missing or malformed
/// covariates are excluded, not fatal).
pub fn read_poi_csv(path: &Path) -> Result<(Vec<PoiRecord>, Vec<(String, String)>), StatsError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let subject = row.get(0).unwrap_or("").to_string();
        let subject_name = if subject.is_empty() { format!("row {}", i + 2) } else { subject.clone() };
        let parse = || -> Result<PoiRecord, String> {
            let field = |idx: usize, name: &str| -> Result<f64, String> {
                let raw = row.get(idx).unwrap_or("").trim();
                if raw.is_empty() {
                    return Err(format!("missing {name}"));
                }
                raw.parse::<f64>().map_err(|_| format!("bad {name}: {raw:?}"))
            };
            let vaccinated = match row.get(10).unwrap_or("").trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                "" => return Err("missing vaccinated".into()),
                other => return Err(format!("bad vaccinated: {other:?}")),
            };
            let record = PoiRecord {
                subject_id: subject.clone(),
                poi_total: field(1, "poi_total")?,
                poi_lul: field(2, "poi_lul")?,
                poi_lll: field(3, "poi_lll")?,
                poi_rul: field(4, "poi_rul")?,
                poi_rml: field(5, "poi_rml")?,
                poi_rll: field(6, "poi_rll")?,
                age: field(7, "age")?,
                sex: field(8, "sex")? as u8,
                days_dx_to_ct: field(9, "days_dx_to_ct")?,
                vaccinated,
            };
            record.validate().map_err(|e| e.to_string())?;
            Ok(record)
        };
        match parse() {
            Ok(r) => records.push(r),
            Err(reason) => excluded.push((subject_name, reason)),
        }
    }
    Ok((records, excluded))
}

/// Five-number summary for one group x region cell of the involvement
/// distribution (whiskers extend to min and max).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub group: String,
    pub region: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile (the common "type 7" convention) over a
/// sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

fn boxplot_row(group: &str, region: &str, values: &[f64]) -> BoxplotRow {
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    BoxplotRow {
        group: group.to_string(),
        region: region.to_string(),
        n: xs.len(),
        min: xs[0],
        q1: quantile(&xs, 0.25),
        median: quantile(&xs, 0.5),
        q3: quantile(&xs, 0.75),
        max: xs[xs.len() - 1],
    }
}

pub const REGIONS: [&str; 6] = ["Total", "LUL", "LLL", "RUL", "RML", "RLL"];

/// Full cohort analysis report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortReport {
    pub n_records: usize,
    pub n_vaccinated: usize,
    pub n_unvaccinated: usize,
    /// Welch's t-test of total POI, vaccinated vs unvaccinated.
    pub t_statistic: f64,
    pub t_p_value: f64,
    /// OLS of total POI on vaccination status, age, sex, and days between
    /// diagnosis and CT.
    pub regression: RegressionResult,
    pub boxplot: Vec<BoxplotRow>,
    pub sex_encoding: String,
    pub excluded: Vec<(String, String)>,
}

impl CohortReport {
    /// Human-readable rendering of the report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "cohort: {} records ({} vaccinated, {} unvaccinated)\n",
            self.n_records, self.n_vaccinated, self.n_unvaccinated
        ));
        if !self.excluded.is_empty() {
            s.push_str(&format!("excluded ({}):\n", self.excluded.len()));
            for (id, reason) in &self.excluded {
                s.push_str(&format!("  {id}: {reason}\n"));
            }
        }
        s.push_str(&format!("sex encoding: {}\n\n", self.sex_encoding));
        s.push_str(&format!(
            "t-test (total POI, vaccinated vs unvaccinated): t = {:.4}, p = {:.4}\n\n",
            self.t_statistic, self.t_p_value
        ));
        s.push_str("regression of total POI:\n");
        s.push_str(&format!(
            "  {:<14} {:>10} {:>10} {:>8} {:>10}\n",
            "covariate", "coef", "se", "t", "p"
        ));
        for i in 0..self.regression.names.len() {
            s.push_str(&format!(
                "  {:<14} {:>10.4} {:>10.4} {:>8.3} {:>10.4}\n",
                self.regression.names[i],
                self.regression.coefficients[i],
                self.regression.std_errors[i],
                self.regression.t_statistics[i],
                self.regression.p_values[i],
            ));
        }
        s.push_str(&format!(
            "  r_squared = {:.4}, n = {}, dof = {}\n\n",
            self.regression.r_squared, self.regression.n, self.regression.dof
        ));
        s.push_str("involvement by region and vaccination group:\n");
        s.push_str(&format!(
            "  {:<14} {:<7} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "group", "region", "n", "min", "q1", "median", "q3", "max"
        ));
        for row in &self.boxplot {
            s.push_str(&format!(
                "  {:<14} {:<7} {:>4} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                row.group, row.region, row.n, row.min, row.q1, row.median, row.q3, row.max
            ));
        }
        s
    }

    /// Boxplot summary as CSV, consumable by plotting tools.
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("group,region,n,min,q1,median,q3,max\n");
        for r in &self.boxplot {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.group, r.region, r.n, r.min, r.q1, r.median, r.q3, r.max
            ));
        }
        out
    }
}

/// Runs the cohort statistics: Welch's t-test of total POI by vaccination
/// group, the multivariate regression controlling for age, sex, and days
/// between diagnosis and CT, and the per-region boxplot summary.
///
/// `excluded` carries subjects dropped during CSV parsing so the report
/// lists them.
pub fn cohort_analysis(
    records: &[PoiRecord],
    excluded: Vec<(String, String)>,
) -> Result<CohortReport, StatsError> {
    const MIN_RECORDS: usize = 10;
    if records.len() < MIN_RECORDS {
        return Err(StatsError::TooFewRecords { got: records.len(), need: MIN_RECORDS });
    }
    for r in records {
        r.validate()?;
    }
    let vaccinated: Vec<&PoiRecord> = records.iter().filter(|r| r.vaccinated).collect();
    let unvaccinated: Vec<&PoiRecord> = records.iter().filter(|r| !r.vaccinated).collect();
    for (group, n) in [("vaccinated", vaccinated.len()), ("unvaccinated", unvaccinated.len())] {
        if n < 2 {
            return Err(StatsError::GroupTooSmall { group: group.into(), got: n });
        }
    }

    let poi_vax: Vec<f64> = vaccinated.iter().map(|r| r.poi_total).collect();
    let poi_unvax: Vec<f64> = unvaccinated.iter().map(|r| r.poi_total).collect();
    let (t_statistic, t_p_value) = t_test(&poi_vax, &poi_unvax)?;

    let y: Vec<f64> = records.iter().map(|r| r.poi_total).collect();
    let mut design = DesignMatrix::with_intercept(records.len());
    design.push_column(
        "vaccinated",
        &records.iter().map(|r| f64::from(r.vaccinated)).collect::<Vec<_>>(),
    )?;
    design.push_column("age", &records.iter().map(|r| r.age).collect::<Vec<_>>())?;
    design.push_column(
        "sex",
        &records.iter().map(|r| r.sex as f64).collect::<Vec<_>>(),
    )?;
    design.push_column(
        "days_dx_to_ct",
        &records.iter().map(|r| r.days_dx_to_ct).collect::<Vec<_>>(),
    )?;
    let regression = ols_regression(&y, &design)?;

    let mut boxplot = Vec::new();
    for (group_name, group) in [("vaccinated", &vaccinated), ("unvaccinated", &unvaccinated)] {
        for region in REGIONS {
            let values: Vec<f64> = group.iter().map(|r| r.poi_of(region)).collect();
            boxplot.push(boxplot_row(group_name, region, &values));
        }
    }

    Ok(CohortReport {
        n_records: records.len(),
        n_vaccinated: vaccinated.len(),
        n_unvaccinated: unvaccinated.len(),
        t_statistic,
        t_p_value,
        regression,
        boxplot,
        sex_encoding: "0 = female, 1 = male".to_string(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_mask(n: usize, on: std::ops::Range<usize>) -> BinaryMask3D {
        let mut m = Array3::from_elem((1, 1, n), false);
        for i in on {
            m[(0, 0, i)] = true;
        }
        BinaryMask3D::new(m, [1.0; 3])
    }

    #[test]
    fn poi_basic_ratios() {
        let region = line_mask(1000, 0..1000);
        let findings = line_mask(1000, 0..140);
        assert!((poi(&findings, &region).unwrap() - 14.0).abs() < 1e-12);
        let none = line_mask(1000, 0..0);
        assert_eq!(poi(&none, &region).unwrap(), 0.0);
        assert_eq!(poi(&region, &region).unwrap(), 100.0);
    }

    #[test]
    fn empty_region_is_an_error() {
        let region = line_mask(10, 0..0);
        let findings = line_mask(10, 0..3);
        assert!(matches!(poi(&findings, &region), Err(StatsError::EmptyRegion)));
    }

    #[test]
    fn mask_agreement_percent() {
        let a = line_mask(200, 0..100);
        let b = line_mask(200, 5..105);
        // |A| = |B| = 100, overlap 95.
        assert!((mask_agreement(&a, &b).unwrap() - 95.0).abs() < 1e-9);
        assert_eq!(mask_agreement(&a, &a).unwrap(), 100.0);
        let c = line_mask(200, 100..200);
        assert_eq!(mask_agreement(&a, &c).unwrap(), 0.0);
    }

    fn tiny_lobeset() -> (LobeMaskSet, BinaryMask3D) {
        // 1x1x50 volume: lobes at [0,10), [10,20), [20,30), [30,40), [40,50).
        let mut masks = BTreeMap::new();
        for (i, lobe) in Lobe::ALL.iter().enumerate() {
            masks.insert(*lobe, line_mask(50, 10 * i..10 * (i + 1)).mask);
        }
        let lung = line_mask(50, 0..50);
        (LobeMaskSet::new(masks, [1.0; 3]).unwrap(), lung)
    }

    #[test]
    fn overlapping_lobes_are_rejected() {
        let mut masks = BTreeMap::new();
        for lobe in Lobe::ALL {
            masks.insert(lobe, line_mask(50, 0..10).mask);
        }
        assert!(matches!(
            LobeMaskSet::new(masks, [1.0; 3]),
            Err(StatsError::LobesOverlap(..))
        ));
    }

    #[test]
    fn lobar_poi_exact_ratios_and_disjointness() {
        let (lobes, lung) = tiny_lobeset();
        // Findings cover all of LLL (and only LLL).
        let findings = line_mask(50, 10..20);
        let result = lobar_poi(&findings, &lobes, &lung).unwrap();
        assert!((result.total - 20.0).abs() < 1e-12);
        assert_eq!(result.per_lobe[&Lobe::Lll].unwrap(), 100.0);
        assert_eq!(result.per_lobe[&Lobe::Lul].unwrap(), 0.0);
        assert!(result.warnings.is_empty());
    }

    #[test]
    fn poi_additivity_over_exact_partition() {
        let (lobes, lung) = tiny_lobeset();
        let findings = line_mask(50, 7..33);
        let result = lobar_poi(&findings, &lobes, &lung).unwrap();
        let total_from_lobes: f64 = Lobe::ALL
            .iter()
            .map(|l| result.per_lobe[l].unwrap() * lobes.mask(*l).count() as f64)
            .sum::<f64>()
            / lung.count() as f64;
        assert!((total_from_lobes - result.total).abs() < 1e-9);
    }

    #[test]
    fn coverage_gap_beyond_tolerance_fails() {
        let (lobes, _) = tiny_lobeset();
        // Lung extends 10 voxels past the lobe union: 60-voxel lung, 50 covered.
        let lung = line_mask(50, 0..50);
        let mut big = Array3::from_elem((1, 1, 50), false);
        for i in 0..50 {
            big[(0, 0, i)] = true;
        }
        let _ = lung;
        // Remove lobe coverage for 2 voxels (4% gap).
        let mut masks = lobes.masks.clone();
        let m = masks.get_mut(&Lobe::Lul).unwrap();
        m[(0, 0, 0)] = false;
        m[(0, 0, 1)] = false;
        let lobes2 = LobeMaskSet::new(masks, [1.0; 3]).unwrap();
        let lung = BinaryMask3D::new(big, [1.0; 3]);
        assert!(matches!(
            lobes2.validate_against_lung(&lung),
            Err(StatsError::LobeCoverage(_))
        ));
    }

    #[test]
    fn small_coverage_gap_is_a_warning() {
        let (lobes, _) = tiny_lobeset();
        // 500-voxel lung, lobe union covers 50..50+... build a 1x1x5000 case
        // instead: tolerance is 1%, so a 4-voxel gap in a 500-voxel lung
        // (0.8%) warns without failing.
        let mut masks = BTreeMap::new();
        for (i, lobe) in Lobe::ALL.iter().enumerate() {
            masks.insert(*lobe, line_mask(500, 100 * i..100 * (i + 1) - usize::from(i == 4)).mask);
        }
        let lobes2 = LobeMaskSet::new(masks, [1.0; 3]).unwrap();
        let lung = line_mask(500, 0..500);
        let warnings = lobes2.validate_against_lung(&lung).unwrap();
        assert_eq!(warnings.len(), 1);
        let _ = lobes;
    }

    fn synthetic_record(id: usize, vaccinated: bool, poi: f64) -> PoiRecord {
        PoiRecord {
            subject_id: format!("s{id:03}"),
            poi_total: poi,
            poi_lul: poi * 0.5,
            poi_lll: poi * 1.5_f64.min(100.0 / poi.max(1e-9)),
            poi_rul: poi * 0.4,
            poi_rml: poi * 0.6,
            poi_rll: (poi * 1.4).min(100.0),
            age: 40.0 + (id % 30) as f64,
            sex: ((id / 3) % 2) as u8,
            days_dx_to_ct: 30.0 + ((id * id * 7) % 151) as f64,
            vaccinated,
        }
    }

    #[test]
    fn identical_groups_give_p_near_one() {
        let mut records = Vec::new();
        for i in 0..12 {
            // Consecutive pairs share one POI value and split across the
            // groups, so the two POI distributions are identical; the value
            // pattern is scrambled so no covariate explains it linearly.
            let poi = 5.0 + (((i / 2) * 17) % 13) as f64 * 0.7;
            records.push(synthetic_record(i, i % 2 == 0, poi));
        }
        let report = cohort_analysis(&records, Vec::new()).unwrap();
        assert!(report.t_p_value > 0.9, "t p = {}", report.t_p_value);
        let vax_p = report.regression.p_values[1];
        assert!(vax_p > 0.5, "regression vaccinated p = {vax_p}");
    }

    #[test]
    fn confounded_cohort_shows_the_adjustment() {
        // POI is fully determined by age; vaccination is correlated with age
        // but has no effect of its own. The naive t-test flags vaccination;
        // the regression's vaccination coefficient does not.
        let mut records = Vec::new();
        for i in 0..40 {
            let age = 30.0 + i as f64;
            let vaccinated = age < 50.0; // younger subjects vaccinated
            let poi = (age - 25.0) * 0.8; // pure age effect
            let mut r = synthetic_record(i, vaccinated, poi);
            r.age = age;
            records.push(r);
        }
        let report = cohort_analysis(&records, Vec::new()).unwrap();
        assert!(report.t_p_value < 0.01, "t-test should flag the confound");
        let vax_p = report.regression.p_values[1];
        let age_p = report.regression.p_values[2];
        assert!(age_p < vax_p, "age must dominate vaccination after adjustment");
    }

    #[test]
    fn cohort_of_88_with_55_33_groups_is_accepted() {
        let mut records = Vec::new();
        for i in 0..88 {
            let vaccinated = i < 55;
            let poi = ((i * 7) % 41) as f64 * 0.9;
            records.push(synthetic_record(i, vaccinated, poi));
        }
        let report = cohort_analysis(&records, Vec::new()).unwrap();
        assert_eq!((report.n_vaccinated, report.n_unvaccinated), (55, 33));
        assert_eq!(report.regression.n, 88);
        assert_eq!(report.regression.dof, 83);
    }

    #[test]
    fn group_sizes_are_enforced() {
        let records: Vec<PoiRecord> =
            (0..12).map(|i| synthetic_record(i, true, 3.0 + i as f64)).collect();
        assert!(matches!(
            cohort_analysis(&records, Vec::new()),
            Err(StatsError::GroupTooSmall { .. })
        ));
        let few: Vec<PoiRecord> = (0..5).map(|i| synthetic_record(i, i % 2 == 0, 3.0)).collect();
        assert!(matches!(
            cohort_analysis(&few, Vec::new()),
            Err(StatsError::TooFewRecords { .. })
        ));
    }

    #[test]
    fn boxplot_five_number_ordering() {
        let mut records = Vec::new();
        for i in 0..20 {
            records.push(synthetic_record(i, i % 2 == 0, (i as f64 * 1.7) % 37.0));
        }
        let report = cohort_analysis(&records, Vec::new()).unwrap();
        assert_eq!(report.boxplot.len(), 12); // 2 groups x 6 regions
        for row in &report.boxplot {
            assert!(row.min <= row.q1);
            assert!(row.q1 <= row.median);
            assert!(row.median <= row.q3);
            assert!(row.q3 <= row.max);
        }
    }

    #[test]
    fn poi_csv_roundtrip_and_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poi.csv");
        let records: Vec<PoiRecord> =
            (0..4).map(|i| synthetic_record(i, i % 2 == 0, 2.0 * i as f64)).collect();
        write_poi_csv(&path, &records).unwrap();
        // Corrupt one row: blank out the age field.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let parts: Vec<String> = lines[2].split(',').map(str::to_string).collect();
        let mut broken = parts.clone();
        broken[7] = String::new();
        lines[2] = broken.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();

        let (parsed, excluded) = read_poi_csv(&path).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(excluded.len(), 1);
        assert_eq!(excluded[0].0, "s001");
        assert!(excluded[0].1.contains("age"));
        assert_eq!(parsed[0], records[0]);
    }
}
