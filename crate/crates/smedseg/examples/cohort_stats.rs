//! Cohort analysis on a synthetic POI table: Welch's t-test of total
//! involvement by vaccination group, the multivariate regression
//! controlling for age, sex, and days between diagnosis and CT, and the
//! per-region five-number summaries.
//!
//! The synthetic cohort is built with a deliberate confound — involvement
//! driven by age, vaccination more common among the young — so the naive
//! t-test and the adjusted regression disagree, which is exactly the
//! pattern the two analyses are meant to separate.
//!
//! ```text
//! cargo run --example cohort_stats
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smedseg::stats::{cohort_analysis, PoiRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut records = Vec::new();
    for i in 0..88 {
        let age: f64 = rng.random_range(30.0..80.0);
        // Younger subjects are more likely vaccinated; involvement rises
        // with age regardless of vaccination.
        let vaccinated = rng.random_range(0.0..1.0) < (80.0 - age) / 60.0;
        let noise: f64 = rng.random_range(-2.0..2.0);
        let poi_total = ((age - 30.0) * 0.35 + noise).clamp(0.0, 100.0);
        let spread = |f: f64| (poi_total * f).clamp(0.0, 100.0);
        records.push(PoiRecord {
            subject_id: format!("subject_{i:03}"),
            poi_total,
            poi_lul: spread(0.6),
            poi_lll: spread(1.3),
            poi_rul: spread(0.5),
            poi_rml: spread(0.8),
            poi_rll: spread(1.4),
            age,
            sex: u8::from(rng.random_range(0.0..1.0) < 0.5),
            days_dx_to_ct: rng.random_range(30.0..400.0),
            vaccinated,
        });
    }

    let report = cohort_analysis(&records, Vec::new())?;
    println!("{}", report.to_text());
    println!(
        "note: t-test p = {:.4} vs regression vaccination p = {:.4} — the adjustment absorbs the age confound",
        report.t_p_value, report.regression.p_values[1]
    );
    Ok(())
}
