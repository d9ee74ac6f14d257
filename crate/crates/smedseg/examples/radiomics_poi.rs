//! Percentage-of-involvement radiomics on a phantom: whole-lung POI,
//! per-lobe POI over a synthetic lobe partition, and lung-mask agreement.
//!
//! ```text
//! cargo run --example radiomics_poi
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smedseg::data::{make_phantom_dataset, phantom_lobes};
use smedseg::metrics::BinaryMask3D;
use smedseg::stats::{lobar_poi, mask_agreement, Lobe, LobeMaskSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pairs = make_phantom_dataset(3, (12, 64, 64), &mut rng)?;

    println!("subject        total     LUL     LLL     RUL     RML     RLL");
    for (ct, labels) in &pairs {
        let lung = BinaryMask3D::lung_from(labels, ct.spacing);
        let findings = BinaryMask3D::findings_from(labels, ct.spacing);
        let lobes = LobeMaskSet::from_coded(&phantom_lobes(labels), ct.spacing)?;
        let result = lobar_poi(&findings, &lobes, &lung)?;
        print!("{}  {:6.2}%", ct.subject_id, result.total);
        for lobe in Lobe::ALL {
            match result.per_lobe[&lobe] {
                Some(v) => print!("  {v:5.2}%"),
                None => print!("      -"),
            }
        }
        println!();
        for w in &result.warnings {
            println!("  warning: {w}");
        }
    }

    // Lung-mask agreement between two segmentations: here the truth against
    // a copy with one eroded slice, as a stand-in for two models' masks.
    let (ct, labels) = &pairs[0];
    let a = BinaryMask3D::lung_from(labels, ct.spacing);
    let mut eroded = labels.clone();
    let mid = eroded.labels.dim().0 / 2;
    eroded
        .labels
        .index_axis_mut(ndarray::Axis(0), mid)
        .map_inplace(|v| *v = 0);
    let b = BinaryMask3D::lung_from(&eroded, ct.spacing);
    println!(
        "\nlung-mask agreement after dropping one slice: {:.2}% Dice",
        mask_agreement(&a, &b)?
    );
    Ok(())
}
