//! Generates a synthetic phantom dataset on disk: CT volumes, label
//! volumes, and coded lobe masks, in NIfTI format.
//!
//! ```text
//! cargo run --example make_phantom [-- <output-dir>]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smedseg::data::{io, make_phantom_dataset, phantom_lobes};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("smedseg_phantoms"));
    std::fs::create_dir_all(&out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let pairs = make_phantom_dataset(4, (12, 64, 64), &mut rng)?;
    for (ct, labels) in &pairs {
        let stem = &ct.subject_id;
        io::save_volume(&out.join(format!("{stem}.nii.gz")), ct)?;
        io::save_labels(&out.join(format!("{stem}_label.nii.gz")), labels, ct.spacing)?;
        io::save_coded(
            &out.join(format!("{stem}_lobes.nii.gz")),
            &phantom_lobes(labels),
            ct.spacing,
        )?;
        let lung = labels.labels.iter().filter(|&&v| v >= 1).count();
        let findings = labels.labels.iter().filter(|&&v| v == 2).count();
        println!("{stem}: {lung} lung voxels, {findings} finding voxels");
    }
    println!("wrote {} phantoms to {}", pairs.len(), out.display());
    Ok(())
}
