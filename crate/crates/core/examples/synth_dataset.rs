//! Generates a small dataset and summarizes it per kind and severity.
//!
//! Usage: synth_dataset [OUT_DIR]

use std::path::PathBuf;

use awracle::metrics::{mean, psnr};
use awracle::synth::{build_dataset, is_validation_scene, DatasetSpec, Kind, RowKind, Severity};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("awracle_synth"));
    let manifest = build_dataset(&DatasetSpec::new(10, Kind::ALL.to_vec(), 0).with_mixtures(), &out)?;
    let held_out = manifest.rows.iter().filter(|r| r.single_kind().is_some() && is_validation_scene(r.scene_id)).count();
    println!("{} rows in {} ({held_out} held out)", manifest.rows.len(), out.display());
    for kind in Kind::ALL {
        for severity in Severity::ALL {
            let scores: Vec<f64> = manifest
                .rows
                .iter()
                .filter(|r| r.single_kind() == Some(kind) && r.severity == severity)
                .map(|r| Ok(psnr(&manifest.load_image(&r.query)?, &manifest.load_image(&r.gt)?, 1.0)?))
                .collect::<anyhow::Result<_>>()?;
            println!("{kind:<5} {severity:<5} {:3} samples  PSNR(query, gt) {:6.2} dB", scores.len(), mean(&scores));
        }
    }
    let (mut to_haze, mut to_snow) = (Vec::new(), Vec::new());
    for r in manifest.rows.iter().filter(|r| r.kind == RowKind::Mixture) {
        let (h, s) = r.mixture_intermediates().expect("mixture row");
        let q = manifest.load_image(&r.query)?;
        to_haze.push(psnr(&q, &manifest.load_image(&h)?, 1.0)?);
        to_snow.push(psnr(&q, &manifest.load_image(&s)?, 1.0)?);
    }
    println!("mixture {:3} samples  PSNR to haze-only {:6.2} dB, to snow-only {:6.2} dB", to_haze.len(), mean(&to_haze), mean(&to_snow));
    println!("previews: {}", out.join("query").display());
    Ok(())
}
