//! PSNR and SSIM on a synthetic scene under increasing degradation.

use awracle::metrics::{psnr, ssim};
use awracle::synth::{degrade, render_scene, DegradationSpec, Kind, SceneSpec, Severity};

fn main() -> anyhow::Result<()> {
    let clean = render_scene(&SceneSpec { seed: 7, height: 48, width: 48 })?;
    println!("self: psnr {:.1} dB (cap)  ssim {:.4}", psnr(&clean, &clean, 1.0)?, ssim(&clean, &clean)?);
    let mut shifted = clean.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v = (*v + 0.1).min(1.0));
    println!("offset 0.1 (clipped at 1): psnr {:.3} dB", psnr(&shifted, &clean, 1.0)?);
    for kind in Kind::ALL {
        for severity in Severity::ALL {
            let d = degrade(&clean, &DegradationSpec { kind, severity, seed: 3 })?;
            println!("{kind:<5} {severity:<5}  psnr {:6.2}  ssim {:.4}", psnr(&d, &clean, 1.0)?, ssim(&d, &clean)?);
        }
    }
    Ok(())
}
