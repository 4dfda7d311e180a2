//! Render a synthetic bracket, write it to disk, and score the naive
//! exposure-weighted merge against the ground truth.

use hdrfuse::ldr::{exposure_weighted_merge, load_bracket, synth_scene, write_bracket, SynthParams, DEFAULT_GAMMA};
use hdrfuse::objective::{psnr, Domain};

fn main() -> hdrfuse::Result<()> {
    let dir = std::env::temp_dir().join("hdrfuse_synth_example");
    for motion_px in [0, 8, 16] {
        let scene = synth_scene(&SynthParams { motion_px, ..SynthParams::default() })?;
        let out = dir.join(format!("motion_{motion_px}"));
        write_bracket(&out, &scene.bracket)?;

        let bracket = load_bracket(&out)?;
        let gt = bracket.gt_hdr.clone().expect("synthetic brackets carry ground truth");
        let merged = exposure_weighted_merge(&bracket, DEFAULT_GAMMA)?;
        println!(
            "motion {motion_px:>2}px: merge PSNR-mu {:.2} dB ({})",
            psnr(&merged, &gt, Domain::Mu)?,
            out.display()
        );
    }
    Ok(())
}
