//! Fuse a bracket with a freshly initialised model and write the linear
//! HDR result plus a tonemapped preview.

use hdrfuse::ldr::{assemble_input, synth_scene, write_pfm, write_png8, SynthParams, DEFAULT_GAMMA};
use hdrfuse::network::{HdrTransformer, NetworkConfig};
use hdrfuse::objective::{mu_tonemap_image, quality, MU};
use hdrfuse::params::InitScheme;

fn main() -> hdrfuse::Result<()> {
    let config = NetworkConfig::tiny();
    let model = HdrTransformer::<f32>::new(config, 0, InitScheme::Standard)?;
    println!("tiny model: {} parameters", model.weights.param_count());
    println!("default model: {} parameters", NetworkConfig::default().param_count());

    let scene = synth_scene(&SynthParams::default())?;
    let hdr = model.infer(&assemble_input(&scene.bracket, DEFAULT_GAMMA)?)?;
    let q = quality(&hdr, scene.bracket.gt_hdr.as_ref().expect("ground truth"))?;
    println!("untrained: PSNR-mu {:.2} dB, SSIM-mu {:.4}", q.psnr_mu, q.ssim_mu);

    let dir = std::env::temp_dir();
    write_pfm(&dir.join("hdrfuse_fused.pfm"), &hdr)?;
    write_png8(&dir.join("hdrfuse_fused.png"), &mu_tonemap_image(&hdr, MU)?)?;
    println!("wrote {}", dir.join("hdrfuse_fused.pfm").display());
    Ok(())
}
