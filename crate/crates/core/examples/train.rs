//! Short training run on synthetic patches, with a checkpoint halfway and
//! a resumed run that reproduces the uninterrupted trajectory.

use hdrfuse::checkpoint::Checkpoint;
use hdrfuse::ldr::{assemble_input, crop_patches, synth_scene, SynthParams, DEFAULT_GAMMA};
use hdrfuse::network::NetworkConfig;
use hdrfuse::trainer::{TrainConfig, Trainer};

fn main() -> hdrfuse::Result<()> {
    let samples = (0..4)
        .map(|seed| {
            let s = synth_scene(&SynthParams { seed, size: 32, ..SynthParams::default() })?;
            Ok((assemble_input(&s.bracket, DEFAULT_GAMMA)?, s.bracket.gt_hdr.expect("ground truth")))
        })
        .collect::<hdrfuse::Result<Vec<_>>>()?;
    let data = crop_patches(&samples, 16, 16)?;
    let cfg = TrainConfig { steps: 20, batch_size: 4, patch_size: 16, patch_stride: 16, probe_every: 5, ..TrainConfig::default() };

    let mut full = Trainer::<f64>::new(NetworkConfig::toy(), cfg.clone(), data.clone())?;
    let log = full.run(|r| {
        if let Some(p) = r.probe_psnr_mu {
            println!("step {:>2} loss {:.5} probe PSNR-mu {p:.2} dB", r.step, r.total);
        }
    })?;

    let mut half = Trainer::<f64>::new(NetworkConfig::toy(), TrainConfig { steps: 10, ..cfg }, data.clone())?;
    half.run(|_| {})?;
    let path = std::env::temp_dir().join("hdrfuse_example.ckpt");
    half.checkpoint().save(&path)?;

    let mut ck = Checkpoint::<f64>::load(&path)?;
    ck.train.steps = 20;
    let mut resumed = Trainer::resume(ck, data)?;
    let tail = resumed.run(|_| {})?;
    println!("resumed trajectory matches: {}", tail[..] == log[10..]);
    Ok(())
}
