//! PSNR and SSIM in the linear and μ-law domains.

use hdrfuse::ldr::Image;
use hdrfuse::objective::{mu_law, quality, MU};

fn main() -> hdrfuse::Result<()> {
    let gt = Image::from_fn(32, 32, 3, |y, x, c| ((y * 32 + x) as f64 / 1024.0).powi(2) * (1.0 - 0.2 * c as f64));
    for noise in [0.001, 0.01, 0.05] {
        let pred = gt.map(|v| (v + noise * (v * 977.0).sin()).clamp(0.0, 1.0));
        let q = quality(&pred, &gt)?;
        println!(
            "noise {noise:<5}: PSNR-l {:6.2} PSNR-mu {:6.2} SSIM-l {:.4} SSIM-mu {:.4}",
            q.psnr_l, q.psnr_mu, q.ssim_l, q.ssim_mu
        );
    }
    println!("mu-law(0.5) = {:.9}", mu_law(0.5, MU));
    Ok(())
}
