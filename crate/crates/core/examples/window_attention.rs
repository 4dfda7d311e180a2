//! Shifted-window partitioning and windowed self-attention on a feature
//! map whose size is not a multiple of the window.

use hdrfuse::attention::{block_param_specs, msa_with_attention, window_partition, window_reverse, BlockDims};
use hdrfuse::params::{InitScheme, Weights};
use hdrfuse::{Tape, Tensor};

fn main() -> hdrfuse::Result<()> {
    let dims = BlockDims { dim: 8, heads: 2, window: 4, mlp_ratio: 2, lce_reduction: 4, lce_conv_ratio: 2 };
    let w = Weights::<f64>::init(&block_param_specs("blk.", &dims), 0, InitScheme::Standard)?;

    let mut tape = Tape::new();
    let p = w.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_fn(vec![1, 6, 7, 8], |i| (i as f64 * 0.1).sin()));

    for shift in [0, dims.window / 2] {
        let set = window_partition(&mut tape, x, dims.window, shift)?;
        let (out, attn) = msa_with_attention(&mut tape, &set, &p, "blk.", dims.heads)?;
        let back = window_reverse(&mut tape, &out)?;
        let a = tape.value(attn);
        let row: f64 = a.data()[..16].iter().sum();
        println!(
            "shift {shift}: {} windows over a {}x{} padded grid, attention {:?}, first row sums to {row:.6}, output {:?}",
            tape.shape(set.windows)[0],
            set.padded_height,
            set.padded_width,
            a.shape(),
            tape.shape(back)
        );
    }
    Ok(())
}
