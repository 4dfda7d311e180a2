//! The full gradient-check suite on the toy network, once clean and once
//! with a corrupted softmax adjoint.

use hdrfuse::network::NetworkConfig;
use hdrfuse::verify::{run_suite, VerifyOptions};
use hdrfuse::Primitive;

fn main() -> hdrfuse::Result<()> {
    let opts = VerifyOptions { network: NetworkConfig::toy(), max_coords: 3, ..VerifyOptions::default() };
    print!("{}", run_suite(&opts)?.render());

    let faulty = run_suite(&VerifyOptions { fault: Some(Primitive::Softmax), ..opts })?;
    for c in faulty.failures() {
        println!("detected: {} via {}", c.block, c.case);
    }
    Ok(())
}
