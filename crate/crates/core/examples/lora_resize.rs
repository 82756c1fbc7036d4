//! Growing and shrinking a LoRA module, and refactoring an aggregated update
//! at a device's rank.
//!
//! cargo run --release --example lora_resize

use fedspine::lora::{LoraModule, DEFAULT_ALPHA};
use fedspine::model::{HostId, LayerKind};
use fedspine::numkit::{gaussian_fill, svd_thin, RngStream};

fn main() -> fedspine::Result<()> {
    let mut rng = RngStream::new(8, 0);
    let host = HostId::new(0, LayerKind::Query);
    let m = LoraModule::from_factors(host, gaussian_fill(&mut rng, 16, 6, 1.0), gaussian_fill(&mut rng, 6, 12, 1.0), DEFAULT_ALPHA)?;
    let s = svd_thin(&m.product())?.s;
    println!("rank {} module, singular values {:?}", m.rank(), s[..m.rank()].iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());

    let grown = m.grow_rank(10, &mut rng)?;
    let diff = grown.product().sub(&m.product())?.frobenius_norm();
    println!("grow 6 -> 10: ||B'A' - BA|| = {diff}");

    for r in [5, 3, 1] {
        let shrunk = m.shrink_rank(r)?;
        let residual = m.product().sub(&shrunk.product())?.frobenius_norm().powi(2);
        let tail: f64 = s[r..].iter().map(|x| x * x).sum();
        println!("shrink 6 -> {r}: residual {residual:.4}, discarded energy {tail:.4}");
    }

    let device = LoraModule::from_delta(host, &m.delta(), 4, DEFAULT_ALPHA, &mut rng)?;
    let err = device.delta().sub(&m.delta())?.frobenius_norm() / m.delta().frobenius_norm();
    println!("aggregate refactored at rank 4: relative error {err:.4}");
    Ok(())
}
