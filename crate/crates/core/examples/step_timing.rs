use std::time::Instant;

use mpelu::data::synthetic_cifar;
use mpelu::layers::softmax_cross_entropy;
use mpelu::{init_network, Architecture, FanMode, InitMethod, Rng};

fn main() -> mpelu::Result<()> {
    let arch: Architecture = std::env::args()
        .nth(1)
        .unwrap_or("resnet:mpelu-non-bottleneck:20".into())
        .parse()?;
    let batch: usize = std::env::args().nth(2).map_or(128, |b| b.parse().unwrap());
    let mut net = arch.build()?;
    init_network(
        &mut net,
        &InitMethod::TaylorElu { fixed: None },
        FanMode::FanIn,
        &mut Rng::new(0),
    )?;
    let data = synthetic_cifar(batch, 0, 0)?;
    for _ in 0..3 {
        let t = Instant::now();
        net.zero_grad();
        let out = net.forward(&data.images)?;
        let t_fwd = t.elapsed();
        let loss = softmax_cross_entropy(&out, &data.labels)?;
        net.backward(&loss.grad)?;
        net.clear_caches();
        println!(
            "forward {:?}, forward+backward {:?}, loss {}",
            t_fwd,
            t.elapsed(),
            loss.loss
        );
    }
    Ok(())
}
