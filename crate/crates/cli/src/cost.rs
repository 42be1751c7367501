use anyhow::anyhow;
use clap::Args;
use mkt_core::config::Mode;
use mkt_core::federation::{build_world, Federation};
use mkt_core::knowledge::payload_for_shape;

use crate::{ConfigArgs, Failure};

#[derive(Args)]
pub struct CostArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// With --seq-len: skip the world and assume N public samples of S positions each.
    #[arg(long, requires = "seq_len")]
    public_samples: Option<usize>,
    #[arg(long, requires = "public_samples")]
    seq_len: Option<usize>,
}

pub fn cost(args: CostArgs) -> Result<(), Failure> {
    let config = args.config.load()?;
    let (k, t) = (config.clients, config.rounds);

    if let (Some(n), Some(s)) = (args.public_samples, args.seq_len) {
        let set = payload_for_shape(std::iter::repeat_n(s, n), config.k_top);
        println!("public samples N = {n}, positions per sample S = {s}, K_top = {}", config.k_top);
        println!("floats per knowledge set (N*S*K_top): {}", set.floats);
        println!("bytes per knowledge set: {}", set.bytes);
        println!("per round: upload {} floats ({k} sets), download {} floats ({k} copies)", k * set.floats, k * set.floats);
        println!("total over {t} rounds: {} floats, {} bytes", 2 * k * t * set.floats, 2 * k * t * set.bytes);
        return Ok(());
    }

    let world = build_world(&config).map_err(Failure::runtime)?;
    let mut fed_config = config.clone();
    fed_config.mode = Mode::Fedmkt;
    let fed = Federation::new(&fed_config, &world).map_err(Failure::runtime)?;
    println!("public samples N = {}, K_top = {}, clients K = {k}, rounds T = {t}", world.public.len(), config.k_top);
    println!("{:>11} {:>6} {:>10} {:>10} {:>12} {:>12} {:>9}", "participant", "role", "positions", "floats", "bytes", "adapter", "trainable");
    let mut sizes = Vec::new();
    for p in fed.participants() {
        let positions: Vec<usize> = p.public.samples.iter().map(|s| s.ids.len() - 1).collect();
        let width = config.k_top.min(p.model.vocab_size());
        let size = payload_for_shape(positions.iter().copied(), width);
        let frac = p.model.trainable_params() as f64 / p.model.total_params() as f64;
        println!(
            "{:>11} {:>6} {:>10} {:>10} {:>12} {:>12} {:>8.3}%",
            p.id,
            p.role.as_str(),
            positions.iter().sum::<usize>(),
            size.floats,
            size.bytes,
            p.model.trainable_params(),
            100.0 * frac
        );
        sizes.push(size);
    }
    let server = sizes.first().copied().ok_or_else(|| Failure::runtime(anyhow!("no participants")))?;
    let up: usize = sizes[1..].iter().map(|s| s.floats).sum();
    let up_bytes: usize = sizes[1..].iter().map(|s| s.bytes).sum();
    let down = k * server.floats;
    let down_bytes = k * server.bytes;
    println!("per round: upload {up} floats ({up_bytes} bytes), download {down} floats ({down_bytes} bytes)");
    println!("total over {t} rounds: {} floats, {} bytes", t * (up + down), t * (up_bytes + down_bytes));
    Ok(())
}
