//! Times collect + train steps: `bench_train <frame> <channels> <batch> <steps>`.
use std::time::Instant;

use ambs_core::agent::{Agent, Collector, TrainConfig};
use ambs_core::envs::{BackgroundMode, EnvConfig};
use ambs_core::nets::{IoShape, NetConfig};
use ambs_core::replay::ReplayBuffer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let (frame, channels, batch, steps) = (args[0], args[1], args[2], args[3]);
    let mut env = EnvConfig { frame_size: frame, ..EnvConfig::default() };
    env.background.mode = BackgroundMode::Scroll;
    let io = IoShape { channels: env.obs_shape()[0], frame_size: frame, action_dim: 2 };
    let net = NetConfig { conv_channels: channels, ..NetConfig::desk() };
    let train = TrainConfig { batch_size: batch, ..TrainConfig::default() };
    let mut agent = Agent::new(train, net, io).unwrap();
    let mut collector = Collector::new(env, 0).unwrap();
    let mut buffer = ReplayBuffer::new(10_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..batch {
        collector.collect_step(&agent, &mut buffer, &mut rng, u64::MAX).unwrap();
    }
    let start = Instant::now();
    for _ in 0..steps {
        collector.collect_step(&agent, &mut buffer, &mut rng, 0).unwrap();
        agent.train_step(&buffer, &mut rng).unwrap();
    }
    println!("{:.1} ms/step", start.elapsed().as_secs_f64() * 1e3 / steps as f64);
}
