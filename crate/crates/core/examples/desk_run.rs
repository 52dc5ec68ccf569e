//! Desk-scale benchmark run: static baseline, untrained model, trained model.
//!
//! `cargo run --release -p echotrack --example desk_run -- EPOCHS [STEPS_PER_EPOCH] [LR]`

use std::time::Instant;

use echotrack::metrics::{evaluate, static_prediction};
use echotrack::model::{Tracker, ModelConfig};
use echotrack::sequence::Resolution;
use echotrack::synthdata::{make_benchmark, Benchmark, BenchmarkConfig, Split};
use echotrack::checkpoint::load_model;
use echotrack::training::{fit, OutputDir, Phase, TrainConfig};

fn main() -> echotrack::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().map_or(4, |a| a.parse().unwrap());
    let steps = args.get(1).map_or(0, |a| a.parse().unwrap());
    let lr = args.get(2).map_or(5e-4, |a| a.parse().unwrap());
    let dir = tempfile::tempdir().unwrap();
    make_benchmark(dir.path(), &BenchmarkConfig::default(), false)?;
    let bench = Benchmark::open(dir.path())?;
    let train = bench.load_split(Split::Train)?;
    let val = bench.load_split(Split::Val)?;
    let test = bench.load_split(Split::Test)?;
    let res = Resolution::new(64, 64);

    let stat = evaluate(&test, res, false, static_prediction)?;
    println!("static    delta_avg {:.2} mte {:.3}", stat.delta_avg, stat.mte);
    let mut model = Tracker::new(ModelConfig { working_resolution: res, ..ModelConfig::default() }, 0)?;
    let untrained = evaluate(&test, res, false, |s| model.track(&s.sequence, &s.query_set()?))?;
    println!("untrained delta_avg {:.2} mte {:.3}", untrained.delta_avg, untrained.mte);
    let cfg = TrainConfig {
        learning_rate: lr,
        phases: vec![Phase { epochs, frames: 16 }],
        steps_per_epoch: steps,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let ckpt = OutputDir { root: dir.path().join("run") };
    let out = fit(&mut model, &train, &val, &cfg, Some(&ckpt), None)?;
    for e in &out.epochs {
        println!("epoch {} loss {:.3} val {:?}", e.epoch, e.mean_loss, e.val_delta_avg);
    }
    println!("train {:.1}s over {} steps", t.elapsed().as_secs_f64(), out.steps);
    let trained = evaluate(&test, res, false, |s| model.track(&s.sequence, &s.query_set()?))?;
    println!("last      delta_avg {:.2} mte {:.3}", trained.delta_avg, trained.mte);
    let best = load_model(&ckpt.best())?.model;
    let b = evaluate(&test, res, false, |s| best.track(&s.sequence, &s.query_set()?))?;
    println!("best      delta_avg {:.2} mte {:.3}", b.delta_avg, b.mte);
    Ok(())
}
