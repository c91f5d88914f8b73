//! Trains on the planted-cluster benchmark, starting from `benchmark_config()`,
//! and prints validation curves.
//!
//! Usage: `cargo run --release --example synthetic_benchmark -- [key=value ...]`
//! Keys starting with `synth.` configure the generator; the rest go to the
//! experiment config.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use fedcl_core::synthetic::{benchmark_config, generate, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = benchmark_config();
    let mut synth = toml::Table::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k.strip_prefix("synth.") {
            Some(key) => {
                synth.insert(key.into(), v.parse::<toml::Value>().unwrap_or_else(|_| v.into()));
            }
            None => cfg.set(k, v)?,
        }
    }
    let mut synth: SyntheticConfig = synth.try_into()?;
    synth.seed = cfg.federation.seed;
    let data = generate(&synth)?;
    let split = Arc::new(data.dataset.leave_one_out_split()?);

    let start = Instant::now();
    let mut phase_ms = BTreeMap::<&str, f64>::new();
    let out = fedcl_core::federation::run_training(&cfg, split, |m| {
        for p in &m.phases {
            *phase_ms.entry(p.phase).or_default() += p.ms;
        }
        if let Some(e) = &m.eval {
            println!(
                "round {:>5} loss {:.4} hr@10 {:.4} ({:.1}s)",
                m.round,
                m.mean_loss,
                e.hr10,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "best round {} test hr@10 {:.4} ndcg@10 {:.4} rounds {} converged {} in {:.1}s",
        out.best_round,
        out.test.hr10,
        out.test.ndcg10,
        out.rounds_run,
        out.converged,
        start.elapsed().as_secs_f64()
    );
    for (phase, ms) in phase_ms {
        println!("{phase:>22} {:.1}s", ms / 1e3);
    }
    Ok(())
}
