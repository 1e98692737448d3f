//! Runs a reference setting and prints coverage and mean interval length for
//! the first and last few components of each layer.
//!
//! ```text
//! cargo run --release --example table -- 1 200 weak
//! ```

use svdinfer::simlab::{monte_carlo, SimConfig};
use svdinfer::Mode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let setting: u32 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let reps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mode: Mode = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(Mode::Weak);
    let mut cfg = SimConfig::setting(setting).ok_or("unknown setting")?;
    cfg.replications = reps;
    cfg.mode = mode;
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let summary = monte_carlo(&cfg, jobs)?;
    println!(
        "setting {setting}, {reps} replications, {mode} mode: rank recovery {:.3}, failures {}, {:.1}s",
        summary.rank_recovery(),
        summary.failures,
        summary.runtime_secs
    );
    let s = cfg.s2;
    let q = cfg.q;
    for k in 0..cfg.rank() {
        let mut cols: Vec<usize> = (s * k..s * (k + 1)).collect();
        cols.extend(q - s..q);
        for j in cols {
            let c = summary.component(k, j);
            println!("v[{},{:>2}]  CP {:.3}  Len {:.3}", k + 1, j + 1, c.cp(), c.mean_len());
        }
    }
    Ok(())
}
