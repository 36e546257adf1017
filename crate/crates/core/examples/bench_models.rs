//! Times encoding of a 574x509 scene with each model preset.

use latentwatch::cli::{cmd_bench, RunConfig};

fn main() {
    let out = std::env::temp_dir().join("latentwatch_bench");
    println!("{:<8} {:>12} {:>10} {:>10} {:>12}", "model", "parameters", "median s", "tiles/s", "peak rss MB");
    for model in ["small", "medium", "large"] {
        let mut config = RunConfig::default();
        config.set("model", model).expect("known key");
        config.set("repetitions", "3").expect("known key");
        match cmd_bench(&config, &out.join(model)) {
            Ok(r) => println!(
                "{:<8} {:>12} {:>10.3} {:>10.1} {:>12}",
                model,
                r.parameters,
                r.median_seconds,
                r.tiles_per_second,
                r.peak_rss_bytes.map_or("-".into(), |b| format!("{:.0}", b as f64 / 1e6))
            ),
            Err(e) => eprintln!("{model}: {e}"),
        }
    }
}
