//! Scratch harness for calibrating demo defaults. Not part of the build.
use moepath_core::demo::{run_demo, DemoConfig};

fn env_f(k: &str, d: f64) -> f64 { std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d) }
fn env_u(k: &str, d: u64) -> u64 { std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d) }

fn main() {
    let steps = env_u("STEPS", 2400) as usize;
    let cfg = DemoConfig {
        learning_rate: env_f("LR", 0.01),
        steps,
        checkpoint_interval: env_u("INTERVAL", (steps / 30) as u64) as usize,
        model_seed: env_u("MSEED", 7),
        data_seed: env_u("DSEED", 11),
        target_noise: env_f("NOISE", 0.02),
        mean_radius: env_f("RADIUS", 5.0),
        cluster_std: env_f("STD", 1.0),
        num_clusters: env_u("CLUSTERS", 6) as usize,
        samples_per_cluster: env_u("SPC", 30) as usize,
        num_experts: env_u("K", 8) as usize,
        hidden_dim: env_u("H", 12) as usize,
        num_layers: env_u("L", 3) as usize,
        input_dim: env_u("D", 16) as usize,
        accuracy_margin: env_f("MARGIN", 0.5),
        ..DemoConfig::default()
    };
    match run_demo(&cfg) {
        Err(e) => println!("FAILED: {e}"),
        Ok(run) => {
            let s = &run.summary;
            let f = &s.focus;
            let r2 = |v: f64| (v * 100.0).round() / 100.0;
            println!("acc: {:?}", s.domain_accuracy.iter().map(|v| r2(*v)).collect::<Vec<_>>());
            println!("obj: {:?}", s.train_objective.iter().map(|v| r2(*v)).collect::<Vec<_>>());
            println!("eps={} chosen={:?} | groups {:?} (undet {})", s.epsilon_used,
                s.calibration.as_ref().and_then(|c| c.chosen),
                s.train_groups.iter().map(|g| (g.step, g.members.len())).collect::<Vec<_>>(), s.undetected_train);
            println!("focus@{} n={} dist: {:?}", f.group_step, f.member_count,
                f.post_distance.iter().map(|v| r2(*v)).collect::<Vec<_>>());
            println!("smooth: {:?} viol={}", f.post_smoothness.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(), f.smoothness_violations);
            let drop = (f.peak_distance - f.final_distance) / f.peak_distance * 100.0;
            println!("peak {:.3} final {:.3} drop {:.1}% slope {:.2e} plateau {:?}", f.peak_distance, f.final_distance, drop, f.post_slope, f.plateau.as_ref().map(|p| (p.start_step, p.end_step, r2(p.distance_drop_fraction*100.0), r2(p.loss_change_fraction*100.0))));
        println!("robust consistent={} {:?}", s.robustness.consistent, s.robustness.rows.iter().map(|r| (r.epsilon, r.delta, r.slope.map(|x| if x < 0.0 {"-"} else {"+"}))).collect::<Vec<_>>());
            let get = |name: &str| s.correlations.iter().find(|c| c.metric == name).unwrap();
            let d = get("pathway_distance"); let sm = get("pathway_consistency_raw_smoothness"); let tl = get("train_loss");
            println!("CRIT7a {} 7b {} 7c {} | CRIT8 dist r={:.3} smooth r={:.3} loss r={:.3} -> {}",
                f.final_distance < f.peak_distance,
                f.smoothness_violations <= 1,
                f.plateau.as_ref().map_or(false, |p| p.distance_drop_fraction > 0.10),
                d.pearson_r, sm.pearson_r, tl.pearson_r,
                d.pearson_r.abs() > tl.pearson_r.abs() && sm.pearson_r.abs() > tl.pearson_r.abs());
        }
    }
}
