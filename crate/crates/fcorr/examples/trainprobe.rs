use fcorr::config::PipelineConfig;
use fcorr::train::{eval_stage_aepes_of, train};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let lam_c: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = PipelineConfig::train_preset();
    cfg.train.steps = steps;
    cfg.train.lr = lr;
    cfg.lambda.coarse = lam_c;
    cfg.lambda.middle = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(lam_c / 2.0);
    cfg.lambda.fine = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(lam_c / 10.0);
    cfg.train.eval_interval = 0;
    cfg.train.noise_octaves = 5;
    cfg.train.eval_pairs = 0;
    let t = Instant::now();
    let (mut model, report) = train(&cfg, seed).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("steps={} lr={} lam_c={} seed={} total {:.1}s ({:.3}s/step)", steps, lr, lam_c, seed, dt, dt / steps.max(1) as f64);
    for rec in report.log.iter().step_by((steps / 8).max(1)) {
        println!("step {:4}  l_c {:.4}  l_m {:.4}  l_f {:.4}", rec.step, rec.l_c, rec.l_m, rec.l_f);
    }
    if let Some(last) = report.log.last() {
        println!("last      l_c {:.4}  l_m {:.4}  l_f {:.4}", last.l_c, last.l_m, last.l_f);
    }
    let aepes = eval_stage_aepes_of(&mut model, &cfg, seed, 4, 64).unwrap();
    println!("held-out AEPE px: coarse {:.3}  middle {:.3}  fine {:.3}", aepes[0], aepes[1], aepes[2]);
}
// probe variant: per-stage lambda from args 5,6 when present
