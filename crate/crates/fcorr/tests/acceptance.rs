//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). Heavy criteria share a mutex so
//! timing and training runs never overlap.

use fcorr::bench::run_scaling_bench;
use fcorr::cluster::{aqc_assign, AqcConfig};
use fcorr::config::PipelineConfig;
use fcorr::delaunay::densify;
use fcorr::filters::{cycle_filter, uncertainty_filter};
use fcorr::loss::stage_loss;
use fcorr::matcher::{Matcher, QuerySet};
use fcorr::matchio::MatchRecord;
use fcorr::metrics::{aepe, fl_ratio, pck};
use fcorr::model::Model;
use fcorr::pe;
use fcorr::synth::SyntheticPair;
use fcorr::tensor::checkpoint::StateDict;
use fcorr::tensor::{concat, grad_check, Tensor};
use fcorr::train::{eval_stage_aepes, train};
use fcorr::transformer::RefinerStage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::{Mutex, OnceLock};

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|p| p.into_inner())
}

fn pass(msg: &str) {
    println!("[PASS] {}", msg);
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()
}

// ---------------------------------------------------------------- 1 ----

#[test]
fn criterion_1_gradient_oracle() {
    let _g = serial();
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    let started = std::time::Instant::now();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut check = |op: &'static str,
                         tol: f64,
                         shape: &[usize],
                         data: Vec<f64>,
                         f: &dyn Fn(&Tensor) -> fcorr::Result<Tensor>| {
            let x = Tensor::from_vec(shape, data).unwrap();
            let report = grad_check(f, &x, 1e-5).unwrap();
            assert!(
                report.max_rel_err < tol,
                "{} seed {}: rel err {} >= {}",
                op,
                seed,
                report.max_rel_err,
                tol
            );
            if report.max_rel_err > worst {
                worst = report.max_rel_err;
                worst_op = op;
            }
        };

        let other = Tensor::from_vec(&[6], rand_vec(&mut rng, 6, -1.0, 1.0)).unwrap();
        check("add", 1e-4, &[6], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            x.add(&other)?.mul(x)?.mean()
        });
        check("sub", 1e-4, &[6], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            x.sub(&other)?.mul(x)?.mean()
        });
        check("mul", 1e-4, &[6], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| x.mul(x)?.mean());
        check("scale", 1e-4, &[6], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            x.scale(-1.7)?.mul(x)?.mean()
        });
        check("add_scalar", 1e-4, &[6], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            x.add_scalar(0.3)?.mul(x)?.mean()
        });
        // keep relu inputs clear of the kink
        let relu_data: Vec<f64> = rand_vec(&mut rng, 8, 0.2, 1.0)
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v } else { -v })
            .collect();
        check("relu", 1e-4, &[8], relu_data, &|x| x.relu()?.mul(x)?.mean());
        check("sigmoid", 1e-4, &[6], rand_vec(&mut rng, 6, -2.0, 2.0), &|x| {
            x.sigmoid()?.mul(x)?.mean()
        });
        check("softmax", 1e-4, &[2, 5], rand_vec(&mut rng, 10, -2.0, 2.0), &|x| {
            x.softmax(1)?.mul(x)?.mean()
        });
        let gamma = Tensor::from_vec(&[4], rand_vec(&mut rng, 4, 0.5, 1.5)).unwrap();
        let beta = Tensor::from_vec(&[4], rand_vec(&mut rng, 4, -0.5, 0.5)).unwrap();
        check("layer_norm", 1e-3, &[3, 4], rand_vec(&mut rng, 12, -1.0, 1.0), &|x| {
            x.layer_norm(&gamma, &beta, 1, 1e-5)?.mul(x)?.mean()
        });
        check("mean", 1e-4, &[7], rand_vec(&mut rng, 7, -1.0, 1.0), &|x| x.mul(x)?.mean());
        check("sum", 1e-4, &[7], rand_vec(&mut rng, 7, -1.0, 1.0), &|x| x.mul(x)?.sum());
        check("norm2_last", 1e-4, &[3, 2], rand_vec(&mut rng, 6, 0.3, 1.0), &|x| {
            x.norm2_last()?.mean()
        });
        let m2 = Tensor::from_vec(&[3, 2], rand_vec(&mut rng, 6, -1.0, 1.0)).unwrap();
        check("matmul2d", 1e-4, &[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            x.matmul(&m2)?.mul(&x.matmul(&m2)?)?.mean()
        });
        let m3 = Tensor::from_vec(&[2, 3, 2], rand_vec(&mut rng, 12, -1.0, 1.0)).unwrap();
        check("matmul3d", 1e-4, &[2, 2, 3], rand_vec(&mut rng, 12, -1.0, 1.0), &|x| {
            x.matmul(&m3)?.mul(&x.matmul(&m3)?)?.mean()
        });
        let w = Tensor::from_vec(&[3, 4], rand_vec(&mut rng, 12, -1.0, 1.0)).unwrap();
        let b = Tensor::from_vec(&[4], rand_vec(&mut rng, 4, -0.5, 0.5)).unwrap();
        check("linear", 1e-4, &[5, 3], rand_vec(&mut rng, 15, -1.0, 1.0), &|x| {
            x.linear(&w, &b)?.mul(&x.linear(&w, &b)?)?.mean()
        });
        check("reshape", 1e-4, &[6], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            x.reshape(&[2, 3])?.mul(&x.reshape(&[2, 3])?)?.mean()
        });
        check("permute", 1e-4, &[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            let p = x.permute(&[1, 0])?;
            p.mul(&p)?.mean()
        });
        let cat_other = Tensor::from_vec(&[2, 2], rand_vec(&mut rng, 4, -1.0, 1.0)).unwrap();
        check("concat", 1e-4, &[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0), &|x| {
            let c = concat(&[x, &cat_other], 1)?;
            c.mul(&c)?.mean()
        });
        let kernel = Tensor::from_vec(&[2, 2, 3, 3], rand_vec(&mut rng, 36, -0.5, 0.5)).unwrap();
        let bias = Tensor::from_vec(&[2], rand_vec(&mut rng, 2, -0.2, 0.2)).unwrap();
        check("conv2d", 1e-4, &[1, 2, 5, 5], rand_vec(&mut rng, 50, -1.0, 1.0), &|x| {
            let y = x.conv2d(&kernel, Some(&bias), 2, 1)?;
            y.mul(&y)?.mean()
        });
        check("bilinear_resize", 1e-4, &[1, 2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0), &|x| {
            let y = x.bilinear_resize(7, 3)?;
            y.mul(&y)?.mean()
        });
        check("avg_pool_grid", 1e-4, &[1, 2, 5, 5], rand_vec(&mut rng, 50, -1.0, 1.0), &|x| {
            let y = x.avg_pool_grid(3)?;
            y.mul(&y)?.mean()
        });
        check("crop2d", 1e-4, &[1, 2, 5, 5], rand_vec(&mut rng, 50, -1.0, 1.0), &|x| {
            let y = x.crop2d(-1, 2, 4)?;
            y.mul(&y)?.mean()
        });

        // Composed stage loss (Eq. 1) over a random 8-query batch, in both
        // coordinates and uncertainties.
        let n = 8;
        let gt = Tensor::from_vec(&[n, 2], rand_vec(&mut rng, n * 2, 0.0, 1.0)).unwrap();
        check("stage_loss", 1e-4, &[n * 3], rand_vec(&mut rng, n * 3, 0.15, 0.85), &|x| {
            let split = split_coords_unc(x, n)?;
            stage_loss(&split.0, &split.1, &gt, 0.1)
        });
    }
    assert!(started.elapsed().as_secs() < 60, "gradient oracle must run under a minute");
    pass(&format!(
        "criterion 1: gradient oracle, every op + composed stage loss over 10 seeds (worst rel err {:.2e} in `{}`)",
        worst, worst_op
    ));
}

/// Split a packed (3n,) vector into graph-connected (n,2) coords and (n,) u.
fn split_coords_unc(x: &Tensor, n: usize) -> fcorr::Result<(Tensor, Tensor)> {
    let total = 3 * n;
    let mut wc = vec![0.0; total * 2 * n];
    for j in 0..2 * n {
        wc[j * 2 * n + j] = 1.0;
    }
    let mut wu = vec![0.0; total * n];
    for j in 0..n {
        wu[(2 * n + j) * n + j] = 1.0;
    }
    let coords = x
        .reshape(&[1, total])?
        .linear(
            &Tensor::from_vec(&[total, 2 * n], wc)?,
            &Tensor::from_vec(&[2 * n], vec![0.0; 2 * n])?,
        )?
        .reshape(&[n, 2])?;
    let unc = x
        .reshape(&[1, total])?
        .linear(&Tensor::from_vec(&[total, n], wu)?, &Tensor::from_vec(&[n], vec![0.0; n])?)?
        .reshape(&[n])?;
    Ok((coords, unc))
}

// ---------------------------------------------------------------- 2 ----

#[test]
fn criterion_2_loss_arithmetic() {
    // 0: perfect prediction, zero uncertainty.
    let r = Tensor::from_vec(&[1, 2], vec![0.3, 0.8]).unwrap();
    let u0 = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    assert_eq!(stage_loss(&r, &u0, &r, 0.1).unwrap().scalar().unwrap(), 0.0);

    // lambda: fully uncertain masks the error term.
    let gt = Tensor::from_vec(&[1, 2], vec![0.9, 0.1]).unwrap();
    let u1 = Tensor::from_vec(&[1], vec![1.0]).unwrap();
    assert_eq!(stage_loss(&r, &u1, &gt, 0.1).unwrap().scalar().unwrap(), 0.1);

    // 0.15: err 0.2 at u 0.5 with lambda 0.1.
    let r2 = Tensor::from_vec(&[1, 2], vec![0.2, 0.5]).unwrap();
    let gt2 = Tensor::from_vec(&[1, 2], vec![0.0, 0.5]).unwrap();
    let uh = Tensor::from_vec(&[1], vec![0.5]).unwrap();
    let loss = stage_loss(&r2, &uh, &gt2, 0.1).unwrap().scalar().unwrap();
    assert_eq!(loss, 0.2f64 * 0.5 + 0.1 * 0.5);

    // dL/du = lambda - ||err|| (pre-mean) to 1e-9.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = 1;
        let rv = rand_vec(&mut rng, 2, 0.0, 1.0);
        let gv = rand_vec(&mut rng, 2, 0.0, 1.0);
        let lambda = 0.01 + rng.gen::<f64>() * 0.2;
        let err = ((rv[0] - gv[0]).powi(2) + (rv[1] - gv[1]).powi(2)).sqrt();
        let r = Tensor::from_vec(&[n, 2], rv).unwrap();
        let gt = Tensor::from_vec(&[n, 2], gv).unwrap();
        let u = Tensor::param(&[n], vec![rng.gen::<f64>()]).unwrap();
        stage_loss(&r, &u, &gt, lambda).unwrap().backward().unwrap();
        let got = u.grad().unwrap()[0];
        assert!(
            (got - (lambda - err)).abs() < 1e-9,
            "dL/du {} vs lambda - err {}",
            got,
            lambda - err
        );
    }
    pass("criterion 2: loss examples (0, lambda, 0.15) exact; dL/du = lambda - ||err|| to 1e-9");
}

// ---------------------------------------------------------------- 3 ----

#[test]
fn criterion_3_query_independence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let dim = 16;
    for trial in 0..1000u64 {
        let mut srng = ChaCha8Rng::seed_from_u64(trial);
        let stage = RefinerStage::new(&mut srng, 6, dim, 2, 24);
        let tokens =
            Tensor::from_vec(&[12, 6], rand_vec(&mut rng, 72, -1.0, 1.0)).unwrap();
        let token_pe = pe::encode_grid(2, 6, dim).unwrap();
        let pe_of = |pts: &[(f64, f64)]| {
            let scaled: Vec<(f64, f64)> =
                pts.iter().map(|&(x, y)| (x * 3.0, y * 2.0)).collect();
            pe::encode_points(&scaled, dim).unwrap()
        };
        let feat_of = |pts: &[(f64, f64)]| {
            let mut data = Vec::with_capacity(pts.len() * 6);
            for &(x, y) in pts {
                for k in 0..6 {
                    data.push(((x * 11.0 + y * 5.0) * (k as f64 + 1.0)).sin() * 0.5);
                }
            }
            Tensor::from_vec(&[pts.len(), 6], data).unwrap()
        };
        let target = (rng.gen::<f64>(), rng.gen::<f64>());
        let (solo_c, solo_u) = stage
            .forward(&tokens, &token_pe, &pe_of(&[target]), &feat_of(&[target]))
            .unwrap();
        let extra = 1 + (trial % 7) as usize;
        let mut batch: Vec<(f64, f64)> = (0..extra).map(|_| (rng.gen(), rng.gen())).collect();
        let slot = (trial % (extra as u64 + 1)) as usize;
        batch.insert(slot, target);
        let (all_c, all_u) = stage
            .forward(&tokens, &token_pe, &pe_of(&batch), &feat_of(&batch))
            .unwrap();
        assert!(
            (all_c.data()[slot * 2] - solo_c.data()[0]).abs() <= 1e-9
                && (all_c.data()[slot * 2 + 1] - solo_c.data()[1]).abs() <= 1e-9
                && (all_u.data()[slot] - solo_u.data()[0]).abs() <= 1e-9,
            "trial {}: query output depends on batch",
            trial
        );

        // Permutation equivariance, bit-exact.
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..batch.len()).collect();
            for i in (1..p.len()).rev() {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        let permuted: Vec<(f64, f64)> = perm.iter().map(|&i| batch[i]).collect();
        let (pc, pu) = stage
            .forward(&tokens, &token_pe, &pe_of(&permuted), &feat_of(&permuted))
            .unwrap();
        for (s, &src) in perm.iter().enumerate() {
            assert_eq!(pc.data()[s * 2].to_bits(), all_c.data()[src * 2].to_bits());
            assert_eq!(pc.data()[s * 2 + 1].to_bits(), all_c.data()[src * 2 + 1].to_bits());
            assert_eq!(pu.data()[s].to_bits(), all_u.data()[src].to_bits());
        }
    }
    pass("criterion 3: query independence <= 1e-9 and bit-exact permutation equivariance, 1000 trials");
}

// ---------------------------------------------------------------- 4 ----

#[test]
fn criterion_4_aqc_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..1000u64 {
        let n = rng.gen_range(1..60);
        let q: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let r: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let cfg = AqcConfig {
            t: 1 + (trial % 2) as usize,
            k_num: 1 + (trial % 13) as usize,
            th: 0.2 + 0.75 * rng.gen::<f64>(),
            seed: trial,
        };
        let side = 0.15 + 0.5 * rng.gen::<f64>();
        let asg = aqc_assign(&q, &r, &cfg, side).unwrap();
        // exactly-once coverage
        let mut seen = vec![false; n];
        for p in &asg.patches {
            for &m in &p.members {
                assert!(!seen[m], "trial {}: double assignment", trial);
                seen[m] = true;
            }
        }
        for &m in &asg.singletons {
            assert!(!seen[m], "trial {}: double assignment", trial);
            seen[m] = true;
        }
        assert!(seen.iter().all(|&s| s), "trial {}: dropped pair", trial);
        // members within Th * side (Chebyshev) of both centers
        let th = cfg.th * side;
        for p in &asg.patches {
            for &m in &p.members {
                let dq = (q[m].0 - p.center_q.0).abs().max((q[m].1 - p.center_q.1).abs());
                let dr = (r[m].0 - p.center_r.0).abs().max((r[m].1 - p.center_r.1).abs());
                assert!(dq <= th + 1e-12 && dr <= th + 1e-12, "trial {}: threshold violated", trial);
            }
        }
    }

    // Hand-trace of the clustering algorithm on two far-apart pairs with a
    // single k-means class: the shared centroid sits midway, both pairs
    // violate the threshold, get label -1, and end as singletons centered
    // on themselves.
    let q = vec![(0.05, 0.5), (0.95, 0.5)];
    let r = vec![(0.1, 0.5), (0.9, 0.5)];
    let cfg = AqcConfig { t: 1, k_num: 1, th: 0.6, seed: 0 };
    let asg = aqc_assign(&q, &r, &cfg, 0.5).unwrap(); // th*side = 0.3 < 0.45
    assert!(asg.patches.is_empty());
    assert_eq!(asg.singletons, vec![0, 1]);
    assert_eq!(asg.labels, vec![-1, -1]);
    let all = asg.materialize(&q, &r);
    assert_eq!(all.len(), 2);
    assert_eq!(all[0].center_q, q[0]);
    assert_eq!(all[0].center_r, r[0]);
    assert_eq!(all[1].center_q, q[1]);
    assert_eq!(all[1].center_r, r[1]);
    pass("criterion 4: AQC exactly-once + Chebyshev threshold over 1000 instances; two-pair hand trace");
}

// ---------------------------------------------------------------- 5 ----

#[test]
fn criterion_5_one_pass_backbone() {
    let _g = serial();
    let mut cfg = PipelineConfig::bench_preset();
    cfg.seed = 5;
    let matcher = Matcher::with_random_weights(&cfg, 5);
    let pair = SyntheticPair::generate(50, cfg.image_size, 3, 0.15).unwrap().pair;
    for &n in &[1usize, 100, 10_000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let queries =
            QuerySet::new((0..n).map(|_| (rng.gen(), rng.gen())).collect()).unwrap();
        matcher.reset_backbone_evals();
        matcher.match_pair(&pair, &queries).unwrap();
        assert_eq!(
            matcher.backbone_evals(),
            2,
            "backbone must run exactly once per image at n = {}",
            n
        );
    }
    pass("criterion 5: backbone invocations == 2 per match call for n in {1, 100, 10000}");
}

// ---------------------------------------------------------------- 6 ----

#[test]
fn criterion_6_scaling_ratios() {
    let _g = serial();
    let started = std::time::Instant::now();
    let mut cfg = PipelineConfig::bench_preset();
    cfg.seed = 6;
    cfg.bench.counts = vec![100, 1000, 10_000];
    let (onepass, recursive) = run_scaling_bench(&cfg).unwrap();
    onepass.check_consistency().unwrap();
    recursive.check_consistency().unwrap();
    println!("{}", onepass.format_table());
    println!("{}", recursive.format_table());

    let one_100 = onepass.row(100).unwrap();
    let one_1k = onepass.row(1000).unwrap();
    let one_10k = onepass.row(10_000).unwrap();
    let rec_100 = recursive.row(100).unwrap();
    let rec_10k = recursive.row(10_000).unwrap();

    let one_ratio = one_10k.total / one_100.total;
    assert!(one_ratio <= 10.0, "onepass t(10k)/t(100) = {:.2} > 10", one_ratio);
    let backbone_ratio = one_10k.backbone / one_100.backbone;
    assert!(backbone_ratio <= 1.2, "backbone ratio {:.3} > 1.2", backbone_ratio);
    let rec_ratio = rec_10k.total / rec_100.total;
    assert!(rec_ratio >= 30.0, "recursive t(10k)/t(100) = {:.2} < 30", rec_ratio);
    // sub-linear growth for the one-pass engine
    assert!(one_10k.total < 10.0 * one_1k.total, "onepass grows super-linearly");
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 600.0, "benchmark took {:.0}s, budget is 10 min", elapsed);
    pass(&format!(
        "criterion 6: scaling ratios (onepass {:.2}x <= 10, backbone {:.2}x <= 1.2, recursive {:.0}x >= 30) in {:.0}s",
        one_ratio, backbone_ratio, rec_ratio, elapsed
    ));
}

// ------------------------------------------------------------- 7, 8 ----

const TRAIN_SEEDS: [u64; 3] = [101, 202, 303];

struct TrainedFixture {
    cfg: PipelineConfig,
    /// Per seed: final state and held-out (coarse, middle, fine) AEPE.
    full: Vec<(StateDict, [f64; 3])>,
    /// Per seed: held-out AEPE of the detached-branch ablation.
    detached: Vec<[f64; 3]>,
}

static TRAINED: OnceLock<TrainedFixture> = OnceLock::new();

fn trained() -> &'static TrainedFixture {
    TRAINED.get_or_init(|| {
        let cfg = PipelineConfig::train_preset();
        let mut full = Vec::new();
        let mut detached = Vec::new();
        for &seed in &TRAIN_SEEDS {
            let started = std::time::Instant::now();
            let (mut model, report) = train(&cfg, seed).unwrap();
            let aepes = report.final_eval.expect("training evaluates at the end");
            assert!(
                started.elapsed().as_secs_f64() < 1800.0,
                "training must stay under 30 CPU minutes"
            );
            full.push((model.state_dict(), aepes));

            let mut dcfg = cfg.clone();
            dcfg.train.detach_branches = true;
            let (_, dreport) = train(&dcfg, seed).unwrap();
            detached.push(dreport.final_eval.unwrap());
        }
        TrainedFixture { cfg, full, detached }
    })
}

#[test]
fn criterion_7_training_trends() {
    let _g = serial();
    let fx = trained();
    let mean = |sel: &dyn Fn(&[f64; 3]) -> f64, rows: &[[f64; 3]]| -> f64 {
        rows.iter().map(|r| sel(r)).sum::<f64>() / rows.len() as f64
    };
    let full_rows: Vec<[f64; 3]> = fx.full.iter().map(|(_, a)| *a).collect();
    let c = mean(&|r| r[0], &full_rows);
    let m = mean(&|r| r[1], &full_rows);
    let f = mean(&|r| r[2], &full_rows);
    println!("held-out AEPE over {} seeds: coarse {:.3} middle {:.3} fine {:.3}", TRAIN_SEEDS.len(), c, m, f);
    assert!(f < m, "fine ({:.3}) must beat middle ({:.3})", f, m);
    assert!(m < c, "middle ({:.3}) must beat coarse ({:.3})", m, c);

    // Deep supervision vs detached branches: the fully supervised model's
    // coarse stage must be better on average.
    let c_detached = mean(&|r| r[0], &fx.detached);
    println!("coarse AEPE: deep supervision {:.3} vs detached {:.3}", c, c_detached);
    assert!(
        c < c_detached,
        "deep supervision ({:.3}) must beat detached branches ({:.3})",
        c,
        c_detached
    );
    pass(&format!(
        "criterion 7: AEPE ordering fine {:.2} < middle {:.2} < coarse {:.2}; deep supervision {:.2} < detached {:.2}",
        f, m, c, c_detached
    ));
}

#[test]
fn criterion_8_filtering_trends() {
    let _g = serial();
    let fx = trained();
    let cfg = &fx.cfg;
    let model = Model::from_state(cfg, &fx.full[0].0, false).unwrap();
    let matcher = Matcher::new(model, cfg.clone());
    let px = cfg.image_size as f64;

    let mut sums = [0.0f64; 4]; // unfiltered, cyc, unc, cyc+unc
    let mut pair_count = 0usize;
    let mut seed_iter = 0u64;
    while pair_count < 20 && seed_iter < 200 {
        seed_iter += 1;
        let sp = SyntheticPair::generate(7_000 + seed_iter, cfg.image_size, cfg.train.noise_octaves, 0.25)
            .unwrap();
        let mut qrng = ChaCha8Rng::seed_from_u64(seed_iter);
        // queries with a valid match only; filters still see the model's
        // uncertainty on hard border regions
        let samples = sp.sample_queries(&mut qrng, 80, 0.0);
        if samples.len() < 40 {
            continue;
        }
        // require an actual out-of-view region in image B
        let oov = (0..400)
            .filter(|&i| {
                let q = ((i % 20) as f64 / 19.0, (i / 20) as f64 / 19.0);
                !sp.ground_truth(q).valid
            })
            .count();
        if oov == 0 {
            continue;
        }
        let queries = QuerySet::new(samples.iter().map(|s| s.query).collect()).unwrap();

        matcher.reset_backbone_evals();
        let out = matcher.match_pair(&sp.pair, &queries).unwrap();
        let evals_single = matcher.backbone_evals();

        matcher.reset_backbone_evals();
        let cyc = cycle_filter(&matcher, &sp.pair, &queries, cfg.filter.tau_cycle_px).unwrap();
        let evals_cycle = matcher.backbone_evals();
        assert_eq!(evals_cycle, 2 * evals_single, "cycle must cost a second full pass");

        let unc_keep = uncertainty_filter(&out.fine, cfg.filter.tau_u);
        let both_keep: Vec<bool> =
            cyc.keep.iter().zip(unc_keep.iter()).map(|(&a, &b)| a && b).collect();

        let gt_flow: Vec<(f64, f64)> = samples
            .iter()
            .map(|s| ((s.gt.0 - s.query.0) * px, (s.gt.1 - s.query.1) * px))
            .collect();
        let pred_flow: Vec<(f64, f64)> = out
            .fine
            .corrs
            .iter()
            .zip(samples.iter())
            .map(|(r, s)| ((r.0 - s.query.0) * px, (r.1 - s.query.1) * px))
            .collect();
        let all = vec![true; samples.len()];
        let masks = [&all, &cyc.keep, &unc_keep, &both_keep];
        let mut vals = [0.0f64; 4];
        let mut ok = true;
        for (i, mask) in masks.iter().enumerate() {
            match aepe(&pred_flow, &gt_flow, mask) {
                Ok(v) => vals[i] = v,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue; // a filter emptied the set on this pair; skip it
        }
        for i in 0..4 {
            sums[i] += vals[i];
        }
        pair_count += 1;
    }
    assert!(pair_count >= 20, "needed 20 usable held-out pairs, got {}", pair_count);
    let unfiltered = sums[0] / pair_count as f64;
    let cyc = sums[1] / pair_count as f64;
    let unc = sums[2] / pair_count as f64;
    let both = sums[3] / pair_count as f64;
    println!(
        "mean AEPE over {} pairs: unfiltered {:.3} cyc {:.3} unc {:.3} cyc+unc {:.3}",
        pair_count, unfiltered, cyc, unc, both
    );
    assert!(unfiltered >= cyc, "cycle filtering must not hurt on average");
    assert!(cyc >= unc * 0.95, "uncertainty filtering must be comparable or better");
    assert!(
        both <= cyc.min(unc) * 1.05,
        "combined filter must match the best single filter within 5%"
    );
    pass(&format!(
        "criterion 8: filter trends unfiltered {:.2} >= cyc {:.2} >= ~unc {:.2}, cyc+unc {:.2} <= min + 5%; 1 vs 2 passes asserted",
        unfiltered, cyc, unc, both
    ));
}

// ---------------------------------------------------------------- 9 ----

#[test]
fn criterion_9_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.gen_range(1..60);
        let pred: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen::<f64>() * 12.0 - 6.0, rng.gen::<f64>() * 12.0 - 6.0))
            .collect();
        let gt: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen::<f64>() * 12.0 - 6.0, rng.gen::<f64>() * 12.0 - 6.0))
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.85)).collect();
        mask[0] = true;
        // brute-force references with explicit loops
        let (mut s, mut cnt) = (0.0, 0.0);
        let (mut in1, mut in3, mut in5, mut outl) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let e = ((pred[i].0 - gt[i].0).powi(2) + (pred[i].1 - gt[i].1).powi(2)).sqrt();
            let m = (gt[i].0.powi(2) + gt[i].1.powi(2)).sqrt();
            s += e;
            cnt += 1.0;
            if e < 1.0 {
                in1 += 1.0;
            }
            if e < 3.0 {
                in3 += 1.0;
            }
            if e < 5.0 {
                in5 += 1.0;
            }
            if e >= 3.0 && e >= 0.05 * m {
                outl += 1.0;
            }
        }
        assert!((aepe(&pred, &gt, &mask).unwrap() - s / cnt).abs() <= 1e-12);
        let p1 = pck(&pred, &gt, &mask, 1.0).unwrap();
        let p3 = pck(&pred, &gt, &mask, 3.0).unwrap();
        let p5 = pck(&pred, &gt, &mask, 5.0).unwrap();
        assert!((p1 - in1 / cnt).abs() <= 1e-12);
        assert!((p3 - in3 / cnt).abs() <= 1e-12);
        assert!((p5 - in5 / cnt).abs() <= 1e-12);
        assert!(p1 <= p3 && p3 <= p5, "PCK must be monotone in the threshold");
        assert!((fl_ratio(&pred, &gt, &mask).unwrap() - 100.0 * outl / cnt).abs() <= 1e-12);
    }

    // densify reproduces affine flow fields exactly inside the hull
    let mut rng = ChaCha8Rng::seed_from_u64(9_001);
    for _ in 0..5 {
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|_| (rng.gen::<f64>() * 47.0, rng.gen::<f64>() * 47.0))
            .collect();
        let (a, b, c, d, e, f) = (
            rng.gen::<f64>() * 0.1,
            rng.gen::<f64>() * 0.1,
            rng.gen::<f64>() * 4.0,
            rng.gen::<f64>() * 0.1,
            rng.gen::<f64>() * 0.1,
            rng.gen::<f64>() * 4.0,
        );
        let affine = |p: (f64, f64)| (a * p.0 + b * p.1 + c, d * p.0 + e * p.1 + f);
        let flows: Vec<(f64, f64)> = pts.iter().map(|&p| affine(p)).collect();
        let field = densify(&pts, &flows, 48, 48).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                let i = y * 48 + x;
                if field.valid[i] {
                    let want = affine((x as f64, y as f64));
                    assert!(
                        (field.flow[i].0 - want.0).abs() <= 1e-9
                            && (field.flow[i].1 - want.1).abs() <= 1e-9
                    );
                }
            }
        }
    }
    pass("criterion 9: AEPE/PCK/Fl match brute force to 1e-12 over 100 instances; PCK monotone; densify exact on affine fields");
}

// --------------------------------------------------------------- 10 ----

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let mut cfg = PipelineConfig::train_preset();
    cfg.seed = 10;
    cfg.threads = 3; // parallel workers enabled
    let pair = SyntheticPair::generate(10, cfg.image_size, 3, 0.15).unwrap().pair;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let queries =
        QuerySet::new((0..48).map(|_| (rng.gen(), rng.gen())).collect()).unwrap();
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    for _ in 0..2 {
        let matcher = Matcher::with_random_weights(&cfg, cfg.seed);
        let out = matcher.match_pair(&pair, &queries).unwrap();
        let records: Vec<MatchRecord> = (0..queries.len())
            .map(|i| MatchRecord {
                qx: queries.coords[i].0,
                qy: queries.coords[i].1,
                rx: out.fine.corrs[i].0,
                ry: out.fine.corrs[i].1,
                u: out.fine.uncertainty[i],
                kept: true,
            })
            .collect();
        payloads.push(serde_json::to_vec(&records).unwrap());
    }
    assert_eq!(payloads[0], payloads[1], "match JSON must be byte-identical");
    pass("criterion 10: byte-identical match JSON across runs with parallel workers");
}
