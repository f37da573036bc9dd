use std::time::Instant;

use balcause::categorical::fit_balance;
use balcause::sim::{cat41_balance_config, gen_cat41};

#[test]
fn diag_samebasis_regimes() {
    let reps: usize = std::env::var("REPS").ok().and_then(|s| s.parse().ok()).unwrap_or(24);
    let n = 2000usize;
    for (pi_c, m_c) in [(true, true), (true, false), (false, true), (false, false)] {
        let t0 = Instant::now();
        let mut ests = Vec::new();
        let mut ses = Vec::new();
        let mut cover = 0usize;
        let mut fails = 0usize;
        let mut worst_mom = 0.0f64;
        let mut truth_c = 0.0;
        for r in 0..reps {
            let (ds, truth) = gen_cat41(n, 2000 + r as u64);
            truth_c = truth.contrast(1);
            let cfg = match cat41_balance_config(&ds, pi_c, m_c) {
                Ok(c) => c,
                Err(_) => {
                    fails += 1;
                    continue;
                }
            };
            let fit = match fit_balance(&cfg.data, &cfg.family, &cfg.basis, cfg.init.as_deref()) {
                Ok(f) => f,
                Err(_) => {
                    fails += 1;
                    continue;
                }
            };
            worst_mom = worst_mom.max(fit.diagnostics.max_abs_moment_sum);
            let est = fit.theta[1] - fit.theta[0];
            let v = fit.sigma[1][1] + fit.sigma[0][0] - 2.0 * fit.sigma[0][1];
            let se = v.max(0.0).sqrt();
            if (est - truth_c).abs() <= 1.96 * se {
                cover += 1;
            }
            ests.push(est);
            ses.push(se);
        }
        let done = ests.len() as f64;
        let mean = ests.iter().sum::<f64>() / done;
        let sd = (ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (done - 1.0)).sqrt();
        let mean_se = ses.iter().sum::<f64>() / done;
        println!(
            "pi={} m={}: bias={:+.4} sd={:.4} mean_sd_hat={:.4} cov={:.3} worst|mom|={:.2e} fails={} ({:.2} s/rep)",
            pi_c,
            m_c,
            mean - truth_c,
            sd,
            mean_se,
            cover as f64 / done,
            worst_mom,
            fails,
            t0.elapsed().as_secs_f64() / reps as f64,
        );
    }
}
