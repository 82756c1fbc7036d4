//! S-UCB over the (pruning ratio, rank) square on a synthetic reward surface,
//! then a rebase of the ratio axis.
//!
//! cargo run --release --example bandit_search

use fedspine::bandit::{cumulative_regret, BanditParams, SUcbAgent};

fn main() -> fedspine::Result<()> {
    let star = [0.7, 0.25];
    let reward = |u: [f64; 2]| 1.0 - (u[0] - star[0]).abs() - (u[1] - star[1]).abs();
    for (lambda, delta) in [(0.99, 0.05), (1.0, 0.3)] {
        let params = BanditParams {
            lambda,
            delta,
            ..BanditParams::default()
        };
        let mut agent = SUcbAgent::new(params, 0.0)?;
        let mut got = Vec::new();
        for t in 1..=2000 {
            let sel = agent.select_arm(t);
            let r = reward(sel.u);
            got.push(r);
            agent.observe_reward(sel.leaf, sel.u, r, t)?;
        }
        let regret = cumulative_regret(1.0, &got);
        let last = agent.select_arm(2001);
        println!(
            "lambda {lambda} delta {delta}: {} leaves, regret {:.1} at 1000 and {:.1} at 2000, next arm p={:.3} r={}",
            agent.leaves().len(),
            regret[999],
            regret[1999],
            last.p,
            last.r
        );
    }

    let mut agent = SUcbAgent::new(BanditParams::default(), 0.0)?;
    for t in 1..=40 {
        let sel = agent.select_arm(t);
        agent.observe_reward(sel.leaf, sel.u, reward(sel.u), t)?;
    }
    let retired = agent.rebase_arm_space(0.2)?;
    println!(
        "rebase to p >= 0.2 retired {} of {} leaves; u=0 now maps to p={:.2}",
        retired.len(),
        agent.leaves().len(),
        agent.to_raw([0.0, 0.0]).0
    );
    Ok(())
}
