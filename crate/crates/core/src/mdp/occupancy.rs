use crate::error::{Result, RrlError};

use super::{FiniteHorizonMdp, Policy, TabularMdp};

/// Tail mass below which the discounted series is truncated.
const TAIL_MASS: f64 = 1e-10;

/// Discounted occupancy d^π(s, a) = (1 − γ) Σₜ γᵗ Pr(sₜ = s, aₜ = a), by
/// forward recursion from d0. Mixtures of stationary policies average their
/// members' occupancies.
pub fn occupancy_measure(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    policy.validate(mdp.n_states, mdp.n_actions, None)?;
    if let Policy::Mixture { members, weights } = policy {
        let mut out = vec![0.0; mdp.n_cells()];
        for (m, w) in members.iter().zip(weights) {
            for (o, x) in out.iter_mut().zip(occupancy_measure(mdp, m)?) {
                *o += w * x;
            }
        }
        return Ok(out);
    }
    if !policy.is_stationary() {
        return Err(RrlError::InvalidParameter("discounted occupancy needs a stationary policy".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let pi: Vec<Vec<f64>> = (0..ns).map(|s| policy.action_probs(0, s, na)).collect();
    let mut occ = vec![0.0; mdp.n_cells()];
    let mut rho = mdp.d0.clone();
    let mut discount = 1.0 - mdp.gamma;
    let mut tail = 1.0;
    while tail >= TAIL_MASS {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if rho[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let m = rho[s] * pi[s][a];
                if m == 0.0 {
                    continue;
                }
                occ[s * na + a] += discount * m;
                for (n, p) in next.iter_mut().zip(mdp.row(s, a)) {
                    *n += m * p;
                }
            }
        }
        rho = next;
        discount *= mdp.gamma;
        tail *= mdp.gamma;
    }
    // account for the truncated tail by renormalizing
    let total: f64 = occ.iter().sum();
    occ.iter_mut().for_each(|x| *x /= total);
    Ok(occ)
}

/// State distributions ρ_h for h = 0..H under a non-mixture policy.
pub fn state_distributions_fh(mdp: &FiniteHorizonMdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    if policy.is_mixture() {
        return Err(RrlError::InvalidParameter(
            "state distributions of a mixture are not Markov; use occupancy_measures_fh".into(),
        ));
    }
    policy.validate(mdp.n_states, mdp.n_actions, Some(mdp.horizon))?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut out = Vec::with_capacity(mdp.horizon);
    let mut rho = mdp.d0.clone();
    for h in 0..mdp.horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if rho[s] == 0.0 {
                continue;
            }
            let pa = policy.action_probs(h, s, na);
            for a in 0..na {
                let m = rho[s] * pa[a];
                if m == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(mdp.row(h, s, a)) {
                    *n += m * p;
                }
            }
        }
        out.push(std::mem::replace(&mut rho, next));
    }
    Ok(out)
}

/// Occupancies d^π_h(s, a) for every step h.
pub fn occupancy_measures_fh(mdp: &FiniteHorizonMdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    if let Policy::Mixture { members, weights } = policy {
        policy.validate(mdp.n_states, mdp.n_actions, Some(mdp.horizon))?;
        let mut out = vec![vec![0.0; mdp.n_cells()]; mdp.horizon];
        for (m, w) in members.iter().zip(weights) {
            for (o, x) in out.iter_mut().zip(occupancy_measures_fh(mdp, m)?) {
                for (oi, xi) in o.iter_mut().zip(x) {
                    *oi += w * xi;
                }
            }
        }
        return Ok(out);
    }
    let rhos = state_distributions_fh(mdp, policy)?;
    let na = mdp.n_actions;
    Ok(rhos
        .iter()
        .enumerate()
        .map(|(h, rho)| {
            let mut occ = vec![0.0; mdp.n_cells()];
            for (s, &m) in rho.iter().enumerate() {
                for (a, p) in policy.action_probs(h, s, na).into_iter().enumerate() {
                    occ[s * na + a] = m * p;
                }
            }
            occ
        })
        .collect())
}

/// Occupancy d^π_h(s, a) at one step.
pub fn occupancy_measure_fh(mdp: &FiniteHorizonMdp, policy: &Policy, h: usize) -> Result<Vec<f64>> {
    if h >= mdp.horizon {
        return Err(RrlError::InvalidParameter(format!("step {h} beyond horizon {}", mdp.horizon)));
    }
    Ok(occupancy_measures_fh(mdp, policy)?.swap_remove(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::dataset::Simulator;
    use crate::mdp::EpisodicEnv;
    use crate::rng;

    fn chain() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            vec![vec![0.6, 0.4], vec![0.1, 0.9], vec![0.5, 0.5], vec![0.8, 0.2]],
            vec![1.0, 0.2, 0.3, 0.7],
            0.8,
            vec![0.3, 0.7],
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_cell_occupancy_is_one() {
        let m = TabularMdp::new(1, 1, vec![vec![1.0]], vec![1.0], 0.5, vec![1.0], None).unwrap();
        let d = occupancy_measure(&m, &Policy::StationaryDeterministic(vec![0])).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discounted_occupancy_normalized_and_matches_monte_carlo() {
        let m = chain();
        let pi = Policy::uniform(2, 2);
        let d = occupancy_measure(&m, &pi).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        // geometric-horizon Monte Carlo: stop each step with probability 1 - gamma
        let mut r = rng::stream(3, rng::STREAM_SIMULATION);
        let mut counts = [0.0; 4];
        let n = 1_000_000;
        use rand::Rng as _;
        for _ in 0..n {
            let mut s = super::super::policy::sample_index(&m.d0, &mut r);
            loop {
                let a = pi.sample_action(0, s, &mut r);
                if r.gen::<f64>() < 1.0 - m.gamma {
                    counts[s * 2 + a] += 1.0;
                    break;
                }
                s = super::super::policy::sample_index(m.row(s, a), &mut r);
            }
        }
        for (c, x) in counts.iter().zip(&d) {
            assert!((c / n as f64 - x).abs() < 2e-3, "{} vs {x}", c / n as f64);
        }
    }

    #[test]
    fn fh_first_step_is_d0_times_pi() {
        let fh = chain().to_finite_horizon(3);
        let pi = Policy::NonstationaryStochastic(vec![vec![vec![0.25, 0.75]; 2]; 3]);
        let d0 = occupancy_measure_fh(&fh, &pi, 0).unwrap();
        assert_eq!(d0, vec![0.3 * 0.25, 0.3 * 0.75, 0.7 * 0.25, 0.7 * 0.75]);
        for occ in occupancy_measures_fh(&fh, &pi).unwrap() {
            assert!((occ.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
        assert!(occupancy_measure_fh(&fh, &pi, 3).is_err());
    }

    #[test]
    fn fh_occupancy_matches_simulation() {
        let fh = chain().to_finite_horizon(3);
        let pi = Policy::NonstationaryDeterministic(vec![vec![0, 1], vec![1, 0], vec![0, 0]]);
        let exact = occupancy_measures_fh(&fh, &pi).unwrap();
        let mut env = Simulator::new(&fh, 4);
        let n = 200_000;
        let mut counts = vec![vec![0.0; 4]; 3];
        for _ in 0..n {
            let mut s = env.reset();
            for (h, c) in counts.iter_mut().enumerate() {
                let a = pi.deterministic_action(h, s).unwrap();
                c[s * 2 + a] += 1.0;
                s = env.step(a).unwrap().1;
            }
        }
        for (c, e) in counts.iter().zip(&exact) {
            for (ci, ei) in c.iter().zip(e) {
                assert!((ci / n as f64 - ei).abs() < 5e-3);
            }
        }
    }

    #[test]
    fn mixture_occupancy_is_weighted_average() {
        let fh = chain().to_finite_horizon(2);
        let p1 = Policy::NonstationaryDeterministic(vec![vec![0, 0], vec![0, 0]]);
        let p2 = Policy::NonstationaryDeterministic(vec![vec![1, 1], vec![1, 1]]);
        let mix = Policy::Mixture {
            members: vec![p1.clone(), p2.clone()],
            weights: vec![0.5, 0.5],
        };
        let a = occupancy_measures_fh(&fh, &p1).unwrap();
        let b = occupancy_measures_fh(&fh, &p2).unwrap();
        let m = occupancy_measures_fh(&fh, &mix).unwrap();
        for h in 0..2 {
            for c in 0..4 {
                assert!((m[h][c] - 0.5 * (a[h][c] + b[h][c])).abs() < 1e-15);
            }
        }
    }
}
