//! Bertsekas-style auction assignment with ε-scaling.
//!
//! Persons bid for objects; prices rise with each bid. With bidding
//! increment ε the final assignment satisfies ε-complementary slackness,
//! so its total cost is within n·ε of optimal. Scaling ε down and re-running
//! from the current prices lets us stop as soon as the a-posteriori bound
//! certifies the requested (1+ε) factor.

use crate::error::{Error, Result};

/// Minimizes total assignment cost to within a (1 + eps) factor.
/// `cost` is row-major n×n. Returns `assignment[person] = object`.
pub fn solve(cost: &[f64], n: usize, eps: f64) -> Result<Vec<usize>> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n*n");
    if eps <= 0.0 {
        return Err(Error::contract(format!("auction: eps must be > 0, got {eps}")));
    }
    if n == 1 {
        return Ok(vec![0]);
    }

    let max_cost = cost.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    let mut prices = vec![0.0; n];
    // Start coarse and scale down by a constant factor each phase.
    let mut epsilon = (max_cost / 2.0).max(1e-9);
    let scale_factor = 6.0;
    let bid_cap: usize = 2_000 * n * n + 100_000;
    let mut total_bids: usize = 0;

    loop {
        let assignment = run_phase(cost, n, epsilon, &mut prices, bid_cap, &mut total_bids)?;
        let total: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum();
        // ε-CS gives: total <= optimal + n·epsilon, i.e. optimal >= total - n·epsilon.
        let slack = n as f64 * epsilon;
        if total <= 0.0 {
            // Optimal is nonnegative for metric costs; zero certifies itself.
            return Ok(assignment);
        }
        let lower_bound = total - slack;
        if lower_bound > 0.0 && slack <= eps * lower_bound {
            return Ok(assignment);
        }
        epsilon /= scale_factor;
        if epsilon < 1e-300 {
            return Err(Error::Convergence(
                "auction: epsilon underflow before certification".into(),
            ));
        }
    }
}

fn run_phase(
    cost: &[f64],
    n: usize,
    epsilon: f64,
    prices: &mut [f64],
    bid_cap: usize,
    total_bids: &mut usize,
) -> Result<Vec<usize>> {
    let mut person_of: Vec<Option<usize>> = vec![None; n]; // object -> person
    let mut object_of: Vec<Option<usize>> = vec![None; n]; // person -> object
    let mut unassigned: Vec<usize> = (0..n).collect();

    while let Some(person) = unassigned.pop() {
        *total_bids += 1;
        if *total_bids > bid_cap {
            return Err(Error::Convergence(format!(
                "auction: exceeded {bid_cap} bids without assigning everyone"
            )));
        }
        // Find the best and second-best objects at current prices.
        let row = &cost[person * n..(person + 1) * n];
        let mut best_j = 0;
        let mut best_v = f64::INFINITY;
        let mut second_v = f64::INFINITY;
        for j in 0..n {
            let v = row[j] + prices[j];
            if v < best_v {
                second_v = best_v;
                best_v = v;
                best_j = j;
            } else if v < second_v {
                second_v = v;
            }
        }
        let increment = if second_v.is_finite() {
            second_v - best_v + epsilon
        } else {
            epsilon
        };
        prices[best_j] += increment;
        if let Some(evicted) = person_of[best_j] {
            object_of[evicted] = None;
            unassigned.push(evicted);
        }
        person_of[best_j] = Some(person);
        object_of[person] = Some(best_j);
    }

    Ok(object_of.into_iter().map(|o| o.unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::hungarian;

    #[test]
    fn matches_hungarian_on_small_instances() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64)
        };
        for n in [2usize, 3, 5, 8] {
            for _ in 0..10 {
                let cost: Vec<f64> = (0..n * n).map(|_| next() * 4.0).collect();
                let (_, exact) = hungarian::solve(&cost, n);
                let approx = solve(&cost, n, 0.01).unwrap();
                let total: f64 = approx
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| cost[i * n + j])
                    .sum();
                assert!(
                    total <= exact * 1.01 + 1e-12,
                    "n={n}: auction {total} vs exact {exact}"
                );
                // valid bijection
                let mut seen = vec![false; n];
                for &j in &approx {
                    assert!(!seen[j]);
                    seen[j] = true;
                }
            }
        }
    }

    #[test]
    fn zero_cost_identity() {
        let n = 4;
        let mut cost = vec![1.0; n * n];
        for i in 0..n {
            cost[i * n + i] = 0.0;
        }
        let assignment = solve(&cost, n, 0.01).unwrap();
        assert_eq!(assignment, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(solve(&[0.0], 1, 0.0).is_err());
    }
}
