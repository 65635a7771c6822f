//! Exact discrete optimal transport by successive shortest paths.
//!
//! Used for W1 when atoms live in more than one dimension, and as the
//! assignment-LP route when checking the one-dimensional quantile coupling.

/// Atom supports beyond this size on either side are rejected.
pub const MAX_EXACT_ATOMS: usize = 512;

const MASS_EPS: f64 = 1e-14;

/// Minimum of `sum_ij f_ij * cost[i][j]` over couplings `f` with row sums `supply`
/// and column sums `demand`. Both must carry the same total mass.
pub fn min_cost_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
    let ns = supply.len();
    let nt = demand.len();
    debug_assert_eq!(cost.len(), ns);
    let mut rem_s = supply.to_vec();
    let mut rem_t = demand.to_vec();
    let mut flow = vec![vec![0.0f64; nt]; ns];
    let mut pot_s = vec![0.0f64; ns];
    let mut pot_t = vec![0.0f64; nt];

    // node v < ns is a source, v >= ns is sink v - ns
    let nodes = ns + nt;
    let mut dist = vec![f64::INFINITY; nodes];
    let mut done = vec![false; nodes];
    let mut parent = vec![usize::MAX; nodes];

    loop {
        if rem_s.iter().all(|&s| s <= MASS_EPS) || rem_t.iter().all(|&t| t <= MASS_EPS) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        for i in 0..ns {
            if rem_s[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }

        let mut target = usize::MAX;
        loop {
            let mut best = f64::INFINITY;
            let mut v = usize::MAX;
            for (u, (&d, &fin)) in dist.iter().zip(&done).enumerate() {
                if !fin && d < best {
                    best = d;
                    v = u;
                }
            }
            if v == usize::MAX {
                break;
            }
            done[v] = true;
            if v >= ns {
                let j = v - ns;
                if rem_t[j] > MASS_EPS {
                    target = v;
                    break;
                }
                // residual backward edges sink j -> source i
                for i in 0..ns {
                    if done[i] || flow[i][j] <= MASS_EPS {
                        continue;
                    }
                    let rc = (-cost[i][j] + pot_t[j] - pot_s[i]).max(0.0);
                    let nd = best + rc;
                    if nd < dist[i] {
                        dist[i] = nd;
                        parent[i] = v;
                    }
                }
            } else {
                let i = v;
                for j in 0..nt {
                    let w = ns + j;
                    if done[w] {
                        continue;
                    }
                    let rc = (cost[i][j] + pot_s[i] - pot_t[j]).max(0.0);
                    let nd = best + rc;
                    if nd < dist[w] {
                        dist[w] = nd;
                        parent[w] = v;
                    }
                }
            }
        }
        if target == usize::MAX {
            break;
        }

        let dt = dist[target];
        for i in 0..ns {
            pot_s[i] += if done[i] { dist[i] } else { dt };
        }
        for j in 0..nt {
            let w = ns + j;
            pot_t[j] += if done[w] { dist[w] } else { dt };
        }

        // bottleneck along the path
        let mut amount = rem_t[target - ns];
        let mut v = target;
        let source;
        loop {
            let p = parent[v];
            if p == usize::MAX {
                source = v;
                break;
            }
            if p >= ns {
                // backward edge: sink p -> source v
                amount = amount.min(flow[v][p - ns]);
            }
            v = p;
        }
        amount = amount.min(rem_s[source]);

        let mut v = target;
        while parent[v] != usize::MAX {
            let p = parent[v];
            if p < ns {
                flow[p][v - ns] += amount;
            } else {
                flow[v][p - ns] -= amount;
            }
            v = p;
        }
        rem_s[source] -= amount;
        rem_t[target - ns] -= amount;
    }

    let mut total = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            if flow[i][j] > 0.0 {
                total += flow[i][j] * cost[i][j];
            }
        }
    }
    total
}
