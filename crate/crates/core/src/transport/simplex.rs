//! Network simplex for the dense bipartite transportation problem.
//!
//! Sources are nodes `0..ns`, targets `ns..ns+nt`. The basis is a spanning
//! tree with `ns+nt-1` arcs, seeded by the northwest-corner rule. Entering
//! arcs come from a block scan (most negative reduced cost, earliest in
//! scan order on ties); a full-scan Bland rule takes over after long
//! degenerate stretches so the pivot sequence terminates. No randomness
//! anywhere: same inputs, same pivots, same plan.

/// Dense cost matrix, row-major over (source, target).
pub struct CostMatrix {
    pub ns: usize,
    pub nt: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.nt + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Exact solution of `min sum C[i][j] m[i][j]` subject to row sums `a`,
/// column sums `b`, `m >= 0`.
pub struct SimplexSolution {
    /// Positive-mass couplings, sorted by (i, j).
    pub flows: Vec<(usize, usize, f64)>,
    /// Dual multipliers with `alpha_i + beta_j = C_ij` on basic arcs.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub objective: f64,
}

struct Basis {
    ns: usize,
    nt: usize,
    /// Basic arcs as (source, target, flow).
    arcs: Vec<(usize, usize, f64)>,
    /// Tree over nodes 0..ns+nt rooted at node 0.
    parent: Vec<usize>,
    /// Index into `arcs` of the arc linking a node to its parent.
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Basis {
    fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<(usize, usize, f64)> {
        let (ns, nt) = (a.len(), b.len());
        let mut arcs = Vec::with_capacity(ns + nt - 1);
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (a[0], b[0]);
        loop {
            let th = ra.min(rb).max(0.0);
            arcs.push((i, j, th));
            ra -= th;
            rb -= th;
            if i == ns - 1 && j == nt - 1 {
                break;
            }
            // Advance exactly one index per step so the arc count lands on
            // ns+nt-1 even through degenerate (zero remaining) cells.
            if ra <= rb && i < ns - 1 {
                i += 1;
                ra = a[i];
            } else {
                j += 1;
                rb = b[j];
            }
        }
        debug_assert_eq!(arcs.len(), ns + nt - 1);
        arcs
    }

    fn new(a: &[f64], b: &[f64]) -> Basis {
        let (ns, nt) = (a.len(), b.len());
        let n = ns + nt;
        Basis {
            ns,
            nt,
            arcs: Self::northwest_corner(a, b),
            parent: vec![usize::MAX; n],
            parent_arc: vec![usize::MAX; n],
            depth: vec![0; n],
            alpha: vec![0.0; ns],
            beta: vec![0.0; nt],
        }
    }

    /// Recomputes parents, depths, and duals from the arc list by one walk
    /// from node 0. O(ns+nt); called once per pivot. The duals satisfy
    /// `alpha_i + beta_j = C_ij` on basic arcs with `alpha_0 = 0`.
    fn refresh(&mut self, cost: &CostMatrix) {
        let n = self.ns + self.nt;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, &(i, j, _)) in self.arcs.iter().enumerate() {
            adj[i].push((self.ns + j, k));
            adj[self.ns + j].push((i, k));
        }
        self.parent.fill(usize::MAX);
        self.parent_arc.fill(usize::MAX);
        self.depth.fill(0);
        self.alpha[0] = 0.0;
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0usize];
        let mut reached = 1usize;
        while let Some(u) = stack.pop() {
            for &(v, arc) in &adj[u] {
                if seen[v] {
                    continue;
                }
                seen[v] = true;
                reached += 1;
                self.parent[v] = u;
                self.parent_arc[v] = arc;
                self.depth[v] = self.depth[u] + 1;
                let (i, j, _) = self.arcs[arc];
                if v < self.ns {
                    self.alpha[i] = cost.at(i, j) - self.beta[j];
                } else {
                    self.beta[j] = cost.at(i, j) - self.alpha[i];
                }
                stack.push(v);
            }
        }
        debug_assert_eq!(reached, n, "basis is not a spanning tree");
    }

    fn arc_between(&self, u: usize, v: usize) -> usize {
        if self.parent[u] == v {
            self.parent_arc[u]
        } else {
            debug_assert_eq!(self.parent[v], u);
            self.parent_arc[v]
        }
    }

    /// Closed walk of the cycle created by the entering arc (i, j):
    /// `[i, ns+j, ..., i]`, where everything after the first hop follows
    /// tree edges. Consecutive nodes alternate source/target sides.
    fn cycle(&self, i: usize, j: usize) -> Vec<usize> {
        let (mut u, mut v) = (i, self.ns + j);
        let mut from_u = vec![u];
        let mut from_v = vec![v];
        while self.depth[u] > self.depth[v] {
            u = self.parent[u];
            from_u.push(u);
        }
        while self.depth[v] > self.depth[u] {
            v = self.parent[v];
            from_v.push(v);
        }
        while u != v {
            u = self.parent[u];
            v = self.parent[v];
            from_u.push(u);
            from_v.push(v);
        }
        // from_u = [i, ..., lca], from_v = [ns+j, ..., lca]. The closed
        // walk is i -> ns+j (entering), then ns+j -> ... -> lca -> ... -> i
        // along tree edges.
        let mut cycle = Vec::with_capacity(from_u.len() + from_v.len());
        cycle.push(i);
        cycle.extend(from_v);
        cycle.extend(from_u[..from_u.len() - 1].iter().rev());
        cycle
    }
}

/// `a` and `b` must be balanced nonnegative weights; the caller validates
/// that.
pub fn solve(a: &[f64], b: &[f64], cost: &CostMatrix) -> SimplexSolution {
    let (ns, nt) = (a.len(), b.len());
    debug_assert_eq!(ns, cost.ns);
    debug_assert_eq!(nt, cost.nt);
    let arcs_total = ns * nt;
    let mut basis = Basis::new(a, b);
    basis.refresh(cost);

    let tol = 1e-12 * cost.max_abs().max(1.0);
    let block = ((arcs_total as f64).sqrt() as usize).clamp(64, 8192).min(arcs_total);
    let mut cursor = 0usize;
    let mut degenerate_streak = 0usize;
    let bland_after = 50 * (ns + nt);

    loop {
        let reduced = |arc: usize| {
            let (i, j) = (arc / nt, arc % nt);
            cost.at(i, j) - basis.alpha[i] - basis.beta[j]
        };
        let entering = if degenerate_streak >= bland_after {
            // Bland's rule: lowest arc id whose reduced cost is negative.
            (0..arcs_total).find(|&arc| reduced(arc) < -tol)
        } else {
            // Block scan from a persistent cursor.
            let mut found = None;
            let mut scanned = 0usize;
            'blocks: while scanned < arcs_total {
                let end = (scanned + block).min(arcs_total);
                let mut best: Option<(f64, usize)> = None;
                while scanned < end {
                    let arc = (cursor + scanned) % arcs_total;
                    let r = reduced(arc);
                    if r < -tol && best.map_or(true, |(br, _)| r < br) {
                        best = Some((r, arc));
                    }
                    scanned += 1;
                }
                if let Some((_, arc)) = best {
                    cursor = (cursor + scanned) % arcs_total;
                    found = Some(arc);
                    break 'blocks;
                }
            }
            found
        };
        let Some(arc) = entering else { break };
        let (ei, ej) = (arc / nt, arc % nt);

        // Around the cycle, arcs traversed source->target gain theta and
        // arcs traversed target->source lose theta; bipartiteness makes
        // the signs alternate. The entering arc is the first hop (gain).
        let cycle = basis.cycle(ei, ej);
        let mut theta = f64::INFINITY;
        let mut leave: Option<(usize, (usize, usize))> = None;
        for w in cycle.windows(2).skip(1) {
            if w[0] >= ns {
                let arc_idx = basis.arc_between(w[0], w[1]);
                let (ai, aj, flow) = basis.arcs[arc_idx];
                let replace = flow < theta
                    || (flow == theta && leave.as_ref().map_or(true, |(_, key)| (ai, aj) < *key));
                if replace {
                    theta = flow;
                    leave = Some((arc_idx, (ai, aj)));
                }
            }
        }
        let (leave_idx, _) = leave.expect("bipartite pivot cycle has a reverse arc");

        for w in cycle.windows(2).skip(1) {
            let arc_idx = basis.arc_between(w[0], w[1]);
            if w[0] >= ns {
                basis.arcs[arc_idx].2 -= theta;
            } else {
                basis.arcs[arc_idx].2 += theta;
            }
        }
        basis.arcs[leave_idx] = (ei, ej, theta);
        basis.refresh(cost);

        if theta > 0.0 {
            degenerate_streak = 0;
        } else {
            degenerate_streak += 1;
        }
    }

    let mut flows: Vec<(usize, usize, f64)> = basis
        .arcs
        .iter()
        .filter(|&&(_, _, m)| m > 0.0)
        .copied()
        .collect();
    flows.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    let objective = flows.iter().map(|&(i, j, m)| m * cost.at(i, j)).sum();
    SimplexSolution {
        flows,
        alpha: basis.alpha,
        beta: basis.beta,
        objective,
    }
}
