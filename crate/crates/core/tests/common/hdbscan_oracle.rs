//! Brute-force HDBSCAN*: split every cluster at its bottleneck distance into
//! the components of the strictly-closer graph.

pub struct Cluster {
    pub birth: f64,
    pub points: Vec<usize>,
    /// Exit lambda of each point from this cluster (fall-out or child birth).
    pub exit: Vec<f64>,
    pub children: Vec<usize>,
}

pub fn mutual_reachability(x: &[Vec<f64>], min_samples: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let core: Vec<f64> = d
        .iter()
        .map(|row| {
            let mut s = row.clone();
            s.sort_by(f64::total_cmp);
            s[min_samples - 1]
        })
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { d[i][j].max(core[i]).max(core[j]) }).collect())
        .collect()
}

fn components(mr: &[Vec<f64>], pts: &[usize], below: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; pts.len()];
    let mut out = Vec::new();
    for s in 0..pts.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![pts[s]];
        let mut stack = vec![s];
        while let Some(a) = stack.pop() {
            for b in 0..pts.len() {
                if !seen[b] && mr[pts[a]][pts[b]] < below {
                    seen[b] = true;
                    comp.push(pts[b]);
                    stack.push(b);
                }
            }
        }
        out.push(comp);
    }
    out
}

pub fn condensed(mr: &[Vec<f64>], mcs: usize) -> Vec<Cluster> {
    let n = mr.len();
    let mut min_pos = f64::INFINITY;
    for (i, row) in mr.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j && v > 0.0 {
                min_pos = min_pos.min(v);
            }
        }
    }
    let cap = if min_pos.is_finite() { 2.0 / min_pos } else { 1.0 };
    let lam = |w: f64| if w > 0.0 { 1.0 / w } else { cap };
    let mut out = Vec::new();
    grow(mr, (0..n).collect(), 0.0, mcs, &lam, &mut out);
    out
}

fn grow(mr: &[Vec<f64>], points: Vec<usize>, birth: f64, mcs: usize, lam: &dyn Fn(f64) -> f64, out: &mut Vec<Cluster>) -> usize {
    let id = out.len();
    out.push(Cluster {
        birth,
        points: points.clone(),
        exit: vec![f64::NAN; points.len()],
        children: Vec::new(),
    });
    let index = |p: usize| points.iter().position(|&q| q == p).expect("member");
    let mut current = points.clone();
    loop {
        // bottleneck: largest weight needed to keep `current` connected
        let mut levels: Vec<f64> = Vec::new();
        for &a in &current {
            for &b in &current {
                if a < b {
                    levels.push(mr[a][b]);
                }
            }
        }
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        // smallest level at which the closed graph connects `current`
        let w = levels
            .iter()
            .copied()
            .find(|&w| components(mr, &current, next_up(w)).len() == 1)
            .unwrap_or(0.0);
        let l = lam(w);
        let parts = components(mr, &current, w);
        let (big, small): (Vec<Vec<usize>>, Vec<Vec<usize>>) = parts.into_iter().partition(|c| c.len() >= mcs);
        for c in &small {
            for &p in c {
                out[id].exit[index(p)] = l;
            }
        }
        match big.len() {
            0 => break,
            1 => current = big.into_iter().next().expect("one"),
            _ => {
                for c in big {
                    for &p in &c {
                        out[id].exit[index(p)] = l;
                    }
                    let child = grow(mr, c, l, mcs, lam, out);
                    out[id].children.push(child);
                }
                break;
            }
        }
    }
    id
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::MIN_POSITIVE
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

pub fn stability(c: &Cluster) -> f64 {
    c.exit.iter().map(|l| l - c.birth).sum()
}

/// Selected clusters as point sets.
pub fn select(tree: &[Cluster], leaf: bool) -> Vec<Vec<usize>> {
    fn best(tree: &[Cluster], c: usize, leaf: bool) -> (f64, Vec<usize>) {
        if tree[c].children.is_empty() {
            return (stability(&tree[c]), vec![c]);
        }
        let mut total = 0.0;
        let mut chosen = Vec::new();
        for &k in &tree[c].children {
            let (v, s) = best(tree, k, leaf);
            total += v;
            chosen.extend(s);
        }
        let own = stability(&tree[c]);
        if !leaf && own >= total {
            (own, vec![c])
        } else {
            (total, chosen)
        }
    }
    let ids = if tree[0].children.is_empty() {
        vec![0]
    } else {
        tree[0].children.iter().flat_map(|&k| best(tree, k, leaf).1).collect()
    };
    let mut sets: Vec<Vec<usize>> = ids
        .into_iter()
        .map(|c| {
            let mut p = tree[c].points.clone();
            p.sort_unstable();
            p
        })
        .collect();
    sets.sort();
    sets
}
