#![allow(dead_code, clippy::needless_range_loop)]

use microgrid::grid::{Branch, GridNode, GridTree, InjectionState, NodeId, Phasor};
use rand::Rng;

pub fn c(re: f64, im: f64) -> Phasor {
    Phasor::new(re, im)
}

/// Random recursive tree with mixed node kinds and per-branch impedances.
pub fn random_grid<R: Rng>(rng: &mut R, n: usize) -> GridTree {
    let mut nodes = vec![GridNode::pcc()];
    for i in 1..n {
        let s = c(rng.gen_range(500.0..8000.0), rng.gen_range(-500.0..5000.0));
        nodes.push(match rng.gen_range(0..10) {
            0..=3 => GridNode::dg(i, s),
            4 => GridNode::junction(i),
            _ => GridNode::load(i, s),
        });
    }
    let branches = (1..n)
        .map(|i| {
            let parent = rng.gen_range(0..i);
            let z = c(rng.gen_range(0.02e-3..0.3e-3), rng.gen_range(0.0..0.3e-3));
            Branch::new(parent, i, rng.gen_range(5.0..60.0), z)
        })
        .collect();
    GridTree::new(c(230.0, 0.0), nodes, branches).unwrap()
}

pub fn random_injection<R: Rng>(rng: &mut R, grid: &GridTree) -> InjectionState {
    grid.dgs()
        .map(|dg| (dg, c(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0))))
        .collect()
}

/// Node voltages from the reduced nodal admittance equations, solved by
/// dense Gaussian elimination with partial pivoting.
pub fn dense_voltages(grid: &GridTree, inj: &InjectionState) -> Vec<Phasor> {
    let n = grid.len();
    let m = n - 1;
    let mut a = vec![vec![Phasor::default(); m + 1]; m];
    let u0 = grid.pcc_voltage();
    for b in grid.branches() {
        let y = 1.0 / b.impedance();
        let (p, q) = (b.parent.0, b.child.0);
        for (x, other) in [(p, q), (q, p)] {
            if x == 0 {
                continue;
            }
            a[x - 1][x - 1] += y;
            if other == 0 {
                a[x - 1][m] += y * u0;
            } else {
                a[x - 1][other - 1] -= y;
            }
        }
    }
    for v in 1..n {
        let id = NodeId(v);
        a[v - 1][m] += inj.get(id) - grid.load_current(id);
    }
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))
            .unwrap();
        a.swap(col, piv);
        for row in col + 1..m {
            let f = a[row][col] / a[col][col];
            if f.norm() == 0.0 {
                continue;
            }
            for k in col..=m {
                let t = a[col][k];
                a[row][k] -= f * t;
            }
        }
    }
    let mut x = vec![Phasor::default(); m];
    for row in (0..m).rev() {
        let mut s = a[row][m];
        for k in row + 1..m {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    std::iter::once(u0).chain(x).collect()
}

/// Loss from voltages alone: Σ R |ΔU / Z|².
pub fn loss_from_voltages(grid: &GridTree, u: &[Phasor]) -> f64 {
    grid.branches()
        .iter()
        .map(|b| {
            let i = (u[b.parent.0] - u[b.child.0]) / b.impedance();
            b.impedance().re * i.norm_sqr()
        })
        .sum()
}
