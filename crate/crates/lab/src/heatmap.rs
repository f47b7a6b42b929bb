//! Task-energy heat map over skill start positions.

use std::io::Write;

use etank_core::{generate_pattern, PatternSpec, SurfaceModel};
use etank_estimator::{ModelError, PowerEstimator};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub nu: usize,
    pub nv: usize,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nu: 20,
            nv: 20,
            u_range: (-0.5, 0.5),
            v_range: (-0.5, 0.5),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.nu < 2 || self.nv < 2 {
            return Err(format!("heat map needs at least 2×2 nodes, got {}×{}", self.nu, self.nv));
        }
        if !(self.u_range.0 < self.u_range.1 && self.v_range.0 < self.v_range.1) {
            return Err("heat map ranges must be increasing".into());
        }
        Ok(())
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        let lerp = |(a, b): (f64, f64), k: usize, n: usize| (a * (n - 1 - k) as f64 + b * k as f64) / (n - 1) as f64;
        (lerp(self.u_range, i, self.nu), lerp(self.v_range, j, self.nv))
    }
}

/// Node energies, `energy[j * nu + i]` for node `(u_i, v_j)`. Nodes whose
/// template path leaves the workspace hold `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMapGrid {
    pub spec: GridSpec,
    pub energy: Vec<Option<f64>>,
}

/// Fractional grid coordinate, snapped onto a node when within rounding.
fn grid_coord(x: f64, (a, b): (f64, f64), n: usize) -> Option<(usize, f64)> {
    let mut t = (x - a) / (b - a) * (n - 1) as f64;
    if (t - t.round()).abs() < 1e-9 {
        t = t.round();
    }
    if !(0.0..=(n - 1) as f64).contains(&t) {
        return None;
    }
    let i = (t.floor() as usize).min(n - 2);
    Some((i, t - i as f64))
}

impl HeatMapGrid {
    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        self.energy[j * self.spec.nu + i]
    }

    /// Bilinear interpolation; `None` outside the grid or in a cell with an
    /// invalid corner. Exact at nodes.
    pub fn query(&self, u: f64, v: f64) -> Option<f64> {
        let (i, fu) = grid_coord(u, self.spec.u_range, self.spec.nu)?;
        let (j, fv) = grid_coord(v, self.spec.v_range, self.spec.nv)?;
        // Weights that vanish skip their corner so an exact node query does
        // not depend on neighbouring cells.
        let corners = [
            ((1.0 - fu) * (1.0 - fv), i, j),
            (fu * (1.0 - fv), i + 1, j),
            ((1.0 - fu) * fv, i, j + 1),
            (fu * fv, i + 1, j + 1),
        ];
        let mut acc = 0.0;
        for (w, a, b) in corners {
            if w != 0.0 {
                acc += w * self.at(a, b)?;
            }
        }
        Some(acc)
    }

    pub fn valid_energies(&self) -> Vec<f64> {
        self.energy.iter().flatten().copied().collect()
    }

    /// `u,v,energy_J` per node; invalid nodes have an empty energy field.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "u,v,energy_J")?;
        for j in 0..self.spec.nv {
            for i in 0..self.spec.nu {
                let (u, v) = self.spec.node(i, j);
                match self.at(i, j) {
                    Some(e) => writeln!(w, "{u},{v},{e}")?,
                    None => writeln!(w, "{u},{v},")?,
                }
            }
        }
        Ok(())
    }
}

/// Predicts the task energy `ε + ∫P dt` of `template` started at every node.
pub fn build_heatmap(
    est: &PowerEstimator,
    surface: &SurfaceModel,
    template: &PatternSpec,
    grid: &GridSpec,
    epsilon: f64,
) -> Result<HeatMapGrid, ModelError> {
    let mut energy = Vec::with_capacity(grid.nu * grid.nv);
    for j in 0..grid.nv {
        for i in 0..grid.nu {
            let spec = PatternSpec {
                start_uv: grid.node(i, j),
                ..template.clone()
            };
            let e = match generate_pattern(surface, &spec) {
                Ok(g) if !g.truncated => est.energy_schedule(&g.skill, epsilon)?.last().copied(),
                _ => None,
            };
            energy.push(e);
        }
    }
    Ok(HeatMapGrid {
        spec: grid.clone(),
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(values: Vec<Option<f64>>, nu: usize, nv: usize) -> HeatMapGrid {
        HeatMapGrid {
            spec: GridSpec {
                nu,
                nv,
                u_range: (-0.5, 0.5),
                v_range: (-0.3, 0.4),
            },
            energy: values,
        }
    }

    fn random_grid(nu: usize, nv: usize, seed: u64) -> HeatMapGrid {
        let vals = (0..nu * nv).map(|k| Some(((k as u64 * 2654435761 + seed) % 1000) as f64 / 7.0)).collect();
        grid(vals, nu, nv)
    }

    #[test]
    fn node_queries_are_exact() {
        let g = random_grid(20, 20, 5);
        for j in 0..20 {
            for i in 0..20 {
                let (u, v) = g.spec.node(i, j);
                assert_eq!(g.query(u, v), g.at(i, j), "node ({i}, {j})");
            }
        }
    }

    #[test]
    fn midpoint_is_mean() {
        let mut vals = vec![Some(1.0); 4];
        vals[1] = Some(3.0);
        let g = grid(vals, 2, 2);
        // Midpoint of nodes (0,0) and (1,0) on the lower edge.
        assert_eq!(g.query(0.0, -0.3), Some(2.0));
    }

    #[test]
    fn invalid_and_outside() {
        let g = grid(vec![Some(1.0), None, Some(1.0), Some(1.0)], 2, 2);
        assert_eq!(g.query(0.0, 0.0), None);
        // Exact node next to an invalid one is still defined.
        assert_eq!(g.query(-0.5, -0.3), Some(1.0));
        assert_eq!(g.query(0.6, 0.0), None);
        assert_eq!(g.valid_energies().len(), 3);
    }

    #[test]
    fn csv_rows() {
        let g = grid(vec![Some(1.5), None, Some(2.0), Some(0.25)], 2, 2);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "u,v,energy_J\n-0.5,-0.3,1.5\n0.5,-0.3,\n-0.5,0.4,2\n0.5,0.4,0.25\n");
    }

    proptest! {
        #[test]
        fn query_within_cell_bounds(u in -0.5f64..0.5, v in -0.3f64..0.4, seed in 0u64..100) {
            let g = random_grid(5, 4, seed);
            let q = g.query(u, v).unwrap();
            let (i, _) = grid_coord(u, g.spec.u_range, 5).unwrap();
            let (j, _) = grid_coord(v, g.spec.v_range, 4).unwrap();
            let corners = [g.at(i, j), g.at(i + 1, j), g.at(i, j + 1), g.at(i + 1, j + 1)].map(Option::unwrap);
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(q >= lo - 1e-12 && q <= hi + 1e-12);
        }

        #[test]
        fn query_is_continuous(u in -0.49f64..0.49, v in -0.29f64..0.39) {
            let g = random_grid(6, 6, 1);
            let a = g.query(u, v).unwrap();
            let b = g.query(u + 1e-9, v + 1e-9).unwrap();
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
