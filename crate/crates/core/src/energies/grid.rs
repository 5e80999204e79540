use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};

use super::{BoxBounds, EnergyError, EnergyModel};

/// Tabulated energy on a regular grid with multilinear interpolation
/// (bilinear in 2-D). Node values are the trainable parameter `"values"`,
/// stored row-major with axis 0 slowest. The density lives on the box:
/// outside it the coordinates are clamped.
#[derive(Clone, Debug)]
pub struct GridEnergy {
    bounds: BoxBounds,
    resolution: Vec<usize>,
    values: Vec<f64>,
}

impl GridEnergy {
    pub fn new(bounds: BoxBounds, resolution: Vec<usize>, values: Vec<f64>) -> Result<Self, EnergyError> {
        if resolution.len() != bounds.dim() {
            return Err(EnergyError::Dimension {
                expected: bounds.dim(),
                got: resolution.len(),
            });
        }
        if bounds.dim() > 3 {
            return Err(EnergyError::Invalid("grid energies support at most 3 dimensions".into()));
        }
        if resolution.iter().any(|&r| r < 2) {
            return Err(EnergyError::Invalid("every axis needs at least 2 nodes".into()));
        }
        let n: usize = resolution.iter().product();
        if values.len() != n {
            return Err(EnergyError::Invalid(format!("{} node values for {} nodes", values.len(), n)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EnergyError::Invalid("node values must be finite".into()));
        }
        Ok(Self {
            bounds,
            resolution,
            values,
        })
    }

    /// All nodes set to `level`.
    pub fn constant(bounds: BoxBounds, resolution: Vec<usize>, level: f64) -> Result<Self, EnergyError> {
        let n = resolution.iter().product();
        Self::new(bounds, resolution, vec![level; n])
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coordinate of node `k` along `axis`.
    pub fn node_coord(&self, axis: usize, k: usize) -> f64 {
        let lo = self.bounds.lo[axis];
        let h = (self.bounds.hi[axis] - lo) / (self.resolution[axis] - 1) as f64;
        lo + k as f64 * h
    }

    /// Index of the cell containing `c` along `axis` (clamped to the grid).
    fn cell(&self, axis: usize, c: f64) -> usize {
        let last = self.resolution[axis] - 2;
        let lo = self.bounds.lo[axis];
        let h = (self.bounds.hi[axis] - lo) / (self.resolution[axis] - 1) as f64;
        let mut k = ((c - lo) / h).floor().clamp(0.0, last as f64) as usize;
        while k < last && c >= self.node_coord(axis, k + 1) {
            k += 1;
        }
        while k > 0 && c < self.node_coord(axis, k) {
            k -= 1;
        }
        k
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.resolution.len();
        let mut s = vec![1; d];
        for i in (0..d - 1).rev() {
            s[i] = s[i + 1] * self.resolution[i + 1];
        }
        s
    }
}

impl EnergyModel for GridEnergy {
    fn dim(&self) -> usize {
        self.bounds.dim()
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("values", Tensor::vector(self.values.clone())).expect("fresh set");
        p
    }

    fn set_params(&mut self, params: &ParamSet) -> Result<(), EnergyError> {
        let v = params.get("values")?;
        if v.len() != self.values.len() {
            return Err(EnergyError::Dimension {
                expected: self.values.len(),
                got: v.len(),
            });
        }
        self.values = v.data().to_vec();
        Ok(())
    }

    fn build(&self, g: &mut Graph, theta: &ParamNodes, x: NodeId) -> Result<NodeId, EnergyError> {
        let d = self.dim();
        let n = g.shape(x)[0];
        let values = theta.get("values")?;
        let strides = self.strides();
        let xv = g.value(x).clone();

        let mut frac = Vec::with_capacity(d);
        let mut one_minus = Vec::with_capacity(d);
        let mut cells = vec![0usize; n * d];
        for axis in 0..d {
            let top = self.node_coord(axis, self.resolution[axis] - 1);
            let idx: Vec<usize> = (0..n).map(|i| i * d + axis).collect();
            let col = g.gather(x, idx, &[n])?;
            let col = g.clamp(col, &[self.bounds.lo[axis]], &[top])?;
            let mut left = Vec::with_capacity(n);
            let mut inv_width = Vec::with_capacity(n);
            for i in 0..n {
                let c = xv.data()[i * d + axis].clamp(self.bounds.lo[axis], top);
                let k = self.cell(axis, c);
                cells[i * d + axis] = k;
                let a = self.node_coord(axis, k);
                let b = self.node_coord(axis, k + 1);
                left.push(a);
                inv_width.push(1.0 / (b - a));
            }
            let left = g.constant(Tensor::vector(left));
            let inv_width = g.constant(Tensor::vector(inv_width));
            let shifted = g.sub(col, left)?;
            let f = g.mul(shifted, inv_width)?;
            let ones = g.constant(Tensor::ones(&[n]));
            let om = g.sub(ones, f)?;
            frac.push(f);
            one_minus.push(om);
        }

        let mut total: Option<NodeId> = None;
        for corner in 0..(1usize << d) {
            let mut weight: Option<NodeId> = None;
            for axis in 0..d {
                let factor = if corner >> axis & 1 == 1 { frac[axis] } else { one_minus[axis] };
                weight = Some(match weight {
                    Some(w) => g.mul(w, factor)?,
                    None => factor,
                });
            }
            let idx: Vec<usize> = (0..n)
                .map(|i| {
                    (0..d)
                        .map(|axis| (cells[i * d + axis] + (corner >> axis & 1)) * strides[axis])
                        .sum()
                })
                .collect();
            let v = g.gather(values, idx, &[n])?;
            let term = g.mul(weight.expect("d >= 1"), v)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one corner"))
    }

    fn support(&self) -> Option<BoxBounds> {
        Some(self.bounds.clone())
    }

    fn clone_box(&self) -> Box<dyn EnergyModel> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{energies, energy_and_grad_x};

    fn small_grid() -> GridEnergy {
        // 3 x 4 nodes on [-1, 1] x [0, 3]
        let values = (0..12).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
        GridEnergy::new(BoxBounds::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap(), vec![3, 4], values).unwrap()
    }

    #[test]
    fn nodes_reproduce_stored_values_exactly() {
        let g = small_grid();
        let mut pts = Vec::new();
        for i in 0..3 {
            for j in 0..4 {
                pts.push(g.node_coord(0, i));
                pts.push(g.node_coord(1, j));
            }
        }
        let e = energies(&g, &Tensor::matrix(12, 2, pts).unwrap()).unwrap();
        assert_eq!(e.data(), g.values());
    }

    #[test]
    fn off_node_point_matches_hand_bilinear_blend() {
        let g = small_grid();
        let (x, y) = (0.3, 1.75);
        // cell: axis 0 nodes at 0 and 1 (k=1), axis 1 nodes at 1 and 2 (k=1)
        let v = |i: usize, j: usize| g.values()[i * 4 + j];
        let fx = (x - 0.0) / 1.0;
        let fy = (y - 1.0) / 1.0;
        let expected = (1.0 - fx) * (1.0 - fy) * v(1, 1)
            + fx * (1.0 - fy) * v(2, 1)
            + (1.0 - fx) * fy * v(1, 2)
            + fx * fy * v(2, 2);
        let e = energies(&g, &Tensor::matrix(1, 2, vec![x, y]).unwrap()).unwrap();
        assert!((e.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn outside_the_box_is_clamped_with_zero_gradient() {
        let g = small_grid();
        let inside = energies(&g, &Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap()).unwrap();
        let (outside, dx) = energy_and_grad_x(&g, &Tensor::matrix(1, 2, vec![5.0, 9.0]).unwrap()).unwrap();
        assert_eq!(inside.data(), outside.data());
        assert_eq!(dx.data(), &[0.0, 0.0]);
    }

    #[test]
    fn one_dimensional_grid_interpolates_linearly() {
        let g = GridEnergy::new(BoxBounds::new(vec![0.0], vec![2.0]).unwrap(), vec![3], vec![0.0, 2.0, 1.0]).unwrap();
        let e = energies(&g, &Tensor::matrix(3, 1, vec![0.5, 1.0, 1.5]).unwrap()).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 1.5]);
    }
}
