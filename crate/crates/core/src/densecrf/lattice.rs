//! Permutohedral lattice for approximate high-dimensional Gaussian filtering.
//!
//! Points are embedded in the `d`-dimensional hyperplane of `Z^{d+1}` with
//! zero coordinate sum, splatted onto the enclosing simplex with barycentric
//! weights, blurred with a `[1/2, 1, 1/2]` stencil along each of the `d+1`
//! lattice directions, and sliced back.

use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Permutohedral {
    d: usize,
    n: usize,
    /// Lattice point index of each of the `d+1` simplex vertices per input point.
    offsets: Vec<usize>,
    weights: Vec<f64>,
    points: usize,
    /// `(d+1) * points` neighbour pairs; `0` means absent, otherwise index + 1.
    neighbors: Vec<(usize, usize)>,
}

impl Permutohedral {
    /// `features` holds `n` points of dimension `d`, already divided by their
    /// kernel widths.
    pub fn new(features: &[f64], d: usize) -> Self {
        assert!(d > 0 && features.len().is_multiple_of(d));
        let n = features.len() / d;
        let dp1 = d + 1;
        let scale: Vec<f64> = (0..d)
            .map(|i| dp1 as f64 * (2.0f64 / 3.0).sqrt() / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        let mut canonical = vec![0i32; dp1 * dp1];
        for i in 0..dp1 {
            for j in 0..dp1 {
                canonical[i * dp1 + j] = if j <= d - i { i as i32 } else { i as i32 - dp1 as i32 };
            }
        }

        let mut table: HashMap<Vec<i32>, usize> = HashMap::new();
        let mut keys: Vec<i32> = Vec::new();
        let mut offsets = vec![0usize; n * dp1];
        let mut weights = vec![0.0; n * dp1];
        let mut elevated = vec![0.0; dp1];
        let mut rem0 = vec![0i32; dp1];
        let mut rank = vec![0i32; dp1];
        let mut bary = vec![0.0; dp1 + 1];
        let mut key = vec![0i32; d];

        for p in 0..n {
            let f = &features[p * d..(p + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i32;
            for i in 0..dp1 {
                let rd = (elevated[i] / dp1 as f64).round() as i32;
                rem0[i] = rd * dp1 as i32;
                sum += rd;
            }
            rank.fill(0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..dp1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..dp1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += dp1 as i32;
                    rem0[i] += dp1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= dp1 as i32;
                    rem0[i] -= dp1 as i32;
                }
            }
            bary.fill(0.0);
            for i in 0..dp1 {
                let v = (elevated[i] - rem0[i] as f64) / dp1 as f64;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[dp1];

            for r in 0..dp1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * dp1 + rank[i] as usize];
                }
                let next = table.len();
                let idx = *table.entry(key.clone()).or_insert_with(|| {
                    keys.extend_from_slice(&key);
                    next
                });
                offsets[p * dp1 + r] = idx;
                weights[p * dp1 + r] = bary[r];
            }
        }

        let points = table.len();
        let mut neighbors = vec![(0usize, 0usize); dp1 * points];
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        for j in 0..dp1 {
            for i in 0..points {
                let k = &keys[i * d..(i + 1) * d];
                for c in 0..d {
                    n1[c] = k[c] - 1;
                    n2[c] = k[c] + 1;
                }
                if j < d {
                    n1[j] = k[j] + d as i32;
                    n2[j] = k[j] - d as i32;
                }
                let find = |key: &[i32]| table.get(key).map_or(0, |&v| v + 1);
                neighbors[j * points + i] = (find(&n1), find(&n2));
            }
        }

        Self {
            d,
            n,
            offsets,
            weights,
            points,
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn lattice_points(&self) -> usize {
        self.points
    }

    /// Filters `values` (`n` rows of `vd` interleaved channels).
    pub fn filter(&self, values: &[f64], vd: usize) -> Vec<f64> {
        let dp1 = self.d + 1;
        assert_eq!(values.len(), self.n * vd);
        // Slot 0 is a permanently zero row for missing neighbours.
        let mut grid = vec![0.0; (self.points + 1) * vd];
        for p in 0..self.n {
            let v = &values[p * vd..(p + 1) * vd];
            for r in 0..dp1 {
                let o = (self.offsets[p * dp1 + r] + 1) * vd;
                let w = self.weights[p * dp1 + r];
                for c in 0..vd {
                    grid[o + c] += w * v[c];
                }
            }
        }
        let mut next = vec![0.0; grid.len()];
        for j in 0..dp1 {
            for i in 0..self.points {
                let (a, b) = self.neighbors[j * self.points + i];
                let o = (i + 1) * vd;
                for c in 0..vd {
                    next[o + c] = grid[o + c] + 0.5 * (grid[a * vd + c] + grid[b * vd + c]);
                }
            }
            std::mem::swap(&mut grid, &mut next);
        }
        let alpha = 1.0 / (1.0 + 0.5f64.powi(self.d as i32));
        let mut out = vec![0.0; self.n * vd];
        for p in 0..self.n {
            let dst = &mut out[p * vd..(p + 1) * vd];
            for r in 0..dp1 {
                let o = (self.offsets[p * dp1 + r] + 1) * vd;
                let w = self.weights[p * dp1 + r] * alpha;
                for c in 0..vd {
                    dst[c] += w * grid[o + c];
                }
            }
        }
        out
    }
}
