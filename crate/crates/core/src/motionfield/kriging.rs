use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;

use super::variogram::SphericalVariogram;
use super::VelocitySamples;
use crate::cloud_io::Vec3;
use crate::error::{Error, Result};

/// Ordinary Kriging system over a fixed sample set, factorized once.
pub struct OrdinaryKriging {
    sites: Vec<Vec3>,
    values: Vec<Vec3>,
    variogram: SphericalVariogram,
    lu: LU<f64, Dyn, Dyn>,
}

/// Averages samples that share a position exactly, keeping first-occurrence order.
fn deduplicate(samples: &VelocitySamples) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut index: HashMap<[u64; 3], usize> = HashMap::new();
    let mut sites = Vec::new();
    let mut sums: Vec<(Vec3, f64)> = Vec::new();
    for (p, v) in samples.positions.iter().zip(&samples.velocities) {
        let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        let slot = *index.entry(key).or_insert_with(|| {
            sites.push(*p);
            sums.push((Vec3::zeros(), 0.0));
            sites.len() - 1
        });
        sums[slot].0 += v;
        sums[slot].1 += 1.0;
    }
    (sites, sums.into_iter().map(|(s, n)| s / n).collect())
}

impl OrdinaryKriging {
    pub fn new(samples: &VelocitySamples, variogram: SphericalVariogram) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("kriging needs at least one sample".into()));
        }
        let (sites, values) = deduplicate(samples);
        let k = sites.len();
        // weights are invariant to scaling γ, so a flat model gets a unit sill
        let variogram = if variogram.sill > 0.0 {
            variogram
        } else {
            let span = sites
                .iter()
                .flat_map(|a| sites.iter().map(move |b| (a - b).norm()))
                .fold(0.0, f64::max);
            SphericalVariogram {
                nugget: 0.0,
                sill: 1.0,
                range: if span > 0.0 { span } else { 1.0 },
            }
        };
        let mut a = DMatrix::zeros(k + 1, k + 1);
        for i in 0..k {
            for j in 0..k {
                a[(i, j)] = variogram.gamma((sites[i] - sites[j]).norm());
            }
            a[(i, k)] = 1.0;
            a[(k, i)] = 1.0;
        }
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::Numerical("singular kriging system".into()));
        }
        Ok(Self {
            sites,
            values,
            variogram,
            lu,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sites.len()
    }

    pub fn variogram(&self) -> &SphericalVariogram {
        &self.variogram
    }

    /// Kriging weights (one per deduplicated site) and the Lagrange multiplier.
    pub fn weights(&self, q: &Vec3) -> (DVector<f64>, f64) {
        let k = self.sites.len();
        let mut b = DVector::zeros(k + 1);
        for i in 0..k {
            b[i] = self.variogram.gamma((self.sites[i] - q).norm());
        }
        b[k] = 1.0;
        let x = self.lu.solve(&b).expect("factorization checked invertible");
        let lagrange = x[k];
        (x.rows(0, k).into_owned(), lagrange)
    }

    pub fn predict(&self, q: &Vec3) -> Vec3 {
        let (w, _) = self.weights(q);
        self.values.iter().zip(w.iter()).map(|(v, &wi)| v * wi).sum()
    }
}

/// Ordinary Kriging of every velocity component at the query positions.
pub fn krige(samples: &VelocitySamples, queries: &[Vec3], variogram: &SphericalVariogram) -> Result<VelocitySamples> {
    let system = OrdinaryKriging::new(samples, *variogram)?;
    let velocities: Vec<Vec3> = queries.par_iter().map(|q| system.predict(q)).collect();
    if velocities.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::Numerical("kriging produced non-finite velocities".into()));
    }
    Ok(VelocitySamples {
        positions: queries.to_vec(),
        velocities,
    })
}
