use std::path::Path;

use nalgebra::DMatrix;

use super::VelocitySamples;
use crate::binio::{read_file, Reader, Writer};
use crate::cloud_io::{Aabb, Vec3};
use crate::error::{Error, Result};
use crate::neural::{positional_encode, Mlp, TrainConfig, TrainReport};

/// Eulerian motion field: positional-encoded, bbox-normalized position in,
/// velocity out.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub mlp: Mlp,
    pub bbox: Aabb,
    pub frequencies: usize,
}

impl MotionField {
    /// Maps the bbox onto [−1, 1]³; degenerate axes map to 0.
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let c = self.bbox.center();
        let half = self.bbox.extent() * 0.5;
        std::array::from_fn(|a| if half[a] > 0.0 { (p[a] - c[a]) / half[a] } else { 0.0 })
    }

    pub fn encode(&self, p: &Vec3) -> Vec<f64> {
        positional_encode(&self.normalize(p), self.frequencies)
    }

    pub fn query(&self, p: &Vec3) -> Vec3 {
        let y = self.mlp.forward(&self.encode(p)).expect("encoding width matches the network");
        Vec3::new(y[0], y[1], y[2])
    }

    pub fn query_batch(&self, ps: &[Vec3]) -> Vec<Vec3> {
        let x = self.encode_matrix(ps);
        let y = self.mlp.forward_batch(&x);
        y.column_iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    }

    fn encode_matrix(&self, ps: &[Vec3]) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(3 + 6 * self.frequencies, ps.len());
        for (j, p) in ps.iter().enumerate() {
            x.column_mut(j).copy_from_slice(&self.encode(p));
        }
        x
    }

    /// Network checkpoint, then the frequency count and bbox (min, max) as f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        self.mlp.write_to(&mut w);
        w.u32(self.frequencies as u32);
        for v in self.bbox.min.iter().chain(self.bbox.max.iter()) {
            w.f64(*v);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        let mlp = Mlp::read_from(&mut r)?;
        let frequencies = r.u32()? as usize;
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = r.f64()?;
        }
        r.finish()?;
        if mlp.input_dim() != 3 + 6 * frequencies || mlp.output_dim() != 3 {
            return Err(r.err("network shape does not match the positional encoding"));
        }
        Ok(Self {
            mlp,
            bbox: Aabb {
                min: Vec3::new(b[0], b[1], b[2]),
                max: Vec3::new(b[3], b[4], b[5]),
            },
            frequencies,
        })
    }
}

/// Fits the field MLP to the union of sparse and dense supervision, unweighted.
pub fn train_field_mlp(
    sparse: &VelocitySamples,
    dense: &VelocitySamples,
    bbox: Aabb,
    hidden: &[usize],
    frequencies: usize,
    config: &TrainConfig,
) -> Result<(MotionField, TrainReport)> {
    let n = sparse.len() + dense.len();
    if n == 0 {
        return Err(Error::Empty("motion field supervision".into()));
    }
    let mut sizes = vec![3 + 6 * frequencies];
    sizes.extend_from_slice(hidden);
    sizes.push(3);
    let mut field = MotionField {
        mlp: Mlp::new(&sizes, config.seed)?,
        bbox,
        frequencies,
    };
    let positions: Vec<Vec3> = sparse.positions.iter().chain(&dense.positions).copied().collect();
    let x = field.encode_matrix(&positions);
    let mut t = DMatrix::zeros(3, n);
    for (j, v) in sparse.velocities.iter().chain(&dense.velocities).enumerate() {
        t.column_mut(j).copy_from(v);
    }
    let report = field.mlp.train_matrix(&x, &t, config)?;
    Ok((field, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox() -> Aabb {
        Aabb {
            min: Vec3::new(0.0, 0.0, 0.0),
            max: Vec3::new(2.0, 1.0, 0.5),
        }
    }

    fn samples(n: usize, seed: u64, v: impl Fn(&Vec3) -> Vec3) -> VelocitySamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = bbox();
        let positions: Vec<Vec3> = (0..n)
            .map(|_| Vec3::from_fn(|a, _| rng.gen_range(b.min[a]..=b.max[a])))
            .collect();
        VelocitySamples {
            velocities: positions.iter().map(&v).collect(),
            positions,
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            seed: 9,
            ..Default::default()
        }
    }

    fn grid(n: usize) -> Vec<Vec3> {
        let b = bbox();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let t = Vec3::new(i as f64, j as f64, k as f64) / (n - 1) as f64;
                    out.push(b.min + b.extent().component_mul(&t));
                }
            }
        }
        out
    }

    #[test]
    fn zero_supervision_gives_near_zero_field() {
        let positions = grid(8);
        let dense = VelocitySamples {
            velocities: vec![Vec3::zeros(); positions.len()],
            positions,
        };
        let sparse = samples(30, 1, |_| Vec3::zeros());
        let annealed = TrainConfig {
            batch_size: 32,
            lr_decay: 0.993,
            ..cfg(400)
        };
        let (field, report) = train_field_mlp(&sparse, &dense, bbox(), &[128, 64], 6, &annealed).unwrap();
        assert!(report.final_mse < report.initial_mse);
        for p in sparse.positions.iter().chain(&dense.positions) {
            assert!(field.query(p).norm() < 1e-3, "{}", field.query(p).norm());
        }
    }

    #[test]
    fn constant_field_recovered() {
        let v0 = Vec3::new(0.4, -0.2, 0.1);
        let sparse = samples(30, 4, |_| v0);
        let dense = samples(300, 5, |_| v0);
        let (field, _) = train_field_mlp(&sparse, &dense, bbox(), &[128, 64], 6, &cfg(150)).unwrap();
        for p in sparse.positions.iter().chain(&dense.positions) {
            assert!((field.query(p) - v0).norm() <= 0.05 * v0.norm());
        }
    }

    #[test]
    fn first_epoch_reduces_mse_and_is_deterministic() {
        let sparse = samples(20, 6, |p| Vec3::new(p.y, -p.x, 0.3));
        let dense = samples(200, 7, |p| Vec3::new(p.y, -p.x, 0.3));
        let (a, ra) = train_field_mlp(&sparse, &dense, bbox(), &[16, 8], 2, &cfg(3)).unwrap();
        assert!(ra.epoch_mse[0] < ra.initial_mse);
        let (b, rb) = train_field_mlp(&sparse, &dense, bbox(), &[16, 8], 2, &cfg(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(train_field_mlp(&VelocitySamples::default(), &VelocitySamples::default(), bbox(), &[4], 1, &cfg(1)).is_err());
    }

    #[test]
    fn query_is_pure_and_continuous() {
        let field = MotionField {
            mlp: Mlp::new(&[39, 128, 64, 3], 4).unwrap(),
            bbox: bbox(),
            frequencies: 6,
        };
        let p = Vec3::new(0.7, 0.3, 0.2);
        assert_eq!(field.query(&p), field.query(&p));
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let delta = 10f64.powi(-k);
            let d = (field.query(&(p + Vec3::repeat(delta))) - field.query(&p)).norm();
            assert!(d <= prev * 1.01 || d < 1e-12);
            prev = d;
        }
        assert!(prev < 1e-4);
        let batch = field.query_batch(&[p, p * 0.5]);
        assert!((batch[0] - field.query(&p)).amax() < 1e-12);
        // extrapolation stays finite
        assert!(field.query(&Vec3::new(100.0, -50.0, 3.0)).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        let field = MotionField {
            mlp: Mlp::new(&[15, 8, 3], 1).unwrap(),
            bbox: bbox(),
            frequencies: 2,
        };
        field.save(&path).unwrap();
        let back = MotionField::load(&path).unwrap();
        assert_eq!(back.bbox, field.bbox);
        assert_eq!(back.frequencies, 2);
        let again = dir.path().join("again.bin");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
