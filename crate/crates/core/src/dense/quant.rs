//! Per-dimension 8-bit scalar quantization.
//!
//! Each dimension j keeps `min_j` and `step_j = (max_j - min_j)/255`
//! in f64. Codes round to the nearest step; decoding computes
//! `min_j + code * step_j` in f64 and stores f32, so both range
//! endpoints decode exactly and per-coordinate error stays within
//! `step_j / 2` plus rounding slack.

use super::{DenseError, VectorMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SQ8Matrix {
    pub d: usize,
    pub ids: Vec<String>,
    pub mins: Vec<f64>,
    pub steps: Vec<f64>,
    pub codes: Vec<u8>,
}

impl SQ8Matrix {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn code_row(&self, i: usize) -> &[u8] {
        &self.codes[i * self.d..(i + 1) * self.d]
    }

    /// Decode one coordinate in f64.
    pub fn decode(&self, i: usize, j: usize) -> f64 {
        self.mins[j] + self.code_row(i)[j] as f64 * self.steps[j]
    }
}

pub fn quantize(matrix: &VectorMatrix) -> Result<SQ8Matrix, DenseError> {
    if matrix.n() == 0 {
        return Err(DenseError::EmptyMatrix);
    }
    matrix.validate()?;
    let d = matrix.d;
    let n = matrix.n();
    let mut mins = vec![f64::INFINITY; d];
    let mut maxs = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (j, &x) in matrix.row(i).iter().enumerate() {
            let x = x as f64;
            mins[j] = mins[j].min(x);
            maxs[j] = maxs[j].max(x);
        }
    }
    let steps: Vec<f64> = (0..d).map(|j| (maxs[j] - mins[j]) / 255.0).collect();
    let mut codes = vec![0u8; n * d];
    for i in 0..n {
        let row = matrix.row(i);
        for j in 0..d {
            codes[i * d + j] = if steps[j] > 0.0 {
                let c = ((row[j] as f64 - mins[j]) / steps[j]).round();
                c.clamp(0.0, 255.0) as u8
            } else {
                0
            };
        }
    }
    Ok(SQ8Matrix {
        d,
        ids: matrix.ids.clone(),
        mins,
        steps,
        codes,
    })
}

pub fn dequantize(q: &SQ8Matrix) -> VectorMatrix {
    let d = q.d;
    let n = q.n();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            data.push(q.decode(i, j) as f32);
        }
    }
    VectorMatrix {
        d,
        ids: q.ids.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::random_unit_matrix;

    #[test]
    fn endpoints_decode_exactly() {
        let mut m = VectorMatrix::new(1);
        m.push_row("a".into(), &[-1.0]);
        m.push_row("b".into(), &[1.0]);
        m.push_row("c".into(), &[0.25]);
        let q = quantize(&m).unwrap();
        assert_eq!(q.code_row(0)[0], 0);
        assert_eq!(q.code_row(1)[0], 255);
        let back = dequantize(&q);
        assert_eq!(back.row(0)[0], -1.0f32);
        assert_eq!(back.row(1)[0], 1.0f32);
    }

    #[test]
    fn constant_dimension_is_lossless() {
        let mut m = VectorMatrix::new(2);
        m.push_row("a".into(), &[0.5, 1.0]);
        m.push_row("b".into(), &[0.5, 2.0]);
        let q = quantize(&m).unwrap();
        assert_eq!(q.steps[0], 0.0);
        let back = dequantize(&q);
        assert_eq!(back.row(0)[0], 0.5f32);
        assert_eq!(back.row(1)[0], 0.5f32);
    }

    #[test]
    fn round_trip_error_within_half_step() {
        let m = random_unit_matrix(200, 16, 11);
        let q = quantize(&m).unwrap();
        let back = dequantize(&q);
        for i in 0..m.n() {
            for j in 0..m.d {
                let err = (m.row(i)[j] as f64 - back.row(i)[j] as f64).abs();
                assert!(
                    err <= q.steps[j] / 2.0 + 1e-12,
                    "row {i} dim {j}: err {err} > step/2 {}",
                    q.steps[j] / 2.0
                );
            }
        }
    }

    #[test]
    fn score_perturbation_bound() {
        use rand::{Rng, SeedableRng};
        let m = random_unit_matrix(100, 8, 13);
        let q8 = quantize(&m).unwrap();
        let back = dequantize(&q8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bound: f64 = q
                .iter()
                .zip(&q8.steps)
                .map(|(qi, s)| qi.abs() * s / 2.0)
                .sum::<f64>()
                + 1e-12;
            for i in 0..m.n() {
                let delta = (m.score(&q, i) - back.score(&q, i)).abs();
                assert!(delta <= bound, "row {i}: |delta| {delta} > {bound}");
            }
        }
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(
            quantize(&VectorMatrix::new(3)),
            Err(DenseError::EmptyMatrix)
        ));
        let mut m = VectorMatrix::new(1);
        m.ids.push("a".into());
        m.data.push(f32::NAN);
        assert!(matches!(quantize(&m), Err(DenseError::NonFinite { .. })));
    }

    #[test]
    fn decoded_values_stay_in_range() {
        let m = random_unit_matrix(50, 4, 21);
        let q = quantize(&m).unwrap();
        let back = dequantize(&q);
        for j in 0..m.d {
            let max = q.mins[j] + 255.0 * q.steps[j];
            for i in 0..m.n() {
                let v = back.row(i)[j] as f64;
                assert!(v >= q.mins[j] - 1e-12 && v <= max + 1e-12);
            }
        }
    }
}
