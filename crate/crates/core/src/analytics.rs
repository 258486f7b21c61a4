//! Effective dimension of gate vectors at matching spatial positions, against
//! a baseline that shuffles positions independently within each channel.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateTensor;

/// N examples × d channels of binary gates at one position of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<u8>,
}

impl GateMatrix {
    pub fn at(gates: &GateTensor, h: usize, w: usize) -> GateMatrix {
        let [n, c, _, _] = gates.dims;
        let values = (0..n)
            .flat_map(|ni| (0..c).map(move |ci| (ni, ci)))
            .map(|(ni, ci)| gates.get(ni, ci, h, w))
            .collect();
        GateMatrix {
            layer: gates.layer,
            h,
            w,
            rows: n,
            cols: c,
            values,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDimension {
    pub raw: f64,
    pub normalized: f64,
    /// Every channel constant: no covariance to measure.
    pub degenerate: bool,
}

/// Participation ratio `(Σλ)² / Σλ²` of the centered covariance spectrum.
pub fn effective_dimension(m: &GateMatrix) -> Result<EffectiveDimension> {
    if m.rows < 2 {
        return Err(Error::Usage(format!(
            "effective dimension needs at least 2 examples, got {}",
            m.rows
        )));
    }
    let (n, d) = (m.rows, m.cols);
    let x = DMatrix::from_fn(n, d, |i, j| m.values[i * d + j] as f64);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(EffectiveDimension {
            raw: 0.0,
            normalized: 0.0,
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let sum: f64 = eig.iter().map(|l| l.max(0.0)).sum();
    let sq: f64 = eig.iter().map(|l| l.max(0.0).powi(2)).sum();
    let raw = sum * sum / sq;
    Ok(EffectiveDimension {
        raw,
        normalized: raw / d as f64,
        degenerate: false,
    })
}

/// Independently permutes each (example, channel) gate map over positions.
pub fn shuffle_baseline(gates: &GateTensor, seed: u64) -> GateTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, _, h, w] = gates.dims;
    let mut out = gates.clone();
    for plane in out.values.chunks_mut(h * w) {
        plane.shuffle(&mut rng);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdRow {
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    pub ed_aligned: f64,
    pub ed_shuffled: f64,
    pub d: usize,
    pub degenerate: bool,
}

impl EdRow {
    pub fn normalized(&self) -> (f64, f64) {
        (self.ed_aligned / self.d as f64, self.ed_shuffled / self.d as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdSummary {
    pub layer: usize,
    pub examples: usize,
    pub positions: usize,
    pub degenerate: usize,
    pub aligned_q1: f64,
    pub aligned_median: f64,
    pub aligned_q3: f64,
    pub shuffled_q1: f64,
    pub shuffled_median: f64,
    pub shuffled_q3: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One row per spatial position of every layer, computed in parallel.
pub fn ed_report(gates: &[GateTensor], seed: u64) -> Result<Vec<EdRow>> {
    let mut rows = Vec::new();
    for (k, g) in gates.iter().enumerate() {
        let shuffled = shuffle_baseline(g, seed.wrapping_add(k as u64));
        let [_, d, h, w] = g.dims;
        let positions: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
        let chunk = positions.len().div_ceil(threads).max(1);
        let layer_rows: Result<Vec<Vec<EdRow>>> = std::thread::scope(|s| {
            let handles: Vec<_> = positions
                .chunks(chunk)
                .map(|ps| {
                    let (g, shuffled) = (g, &shuffled);
                    s.spawn(move || {
                        ps.iter()
                            .map(|&(y, x)| {
                                let a = effective_dimension(&GateMatrix::at(g, y, x))?;
                                let b = effective_dimension(&GateMatrix::at(shuffled, y, x))?;
                                Ok(EdRow {
                                    layer: g.layer,
                                    h: y,
                                    w: x,
                                    ed_aligned: a.raw,
                                    ed_shuffled: b.raw,
                                    d,
                                    degenerate: a.degenerate || b.degenerate,
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ed thread")).collect()
        });
        rows.extend(layer_rows?.into_iter().flatten());
    }
    Ok(rows)
}

/// Per-layer quartiles of normalized ED, excluding degenerate positions.
pub fn summarize(rows: &[EdRow], examples: usize) -> Vec<EdSummary> {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.dedup();
    layers
        .into_iter()
        .map(|layer| {
            let here: Vec<&EdRow> = rows.iter().filter(|r| r.layer == layer).collect();
            let good: Vec<(f64, f64)> = here.iter().filter(|r| !r.degenerate).map(|r| r.normalized()).collect();
            let mut a: Vec<f64> = good.iter().map(|g| g.0).collect();
            let mut s: Vec<f64> = good.iter().map(|g| g.1).collect();
            a.sort_by(f64::total_cmp);
            s.sort_by(f64::total_cmp);
            EdSummary {
                layer,
                examples,
                positions: here.len(),
                degenerate: here.len() - good.len(),
                aligned_q1: quantile(&a, 0.25),
                aligned_median: quantile(&a, 0.5),
                aligned_q3: quantile(&a, 0.75),
                shuffled_q1: quantile(&s, 0.25),
                shuffled_median: quantile(&s, 0.5),
                shuffled_q3: quantile(&s, 0.75),
            }
        })
        .collect()
}

/// Two-sided sign-flip permutation test on the per-position differences
/// `aligned − shuffled` (normalized) of one layer; returns the p-value of the
/// mean difference.
pub fn paired_permutation_p(rows: &[EdRow], layer: usize, permutations: usize, seed: u64) -> f64 {
    use rand::Rng;
    let diffs: Vec<f64> = rows
        .iter()
        .filter(|r| r.layer == layer && !r.degenerate)
        .map(|r| {
            let (a, s) = r.normalized();
            a - s
        })
        .collect();
    if diffs.is_empty() {
        return 1.0;
    }
    let observed = diffs.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extreme = (0..permutations)
        .filter(|_| {
            let t: f64 = diffs.iter().map(|d| if rng.gen_bool(0.5) { *d } else { -*d }).sum();
            t.abs() >= observed - 1e-12
        })
        .count();
    (extreme + 1) as f64 / (permutations + 1) as f64
}

pub fn write_ed_csv<W: Write>(out: W, rows: &[EdRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("ed report", e))
}

pub fn read_ed_csv<R: std::io::Read>(input: R) -> Result<Vec<EdRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(crate::gates::csv_err)
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[EdSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("ed summary", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(rows: usize, cols: usize, values: Vec<u8>) -> GateMatrix {
        GateMatrix {
            layer: 0,
            h: 0,
            w: 0,
            rows,
            cols,
            values,
        }
    }

    /// Σλ = tr C and Σλ² = ‖C‖²_F, so no eigensolver is needed.
    fn trace_oracle(m: &GateMatrix) -> f64 {
        let (n, d) = (m.rows, m.cols);
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| m.values[i * d + j] as f64).sum::<f64>() / n as f64)
            .collect();
        let mut c = vec![0.0; d * d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    c[a * d + b] += (m.values[i * d + a] as f64 - mean[a]) * (m.values[i * d + b] as f64 - mean[b]);
                }
            }
        }
        let tr: f64 = (0..d).map(|a| c[a * d + a]).sum();
        let fro: f64 = c.iter().map(|v| v * v).sum();
        tr * tr / fro
    }

    #[test]
    fn correlated_pair_has_unit_ed() {
        let m = matrix(4, 2, vec![0, 0, 1, 1, 1, 1, 0, 0]);
        let ed = effective_dimension(&m).unwrap();
        assert!((ed.raw - 1.0).abs() < 1e-12);
        assert!((ed.normalized - 0.5).abs() < 1e-12);
    }

    #[test]
    fn independent_channels_approach_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (20000, 6);
        let m = matrix(n, d, (0..n * d).map(|_| rng.gen_bool(0.5) as u8).collect());
        let ed = effective_dimension(&m).unwrap();
        assert!(ed.normalized > 0.99, "{ed:?}");
    }

    #[test]
    fn random_matrix_matches_trace_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = matrix(50, 8, (0..400).map(|_| rng.gen_bool(0.4) as u8).collect());
        let ed = effective_dimension(&m).unwrap().raw;
        let want = trace_oracle(&m);
        assert!((ed - want).abs() / want < 1e-8, "{ed} vs {want}");
    }

    #[test]
    fn degenerate_and_too_small() {
        let ed = effective_dimension(&matrix(3, 2, vec![1; 6])).unwrap();
        assert!(ed.degenerate && ed.raw == 0.0);
        assert!(effective_dimension(&matrix(1, 2, vec![0, 1])).is_err());
    }

    fn tensor(dims: [usize; 4], values: Vec<u8>) -> GateTensor {
        GateTensor { layer: 0, dims, values }
    }

    #[test]
    fn single_position_shuffle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = tensor([5, 3, 1, 1], (0..15).map(|_| rng.gen_bool(0.5) as u8).collect());
        assert_eq!(shuffle_baseline(&t, 9), t);
    }

    #[test]
    fn shuffling_breaks_alignment() {
        // every channel copies one random sign pattern per example
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, c, h, w) = (64, 6, 4, 4);
        let mut values = Vec::new();
        for _ in 0..n {
            let pattern: Vec<u8> = (0..h * w).map(|_| rng.gen_bool(0.5) as u8).collect();
            for _ in 0..c {
                values.extend(&pattern);
            }
        }
        let t = tensor([n, c, h, w], values);
        let rows = ed_report(&[t], 5).unwrap();
        for r in &rows {
            assert!(r.ed_aligned < 1.0 + 1e-9 && r.ed_shuffled > 2.0, "{r:?}");
        }
        let s = summarize(&rows, n);
        assert!(s[0].aligned_median < s[0].shuffled_median);
    }

    #[test]
    fn constant_layer_is_flagged_and_excluded() {
        let t = tensor([4, 3, 2, 2], vec![1; 48]);
        let rows = ed_report(&[t], 0).unwrap();
        assert!(rows.iter().all(|r| r.degenerate));
        let s = summarize(&rows, 4);
        assert_eq!(s[0].degenerate, 4);
        assert!(s[0].aligned_median.is_nan());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![EdRow {
            layer: 1,
            h: 2,
            w: 3,
            ed_aligned: 1.5,
            ed_shuffled: 2.25,
            d: 4,
            degenerate: false,
        }];
        let mut buf = Vec::new();
        write_ed_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,h,w,ed_aligned,ed_shuffled,d,degenerate\n"));
        assert_eq!(read_ed_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn permutation_test_separates_shifted_pairs() {
        let row = |h, a: f64, s: f64| EdRow {
            layer: 0,
            h,
            w: 0,
            ed_aligned: a,
            ed_shuffled: s,
            d: 1,
            degenerate: false,
        };
        let shifted: Vec<EdRow> = (0..30).map(|i| row(i, 0.3 + 0.001 * i as f64, 0.8)).collect();
        assert!(paired_permutation_p(&shifted, 0, 2000, 1) < 0.01);
        let mixed: Vec<EdRow> = (0..30).map(|i| row(i, 0.5, if i % 2 == 0 { 0.6 } else { 0.4 })).collect();
        assert!(paired_permutation_p(&mixed, 0, 2000, 1) > 0.5);
    }

    proptest! {
        #[test]
        fn shuffle_preserves_channel_rates(seed in 0u64..1000, bits in prop::collection::vec(0u8..2, 2 * 3 * 9)) {
            let t = tensor([2, 3, 3, 3], bits);
            let s = shuffle_baseline(&t, seed);
            for chunk in 0..6 {
                let a: u32 = t.values[chunk * 9..(chunk + 1) * 9].iter().map(|&v| v as u32).sum();
                let b: u32 = s.values[chunk * 9..(chunk + 1) * 9].iter().map(|&v| v as u32).sum();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn ed_bounds_and_invariances(bits in prop::collection::vec(0u8..2, 12 * 4), perm in Just([2usize, 0, 3, 1])) {
            let m = matrix(12, 4, bits.clone());
            let ed = effective_dimension(&m).unwrap();
            if !ed.degenerate {
                prop_assert!(ed.raw >= 1.0 - 1e-9 && ed.raw <= 4.0 + 1e-9);
                let flipped = matrix(12, 4, bits.iter().map(|b| 1 - b).collect());
                prop_assert!((effective_dimension(&flipped).unwrap().raw - ed.raw).abs() < 1e-9);
                let reordered: Vec<u8> = bits.chunks(4).flat_map(|r| perm.map(|p| r[p])).collect();
                prop_assert!((effective_dimension(&matrix(12, 4, reordered)).unwrap().raw - ed.raw).abs() < 1e-9);
            }
        }
    }
}
