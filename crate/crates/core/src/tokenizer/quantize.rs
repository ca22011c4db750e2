use super::{Codebook, FeatureMap, MultiScaleTokens, ScaleSchedule, TokenMap};
use crate::error::{contract, Result};

/// Index of the entry closest to `v` in Euclidean distance; ties go to the
/// lowest index.
pub fn nearest_entry(codebook: &Codebook, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..codebook.len() {
        let d: f64 = codebook
            .entry(i)
            .iter()
            .zip(v)
            .map(|(c, x)| (c - x) * (c - x))
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Intermediate quantities of one tokenisation pass.
#[derive(Clone, Debug)]
pub struct QuantizeTrace {
    pub tokens: MultiScaleTokens,
    /// `f_k` at the final grid, one per scale.
    pub residuals: Vec<FeatureMap>,
    /// `f_k` resampled to scale `k`'s extent (what was looked up).
    pub downsampled: Vec<FeatureMap>,
}

fn check_inputs(f: &FeatureMap, codebook: &Codebook, schedule: &ScaleSchedule) -> Result<()> {
    if codebook.is_empty() {
        return Err(contract("empty codebook"));
    }
    if f.extent() != schedule.final_extent() {
        return Err(contract(format!(
            "feature extent {:?} differs from final scale {:?}",
            f.extent(),
            schedule.final_extent()
        )));
    }
    if f.channels() != codebook.channels() {
        return Err(contract(format!(
            "feature has {} channels, codebook {}",
            f.channels(),
            codebook.channels()
        )));
    }
    Ok(())
}

/// Lookup of one token map followed by upsampling to the final grid.
pub(crate) fn lift(
    tokens: &TokenMap,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
    k: usize,
) -> Vec<f64> {
    let c = codebook.channels();
    let mut q = Vec::with_capacity(tokens.tokens().len() * c);
    for &t in tokens.tokens() {
        q.extend_from_slice(codebook.entry(t));
    }
    schedule.up(k).apply(&q, c)
}

pub fn quantize_traced(
    f: &FeatureMap,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<QuantizeTrace> {
    check_inputs(f, codebook, schedule)?;
    let c = f.channels();
    let fin = schedule.final_extent();
    let mut accum = vec![0.0; fin.area() * c];
    let mut maps = Vec::with_capacity(schedule.len());
    let mut residuals = Vec::with_capacity(schedule.len());
    let mut downsampled = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let resid: Vec<f64> = f.data().iter().zip(&accum).map(|(a, b)| a - b).collect();
        let resid = FeatureMap::new(fin, c, resid)?;
        let down = resid.resample(schedule.down(k))?;
        let tokens: Vec<usize> = (0..down.extent().area())
            .map(|i| nearest_entry(codebook, down.cell(i)))
            .collect();
        let map = TokenMap::new(schedule.extent(k), tokens)?;
        let up = lift(&map, codebook, schedule, k);
        accum.iter_mut().zip(&up).for_each(|(a, u)| *a += u);
        maps.push(map);
        residuals.push(resid);
        downsampled.push(down);
    }
    Ok(QuantizeTrace {
        tokens: MultiScaleTokens::new(maps),
        residuals,
        downsampled,
    })
}

/// Residual multi-scale tokenisation of `f`.
pub fn quantize_multiscale(
    f: &FeatureMap,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<MultiScaleTokens> {
    Ok(quantize_traced(f, codebook, schedule)?.tokens)
}

/// `sum_{i < k} up(lookup(r_i))`, accumulated in scale order from zero.
pub fn dequantize_prefix(
    tokens: &MultiScaleTokens,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
    k: usize,
) -> Result<FeatureMap> {
    tokens.validate(schedule, codebook.len())?;
    if k > schedule.len() {
        return Err(contract(format!("prefix {k} longer than the schedule")));
    }
    let c = codebook.channels();
    let fin = schedule.final_extent();
    let mut accum = vec![0.0; fin.area() * c];
    for i in 0..k {
        let up = lift(tokens.scale(i), codebook, schedule, i);
        accum.iter_mut().zip(&up).for_each(|(a, u)| *a += u);
    }
    FeatureMap::new(fin, c, accum)
}

/// Reconstruction from all scales.
pub fn dequantize(
    tokens: &MultiScaleTokens,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<FeatureMap> {
    dequantize_prefix(tokens, codebook, schedule, schedule.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Extent, Tensor};

    fn book(rows: &[[f64; 2]]) -> Codebook {
        let data = rows.iter().flatten().copied().collect();
        Codebook::new(Tensor::new([rows.len(), 2], data).unwrap()).unwrap()
    }

    #[test]
    fn exact_codeword_tiles_quantize_to_that_index() {
        let cb = book(&[[0.0, 0.0], [1.0, -1.0], [0.5, 2.0]]);
        let schedule = ScaleSchedule::square(&[3]).unwrap();
        let f = FeatureMap::new(Extent::new(3, 3), 2, [0.5, 2.0].repeat(9)).unwrap();
        let trace = quantize_traced(&f, &cb, &schedule).unwrap();
        assert!(trace.tokens.scale(0).tokens().iter().all(|&t| t == 2));
        let rec = dequantize(&trace.tokens, &cb, &schedule).unwrap();
        assert_eq!(rec, f);
        let resid_after: Vec<f64> = f
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| a - b)
            .collect();
        assert!(resid_after.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = book(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(nearest_entry(&cb, &[0.0, 3.0]), 0);
        let cb = book(&[[5.0, 5.0], [-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(nearest_entry(&cb, &[0.0, 0.0]), 1);
    }

    #[test]
    fn empty_codebook_is_rejected() {
        let cb = Codebook::from_trained(Tensor::from_parts(vec![0, 2], vec![]));
        let schedule = ScaleSchedule::square(&[1]).unwrap();
        let f = FeatureMap::zeros(Extent::new(1, 1), 2);
        assert!(quantize_multiscale(&f, &cb, &schedule).is_err());
    }

    #[test]
    fn constant_tokens_on_a_flat_schedule_sum_to_k_times_entry() {
        let cb = book(&[[0.0, 0.0], [0.25, -3.0]]);
        let schedule = ScaleSchedule::square(&[2, 2, 2]).unwrap();
        let e = schedule.extent(0);
        let tokens = MultiScaleTokens::new(vec![TokenMap::filled(e, 1); 3]);
        let rec = dequantize(&tokens, &cb, &schedule).unwrap();
        for i in 0..4 {
            assert_eq!(rec.cell(i), &[0.75, -9.0]);
        }
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let schedule = ScaleSchedule::square(&[1, 2]).unwrap();
        let tokens = MultiScaleTokens::new(vec![TokenMap::filled(Extent::new(1, 1), 0)]);
        assert!(dequantize(&tokens, &cb, &schedule).is_err());
    }
}
