use serde::{Deserialize, Serialize};

use super::LabelError;

/// TE×TR grid plus TI bin edges.
///
/// Bins are half-open `[min + k·w, min + (k+1)·w)`; values outside the range
/// clamp to the boundary bins. TI bin 0 is reserved for acquisitions without
/// an inversion pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub te_min_ms: f64,
    pub te_max_ms: f64,
    pub n_te: u32,
    pub tr_min_ms: f64,
    pub tr_max_ms: f64,
    pub n_tr: u32,
    pub ti_bin_edges_ms: Vec<f64>,
}

pub const DEFAULT_TI_EDGES_MS: [f64; 3] = [400.0, 1000.0, 3000.0];

impl Default for GridSpec {
    /// 20×20 over TE [0, 200) and TR [0, 10000): 10 ms by 500 ms bins.
    fn default() -> Self {
        Self::with_dims(20, 20)
    }
}

impl GridSpec {
    /// Default ranges and TI edges with the given number of TE and TR bins.
    pub fn with_dims(n_te: u32, n_tr: u32) -> Self {
        GridSpec {
            te_min_ms: 0.0,
            te_max_ms: 200.0,
            n_te,
            tr_min_ms: 0.0,
            tr_max_ms: 10_000.0,
            n_tr,
            ti_bin_edges_ms: DEFAULT_TI_EDGES_MS.to_vec(),
        }
    }

    /// Parses `"<TE bins>x<TR bins>"`, e.g. `"20x20"`, into default ranges.
    pub fn parse_dims(s: &str) -> Result<Self, LabelError> {
        let bad = || LabelError::InvalidGrid(format!("expected TExTR such as 20x20, got {s:?}"));
        let (te, tr) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let n_te = te.trim().parse().map_err(|_| bad())?;
        let n_tr = tr.trim().parse().map_err(|_| bad())?;
        let spec = Self::with_dims(n_te, n_tr);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        let err = |m: &str| Err(LabelError::InvalidGrid(m.to_string()));
        if self.n_te == 0 || self.n_tr == 0 {
            return err("bin counts must be at least 1");
        }
        let ok_range = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok_range(self.te_min_ms, self.te_max_ms) || !ok_range(self.tr_min_ms, self.tr_max_ms) {
            return err("ranges must be finite with min < max");
        }
        if !(self.te_width() > 0.0 && self.tr_width() > 0.0) {
            return err("bin widths must be positive");
        }
        if self.ti_bin_edges_ms.iter().any(|e| !e.is_finite())
            || self.ti_bin_edges_ms.windows(2).any(|w| w[0] >= w[1])
        {
            return err("TI edges must be finite and strictly increasing");
        }
        Ok(())
    }

    pub fn te_width(&self) -> f64 {
        (self.te_max_ms - self.te_min_ms) / f64::from(self.n_te)
    }

    pub fn tr_width(&self) -> f64 {
        (self.tr_max_ms - self.tr_min_ms) / f64::from(self.n_tr)
    }

    /// Number of TI bins including the "no inversion" bin.
    pub fn n_ti_bins(&self) -> u32 {
        self.ti_bin_edges_ms.len() as u32 + 2
    }

    /// "TExTR" label, e.g. `20x20`.
    pub fn dims_label(&self) -> String {
        format!("{}x{}", self.n_te, self.n_tr)
    }

    fn same_ranges(&self, other: &GridSpec) -> bool {
        self.te_min_ms == other.te_min_ms
            && self.te_max_ms == other.te_max_ms
            && self.tr_min_ms == other.tr_min_ms
            && self.tr_max_ms == other.tr_max_ms
    }
}

fn quantize_axis(v: f64, min: f64, width: f64, n: u32) -> Result<u32, LabelError> {
    if !v.is_finite() {
        return Err(LabelError::NonFiniteInput);
    }
    let k = ((v - min) / width).floor();
    Ok(if k <= 0.0 {
        0
    } else if k >= f64::from(n - 1) {
        n - 1
    } else {
        k as u32
    })
}

/// Joint TE/TR grid cell of an acquisition.
pub fn quantize_te_tr(te_ms: f64, tr_ms: f64, spec: &GridSpec) -> Result<(u32, u32), LabelError> {
    Ok((
        quantize_axis(te_ms, spec.te_min_ms, spec.te_width(), spec.n_te)?,
        quantize_axis(tr_ms, spec.tr_min_ms, spec.tr_width(), spec.n_tr)?,
    ))
}

/// TI bin: 0 when absent, otherwise one plus the number of edges strictly
/// below the value.
pub fn bin_ti(ti_ms: Option<f64>, spec: &GridSpec) -> Result<u32, LabelError> {
    let Some(ti) = ti_ms else { return Ok(0) };
    if !ti.is_finite() {
        return Err(LabelError::NonFiniteInput);
    }
    let below = spec.ti_bin_edges_ms.iter().filter(|e| **e < ti).count() as u32;
    Ok((below + 1).min(spec.n_ti_bins() - 1))
}

fn coarsen_axis(bin: u32, fine_n: u32, coarse_n: u32, min: f64, fine_w: f64, coarse_w: f64) -> u32 {
    if fine_n.is_multiple_of(coarse_n) {
        bin / (fine_n / coarse_n)
    } else {
        let center = min + (f64::from(bin) + 0.5) * fine_w;
        // center is finite by construction
        quantize_axis(center, min, coarse_w, coarse_n).unwrap_or(0)
    }
}

/// Maps a fine TE/TR cell onto the coarse cell containing its center.
///
/// Integer division when the coarse counts divide the fine counts, otherwise
/// the fine bin center is re-quantized under the coarse spec.
pub fn coarsen_assignment(
    fine: &GridSpec,
    coarse: &GridSpec,
    fine_bins: (u32, u32),
) -> Result<(u32, u32), LabelError> {
    if !fine.same_ranges(coarse) {
        return Err(LabelError::IncompatibleRanges);
    }
    let (te, tr) = fine_bins;
    if te >= fine.n_te || tr >= fine.n_tr {
        return Err(LabelError::BinOutOfRange);
    }
    Ok((
        coarsen_axis(
            te,
            fine.n_te,
            coarse.n_te,
            fine.te_min_ms,
            fine.te_width(),
            coarse.te_width(),
        ),
        coarsen_axis(
            tr,
            fine.n_tr,
            coarse.n_tr,
            fine.tr_min_ms,
            fine.tr_width(),
            coarse.tr_width(),
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_widths() {
        let g = GridSpec::default();
        assert_eq!(g.te_width(), 10.0);
        assert_eq!(g.tr_width(), 500.0);
        assert!(g.validate().is_ok());
    }

    #[test]
    fn quantize_examples() {
        let g = GridSpec::default();
        assert_eq!(quantize_te_tr(25.0, 1145.0, &g), Ok((2, 2)));
        assert_eq!(quantize_te_tr(0.0, 0.0, &g), Ok((0, 0)));
        assert_eq!(quantize_te_tr(500.0, 20000.0, &g), Ok((19, 19)));
        assert_eq!(quantize_te_tr(-3.0, 199.99, &g), Ok((0, 0)));
        assert_eq!(
            quantize_te_tr(f64::NAN, 1.0, &g),
            Err(LabelError::NonFiniteInput)
        );
    }

    #[test]
    fn ti_examples() {
        let g = GridSpec::default();
        assert_eq!(bin_ti(None, &g), Ok(0));
        assert_eq!(bin_ti(Some(150.0), &g), Ok(1));
        assert_eq!(bin_ti(Some(2500.0), &g), Ok(3));
        assert_eq!(bin_ti(Some(400.0), &g), Ok(1));
        assert_eq!(bin_ti(Some(9000.0), &g), Ok(4));
        assert_eq!(bin_ti(Some(0.0), &g), Ok(1));
        let no_edges = GridSpec {
            ti_bin_edges_ms: vec![],
            ..GridSpec::default()
        };
        assert_eq!(bin_ti(Some(100.0), &no_edges), Ok(1));
        assert_eq!(
            bin_ti(Some(f64::INFINITY), &g),
            Err(LabelError::NonFiniteInput)
        );
    }

    #[test]
    fn coarsen_examples() {
        let fine = GridSpec::with_dims(20, 20);
        let coarse = GridSpec::with_dims(5, 5);
        assert_eq!(coarsen_assignment(&fine, &coarse, (7, 13)), Ok((1, 3)));
        assert_eq!(coarsen_assignment(&fine, &coarse, (0, 0)), Ok((0, 0)));
        assert_eq!(coarsen_assignment(&fine, &coarse, (19, 19)), Ok((4, 4)));
        // refinement falls back to re-quantizing the bin center
        let finer = GridSpec::with_dims(40, 20);
        assert_eq!(coarsen_assignment(&fine, &finer, (2, 3)), Ok((5, 3)));
        let shifted = GridSpec {
            te_max_ms: 250.0,
            ..GridSpec::with_dims(5, 5)
        };
        assert_eq!(
            coarsen_assignment(&fine, &shifted, (1, 1)),
            Err(LabelError::IncompatibleRanges)
        );
        assert_eq!(
            coarsen_assignment(&fine, &coarse, (20, 0)),
            Err(LabelError::BinOutOfRange)
        );
    }

    #[test]
    fn parse_dims_examples() {
        let g = GridSpec::parse_dims("40x20").unwrap();
        assert_eq!((g.n_te, g.n_tr), (40, 20));
        assert!(GridSpec::parse_dims("0x5").is_err());
        assert!(GridSpec::parse_dims("20").is_err());
    }

    #[test]
    fn fine_then_coarse_equals_direct_on_dense_sample() {
        let fine = GridSpec::with_dims(20, 20);
        for (n_te, n_tr) in [(5, 5), (10, 5), (10, 10), (20, 10), (4, 4), (1, 1)] {
            let coarse = GridSpec::with_dims(n_te, n_tr);
            for i in 0..=2000 {
                let te = f64::from(i) * 0.1;
                let tr = f64::from(i) * 5.0;
                let via =
                    coarsen_assignment(&fine, &coarse, quantize_te_tr(te, tr, &fine).unwrap());
                assert_eq!(via, quantize_te_tr(te, tr, &coarse), "te={te} tr={tr}");
            }
        }
    }

    proptest! {
        #[test]
        fn quantization_is_monotone(a in 0.0f64..400.0, b in 0.0f64..400.0, c in 0.0f64..20000.0, d in 0.0f64..20000.0) {
            let g = GridSpec::default();
            let (lo_te, hi_te) = (a.min(b), a.max(b));
            let (lo_tr, hi_tr) = (c.min(d), c.max(d));
            let (t0, r0) = quantize_te_tr(lo_te, lo_tr, &g).unwrap();
            let (t1, r1) = quantize_te_tr(hi_te, hi_tr, &g).unwrap();
            prop_assert!(t0 <= t1 && r0 <= r1);
            prop_assert!(bin_ti(Some(lo_tr), &g).unwrap() <= bin_ti(Some(hi_tr), &g).unwrap());
        }

        #[test]
        fn composition_holds_for_random_values(te in 0.0f64..200.0, tr in 0.0f64..10000.0) {
            let fine = GridSpec::with_dims(20, 20);
            let coarse = GridSpec::with_dims(5, 10);
            let via = coarsen_assignment(&fine, &coarse, quantize_te_tr(te, tr, &fine).unwrap());
            prop_assert_eq!(via, quantize_te_tr(te, tr, &coarse));
        }
    }
}
