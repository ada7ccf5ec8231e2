//! Ordinal regression codec: a scalar target becomes a monotone vector of
//! binary "is the target at least b+1 bins above the range floor" labels.
//! Prediction decodes by counting bins with probability ≥ 0.5.

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Quantization of one coordinate axis into `bins` thresholds of width
/// `bin_size`, starting at `range_min`. The covered interval is
/// `[range_min, range_min + (bins + 1) * bin_size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinCodec {
    pub bins: usize,
    pub bin_size: f64,
    pub range_min: f64,
}

impl BinCodec {
    /// Codec whose `bins + 1` intervals tile `[range_min, range_max]`.
    pub fn from_range(range_min: f64, range_max: f64, bins: usize) -> Self {
        assert!(bins >= 2, "bin codec: need at least 2 bins, got {bins}");
        assert!(
            range_max > range_min,
            "bin codec: empty range [{range_min}, {range_max}]"
        );
        BinCodec { bins, bin_size: (range_max - range_min) / (bins + 1) as f64, range_min }
    }

    pub fn range_max(&self) -> f64 {
        self.range_min + (self.bins + 1) as f64 * self.bin_size
    }

    /// Hard ordinal label: `bits[b] = 1` iff `(b+1) * bin_size <= gt - range_min`.
    /// Out-of-range targets are clamped; use [`BinCodec::encode_reporting`]
    /// when the caller wants to surface that.
    pub fn encode(&self, gt: f64) -> Vec<f64> {
        self.encode_reporting(gt).0
    }

    /// As [`BinCodec::encode`], also reporting whether clamping occurred.
    pub fn encode_reporting(&self, gt: f64) -> (Vec<f64>, bool) {
        assert!(gt.is_finite(), "bin codec: non-finite ground truth {gt}");
        let clamped = gt < self.range_min || gt > self.range_max();
        let g = gt.clamp(self.range_min, self.range_max()) - self.range_min;
        let bits = (0..self.bins)
            .map(|b| if (b + 1) as f64 * self.bin_size <= g { 1.0 } else { 0.0 })
            .collect();
        (bits, clamped)
    }

    /// Number of bins with probability ≥ 0.5 (the decoded bin count).
    pub fn count(&self, probs: &[f64]) -> usize {
        assert_eq!(probs.len(), self.bins, "bin codec: got {} probs for {} bins", probs.len(), self.bins);
        probs.iter().filter(|&&p| p >= 0.5).count()
    }

    /// Decode to the axis value `range_min + bin_size * (count + 0.5)`.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        self.range_min + self.bin_size * (self.count(probs) as f64 + 0.5)
    }

    /// 0/1 weights selecting the `min(2k, bins)` bins around the decoded
    /// prediction: `k` below the count index and `k` at or above it, the
    /// window shifted inward at the range edges so its width never shrinks.
    pub fn center_mask(&self, probs: &[f64], k: usize) -> Vec<f64> {
        assert!(k >= 1, "center mask: half-width must be >= 1");
        let width = (2 * k).min(self.bins);
        let c = self.count(probs);
        let hi_lo = self.bins - width; // largest feasible window start
        let lo = c.saturating_sub(k).min(hi_lo);
        let mut mask = vec![0.0; self.bins];
        for m in &mut mask[lo..lo + width] {
            *m = 1.0;
        }
        mask
    }
}

/// Ordinal BCE: probabilities clipped to `[PROB_EPS, 1-PROB_EPS]`, the
/// per-bin binary cross-entropies summed over bins and averaged over the
/// `rows` samples. Targets may be soft (teacher or mixed labels).
pub fn ordinal_loss(probs: &[f64], targets: &[f64], rows: usize) -> f64 {
    assert_eq!(probs.len(), targets.len(), "ordinal loss: {} probs vs {} targets", probs.len(), targets.len());
    assert!(rows > 0 && probs.len() % rows == 0, "ordinal loss: ragged batch");
    let mut total = 0.0;
    for (&p, &t) in probs.iter().zip(targets) {
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    total / rows as f64
}

/// The entropy floor of the soft-target loss: loss(p, y) with p = y.
pub fn bernoulli_entropy(targets: &[f64], rows: usize) -> f64 {
    ordinal_loss(targets, targets, rows)
}

/// A paired horizontal/vertical codec and batch-level helpers. Network heads
/// emit `bins_x + bins_y` probabilities per sample, x axis first.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneCodec {
    pub x: BinCodec,
    pub y: BinCodec,
}

impl PlaneCodec {
    pub fn total_bins(&self) -> usize {
        self.x.bins + self.y.bins
    }

    /// Hard labels for a batch of 2-d targets: `[n, bins_x + bins_y]`.
    pub fn encode_batch(&self, gts: &[(f64, f64)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(gts.len() * self.total_bins());
        for &(gx, gy) in gts {
            out.extend(self.x.encode(gx));
            out.extend(self.y.encode(gy));
        }
        out
    }

    /// Decode each row of `[n, bins_x + bins_y]` probabilities to a 2-d point.
    pub fn decode_batch(&self, probs: &[f64]) -> Vec<(f64, f64)> {
        let w = self.total_bins();
        assert!(probs.len() % w == 0, "decode: ragged prob matrix");
        probs
            .chunks_exact(w)
            .map(|row| (self.x.decode(&row[..self.x.bins]), self.y.decode(&row[self.x.bins..])))
            .collect()
    }

    /// Per-row center-bin masks over both axes: `[n, bins_x + bins_y]`.
    pub fn center_mask_batch(&self, probs: &[f64], k: usize) -> Vec<f64> {
        let w = self.total_bins();
        assert!(probs.len() % w == 0, "center mask: ragged prob matrix");
        let mut out = Vec::with_capacity(probs.len());
        for row in probs.chunks_exact(w) {
            out.extend(self.x.center_mask(&row[..self.x.bins], k));
            out.extend(self.y.center_mask(&row[self.x.bins..], k));
        }
        out
    }
}
