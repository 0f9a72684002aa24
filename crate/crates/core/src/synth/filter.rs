use serde::{Deserialize, Serialize};

use super::ListingRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub min_photos: usize,
    pub min_text_len: usize,
    pub alignment_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_photos: 5,
            min_text_len: 50,
            alignment_threshold: 0.3,
        }
    }
}

/// Drop accounting. Per-rule counts overlap; `dropped` is their union.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failed_photos: usize,
    pub failed_text: usize,
    pub failed_alignment: usize,
}

impl FilterStats {
    fn frac(&self, n: usize) -> f64 {
        if self.input == 0 {
            0.0
        } else {
            n as f64 / self.input as f64
        }
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.frac(self.dropped)
    }

    pub fn photos_fraction(&self) -> f64 {
        self.frac(self.failed_photos)
    }

    pub fn text_fraction(&self) -> f64 {
        self.frac(self.failed_text)
    }

    pub fn alignment_fraction(&self) -> f64 {
        self.frac(self.failed_alignment)
    }

    pub fn summary(&self) -> String {
        format!(
            "kept {} of {} (dropped {:.2}%: photos {:.2}%, text {:.2}%, alignment {:.2}%)",
            self.kept,
            self.input,
            100.0 * self.dropped_fraction(),
            100.0 * self.photos_fraction(),
            100.0 * self.text_fraction(),
            100.0 * self.alignment_fraction(),
        )
    }
}

/// Keeps records with enough photos, long enough text, and (when a scorer
/// is given) a preliminary alignment score at or above the threshold.
pub fn apply_filters(
    records: Vec<ListingRecord>,
    cfg: &FilterConfig,
    prelim_scorer: Option<&(dyn Fn(&ListingRecord) -> f64 + Sync)>,
) -> (Vec<ListingRecord>, FilterStats) {
    let mut stats = FilterStats {
        input: records.len(),
        ..FilterStats::default()
    };
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let photos_ok = r.photo_count >= cfg.min_photos;
        let text_ok = r.text_length_proxy >= cfg.min_text_len;
        let aligned = prelim_scorer.is_none_or(|s| s(&r) >= cfg.alignment_threshold);
        stats.failed_photos += usize::from(!photos_ok);
        stats.failed_text += usize::from(!text_ok);
        stats.failed_alignment += usize::from(!aligned);
        if photos_ok && text_ok && aligned {
            kept.push(r);
        } else {
            stats.dropped += 1;
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}
