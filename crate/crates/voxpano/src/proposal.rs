//! Instance center proposal: maxpool NMS over the class-aware heatmap,
//! top-k ranking with score threshold, and 3D center decoding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, LabelTaxonomy};
use crate::tensors::{CenterHeatmap, RegressionField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// NMS window edge length in pixels; must be odd.
    pub kernel: usize,
    /// Candidates retained after ranking.
    pub top_k: usize,
    /// Score threshold applied after the top-k cut.
    pub tau: f32,
    /// Rank the top-k pool per heatmap channel instead of globally.
    pub per_class_top_k: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            kernel: 3,
            top_k: 100,
            tau: 0.3,
            per_class_top_k: false,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "NMS kernel must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Validation("top_k must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Validation(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// A heatmap pixel that survived maxpool NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCandidate {
    pub i: usize,
    pub j: usize,
    pub channel: usize,
    pub score: f32,
}

/// Decoded 3D instance center (an element of the proposal set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceCenter {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub class_id: u8,
    pub score: f32,
}

/// Maxpool NMS: a pixel survives iff it equals the maximum over its
/// kernel x kernel neighborhood (edge-clipped), per channel independently.
/// Equal-valued plateau pixels all survive.
pub fn nms_peaks(heat: &CenterHeatmap, cfg: &ProposalConfig) -> Result<Vec<PeakCandidate>> {
    cfg.validate()?;
    let (h, w, channels) = heat.data.dim();
    let r = cfg.kernel / 2;
    let per_channel: Vec<Vec<PeakCandidate>> = (0..channels)
        .into_par_iter()
        .map(|ch| {
            let mut survivors = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    let v = heat.data[[i, j, ch]];
                    let i0 = i.saturating_sub(r);
                    let i1 = (i + r).min(h - 1);
                    let j0 = j.saturating_sub(r);
                    let j1 = (j + r).min(w - 1);
                    let mut is_max = true;
                    'window: for wi in i0..=i1 {
                        for wj in j0..=j1 {
                            if heat.data[[wi, wj, ch]] > v {
                                is_max = false;
                                break 'window;
                            }
                        }
                    }
                    if is_max {
                        survivors.push(PeakCandidate {
                            i,
                            j,
                            channel: ch,
                            score: v,
                        });
                    }
                }
            }
            survivors
        })
        .collect();
    Ok(per_channel.into_iter().flatten().collect())
}

/// Sorts by (score desc, channel asc, i asc, j asc), truncates to `top_k`,
/// then drops candidates scoring below `tau`.
pub fn rank_and_threshold(
    mut peaks: Vec<PeakCandidate>,
    cfg: &ProposalConfig,
) -> Vec<PeakCandidate> {
    peaks.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.channel.cmp(&b.channel))
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    if cfg.per_class_top_k {
        let mut kept = Vec::new();
        let mut per_channel = std::collections::BTreeMap::<usize, usize>::new();
        for p in peaks {
            let n = per_channel.entry(p.channel).or_insert(0);
            if *n < cfg.top_k {
                *n += 1;
                kept.push(p);
            }
        }
        peaks = kept;
    } else {
        peaks.truncate(cfg.top_k);
    }
    peaks.retain(|p| p.score >= cfg.tau);
    peaks
}

/// Decodes ranked peaks into grid-local 3D centers:
/// `x = dx*(i + reg[i,j,0])`, `y = dy*(j + reg[i,j,1])`, `z = r_z * reg[i,j,2]`.
pub fn decode_centers(
    peaks: &[PeakCandidate],
    reg: &RegressionField,
    spec: &GridSpec,
    tax: &LabelTaxonomy,
) -> Result<Vec<InstanceCenter>> {
    let (h, w, _) = reg.data.dim();
    let mut out = Vec::with_capacity(peaks.len());
    for p in peaks {
        if p.i >= h || p.j >= w {
            return Err(Error::OutOfBounds(format!(
                "peak ({}, {}) outside {h}x{w} regression field",
                p.i, p.j
            )));
        }
        let class_id = tax.class_of_channel(p.channel)?;
        out.push(InstanceCenter {
            x: spec.dx * (p.i as f64 + reg.data[[p.i, p.j, 0]] as f64),
            y: spec.dy * (p.j as f64 + reg.data[[p.i, p.j, 1]] as f64),
            z: spec.r_z() * reg.data[[p.i, p.j, 2]] as f64,
            class_id,
            score: p.score,
        });
    }
    Ok(out)
}

/// Full instance center proposal: NMS, ranking/threshold, center decoding.
pub fn propose(
    heat: &CenterHeatmap,
    reg: &RegressionField,
    spec: &GridSpec,
    tax: &LabelTaxonomy,
    cfg: &ProposalConfig,
) -> Result<Vec<InstanceCenter>> {
    let peaks = nms_peaks(heat, cfg)?;
    let ranked = rank_and_threshold(peaks, cfg);
    decode_centers(&ranked, reg, spec, tax)
}
