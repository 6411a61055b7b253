//! Per-sample routing records and their correlation with object count.

use serde::{Deserialize, Serialize};

use super::{cpa_forward, CpaCoefficients, CpaParams, TextSummary, TokenGrid};
use crate::detector::{encode, DetectorParams};
use crate::error::{Error, Result};
use crate::synth::{SceneSample, View};

pub use crate::stats::Correlation;

pub const ROUTING_CSV_HEADER: &str = "sample_id,view,object_count,w_s,w_m,w_d,c_s,c_m,c_d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub sample_id: u64,
    pub view: View,
    pub object_count: usize,
    /// Gate weights (sparse, medium, dense).
    pub w: [f64; 3],
    /// Complexity profile (sparse, medium, dense).
    pub c: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub records: Vec<RoutingRecord>,
    /// Pearson r of each gate weight against object count.
    pub r_sparse: Correlation,
    pub r_medium: Correlation,
    pub r_dense: Correlation,
    /// Spearman rank correlation of `c_d` against object count.
    pub rho_c_dense: Correlation,
}

impl RoutingTrace {
    pub fn from_records(records: Vec<RoutingRecord>) -> Result<Self> {
        if records.len() < 3 {
            return Err(Error::invalid(format!(
                "routing correlations need at least 3 samples, got {}",
                records.len()
            )));
        }
        let counts: Vec<f64> = records.iter().map(|r| r.object_count as f64).collect();
        let col = |f: &dyn Fn(&RoutingRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
        let r_sparse = crate::stats::pearson(&col(&|r| r.w[0]), &counts)?;
        let r_medium = crate::stats::pearson(&col(&|r| r.w[1]), &counts)?;
        let r_dense = crate::stats::pearson(&col(&|r| r.w[2]), &counts)?;
        let rho_c_dense = crate::stats::spearman(&col(&|r| r.c[2]), &counts)?;
        for (name, c) in [("w_s", &r_sparse), ("w_m", &r_medium), ("w_d", &r_dense)] {
            if !c.is_defined() {
                log::warn!("{name} is constant across samples; correlation undefined");
            }
        }
        Ok(Self {
            records,
            r_sparse,
            r_medium,
            r_dense,
            rho_c_dense,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUTING_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.sample_id, r.view, r.object_count, r.w[0], r.w[1], r.w[2], r.c[0], r.c[1], r.c[2]
            ));
        }
        out
    }
}

/// Routing of every sample through the encoder and the aggregation module,
/// with the category embedding table as the text summary.
pub fn routing_trace(det: &DetectorParams, cpa: &CpaParams, samples: &[SceneSample]) -> Result<RoutingTrace> {
    let text = TextSummary::new(det.text_embeddings().clone())?;
    let coeffs = CpaCoefficients::default();
    let records = samples
        .iter()
        .map(|s| {
            let f = s.features()?;
            let grid = TokenGrid::new(encode(s, det)?, f.grid_h(), f.grid_w())?;
            let (fusion, _) = cpa_forward(&grid, &text, cpa, &coeffs)?;
            Ok(RoutingRecord {
                sample_id: s.id,
                view: s.view,
                object_count: s.object_count(),
                w: fusion.w,
                c: fusion.c.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RoutingTrace::from_records(records)
}
