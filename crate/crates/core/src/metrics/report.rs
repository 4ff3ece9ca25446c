use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{GroupMap, PoolMaps};
use crate::{CoreError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Provenance stamped into every report.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Identifies the benchmark files the report was computed on.
    pub data_hash: String,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub meta: ReportMeta,
    /// OR-pool AP keyed by query id.
    pub per_query_ap: BTreeMap<String, f64>,
    /// OR pools.
    pub cola_map: PoolMaps,
    /// AND pools.
    pub query_all_map: PoolMaps,
    /// ALL pools.
    pub overall_map: PoolMaps,
    pub mean_rank_relevant: f64,
    pub mean_rank_irrelevant: f64,
    pub multiobj_t2i: f64,
    pub multiobj_i2t: f64,
    pub map_by_attribute_count: BTreeMap<usize, GroupMap>,
}

impl MetricReport {
    /// Range and partition checks.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CoreError::Metric(format!("report field {what} out of range")));
        for (name, m) in self.pool_maps() {
            for (g, v) in [("all", m.all), ("seen", m.seen), ("unseen", m.unseen)] {
                if !(0.0..=1.0).contains(&v.map) {
                    return bad(&format!("{name}.{g}"));
                }
            }
            if m.seen.queries + m.unseen.queries != m.all.queries || m.per_query.len() != m.all.queries {
                return Err(CoreError::Metric(format!("{name}: seen and unseen do not partition the queries")));
            }
        }
        for (name, v) in [("multiobj_t2i", self.multiobj_t2i), ("multiobj_i2t", self.multiobj_i2t)] {
            if !(0.0..=100.0).contains(&v) {
                return bad(name);
            }
        }
        Ok(())
    }

    fn pool_maps(&self) -> [(&'static str, &PoolMaps); 3] {
        [
            ("cola_map", &self.cola_map),
            ("query_all_map", &self.query_all_map),
            ("overall_map", &self.overall_map),
        ]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| CoreError::Format {
            offset: 0,
            message: format!("metric report: {e}"),
        })?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(CoreError::Format {
                offset: 0,
                message: format!("metric report schema {} is not {REPORT_SCHEMA_VERSION}", r.schema_version),
            });
        }
        Ok(r)
    }

    /// Flat `(metric, group, value)` rows, the CSV body.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for (name, m) in self.pool_maps() {
            for (g, v) in [("all", m.all), ("seen", m.seen), ("unseen", m.unseen)] {
                rows.push((name.to_string(), g.to_string(), v.map));
                rows.push((format!("{name}.queries"), g.to_string(), v.queries as f64));
            }
        }
        rows.push(("mean_rank_relevant".into(), "all".into(), self.mean_rank_relevant));
        rows.push(("mean_rank_irrelevant".into(), "all".into(), self.mean_rank_irrelevant));
        rows.push(("multiobj_t2i".into(), "all".into(), self.multiobj_t2i));
        rows.push(("multiobj_i2t".into(), "all".into(), self.multiobj_i2t));
        for (c, v) in &self.map_by_attribute_count {
            rows.push(("map_by_attribute_count".into(), format!("attrs={c}"), v.map));
            rows.push(("map_by_attribute_count.queries".into(), format!("attrs={c}"), v.queries as f64));
        }
        for (q, ap) in &self.per_query_ap {
            rows.push(("ap".into(), q.clone(), *ap));
        }
        rows
    }

    /// Looks up one CSV cell.
    pub fn value(&self, metric: &str, group: &str) -> Option<f64> {
        self.rows()
            .into_iter()
            .find(|(m, g, _)| m == metric && g == group)
            .map(|(_, _, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema_version={REPORT_SCHEMA_VERSION}\nmetric,group,value\n");
        for (m, g, v) in self.rows() {
            let _ = writeln!(s, "{m},{g},{v}");
        }
        s
    }
}
