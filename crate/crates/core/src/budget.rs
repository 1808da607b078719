//! Energy accounting and deployment-lifetime estimates.
//!
//! Per-stage costs are the measured constants of the nRF52840 DK port. A
//! segment costs the stages it ran through: the baseline gate (unless skipped)
//! plus the model for model verdicts. Idle draw between processing bursts is
//! optional and integrated at `idle_power_mw`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ModelArch;
use crate::pipeline::{Variant, Verdict, VerdictCounts};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
/// Length of one screened segment.
pub const SEGMENT_S: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
    #[error("{0} must be positive")]
    ZeroCapacity(&'static str),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

/// Measured footprint of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub memory_kb: f64,
    pub storage_kb: f64,
    pub latency_inference_ms: f64,
    pub latency_preprocess_ms: f64,
    pub power_mw: f64,
    pub energy_inference_mj: f64,
    pub energy_total_mj: f64,
}

impl StageCost {
    /// Wall-clock time the stage keeps the MCU busy.
    pub fn busy_s(&self) -> f64 {
        (self.latency_inference_ms + self.latency_preprocess_ms) / 1000.0
    }

    fn validate(&self, name: &str) -> Result<(), BudgetError> {
        let fields = [
            self.memory_kb,
            self.storage_kb,
            self.latency_inference_ms,
            self.latency_preprocess_ms,
            self.power_mw,
            self.energy_inference_mj,
            self.energy_total_mj,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(BudgetError::InvalidProfile(format!("{name}: negative cost")));
        }
        if self.energy_total_mj < self.energy_inference_mj {
            return Err(BudgetError::InvalidProfile(format!(
                "{name}: total energy below inference energy"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub baseline: StageCost,
    pub cnn_mel: StageCost,
    pub cnn_time: StageCost,
    pub transformer_time: StageCost,
    pub idle_power_mw: f64,
}

impl EnergyTable {
    /// Measurements on the nRF52840 DK (Cortex-M4 at 64 MHz, 3.3 V).
    pub fn nrf52840() -> Self {
        let row = |mem, sto, inf, pre, pw, e_inf, e_tot| StageCost {
            memory_kb: mem,
            storage_kb: sto,
            latency_inference_ms: inf,
            latency_preprocess_ms: pre,
            power_mw: pw,
            energy_inference_mj: e_inf,
            energy_total_mj: e_tot,
        };
        Self {
            baseline: row(67.216, 20.34, 213.755, 2.0, 9.900, 2.116, 2.136),
            cnn_mel: row(104.328, 37.868, 406.146, 1980.259, 17.820, 7.238, 42.525),
            cnn_time: row(75.564, 24.104, 1490.687, 2.0, 17.160, 25.580, 25.614),
            transformer_time: row(83.468, 24.712, 1079.293, 2.0, 17.820, 19.233, 19.268),
            idle_power_mw: 6.270,
        }
    }

    pub fn model(&self, arch: ModelArch) -> &StageCost {
        match arch {
            ModelArch::CnnTime => &self.cnn_time,
            ModelArch::TransformerTime => &self.transformer_time,
            ModelArch::CnnMel => &self.cnn_mel,
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        self.baseline.validate("baseline")?;
        self.cnn_mel.validate("cnn-mel")?;
        self.cnn_time.validate("cnn-time")?;
        self.transformer_time.validate("transformer-time")?;
        if !(self.idle_power_mw >= 0.0) {
            return Err(BudgetError::InvalidProfile("negative idle power".into()));
        }
        Ok(())
    }

    /// Stages a verdict ran through under `variant`.
    fn stages(
        &self,
        verdict: Verdict,
        variant: Variant,
        model: Option<ModelArch>,
    ) -> Result<Vec<&StageCost>, BudgetError> {
        let inconsistent = |why: &str| {
            Err(BudgetError::InconsistentCounts(format!(
                "{verdict} under {variant}: {why}"
            )))
        };
        match verdict {
            Verdict::DiscardedIdle | Verdict::StoredDirect => {
                if variant == Variant::SkipBaseline {
                    return inconsistent("the baseline never runs");
                }
                if verdict == Verdict::StoredDirect && variant == Variant::Full {
                    return inconsistent("only the power-saving path stores without the model");
                }
                Ok(vec![&self.baseline])
            }
            Verdict::DiscardedByModel | Verdict::StoredAfterModel => {
                if variant == Variant::BaselineOnly {
                    return inconsistent("no model is configured");
                }
                let Some(arch) = model else {
                    return inconsistent("no model is configured");
                };
                if variant == Variant::SkipBaseline {
                    Ok(vec![self.model(arch)])
                } else {
                    Ok(vec![&self.baseline, self.model(arch)])
                }
            }
        }
    }

    /// Active energy of one segment with the given verdict.
    pub fn verdict_energy(
        &self,
        verdict: Verdict,
        variant: Variant,
        model: Option<ModelArch>,
    ) -> Result<f64, BudgetError> {
        Ok(self
            .stages(verdict, variant, model)?
            .iter()
            .map(|s| s.energy_total_mj)
            .sum())
    }

    /// Busy time of one segment with the given verdict.
    pub fn verdict_busy_s(
        &self,
        verdict: Verdict,
        variant: Variant,
        model: Option<ModelArch>,
    ) -> Result<f64, BudgetError> {
        Ok(self
            .stages(verdict, variant, model)?
            .iter()
            .map(|s| s.busy_s())
            .sum())
    }

    /// Idle draw for the rest of a `segment_s` window after processing.
    pub fn verdict_idle_energy(
        &self,
        verdict: Verdict,
        variant: Variant,
        model: Option<ModelArch>,
        segment_s: f64,
    ) -> Result<f64, BudgetError> {
        let busy = self.verdict_busy_s(verdict, variant, model)?;
        Ok(self.idle_power_mw * (segment_s - busy).max(0.0))
    }
}

/// Active energy of a whole session, in mJ. Idle draw is not included.
pub fn session_energy(
    counts: &VerdictCounts,
    table: &EnergyTable,
    variant: Variant,
    model: Option<ModelArch>,
) -> Result<f64, BudgetError> {
    let mut total = 0.0;
    for (verdict, n) in counts.iter() {
        if n > 0 {
            total += n as f64 * table.verdict_energy(verdict, variant, model)?;
        }
    }
    Ok(total)
}

/// Idle energy of a whole session where every segment lasts `segment_s`.
pub fn session_idle_energy(
    counts: &VerdictCounts,
    table: &EnergyTable,
    variant: Variant,
    model: Option<ModelArch>,
    segment_s: f64,
) -> Result<f64, BudgetError> {
    let mut total = 0.0;
    for (verdict, n) in counts.iter() {
        if n > 0 {
            total += n as f64 * table.verdict_idle_energy(verdict, variant, model, segment_s)?;
        }
    }
    Ok(total)
}

/// How idle time between segments is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdleAccounting {
    /// Only the energy of the stages that ran.
    ActiveOnly,
    /// Plus `idle_power_mw` for the rest of every segment window.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentProfile {
    pub battery_mwh: f64,
    pub sd_bytes: f64,
    pub record_rate_bytes_per_s: f64,
    pub segment_s: f64,
    /// Fraction of segments passing the baseline gate.
    pub active_fraction: f64,
    /// Fraction of segments written to storage.
    pub store_fraction: f64,
    /// Fraction of segments stored directly by the power-saving bypass.
    pub bypass_fraction: f64,
    pub variant: Variant,
    pub model: Option<ModelArch>,
    pub idle: IdleAccounting,
    pub table: EnergyTable,
}

impl Default for DeploymentProfile {
    /// Four alkaline D cells (4 x 1.5 V x 12 Ah), a 128 GB card, 16 kHz mono PCM16.
    fn default() -> Self {
        Self {
            battery_mwh: 72_000.0,
            sd_bytes: 128e9,
            record_rate_bytes_per_s: 32_000.0,
            segment_s: SEGMENT_S,
            active_fraction: 0.1,
            store_fraction: 0.1,
            bypass_fraction: 0.0,
            variant: Variant::Full,
            model: Some(ModelArch::TransformerTime),
            idle: IdleAccounting::ActiveOnly,
            table: EnergyTable::nrf52840(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitingFactor {
    Storage,
    Battery,
}

impl fmt::Display for LimitingFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LimitingFactor::Storage => "storage",
            LimitingFactor::Battery => "battery",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LifetimeEstimate {
    pub storage_days: f64,
    pub battery_days: f64,
    pub lifetime_days: f64,
    pub limiting_factor: LimitingFactor,
    pub daily_energy_mj: f64,
    pub segments_per_day: f64,
}

impl DeploymentProfile {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if !(self.battery_mwh > 0.0) {
            return Err(BudgetError::ZeroCapacity("battery_mwh"));
        }
        if !(self.sd_bytes > 0.0) {
            return Err(BudgetError::ZeroCapacity("sd_bytes"));
        }
        if !(self.record_rate_bytes_per_s > 0.0) {
            return Err(BudgetError::ZeroCapacity("record_rate_bytes_per_s"));
        }
        if !(self.segment_s > 0.0) {
            return Err(BudgetError::ZeroCapacity("segment_s"));
        }
        for (name, f) in [
            ("active_fraction", self.active_fraction),
            ("store_fraction", self.store_fraction),
            ("bypass_fraction", self.bypass_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(BudgetError::InvalidProfile(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if self.bypass_fraction > self.active_fraction {
            return Err(BudgetError::InvalidProfile(
                "bypass_fraction exceeds active_fraction".into(),
            ));
        }
        if self.variant != Variant::BaselineOnly && self.model.is_none() {
            return Err(BudgetError::InvalidProfile(format!(
                "variant {} needs a model",
                self.variant
            )));
        }
        self.table.validate()
    }

    /// Expected verdict mix per segment, as fractions summing to 1.
    pub fn verdict_mix(&self) -> Vec<(Verdict, f64)> {
        let a = self.active_fraction;
        match self.variant {
            Variant::BaselineOnly => vec![
                (Verdict::DiscardedIdle, 1.0 - a),
                (Verdict::StoredDirect, a),
            ],
            Variant::SkipBaseline => vec![(Verdict::StoredAfterModel, 1.0)],
            Variant::Full => vec![
                (Verdict::DiscardedIdle, 1.0 - a),
                (Verdict::StoredAfterModel, a),
            ],
            Variant::PowerSaving => vec![
                (Verdict::DiscardedIdle, 1.0 - a),
                (Verdict::StoredDirect, self.bypass_fraction),
                (Verdict::StoredAfterModel, a - self.bypass_fraction),
            ],
        }
    }

    /// Expected energy per segment in mJ.
    pub fn segment_energy_mj(&self) -> Result<f64, BudgetError> {
        let mut e = 0.0;
        for (v, frac) in self.verdict_mix() {
            if frac == 0.0 {
                continue;
            }
            e += frac * self.table.verdict_energy(v, self.variant, self.model)?;
            if self.idle == IdleAccounting::Continuous {
                e += frac
                    * self
                        .table
                        .verdict_idle_energy(v, self.variant, self.model, self.segment_s)?;
            }
        }
        Ok(e)
    }

    /// Record rate that fills the card in exactly `days` when every segment is stored.
    pub fn calibrated_record_rate(sd_bytes: f64, days: f64) -> f64 {
        sd_bytes / (days * SECONDS_PER_DAY)
    }
}

pub fn estimate_lifetime(profile: &DeploymentProfile) -> Result<LifetimeEstimate, BudgetError> {
    profile.validate()?;
    let storage_days = if profile.store_fraction == 0.0 {
        f64::INFINITY
    } else {
        profile.sd_bytes
            / (profile.store_fraction * profile.record_rate_bytes_per_s * SECONDS_PER_DAY)
    };
    let segments_per_day = SECONDS_PER_DAY / profile.segment_s;
    let daily_energy_mj = profile.segment_energy_mj()? * segments_per_day;
    let battery_days = if daily_energy_mj == 0.0 {
        f64::INFINITY
    } else {
        profile.battery_mwh * 3600.0 / daily_energy_mj
    };
    let (lifetime_days, limiting_factor) = if storage_days <= battery_days {
        (storage_days, LimitingFactor::Storage)
    } else {
        (battery_days, LimitingFactor::Battery)
    };
    Ok(LifetimeEstimate {
        storage_days,
        battery_days,
        lifetime_days,
        limiting_factor,
        daily_energy_mj,
        segments_per_day,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(idle: usize, by_model: usize, direct: usize, after: usize) -> VerdictCounts {
        VerdictCounts {
            discarded_idle: idle,
            discarded_by_model: by_model,
            stored_direct: direct,
            stored_after_model: after,
        }
    }

    #[test]
    fn session_examples() {
        let t = EnergyTable::nrf52840();
        let e = session_energy(&counts(100, 0, 0, 0), &t, Variant::BaselineOnly, None).unwrap();
        assert!((e - 213.6).abs() < 1e-9);
        let e = session_energy(
            &counts(0, 0, 0, 1),
            &t,
            Variant::Full,
            Some(ModelArch::TransformerTime),
        )
        .unwrap();
        assert!((e - 21.404).abs() < 1e-9);
        assert_eq!(
            session_energy(&VerdictCounts::default(), &t, Variant::Full, Some(ModelArch::CnnTime)),
            Ok(0.0)
        );
    }

    #[test]
    fn inconsistent_counts() {
        let t = EnergyTable::nrf52840();
        assert!(matches!(
            session_energy(&counts(0, 1, 0, 0), &t, Variant::BaselineOnly, None),
            Err(BudgetError::InconsistentCounts(_))
        ));
        assert!(matches!(
            session_energy(&counts(1, 0, 0, 0), &t, Variant::SkipBaseline, Some(ModelArch::CnnTime)),
            Err(BudgetError::InconsistentCounts(_))
        ));
        assert!(matches!(
            session_energy(&counts(0, 0, 1, 0), &t, Variant::Full, Some(ModelArch::CnnTime)),
            Err(BudgetError::InconsistentCounts(_))
        ));
    }

    #[test]
    fn skipping_the_gate_costs_nine_baselines() {
        let t = EnergyTable::nrf52840();
        assert!(t.transformer_time.energy_total_mj / t.baseline.energy_total_mj > 9.0);
        t.validate().unwrap();
    }

    #[test]
    fn storage_scales_with_store_fraction() {
        let mut p = DeploymentProfile {
            store_fraction: 1.0,
            active_fraction: 1.0,
            ..Default::default()
        };
        p.record_rate_bytes_per_s = DeploymentProfile::calibrated_record_rate(p.sd_bytes, 14.0);
        let full = estimate_lifetime(&p).unwrap().storage_days;
        assert!((full - 14.0).abs() < 1e-9);
        p.store_fraction = 0.1;
        let tenth = estimate_lifetime(&p).unwrap().storage_days;
        assert!((tenth / full - 10.0).abs() < 1e-9);
    }

    #[test]
    fn idle_only_battery_days() {
        let zero = StageCost {
            memory_kb: 0.0,
            storage_kb: 0.0,
            latency_inference_ms: 0.0,
            latency_preprocess_ms: 0.0,
            power_mw: 0.0,
            energy_inference_mj: 0.0,
            energy_total_mj: 0.0,
        };
        let table = EnergyTable {
            baseline: zero,
            cnn_mel: zero,
            cnn_time: zero,
            transformer_time: zero,
            idle_power_mw: 6.27,
        };
        let p = DeploymentProfile {
            idle: IdleAccounting::Continuous,
            table,
            ..Default::default()
        };
        let est = estimate_lifetime(&p).unwrap();
        let expect = p.battery_mwh * 3600.0 / (6.27 * SECONDS_PER_DAY);
        assert!((est.battery_days - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn zero_capacity_rejected() {
        let p = DeploymentProfile {
            battery_mwh: 0.0,
            ..Default::default()
        };
        assert_eq!(estimate_lifetime(&p), Err(BudgetError::ZeroCapacity("battery_mwh")));
    }

    #[test]
    fn screening_extends_battery() {
        let full = DeploymentProfile::default();
        let always = DeploymentProfile {
            variant: Variant::SkipBaseline,
            active_fraction: 1.0,
            ..Default::default()
        };
        let ratio = estimate_lifetime(&full).unwrap().battery_days
            / estimate_lifetime(&always).unwrap().battery_days;
        assert!((ratio - 19.268 / (2.136 + 0.1 * 19.268)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn storage_inverse_in_store_fraction(f in 0.01f64..1.0) {
            let p = DeploymentProfile { store_fraction: f, active_fraction: 1.0, ..Default::default() };
            let q = DeploymentProfile { store_fraction: 1.0, active_fraction: 1.0, ..Default::default() };
            let a = estimate_lifetime(&p).unwrap().storage_days;
            let b = estimate_lifetime(&q).unwrap().storage_days;
            prop_assert!((a * f - b).abs() <= 1e-9 * b);
        }

        #[test]
        fn battery_falls_with_activity(a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, idle in proptest::bool::ANY) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let idle = if idle { IdleAccounting::Continuous } else { IdleAccounting::ActiveOnly };
            let p = |a| DeploymentProfile { active_fraction: a, store_fraction: a, idle, ..Default::default() };
            let d_lo = estimate_lifetime(&p(lo)).unwrap().battery_days;
            let d_hi = estimate_lifetime(&p(hi)).unwrap().battery_days;
            prop_assert!(d_hi <= d_lo * (1.0 + 1e-12));
        }
    }
}
