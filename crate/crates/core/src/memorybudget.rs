//! Unified memory budget: heterogeneous stored knowledge priced in integer
//! units (1 unit = 1 byte). Image channel values cost 1 unit; every numeric
//! element (parameter, feature, prompt value) costs 4.
//!
//! Frozen backbone parameters are tracked separately and excluded from the
//! additional-memory total unless explicitly requested.

use serde::{Deserialize, Serialize};

use crate::buffer::BufferManifest;
use crate::error::{Error, Result};
use crate::model::ParameterCensus;

pub const IMAGE_UNIT: u64 = 1;
pub const NUMERIC_UNIT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    Image,
    Feature,
    Model,
    Parameter,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageEntry {
    pub kind: StorageKind,
    /// Number of stored values (channel values for images, elements otherwise).
    pub count: i64,
    pub unit_cost: u64,
}

impl StorageEntry {
    pub fn image(values: u64) -> Self {
        Self { kind: StorageKind::Image, count: values as i64, unit_cost: IMAGE_UNIT }
    }

    pub fn numeric(kind: StorageKind, elements: u64) -> Self {
        Self { kind, count: elements as i64, unit_cost: NUMERIC_UNIT }
    }

    fn units(&self) -> Result<u64> {
        if self.count < 0 {
            return Err(Error::Budget(format!("negative count {} for {:?} entry", self.count, self.kind)));
        }
        if self.unit_cost != IMAGE_UNIT && self.unit_cost != NUMERIC_UNIT {
            return Err(Error::Budget(format!("unit cost {} is neither 1 nor 4", self.unit_cost)));
        }
        (self.count as u64)
            .checked_mul(self.unit_cost)
            .ok_or_else(|| Error::Budget("unit count overflows".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StorageLedger {
    pub entries: Vec<StorageEntry>,
    pub frozen_param_units: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub total_units: u64,
    /// Decimal megabytes (10^6 units).
    pub total_mb: f64,
}

impl Budget {
    fn from_units(total_units: u64) -> Self {
        Self { total_units, total_mb: total_units as f64 / 1e6 }
    }

    /// Two-decimal display, e.g. `9.93 M`.
    pub fn display_mb(&self) -> String {
        format!("{:.2} M", self.total_mb)
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerJson {
    entries: Vec<StorageEntry>,
    frozen_param_units: u64,
    total_units: u64,
}

impl StorageLedger {
    pub fn push(&mut self, entry: StorageEntry) {
        self.entries.push(entry);
    }

    /// Union of two ledgers.
    pub fn union(&self, other: &StorageLedger) -> StorageLedger {
        let mut entries = self.entries.clone();
        entries.extend_from_slice(&other.entries);
        StorageLedger { entries, frozen_param_units: self.frozen_param_units + other.frozen_param_units }
    }

    pub fn units_of(&self, kind: StorageKind) -> Result<u64> {
        self.entries.iter().filter(|e| e.kind == kind).map(StorageEntry::units).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let total_units = compute_budget(self)?.total_units;
        Ok(serde_json::to_string_pretty(&LedgerJson {
            entries: self.entries.clone(),
            frozen_param_units: self.frozen_param_units,
            total_units,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: LedgerJson = serde_json::from_str(s)?;
        let ledger = StorageLedger { entries: j.entries, frozen_param_units: j.frozen_param_units };
        let total = compute_budget(&ledger)?.total_units;
        if total != j.total_units {
            return Err(Error::Budget(format!("ledger total {} disagrees with entries ({total})", j.total_units)));
        }
        Ok(ledger)
    }
}

/// Additional-memory total: exact sum of `count * unit_cost`.
pub fn compute_budget(ledger: &StorageLedger) -> Result<Budget> {
    compute_budget_with(ledger, false)
}

/// As [`compute_budget`], optionally adding the frozen backbone for a total
/// footprint figure.
pub fn compute_budget_with(ledger: &StorageLedger, include_frozen: bool) -> Result<Budget> {
    let mut total: u64 = 0;
    for e in &ledger.entries {
        total = total
            .checked_add(e.units()?)
            .ok_or_else(|| Error::Budget("unit total overflows".into()))?;
    }
    if include_frozen {
        total += ledger.frozen_param_units;
    }
    Ok(Budget::from_units(total))
}

/// What a learner keeps beyond its live network, reported as a kind tag plus
/// element count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDescriptor {
    pub kind: String,
    pub elements: u64,
}

impl StateDescriptor {
    pub fn new(kind: &str, elements: u64) -> Self {
        Self { kind: kind.to_string(), elements }
    }

    fn storage_kind(&self) -> Result<StorageKind> {
        Ok(match self.kind.as_str() {
            "snapshot" | "model" => StorageKind::Model,
            "fisher" | "feature" | "basis" | "covariance" => StorageKind::Feature,
            "parameter" | "projection_head" | "adapter" | "bias_correction" => StorageKind::Parameter,
            "prompt" => StorageKind::Prompt,
            other => return Err(Error::Budget(format!("unknown state descriptor kind `{other}`"))),
        })
    }
}

/// Prices the artifacts of a run: buffered exemplars as images, snapshots as
/// models, bases and importance vectors as features, added heads as
/// parameters, prompts as prompts. Frozen parameters go to
/// `frozen_param_units`.
pub fn ledger_from_run(
    buffer: Option<&BufferManifest>,
    census: &ParameterCensus,
    descriptors: &[StateDescriptor],
) -> Result<StorageLedger> {
    let mut ledger = StorageLedger::default();
    if let Some(b) = buffer {
        ledger.push(StorageEntry::image(b.stored() as u64 * b.values_per_exemplar()));
    }
    for d in descriptors {
        ledger.push(StorageEntry::numeric(d.storage_kind()?, d.elements));
    }
    ledger.frozen_param_units = census.frozen() * NUMERIC_UNIT;
    Ok(ledger)
}

/// A published footprint: the component counts of one method and the totals
/// printed next to them.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedFootprint {
    pub method: &'static str,
    pub ledger: StorageLedger,
    pub published_total_units: u64,
}

/// Component counts for iCaRL, GPM, L2P and MoE-Adapter4CL as published.
/// The L2P total (491,920) is not the sum of its listed prompt storage
/// (184,320); both figures are kept.
pub fn published_footprints() -> Vec<PublishedFootprint> {
    let gpm_features: u64 = [48u64, 576, 512, 1024, 2048].iter().map(|w| w * w).sum();
    vec![
        PublishedFootprint {
            method: "icarl",
            ledger: StorageLedger {
                entries: vec![
                    StorageEntry::image(2000 * 32 * 32 * 3),
                    StorageEntry::numeric(StorageKind::Model, 472_756),
                    StorageEntry::numeric(StorageKind::Parameter, 472_756),
                ],
                frozen_param_units: 0,
            },
            published_total_units: 9_926_048,
        },
        PublishedFootprint {
            method: "gpm",
            ledger: StorageLedger {
                entries: vec![
                    StorageEntry::numeric(StorageKind::Feature, gpm_features),
                    StorageEntry::numeric(StorageKind::Parameter, 6_704_128),
                ],
                frozen_param_units: 0,
            },
            published_total_units: 50_172_928,
        },
        PublishedFootprint {
            method: "l2p",
            ledger: StorageLedger {
                entries: vec![StorageEntry::numeric(StorageKind::Prompt, 46_080)],
                frozen_param_units: 491_920,
            },
            published_total_units: 491_920,
        },
        PublishedFootprint {
            method: "moe_adapter4cl",
            ledger: StorageLedger {
                entries: vec![StorageEntry::numeric(StorageKind::Parameter, 4_104_292)],
                frozen_param_units: 16_417_168,
            },
            published_total_units: 16_417_168,
        },
    ]
}

/// The storage knob a method can scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    /// Exemplars in the rehearsal buffer.
    BufferCapacity,
    /// Maximum basis columns kept per layer.
    BasisCap,
    /// Width of the random projection.
    ProjectionDim,
}

impl Knob {
    pub fn for_method(method: &str) -> Option<Knob> {
        match method {
            "er" | "er_ace" | "icarl" | "bic" | "wa" => Some(Knob::BufferCapacity),
            "gpm" | "trgp" => Some(Knob::BasisCap),
            "ranpac" => Some(Knob::ProjectionDim),
            _ => None,
        }
    }

    pub fn config_key(&self) -> &'static str {
        match self {
            Knob::BufferCapacity => "buffer.capacity",
            Knob::BasisCap => "method_params.max_basis_cols",
            Knob::ProjectionDim => "method_params.proj_dim",
        }
    }
}

/// How a run's additional storage grows with its knob.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PricingRules {
    /// Channel values per stored exemplar.
    pub values_per_exemplar: u64,
    /// Storage that does not depend on the knob (e.g. a model snapshot).
    pub fixed_units: u64,
    /// Representation widths of the projected layers.
    pub layer_widths: Vec<usize>,
    pub num_classes: usize,
}

impl PricingRules {
    pub fn cost(&self, knob: Knob, value: usize) -> u64 {
        let v = value as u64;
        let variable = match knob {
            Knob::BufferCapacity => v * self.values_per_exemplar * IMAGE_UNIT,
            Knob::BasisCap => self
                .layer_widths
                .iter()
                .map(|&w| (value.min(w) * w) as u64 * NUMERIC_UNIT)
                .sum(),
            Knob::ProjectionDim => (v * v + v * self.num_classes as u64) * NUMERIC_UNIT,
        };
        self.fixed_units + variable
    }

    fn upper_bound(&self, knob: Knob) -> Option<usize> {
        match knob {
            Knob::BasisCap => self.layer_widths.iter().copied().max(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlannedPoint {
    Scaled { target_mb: f64, knob: Knob, value: usize, achieved_units: u64 },
    /// The method cannot trade memory for anything; one point stands for all
    /// targets.
    Fixed,
}

pub fn target_units(target_mb: f64) -> u64 {
    (target_mb * 1e6).round().max(0.0) as u64
}

/// Largest knob value whose ledger fits under `target_mb`.
pub fn plan_target(method: &str, target_mb: f64, pricing: &PricingRules) -> Result<PlannedPoint> {
    let Some(knob) = Knob::for_method(method) else {
        return Ok(PlannedPoint::Fixed);
    };
    let budget = target_units(target_mb);
    if pricing.cost(knob, 1) > budget {
        return Err(Error::Infeasible(format!(
            "{method}: {target_mb} MB is below the minimum footprint of {} units",
            pricing.cost(knob, 1)
        )));
    }
    let cap = pricing.upper_bound(knob).unwrap_or(usize::MAX / 2);
    let mut hi = 1usize;
    while hi < cap && pricing.cost(knob, hi.saturating_mul(2).min(cap)) <= budget {
        hi = hi.saturating_mul(2).min(cap);
    }
    // Largest value in [hi, min(2*hi, cap)] that fits.
    let (mut lo, mut up) = (hi, hi.saturating_mul(2).min(cap));
    while lo < up {
        let mid = lo + (up - lo).div_ceil(2);
        if pricing.cost(knob, mid) <= budget {
            lo = mid;
        } else {
            up = mid - 1;
        }
    }
    Ok(PlannedPoint::Scaled { target_mb, knob, value: lo, achieved_units: pricing.cost(knob, lo) })
}

/// Plans every target. Fixed methods return a single [`PlannedPoint::Fixed`].
pub fn plan_sweep(method: &str, targets_mb: &[f64], pricing: &PricingRules) -> Vec<Result<PlannedPoint>> {
    if Knob::for_method(method).is_none() {
        return vec![Ok(PlannedPoint::Fixed)];
    }
    targets_mb.iter().map(|&t| plan_target(method, t, pricing)).collect()
}
