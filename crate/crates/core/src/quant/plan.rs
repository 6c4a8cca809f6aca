use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Model, ModuleId, PrefixState};
use crate::quant::linear::{LinearEntry, LinearMode, PreparedWeight};
use crate::quant::spec::{QuantSpec, QuantTarget, Timing};

/// Binds a mode and quantization scheme to every linear group of one model.
/// Weights are quantized once, at build time.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    modes: Vec<LinearMode>,
    activation: QuantSpec,
    weight: QuantSpec,
    static_scales: BTreeMap<ModuleId, f32>,
    bmm: bool,
    prepared: Vec<Option<Arc<PreparedWeight>>>,
    excluded: BTreeSet<ModuleId>,
    prefix: Option<Arc<PrefixState>>,
}

impl ExecutionPlan {
    /// Full precision everywhere.
    pub fn fp(model: &Model) -> Self {
        PlanBuilder::new(LinearMode::Fp)
            .build(model)
            .expect("an all-fp plan has nothing to validate")
    }

    pub fn builder(default_mode: LinearMode) -> PlanBuilder {
        PlanBuilder::new(default_mode)
    }

    pub fn mode(&self, id: ModuleId) -> LinearMode {
        self.modes[id.index()]
    }

    pub fn activation_spec(&self) -> QuantSpec {
        self.activation
    }

    pub fn weight_spec(&self) -> QuantSpec {
        self.weight
    }

    pub fn bmm(&self) -> bool {
        self.bmm
    }

    pub fn excluded(&self) -> &BTreeSet<ModuleId> {
        &self.excluded
    }

    pub fn prefix(&self) -> Option<&PrefixState> {
        self.prefix.as_deref()
    }

    pub fn static_scales(&self) -> &BTreeMap<ModuleId, f32> {
        &self.static_scales
    }

    pub fn is_full_precision(&self) -> bool {
        !self.bmm && self.modes.iter().all(|m| *m == LinearMode::Fp)
    }

    /// The same plan with the prefix removed.
    pub fn without_prefix(&self) -> Self {
        Self {
            prefix: None,
            ..self.clone()
        }
    }

    pub fn with_prefix(&self, prefix: PrefixState) -> Result<Self> {
        if !prefix.cache.is_full_precision() {
            return Err(Error::QuantSpec("prefix cache must be computed in full precision".into()));
        }
        Ok(Self {
            prefix: Some(Arc::new(prefix)),
            ..self.clone()
        })
    }

    pub fn entry(&self, id: ModuleId) -> LinearEntry<'_> {
        LinearEntry {
            module: id,
            mode: self.modes[id.index()],
            activation: self.activation,
            weight: self.prepared[id.index()].as_deref(),
            static_scale: self.static_scales.get(&id).copied(),
        }
    }

    /// Short human-readable description, e.g. `w8a8 act=per-tensor-dyn w=per-channel qfem=1`.
    pub fn describe(&self) -> String {
        let count = |m: LinearMode| self.modes.iter().filter(|x| **x == m).count();
        let mut s = if self.is_full_precision() {
            "fp".to_string()
        } else {
            format!(
                "fp:{} w8a8:{} w8a16:{} act={} w={}",
                count(LinearMode::Fp),
                count(LinearMode::W8a8),
                count(LinearMode::W8a16),
                self.activation,
                self.weight
            )
        };
        if self.bmm {
            s.push_str(" bmm");
        }
        if !self.excluded.is_empty() {
            s.push_str(&format!(" qfem={}", self.excluded.len()));
        }
        if let Some(p) = &self.prefix {
            s.push_str(&format!(" qfep={:?}", p.tokens));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PlanBuilder {
    default_mode: LinearMode,
    overrides: BTreeMap<ModuleId, LinearMode>,
    activation: QuantSpec,
    weight: QuantSpec,
    static_scales: BTreeMap<ModuleId, f32>,
    bmm: bool,
    excluded: BTreeSet<ModuleId>,
    prefix: Option<PrefixState>,
}

impl PlanBuilder {
    pub fn new(default_mode: LinearMode) -> Self {
        Self {
            default_mode,
            overrides: BTreeMap::new(),
            activation: QuantSpec::AQ2,
            weight: QuantSpec::WEIGHT_PER_CHANNEL,
            static_scales: BTreeMap::new(),
            bmm: false,
            excluded: BTreeSet::new(),
            prefix: None,
        }
    }

    pub fn activation(mut self, spec: QuantSpec) -> Self {
        self.activation = spec;
        self
    }

    pub fn weight(mut self, spec: QuantSpec) -> Self {
        self.weight = spec;
        self
    }

    pub fn bmm(mut self, on: bool) -> Self {
        self.bmm = on;
        self
    }

    pub fn static_scales(mut self, scales: BTreeMap<ModuleId, f32>) -> Self {
        self.static_scales = scales;
        self
    }

    pub fn mode(mut self, id: ModuleId, mode: LinearMode) -> Self {
        self.overrides.insert(id, mode);
        self
    }

    /// Modules that keep full-precision activations; they run as W8A16.
    pub fn exclude<I: IntoIterator<Item = ModuleId>>(mut self, ids: I) -> Self {
        self.excluded.extend(ids);
        self
    }

    pub fn prefix(mut self, prefix: PrefixState) -> Self {
        self.prefix = Some(prefix);
        self
    }

    pub fn build(self, model: &Model) -> Result<ExecutionPlan> {
        let cfg = &model.config;
        if self.activation.target != QuantTarget::Activation {
            return Err(Error::QuantSpec(format!("{:?} is not an activation scheme", self.activation)));
        }
        self.activation.validate()?;
        if self.weight.target != QuantTarget::Weight {
            return Err(Error::QuantSpec(format!("{:?} is not a weight scheme", self.weight)));
        }
        self.weight.validate()?;

        let ids = cfg.module_ids();
        let mut modes = vec![self.default_mode; ids.len()];
        for (id, m) in &self.overrides {
            if id.layer >= cfg.n_layers {
                return Err(Error::Index(format!("{id} beyond {} layers", cfg.n_layers)));
            }
            modes[id.index()] = *m;
        }
        for id in &self.excluded {
            if id.layer >= cfg.n_layers {
                return Err(Error::Index(format!("{id} beyond {} layers", cfg.n_layers)));
            }
            modes[id.index()] = LinearMode::W8a16;
        }
        if self.activation.timing == Timing::Static {
            for id in &ids {
                if modes[id.index()] == LinearMode::W8a8 && !self.static_scales.contains_key(id) {
                    return Err(Error::MissingStaticScale(*id));
                }
            }
        }
        let prepared = ids
            .iter()
            .map(|&id| match modes[id.index()] {
                LinearMode::Fp => Ok(None),
                _ => PreparedWeight::new(model.weights.linear(id), &self.weight).map(|w| Some(Arc::new(w))),
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = &self.prefix {
            if !p.cache.is_full_precision() {
                return Err(Error::QuantSpec("prefix cache must be computed in full precision".into()));
            }
            p.cache.check_compatible(cfg)?;
        }
        Ok(ExecutionPlan {
            modes,
            activation: self.activation,
            weight: self.weight,
            static_scales: self.static_scales,
            bmm: self.bmm,
            prepared,
            excluded: self.excluded,
            prefix: self.prefix.map(Arc::new),
        })
    }
}
