//! The assembled model: embedding, fusion with reservoir memory, encoder and
//! head, plus parameter persistence.

pub mod checkpoint;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{combine, CombinationMethod, FusionDims, FusionParams};
use crate::numerics::{Matrix, Rng};
use crate::params::{Grads, ParamStore};
use crate::reservoir::{GroupMemory, GroupReservoir, InitMode, ReservoirConfig};
use crate::scalar::Scalar;
use crate::stm::{self, StmConfig, StmParams};
use crate::tape::{Tape, Var};
use crate::training::optim::OptimizerState;

use checkpoint::{CheckpointData, CheckpointError};

const STREAM_STM: u64 = 10;
const STREAM_FUSION: u64 = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stm: StmConfig,
    pub reservoirs: Vec<ReservoirConfig>,
    /// history window k
    pub history: usize,
    pub combine: CombinationMethod,
    pub fusion_ffn_hidden: usize,
    /// false runs the STM-only ablation: every sentence sees the zero memory row
    pub use_memory: bool,
    /// seed for trainable-parameter initialization
    pub seed: u64,
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.stm.problems().into_iter().map(|p| format!("stm: {p}")).collect();
        if self.reservoirs.is_empty() {
            out.push("at least one reservoir is required".into());
        }
        for (i, r) in self.reservoirs.iter().enumerate() {
            if let Err(e) = r.validate() {
                out.push(format!("reservoirs[{i}]: {e}"));
            }
            if r.input_dim != self.stm.model_dim {
                out.push(format!(
                    "reservoirs[{i}].input_dim {} must equal model_dim {}",
                    r.input_dim, self.stm.model_dim
                ));
            }
            if r.readout_dim != self.reservoirs[0].readout_dim {
                out.push(format!("reservoirs[{i}].readout_dim differs from reservoirs[0]"));
            }
        }
        if self.history == 0 {
            out.push("history must be at least 1".into());
        }
        if self.fusion_ffn_hidden == 0 {
            out.push("fusion_ffn_hidden must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn memory_dim(&self) -> usize {
        self.reservoirs.first().map_or(0, |r| r.readout_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    /// final-layer CLS hidden state, the next reservoir input
    pub hidden: Vec<T>,
    pub predicted_class: usize,
    pub truncated: bool,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub memory: Var,
    pub fused: Var,
    pub hidden: Var,
    pub cls: Var,
    pub logits: Var,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct SentenceGrad<T> {
    pub output: ForwardOutput<T>,
    pub loss: T,
    pub grads: Grads<T>,
    /// memory tokens the fusion block consumed
    pub memory_tokens: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct ResFormer<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    stm: StmParams,
    fusion: FusionParams,
    group: GroupReservoir<T>,
}

impl<T: Scalar> ResFormer<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stm = StmParams::init(&config.stm, &mut store, &mut Rng::new(config.seed, STREAM_STM))?;
        let d = config.stm.model_dim;
        let dims = FusionDims {
            model_dim: d,
            memory_dim: config.memory_dim(),
            key_dim: d,
            ffn_hidden: config.fusion_ffn_hidden,
        };
        let fusion = FusionParams::init(
            config.combine,
            dims,
            &mut store,
            &mut Rng::new(config.seed, STREAM_FUSION),
        )?;
        let group = GroupReservoir::build(&config.reservoirs, config.history, &mut store)?;
        Ok(Self {
            config,
            store,
            stm,
            fusion,
            group,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stm(&self) -> &StmParams {
        &self.stm
    }

    pub fn fusion(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn group(&self) -> &GroupReservoir<T> {
        &self.group
    }

    pub fn num_classes(&self) -> usize {
        self.config.stm.num_classes
    }

    pub fn new_memory(&self, mode: InitMode, rng: &Rng) -> GroupMemory<T> {
        GroupMemory::init(&self.group, mode, rng)
    }

    /// Memory tokens the next sentence would attend to, on the tape. Falls back
    /// to one zero row before any history exists or when memory is disabled.
    pub fn memory_on_tape(&self, tape: &mut Tape<'_, T>, memory: &GroupMemory<T>) -> Result<Var> {
        if !self.config.use_memory || memory.steps() == 0 {
            Ok(tape.constant(stm::zero_memory(self.group.readout_dim())))
        } else {
            memory.memory_tokens_on_tape(&self.group, tape)
        }
    }

    /// Values of [`ResFormer::memory_on_tape`].
    pub fn memory_snapshot(&self, memory: &GroupMemory<T>) -> Result<Matrix<T>> {
        if !self.config.use_memory || memory.steps() == 0 {
            Ok(stm::zero_memory(self.group.readout_dim()))
        } else {
            memory.memory_tokens(&self.group, &self.store)
        }
    }

    /// Records one forward pass on `tape`, whose store may be a perturbed copy
    /// of [`ResFormer::store`]. Memory is read, never advanced.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &[usize],
        memory: &GroupMemory<T>,
        dropout: Option<&mut Rng>,
    ) -> Result<ForwardVars> {
        let embedded = stm::embed(tape, ids, &self.stm.embedding)?;
        let mem = self.memory_on_tape(tape, memory)?;
        let fused = combine(tape, embedded.rows, mem, self.config.combine, &self.fusion)?;
        let encoded = stm::encoder_forward(tape, fused, &embedded.keep, &self.stm, dropout)?;
        let cls = stm::extract_cls(tape, encoded.hidden)?;
        let logits = stm::classify(tape, cls, &self.stm.head)?;
        Ok(ForwardVars {
            memory: mem,
            fused,
            hidden: encoded.hidden,
            cls,
            logits,
            truncated: embedded.truncated,
        })
    }

    fn output_of(tape: &Tape<'_, T>, vars: &ForwardVars) -> Result<ForwardOutput<T>> {
        let logits = tape.value(vars.logits).as_slice().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(ForwardOutput {
            predicted_class: stm::argmax(&logits),
            logits,
            hidden: tape.value(vars.cls).as_slice().to_vec(),
            truncated: vars.truncated,
        })
    }

    /// `dropout` selects train mode.
    pub fn forward(
        &self,
        ids: &[usize],
        memory: &GroupMemory<T>,
        dropout: Option<&mut Rng>,
    ) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new(&self.store);
        let vars = self.forward_on_tape(&mut tape, ids, memory, dropout)?;
        Self::output_of(&tape, &vars)
    }

    /// Cross-entropy of one sentence and its gradient over the registry.
    /// Gradients stop at the reservoir states.
    pub fn loss_and_grad(
        &self,
        ids: &[usize],
        label: usize,
        memory: &GroupMemory<T>,
        dropout: Option<&mut Rng>,
    ) -> Result<SentenceGrad<T>> {
        let mut tape = Tape::new(&self.store);
        let vars = self.forward_on_tape(&mut tape, ids, memory, dropout)?;
        let output = Self::output_of(&tape, &vars)?;
        let loss = tape.cross_entropy(vars.logits, label)?;
        let grads = tape.backward(loss)?;
        Ok(SentenceGrad {
            output,
            loss: tape.value(loss).as_slice()[0],
            grads,
            memory_tokens: tape.value(vars.memory).clone(),
        })
    }

    /// One group step on the detached hidden state `h`.
    pub fn advance_memory(&self, memory: &mut GroupMemory<T>, h: &[T]) -> Result<()> {
        memory.advance(&self.group, h)
    }

    /// Writes every registry tensor, the optimizer moments when given, and
    /// metadata (model config plus `extra`). Fixed reservoir matrices are
    /// rebuilt from their seeds on load.
    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerState<T>>, extra: serde_json::Value) -> Result<()> {
        let mut tensors: Vec<(String, Matrix<T>)> = self
            .store
            .iter()
            .map(|(_, name, m)| (name.to_string(), m.clone()))
            .collect();
        if let Some(opt) = optimizer {
            for (id, name, _) in self.store.iter() {
                tensors.push((format!("optimizer.m.{name}"), opt.first[id.index()].clone()));
                tensors.push((format!("optimizer.v.{name}"), opt.second[id.index()].clone()));
            }
        }
        let metadata = serde_json::json!({
            "model": self.config,
            "optimizer_step": optimizer.map(|o| o.step),
            "extra": extra,
        });
        checkpoint::write_file(path, &CheckpointData { tensors, metadata })
    }

    pub fn load(path: &Path) -> Result<LoadedModel<T>> {
        let data = checkpoint::read_file::<T>(path)?;
        let mismatch = |m: String| Error::Checkpoint(CheckpointError::Mismatch(m));
        let config: ModelConfig = serde_json::from_value(data.metadata["model"].clone())
            .map_err(|e| mismatch(format!("model config: {e}")))?;
        let mut model = ResFormer::new(config)?;
        let mut tensors: std::collections::HashMap<String, Matrix<T>> = data.tensors.into_iter().collect();
        let ids: Vec<_> = model.store.ids().collect();
        for &id in &ids {
            let name = model.store.name(id).to_string();
            let value = tensors
                .remove(&name)
                .ok_or_else(|| mismatch(format!("missing tensor {name}")))?;
            model
                .store
                .set(id, value)
                .map_err(|e| mismatch(format!("{name}: {e}")))?;
        }
        let optimizer = match data.metadata["optimizer_step"].as_u64() {
            Some(step) => {
                let mut state = OptimizerState::new(&model.store);
                state.step = step;
                for &id in &ids {
                    let name = model.store.name(id);
                    for (prefix, slot) in [("m", &mut state.first), ("v", &mut state.second)] {
                        let key = format!("optimizer.{prefix}.{name}");
                        let value = tensors.remove(&key).ok_or_else(|| mismatch(format!("missing {key}")))?;
                        if value.shape() != model.store.get(id).shape() {
                            return Err(mismatch(format!("{key} has the wrong shape")));
                        }
                        slot[id.index()] = value;
                    }
                }
                Some(state)
            }
            None => None,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(mismatch(format!("unexpected tensor {name}")));
        }
        Ok(LoadedModel {
            model,
            optimizer,
            extra: data.metadata["extra"].clone(),
        })
    }
}

pub struct LoadedModel<T: Scalar> {
    pub model: ResFormer<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub extra: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;
    use crate::params::gradient_check;
    use crate::reservoir::table_group;

    pub(crate) fn micro_config(method: CombinationMethod, use_memory: bool) -> ModelConfig {
        let d = 16;
        ModelConfig {
            stm: StmConfig {
                vocab_size: 14,
                model_dim: d,
                layers: 2,
                heads: 2,
                max_len: 8,
                ffn_hidden: 32,
                attention_dropout: 0.1,
                num_classes: 3,
            },
            reservoirs: table_group(&[20, 20], d, 6, Activation::Tanh, 99),
            history: 2,
            combine: method,
            fusion_ffn_hidden: 32,
            use_memory,
            seed: 5,
        }
    }

    fn warmed_memory(model: &ResFormer<f64>, steps: usize) -> GroupMemory<f64> {
        let mut memory = model.new_memory(InitMode::SeededRandom, &Rng::new(1, 0));
        for t in 0..steps {
            let out = model.forward(&[3 + t, 4, 5], &memory, None).unwrap();
            model.advance_memory(&mut memory, &out.hidden).unwrap();
        }
        memory
    }

    #[test]
    fn cold_start_equals_zero_memory_ablation() {
        let model: ResFormer<f64> = ResFormer::new(micro_config(CombinationMethod::CrossAttention, true)).unwrap();
        let mut ablated_cfg = micro_config(CombinationMethod::CrossAttention, false);
        ablated_cfg.seed = model.config.seed;
        let ablated: ResFormer<f64> = ResFormer::new(ablated_cfg).unwrap();
        let fresh = model.new_memory(InitMode::SeededRandom, &Rng::new(1, 0));
        let a = model.forward(&[3, 4], &fresh, None).unwrap();
        let b = ablated.forward(&[3, 4], &warmed_memory(&model, 3), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.forward(&[3, 4], &fresh, None).unwrap(), a);
    }

    #[test]
    fn forward_does_not_advance_and_advance_is_stateful() {
        let model: ResFormer<f64> = ResFormer::new(micro_config(CombinationMethod::CrossAttention, true)).unwrap();
        let memory = warmed_memory(&model, 2);
        let before = memory.clone();
        let out = model.forward(&[6, 7], &memory, None).unwrap();
        assert_eq!(memory, before);
        let mut once = memory.clone();
        model.advance_memory(&mut once, &out.hidden).unwrap();
        let mut twice = once.clone();
        model.advance_memory(&mut twice, &out.hidden).unwrap();
        assert_ne!(once.states(), twice.states());
    }

    #[test]
    fn registry_excludes_fixed_matrices() {
        let model: ResFormer<f64> = ResFormer::new(micro_config(CombinationMethod::CrossAttention, true)).unwrap();
        let names = model.store().names();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.iter().any(|n| n == "reservoir.1.w_out"));
        let fixed: usize = model.group().members().iter().map(|r| r.recurrent().len()).sum();
        assert!(fixed > 0);
        assert!(names.iter().all(|n| !n.contains("recurrent") && !n.contains("w_in")));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for method in [
            CombinationMethod::CrossAttention,
            CombinationMethod::Concatenation,
            CombinationMethod::ElementwiseAddition,
        ] {
            let model: ResFormer<f64> = ResFormer::new(micro_config(method, true)).unwrap();
            let memory = warmed_memory(&model, 3);
            let ids = [3, 8, 9, 4];
            let loss_of = |st: &ParamStore<f64>| -> Result<(f64, Grads<f64>)> {
                let mut tape = Tape::new(st);
                let vars = model.forward_on_tape(&mut tape, &ids, &memory, None)?;
                let loss = tape.cross_entropy(vars.logits, 2)?;
                Ok((tape.value(loss).as_slice()[0], tape.backward(loss)?))
            };
            let (_, grads) = loss_of(model.store()).unwrap();
            let report = gradient_check(model.store(), &grads, 1e-6, |st| loss_of(st).map(|r| r.0)).unwrap();
            assert_eq!(report.len(), model.store().len());
            for r in report {
                assert!(r.relative_error < 1e-5, "{method}: {} {}", r.name, r.relative_error);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: ResFormer<f64> = ResFormer::new(micro_config(CombinationMethod::CrossAttention, true)).unwrap();
        let mut opt = OptimizerState::new(model.store());
        opt.step = 17;
        opt.first[0].as_mut_slice()[0] = 0.25;
        model
            .save(&path, Some(&opt), serde_json::json!({"labels": ["a"]}))
            .unwrap();
        let loaded = ResFormer::<f64>::load(&path).unwrap();
        assert_eq!(loaded.model.store().checksum(), model.store().checksum());
        assert_eq!(loaded.optimizer.as_ref().unwrap(), &opt);
        assert_eq!(loaded.extra["labels"][0], "a");
        let memory = warmed_memory(&model, 2);
        let memory2 = warmed_memory(&loaded.model, 2);
        assert_eq!(
            model.forward(&[3, 4, 5], &memory, None).unwrap(),
            loaded.model.forward(&[3, 4, 5], &memory2, None).unwrap()
        );
    }
}
