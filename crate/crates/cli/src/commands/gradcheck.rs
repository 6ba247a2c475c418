//! End-to-end finite-difference check on a micro model at 64-bit.

use resformer::fusion::CombinationMethod;
use resformer::model::{ModelConfig, ResFormer};
use resformer::numerics::{Activation, Rng};
use resformer::params::gradient_check;
use resformer::reservoir::{table_group, InitMode};
use resformer::stm::StmConfig;
use resformer::tape::Tape;
use serde::Serialize;

use crate::error::CliResult;

pub const THRESHOLD: f64 = 1e-4;
const STEP: f64 = 1e-6;
const WARMUP_SENTENCES: usize = 3;
const PROBE_IDS: [usize; 5] = [3, 7, 4, 11, 5];
const PROBE_LABEL: usize = 1;

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodReport {
    pub combine: CombinationMethod,
    pub groups: Vec<GroupError>,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub methods: Vec<MethodReport>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// d=16, two encoder layers, two 20-unit reservoirs with ReLU readouts.
pub fn micro_config(combine: CombinationMethod, seed: u64) -> ModelConfig {
    let d = 16;
    ModelConfig {
        stm: StmConfig {
            vocab_size: 16,
            model_dim: d,
            layers: 2,
            heads: 2,
            max_len: 8,
            ffn_hidden: 4 * d,
            attention_dropout: 0.1,
            num_classes: 3,
        },
        reservoirs: table_group(&[20, 20], d, 8, Activation::Relu, seed),
        history: 2,
        combine,
        fusion_ffn_hidden: 4 * d,
        use_memory: true,
        seed,
    }
}

fn check_method(combine: CombinationMethod, seed: u64, corrupt: bool) -> CliResult<MethodReport> {
    let model = ResFormer::<f64>::new(micro_config(combine, seed))?;
    let mut memory = model.new_memory(InitMode::SeededRandom, &Rng::new(seed, 1));
    for t in 0..WARMUP_SENTENCES {
        let out = model.forward(&[3 + t, 8, 9 + t], &memory, None)?;
        model.advance_memory(&mut memory, &out.hidden)?;
    }
    let loss_of =
        |store: &resformer::params::ParamStore<f64>| -> resformer::Result<(f64, resformer::params::Grads<f64>)> {
            let mut tape = Tape::new(store);
            let vars = model.forward_on_tape(&mut tape, &PROBE_IDS, &memory, None)?;
            let loss = tape.cross_entropy(vars.logits, PROBE_LABEL)?;
            Ok((tape.value(loss).as_slice()[0], tape.backward(loss)?))
        };
    let (_, mut grads) = loss_of(model.store())?;
    if corrupt {
        let target = model.store().ids().find_map(|id| {
            grads
                .get(id)
                .filter(|g| g.as_slice().iter().any(|v| *v != 0.0))
                .cloned()
                .map(|g| (id, g))
        });
        if let Some((id, g)) = target {
            grads.accumulate(id, &g);
        }
    }
    let report = gradient_check(model.store(), &grads, STEP, |st| loss_of(st).map(|r| r.0))?;
    let groups: Vec<GroupError> = report
        .into_iter()
        .map(|r| GroupError {
            name: r.name,
            relative_error: r.relative_error,
            max_abs_error: r.max_abs_error,
        })
        .collect();
    let max_relative_error = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    Ok(MethodReport {
        combine,
        groups,
        max_relative_error,
    })
}

pub fn run(methods: &[CombinationMethod], seed: u64, corrupt: bool) -> CliResult<GradcheckReport> {
    let methods = methods
        .iter()
        .map(|&m| check_method(m, seed, corrupt))
        .collect::<CliResult<Vec<_>>>()?;
    let max_relative_error = methods.iter().map(|m| m.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        threshold: THRESHOLD,
        passed: max_relative_error < THRESHOLD,
        methods,
        max_relative_error,
    })
}
