//! Everything a training run owns, and its mapping to checkpoint records.

use afflow_core::latent::Autoencoder;
use afflow_core::optim::AdamW;
use afflow_core::params::ParamSet;
use afflow_core::train::Trainer;
use afflow_core::FlowModel;
use serde::{Deserialize, Serialize};

use crate::config::{DataShape, RunConfig};
use crate::error::{CliError, CliResult};
use crate::format::Checkpoint;

/// Header stored as the checkpoint's configuration text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    decoder_steps: u64,
    data: DataShape,
    run: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub config: RunConfig,
    pub shape: DataShape,
    pub trainer: Trainer,
    pub decoder: Option<(Autoencoder, AdamW)>,
    pub decoder_steps: u64,
}

const FLOW_M: &str = "opt.m.";
const FLOW_V: &str = "opt.v.";
const DEC_M: &str = "opt.dec.m.";
const DEC_V: &str = "opt.dec.v.";

impl RunState {
    /// Fresh state; parameters are initialised from the run seed.
    pub fn new(config: RunConfig, shape: DataShape) -> CliResult<Self> {
        config.validate()?;
        let flow = config.flow_config(shape)?;
        let model = FlowModel::new(flow, config.seed)?;
        let mut trainer = Trainer::new(model, config.train_config(), config.seed)?;
        // Checkpoints store f32; start from representable values so saving is lossless.
        trainer.model.params.round_to_f32();
        let decoder = match config.autoencoder_config(shape)? {
            Some(ae_cfg) => {
                let mut ae = Autoencoder::new(ae_cfg, config.seed)?;
                ae.params.round_to_f32();
                let lr = config.latent.as_ref().map_or(1e-3, |l| l.finetune_lr);
                let opt = AdamW::new(afflow_core::optim::AdamWConfig { lr, ..config.optimizer() }, &ae.params);
                Some((ae, opt))
            }
            None => None,
        };
        Ok(RunState { config, shape, trainer, decoder, decoder_steps: 0 })
    }

    pub fn model(&self) -> &FlowModel {
        &self.trainer.model
    }

    pub fn autoencoder(&self) -> Option<&Autoencoder> {
        self.decoder.as_ref().map(|(ae, _)| ae)
    }

    pub fn to_checkpoint(&self) -> CliResult<Checkpoint> {
        let meta = Meta { step: self.trainer.step_count(), decoder_steps: self.decoder_steps, data: self.shape, run: self.config.clone() };
        let config = toml::to_string(&meta).map_err(|e| CliError::Validation(format!("checkpoint header: {e}")))?;
        let mut tensors = Vec::new();
        push_params(&mut tensors, &self.trainer.model.params, &self.trainer.opt, FLOW_M, FLOW_V);
        if let Some((ae, opt)) = &self.decoder {
            push_params(&mut tensors, &ae.params, opt, DEC_M, DEC_V);
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> CliResult<Self> {
        let meta: Meta = toml::from_str(&ck.config).map_err(|e| CliError::Validation(format!("checkpoint header: {e}")))?;
        let mut state = RunState::new(meta.run, meta.data)?;
        state.trainer.opt.step = meta.step;
        state.decoder_steps = meta.decoder_steps;
        let expected = restore_params(ck, &mut state.trainer.model.params, &mut state.trainer.opt, FLOW_M, FLOW_V)?;
        let expected = expected
            + match &mut state.decoder {
                Some((ae, opt)) => {
                    opt.step = meta.decoder_steps;
                    restore_params(ck, &mut ae.params, opt, DEC_M, DEC_V)?
                }
                None => 0,
            };
        if expected != ck.tensors.len() {
            return Err(CliError::Validation(format!("checkpoint has {} records, expected {expected}", ck.tensors.len())));
        }
        Ok(state)
    }
}

fn push_params(out: &mut Vec<(String, afflow_core::Tensor)>, params: &ParamSet, opt: &AdamW, m: &str, v: &str) {
    for p in params.iter() {
        out.push((p.name.clone(), (*p.value).clone()));
    }
    for (i, p) in params.iter().enumerate().filter(|(_, p)| p.trainable) {
        out.push((format!("{m}{}", p.name), opt.m[i].clone()));
        out.push((format!("{v}{}", p.name), opt.v[i].clone()));
    }
}

/// Loads every parameter and its moments; returns the number of records used.
fn restore_params(ck: &Checkpoint, params: &mut ParamSet, opt: &mut AdamW, m: &str, v: &str) -> CliResult<usize> {
    let names: Vec<(String, bool)> = params.iter().map(|p| (p.name.clone(), p.trainable)).collect();
    let mut used = 0;
    let find = |name: &str| ck.get(name).cloned().ok_or_else(|| CliError::Validation(format!("checkpoint is missing record {name}")));
    for (i, (name, trainable)) in names.iter().enumerate() {
        params.assign(name, find(name)?)?;
        used += 1;
        if *trainable {
            for (prefix, slot) in [(m, &mut opt.m[i]), (v, &mut opt.v[i])] {
                let t = find(&format!("{prefix}{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(CliError::Validation(format!("record {prefix}{name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
                used += 1;
            }
        }
    }
    Ok(used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{decode_checkpoint, encode_checkpoint};

    fn small(latent: bool) -> RunState {
        let mut text = String::from("seed = 5\n[model]\narch = \"2(2)-16\"\n[train]\nbatch_size = 8\ntotal_images = 80\n");
        if latent {
            text.push_str("[latent]\npatch = 2\nhidden = 8\n");
        }
        let cfg = RunConfig::from_toml(&text).unwrap();
        let shape = if latent { DataShape { positions: 16, channels: 1, num_classes: 2 } } else { DataShape { positions: 2, channels: 1, num_classes: 0 } };
        RunState::new(cfg, shape).unwrap()
    }

    #[test]
    fn checkpoint_restores_state() {
        for latent in [false, true] {
            let s = small(latent);
            let bytes = encode_checkpoint(&s.to_checkpoint().unwrap()).unwrap();
            let back = RunState::from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
            assert_eq!(back.trainer.model.params.checksum(), s.trainer.model.params.checksum());
            assert_eq!(back.trainer.opt, s.trainer.opt);
            assert_eq!(encode_checkpoint(&back.to_checkpoint().unwrap()).unwrap(), bytes);
        }
    }

    #[test]
    fn missing_record_is_an_error() {
        let mut ck = small(false).to_checkpoint().unwrap();
        ck.tensors.remove(3);
        assert!(RunState::from_checkpoint(&ck).is_err());
    }
}
