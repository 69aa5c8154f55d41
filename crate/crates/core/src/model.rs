//! Model configuration, parameter layout and the forward-pass context.

use serde::{Deserialize, Serialize};

use crate::decoders::{IcrDecoderParams, VgDecoderParams, VqaDecoderParams};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Mode, ParamId, ParamStore, Tape, Var};

/// Architecture hyperparameters. Fixed for the lifetime of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared feature width `d`. Must be even: each recurrent direction
    /// produces `d / 2` features.
    pub dim: usize,
    /// Number of stacked co-attention layers `L`.
    pub depth: usize,
    /// Word embedding width.
    pub embed_dim: usize,
    /// Raw region feature width.
    pub region_dim: usize,
    /// Parallel attention maps `K` per summary network.
    pub attention_maps: usize,
    pub vocab_size: usize,
    pub num_answers: usize,
    /// Dropout on fully-connected hidden activations.
    pub dropout_fc: f64,
    /// Dropout on recurrent layer outputs.
    pub dropout_rnn: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 5,
            embed_dim: 32,
            region_dim: crate::data::REGION_DIM,
            attention_maps: 4,
            vocab_size: crate::data::Vocab::standard().len(),
            num_answers: crate::data::ANSWERS.len(),
            dropout_fc: 0.3,
            dropout_rnn: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return bad("dim must be a positive even number");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.attention_maps == 0 {
            return bad("attention_maps must be at least 1");
        }
        if self.num_answers < 2 {
            return bad("at least two answers are required");
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.region_dim == 0 {
            return bad("vocab_size, embed_dim and region_dim must be positive");
        }
        for p in [self.dropout_fc, self.dropout_rnn] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::DropoutProbability(p));
            }
        }
        Ok(())
    }
}

/// State threaded through a forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    pub mode: Mode,
    rng: Option<&'a mut Rng>,
    dropout_fc: f64,
    dropout_rnn: f64,
}

impl<'a> Forward<'a> {
    /// Deterministic pass with dropout disabled.
    pub fn eval(tape: &'a mut Tape, params: &'a ParamStore) -> Self {
        Self {
            tape,
            params,
            mode: Mode::Eval,
            rng: None,
            dropout_fc: 0.0,
            dropout_rnn: 0.0,
        }
    }

    /// Training pass drawing dropout masks from `rng`.
    pub fn train(
        tape: &'a mut Tape,
        params: &'a ParamStore,
        config: &ModelConfig,
        rng: &'a mut Rng,
    ) -> Self {
        Self {
            tape,
            params,
            mode: Mode::Train,
            rng: Some(rng),
            dropout_fc: config.dropout_fc,
            dropout_rnn: config.dropout_rnn,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match (&mut self.rng, self.mode) {
            (Some(rng), Mode::Train) => self.tape.dropout(x, p, Mode::Train, &mut **rng),
            _ => Ok(x),
        }
    }

    pub fn dropout_fc(&mut self, x: Var) -> Result<Var> {
        self.dropout(x, self.dropout_fc)
    }

    pub fn dropout_rnn(&mut self, x: Var) -> Result<Var> {
        self.dropout(x, self.dropout_rnn)
    }
}

/// Shared encoder plus the three task decoders.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub icr: IcrDecoderParams,
    pub vqa: VqaDecoderParams,
    pub vg: VgDecoderParams,
}

impl Model {
    /// Glorot-uniform weights and zero biases drawn from the `init` stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut params = ParamStore::new();
        let encoder = EncoderParams::register(&mut params, &config, &mut rng);
        let icr = IcrDecoderParams::register(&mut params, "icr", &config, &mut rng);
        let vqa = VqaDecoderParams::register(&mut params, "vqa", &config, &mut rng);
        let vg = VgDecoderParams::register(&mut params, "vg", &config, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            icr,
            vqa,
            vg,
        })
    }

    /// Replaces parameter values with those of a loaded checkpoint.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                other.len(),
                self.params.len()
            )));
        }
        self.params.load_from(other)
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_params(&mut self, prefix: &str) {
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn odd_dim_rejected() {
        let c = ModelConfig {
            dim: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(ModelConfig::default(), 5).unwrap();
        let b = Model::new(ModelConfig::default(), 5).unwrap();
        let c = Model::new(ModelConfig::default(), 6).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn biases_start_at_zero() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        for (_, name, t) in m.params.iter().filter(|(_, _, t)| t.rank() == 1) {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}
