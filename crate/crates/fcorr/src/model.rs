//! The full matching model: shared backbone plus the three refinement
//! stages, with seeded initialization, parameter walking, and checkpoint
//! wiring.

use crate::backbone::Backbone;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{self, StateDict};
use crate::tensor::Tensor;
use crate::transformer::RefinerStage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Callback that visits every parameter by name.
pub type ParamFn<'a, 'b> = &'a mut dyn FnMut(String, &mut Tensor);

/// Standard normal via Box-Muller; deterministic given the rng stream.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-normal conv kernel (cout, cin, k, k).
pub fn he_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let data: Vec<f64> = (0..cout * cin * k * k).map(|_| normal(rng) * std).collect();
    Tensor::param(&[cout, cin, k, k], data).unwrap()
}

/// He-normal linear weight (fin, fout).
pub fn he_linear(rng: &mut ChaCha8Rng, fin: usize, fout: usize) -> Tensor {
    let std = (2.0 / fin as f64).sqrt();
    let data: Vec<f64> = (0..fin * fout).map(|_| normal(rng) * std).collect();
    Tensor::param(&[fin, fout], data).unwrap()
}

/// Unit scale, zero shift.
pub fn ln_params(c: usize) -> (Tensor, Tensor) {
    (
        Tensor::param(&[c], vec![1.0; c]).unwrap(),
        Tensor::param(&[c], vec![0.0; c]).unwrap(),
    )
}

pub struct Model {
    pub backbone: Backbone,
    pub coarse: RefinerStage,
    pub middle: RefinerStage,
    pub fine: RefinerStage,
    trainable: bool,
}

impl Model {
    /// Fresh seeded initialization. `trainable` controls whether the
    /// parameters accumulate gradients; inference models skip graph
    /// recording entirely.
    pub fn init(cfg: &PipelineConfig, seed: u64, trainable: bool) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut rng, cfg);
        let (fd, d, h, ffn) = (cfg.feat_dim, cfg.model_dim, cfg.num_heads, cfg.ffn_dim);
        let coarse = RefinerStage::new(&mut rng, fd, d, h, ffn);
        let middle = RefinerStage::new(&mut rng, fd, d, h, ffn);
        let fine = RefinerStage::new(&mut rng, fd, d, h, ffn);
        let mut model = Model { backbone, coarse, middle, fine, trainable };
        if !trainable {
            model.set_trainable(false);
        }
        model
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn params(&mut self, f: ParamFn) {
        self.backbone.params("backbone", f);
        self.coarse.params("coarse", f);
        self.middle.params("middle", f);
        self.fine.params("fine", f);
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        self.params(&mut |_name, t| {
            let data = t.data_arc();
            let shape = t.shape().to_vec();
            *t = Tensor::from_shared(&shape, data, trainable).unwrap();
        });
    }

    pub fn zero_grads(&mut self) {
        self.params(&mut |_name, t| t.zero_grad());
    }

    pub fn state_dict(&mut self) -> StateDict {
        let mut state = StateDict::new();
        self.params(&mut |name, t| {
            state.insert(name, (t.shape().to_vec(), t.data_arc()));
        });
        state
    }

    /// Replace every parameter's value from `state`. Shapes must match
    /// exactly and the dictionaries must cover each other.
    pub fn load_state(&mut self, state: &StateDict) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        let trainable = self.trainable;
        let mut err: Option<Error> = None;
        self.params(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match state.get(&name) {
                Some((shape, data)) => {
                    if shape != t.shape() {
                        err = Some(Error::Checkpoint(format!(
                            "tensor `{}` has shape {:?}, checkpoint has {:?}",
                            name,
                            t.shape(),
                            shape
                        )));
                        return;
                    }
                    used += 1;
                    *t = Tensor::from_shared(shape, data.clone(), trainable).unwrap();
                }
                None => missing.push(name),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint missing tensors: {:?}", missing)));
        }
        if used != state.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model uses {}",
                state.len(),
                used
            )));
        }
        Ok(())
    }

    pub fn from_state(cfg: &PipelineConfig, state: &StateDict, trainable: bool) -> Result<Model> {
        let mut model = Model::init(cfg, 0, trainable);
        model.load_state(state)?;
        Ok(model)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        checkpoint::save(&self.state_dict(), path)
    }

    pub fn load(cfg: &PipelineConfig, path: &Path, trainable: bool) -> Result<Model> {
        let state = checkpoint::load(path)?;
        Model::from_state(cfg, &state, trainable)
    }
}
