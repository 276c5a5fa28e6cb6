//! The adapted classifier: an encoder stack with an augmentation hook.
//!
//! One forward pass computes a shared trunk up to the hook position, then
//! two heads: the original branch produces probabilities used for entropy,
//! selection and pseudo-labels (all detached), while the augmented branch
//! produces the probabilities the adaptation loss actually trains. Gradient
//! reaches the trunk through both heads.

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugState};
use crate::error::{Error, Result};
use crate::nn::{Forward, LayerStack, ModelSpec, ParamStore};
use crate::tensor::TensorId;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FataModel {
    pub stack: LayerStack,
    /// Augment after this encoder layer (0 = after the first layer).
    pub aug_position: usize,
}

/// On-disk model container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub aug_position: usize,
    pub params: ParamStore,
    /// Clean-validation accuracy measured right after pretraining.
    pub clean_accuracy: f64,
    pub seed: u64,
}

pub const CHECKPOINT_FORMAT: &str = "fata.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "not a model checkpoint (format {:?})",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        for id in ckpt.params.ids() {
            let e = ckpt.params.entry(id);
            if e.data.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} has {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                )));
            }
            if e.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "checkpoint parameter {} contains non-finite values",
                    e.name
                )));
            }
        }
        Ok(ckpt)
    }
}

/// Output of [`FataModel::two_branch`].
pub struct TwoBranch {
    /// Shared trunk feature after the hook layer.
    pub z: TensorId,
    /// Original-branch probabilities `[B, C]` (live graph; the entropy
    /// minimization loss differentiates through it).
    pub p_orig: TensorId,
    /// Augmented-branch probabilities `[B, C]` (live graph).
    pub p_aug: TensorId,
    /// Detached copy of the original-branch probabilities.
    pub p_orig_values: Vec<f64>,
    /// Pseudo-labels: argmax of the original branch, inherently detached.
    pub y_hat: Vec<usize>,
    /// Detached channel means of `z`, `[B * C]` row-major.
    pub mu_c: Vec<f64>,
    /// Normalized std of `mu_c` observed on this batch.
    pub delta_sigma: Vec<f64>,
}

impl FataModel {
    pub fn new(stack: LayerStack, aug_position: usize) -> Result<Self> {
        if aug_position >= stack.num_layers() {
            return Err(Error::Contract(format!(
                "aug_position {aug_position} out of range for {} layers",
                stack.num_layers()
            )));
        }
        Ok(FataModel { stack, aug_position })
    }

    pub fn num_layers(&self) -> usize {
        self.stack.num_layers()
    }

    pub fn num_classes(&self) -> usize {
        self.stack.num_classes
    }

    /// Channels of the feature at the augmentation hook.
    pub fn aug_channels(&self) -> usize {
        self.stack.channels_after(self.aug_position)
    }

    /// Encoder layers `0..=i`.
    pub fn forward_to(&self, fwd: &mut Forward, x: TensorId, i: usize) -> Result<TensorId> {
        if i >= self.stack.num_layers() {
            return Err(Error::Contract(format!(
                "forward_to: layer index {i} out of range for {} layers",
                self.stack.num_layers()
            )));
        }
        let mut h = x;
        for l in 0..=i {
            h = self.stack.layer_forward(fwd, h, l)?;
        }
        Ok(h)
    }

    /// Encoder layers `i+1..`, classifier, softmax. Rows sum to 1.
    pub fn forward_from(&self, fwd: &mut Forward, z: TensorId, i: usize) -> Result<TensorId> {
        if i >= self.stack.num_layers() {
            return Err(Error::Contract(format!(
                "forward_from: layer index {i} out of range for {} layers",
                self.stack.num_layers()
            )));
        }
        let mut h = z;
        for l in i + 1..self.stack.num_layers() {
            h = self.stack.layer_forward(fwd, h, l)?;
        }
        let logits = self.stack.classifier_forward(fwd, h)?;
        fwd.tape.softmax_last(logits)
    }

    /// Plain single-branch forward to probabilities.
    pub fn full_forward(&self, fwd: &mut Forward, x: TensorId) -> Result<TensorId> {
        let z = self.forward_to(fwd, x, self.stack.num_layers() - 1)?;
        self.forward_from(fwd, z, self.stack.num_layers() - 1)
    }

    /// The two-branch pass at the configured hook position. Per batch:
    /// trunk to `z`; channel statistics observed into the EMA (before the
    /// perturbation uses it); augmented feature; both heads.
    pub fn two_branch(
        &self,
        fwd: &mut Forward,
        x: TensorId,
        aug: &mut AugState,
        update_ema: bool,
    ) -> Result<TwoBranch> {
        let i = self.aug_position;
        let z = self.forward_to(fwd, x, i)?;

        let mu_t = augment::channel_mean(&mut fwd.tape, z)?;
        let mu_c = fwd.tape.data(mu_t).to_vec();
        let batch = fwd.tape.shape(z)[0];
        let channels = fwd.tape.shape(z)[1];
        let ds = augment::delta_sigma(&mu_c, batch, channels);
        if update_ema {
            aug.observe(&ds);
        }

        let z_aug = augment::fata_augment(&mut fwd.tape, z, aug)?;

        let p_orig = self.forward_from(fwd, z, i)?;
        let p_aug = self.forward_from(fwd, z_aug, i)?;
        let y_hat = fwd.tape.argmax_axis(p_orig, 1);
        let p_orig_values = fwd.tape.data(p_orig).to_vec();

        Ok(TwoBranch {
            z,
            p_orig,
            p_aug,
            p_orig_values,
            y_hat,
            mu_c,
            delta_sigma: ds,
        })
    }
}
