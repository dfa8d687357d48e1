use alloc::format;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Mode;
use crate::{Error, Result, Scalar};

/// Per-document probabilities of zeroing an entire modality during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityDropout {
    pub context: f64,
    pub image: f64,
    pub text: f64,
}

impl Default for ModalityDropout {
    fn default() -> Self {
        Self::NONE
    }
}

/// Which modalities are zeroed for one document.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModalityMask {
    pub context: bool,
    pub image: bool,
    pub text: bool,
}

impl ModalityDropout {
    pub const NONE: Self = Self { context: 0.0, image: 0.0, text: 0.0 };
    /// Context 0.5, image 0, text 0.5.
    pub const MARKETPLACE: Self = Self { context: 0.5, image: 0.0, text: 0.5 };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("context", self.context), ("image", self.image), ("text", self.text)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Draws three uniforms (context, image, text) in train mode; inference
    /// never masks and consumes no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mode: Mode) -> ModalityMask {
        if mode == Mode::Infer {
            return ModalityMask::default();
        }
        let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        ModalityMask { context: u[0] < self.context, image: u[1] < self.image, text: u[2] < self.text }
    }
}

/// Zeroes the masked modality outputs of one document in place.
pub fn apply_modality_dropout<T: Scalar, R: Rng + ?Sized>(
    context_token: &mut [T],
    image_token: &mut [T],
    text_tokens: &mut [T],
    dropout: &ModalityDropout,
    rng: &mut R,
    mode: Mode,
) -> ModalityMask {
    let mask = dropout.sample(rng, mode);
    for (masked, slot) in [(mask.context, context_token), (mask.image, image_token), (mask.text, text_tokens)] {
        if masked {
            slot.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    mask
}
