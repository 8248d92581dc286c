use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One residual stage: a single block of two convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kernel: usize,
    pub width: usize,
    pub stride: usize,
}

const fn stage(kernel: usize, width: usize, stride: usize) -> StageSpec {
    StageSpec {
        kernel,
        width,
        stride,
    }
}

/// Shape of the convolutional regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_size: usize,
    pub subsample: usize,
    pub initial_kernel: usize,
    pub initial_width: usize,
    pub stages: Vec<StageSpec>,
    pub fc_widths: Vec<usize>,
    pub outputs: usize,
    /// Must stay false; the architecture has no normalization layers.
    #[serde(default)]
    pub batch_norm: bool,
}

impl NetConfig {
    /// Full-size network: 192 px input, 6x6 subsampling, six residual stages.
    pub fn full() -> Self {
        NetConfig {
            input_size: 192,
            subsample: 6,
            initial_kernel: 5,
            initial_width: 128,
            stages: vec![
                stage(5, 128, 1),
                stage(3, 128, 2),
                stage(3, 256, 2),
                stage(3, 256, 2),
                stage(3, 256, 2),
                stage(2, 256, 2),
            ],
            fc_widths: vec![256, 256, 128],
            outputs: 8,
            batch_norm: false,
        }
    }

    /// CPU-sized network: 48 px input, 3x3 subsampling, widths divided by
    /// four and four residual stages.
    pub fn desk() -> Self {
        NetConfig {
            input_size: 48,
            subsample: 3,
            initial_kernel: 5,
            initial_width: 32,
            stages: vec![stage(3, 32, 2), stage(3, 64, 2), stage(3, 64, 2), stage(2, 64, 2)],
            fc_widths: vec![64, 64, 32],
            outputs: 8,
            batch_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_norm {
            return Err(Error::param("batch normalization is not supported"));
        }
        if self.subsample == 0 || self.input_size == 0 || self.input_size % self.subsample != 0 {
            return Err(Error::param(format!(
                "input size {} not divisible by subsample factor {}",
                self.input_size, self.subsample
            )));
        }
        if self.initial_kernel == 0 || self.initial_width == 0 || self.outputs == 0 {
            return Err(Error::param("zero-sized layer"));
        }
        if self.stages.iter().any(|s| s.kernel == 0 || s.width == 0 || s.stride == 0) {
            return Err(Error::param("zero-sized residual stage"));
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::param("zero-width dense layer"));
        }
        let mut hw = self.input_size / self.subsample;
        for s in &self.stages {
            if s.stride > 1 && hw % s.stride != 0 {
                return Err(Error::param(format!("stride {} does not divide spatial size {hw}", s.stride)));
            }
            hw /= s.stride;
        }
        if hw != 1 {
            return Err(Error::param(format!("stages end at {hw}x{hw}, expected 1x1")));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Number of constant-rate stages between the endpoints.
    pub lr_stages: usize,
    /// Fractions of the whole run at which each stage but the last ends,
    /// increasing in (0, 1). Empty means equal-length stages.
    #[serde(default)]
    pub lr_stage_ends: Vec<f64>,
    pub batch_size: usize,
    /// Single-patch steps.
    pub steps: usize,
    /// Multi-patch fine-tuning steps run after `steps`; zero disables.
    pub multi_steps: usize,
    pub multi_patches: usize,
    pub validate_every: usize,
    pub validation_groups: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_start: 1e-4,
            lr_end: 1e-6,
            lr_stages: 3,
            lr_stage_ends: Vec::new(),
            batch_size: 32,
            steps: 20_000,
            multi_steps: 0,
            multi_patches: 4,
            validate_every: 500,
            validation_groups: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::param("learning rates must satisfy start >= end > 0"));
        }
        if self.lr_stages == 0 || self.batch_size == 0 || self.multi_patches == 0 {
            return Err(Error::param("stage count, batch size and patch count must be positive"));
        }
        let ends = &self.lr_stage_ends;
        if !ends.is_empty()
            && (ends.len() + 1 != self.lr_stages
                || ends.windows(2).any(|w| w[1] <= w[0])
                || ends.iter().any(|f| !(*f > 0.0 && *f < 1.0)))
        {
            return Err(Error::param("stage ends must be lr_stages - 1 increasing fractions in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::param("Adam moments must lie in [0, 1) and epsilon > 0"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps + self.multi_steps
    }

    /// Learning rate at a 0-based step over the whole run. Stage `s` of
    /// `S` uses `lr_start · (lr_end/lr_start)^(s/(S−1))`, so the first step
    /// runs at `lr_start` and the last at `lr_end`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let total = self.total_steps().max(1);
        if self.lr_stages == 1 {
            return self.lr_start;
        }
        let step = step.min(total - 1);
        let s = if self.lr_stage_ends.is_empty() {
            (step * self.lr_stages / total).min(self.lr_stages - 1)
        } else {
            let at = step as f64 / total as f64;
            self.lr_stage_ends.iter().take_while(|&&f| at >= f).count()
        };
        let t = s as f64 / (self.lr_stages - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}
