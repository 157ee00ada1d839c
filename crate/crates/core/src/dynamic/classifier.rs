use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::flow::{extract_features, LossFlowRecord};
use super::gmm::{classify, fit_gmm, EmOptions, GmmModel, Motion};
use crate::error::Result;
use crate::scene::BACKGROUND_ID;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Posterior threshold for a dynamic label.
    pub theta: f64,
    /// Number of frames whose features are pooled into one fit, the current one included.
    pub history_frames: usize,
    /// Below this many pooled feature vectors every object is labeled static.
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            theta: 0.999,
            history_frames: 1,
            min_samples: 2,
            seed: EmOptions::default().seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameClassification {
    /// Labels for every object (background excluded) with a flow this frame.
    pub labels: BTreeMap<u32, Motion>,
    pub posteriors: BTreeMap<u32, f64>,
    pub features: BTreeMap<u32, [f64; 2]>,
    pub model: Option<GmmModel>,
    pub pooled_samples: usize,
}

/// Fits the mixture to the loss-flow features of the background and all objects,
/// pooled over a short window of recent frames, and labels this frame's objects.
#[derive(Debug, Clone)]
pub struct MotionClassifier {
    config: ClassifierConfig,
    history: VecDeque<Vec<[f64; 2]>>,
}

impl MotionClassifier {
    pub fn new(config: ClassifierConfig) -> Self {
        Self {
            config,
            history: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classify_frame(&mut self, flows: &[LossFlowRecord]) -> Result<FrameClassification> {
        let mut features = BTreeMap::new();
        for r in flows {
            features.insert(r.object_id, extract_features(r)?);
        }
        let current: Vec<[f64; 2]> = features.values().copied().collect();
        let keep = self.config.history_frames.max(1) - 1;
        while self.history.len() > keep {
            self.history.pop_front();
        }
        let mut pool: Vec<[f64; 2]> = self.history.iter().flatten().copied().collect();
        pool.extend_from_slice(&current);
        self.history.push_back(current);
        if keep == 0 {
            self.history.clear();
        }

        let objects = features.iter().filter(|(id, _)| **id != BACKGROUND_ID);
        let model = if pool.len() >= self.config.min_samples.max(2) {
            let opts = EmOptions {
                seed: self.config.seed,
                ..EmOptions::default()
            };
            Some(fit_gmm(&pool, &opts)?)
        } else {
            None
        };
        let mut labels = BTreeMap::new();
        let mut posteriors = BTreeMap::new();
        for (&id, f) in objects {
            let (label, p) = match &model {
                Some(m) => (classify(m, f, self.config.theta), m.dynamic_posterior(f)),
                None => (Motion::Static, 0.0),
            };
            labels.insert(id, label);
            posteriors.insert(id, p);
        }
        Ok(FrameClassification {
            labels,
            posteriors,
            features,
            model,
            pooled_samples: pool.len(),
        })
    }
}
