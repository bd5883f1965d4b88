//! Synthetic clip generator. Each class gets a random spatial prototype and
//! a random drift direction; clips are the prototype slid along the drift
//! over time, plus Gaussian noise. Separability is controlled by the ratio
//! of signal to noise scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::ClipFeatures;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_signal_scale: f64,
    pub noise_scale: f64,
    pub temporal_drift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Companion of the default desk-scale model config.
    pub fn desk_default() -> Self {
        SyntheticSpec {
            num_classes: 7,
            clips_per_class: 4,
            frames: 8,
            height: 4,
            width: 4,
            channels: 16,
            class_signal_scale: 1.0,
            noise_scale: 0.1,
            temporal_drift: 0.1,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("clips_per_class", self.clips_per_class),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("class_signal_scale", self.class_signal_scale),
            ("noise_scale", self.noise_scale),
            ("temporal_drift", self.temporal_drift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Labeled clips, class-major: all clips of class 0, then class 1, and so
/// on.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<ClipFeatures>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `(frames, height, width, channels)` of the clips.
    pub fn geometry(&self) -> (usize, usize, usize, usize) {
        let c = &self.clips[0];
        (c.frames(), c.height(), c.width(), c.channels())
    }
}

/// Generates the dataset described by `spec`. Deterministic: the same spec
/// always yields bit-identical clips.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let frame_elems = spec.height * spec.width * spec.channels;

    let mut clips = Vec::with_capacity(spec.num_classes * spec.clips_per_class);
    let mut labels = Vec::with_capacity(clips.capacity());
    for class in 0..spec.num_classes {
        let prototype: Vec<f64> = (0..frame_elems).map(|_| normal.sample(&mut rng)).collect();
        let drift: Vec<f64> = (0..frame_elems).map(|_| normal.sample(&mut rng)).collect();
        for _ in 0..spec.clips_per_class {
            let mut data = Vec::with_capacity(spec.frames * frame_elems);
            for t in 0..spec.frames {
                let slide = t as f64 * spec.temporal_drift;
                for e in 0..frame_elems {
                    let noise: f64 = normal.sample(&mut rng);
                    data.push(
                        spec.class_signal_scale * (prototype[e] + slide * drift[e])
                            + spec.noise_scale * noise,
                    );
                }
            }
            let shape = vec![spec.frames, spec.height, spec.width, spec.channels];
            clips.push(ClipFeatures::new(Tensor::new(shape, data)?)?);
            labels.push(class);
        }
    }
    Ok(Dataset {
        clips,
        labels,
        num_classes: spec.num_classes,
    })
}
