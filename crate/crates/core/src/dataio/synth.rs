use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::records::{DatasetManifest, KeypointSequence};
use crate::error::{Error, Result};
use crate::graphnet::SkeletonTopology;

/// Parameters of the synthetic gesture generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub n_nodes: usize,
    /// Inclusive range of raw clip lengths.
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of the white noise added to every coordinate,
    /// relative to a trajectory of unit half-extent.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            samples_per_class: 40,
            n_nodes: 10,
            min_len: 24,
            max_len: 48,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synth.classes = {} (need at least 2)", self.classes)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("synth.samples_per_class must be positive".into()));
        }
        if self.n_nodes < 2 {
            return Err(Error::Config("synth.n_nodes must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "synth length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("synth.noise_sigma = {} must be ≥ 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// The chain skeleton the generated joints live on.
    pub fn topology(&self) -> Result<SkeletonTopology> {
        SkeletonTopology::chain(self.n_nodes)
    }
}

/// Shape of one class's motion. Joint `j` at normalized time `s ∈ [0, 1]` is
///
/// ```text
/// x = j·spacing + ax · sin(2π fx s + px + j·lag)
/// y =             ay · sin(2π fy s + py + j·lag)
/// ```
#[derive(Clone, Debug, PartialEq)]
struct Family {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    ax: f64,
    ay: f64,
    lag: f64,
}

const SPACING: f64 = 0.25;

impl Family {
    fn draw(rng: &mut ChaCha8Rng, class: usize) -> Self {
        let base = 0.5 + 0.5 * (class % 4) as f64;
        Family {
            fx: base + rng.gen_range(0.0..0.25),
            fy: rng.gen_range(0.5..2.5),
            px: rng.gen_range(0.0..TAU),
            py: rng.gen_range(0.0..TAU),
            ax: rng.gen_range(0.3..1.0),
            ay: rng.gen_range(0.3..1.0),
            lag: rng.gen_range(-1.0..1.0),
        }
    }

    fn point(&self, joint: usize, s: f64) -> [f64; 2] {
        let j = joint as f64;
        [
            j * SPACING + self.ax * (TAU * self.fx * s + self.px + j * self.lag).sin(),
            self.ay * (TAU * self.fy * s + self.py + j * self.lag).sin(),
        ]
    }
}

/// Generates `classes × samples_per_class` clips. Each sample gets a random
/// length, a random placement and size in the image plane, random confidence
/// values and white coordinate noise. Output is a pure function of `spec`.
pub fn synthesize(spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let families: Vec<Family> = (0..spec.classes).map(|c| Family::draw(&mut rng, c)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for (label, family) in families.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let scale = rng.gen_range(50.0..200.0);
            let origin = [rng.gen_range(100.0..500.0), rng.gen_range(100.0..400.0)];
            let mut frames = Vec::with_capacity(len);
            for t in 0..len {
                let s = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
                let frame = (0..spec.n_nodes)
                    .map(|j| {
                        let p = family.point(j, s);
                        let x = p[0] + noise.sample(&mut rng);
                        let y = p[1] + noise.sample(&mut rng);
                        [origin[0] + scale * x, origin[1] + scale * y, rng.gen_range(0.5..1.0)]
                    })
                    .collect();
                frames.push(frame);
            }
            samples.push(KeypointSequence {
                id: format!("synth-{label:03}-{i:04}"),
                label,
                frames,
            });
        }
    }
    DatasetManifest::new(samples, spec.classes, None)
}
