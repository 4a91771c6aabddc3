use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::{DatasetManifest, SplitTag};
use crate::error::{Error, Result};

/// Smallest per-class count for which splitting is stratified.
pub const MIN_STRATIFY_COUNT: usize = 3;

/// Partitions `manifest` into train, validation and test sets.
///
/// Sizes are `⌊n·f_val⌋` and `⌊n·f_test⌋`, with the rest going to training.
/// When every present class has at least [`MIN_STRATIFY_COUNT`] samples, the
/// seeded shuffle is done per class and the classes are interleaved, so each
/// split sees the label distribution of the whole set.
pub fn split(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<[DatasetManifest; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must all be positive and sum to 1"
        )));
    }
    let n = manifest.len();
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let n_test = (n as f64 * fractions[2]).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = manifest.class_counts();
    let stratify = counts.iter().all(|&c| c == 0 || c >= MIN_STRATIFY_COUNT);
    let order: Vec<usize> = if stratify {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.classes];
        for (i, s) in manifest.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        for members in &mut by_class {
            members.shuffle(&mut rng);
        }
        interleave(&by_class, n)
    } else {
        log::warn!("some class has fewer than {MIN_STRATIFY_COUNT} samples; splitting without stratification");
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all
    };

    let pick = |idx: &[usize], tag| {
        let samples = idx.iter().map(|&i| manifest.samples[i].clone()).collect();
        DatasetManifest {
            samples,
            classes: manifest.classes,
            split: Some(tag),
        }
    };
    let val = pick(&order[..n_val], SplitTag::Val);
    let test = pick(&order[n_val..n_val + n_test], SplitTag::Test);
    let train = pick(&order[n_val + n_test..], SplitTag::Train);
    Ok([train, val, test])
}

/// Orders samples so that every prefix has class proportions as close as
/// possible to the whole: each sample is placed at its fractional position
/// `(k + 0.5) / count` within its class, and positions are merged.
fn interleave(by_class: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut keyed = Vec::with_capacity(n);
    for (c, members) in by_class.iter().enumerate() {
        let count = members.len() as f64;
        for (k, &i) in members.iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / count, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}
