use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::DataError;
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Snippet indices for one video.
///
/// Train mode splits `[0, t_in)` into `t_out` integer strata
/// `[floor(i t_in / t_out), floor((i+1) t_in / t_out))` and draws one index from each;
/// an empty stratum (only possible when `t_in < t_out`) yields its lower bound. Eval mode
/// returns the identity.
pub fn sample_indices<R: Rng>(
    t_in: usize,
    t_out: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Vec<usize> {
    assert!(t_in >= 1, "sample_indices needs at least one snippet");
    match mode {
        SampleMode::Eval => (0..t_in).collect(),
        SampleMode::Train => (0..t_out)
            .map(|i| {
                let lo = i * t_in / t_out;
                let hi = (i + 1) * t_in / t_out;
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect(),
    }
}

pub fn gather_rows<S: Scalar>(x: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let f = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * f);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), f, data).expect("gathered rows")
}

/// Samples snippets and returns them with the index map back into the input.
pub fn sample_snippets<S: Scalar, R: Rng>(
    x: &Tensor<S>,
    t_out: usize,
    mode: SampleMode,
    rng: &mut R,
) -> (Tensor<S>, Vec<usize>) {
    let idx = sample_indices(x.shape()[0], t_out, mode, rng);
    match mode {
        SampleMode::Eval => (x.clone(), idx),
        SampleMode::Train => (gather_rows(x, &idx), idx),
    }
}

/// Video indices of one training batch. `pairs` index into `videos` and carry the classes
/// both members share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub videos: Vec<usize>,
    pub pairs: Vec<(usize, usize, Vec<usize>)>,
}

/// Draws `num_pairs` same-class pairs of distinct videos, then fills up to `batch_size`
/// with videos sampled without replacement from the rest.
///
/// Pair classes are distinct and chosen uniformly among classes that still have two
/// unused videos. Pairs occupy batch positions `(0, 1), (2, 3), ...`.
pub fn build_batch<R: Rng>(
    labels: &[Vec<usize>],
    batch_size: usize,
    num_pairs: usize,
    rng: &mut R,
) -> Result<Batch, DataError> {
    if 2 * num_pairs > batch_size {
        return Err(DataError::Config(format!(
            "{} pairs do not fit in a batch of {}",
            num_pairs, batch_size
        )));
    }
    let num_classes = labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ls) in labels.iter().enumerate() {
        for &c in ls {
            by_class[c].push(i);
        }
    }
    let mut classes: Vec<usize> = (0..num_classes)
        .filter(|&c| by_class[c].len() >= 2)
        .collect();
    classes.shuffle(rng);

    let mut used = vec![false; labels.len()];
    let mut videos = Vec::with_capacity(batch_size);
    let mut pairs = Vec::with_capacity(num_pairs);
    for c in classes {
        if pairs.len() == num_pairs {
            break;
        }
        let free: Vec<usize> = by_class[c].iter().copied().filter(|&v| !used[v]).collect();
        if free.len() < 2 {
            continue;
        }
        let chosen: Vec<usize> = free.choose_multiple(rng, 2).copied().collect();
        let (m, n) = (chosen[0], chosen[1]);
        used[m] = true;
        used[n] = true;
        let shared: Vec<usize> = labels[m]
            .iter()
            .copied()
            .filter(|c| labels[n].contains(c))
            .collect();
        pairs.push((videos.len(), videos.len() + 1, shared));
        videos.push(m);
        videos.push(n);
    }
    if pairs.len() < num_pairs {
        return Err(DataError::Config(format!(
            "need {} same-class pairs but only {} can be formed",
            num_pairs,
            pairs.len()
        )));
    }
    let rest: Vec<usize> = (0..labels.len()).filter(|&v| !used[v]).collect();
    let fill = (batch_size - videos.len()).min(rest.len());
    videos.extend(rest.choose_multiple(rng, fill).copied());
    Ok(Batch { videos, pairs })
}
