use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64 + 1);
    rng
}

/// Drop classes below `lower`; subsample classes above `upper` without
/// replacement, keeping the original relative order of survivors.
///
/// Returns `(original class index, samples)` for each kept class.
pub fn balance_dataset<T>(
    classes: Vec<Vec<T>>,
    lower: usize,
    upper: usize,
    seed: u64,
) -> Result<Vec<(usize, Vec<T>)>> {
    if lower > upper {
        return Err(Error::Config(format!(
            "lower limit {lower} exceeds upper limit {upper}"
        )));
    }
    let mut kept = Vec::new();
    for (c, samples) in classes.into_iter().enumerate() {
        if samples.len() < lower {
            continue;
        }
        if samples.len() <= upper {
            kept.push((c, samples));
            continue;
        }
        let mut rng = class_rng(seed, c);
        let mut pick = index::sample(&mut rng, samples.len(), upper).into_vec();
        pick.sort_unstable();
        let mut pick = pick.into_iter().peekable();
        let chosen = samples
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| {
                if pick.peek() == Some(&i) {
                    pick.next();
                    Some(s)
                } else {
                    None
                }
            })
            .collect();
        kept.push((c, chosen));
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Stratified shuffle split. Validation and test sizes are floored, the
/// remainder goes to train. Classes with fewer than 3 samples go to train.
pub fn split_dataset<T>(
    samples: Vec<T>,
    label_of: impl Fn(&T) -> u32,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Split<T>> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || ((rt + rv + rs) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios must be in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_class: std::collections::BTreeMap<u32, Vec<T>> = Default::default();
    for s in samples {
        by_class.entry(label_of(&s)).or_default().push(s);
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (label, mut group) in by_class {
        let n = group.len();
        if n < 3 {
            log::warn!("class {label} has only {n} samples; all assigned to train");
            out.train.extend(group);
            continue;
        }
        group.shuffle(&mut class_rng(seed, label as usize));
        let n_val = (n as f64 * rv + 1e-9).floor() as usize;
        let n_test = (n as f64 * rs + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        let mut it = group.into_iter();
        out.train.extend(it.by_ref().take(n_train));
        out.val.extend(it.by_ref().take(n_val));
        out.test.extend(it);
    }
    Ok(out)
}
