use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Groups length-sorted items under a padded-size budget:
/// `items · max_len ≤ budget`. An item longer than the budget forms its
/// own batch.
pub fn group_by_budget(lengths: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        let longest = lengths[i].max(1);
        if !cur.is_empty() && (cur.len() + 1) * longest > budget {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn batch_count(lengths: &[usize], budget: usize) -> usize {
    group_by_budget(lengths, budget).len()
}

/// Smallest budget yielding at most `count` batches.
fn min_budget_for(lengths: &[usize], count: usize, hi: usize) -> usize {
    let (mut lo, mut hi) = (1usize, hi);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if batch_count(lengths, mid) <= count {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Budget whose mean batch size is closest to `avg_batch_size`. Among
/// budgets giving the same batch count, the one closest to
/// `avg_batch_size × mean length` is chosen.
pub fn calibrate_budget(lengths: &[usize], avg_batch_size: usize) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if avg_batch_size == 0 {
        return Err(Error::Config("average batch size must be positive".into()));
    }
    let n = lengths.len();
    let max_len = lengths.iter().copied().max().unwrap_or(1).max(1);
    let hi = n * max_len;
    let target = (n as f64 / avg_batch_size as f64).round().max(1.0) as usize;
    let ideal = (avg_batch_size as f64 * lengths.iter().sum::<usize>() as f64 / n as f64).round() as usize;
    let mut best: Option<(f64, usize, usize)> = None;
    for count in [target.saturating_sub(1), target, target + 1] {
        if count == 0 {
            continue;
        }
        let lo_b = min_budget_for(lengths, count, hi);
        let got = batch_count(lengths, lo_b);
        // Largest budget with the same batch count.
        let hi_b = if got <= 1 {
            hi
        } else {
            min_budget_for(lengths, got - 1, hi).saturating_sub(1).max(lo_b)
        };
        let budget = ideal.clamp(lo_b, hi_b);
        let err = (n as f64 / got as f64 - avg_batch_size as f64).abs();
        let dist = budget.abs_diff(ideal);
        if best.is_none_or(|(e, d, _)| err < e - 1e-12 || ((err - e).abs() <= 1e-12 && dist < d)) {
            best = Some((err, dist, budget));
        }
    }
    Ok(best.expect("at least one candidate").2)
}

/// Length-sorted batches with a calibrated budget.
pub fn make_batches(lengths: &[usize], avg_batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let budget = calibrate_budget(lengths, avg_batch_size)?;
    Ok(group_by_budget(lengths, budget))
}

/// Batch visiting order for one epoch.
pub fn shuffled_order(batches: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batches).collect();
    order.shuffle(rng);
    order
}
