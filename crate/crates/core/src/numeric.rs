//! Exact floating-point reductions used by parameter averaging.

use std::cmp::Ordering;

/// Adds `x` into a non-overlapping expansion (Shewchuk's grow-expansion).
fn grow(partials: &mut Vec<f64>, mut x: f64) {
    let mut i = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[i] = lo;
            i += 1;
        }
        x = hi;
    }
    partials.truncate(i);
    partials.push(x);
}

/// Correctly rounded value of an expansion produced by [`grow`].
fn round_expansion(partials: &[f64]) -> f64 {
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Half-way case: the remaining partials push the result away from the tie.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Correctly rounded sum of `values`.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials = Vec::new();
    for v in values {
        grow(&mut partials, v);
    }
    round_expansion(&partials)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Sign of `2·S − n·(2q + offset)` where `S` is the exact sum held in `partials`.
fn compare_midpoint(partials: &[f64], n: f64, q: f64, offset: f64) -> Ordering {
    let mut acc = Vec::with_capacity(partials.len() + 4);
    for &p in partials {
        grow(&mut acc, 2.0 * p);
    }
    let (a, b) = two_prod(n, 2.0 * q);
    let (c, d) = two_prod(n, offset);
    for t in [-a, -b, -c, -d] {
        grow(&mut acc, t);
    }
    round_expansion(&acc).partial_cmp(&0.0).unwrap_or(Ordering::Equal)
}

fn is_even(q: f64) -> bool {
    q.to_bits() & 1 == 0
}

/// Correctly rounded (round-half-even) arithmetic mean of `values`.
///
/// The result does not depend on the order of `values`, and the mean of `n`
/// copies of `v` is exactly `v`. Inputs must be finite and nonempty.
pub fn exact_mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of no values");
    let first = values[0];
    if values.iter().all(|&v| v.to_bits() == first.to_bits()) {
        return first;
    }
    let mut partials = Vec::with_capacity(values.len());
    for &v in values {
        grow(&mut partials, v);
    }
    let n = values.len() as f64;
    let mut q = round_expansion(&partials) / n;
    loop {
        let up = q.next_up();
        match compare_midpoint(&partials, n, q, up - q) {
            Ordering::Greater => {
                q = up;
                continue;
            }
            Ordering::Equal => return if is_even(q) { q } else { up },
            Ordering::Less => {}
        }
        let down = q.next_down();
        match compare_midpoint(&partials, n, q, down - q) {
            Ordering::Less => {
                q = down;
                continue;
            }
            Ordering::Equal => return if is_even(q) { q } else { down },
            Ordering::Greater => return q,
        }
    }
}
