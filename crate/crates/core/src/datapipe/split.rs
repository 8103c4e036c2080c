use std::ops::Range;

use super::WindowSet;

/// Fraction of each session's bins used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Chronological train/test bin ranges: the first `⌊fraction·T⌋` bins train.
pub fn split_bins(total: usize, train_fraction: f64) -> (Range<usize>, Range<usize>) {
    let cut = ((total as f64) * train_fraction + 1e-9).floor() as usize;
    let cut = cut.min(total);
    (0..cut, cut..total)
}

/// Assigns windows (tagged with session bin offsets) to train or test by
/// the split boundary; windows straddling it are dropped.
pub fn split_train_test(windows: WindowSet, total_bins: usize, train_fraction: f64) -> (WindowSet, WindowSet) {
    let (train_r, _) = split_bins(total_bins, train_fraction);
    let boundary = train_r.end;
    let steps = windows.steps;
    let mut train = WindowSet::empty(steps, windows.stride, windows.channels);
    let mut test = WindowSet::empty(steps, windows.stride, windows.channels);
    for w in windows.samples {
        let start = w.tag.start_bin;
        if start + steps <= boundary {
            train.samples.push(w);
        } else if start >= boundary {
            test.samples.push(w);
        }
    }
    (train, test)
}
