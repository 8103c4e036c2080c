use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Tensor;

/// Identifies where a window came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowTag {
    pub date_index: usize,
    pub session_id: String,
    pub start_bin: usize,
}

/// One co-registered `S × C` input and `S × 2` target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub tag: WindowTag,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub samples: Vec<Window>,
    pub steps: usize,
    pub stride: usize,
    pub channels: usize,
}

/// A contiguous run of preprocessed bins from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPart {
    pub session_id: String,
    pub date_index: usize,
    /// Session bin index of the first row.
    pub start_bin: usize,
    /// `T × C` model inputs.
    pub inputs: Tensor<f64>,
    /// `T × 2` targets.
    pub targets: Tensor<f64>,
}

impl SeriesPart {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `[from, to)` as a new part with adjusted origin.
    pub fn sub_range(&self, from: usize, to: usize) -> SeriesPart {
        let c = self.channels();
        SeriesPart {
            session_id: self.session_id.clone(),
            date_index: self.date_index,
            start_bin: self.start_bin + from,
            inputs: Tensor::from_vec(&[to - from, c], self.inputs.data()[from * c..to * c].to_vec())
                .expect("row range"),
            targets: Tensor::from_vec(&[to - from, 2], self.targets.data()[from * 2..to * 2].to_vec())
                .expect("row range"),
        }
    }
}

impl WindowSet {
    pub fn empty(steps: usize, stride: usize, channels: usize) -> Self {
        Self {
            samples: Vec::new(),
            steps,
            stride,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: WindowSet) {
        self.samples.extend(other.samples);
    }

    /// Window start bins in order.
    pub fn starts(&self) -> Vec<usize> {
        self.samples.iter().map(|w| w.tag.start_bin).collect()
    }
}

/// Start offsets `0, stride, 2·stride, …` with `start + steps ≤ total`.
pub fn window_starts(total: usize, steps: usize, stride: usize) -> Result<Vec<usize>, DataError> {
    if steps == 0 || stride == 0 {
        return Err(DataError::Invalid(format!(
            "window length {steps} and stride {stride} must be positive"
        )));
    }
    if steps > total {
        return Err(DataError::WindowTooLong { steps, total });
    }
    Ok((0..=total - steps).step_by(stride).collect())
}

/// Cuts a series into windows of `steps` bins every `stride` bins.
pub fn make_windows(part: &SeriesPart, steps: usize, stride: usize) -> Result<WindowSet, DataError> {
    let c = part.channels();
    let starts = window_starts(part.len(), steps, stride)?;
    let samples = starts
        .into_iter()
        .map(|s| Window {
            tag: WindowTag {
                date_index: part.date_index,
                session_id: part.session_id.clone(),
                start_bin: part.start_bin + s,
            },
            input: part.inputs.data()[s * c..(s + steps) * c].to_vec(),
            target: part.targets.data()[s * 2..(s + steps) * 2].to_vec(),
        })
        .collect();
    Ok(WindowSet {
        samples,
        steps,
        stride,
        channels: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(t: usize) -> SeriesPart {
        SeriesPart {
            session_id: "a".into(),
            date_index: 0,
            start_bin: 0,
            inputs: Tensor::from_vec(&[t, 1], (0..t).map(|i| i as f64).collect()).unwrap(),
            targets: Tensor::from_vec(&[t, 2], (0..2 * t).map(|i| i as f64).collect()).unwrap(),
        }
    }

    #[test]
    fn non_overlapping_tiling() {
        let w = make_windows(&part(10), 4, 4).unwrap();
        assert_eq!(w.starts(), vec![0, 4]);
    }

    #[test]
    fn overlapping_tiling() {
        let w = make_windows(&part(10), 4, 2).unwrap();
        assert_eq!(w.starts(), vec![0, 2, 4, 6]);
        assert_eq!(w.samples[1].input, vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(w.samples[1].target[..2], [4.0, 5.0]);
    }

    #[test]
    fn too_long_window_reports_both_values() {
        let err = make_windows(&part(3), 4, 4).unwrap_err();
        assert!(matches!(err, DataError::WindowTooLong { steps: 4, total: 3 }));
    }

    #[test]
    fn tags_carry_origin() {
        let mut p = part(10);
        p.start_bin = 100;
        let w = make_windows(&p, 5, 5).unwrap();
        assert_eq!(w.starts(), vec![100, 105]);
    }
}
