use super::session::{check_ascending, whole_bins, BinnedSession, BINS_PER_S, BIN_WIDTH_MS};
use super::{DataError, RawSession};

/// Counts events per channel in half-open 10 ms bins `[t·10ms, (t+1)·10ms)`.
///
/// Events in the trailing partial bin are dropped. The returned session has
/// no velocity yet.
pub fn bin_spikes(raw: &RawSession) -> Result<BinnedSession, DataError> {
    let bins = whole_bins(raw.duration_s);
    let channels = raw.num_channels();
    let mut counts = vec![0u32; bins * channels];
    for (c, events) in raw.spike_events.iter().enumerate() {
        check_ascending(c, events)?;
        for &t in events {
            if t < 0.0 {
                return Err(DataError::EventOutOfRange {
                    channel: c,
                    time_s: t,
                    duration_s: raw.duration_s,
                });
            }
            let b = (t * BINS_PER_S + 1e-9).floor() as usize;
            if b >= bins {
                break;
            }
            counts[b * channels + c] += 1;
        }
    }
    Ok(BinnedSession {
        session_id: raw.session_id.clone(),
        date_index: raw.date_index,
        channels,
        counts,
        velocity: Vec::new(),
        bin_width_ms: BIN_WIDTH_MS,
        norm: None,
        smoothed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(events: Vec<Vec<f64>>, duration_s: f64) -> RawSession {
        RawSession {
            session_id: "s".into(),
            date_index: 0,
            spike_events: events,
            kinematics: Vec::new(),
            duration_s,
        }
    }

    #[test]
    fn counts_events_per_bin() {
        let b = bin_spikes(&raw(vec![vec![0.001, 0.004, 0.012]], 0.02)).unwrap();
        assert_eq!(b.counts, vec![2, 1]);
    }

    #[test]
    fn empty_channel_is_zero_column() {
        let b = bin_spikes(&raw(vec![vec![0.001], vec![]], 0.03)).unwrap();
        assert_eq!(b.num_bins(), 3);
        assert!((0..3).all(|t| b.count(t, 1) == 0));
    }

    #[test]
    fn boundary_event_lands_in_next_bin() {
        let b = bin_spikes(&raw(vec![vec![0.010]], 0.02)).unwrap();
        assert_eq!(b.counts, vec![0, 1]);
    }

    #[test]
    fn trailing_partial_bin_is_dropped() {
        let b = bin_spikes(&raw(vec![vec![0.005, 0.021, 0.024]], 0.025)).unwrap();
        assert_eq!(b.counts, vec![1, 0]);
    }

    #[test]
    fn unordered_events_name_the_channel() {
        let err = bin_spikes(&raw(vec![vec![0.001], vec![0.005, 0.002]], 0.02)).unwrap_err();
        assert!(matches!(err, DataError::NonAscending { channel: 1 }));
    }
}
