//! Session bundle directories (`ndbench-session-v1`):
//!
//! ```text
//! <dir>/manifest.json    {format, session_id, date_index, num_channels, duration_s, kin_rate_hz}
//! <dir>/spikes.csv       channel,time_s
//! <dir>/kinematics.csv   t_s,finger_x,finger_y,cursor_x,cursor_y,target_x,target_y
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::session::{check_ascending, KinematicSample, KIN_RATE_HZ};
use super::{DataError, RawSession};

pub const SESSION_FORMAT: &str = "ndbench-session-v1";
const SPIKES_HEADER: [&str; 2] = ["channel", "time_s"];
const KIN_HEADER: [&str; 7] = [
    "t_s", "finger_x", "finger_y", "cursor_x", "cursor_y", "target_x", "target_y",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub format: String,
    pub session_id: String,
    pub date_index: usize,
    pub num_channels: usize,
    pub duration_s: f64,
    pub kin_rate_hz: f64,
}

fn required(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(DataError::MissingFile(p))
    }
}

pub fn save_session(raw: &RawSession, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let manifest = SessionManifest {
        format: SESSION_FORMAT.to_string(),
        session_id: raw.session_id.clone(),
        date_index: raw.date_index,
        num_channels: raw.num_channels(),
        duration_s: raw.duration_s,
        kin_rate_hz: KIN_RATE_HZ,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;

    let mut w = csv::Writer::from_path(dir.join("spikes.csv"))?;
    w.write_record(SPIKES_HEADER)?;
    for (c, events) in raw.spike_events.iter().enumerate() {
        let c = c.to_string();
        for t in events {
            w.write_record([c.as_str(), t.to_string().as_str()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("kinematics.csv"))?;
    w.write_record(KIN_HEADER)?;
    for k in &raw.kinematics {
        let row = [
            k.t_s, k.finger[0], k.finger[1], k.cursor[0], k.cursor[1], k.target[0], k.target[1],
        ];
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, want: &[&str]) -> Result<(), DataError> {
    let h = rdr.headers()?;
    if h.iter().ne(want.iter().copied()) {
        return Err(DataError::Manifest(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            h.iter().collect::<Vec<_>>(),
            want
        )));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, line: u64, field: &str) -> Result<T, DataError> {
    field.trim().parse().map_err(|_| {
        DataError::Manifest(format!("{}:{line}: cannot parse {field:?}", path.display()))
    })
}

pub fn load_session(dir: &Path) -> Result<RawSession, DataError> {
    let manifest_path = required(dir, "manifest.json")?;
    let spikes_path = required(dir, "spikes.csv")?;
    let kin_path = required(dir, "kinematics.csv")?;

    let manifest: SessionManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != SESSION_FORMAT {
        return Err(DataError::Manifest(format!(
            "unsupported bundle format {:?}",
            manifest.format
        )));
    }
    if manifest.kin_rate_hz != KIN_RATE_HZ {
        return Err(DataError::Manifest(format!(
            "kinematic rate {} Hz, expected {KIN_RATE_HZ}",
            manifest.kin_rate_hz
        )));
    }

    let mut spike_events = vec![Vec::new(); manifest.num_channels];
    let mut rdr = csv::Reader::from_path(&spikes_path)?;
    check_header(&spikes_path, &mut rdr, &SPIKES_HEADER)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        if rec.len() != 2 {
            return Err(DataError::Manifest(format!("{}:{line}: expected 2 fields", spikes_path.display())));
        }
        let channel: usize = parse(&spikes_path, line, &rec[0])?;
        let t: f64 = parse(&spikes_path, line, &rec[1])?;
        let Some(list) = spike_events.get_mut(channel) else {
            return Err(DataError::ChannelOutOfRange {
                channel,
                num_channels: manifest.num_channels,
            });
        };
        list.push(t);
    }
    for (c, events) in spike_events.iter().enumerate() {
        check_ascending(c, events)?;
    }

    let mut kinematics = Vec::new();
    let mut rdr = csv::Reader::from_path(&kin_path)?;
    check_header(&kin_path, &mut rdr, &KIN_HEADER)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        if rec.len() != 7 {
            return Err(DataError::Manifest(format!("{}:{line}: expected 7 fields", kin_path.display())));
        }
        let mut v = [0.0; 7];
        for (dst, field) in v.iter_mut().zip(rec.iter()) {
            *dst = parse(&kin_path, line, field)?;
        }
        kinematics.push(KinematicSample {
            t_s: v[0],
            finger: [v[1], v[2]],
            cursor: [v[3], v[4]],
            target: [v[5], v[6]],
        });
    }

    let raw = RawSession {
        session_id: manifest.session_id,
        date_index: manifest.date_index,
        spike_events,
        kinematics,
        duration_s: manifest.duration_s,
    };
    raw.validate()?;
    Ok(raw)
}

/// Loads every bundle directly under `root`, ordered by `date_index`.
pub fn load_sessions(root: &Path) -> Result<Vec<RawSession>, DataError> {
    if root.join("manifest.json").is_file() {
        return Ok(vec![load_session(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::MissingFile(root.join("*/manifest.json")));
    }
    let mut out = dirs.iter().map(|d| load_session(d)).collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|s| s.date_index);
    Ok(out)
}
