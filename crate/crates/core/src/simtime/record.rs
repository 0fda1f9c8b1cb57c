use std::fmt::Write as _;

use crate::{Error, Result};

/// Uniformly sampled waveforms of one run, stored channel by channel.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveRecord {
    pub names: Vec<String>,
    pub data: Vec<Vec<f64>>,
    pub sample_rate: f64,
    /// The run stopped early because a state left its admissible range.
    pub divergent: bool,
    pub saturation_events: usize,
}

impl WaveRecord {
    pub fn new(names: Vec<String>, sample_rate: f64) -> Self {
        let data = vec![Vec::new(); names.len()];
        Self {
            names,
            data,
            sample_rate,
            divergent: false,
            saturation_events: 0,
        }
    }

    pub(crate) fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.data.len());
        for (c, &v) in self.data.iter_mut().zip(row) {
            c.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(&self.data[k])
    }

    pub fn time(&self) -> &[f64] {
        &self.data[0]
    }

    /// Samples with `t ≥ t0`, as a sub-record.
    pub fn slice_from(&self, t0: f64) -> WaveRecord {
        let start = self.time().partition_point(|&t| t < t0);
        WaveRecord {
            names: self.names.clone(),
            data: self.data.iter().map(|c| c[start..].to_vec()).collect(),
            sample_rate: self.sample_rate,
            divergent: self.divergent,
            saturation_events: self.saturation_events,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# sample_rate_hz={} divergent={} saturation_events={}",
            self.sample_rate, self.divergent, self.saturation_events
        );
        s.push_str(&self.names.join(","));
        s.push('\n');
        for k in 0..self.len() {
            for (j, c) in self.data.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}", c[k]);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.into(),
        };
        let (_, pre) = lines.next().ok_or_else(|| parse_err(0, "empty file"))?;
        let pre = pre
            .strip_prefix('#')
            .ok_or_else(|| parse_err(0, "missing preamble"))?;
        let mut rec = WaveRecord::new(Vec::new(), 0.0);
        for kv in pre.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| parse_err(0, "bad preamble entry"))?;
            match k {
                "sample_rate_hz" => {
                    rec.sample_rate = v.parse().map_err(|_| parse_err(0, "bad sample rate"))?
                }
                "divergent" => rec.divergent = v == "true",
                "saturation_events" => {
                    rec.saturation_events = v.parse().map_err(|_| parse_err(0, "bad count"))?
                }
                _ => {}
            }
        }
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
        rec.names = header.split(',').map(|s| s.trim().to_string()).collect();
        rec.data = vec![Vec::new(); rec.names.len()];
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(n, &e.to_string()))?;
            if row.len() != rec.names.len() {
                return Err(parse_err(n, "wrong field count"));
            }
            rec.push_row(&row);
        }
        Ok(rec)
    }
}
