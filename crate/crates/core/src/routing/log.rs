use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

pub const ROUTING_SCHEMA_VERSION: u32 = 1;

/// Per-layer routing records in token order.
///
/// `experts` and `gates` hold `top_k` entries per token, experts ascending.
/// `affinities`, when retained, holds `n_experts` entries per token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerRecords {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
    pub affinities: Option<Vec<f64>>,
}

/// Routing decisions of a model over a corpus, one record per token and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLog {
    pub task_label: String,
    pub n_layers: usize,
    pub n_experts: usize,
    /// Routed experts recorded per token (the active count in grouped mode).
    pub top_k: usize,
    /// Length of each sample; sums to the token count.
    pub sample_lengths: Vec<usize>,
    layers: Vec<LayerRecords>,
}

impl RoutingLog {
    pub fn new(
        task_label: impl Into<String>,
        n_layers: usize,
        n_experts: usize,
        top_k: usize,
        retain_affinities: bool,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerRecords {
                affinities: retain_affinities.then(Vec::new),
                ..LayerRecords::default()
            })
            .collect();
        RoutingLog {
            task_label: task_label.into(),
            n_layers,
            n_experts,
            top_k,
            sample_lengths: Vec::new(),
            layers,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sample_lengths.iter().sum()
    }

    pub fn layer(&self, l: usize) -> &LayerRecords {
        &self.layers[l]
    }

    pub fn retains_affinities(&self) -> bool {
        self.layers.first().is_some_and(|l| l.affinities.is_some())
    }

    /// Expert ids and gate values of token `t` in layer `l`.
    pub fn token(&self, l: usize, t: usize) -> (&[usize], &[f64]) {
        let k = self.top_k;
        let rec = &self.layers[l];
        (&rec.experts[t * k..(t + 1) * k], &rec.gates[t * k..(t + 1) * k])
    }

    pub fn token_affinities(&self, l: usize, t: usize) -> Option<&[f64]> {
        let n = self.n_experts;
        self.layers[l]
            .affinities
            .as_ref()
            .map(|a| &a[t * n..(t + 1) * n])
    }

    /// Appends one token's record for layer `l`.
    pub fn push_token(
        &mut self,
        l: usize,
        experts: &[usize],
        gates: &[f64],
        affinities: Option<&[f64]>,
    ) -> Result<()> {
        if experts.len() != self.top_k || gates.len() != self.top_k {
            return Err(input_err!(
                "token record has {} entries, log expects {}",
                experts.len(),
                self.top_k
            ));
        }
        if l >= self.n_layers {
            return Err(input_err!("layer {l} out of range"));
        }
        if experts.iter().any(|&e| e >= self.n_experts) {
            return Err(input_err!("expert id out of range in layer {l}"));
        }
        if gates.iter().any(|g| !(*g >= 0.0)) {
            return Err(input_err!("negative gate value in layer {l}"));
        }
        let rec = &mut self.layers[l];
        rec.experts.extend_from_slice(experts);
        rec.gates.extend_from_slice(gates);
        if let (Some(dst), Some(src)) = (rec.affinities.as_mut(), affinities) {
            dst.extend_from_slice(src);
        }
        Ok(())
    }

    /// Closes a sample of `len` tokens; all layers must hold records for it.
    pub fn end_sample(&mut self, len: usize) -> Result<()> {
        self.sample_lengths.push(len);
        self.validate()
    }

    /// Checks the per-layer record counts against the sample lengths.
    pub fn validate(&self) -> Result<()> {
        let tokens = self.token_count();
        for (l, rec) in self.layers.iter().enumerate() {
            if rec.experts.len() != tokens * self.top_k || rec.gates.len() != tokens * self.top_k {
                return Err(input_err!(
                    "layer {l} holds {} entries, expected {}",
                    rec.experts.len(),
                    tokens * self.top_k
                ));
            }
            if let Some(a) = &rec.affinities {
                if a.len() != tokens * self.n_experts {
                    return Err(input_err!("layer {l} affinity rows incomplete"));
                }
            }
        }
        Ok(())
    }

    /// Sample boundaries as `(start, end)` token ranges.
    pub fn sample_ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.sample_lengths
            .iter()
            .map(|&len| {
                let r = (start, start + len);
                start += len;
                r
            })
            .collect()
    }

    /// Restricts the log to the given samples (in that order).
    pub fn select_samples(&self, samples: &[usize]) -> RoutingLog {
        let ranges = self.sample_ranges();
        let mut out = RoutingLog::new(
            self.task_label.clone(),
            self.n_layers,
            self.n_experts,
            self.top_k,
            self.retains_affinities(),
        );
        for &s in samples {
            let (a, b) = ranges[s];
            for l in 0..self.n_layers {
                for t in a..b {
                    let (e, g) = self.token(l, t);
                    out.push_token(l, e, g, self.token_affinities(l, t))
                        .expect("records from a valid log");
                }
            }
            out.sample_lengths.push(b - a);
        }
        out
    }

    /// Keeps the first `n` tokens, shortening the sample list to match.
    pub fn truncate_tokens(mut self, n: usize) -> RoutingLog {
        let n = n.min(self.token_count());
        let (k, e) = (self.top_k, self.n_experts);
        for rec in &mut self.layers {
            rec.experts.truncate(n * k);
            rec.gates.truncate(n * k);
            if let Some(a) = rec.affinities.as_mut() {
                a.truncate(n * e);
            }
        }
        let mut left = n;
        let mut lengths = Vec::new();
        for &len in &self.sample_lengths {
            if left == 0 {
                break;
            }
            lengths.push(len.min(left));
            left -= len.min(left);
        }
        self.sample_lengths = lengths;
        self
    }

    /// Appends all samples of `other`, which must have the same shape.
    pub fn merge(&mut self, other: &RoutingLog) -> Result<()> {
        if (self.n_layers, self.n_experts, self.top_k)
            != (other.n_layers, other.n_experts, other.top_k)
        {
            return Err(input_err!("cannot merge routing logs of different shapes"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.experts.extend_from_slice(&src.experts);
            dst.gates.extend_from_slice(&src.gates);
            match (dst.affinities.as_mut(), src.affinities.as_ref()) {
                (Some(d), Some(s)) => d.extend_from_slice(s),
                (Some(_), None) => dst.affinities = None,
                _ => {}
            }
        }
        self.sample_lengths.extend_from_slice(&other.sample_lengths);
        Ok(())
    }

    /// Writes the line-delimited format: a header line, then one line per
    /// (layer, token) in layer-major order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = LogHeader {
            schema_version: ROUTING_SCHEMA_VERSION,
            task_label: self.task_label.clone(),
            n_layers: self.n_layers,
            n_experts: self.n_experts,
            top_k: self.top_k,
            sample_lengths: self.sample_lengths.clone(),
            affinities: self.retains_affinities(),
        };
        let io = |e| Error::io("routing log", e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for l in 0..self.n_layers {
            for t in 0..self.token_count() {
                let (experts, gates) = self.token(l, t);
                let rec = TokenLine {
                    layer: l,
                    token: t,
                    experts: experts.to_vec(),
                    gates: gates.to_vec(),
                    affinities: self.token_affinities(l, t).map(<[f64]>::to_vec),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| input_err!("empty routing log"))?;
        let first = first.map_err(|e| Error::io("routing log", e))?;
        let header: LogHeader = serde_json::from_str(&first)
            .map_err(|e| input_err!("routing log line 1: {e}"))?;
        if header.schema_version != ROUTING_SCHEMA_VERSION {
            return Err(input_err!(
                "unsupported routing log schema_version {}",
                header.schema_version
            ));
        }
        let mut log = RoutingLog::new(
            header.task_label,
            header.n_layers,
            header.n_experts,
            header.top_k,
            header.affinities,
        );
        log.sample_lengths = header.sample_lengths;
        let tokens = log.token_count();
        let mut expected = (0, 0);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("routing log", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TokenLine = serde_json::from_str(&line)
                .map_err(|e| input_err!("routing log line {}: {e}", i + 1))?;
            if (rec.layer, rec.token) != expected {
                return Err(input_err!(
                    "routing log line {}: expected layer {} token {}",
                    i + 1,
                    expected.0,
                    expected.1
                ));
            }
            log.push_token(rec.layer, &rec.experts, &rec.gates, rec.affinities.as_deref())
                .map_err(|e| input_err!("routing log line {}: {e}", i + 1))?;
            expected.1 += 1;
            if expected.1 == tokens {
                expected = (expected.0 + 1, 0);
            }
        }
        log.validate()?;
        Ok(log)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogHeader {
    schema_version: u32,
    task_label: String,
    n_layers: usize,
    n_experts: usize,
    top_k: usize,
    sample_lengths: Vec<usize>,
    affinities: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenLine {
    layer: usize,
    token: usize,
    experts: Vec<usize>,
    gates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    affinities: Option<Vec<f64>>,
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Builds a single-layer log from per-sample token records.
    pub fn log_from(n_experts: usize, top_k: usize, samples: &[Vec<(Vec<usize>, Vec<f64>)>]) -> RoutingLog {
        let mut log = RoutingLog::new("fixture", 1, n_experts, top_k, false);
        for s in samples {
            for (e, g) in s {
                log.push_token(0, e, g, None).unwrap();
            }
            log.end_sample(s.len()).unwrap();
        }
        log
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::log_from;
    use super::*;

    #[test]
    fn jsonl_round_trip_is_exact() {
        let mut log = RoutingLog::new("t", 2, 4, 2, true);
        let aff = [0.1, 0.2, 0.3, 0.4];
        for l in 0..2 {
            log.push_token(l, &[2, 3], &[0.3, 0.4], Some(&aff)).unwrap();
            log.push_token(l, &[0, 1], &[1.0 / 3.0, 0.1 + 0.2], Some(&aff)).unwrap();
        }
        log.end_sample(2).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = RoutingLog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn rejects_wrong_entry_count() {
        let mut log = RoutingLog::new("t", 1, 4, 2, false);
        assert!(log.push_token(0, &[1], &[0.5], None).is_err());
        assert!(log.push_token(0, &[1, 2], &[-0.1, 0.5], None).is_err());
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = format!(
            "{}\nnot json\n",
            r#"{"schema_version":1,"task_label":"t","n_layers":1,"n_experts":2,"top_k":1,"sample_lengths":[1],"affinities":false}"#
        );
        let err = RoutingLog::read_jsonl(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn select_samples_keeps_records() {
        let log = log_from(
            3,
            1,
            &[
                vec![(vec![0], vec![0.5])],
                vec![(vec![1], vec![0.6]), (vec![2], vec![0.7])],
            ],
        );
        let sub = log.select_samples(&[1]);
        assert_eq!(sub.token_count(), 2);
        assert_eq!(sub.token(0, 1), (&[2usize][..], &[0.7][..]));
    }
}
