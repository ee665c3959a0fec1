//! Trace files: `# key: value` metadata lines followed by a CSV table of
//! [`ErrorRecord`]s. Floats are written with 17 significant digits so a
//! write/read round trip is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::analysis::ErrorRecord;
use crate::error::{invalid, Error, Result};

/// Column order of every trace CSV.
pub const CSV_HEADER: [&str; 8] = [
    "step",
    "consensus_inf",
    "consensus_2",
    "optimality_inf",
    "total_inf",
    "consensus_bound",
    "ek_inf",
    "eps_avg_inf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub config_hash: String,
    pub algorithm: String,
    /// One seed for a single run, all of them for an aggregate.
    pub seeds: Vec<u64>,
    pub sigma2: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub t_mix: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub rows: Vec<ErrorRecord>,
}

pub(crate) fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl Trace {
    /// Steps must be strictly increasing.
    pub fn new(meta: TraceMeta, rows: Vec<ErrorRecord>) -> Result<Self> {
        if rows.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(invalid("trace steps must be strictly increasing"));
        }
        Ok(Self { meta, rows })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let m = &self.meta;
        let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "# config_hash: {}", m.config_hash)?;
        writeln!(out, "# algorithm: {}", m.algorithm)?;
        writeln!(out, "# seeds: {}", seeds.join(","))?;
        writeln!(out, "# sigma2: {}", format_float(m.sigma2))?;
        writeln!(out, "# d_min: {}", format_float(m.d_min))?;
        writeln!(out, "# d_max: {}", format_float(m.d_max))?;
        if let Some(t) = m.t_mix {
            writeln!(out, "# t_mix: {t}")?;
        }
        let mut csv = csv::Writer::from_writer(out);
        csv.write_record(CSV_HEADER)?;
        for r in &self.rows {
            csv.write_record([
                r.step.to_string(),
                format_float(r.consensus_inf),
                format_float(r.consensus_2),
                format_float(r.optimality_inf),
                format_float(r.total_inf),
                format_float(r.consensus_bound),
                format_float(r.ek_inf),
                format_float(r.eps_avg_inf),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut input: R) -> Result<Self> {
        let mut meta = MetaBuilder::default();
        let mut line = String::new();
        let mut table = String::new();
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                break;
            }
            match line.strip_prefix('#') {
                Some(rest) if table.is_empty() => meta.parse(rest.trim())?,
                _ => {
                    table.push_str(&line);
                    input.read_to_string(&mut table)?;
                    break;
                }
            }
        }
        let mut csv = csv::Reader::from_reader(table.as_bytes());
        let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(invalid(format!("unexpected trace header {header:?}")));
        }
        let rows = csv.deserialize().collect::<std::result::Result<Vec<ErrorRecord>, _>>()?;
        Self::new(meta.finish()?, rows)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn last(&self) -> Option<&ErrorRecord> {
        self.rows.last()
    }
}

/// Reads only the config hash from a trace file's header.
pub fn read_config_hash(path: &Path) -> Result<Option<String>> {
    let input = BufReader::new(File::open(path)?);
    for line in input.lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix('#') else { break };
        if let Some(hash) = rest.trim().strip_prefix("config_hash:") {
            return Ok(Some(hash.trim().to_string()));
        }
    }
    Ok(None)
}

#[derive(Default)]
struct MetaBuilder {
    config_hash: Option<String>,
    algorithm: Option<String>,
    seeds: Option<Vec<u64>>,
    sigma2: Option<f64>,
    d_min: Option<f64>,
    d_max: Option<f64>,
    t_mix: Option<usize>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("bad value {v:?} for {key}")))
}

impl MetaBuilder {
    fn parse(&mut self, line: &str) -> Result<()> {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| invalid(format!("malformed metadata line {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "config_hash" => self.config_hash = Some(value.to_string()),
            "algorithm" => self.algorithm = Some(value.to_string()),
            "seeds" => {
                let seeds = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| parse_num("seeds", s.trim())).collect::<Result<_>>()?
                };
                self.seeds = Some(seeds);
            }
            "sigma2" => self.sigma2 = Some(parse_num(key, value)?),
            "d_min" => self.d_min = Some(parse_num(key, value)?),
            "d_max" => self.d_max = Some(parse_num(key, value)?),
            "t_mix" => self.t_mix = Some(parse_num(key, value)?),
            // unknown keys are tolerated so annotations can be added by hand
            _ => {}
        }
        Ok(())
    }

    fn finish(self) -> Result<TraceMeta> {
        let missing = |k: &str| invalid(format!("trace metadata lacks {k}"));
        Ok(TraceMeta {
            config_hash: self.config_hash.ok_or_else(|| missing("config_hash"))?,
            algorithm: self.algorithm.ok_or_else(|| missing("algorithm"))?,
            seeds: self.seeds.ok_or_else(|| missing("seeds"))?,
            sigma2: self.sigma2.ok_or_else(|| missing("sigma2"))?,
            d_min: self.d_min.ok_or_else(|| missing("d_min"))?,
            d_max: self.d_max.ok_or_else(|| missing("d_max"))?,
            t_mix: self.t_mix,
        })
    }
}

/// Per-step arithmetic mean of runs that share a step grid. Metadata other
/// than the seeds is taken from the first trace.
pub fn aggregate(traces: &[Trace]) -> Result<Trace> {
    let first = traces.first().ok_or_else(|| invalid("nothing to aggregate"))?;
    for t in traces {
        let same_grid = t.rows.len() == first.rows.len() && t.rows.iter().zip(&first.rows).all(|(a, b)| a.step == b.step);
        if !same_grid {
            return Err(Error::Invalid("traces do not share a step grid".into()));
        }
    }
    let n = traces.len() as f64;
    let rows = (0..first.rows.len())
        .map(|k| {
            let mean = |f: fn(&ErrorRecord) -> f64| traces.iter().map(|t| f(&t.rows[k])).sum::<f64>() / n;
            ErrorRecord {
                step: first.rows[k].step,
                consensus_inf: mean(|r| r.consensus_inf),
                consensus_2: mean(|r| r.consensus_2),
                optimality_inf: mean(|r| r.optimality_inf),
                total_inf: mean(|r| r.total_inf),
                consensus_bound: mean(|r| r.consensus_bound),
                ek_inf: mean(|r| r.ek_inf),
                eps_avg_inf: mean(|r| r.eps_avg_inf),
            }
        })
        .collect();
    let mut meta = first.meta.clone();
    meta.seeds = traces.iter().flat_map(|t| t.meta.seeds.iter().copied()).collect();
    Trace::new(meta, rows)
}

/// Mean total error over the last 10% of rows (at least one row).
pub fn plateau(trace: &Trace) -> f64 {
    let n = trace.rows.len();
    let tail = (n / 10).max(1).min(n);
    trace.rows[n - tail..].iter().map(|r| r.total_inf).sum::<f64>() / tail as f64
}

/// First recorded step at which the total error is at most half its
/// initial value.
pub fn steps_to_half(trace: &Trace) -> Option<u64> {
    let initial = trace.rows.first()?.total_inf;
    trace.rows.iter().find(|r| r.total_inf <= 0.5 * initial).map(|r| r.step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> TraceMeta {
        TraceMeta {
            config_hash: "abc123".into(),
            algorithm: "dist_q".into(),
            seeds: vec![7],
            sigma2: 0.75,
            d_min: 0.125,
            d_max: 0.125,
            t_mix: Some(3),
        }
    }

    fn record(step: u64, x: f64) -> ErrorRecord {
        ErrorRecord {
            step,
            consensus_inf: x,
            consensus_2: 2.0 * x,
            optimality_inf: x / 3.0,
            total_inf: x + 1.0,
            consensus_bound: f64::NAN,
            ek_inf: x * 1e-300,
            eps_avg_inf: 0.1 + x,
        }
    }

    fn bits(r: &ErrorRecord) -> [u64; 7] {
        [
            r.consensus_inf.to_bits(),
            r.consensus_2.to_bits(),
            r.optimality_inf.to_bits(),
            r.total_inf.to_bits(),
            r.consensus_bound.to_bits(),
            r.ek_inf.to_bits(),
            r.eps_avg_inf.to_bits(),
        ]
    }

    #[test]
    fn header_is_fixed() {
        let t = Trace::new(meta(), vec![record(0, 1.0)]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(header, "step,consensus_inf,consensus_2,optimality_inf,total_inf,consensus_bound,ek_inf,eps_avg_inf");
        assert!(text.starts_with("# config_hash: abc123\n"));
    }

    #[test]
    fn rejects_unordered_steps() {
        assert!(Trace::new(meta(), vec![record(5, 1.0), record(5, 2.0)]).is_err());
    }

    #[test]
    fn rejects_wrong_header() {
        let text = "# config_hash: x\n# algorithm: qd\n# seeds: 1\n# sigma2: 0\n# d_min: 1\n# d_max: 1\nstep,total_inf\n0,1\n";
        assert!(Trace::read_from(text.as_bytes()).is_err());
    }

    #[test]
    fn aggregate_is_the_arithmetic_mean() {
        let a = Trace::new(meta(), vec![record(0, 1.0), record(10, 0.3)]).unwrap();
        let mut m = meta();
        m.seeds = vec![8];
        let b = Trace::new(m, vec![record(0, 2.0), record(10, 0.1)]).unwrap();
        let agg = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(agg.meta.seeds, vec![7, 8]);
        for k in 0..2 {
            let expected = (a.rows[k].total_inf + b.rows[k].total_inf) / 2.0;
            assert!((agg.rows[k].total_inf - expected).abs() <= 1e-12);
            assert!(agg.rows[k].consensus_bound.is_nan());
        }
        let short = Trace::new(meta(), vec![record(0, 1.0)]).unwrap();
        assert!(aggregate(&[a, short]).is_err());
    }

    #[test]
    fn summaries() {
        let rows: Vec<ErrorRecord> = (0..20).map(|k| record(k * 10, 10.0 / (k + 1) as f64)).collect();
        let t = Trace::new(meta(), rows).unwrap();
        // total = x + 1; initial 11, half 5.5 reached once x ≤ 4.5, i.e. k = 2
        assert_eq!(steps_to_half(&t), Some(20));
        let expected = (t.rows[18].total_inf + t.rows[19].total_inf) / 2.0;
        assert_eq!(plateau(&t), expected);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            values in prop::collection::vec(prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(0.0), Just(f64::MIN_POSITIVE)], 1..30),
            t_mix in prop::option::of(0usize..1000),
        ) {
            let rows: Vec<ErrorRecord> = values.iter().enumerate().map(|(k, &v)| record(k as u64 * 3, v)).collect();
            let mut m = meta();
            m.t_mix = t_mix;
            let trace = Trace::new(m, rows).unwrap();
            let mut buf = Vec::new();
            trace.write_to(&mut buf).unwrap();
            let back = Trace::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(&back.meta, &trace.meta);
            prop_assert_eq!(back.rows.len(), trace.rows.len());
            for (a, b) in back.rows.iter().zip(&trace.rows) {
                prop_assert_eq!(a.step, b.step);
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }
}
