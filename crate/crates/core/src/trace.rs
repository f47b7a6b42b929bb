//! Uniformly sampled power traces.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

/// Tank power sampled every `dt` seconds, W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub dt: f64,
    pub power: Vec<f64>,
}

impl PowerTrace {
    pub fn new(dt: f64, power: Vec<f64>) -> Self {
        Self { dt, power }
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.power.len().saturating_sub(1) as f64 * self.dt
    }

    /// Trapezoidal integral over the whole trace, J.
    pub fn trapezoid(&self) -> f64 {
        self.power
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]) * self.dt)
            .sum()
    }

    /// Cumulative trapezoidal energy plus the `epsilon` offset, one value per
    /// sample. The last value is the scheduled task energy.
    pub fn integrate_energy(&self, epsilon: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.power.len());
        let mut acc = 0.0;
        for (k, &p) in self.power.iter().enumerate() {
            if k > 0 {
                acc += 0.5 * (self.power[k - 1] + p) * self.dt;
            }
            out.push(acc + epsilon);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,power_W")?;
        for (k, p) in self.power.iter().enumerate() {
            writeln!(w, "{},{}", k as f64 * self.dt, p)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, String> {
        let mut times = Vec::new();
        let mut power = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if i == 0 {
                if line.trim() != "t,power_W" {
                    return Err(format!("line 1: unexpected header {line:?}"));
                }
                continue;
            }
            let mut it = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64, String> {
                s.ok_or_else(|| format!("line {}: missing field", i + 1))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format!("line {}: {e}", i + 1))
            };
            times.push(parse(it.next())?);
            power.push(parse(it.next())?);
        }
        let dt = if times.len() >= 2 { times[1] - times[0] } else { 0.0 };
        Ok(Self { dt, power })
    }
}
